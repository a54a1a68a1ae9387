use crate::tensor::Tensor;

/// Rectifier that remembers which units were active.
#[derive(Debug, Default, Clone)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, cache: bool) -> Tensor {
        let data = x.data_mut();
        if cache {
            self.active = Some(data.iter().map(|&v| v > 0.0).collect());
        }
        data.iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut dy: Tensor) -> Tensor {
        let active = self.active.take().expect("relu backward without forward");
        for (g, a) in dy.data_mut().iter_mut().zip(active) {
            if !a {
                *g = 0.0;
            }
        }
        dy
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}
