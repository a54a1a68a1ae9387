use rand::Rng;

use super::{join, BatchNorm3d, Conv3d, Mode, Module, Param, Relu};
use crate::tensor::Tensor;

/// 3-D convolution, batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    relu: Relu,
}

impl ConvBnRelu {
    pub fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ConvBnRelu { conv: Conv3d::new(cin, cout, 3, stride, rng), bn: BatchNorm3d::new(cout), relu: Relu::default() }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let train = mode == Mode::Train;
        let h = self.conv.forward(x, train);
        let h = self.bn.forward(&h, train, train);
        self.relu.forward(h, train)
    }

    pub fn backward(&mut self, dy: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d, need_input_grad)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }
}

impl Module for ConvBnRelu {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}
