use rand::Rng;

use super::{join, Module, Param};
use crate::tensor::Tensor;

/// `c (m×n) = alpha · a (m×k) · b (k×n) + beta · c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every index the kernel touches is < len of the respective
    // slice given the row/column strides asserted by the callers below.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.output.iter().product()
    }
}

fn out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(side + 2 * pad >= k, "convolution kernel larger than padded input");
    (side + 2 * pad - k) / stride + 1
}

/// Output columns `lo..hi` whose tap `kx` lands inside `0..w`.
fn valid_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride).min(ow);
    // ox * stride + kx - pad < w  <=>  ox * stride < w + pad - kx
    let hi = if w + pad <= kx { 0 } else { (w + pad - kx).div_ceil(stride).min(ow) };
    (lo, hi.max(lo))
}

/// Unfolds one sample into a `(cin·k³) × (out voxels)` matrix.
fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let ncols = g.cols();
    let k = g.k;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let seg = &mut dst[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let src = &xc[(iz as usize * h + iy as usize) * w..][..w];
                            let (lo, hi) = valid_range(ow, w, g.stride, kx, g.pad);
                            seg[..lo].fill(0.0);
                            seg[hi..].fill(0.0);
                            if g.stride == 1 {
                                let start = lo + kx - g.pad;
                                seg[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                            } else {
                                for (ox, v) in seg.iter_mut().enumerate().take(hi).skip(lo) {
                                    *v = src[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into the input layout.
fn col2im(col: &[f32], g: &Geometry, dx: &mut [f32]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let ncols = g.cols();
    let k = g.k;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((ci * k + kz) * k + ky) * k + kx;
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for oz in 0..od {
                        let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let seg = &src[(oz * oh + oy) * ow..(oz * oh + oy + 1) * ow];
                            let dst = &mut xc[(iz as usize * h + iy as usize) * w..][..w];
                            let (lo, hi) = valid_range(ow, w, g.stride, kx, g.pad);
                            if g.stride == 1 {
                                let start = lo + kx - g.pad;
                                for (d, v) in dst[start..start + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                                    *d += v;
                                }
                            } else {
                                for ox in lo..hi {
                                    dst[ox * g.stride + kx - g.pad] += seg[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cubic 3-D convolution with zero padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = cin * k * k * k;
        Conv3d {
            weight: Param::he_normal(&[cout, cin, k, k, k], fan_in, rng),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|s| out_side(s, self.k, self.stride, self.pad))
    }

    fn geometry(&self, input: [usize; 3]) -> Geometry {
        Geometry {
            cin: self.cin,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            input,
            output: self.output_spatial(input),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.channels(), self.cin, "conv input channel mismatch");
        let g = self.geometry(x.spatial());
        let [od, oh, ow] = g.output;
        let mut y = Tensor::zeros([x.batch(), self.cout, od, oh, ow]);
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        for n in 0..x.batch() {
            let b: &[f32] = if self.is_pointwise() {
                x.sample(n)
            } else {
                im2col(x.sample(n), &g, &mut col);
                &col
            };
            let out = y.sample_mut(n);
            for (o, chunk) in out.chunks_mut(cols).enumerate() {
                chunk.fill(self.bias.value[o]);
            }
            gemm(self.cout, rows, cols, &self.weight.value, (rows, 1), b, (cols, 1), 1.0, out);
        }
        self.input = if cache { Some(x.clone()) } else { None };
        y
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.input.take().expect("conv backward without cached forward");
        let g = self.geometry(x.spatial());
        let (rows, cols) = (g.rows(), g.cols());
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
        let mut dcol = if need_input_grad { vec![0.0; rows * cols] } else { Vec::new() };
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for n in 0..x.batch() {
            let dys = dy.sample(n);
            for (o, chunk) in dys.chunks(cols).enumerate() {
                self.bias.grad[o] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
            let b: &[f32] = if self.is_pointwise() {
                x.sample(n)
            } else {
                im2col(x.sample(n), &g, &mut col);
                &col
            };
            // dW += dY · colᵀ
            gemm(self.cout, cols, rows, dys, (cols, 1), b, (1, cols), 1.0, &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                // dcol = Wᵀ · dY
                if self.is_pointwise() {
                    gemm(rows, self.cout, cols, &self.weight.value, (1, rows), dys, (cols, 1), 0.0, dx.sample_mut(n));
                } else {
                    gemm(rows, self.cout, cols, &self.weight.value, (1, rows), dys, (cols, 1), 0.0, &mut dcol);
                    col2im(&dcol, &g, dx.sample_mut(n));
                }
            }
        }
        dx
    }
}

impl Module for Conv3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transposed convolution with kernel 2 and stride 2 (exact 2× upsampling).
#[derive(Clone, Debug)]
pub struct ConvTranspose3d {
    /// Layout `(cin, cout, 2, 2, 2)`.
    pub weight: Param,
    pub bias: Param,
    cin: usize,
    cout: usize,
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        ConvTranspose3d {
            weight: Param::he_normal(&[cin, cout, 2, 2, 2], cin, rng),
            bias: Param::zeros(&[cout]),
            cin,
            cout,
            input: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        assert_eq!(x.channels(), self.cin, "transposed conv input channel mismatch");
        let [d, h, w] = x.spatial();
        let ni = d * h * w;
        let q = self.cout * 8;
        let mut y = Tensor::zeros([x.batch(), self.cout, 2 * d, 2 * h, 2 * w]);
        let mut t = vec![0.0f32; q * ni];
        for n in 0..x.batch() {
            // T (q × ni) = Wᵀ · X
            gemm(q, self.cin, ni, &self.weight.value, (1, q), x.sample(n), (ni, 1), 0.0, &mut t);
            let out = y.sample_mut(n);
            scatter_upsample(&t, out, self.cout, [d, h, w], &self.bias.value);
        }
        self.input = if cache { Some(x.clone()) } else { None };
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.input.take().expect("transposed conv backward without cached forward");
        let [d, h, w] = x.spatial();
        let ni = d * h * w;
        let q = self.cout * 8;
        let mut dt = vec![0.0f32; q * ni];
        let mut dx = Tensor::zeros(x.shape());
        for n in 0..x.batch() {
            let dys = dy.sample(n);
            let vo = 8 * ni;
            for o in 0..self.cout {
                self.bias.grad[o] +=
                    dys[o * vo..(o + 1) * vo].iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
            gather_upsample(dys, &mut dt, self.cout, [d, h, w]);
            // dW (cin × q) += X · dTᵀ
            gemm(self.cin, ni, q, x.sample(n), (ni, 1), &dt, (1, ni), 1.0, &mut self.weight.grad);
            // dX (cin × ni) = W · dT
            gemm(self.cin, q, ni, &self.weight.value, (q, 1), &dt, (ni, 1), 0.0, dx.sample_mut(n));
        }
        dx
    }
}

fn scatter_upsample(t: &[f32], out: &mut [f32], cout: usize, [d, h, w]: [usize; 3], bias: &[f32]) {
    let ni = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let vo = 8 * ni;
    for o in 0..cout {
        let oc = &mut out[o * vo..(o + 1) * vo];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let row = &t[(o * 8 + a * 4 + b * 2 + c) * ni..][..ni];
                    for z in 0..d {
                        for y in 0..h {
                            let base = ((2 * z + a) * oh + 2 * y + b) * ow + c;
                            let src = &row[(z * h + y) * w..][..w];
                            for (x, v) in src.iter().enumerate() {
                                oc[base + 2 * x] = v + bias[o];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn gather_upsample(dy: &[f32], dt: &mut [f32], cout: usize, [d, h, w]: [usize; 3]) {
    let ni = d * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let vo = 8 * ni;
    for o in 0..cout {
        let oc = &dy[o * vo..(o + 1) * vo];
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let row = &mut dt[(o * 8 + a * 4 + b * 2 + c) * ni..][..ni];
                    for z in 0..d {
                        for y in 0..h {
                            let base = ((2 * z + a) * oh + 2 * y + b) * ow + c;
                            let dst = &mut row[(z * h + y) * w..][..w];
                            for (x, v) in dst.iter_mut().enumerate() {
                                *v = oc[base + 2 * x];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Module for ConvTranspose3d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as an independent reference.
    fn naive_conv(x: &Tensor, conv: &Conv3d) -> Tensor {
        let [n, cin, d, h, w] = x.shape();
        let [od, oh, ow] = conv.output_spatial([d, h, w]);
        let (k, s, p) = (conv.k, conv.stride, conv.pad as isize);
        let mut y = Tensor::zeros([n, conv.cout, od, oh, ow]);
        for b in 0..n {
            for o in 0..conv.cout {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = conv.bias.value[o] as f64;
                            for i in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (z * s + kz) as isize - p;
                                            let iy = (yy * s + ky) as isize - p;
                                            let ix = (xx * s + kx) as isize - p;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= w {
                                                continue;
                                            }
                                            let wv = conv.weight.value[(((o * cin + i) * k + kz) * k + ky) * k + kx];
                                            acc += wv as f64
                                                * x.channel(b, i)[(iz * h + iy) * w + ix] as f64;
                                        }
                                    }
                                }
                            }
                            y.channel_mut(b, o)[(z * oh + yy) * ow + xx] = acc as f32;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(2, 3, k, stride, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = random_tensor([2, 2, 4, 6, 5], &mut rng);
            let fast = conv.forward(&x, false);
            let slow = naive_conv(&x, &conv);
            assert!(fast.max_abs_diff(&slow) < 1e-5, "k={k} stride={stride}");
        }
    }

    /// `⟨dy, conv(x)⟩` has gradient `backward(dy)`; check against a
    /// central difference in f64 on a few coordinates.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (k, stride) in [(3, 1), (3, 2), (1, 1)] {
            let mut conv = Conv3d::new(2, 2, k, stride, &mut rng);
            let x = random_tensor([1, 2, 4, 4, 4], &mut rng);
            let y = conv.forward(&x, true);
            let dy = random_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&dy, true).unwrap();
            let objective = |conv: &Conv3d, x: &Tensor| -> f64 {
                let y = naive_conv(x, conv);
                y.data().iter().zip(dy.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
            };
            let eps = 1e-2f32;
            for idx in [0, 17, 63, 100] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data()[idx] as f64).abs() < 1e-3, "dx k={k} s={stride}");
            }
            for idx in [0, conv.weight.len() / 2, conv.weight.len() - 1] {
                let mut cp = conv.clone();
                cp.weight.value[idx] += eps;
                let mut cm = conv.clone();
                cm.weight.value[idx] -= eps;
                let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps as f64);
                assert!((fd - conv.weight.grad[idx] as f64).abs() < 1e-3, "dw k={k} s={stride}");
            }
        }
    }

    #[test]
    fn transposed_conv_places_kernel_taps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = ConvTranspose3d::new(1, 1, &mut rng);
        up.weight.value = (0..8).map(|v| v as f32).collect();
        up.bias.value = vec![0.5];
        let x = Tensor::from_vec([1, 1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = up.forward(&x, false);
        assert_eq!(y.spatial(), [2, 2, 4]);
        // voxel (a, b, 2x + c) = w[a, b, c] * x + bias
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 1.5);
        assert_eq!(y.data()[2], 0.5);
        assert_eq!(y.data()[3], 2.5);
        assert_eq!(y.data()[4 + 4 * 2 + 3], 7.0 * 2.0 + 0.5);
    }

    #[test]
    fn transposed_conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut up = ConvTranspose3d::new(3, 2, &mut rng);
        let x = random_tensor([2, 3, 2, 3, 2], &mut rng);
        let y = up.forward(&x, true);
        let dy = random_tensor(y.shape(), &mut rng);
        let dx = up.backward(&dy);
        // ⟨dy, A x⟩ = ⟨Aᵀ dy, x⟩ for the bias-free part
        let mut nobias = up.clone();
        nobias.bias.value.fill(0.0);
        let ax = nobias.forward(&x, false);
        let lhs: f64 = ax.data().iter().zip(dy.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }
}
