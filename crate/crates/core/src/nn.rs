//! Minimal layer primitives with hand-written reverse passes: 3×3 convolution
//! (stride 1 or 2, zero padding 1), nearest-neighbour ×2 upsampling, channel
//! concatenation and pointwise activations. Convolutions lower to GEMM via
//! im2col.

/// Channel-major C×H×W activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_planes(planes: &[&[f64]], height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            debug_assert_eq!(p.len(), height * width);
            data.extend_from_slice(p);
        }
        Self {
            channels: planes.len(),
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.height, a.width), (b.height, b.width));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            channels: a.channels + b.channels,
            height: a.height,
            width: a.width,
            data,
        }
    }

    /// Splits off the first `first` channels (inverse of [`concat`](Self::concat)).
    pub fn split(&self, first: usize) -> (Tensor, Tensor) {
        let n = self.plane_len();
        (
            Tensor {
                channels: first,
                height: self.height,
                width: self.width,
                data: self.data[..first * n].to_vec(),
            },
            Tensor {
                channels: self.channels - first,
                height: self.height,
                width: self.width,
                data: self.data[first * n..].to_vec(),
            },
        )
    }
}

/// Placement of one convolution's weights (`cout × cin × 3 × 3`) and biases
/// (`cout`) inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvSpec {
    pub fn fan_in(&self) -> usize {
        self.cin * 9
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Pre-activation output.
    pub fn forward(&self, params: &[f64], input: &Tensor) -> Tensor {
        debug_assert_eq!(input.channels, self.cin);
        let (oh, ow) = self.out_size(input.height, input.width);
        let k = self.fan_in();
        let p = oh * ow;
        let col = im2col(input, self.stride, oh, ow);
        let weights = &params[self.weight_offset..self.weight_offset + self.weight_len()];
        let bias = &params[self.bias_offset..self.bias_offset + self.cout];
        let mut out = Tensor::zeros(self.cout, oh, ow);
        for (co, chunk) in out.data.chunks_mut(p).enumerate() {
            chunk.fill(bias[co]);
        }
        gemm(self.cout, k, p, weights, (k, 1), &col, (p, 1), &mut out.data, 1.0);
        out
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to `input`.
    pub fn backward(
        &self,
        params: &[f64],
        input: &Tensor,
        grad_out: &Tensor,
        grads: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Tensor> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let k = self.fan_in();
        let p = oh * ow;
        let col = im2col(input, self.stride, oh, ow);
        {
            let gw = &mut grads[self.weight_offset..self.weight_offset + self.weight_len()];
            // dW = dOut · colᵀ
            gemm(self.cout, p, k, &grad_out.data, (p, 1), &col, (1, p), gw, 1.0);
        }
        {
            let gb = &mut grads[self.bias_offset..self.bias_offset + self.cout];
            for (co, chunk) in grad_out.data.chunks(p).enumerate() {
                gb[co] += chunk.iter().sum::<f64>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let weights = &params[self.weight_offset..self.weight_offset + self.weight_len()];
        let mut dcol = vec![0.0; k * p];
        // dcol = Wᵀ · dOut
        gemm(k, self.cout, p, weights, (1, k), &grad_out.data, (p, 1), &mut dcol, 0.0);
        Some(col2im(&dcol, input.channels, input.height, input.width, self.stride, oh, ow))
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: extents are checked by the callers' shapes; matrixmultiply reads
    // a (m×k) and b (k×n) through the given strides and writes c (m×n) row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds 3×3 patches into a `(C·9) × (oh·ow)` matrix.
fn im2col(input: &Tensor, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (h, w) = (input.height as isize, input.width as isize);
    let p = oh * ow;
    let mut col = vec![0.0; input.channels * 9 * p];
    for ci in 0..input.channels {
        let src = input.channel(ci);
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ci * 9 + (ky * 3 + kx) as usize) * p;
                let dst = &mut col[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky - 1;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let srow = &src[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if stride == 1 {
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { ow - 1 } else { ow };
                        for ox in lo..hi {
                            drow[ox] = srow[(ox as isize + kx - 1) as usize];
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride) as isize + kx - 1;
                            if ix >= 0 && ix < w {
                                *d = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input grid.
fn col2im(dcol: &[f64], channels: usize, h: usize, w: usize, stride: usize, oh: usize, ow: usize) -> Tensor {
    let p = oh * ow;
    let mut out = Tensor::zeros(channels, h, w);
    let n = h * w;
    for ci in 0..channels {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row = (ci * 9 + (ky * 3 + kx) as usize) * p;
                let src = &dcol[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * stride) as isize + ky - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in srow.iter().enumerate() {
                        let ix = (ox * stride) as isize + kx - 1;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn leaky_relu_inplace(t: &mut Tensor, slope: f64) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

/// Gradient through a leaky ReLU given its output (sign is preserved).
pub fn leaky_relu_backward(output: &Tensor, grad: &mut Tensor, slope: f64) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < 0.0 {
            *g *= slope;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        *v = sigmoid(*v);
    }
}

pub fn sigmoid_backward(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        *g *= y * (1.0 - y);
    }
}

pub fn upsample2(t: &Tensor) -> Tensor {
    let (h, w) = (t.height * 2, t.width * 2);
    let mut out = Tensor::zeros(t.channels, h, w);
    for c in 0..t.channels {
        let src = t.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * t.width + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad: &Tensor) -> Tensor {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Tensor::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..grad.height {
            for x in 0..grad.width {
                dst[(y / 2) * w + x / 2] += src[y * grad.width + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn naive_conv(spec: &ConvSpec, params: &[f64], x: &Tensor) -> Tensor {
        let (oh, ow) = spec.out_size(x.height, x.width);
        let mut out = Tensor::zeros(spec.cout, oh, ow);
        for co in 0..spec.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = params[spec.bias_offset + co];
                    for ci in 0..spec.cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * spec.stride + ky) as isize - 1;
                                let ix = (ox * spec.stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                    continue;
                                }
                                let wv = params[spec.weight_offset + ((co * spec.cin + ci) * 3 + ky) * 3 + kx];
                                acc += wv * x.data[(ci * x.height + iy as usize) * x.width + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn spec(cin: usize, cout: usize, stride: usize) -> ConvSpec {
        ConvSpec {
            name: "t".into(),
            cin,
            cout,
            stride,
            weight_offset: 0,
            bias_offset: cout * cin * 9,
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        for stride in [1, 2] {
            let s = spec(3, 4, stride);
            let params = rand_vec(1, s.param_len());
            let x = Tensor {
                channels: 3,
                height: 6,
                width: 8,
                data: rand_vec(2, 3 * 48),
            };
            let a = s.forward(&params, &x);
            let b = naive_conv(&s, &params, &x);
            assert_eq!((a.height, a.width), (b.height, b.width));
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1, 2] {
            let s = spec(2, 3, stride);
            let params = rand_vec(3, s.param_len());
            let x = Tensor {
                channels: 2,
                height: 6,
                width: 6,
                data: rand_vec(4, 72),
            };
            let (oh, ow) = s.out_size(6, 6);
            let wout = rand_vec(5, 3 * oh * ow);
            let loss = |p: &[f64], x: &Tensor| -> f64 {
                s.forward(p, x).data.iter().zip(&wout).map(|(a, b)| a * b).sum()
            };
            let go = Tensor {
                channels: 3,
                height: oh,
                width: ow,
                data: wout.clone(),
            };
            let mut grads = vec![0.0; params.len()];
            let gx = s.backward(&params, &x, &go, &mut grads, true).unwrap();
            let eps = 1e-6;
            for i in 0..params.len() {
                let mut pp = params.clone();
                pp[i] += eps;
                let mut pm = params.clone();
                pm[i] -= eps;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * eps);
                assert!((fd - grads[i]).abs() < 1e-7, "param {i}: {fd} vs {}", grads[i]);
            }
            for i in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&params, &xp) - loss(&params, &xm)) / (2.0 * eps);
                assert!((fd - gx.data[i]).abs() < 1e-7, "input {i}");
            }
        }
    }

    #[test]
    fn upsample_adjoint() {
        let x = Tensor {
            channels: 2,
            height: 3,
            width: 4,
            data: rand_vec(6, 24),
        };
        let y = Tensor {
            channels: 2,
            height: 6,
            width: 8,
            data: rand_vec(7, 96),
        };
        let lhs: f64 = upsample2(&x).data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&upsample2_backward(&y).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = Tensor::zeros(2, 3, 3);
        let mut b = Tensor::zeros(1, 3, 3);
        b.data[4] = 7.0;
        let c = Tensor::concat(&a, &b);
        assert_eq!(c.channels, 3);
        let (x, y) = c.split(2);
        assert_eq!(x, a);
        assert_eq!(y, b);
    }
}
