//! Minimal layer library with hand-written backward passes.
//!
//! Layers take `&self` in forward and return whatever they need for the
//! backward pass; backward takes `&mut self` and accumulates into each
//! parameter's `grad` buffer.

use rand::Rng;

use crate::tensor::Tensor3;

/// A learnable array with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Uniform in `±gain·sqrt(3 / fan_in)`.
    pub fn uniform<R: Rng>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(shape);
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut p.value {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns named parameters. Visiting order is fixed and is the
/// order used by optimizers and checkpoints.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = W x + b` with `W` stored row-major as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Param::zeros(&[outputs, inputs]),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(&[outputs, inputs], inputs, gain, rng),
            bias: Param::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.inputs();
        debug_assert_eq!(x.len(), n_in);
        self.weight
            .value
            .chunks_exact(n_in)
            .zip(&self.bias.value)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n_in = self.inputs();
        let mut dx = vec![0.0; n_in];
        for ((row, grow), &g) in self
            .weight
            .value
            .chunks_exact(n_in)
            .zip(self.weight.grad.chunks_exact_mut(n_in))
            .zip(dy)
        {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grow);
            axpy(g, row, &mut dx);
        }
        for (b, g) in self.bias.grad.iter_mut().zip(dy) {
            *b += g;
        }
        dx
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Square-kernel 2-D convolution lowered to a matrix product.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels × (in_channels·kernel²)`
    pub weight: Param,
    pub bias: Param,
}

/// Saved lowering of the input, needed for the weight gradient.
#[derive(Clone, Debug)]
pub struct ConvCache {
    in_shape: (usize, usize, usize),
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let k = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::zeros(&[out_channels, k]),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, kernel, stride, padding);
        let fan_in = in_channels * kernel * kernel;
        c.weight = Param::uniform(&[out_channels, fan_in], fan_in, gain, rng);
        c
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (height + 2 * self.padding - self.kernel) / self.stride + 1,
            (width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, input: &Tensor3) -> Vec<f64> {
        let (c_in, h, w) = input.shape();
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        let mut cols = vec![0.0; c_in * k * k * n];
        for c in 0..c_in {
            let plane = input.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * wo..][..wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], in_shape: (usize, usize, usize)) -> Tensor3 {
        let (c_in, h, w) = in_shape;
        let (ho, wo) = self.output_size(h, w);
        let k = self.kernel;
        let n = ho * wo;
        let mut out = Tensor3::zeros(c_in, h, w);
        for c in 0..c_in {
            let plane = &mut out.data[c * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let src = &row[oy * wo..][..wo];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, cols: &[f64], ho: usize, wo: usize) -> Tensor3 {
        let n = ho * wo;
        let kdim = self.weight.shape[1];
        let mut out = Tensor3::zeros(self.out_channels, ho, wo);
        for (o, b) in self.bias.value.iter().enumerate() {
            out.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        gemm(
            self.out_channels,
            kdim,
            n,
            &self.weight.value,
            false,
            cols,
            false,
            &mut out.data,
            1.0,
        );
        out
    }

    /// Forward pass keeping the lowered input for [`Conv2d::backward`].
    pub fn forward(&self, input: &Tensor3) -> (Tensor3, ConvCache) {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(input.height, input.width);
        let cols = if self.is_pointwise() {
            input.data.clone()
        } else {
            self.im2col(input)
        };
        let out = self.apply(&cols, ho, wo);
        (
            out,
            ConvCache {
                in_shape: input.shape(),
                cols,
            },
        )
    }

    /// Forward pass without keeping anything for backward.
    pub fn infer(&self, input: &Tensor3) -> Tensor3 {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(input.height, input.width);
        if self.is_pointwise() {
            self.apply(&input.data, ho, wo)
        } else {
            self.apply(&self.im2col(input), ho, wo)
        }
    }

    /// Accumulates parameter gradients; returns `dL/dinput` when asked.
    pub fn backward(&mut self, cache: &ConvCache, dout: &Tensor3, input_grad: bool) -> Option<Tensor3> {
        let n = dout.height * dout.width;
        let kdim = self.weight.shape[1];
        for (o, g) in self.bias.grad.iter_mut().enumerate() {
            *g += dout.data[o * n..(o + 1) * n].iter().sum::<f64>();
        }
        // dW (O×K) += dout (O×N) · colsᵀ (N×K)
        gemm(
            self.out_channels,
            n,
            kdim,
            &dout.data,
            false,
            &cache.cols,
            true,
            &mut self.weight.grad,
            1.0,
        );
        if !input_grad {
            return None;
        }
        // dcols (K×N) = Wᵀ (K×O) · dout (O×N)
        let mut dcols = vec![0.0; kdim * n];
        gemm(
            kdim,
            self.out_channels,
            n,
            &self.weight.value,
            true,
            &dout.data,
            false,
            &mut dcols,
            0.0,
        );
        if self.is_pointwise() {
            let (c, h, w) = cache.in_shape;
            Some(Tensor3::from_vec(c, h, w, dcols))
        } else {
            Some(self.col2im(&dcols, cache.in_shape))
        }
    }
}

impl Parameters for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k` and `b: k×n`; `ta`/`tb` mean
/// the stored buffer is the transpose (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn relu_inplace(t: &mut Tensor3) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the (post-activation) output was not positive.
pub fn relu_backward(output: &Tensor3, grad: &mut Tensor3) {
    for (g, o) in grad.data.iter_mut().zip(&output.data) {
        if *o <= 0.0 {
            *g = 0.0;
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

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every parameter in visiting order. Parameters for
    /// which `frozen(name)` holds are skipped (their moments stay put).
    pub fn step_filtered<P: Parameters + ?Sized>(
        &mut self,
        model: &mut P,
        frozen: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let wd = self.weight_decay;
        let moments = &mut self.moments;
        let mut i = 0;
        model.visit_mut("", &mut |name, p| {
            if moments.len() <= i {
                moments.push((vec![0.0; p.len()], vec![0.0; p.len()]));
            }
            let idx = i;
            i += 1;
            if frozen(name) {
                return;
            }
            let (m, v) = &mut moments[idx];
            for (((w, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g + wd * *w;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / bias1;
                let vhat = *vi / bias2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, model: &mut P) {
        self.step_filtered(model, &|_| false);
    }
}
