//! A small sequential layer stack with explicit backward passes.
//!
//! Everything runs in `f64` on a single thread, so forward and backward
//! passes are bitwise reproducible. Activations are stored channel-major
//! (`C×H×W`) for spatial layers and as flat vectors otherwise. Parameters are
//! addressed through a flat layout (each parameterized layer contributes its
//! weight then its bias) which the optimizer, the checkpoint writer and the
//! gradient buffers all share.

use rand::Rng;

use crate::error::{ensure_dim, Result};

/// A dense activation: a shape plus row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// `c = a·b + beta·c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `trans_a`/`trans_b` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by the
    // dimensions and strides handed to the kernel.
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

/// Seeded uniform fan-in initialization: `U(-b, b)` with `b = sqrt(3 / fan_in)`.
/// Biases use `fan_in * 3`, i.e. `b = 1 / sqrt(fan_in)`.
fn fan_in_uniform<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = (3.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fully connected layer, `y = W x + b` with `W` stored `out×in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: fan_in_uniform(rng, inputs * outputs, inputs),
            bias: fan_in_uniform(rng, outputs, inputs * 3),
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.bias.clone();
        gemm(self.outputs, self.inputs, 1, &self.weight, false, x, false, 1.0, &mut y);
        y
    }

    fn backward(&self, x: &[f64], dy: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        if let Some(g) = grads {
            let (gw, gb) = g.split_at_mut(self.weight.len());
            gemm(self.outputs, 1, self.inputs, dy, false, x, false, 1.0, gw);
            for (b, d) in gb.iter_mut().zip(dy) {
                *b += d;
            }
        }
        let mut dx = vec![0.0; self.inputs];
        gemm(self.inputs, self.outputs, 1, &self.weight, true, dy, false, 0.0, &mut dx);
        dx
    }
}

/// Square-kernel convolution with stride 1 and "same" zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out × in × k × k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut R) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: fan_in_uniform(rng, out_channels * fan_in, fan_in),
            bias: fan_in_uniform(rng, out_channels, fan_in * 3),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Unfolds `x: C×H×W` into a `(C·k·k) × (H·W)` patch matrix.
    fn im2col(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut cols = vec![0.0; self.patch_len() * hw];
        for c in 0..self.in_channels {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * hw..(row + 1) * hw];
                    let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let src = sy as usize * w;
                        let sx0 = (x0 as isize + ox) as usize;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&plane[src + sx0..src + sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Conv2d::im2col`].
    fn col2im(&self, cols: &[f64], h: usize, w: usize) -> Vec<f64> {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut x = vec![0.0; self.in_channels * hw];
        for c in 0..self.in_channels {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * hw..(row + 1) * hw];
                    let (oy, ox) = (ky as isize - pad, kx as isize - pad);
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (w as isize - ox).min(w as isize) as usize;
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let base = sy as usize * w;
                        let sx0 = (x0 as isize + ox) as usize;
                        for (d, s) in plane[base + sx0..base + sx0 + (x1 - x0)]
                            .iter_mut()
                            .zip(&src[y * w + x0..y * w + x1])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let hw = h * w;
        let cols = self.im2col(x, h, w);
        let mut y = vec![0.0; self.out_channels * hw];
        for (co, b) in self.bias.iter().enumerate() {
            y[co * hw..(co + 1) * hw].fill(*b);
        }
        gemm(self.out_channels, self.patch_len(), hw, &self.weight, false, &cols, false, 1.0, &mut y);
        y
    }

    fn backward(&self, x: &[f64], h: usize, w: usize, dy: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        let hw = h * w;
        if let Some(g) = grads {
            let cols = self.im2col(x, h, w);
            let (gw, gb) = g.split_at_mut(self.weight.len());
            gemm(self.out_channels, hw, self.patch_len(), dy, false, &cols, true, 1.0, gw);
            for (co, b) in gb.iter_mut().enumerate() {
                *b += dy[co * hw..(co + 1) * hw].iter().sum::<f64>();
            }
        }
        let mut dcols = vec![0.0; self.patch_len() * hw];
        gemm(self.patch_len(), self.out_channels, hw, &self.weight, true, dy, false, 0.0, &mut dcols);
        self.col2im(&dcols, h, w)
    }
}

/// One stage of a [`Sequential`] stack.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    /// `x · sigmoid(x)`, smooth everywhere.
    Silu,
    Tanh,
    /// 2×2 average pooling.
    AvgPool2,
    /// 2× nearest-neighbour upsampling.
    Upsample2,
    Reshape(Vec<usize>),
    /// Multiplies every element by a fixed factor.
    Scale(f64),
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Linear(l) => l.weight.len() + l.bias.len(),
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            _ => 0,
        }
    }

    fn output_shape(&self, shape: &[usize]) -> Vec<usize> {
        match self {
            Layer::Linear(l) => vec![l.outputs],
            Layer::Conv(c) => vec![c.out_channels, shape[1], shape[2]],
            Layer::AvgPool2 => vec![shape[0], shape[1] / 2, shape[2] / 2],
            Layer::Upsample2 => vec![shape[0], shape[1] * 2, shape[2] * 2],
            Layer::Reshape(s) => s.clone(),
            Layer::Silu | Layer::Tanh | Layer::Scale(_) => shape.to_vec(),
        }
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        let shape = self.output_shape(&x.shape);
        let data = match self {
            Layer::Linear(l) => l.forward(&x.data),
            Layer::Conv(c) => c.forward(&x.data, x.shape[1], x.shape[2]),
            Layer::Silu => x.data.iter().map(|&v| v * sigmoid(v)).collect(),
            Layer::Tanh => x.data.iter().map(|v| v.tanh()).collect(),
            Layer::AvgPool2 => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let at = |dy: usize, dx: usize| x.data[(ch * h + 2 * oy + dy) * w + 2 * ox + dx];
                            y[(ch * oh + oy) * ow + ox] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
                        }
                    }
                }
                y
            }
            Layer::Upsample2 => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut y = vec![0.0; c * oh * ow];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y[(ch * oh + oy) * ow + ox] = x.data[(ch * h + oy / 2) * w + ox / 2];
                        }
                    }
                }
                y
            }
            Layer::Reshape(_) => x.data.clone(),
            Layer::Scale(a) => x.data.iter().map(|v| a * v).collect(),
        };
        Tensor::new(shape, data)
    }

    fn backward(&self, x: &Tensor, y: &Tensor, dy: &[f64], grads: Option<&mut [f64]>) -> Vec<f64> {
        match self {
            Layer::Linear(l) => l.backward(&x.data, dy, grads),
            Layer::Conv(c) => c.backward(&x.data, x.shape[1], x.shape[2], dy, grads),
            Layer::Silu => x
                .data
                .iter()
                .zip(dy)
                .map(|(&v, d)| {
                    let s = sigmoid(v);
                    d * s * (1.0 + v * (1.0 - s))
                })
                .collect(),
            Layer::Tanh => y.data.iter().zip(dy).map(|(t, d)| d * (1.0 - t * t)).collect(),
            Layer::AvgPool2 => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; x.len()];
                for ch in 0..c {
                    for iy in 0..2 * oh {
                        for ix in 0..2 * ow {
                            dx[(ch * h + iy) * w + ix] = 0.25 * dy[(ch * oh + iy / 2) * ow + ix / 2];
                        }
                    }
                }
                dx
            }
            Layer::Upsample2 => {
                let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; x.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dx[(ch * h + oy / 2) * w + ox / 2] += dy[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                dx
            }
            Layer::Reshape(_) => dy.to_vec(),
            Layer::Scale(a) => dy.iter().map(|d| a * d).collect(),
        }
    }
}

/// Activations recorded by [`Sequential::forward_trace`]; `values[i]` is the
/// input of layer `i` and the last entry is the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.values.last().expect("trace always holds the input")
    }
}

/// A feed-forward chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    input_shape: Vec<usize>,
}

impl Sequential {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        Self { layers, input_shape }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .iter()
            .fold(self.input_shape.clone(), |s, l| l.output_shape(&s))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        ensure_dim("network input", self.input_len(), x.len())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Tensor> {
        self.check_input(x)?;
        let mut t = Tensor::new(self.input_shape.clone(), x.to_vec());
        for layer in &self.layers {
            t = layer.forward(&t);
        }
        Ok(t)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(Tensor::new(self.input_shape.clone(), x.to_vec()));
        for layer in &self.layers {
            let next = layer.forward(values.last().unwrap());
            values.push(next);
        }
        Ok(Trace { values })
    }

    /// Back-propagates `dy` (gradient w.r.t. the output) and returns the
    /// gradient w.r.t. the input. When `grads` is given, parameter gradients
    /// are accumulated into it using the flat parameter layout.
    pub fn backward(&self, trace: &Trace, dy: &[f64], mut grads: Option<&mut [f64]>) -> Vec<f64> {
        if let Some(g) = grads.as_deref() {
            assert_eq!(g.len(), self.param_count());
        }
        let mut offset = self.param_count();
        let mut grad = dy.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let n = layer.param_count();
            offset -= n;
            let slot = grads.as_deref_mut().map(|g| &mut g[offset..offset + n]);
            grad = layer.backward(&trace.values[i], &trace.values[i + 1], &grad, slot);
        }
        grad
    }

    /// Visits `(name, shape, values)` for every parameter tensor in layout order.
    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f64])) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(l) => {
                    f(format!("{prefix}.{i}.weight"), vec![l.outputs, l.inputs], &l.weight);
                    f(format!("{prefix}.{i}.bias"), vec![l.outputs], &l.bias);
                }
                Layer::Conv(c) => {
                    let shape = vec![c.out_channels, c.in_channels, c.kernel, c.kernel];
                    f(format!("{prefix}.{i}.weight"), shape, &c.weight);
                    f(format!("{prefix}.{i}.bias"), vec![c.out_channels], &c.bias);
                }
                _ => {}
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    f(&mut l.weight);
                    f(&mut l.bias);
                }
                Layer::Conv(c) => {
                    f(&mut c.weight);
                    f(&mut c.bias);
                }
                _ => {}
            }
        }
    }
}

/// Anything that owns parameters in a fixed flat layout.
pub trait Parameterized {
    /// Visits every parameter tensor as `(name, shape, values)` in layout order.
    fn visit_params(&self, f: &mut dyn FnMut(String, Vec<usize>, &[f64]));
    /// Mutable counterpart of [`Parameterized::visit_params`], same order.
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, v| n += v.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |v| {
            v.copy_from_slice(&flat[offset..offset + v.len()]);
            offset += v.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    fn quantize_to_f32(&mut self) {
        self.visit_params_mut(&mut |v| {
            for x in v.iter_mut() {
                *x = f64::from(*x as f32);
            }
        });
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, _, v| ok &= v.iter().all(|x| x.is_finite()));
        ok
    }
}
