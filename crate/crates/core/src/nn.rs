//! Layers with hand-written backward passes.
//!
//! Every layer's `forward` borrows its weights immutably and returns a cache;
//! `backward` consumes that cache, accumulates parameter gradients and
//! returns the input gradient. Shared-weight branches therefore just keep
//! two caches.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TsfError};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running statistics are refreshed on backward.
    Train,
    /// Stored running statistics.
    Eval,
}

/// A named parameter or buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            trainable: true,
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let mut p = Param::zeros(shape);
        p.value.fill(v);
        p
    }

    pub fn buffer(shape: &[usize], v: f64) -> Self {
        let mut p = Param::filled(shape, v);
        p.trainable = false;
        p
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let dist = Normal::new(0.0, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = dist.sample(rng);
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
        self.grad.fill(0.0);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over parameters and buffers.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    /// `[out_c, in_c * kernel * kernel]`
    pub weight: Param,
    pub bias: Option<Param>,
}

pub struct ConvCache {
    input: Tensor,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            dilation,
            weight: Param::normal(&[out_c, in_c * kernel * kernel], (2.0 / fan_in).sqrt(), rng),
            bias: bias.then(|| Param::zeros(&[out_c])),
        }
    }

    pub fn pointwise<R: Rng>(in_c: usize, out_c: usize, bias: bool, rng: &mut R) -> Self {
        Conv2d::new(in_c, out_c, 1, 1, 0, 1, bias, rng)
    }

    pub fn out_size(&self, n: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = n + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let (s, p, d) = (self.stride as isize, self.pad as isize, self.dilation as isize);
        let ohw = oh * ow;
        for c in 0..self.in_c {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ki as isize * d;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kj as isize * d;
                            *v = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, gx: &mut [f64]) {
        let k = self.kernel;
        let (s, p, d) = (self.stride as isize, self.pad as isize, self.dilation as isize);
        let ohw = oh * ow;
        for c in 0..self.in_c {
            let plane = &mut gx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..oh {
                        let iy = oy as isize * s - p + ki as isize * d;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * s - p + kj as isize * d;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let [n, c, h, w] = x.shape;
        if c != self.in_c {
            return Err(TsfError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_c, c
            )));
        }
        let (oh, ow) = match (self.out_size(h), self.out_size(w)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TsfError::ShapeMismatch(format!(
                    "input {h}x{w} too small for kernel {} dilation {}",
                    self.kernel, self.dilation
                )))
            }
        };
        let kk = self.in_c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut out = Tensor::zeros([n, self.out_c, oh, ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * ohw] };
        for b in 0..n {
            let xs = x.sample(b);
            let rhs: &[f64] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, h, w, oh, ow, &mut cols);
                &cols
            };
            let ys = out.sample_mut(b);
            if let Some(bias) = &self.bias {
                for (o, bv) in bias.value.iter().enumerate() {
                    ys[o * ohw..(o + 1) * ohw].fill(*bv);
                }
            }
            let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
            gemm(self.out_c, kk, ohw, &self.weight.value, false, rhs, false, beta, ys);
        }
        Ok((out, ConvCache { input: x.clone() }))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, cache: ConvCache, gy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = cache.input;
        let [n, _, h, w] = x.shape;
        let [_, _, oh, ow] = gy.shape;
        let kk = self.in_c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut gx = need_input_grad.then(|| Tensor::zeros(x.shape));
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![0.0; kk * ohw] };
        let mut gcols = if self.is_pointwise() || !need_input_grad {
            Vec::new()
        } else {
            vec![0.0; kk * ohw]
        };
        for b in 0..n {
            let gys = gy.sample(b);
            if let Some(bias) = &mut self.bias {
                for (o, g) in bias.grad.iter_mut().enumerate() {
                    *g += gys[o * ohw..(o + 1) * ohw].iter().sum::<f64>();
                }
            }
            let xs = x.sample(b);
            let cols_ref: &[f64] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, h, w, oh, ow, &mut cols);
                &cols
            };
            // dW += gY * cols^T
            gemm(self.out_c, ohw, kk, gys, false, cols_ref, true, 1.0, &mut self.weight.grad);
            if let Some(gx) = gx.as_mut() {
                if self.is_pointwise() {
                    gemm(kk, self.out_c, ohw, &self.weight.value, true, gys, false, 0.0, gx.sample_mut(b));
                } else {
                    gemm(kk, self.out_c, ohw, &self.weight.value, true, gys, false, 0.0, &mut gcols);
                    self.col2im(&gcols, h, w, oh, ow, gx.sample_mut(b));
                }
            }
        }
        gx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[c], 1.0),
            beta: Param::zeros(&[c]),
            running_mean: Param::buffer(&[c], 0.0),
            running_var: Param::buffer(&[c], 1.0),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> (Tensor, BnCache) {
        let [n, c, h, w] = x.shape;
        let hw = h * w;
        let count = n * hw;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let o = x.idx(b, ch, 0, 0);
                        s += x.data[o..o + hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut v = 0.0;
                    for b in 0..n {
                        let o = x.idx(b, ch, 0, 0);
                        v += x.data[o..o + hw].iter().map(|t| (t - m) * (t - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = v / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.value.clone(), self.running_var.value.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape);
        let mut y = Tensor::zeros(x.shape);
        for b in 0..n {
            for ch in 0..c {
                let o = x.idx(b, ch, 0, 0);
                let (g, be, m, is) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                for i in o..o + hw {
                    let xh = (x.data[i] - m) * is;
                    xhat.data[i] = xh;
                    y.data[i] = g * xh + be;
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var: var,
                count,
            },
        )
    }

    pub fn backward(&mut self, cache: BnCache, gy: &Tensor) -> Tensor {
        let [n, c, h, w] = gy.shape;
        let hw = h * w;
        let m = cache.count as f64;
        let mut gx = Tensor::zeros(gy.shape);
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for b in 0..n {
                let o = gy.idx(b, ch, 0, 0);
                for i in o..o + hw {
                    sum_g += gy.data[i];
                    sum_gx += gy.data[i] * cache.xhat.data[i];
                }
            }
            self.beta.grad[ch] += sum_g;
            self.gamma.grad[ch] += sum_gx;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            for b in 0..n {
                let o = gy.idx(b, ch, 0, 0);
                for i in o..o + hw {
                    gx.data[i] = match cache.mode {
                        Mode::Train => {
                            g * is * (gy.data[i] - sum_g / m - cache.xhat.data[i] * sum_gx / m)
                        }
                        Mode::Eval => g * is * gy.data[i],
                    };
                }
            }
        }
        if cache.mode == Mode::Train {
            let unbias = if cache.count > 1 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * cache.batch_mean[ch];
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * cache.batch_var[ch] * unbias;
            }
        }
        gx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

/// Gradient of relu given its output.
pub fn relu_backward(y: &Tensor, gy: &Tensor) -> Tensor {
    Tensor {
        shape: gy.shape,
        data: y
            .data
            .iter()
            .zip(&gy.data)
            .map(|(o, g)| if *o > 0.0 { *g } else { 0.0 })
            .collect(),
    }
}

/// Convolution, batch normalization and an optional relu.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

pub struct ConvBnCache {
    conv: ConvCache,
    bn: BnCache,
    out: Option<Tensor>,
}

impl ConvBn {
    pub fn new(conv: Conv2d, relu: bool) -> Self {
        let bn = BatchNorm2d::new(conv.out_c);
        ConvBn { conv, bn, relu }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, ConvBnCache)> {
        let (y, conv) = self.conv.forward(x)?;
        let (y, bn) = self.bn.forward(&y, mode);
        if self.relu {
            let y = relu(&y);
            Ok((
                y.clone(),
                ConvBnCache {
                    conv,
                    bn,
                    out: Some(y),
                },
            ))
        } else {
            Ok((y, ConvBnCache { conv, bn, out: None }))
        }
    }

    pub fn backward(&mut self, cache: ConvBnCache, gy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = match &cache.out {
            Some(out) => relu_backward(out, gy),
            None => gy.clone(),
        };
        let g = self.bn.backward(cache.bn, &g);
        self.conv.backward(cache.conv, &g, need_input_grad)
    }
}

impl Module for ConvBn {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// 3x3 max pooling, stride 2, padding 1.
pub struct MaxPoolCache {
    in_shape: [usize; 4],
    argmax: Vec<usize>,
}

pub fn maxpool_out(n: usize) -> usize {
    (n + 2 - 3) / 2 + 1
}

pub fn maxpool3s2(x: &Tensor) -> (Tensor, MaxPoolCache) {
    let [n, c, h, w] = x.shape;
    let (oh, ow) = (maxpool_out(h), maxpool_out(w));
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; out.len()];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = x.idx(b, ch, iy as usize, ix as usize);
                            if x.data[i] > best {
                                best = x.data[i];
                                arg = i;
                            }
                        }
                    }
                    let o = out.idx(b, ch, oy, ox);
                    out.data[o] = best;
                    argmax[o] = arg;
                }
            }
        }
    }
    (
        out,
        MaxPoolCache {
            in_shape: x.shape,
            argmax,
        },
    )
}

pub fn maxpool3s2_backward(cache: MaxPoolCache, gy: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(cache.in_shape);
    for (o, &i) in cache.argmax.iter().enumerate() {
        gx.data[i] += gy.data[o];
    }
    gx
}

/// Residual bottleneck: 1x1 reduce, 3x3 (strided or dilated), 1x1 expand, plus shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub downsample: Option<ConvBn>,
}

pub struct BottleneckCache {
    reduce: ConvBnCache,
    spatial: ConvBnCache,
    expand: ConvBnCache,
    downsample: Option<ConvBnCache>,
    out: Tensor,
}

impl Bottleneck {
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, BottleneckCache)> {
        let (a, reduce) = self.reduce.forward(x, mode)?;
        let (a, spatial) = self.spatial.forward(&a, mode)?;
        let (mut a, expand) = self.expand.forward(&a, mode)?;
        let downsample = match &self.downsample {
            Some(ds) => {
                let (s, c) = ds.forward(x, mode)?;
                if s.shape != a.shape {
                    return Err(TsfError::ShapeMismatch(format!(
                        "shortcut {:?} vs residual {:?}",
                        s.shape, a.shape
                    )));
                }
                a.add_assign(&s);
                Some(c)
            }
            None => {
                if x.shape != a.shape {
                    return Err(TsfError::ShapeMismatch(format!(
                        "identity shortcut {:?} vs residual {:?}",
                        x.shape, a.shape
                    )));
                }
                a.add_assign(x);
                None
            }
        };
        let out = relu(&a);
        Ok((
            out.clone(),
            BottleneckCache {
                reduce,
                spatial,
                expand,
                downsample,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: BottleneckCache, gy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let g = relu_backward(&cache.out, gy);
        let gs = match (&mut self.downsample, cache.downsample) {
            (Some(ds), Some(c)) => ds.backward(c, &g, need_input_grad),
            _ => need_input_grad.then(|| g.clone()),
        };
        let ga = self.expand.backward(cache.expand, &g, true)?;
        let ga = self.spatial.backward(cache.spatial, &ga, true)?;
        let gx = self.reduce.backward(cache.reduce, &ga, need_input_grad);
        match (gx, gs) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.reduce.visit(&join(prefix, "reduce"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
        self.expand.visit(&join(prefix, "expand"), f);
        if let Some(ds) = &self.downsample {
            ds.visit(&join(prefix, "downsample"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
        self.expand.visit_mut(&join(prefix, "expand"), f);
        if let Some(ds) = &mut self.downsample {
            ds.visit_mut(&join(prefix, "downsample"), f);
        }
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use crate::tensor::Tensor;

    /// Central-difference gradient of a scalar function of a flat vector.
    pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        let mut xs = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xs[i];
                xs[i] = orig + eps;
                let up = f(&xs);
                xs[i] = orig - eps;
                let down = f(&xs);
                xs[i] = orig;
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    /// Max relative error with a floor on the denominator.
    pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn naive_conv(c: &Conv2d, x: &Tensor) -> Tensor {
        let [n, ci, h, w] = x.shape;
        let (oh, ow) = (c.out_size(h).unwrap(), c.out_size(w).unwrap());
        let mut y = Tensor::zeros([n, c.out_c, oh, ow]);
        for b in 0..n {
            for o in 0..c.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = c.bias.as_ref().map_or(0.0, |p| p.value[o]);
                        for i in 0..ci {
                            for ki in 0..c.kernel {
                                for kj in 0..c.kernel {
                                    let iy = (oy * c.stride + ki * c.dilation) as isize - c.pad as isize;
                                    let ix = (ox * c.stride + kj * c.dilation) as isize - c.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wi = o * ci * c.kernel * c.kernel + (i * c.kernel + ki) * c.kernel + kj;
                                    s += c.weight.value[wi] * x.at(b, i, iy as usize, ix as usize);
                                }
                            }
                        }
                        let idx = y.idx(b, o, oy, ox);
                        y.data[idx] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p, d) in &[(1, 1, 0, 1), (3, 1, 1, 1), (3, 2, 0, 1), (3, 1, 2, 2), (7, 2, 0, 1), (1, 2, 0, 1)] {
            let conv = Conv2d::new(2, 3, k, s, p, d, true, &mut rng);
            let x = rand_tensor([2, 2, 11, 11], &mut rng);
            let (y, _) = conv.forward(&x).unwrap();
            let r = naive_conv(&conv, &x);
            assert_eq!(y.shape, r.shape);
            assert!(rel_err(&y.data, &r.data) < 1e-10, "k{k} s{s} p{p} d{d}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p, d) in &[(1, 1, 0, 1), (3, 2, 0, 1), (3, 1, 2, 2)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, d, true, &mut rng);
            let x = rand_tensor([2, 2, 7, 7], &mut rng);
            let (y, cache) = conv.forward(&x).unwrap();
            let gy = rand_tensor(y.shape, &mut rng);
            let gx = conv.backward(cache, &gy, true).unwrap();
            let num_x = numeric_grad(&x.data, 1e-6, |v| {
                let xt = Tensor::from_vec(x.shape, v.to_vec()).unwrap();
                dot(&conv.forward(&xt).unwrap().0, &gy)
            });
            assert!(rel_err(&gx.data, &num_x) < 1e-6);
            let w0 = conv.weight.value.clone();
            let analytic = conv.weight.grad.clone();
            let num_w = numeric_grad(&w0, 1e-6, |v| {
                let mut c2 = conv.clone();
                c2.weight.value = v.to_vec();
                dot(&c2.forward(&x).unwrap().0, &gy)
            });
            assert!(rel_err(&analytic, &num_w) < 1e-6);
        }
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm2d::new(3);
        bn.gamma.value = vec![0.5, 1.5, -0.7];
        bn.beta.value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor([2, 3, 4, 4], &mut rng);
        let (y, cache) = bn.forward(&x, Mode::Train);
        let gy = rand_tensor(y.shape, &mut rng);
        let probe = bn.clone();
        let gx = bn.backward(cache, &gy, );
        let num = numeric_grad(&x.data, 1e-6, |v| {
            let xt = Tensor::from_vec(x.shape, v.to_vec()).unwrap();
            dot(&probe.forward(&xt, Mode::Train).0, &gy)
        });
        assert!(rel_err(&gx.data, &num) < 1e-5);
        let num_g = numeric_grad(&probe.gamma.value, 1e-6, |v| {
            let mut b = probe.clone();
            b.gamma.value = v.to_vec();
            dot(&b.forward(&x, Mode::Train).0, &gy)
        });
        assert!(rel_err(&bn.gamma.grad, &num_g) < 1e-6);
        // running statistics moved toward the batch statistics
        assert!(bn.running_var.value.iter().all(|v| *v != 1.0));
    }

    #[test]
    fn bottleneck_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = Bottleneck {
            reduce: ConvBn::new(Conv2d::pointwise(4, 2, false, &mut rng), true),
            spatial: ConvBn::new(Conv2d::new(2, 2, 3, 2, 0, 1, false, &mut rng), true),
            expand: ConvBn::new(Conv2d::pointwise(2, 6, false, &mut rng), false),
            downsample: Some(ConvBn::new(Conv2d::new(4, 6, 3, 2, 0, 1, false, &mut rng), false)),
        };
        let x = rand_tensor([2, 4, 7, 7], &mut rng);
        let probe = block.clone();
        let (y, cache) = block.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape, [2, 6, 3, 3]);
        let gy = rand_tensor(y.shape, &mut rng);
        let gx = block.backward(cache, &gy, true).unwrap();
        let num = numeric_grad(&x.data, 1e-6, |v| {
            let xt = Tensor::from_vec(x.shape, v.to_vec()).unwrap();
            dot(&probe.forward(&xt, Mode::Train).unwrap().0, &gy)
        });
        assert!(rel_err(&gx.data, &num) < 1e-4);
    }

    #[test]
    fn maxpool_shape_and_gradient_routing() {
        let x = Tensor::from_vec([1, 1, 5, 5], (0..25).map(|v| v as f64).collect()).unwrap();
        let (y, cache) = maxpool3s2(&x);
        assert_eq!(y.shape, [1, 1, 3, 3]);
        assert_eq!(y.at(0, 0, 0, 0), 6.0);
        assert_eq!(y.at(0, 0, 2, 2), 24.0);
        let gx = maxpool3s2_backward(cache, &Tensor::filled(y.shape, 1.0));
        assert_eq!(gx.data.iter().sum::<f64>(), 9.0);
    }
}
