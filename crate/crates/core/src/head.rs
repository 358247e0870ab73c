//! Anchor-free classification/regression head.
//!
//! Per depth and per task (classification, regression): pointwise adjust
//! layers on the template and search features, depth-wise cross-correlation,
//! then a two-layer pointwise tower. Regression outputs pass through `exp` and
//! are read as (left, top, right, bottom) distances in search-patch pixels.
//! The two depths are combined with learned scalar weights.

use rand::Rng;

use crate::backbone::TwofoldFeatures;
use crate::error::{Result, TsfError};
use crate::geometry::{BBox, CropSpec};
use crate::nn::{join, ConvBn, ConvBnCache, Conv2d, ConvCache, Mode, Module, Param};
use crate::tensor::Tensor;

const MAX_LOG_DISTANCE: f64 = 20.0;

/// Per-channel valid cross-correlation of `template` over `search`, sample by sample.
pub fn depthwise_xcorr(template: &Tensor, search: &Tensor) -> Result<Tensor> {
    let [n, c, k, kw] = template.shape;
    let [sn, sc, s, sw] = search.shape;
    if n != sn || c != sc {
        return Err(TsfError::ShapeMismatch(format!(
            "template {:?} vs search {:?}",
            template.shape, search.shape
        )));
    }
    if k != kw || s != sw {
        return Err(TsfError::ShapeMismatch("correlation maps must be square".into()));
    }
    if k > s {
        return Err(TsfError::ShapeMismatch(format!(
            "template side {k} exceeds search side {s}"
        )));
    }
    let r = s - k + 1;
    let mut out = Tensor::zeros([n, c, r, r]);
    for b in 0..n {
        for ch in 0..c {
            let zo = template.idx(b, ch, 0, 0);
            let xo = search.idx(b, ch, 0, 0);
            let oo = out.idx(b, ch, 0, 0);
            let z = &template.data[zo..zo + k * k];
            let x = &search.data[xo..xo + s * s];
            let o = &mut out.data[oo..oo + r * r];
            for i in 0..k {
                for j in 0..k {
                    let zv = z[i * k + j];
                    for u in 0..r {
                        let xrow = &x[(u + i) * s + j..(u + i) * s + j + r];
                        let orow = &mut o[u * r..(u + 1) * r];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += zv * xv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_xcorr`] w.r.t. template and search.
pub fn depthwise_xcorr_backward(template: &Tensor, search: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let [n, c, k, _] = template.shape;
    let s = search.h();
    let r = gy.h();
    let mut gz = Tensor::zeros(template.shape);
    let mut gx = Tensor::zeros(search.shape);
    for b in 0..n {
        for ch in 0..c {
            let zo = template.idx(b, ch, 0, 0);
            let xo = search.idx(b, ch, 0, 0);
            let go = gy.idx(b, ch, 0, 0);
            let g = &gy.data[go..go + r * r];
            for i in 0..k {
                for j in 0..k {
                    let zv = template.data[zo + i * k + j];
                    let mut acc = 0.0;
                    for u in 0..r {
                        let base = xo + (u + i) * s + j;
                        let grow = &g[u * r..(u + 1) * r];
                        let xrow = &search.data[base..base + r];
                        acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        let gxrow = &mut gx.data[base..base + r];
                        for (d, gv) in gxrow.iter_mut().zip(grow) {
                            *d += zv * gv;
                        }
                    }
                    gz.data[zo + i * k + j] += acc;
                }
            }
        }
    }
    (gz, gx)
}

/// Classification logits `[N, 2, R, R]` (background, foreground) and
/// regression distances `[N, 4, R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsePair {
    pub cls: Tensor,
    pub reg: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub beta_s: f64,
    pub beta_d: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            alpha_s: 0.5,
            alpha_d: 0.5,
            beta_s: 0.5,
            beta_d: 0.5,
        }
    }
}

fn weighted_sum(a: &Tensor, wa: f64, b: &Tensor, wb: f64) -> Tensor {
    Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| wa * x + wb * y).collect(),
    }
}

/// `cls = a_s cls_s + a_d cls_d`, `reg = b_s reg_s + b_d reg_d`.
pub fn fuse_responses(shallow: &ResponsePair, deep: &ResponsePair, w: &FusionWeights) -> Result<ResponsePair> {
    if shallow.cls.shape != deep.cls.shape || shallow.reg.shape != deep.reg.shape {
        return Err(TsfError::ShapeMismatch(format!(
            "shallow {:?}/{:?} vs deep {:?}/{:?}",
            shallow.cls.shape, shallow.reg.shape, deep.cls.shape, deep.reg.shape
        )));
    }
    Ok(ResponsePair {
        cls: weighted_sum(&shallow.cls, w.alpha_s, &deep.cls, w.alpha_d),
        reg: weighted_sum(&shallow.reg, w.beta_s, &deep.reg, w.beta_d),
    })
}

/// One task's tower for one depth.
#[derive(Debug, Clone)]
pub struct HeadBranch {
    pub adjust_z: ConvBn,
    pub adjust_x: ConvBn,
    pub tower: ConvBn,
    pub out: Conv2d,
}

pub struct HeadBranchCache {
    adjust_z: ConvBnCache,
    adjust_x: ConvBnCache,
    z: Tensor,
    x: Tensor,
    tower: ConvBnCache,
    out: ConvCache,
}

impl HeadBranch {
    pub fn new<R: Rng>(c: usize, out_c: usize, rng: &mut R) -> Self {
        let mut out = Conv2d::pointwise(c, out_c, true, rng);
        for v in out.weight.value.iter_mut() {
            *v *= 0.1;
        }
        HeadBranch {
            adjust_z: ConvBn::new(Conv2d::pointwise(c, c, false, rng), true),
            adjust_x: ConvBn::new(Conv2d::pointwise(c, c, false, rng), true),
            tower: ConvBn::new(Conv2d::pointwise(c, c, false, rng), true),
            out,
        }
    }

    pub fn forward(&self, z: &Tensor, x: &Tensor, mode: Mode) -> Result<(Tensor, HeadBranchCache)> {
        let (za, adjust_z) = self.adjust_z.forward(z, mode)?;
        let (xa, adjust_x) = self.adjust_x.forward(x, mode)?;
        let corr = depthwise_xcorr(&za, &xa)?;
        let (t, tower) = self.tower.forward(&corr, mode)?;
        let (o, out) = self.out.forward(&t)?;
        Ok((
            o,
            HeadBranchCache {
                adjust_z,
                adjust_x,
                z: za,
                x: xa,
                tower,
                out,
            },
        ))
    }

    pub fn backward(&mut self, cache: HeadBranchCache, g: &Tensor) -> (Tensor, Tensor) {
        let gt = self.out.backward(cache.out, g, true).expect("input grad");
        let gc = self.tower.backward(cache.tower, &gt, true).expect("input grad");
        let (gza, gxa) = depthwise_xcorr_backward(&cache.z, &cache.x, &gc);
        let gz = self.adjust_z.backward(cache.adjust_z, &gza, true).expect("input grad");
        let gx = self.adjust_x.backward(cache.adjust_x, &gxa, true).expect("input grad");
        (gz, gx)
    }
}

impl Module for HeadBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.adjust_z.visit(&join(prefix, "adjust_z"), f);
        self.adjust_x.visit(&join(prefix, "adjust_x"), f);
        self.tower.visit(&join(prefix, "tower"), f);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.adjust_z.visit_mut(&join(prefix, "adjust_z"), f);
        self.adjust_x.visit_mut(&join(prefix, "adjust_x"), f);
        self.tower.visit_mut(&join(prefix, "tower"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Classification and regression branches for one depth.
#[derive(Debug, Clone)]
pub struct DepthHead {
    pub cls: HeadBranch,
    pub reg: HeadBranch,
}

pub struct DepthHeadCache {
    cls: HeadBranchCache,
    reg: HeadBranchCache,
    reg_out: Tensor,
}

impl DepthHead {
    pub fn new<R: Rng>(c: usize, init_distance: f64, rng: &mut R) -> Self {
        let mut reg = HeadBranch::new(c, 4, rng);
        if let Some(b) = reg.out.bias.as_mut() {
            b.value.fill(init_distance.ln());
        }
        DepthHead {
            cls: HeadBranch::new(c, 2, rng),
            reg,
        }
    }

    /// Responses for one depth: `z` is the template slice, `x` the search slice.
    pub fn branch_forward(&self, z: &Tensor, x: &Tensor, mode: Mode) -> Result<(ResponsePair, DepthHeadCache)> {
        if z.c() != x.c() || z.n() != x.n() {
            return Err(TsfError::ShapeMismatch(format!(
                "template {:?} vs search {:?}",
                z.shape, x.shape
            )));
        }
        let (cls, cc) = self.cls.forward(z, x, mode)?;
        let (raw, rc) = self.reg.forward(z, x, mode)?;
        let reg = Tensor {
            shape: raw.shape,
            data: raw.data.iter().map(|v| v.min(MAX_LOG_DISTANCE).exp()).collect(),
        };
        Ok((
            ResponsePair { cls, reg: reg.clone() },
            DepthHeadCache {
                cls: cc,
                reg: rc,
                reg_out: reg,
            },
        ))
    }

    pub fn backward(&mut self, cache: DepthHeadCache, g: &ResponsePair) -> (Tensor, Tensor) {
        let (mut gz, mut gx) = self.cls.backward(cache.cls, &g.cls);
        let graw = Tensor {
            shape: g.reg.shape,
            data: g.reg.data.iter().zip(&cache.reg_out.data).map(|(a, b)| a * b).collect(),
        };
        let (gz2, gx2) = self.reg.backward(cache.reg, &graw);
        gz.add_assign(&gz2);
        gx.add_assign(&gx2);
        (gz, gx)
    }
}

impl Module for DepthHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.cls.visit(&join(prefix, "cls"), f);
        self.reg.visit(&join(prefix, "reg"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.cls.visit_mut(&join(prefix, "cls"), f);
        self.reg.visit_mut(&join(prefix, "reg"), f);
    }
}

/// Both depth heads and the learned fusion weights `[a_s, a_d, b_s, b_d]`.
#[derive(Debug, Clone)]
pub struct Head {
    pub shallow: DepthHead,
    pub deep: DepthHead,
    pub fusion: Param,
}

pub struct HeadCache {
    shallow: Option<(DepthHeadCache, ResponsePair)>,
    deep: (DepthHeadCache, ResponsePair),
}

/// Which depths contribute to the fused response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depths {
    Both,
    DeepOnly,
}

impl Head {
    pub fn new<R: Rng>(c: usize, init_distance: f64, rng: &mut R) -> Self {
        Head {
            shallow: DepthHead::new(c, init_distance, rng),
            deep: DepthHead::new(c, init_distance, rng),
            fusion: Param::filled(&[4], 0.5),
        }
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        let v = &self.fusion.value;
        FusionWeights {
            alpha_s: v[0],
            alpha_d: v[1],
            beta_s: v[2],
            beta_d: v[3],
        }
    }

    pub fn forward(&self, z: &TwofoldFeatures, x: &TwofoldFeatures, depths: Depths, mode: Mode) -> Result<(ResponsePair, HeadCache)> {
        let (deep, dc) = self.deep.branch_forward(&z.deep, &x.deep, mode)?;
        match depths {
            Depths::DeepOnly => Ok((
                deep.clone(),
                HeadCache {
                    shallow: None,
                    deep: (dc, deep),
                },
            )),
            Depths::Both => {
                let (shallow, sc) = self.shallow.branch_forward(&z.shallow, &x.shallow, mode)?;
                let fused = fuse_responses(&shallow, &deep, &self.fusion_weights())?;
                Ok((
                    fused,
                    HeadCache {
                        shallow: Some((sc, shallow)),
                        deep: (dc, deep),
                    },
                ))
            }
        }
    }

    /// Returns gradients w.r.t. the template and search features.
    pub fn backward(&mut self, cache: HeadCache, g: &ResponsePair) -> (TwofoldFeatures, TwofoldFeatures) {
        let (dc, deep) = cache.deep;
        match cache.shallow {
            None => {
                let (gz, gx) = self.deep.backward(dc, g);
                let zs = |t: &Tensor| Tensor::zeros(t.shape);
                (
                    TwofoldFeatures { shallow: zs(&gz), deep: gz },
                    TwofoldFeatures { shallow: zs(&gx), deep: gx },
                )
            }
            Some((sc, shallow)) => {
                let w = self.fusion_weights();
                let dot = |a: &Tensor, b: &Tensor| a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum::<f64>();
                self.fusion.grad[0] += dot(&g.cls, &shallow.cls);
                self.fusion.grad[1] += dot(&g.cls, &deep.cls);
                self.fusion.grad[2] += dot(&g.reg, &shallow.reg);
                self.fusion.grad[3] += dot(&g.reg, &deep.reg);
                let gs = ResponsePair {
                    cls: g.cls.scaled(w.alpha_s),
                    reg: g.reg.scaled(w.beta_s),
                };
                let gd = ResponsePair {
                    cls: g.cls.scaled(w.alpha_d),
                    reg: g.reg.scaled(w.beta_d),
                };
                let (gzs, gxs) = self.shallow.backward(sc, &gs);
                let (gzd, gxd) = self.deep.backward(dc, &gd);
                (
                    TwofoldFeatures { shallow: gzs, deep: gzd },
                    TwofoldFeatures { shallow: gxs, deep: gxd },
                )
            }
        }
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.shallow.visit(&join(prefix, "shallow"), f);
        self.deep.visit(&join(prefix, "deep"), f);
        f(&join(prefix, "fusion"), &self.fusion);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.shallow.visit_mut(&join(prefix, "shallow"), f);
        self.deep.visit_mut(&join(prefix, "deep"), f);
        f(&join(prefix, "fusion"), &mut self.fusion);
    }
}

/// Placement of response cells on the search patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseGeometry {
    /// Response side `R`.
    pub size: usize,
    /// Patch pixels between neighbouring cells.
    pub stride: f64,
    /// Search patch side in pixels.
    pub patch_size: usize,
}

impl ResponseGeometry {
    /// Cell `(row, col)` anchor point in patch coordinates; the center cell sits on the patch center.
    pub fn anchor(&self, row: usize, col: usize) -> (f64, f64) {
        let mid = (self.size as f64 - 1.0) / 2.0;
        let c = self.patch_size as f64 / 2.0;
        (
            c + (col as f64 - mid) * self.stride,
            c + (row as f64 - mid) * self.stride,
        )
    }

    pub fn cells(&self) -> usize {
        self.size * self.size
    }
}

/// Decode the box predicted at cell `(row, col)` of sample `n`, in patch coordinates.
pub fn decode_patch_box(reg: &Tensor, n: usize, geom: &ResponseGeometry, row: usize, col: usize) -> BBox {
    let (ax, ay) = geom.anchor(row, col);
    let l = reg.at(n, 0, row, col);
    let t = reg.at(n, 1, row, col);
    let r = reg.at(n, 2, row, col);
    let b = reg.at(n, 3, row, col);
    let (x1, y1, x2, y2) = (ax - l, ay - t, ax + r, ay + b);
    BBox {
        cx: (x1 + x2) / 2.0,
        cy: (y1 + y2) / 2.0,
        w: x2 - x1,
        h: y2 - y1,
    }
}

/// Decode every cell of a `[1, 4, R, R]` regression map into frame-coordinate
/// boxes (row-major). Sides are clamped to at least one frame pixel.
pub fn decode_boxes(reg: &Tensor, geom: &ResponseGeometry, crop: &CropSpec) -> Vec<BBox> {
    let mut out = Vec::with_capacity(geom.cells());
    for row in 0..geom.size {
        for col in 0..geom.size {
            let mut b = crop.box_to_frame(&decode_patch_box(reg, 0, geom, row, col));
            b.w = b.w.max(1.0);
            b.h = b.h.max(1.0);
            out.push(b);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_xcorr(z: &Tensor, x: &Tensor) -> Tensor {
        let [n, c, k, _] = z.shape;
        let s = x.h();
        let r = s - k + 1;
        let mut out = Tensor::zeros([n, c, r, r]);
        for b in 0..n {
            for ch in 0..c {
                for u in 0..r {
                    for v in 0..r {
                        let mut acc = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                acc += z.at(b, ch, i, j) * x.at(b, ch, u + i, v + j);
                            }
                        }
                        let idx = out.idx(b, ch, u, v);
                        out.data[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn xcorr_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor([1, 1, 6, 6], &mut rng);
        let z = Tensor::filled([1, 1, 1, 1], 1.0);
        assert_eq!(depthwise_xcorr(&z, &x).unwrap(), x);
    }

    #[test]
    fn xcorr_small_integer_case() {
        let z = Tensor::from_vec([1, 2, 2, 2], vec![1., 2., 3., 4., -1., 0., 2., 1.]).unwrap();
        let x = Tensor::from_vec([1, 2, 3, 3], (0..18).map(|v| v as f64).collect()).unwrap();
        let got = depthwise_xcorr(&z, &x).unwrap();
        assert_eq!(got, brute_xcorr(&z, &x));
        // channel 0, cell (0, 0): 1*0 + 2*1 + 3*3 + 4*4
        assert_eq!(got.at(0, 0, 0, 0), 27.0);
    }

    #[test]
    fn xcorr_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = rand_tensor([1, 3, 3, 3], &mut rng);
        let x = Tensor::filled([1, 3, 7, 7], 1.0);
        let y = depthwise_xcorr(&z, &x).unwrap();
        for c in 0..3 {
            let s: f64 = (0..9).map(|i| z.data[c * 9 + i]).sum();
            for v in &y.data[c * 25..(c + 1) * 25] {
                assert!((v - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xcorr_rejects_oversized_template() {
        let z = Tensor::zeros([1, 1, 5, 5]);
        let x = Tensor::zeros([1, 1, 4, 4]);
        assert!(depthwise_xcorr(&z, &x).is_err());
        let z = Tensor::zeros([1, 2, 3, 3]);
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(depthwise_xcorr(&z, &x).is_err());
    }

    #[test]
    fn xcorr_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = rand_tensor([2, 3, 3, 3], &mut rng);
        let x = rand_tensor([2, 3, 5, 5], &mut rng);
        let gy = rand_tensor([2, 3, 3, 3], &mut rng);
        let (gz, gx) = depthwise_xcorr_backward(&z, &x, &gy);
        let nz = numeric_grad(&z.data, 1e-6, |v| {
            dot(&depthwise_xcorr(&Tensor::from_vec(z.shape, v.to_vec()).unwrap(), &x).unwrap(), &gy)
        });
        let nx = numeric_grad(&x.data, 1e-6, |v| {
            dot(&depthwise_xcorr(&z, &Tensor::from_vec(x.shape, v.to_vec()).unwrap()).unwrap(), &gy)
        });
        assert!(rel_err(&gz.data, &nz) < 1e-5);
        assert!(rel_err(&gx.data, &nx) < 1e-5);
    }

    #[test]
    fn full_scale_branch_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = DepthHead::new(256, 32.0, &mut rng);
        let z = rand_tensor([1, 256, 7, 7], &mut rng);
        let x = rand_tensor([1, 256, 31, 31], &mut rng);
        let (rp, _) = head.branch_forward(&z, &x, Mode::Eval).unwrap();
        assert_eq!(rp.cls.shape, [1, 2, 25, 25]);
        assert_eq!(rp.reg.shape, [1, 4, 25, 25]);
        assert!(rp.reg.data.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn zero_adjust_weights_give_constant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = DepthHead::new(8, 32.0, &mut rng);
        for b in [&mut head.cls, &mut head.reg] {
            b.adjust_z.conv.weight.value.fill(0.0);
            b.adjust_x.conv.weight.value.fill(0.0);
        }
        let z = rand_tensor([1, 8, 3, 3], &mut rng);
        let x = rand_tensor([1, 8, 9, 9], &mut rng);
        let (rp, _) = head.branch_forward(&z, &x, Mode::Eval).unwrap();
        for t in [&rp.cls, &rp.reg] {
            for c in 0..t.c() {
                let v0 = t.at(0, c, 0, 0);
                for i in 0..49 {
                    assert_eq!(t.data[c * 49 + i], v0);
                }
            }
        }
    }

    #[test]
    fn shifted_search_shifts_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = rand_tensor([1, 2, 3, 3], &mut rng);
        let x = rand_tensor([1, 2, 10, 10], &mut rng);
        // shift the search map right by one column
        let mut xs = Tensor::zeros(x.shape);
        for c in 0..2 {
            for y in 0..10 {
                for xx in 1..10 {
                    let i = xs.idx(0, c, y, xx);
                    xs.data[i] = x.at(0, c, y, xx - 1);
                }
            }
        }
        let a = depthwise_xcorr(&z, &x).unwrap();
        let b = depthwise_xcorr(&z, &xs).unwrap();
        for c in 0..2 {
            for u in 0..8 {
                for v in 1..8 {
                    assert!((b.at(0, c, u, v) - a.at(0, c, u, v - 1)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mk = |rng: &mut ChaCha8Rng| ResponsePair {
            cls: rand_tensor([1, 2, 5, 5], rng),
            reg: rand_tensor([1, 4, 5, 5], rng),
        };
        let s = mk(&mut rng);
        let d = mk(&mut rng);
        let sel = FusionWeights { alpha_s: 1.0, alpha_d: 0.0, beta_s: 1.0, beta_d: 0.0 };
        assert_eq!(fuse_responses(&s, &d, &sel).unwrap().cls, s.cls);
        let half = FusionWeights::default();
        let same = fuse_responses(&s, &s, &half).unwrap();
        assert!(rel_err(&same.cls.data, &s.cls.data) < 1e-15);
        let w = FusionWeights { alpha_s: 0.3, alpha_d: -1.2, beta_s: 2.0, beta_d: 0.25 };
        let f = fuse_responses(&s, &d, &w).unwrap();
        for i in 0..s.cls.len() {
            assert_eq!(f.cls.data[i], 0.3 * s.cls.data[i] + -1.2 * d.cls.data[i]);
        }
        for i in 0..s.reg.len() {
            assert_eq!(f.reg.data[i], 2.0 * s.reg.data[i] + 0.25 * d.reg.data[i]);
        }
    }

    #[test]
    fn symmetric_decode_at_center() {
        let geom = ResponseGeometry { size: 25, stride: 8.0, patch_size: 255 };
        let mut reg = Tensor::zeros([1, 4, 25, 25]);
        for c in 0..4 {
            let i = reg.idx(0, c, 12, 12);
            reg.data[i] = 10.0;
        }
        let b = decode_patch_box(&reg, 0, &geom, 12, 12);
        assert_eq!((b.cx, b.cy, b.w, b.h), (127.5, 127.5, 20.0, 20.0));
        // zero regression decodes to degenerate boxes clamped to one pixel
        let crop = CropSpec { cx: 50.0, cy: 50.0, side: 255.0, out_size: 255 };
        let boxes = decode_boxes(&Tensor::zeros([1, 4, 25, 25]), &geom, &crop);
        assert_eq!(boxes.len(), 625);
        assert!(boxes.iter().all(|b| b.w == 1.0 && b.h == 1.0));
        let frame = decode_boxes(&reg, &geom, &crop)[12 * 25 + 12];
        assert!((frame.cx - 50.0).abs() < 1e-12 && (frame.w - 20.0).abs() < 1e-12);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut head = Head::new(4, 3.0, &mut rng);
        head.fusion.value = vec![0.7, 0.4, 0.3, 0.9];
        let mk = |s: usize, rng: &mut ChaCha8Rng| TwofoldFeatures {
            shallow: rand_tensor([2, 4, s, s], rng),
            deep: rand_tensor([2, 4, s, s], rng),
        };
        let z = mk(3, &mut rng);
        let x = mk(5, &mut rng);
        let probe = head.clone();
        let (out, cache) = head.forward(&z, &x, Depths::Both, Mode::Train).unwrap();
        let g = ResponsePair {
            cls: rand_tensor(out.cls.shape, &mut rng),
            reg: rand_tensor(out.reg.shape, &mut rng),
        };
        let (gz, gx) = head.backward(cache, &g);
        let objective = |h: &Head, z: &TwofoldFeatures, x: &TwofoldFeatures| {
            let (o, _) = h.forward(z, x, Depths::Both, Mode::Train).unwrap();
            dot(&o.cls, &g.cls) + dot(&o.reg, &g.reg)
        };
        let nz = numeric_grad(&z.deep.data, 1e-6, |v| {
            let mut z2 = z.clone();
            z2.deep.data = v.to_vec();
            objective(&probe, &z2, &x)
        });
        assert!(rel_err(&gz.deep.data, &nz) < 1e-4);
        let nx = numeric_grad(&x.shallow.data, 1e-6, |v| {
            let mut x2 = x.clone();
            x2.shallow.data = v.to_vec();
            objective(&probe, &z, &x2)
        });
        assert!(rel_err(&gx.shallow.data, &nx) < 1e-4);
        let nf = numeric_grad(&probe.fusion.value, 1e-6, |v| {
            let mut h = probe.clone();
            h.fusion.value = v.to_vec();
            objective(&h, &z, &x)
        });
        assert!(rel_err(&head.fusion.grad, &nf) < 1e-6);
    }

    proptest! {
        #[test]
        fn xcorr_matches_brute_force_on_integers(c in 1usize..=4, k in 1usize..=8, extra in 0usize..=7, seed in 0u64..1000) {
            let s = (k + extra).min(8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Tensor::from_vec([1, c, k, k], (0..c * k * k).map(|_| rng.random_range(-9i32..=9) as f64).collect()).unwrap();
            let x = Tensor::from_vec([1, c, s, s], (0..c * s * s).map(|_| rng.random_range(-9i32..=9) as f64).collect()).unwrap();
            prop_assert_eq!(depthwise_xcorr(&z, &x).unwrap(), brute_xcorr(&z, &x));
        }

        #[test]
        fn argmax_invariant_to_common_alpha_scale(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = ResponsePair { cls: rand_tensor([1, 2, 5, 5], &mut rng), reg: rand_tensor([1, 4, 5, 5], &mut rng) };
            let d = ResponsePair { cls: rand_tensor([1, 2, 5, 5], &mut rng), reg: rand_tensor([1, 4, 5, 5], &mut rng) };
            let w = FusionWeights { alpha_s: rng.random_range(0.1..2.0), alpha_d: rng.random_range(0.1..2.0), beta_s: 0.5, beta_d: 0.5 };
            let w2 = FusionWeights { alpha_s: w.alpha_s * scale, alpha_d: w.alpha_d * scale, ..w };
            let argmax = |t: &Tensor| {
                let fg = &t.data[25..50];
                fg.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
            };
            let a = fuse_responses(&s, &d, &w).unwrap();
            let b = fuse_responses(&s, &d, &w2).unwrap();
            prop_assert_eq!(argmax(&a.cls), argmax(&b.cls));
        }
    }
}
