//! Twofold structured features network.
//!
//! A four-stage bottleneck residual extractor (strides 4/2/1/1 after the
//! stem, dilation in stages 3 and 4) followed by the crop/downsample/concat
//! fusion that turns stages 1–2 into the shallow map and stages 3–4 into the
//! deep map:
//!
//! ```text
//! shallow = DS(concat(CR(DS(CR(f1))), CR(DS(f2))))
//! deep    = DS(concat(CR(DS(f3)),     CR(DS(f4))))
//! ```
//!
//! The inner crop on `f1` aligns it with the stage-2 resolution on both
//! branches. The outer crops take the template branch down to
//! `template_spatial`; they are the identity on the instance branch.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsfError};
use crate::nn::{
    join, maxpool3s2, maxpool3s2_backward, maxpool_out, Bottleneck, BottleneckCache, ConvBn,
    ConvBnCache, Conv2d, MaxPoolCache, Mode, Module, Param,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub fused_channels: usize,
    pub template_spatial: usize,
    #[serde(default)]
    pub pretrained_weights_path: Option<PathBuf>,
}

impl BackboneConfig {
    /// ResNet-50 channel plan: 256/512/1024/2048 with 3/4/6/3 bottlenecks.
    pub fn full() -> Self {
        BackboneConfig {
            variant: Variant::Full,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            stage_blocks: [3, 4, 6, 3],
            fused_channels: 256,
            template_spatial: 7,
            pretrained_weights_path: None,
        }
    }

    /// Same stride/dilation plan and fusion wiring with narrow stages, one
    /// bottleneck per stage.
    pub fn tiny() -> Self {
        BackboneConfig {
            variant: Variant::Tiny,
            stem_channels: 8,
            stage_channels: [16, 32, 64, 128],
            stage_blocks: [1, 1, 1, 1],
            fused_channels: 32,
            template_spatial: 7,
            pretrained_weights_path: None,
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Full => Self::full(),
            Variant::Tiny => Self::tiny(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(TsfError::InvalidArgument(
                "stage_channels must be strictly increasing".into(),
            ));
        }
        if self.stage_channels.iter().any(|c| c % 4 != 0) {
            return Err(TsfError::InvalidArgument(
                "stage_channels must be multiples of 4 (bottleneck width)".into(),
            ));
        }
        if self.fused_channels == 0 || self.fused_channels % 8 != 0 {
            return Err(TsfError::InvalidArgument(
                "fused_channels must be a positive multiple of 8".into(),
            ));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(TsfError::InvalidArgument("every stage needs at least one block".into()));
        }
        if self.template_spatial == 0 || self.template_spatial % 2 == 0 {
            return Err(TsfError::InvalidArgument("template_spatial must be odd".into()));
        }
        Ok(())
    }

    /// `(f1, f2)` spatial sizes for a square input of side `n`; f3 and f4 match f2.
    pub fn stage_sizes(&self, n: usize) -> Result<(usize, usize)> {
        if n < 15 {
            return Err(TsfError::ShapeMismatch(format!("patch side {n} too small")));
        }
        let stem = (n - 7) / 2 + 1;
        let f1 = maxpool_out(stem);
        if f1 < 3 {
            return Err(TsfError::ShapeMismatch(format!("patch side {n} too small")));
        }
        let f2 = (f1 - 3) / 2 + 1;
        if (f1 - f2) % 2 != 0 {
            return Err(TsfError::ShapeMismatch(format!(
                "patch side {n}: stage-1 map {f1} cannot be center-aligned with stage-2 map {f2}"
            )));
        }
        Ok((f1, f2))
    }

    /// Spatial size of the fused features for a patch of side `n`.
    pub fn fused_size(&self, n: usize, branch: Branch) -> Result<usize> {
        let (_, f2) = self.stage_sizes(n)?;
        match branch {
            Branch::Instance => Ok(f2),
            Branch::Template => {
                let t = self.template_spatial;
                if f2 < t || (f2 - t) % 2 != 0 {
                    return Err(TsfError::ShapeMismatch(format!(
                        "patch side {n}: stage-2 map {f2} cannot be center-cropped to {t}"
                    )));
                }
                Ok(t)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Template,
    Instance,
}

/// Paired shallow and deep feature maps (`[N, C, S, S]` each).
#[derive(Debug, Clone, PartialEq)]
pub struct TwofoldFeatures {
    pub shallow: Tensor,
    pub deep: Tensor,
}

impl TwofoldFeatures {
    pub fn shape(&self) -> [usize; 4] {
        self.shallow.shape
    }

    pub fn check_consistent(&self) -> Result<()> {
        if self.shallow.shape != self.deep.shape {
            return Err(TsfError::ShapeMismatch(format!(
                "shallow {:?} vs deep {:?}",
                self.shallow.shape, self.deep.shape
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        TwofoldFeatures {
            shallow: Tensor::zeros(self.shallow.shape),
            deep: Tensor::zeros(self.deep.shape),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.shallow.all_finite() && self.deep.all_finite()
    }

    pub fn select(&self, n: usize) -> TwofoldFeatures {
        TwofoldFeatures {
            shallow: self.shallow.select(n),
            deep: self.deep.select(n),
        }
    }

    pub fn stack(items: &[&TwofoldFeatures]) -> Result<TwofoldFeatures> {
        let s: Vec<&Tensor> = items.iter().map(|t| &t.shallow).collect();
        let d: Vec<&Tensor> = items.iter().map(|t| &t.deep).collect();
        Ok(TwofoldFeatures {
            shallow: Tensor::stack(&s)?,
            deep: Tensor::stack(&d)?,
        })
    }
}

/// Outputs of the four stages.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

pub struct StagesCache {
    stem: ConvBnCache,
    pool: MaxPoolCache,
    blocks: Vec<Vec<BottleneckCache>>,
}

pub struct FuseCache {
    branch: Branch,
    sizes: [(usize, usize); 4],
    aligned_f1: usize,
    ds: Vec<ConvBnCache>,
    ds_shallow: ConvBnCache,
    ds_deep: ConvBnCache,
    fused_channels: usize,
}

pub struct BackboneCache {
    stages: StagesCache,
    fuse: FuseCache,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: ConvBn,
    pub stages: Vec<Vec<Bottleneck>>,
    /// Per-stage channel reduction to `fused_channels`.
    pub ds: Vec<ConvBn>,
    pub ds_shallow: ConvBn,
    pub ds_deep: ConvBn,
}

const STAGE_STRIDE: [usize; 4] = [1, 2, 1, 1];
const STAGE_DILATION: [usize; 4] = [1, 1, 2, 4];

fn make_stage<R: Rng>(inplanes: usize, out: usize, blocks: usize, stride: usize, dilation: usize, rng: &mut R) -> Vec<Bottleneck> {
    let planes = out / 4;
    let downsample = if stride != 1 || inplanes != out {
        let conv = if stride == 1 && dilation == 1 {
            Conv2d::pointwise(inplanes, out, false, rng)
        } else if dilation > 1 {
            let dd = dilation / 2;
            Conv2d::new(inplanes, out, 3, stride, dd, dd, false, rng)
        } else {
            Conv2d::new(inplanes, out, 3, stride, 0, 1, false, rng)
        };
        Some(ConvBn::new(conv, false))
    } else {
        None
    };
    let mut layers = Vec::with_capacity(blocks);
    for i in 0..blocks {
        let (cin, s) = if i == 0 { (inplanes, stride) } else { (out, 1) };
        let mut d = dilation;
        let mut pad = 2 - s;
        if i == 0 && downsample.is_some() && d > 1 {
            d /= 2;
            pad = d;
        }
        if d > 1 {
            pad = d;
        }
        layers.push(Bottleneck {
            reduce: ConvBn::new(Conv2d::pointwise(cin, planes, false, rng), true),
            spatial: ConvBn::new(Conv2d::new(planes, planes, 3, s, pad, d, false, rng), true),
            expand: ConvBn::new(Conv2d::pointwise(planes, out, false, rng), false),
            downsample: if i == 0 { downsample.clone() } else { None },
        });
    }
    layers
}

impl Backbone {
    pub fn new<R: Rng>(cfg: BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = ConvBn::new(Conv2d::new(3, cfg.stem_channels, 7, 2, 0, 1, false, rng), true);
        let mut stages = Vec::with_capacity(4);
        let mut inplanes = cfg.stem_channels;
        for i in 0..4 {
            stages.push(make_stage(
                inplanes,
                cfg.stage_channels[i],
                cfg.stage_blocks[i],
                STAGE_STRIDE[i],
                STAGE_DILATION[i],
                rng,
            ));
            inplanes = cfg.stage_channels[i];
        }
        let c = cfg.fused_channels;
        let ds = cfg
            .stage_channels
            .iter()
            .map(|&sc| ConvBn::new(Conv2d::pointwise(sc, c, false, rng), false))
            .collect();
        Ok(Backbone {
            stem,
            stages,
            ds,
            ds_shallow: ConvBn::new(Conv2d::pointwise(2 * c, c, false, rng), false),
            ds_deep: ConvBn::new(Conv2d::pointwise(2 * c, c, false, rng), false),
            cfg,
        })
    }

    pub fn extract_stages(&self, x: &Tensor, mode: Mode) -> Result<(StageFeatures, StagesCache)> {
        let [_, c, h, w] = x.shape;
        if h != w {
            return Err(TsfError::ShapeMismatch(format!("patch must be square, got {h}x{w}")));
        }
        if c != 3 {
            return Err(TsfError::ShapeMismatch(format!("patch must have 3 channels, got {c}")));
        }
        self.cfg.stage_sizes(h)?;
        let (s, stem) = self.stem.forward(x, mode)?;
        let (mut cur, pool) = maxpool3s2(&s);
        let mut outs = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for stage in &self.stages {
            let mut stage_caches = Vec::with_capacity(stage.len());
            for block in stage {
                let (y, c) = block.forward(&cur, mode)?;
                stage_caches.push(c);
                cur = y;
            }
            caches.push(stage_caches);
            outs.push(cur.clone());
        }
        let mut it = outs.into_iter();
        let feats = StageFeatures {
            f1: it.next().unwrap(),
            f2: it.next().unwrap(),
            f3: it.next().unwrap(),
            f4: it.next().unwrap(),
        };
        Ok((
            feats,
            StagesCache {
                stem,
                pool,
                blocks: caches,
            },
        ))
    }

    pub fn fuse_twofold(&self, st: &StageFeatures, branch: Branch, mode: Mode) -> Result<(TwofoldFeatures, FuseCache)> {
        let cfg = &self.cfg;
        let maps = [&st.f1, &st.f2, &st.f3, &st.f4];
        for (i, m) in maps.iter().enumerate() {
            if m.c() != cfg.stage_channels[i] {
                return Err(TsfError::ShapeMismatch(format!(
                    "stage {} has {} channels, config expects {}",
                    i + 1,
                    m.c(),
                    cfg.stage_channels[i]
                )));
            }
        }
        let base = st.f2.h();
        if st.f3.h() != base || st.f4.h() != base {
            return Err(TsfError::ShapeMismatch("stages 2-4 must share spatial size".into()));
        }
        let out = match branch {
            Branch::Instance => base,
            Branch::Template => {
                let t = cfg.template_spatial;
                if base < t || (base - t) % 2 != 0 {
                    return Err(TsfError::ShapeMismatch(format!(
                        "stage-2 map {base} cannot be cropped to {t}"
                    )));
                }
                t
            }
        };
        let sizes = [
            (st.f1.h(), st.f1.w()),
            (st.f2.h(), st.f2.w()),
            (st.f3.h(), st.f3.w()),
            (st.f4.h(), st.f4.w()),
        ];
        let a1 = st.f1.center_crop(base)?;
        let inputs = [&a1, &st.f2, &st.f3, &st.f4];
        let mut ds_caches = Vec::with_capacity(4);
        let mut reduced = Vec::with_capacity(4);
        for (ds, x) in self.ds.iter().zip(inputs) {
            let (y, c) = ds.forward(x, mode)?;
            ds_caches.push(c);
            reduced.push(y.center_crop(out)?);
        }
        let (shallow, ds_shallow) = self
            .ds_shallow
            .forward(&Tensor::concat_channels(&[&reduced[0], &reduced[1]])?, mode)?;
        let (deep, ds_deep) = self
            .ds_deep
            .forward(&Tensor::concat_channels(&[&reduced[2], &reduced[3]])?, mode)?;
        Ok((
            TwofoldFeatures { shallow, deep },
            FuseCache {
                branch,
                sizes,
                aligned_f1: base,
                ds: ds_caches,
                ds_shallow,
                ds_deep,
                fused_channels: cfg.fused_channels,
            },
        ))
    }

    /// Patch to twofold features for one branch.
    pub fn forward(&self, x: &Tensor, branch: Branch, mode: Mode) -> Result<(TwofoldFeatures, BackboneCache)> {
        let (st, stages) = self.extract_stages(x, mode)?;
        let (tf, fuse) = self.fuse_twofold(&st, branch, mode)?;
        Ok((tf, BackboneCache { stages, fuse }))
    }

    /// Inference-only forward.
    pub fn features(&self, x: &Tensor, branch: Branch) -> Result<TwofoldFeatures> {
        Ok(self.forward(x, branch, Mode::Eval)?.0)
    }

    /// Backward through the fusion only; returns gradients w.r.t. the stage maps.
    pub fn fuse_backward(&mut self, cache: FuseCache, g: &TwofoldFeatures) -> [Tensor; 4] {
        let c = cache.fused_channels;
        let gs = self
            .ds_shallow
            .backward(cache.ds_shallow, &g.shallow, true)
            .expect("input grad requested");
        let gd = self
            .ds_deep
            .backward(cache.ds_deep, &g.deep, true)
            .expect("input grad requested");
        let mut parts = gs.split_channels(&[c, c]);
        parts.extend(gd.split_channels(&[c, c]));
        let base = cache.aligned_f1;
        let mut out: Vec<Tensor> = Vec::with_capacity(4);
        for (i, (part, dsc)) in parts.into_iter().zip(cache.ds).enumerate().rev() {
            let part = match cache.branch {
                Branch::Template => part.uncrop(base, base),
                Branch::Instance => part,
            };
            let gx = self.ds[i].backward(dsc, &part, true).expect("input grad requested");
            let (h, w) = cache.sizes[i];
            out.push(if i == 0 { gx.uncrop(h, w) } else { gx });
        }
        out.reverse();
        let mut it = out.into_iter();
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    }

    /// Backward through stages given per-stage output gradients.
    pub fn stages_backward(&mut self, cache: StagesCache, grads: [Tensor; 4]) {
        let mut carry: Option<Tensor> = None;
        for (si, (stage_cache, g_out)) in cache.blocks.into_iter().zip(grads).enumerate().rev() {
            let mut g = g_out;
            if let Some(c) = carry.take() {
                g.add_assign(&c);
            }
            let stage = &mut self.stages[si];
            for (bi, bc) in stage_cache.into_iter().enumerate().rev() {
                g = stage[bi].backward(bc, &g, true).expect("input grad requested");
            }
            carry = Some(g);
        }
        let g = maxpool3s2_backward(cache.pool, &carry.expect("four stages"));
        self.stem.backward(cache.stem, &g, false);
    }

    pub fn backward(&mut self, cache: BackboneCache, g: &TwofoldFeatures) {
        let grads = self.fuse_backward(cache.fuse, g);
        self.stages_backward(cache.stages, grads);
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter().enumerate() {
            for (j, b) in stage.iter().enumerate() {
                b.visit(&join(prefix, &format!("layer{}.{}", i + 1, j)), f);
            }
        }
        for (i, d) in self.ds.iter().enumerate() {
            d.visit(&join(prefix, &format!("ds{}", i + 1)), f);
        }
        self.ds_shallow.visit(&join(prefix, "ds_shallow"), f);
        self.ds_deep.visit(&join(prefix, "ds_deep"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (i, stage) in self.stages.iter_mut().enumerate() {
            for (j, b) in stage.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("layer{}.{}", i + 1, j)), f);
            }
        }
        for (i, d) in self.ds.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("ds{}", i + 1)), f);
        }
        self.ds_shallow.visit_mut(&join(prefix, "ds_shallow"), f);
        self.ds_deep.visit_mut(&join(prefix, "ds_deep"), f);
    }
}
