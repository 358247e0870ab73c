//! Two-stage training.
//!
//! Stage 1 fits backbone and head on (template, search) patch pairs with a
//! balanced cross-entropy plus IoU loss. Stage 2 freezes both and fits the
//! template update on tuples harvested by running the stage-1 tracker.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Branch, TwofoldFeatures};
use crate::data_io::SequenceRecord;
use crate::error::{Result, TsfError};
use crate::geometry::{crop_patch, exemplar_side, instance_side, BBox, CropSpec, Image};
use crate::head::{Depths, ResponseGeometry, ResponsePair};
use crate::model::TsfModel;
use crate::nn::{Mode, Module};
use crate::template_update::{mu_loss, mu_loss_with_grad, MuWeights, TemplateBank};
use crate::tensor::Tensor;
use crate::tracker::{run_sequence_with, template_features, TrackConfig, RESPONSE_STRIDE};

pub const TEMPLATE_SIZE: usize = 127;
pub const INSTANCE_SIZE: usize = 255;

/// A training pair: exemplar patch, search patch and the target box in search-patch pixels.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub template_patch: Image,
    pub search_patch: Image,
    pub gt_box_in_patch: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Pos,
    Neg,
    Ignore,
}

/// Per-cell labels and `(left, top, right, bottom)` regression targets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub size: usize,
    pub cls: Vec<Label>,
    pub reg: Vec<[f64; 4]>,
}

impl LabelGrid {
    pub fn count(&self, l: Label) -> usize {
        self.cls.iter().filter(|&&c| c == l).count()
    }
}

/// Cells whose anchor lies inside the box shrunk by half are positive, cells
/// outside the box negative, the ring between ignored. A box that captures no
/// anchor gets its nearest cell forced positive.
pub fn encode_targets(gt: &BBox, geom: &ResponseGeometry) -> Result<LabelGrid> {
    gt.validate()?;
    let (x1, y1, x2, y2) = gt.corners();
    let n = geom.cells();
    let mut cls = Vec::with_capacity(n);
    let mut reg = Vec::with_capacity(n);
    let mut nearest = (0, f64::INFINITY);
    for row in 0..geom.size {
        for col in 0..geom.size {
            let (ax, ay) = geom.anchor(row, col);
            let inner = (ax - gt.cx).abs() <= gt.w / 4.0 && (ay - gt.cy).abs() <= gt.h / 4.0;
            let inside = ax >= x1 && ax <= x2 && ay >= y1 && ay <= y2;
            cls.push(if inner {
                Label::Pos
            } else if inside {
                Label::Ignore
            } else {
                Label::Neg
            });
            reg.push([ax - x1, ay - y1, x2 - ax, y2 - ay]);
            let d = (ax - gt.cx).hypot(ay - gt.cy);
            if d < nearest.1 {
                nearest = (row * geom.size + col, d);
            }
        }
    }
    if !cls.contains(&Label::Pos) {
        cls[nearest.0] = Label::Pos;
    }
    Ok(LabelGrid {
        size: geom.size,
        cls,
        reg,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
}

/// `1 - IoU` between boxes given as side distances from a shared anchor, and its gradient
/// w.r.t. the predicted distances.
fn iou_loss(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = p;
    let [gl, gt, gr, gb] = g;
    let iw = l.min(gl) + r.min(gr);
    let ih = t.min(gt) + b.min(gb);
    let pa = (l + r) * (t + b);
    let ga = (gl + gr) * (gt + gb);
    if iw <= 0.0 || ih <= 0.0 {
        // no overlap: IoU is 0 and locally flat
        return (1.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let union = pa + ga - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_pa = -inter / (union * union);
    let sel = |a: f64, b: f64| if a < b { 1.0 } else { 0.0 };
    let grads = [
        d_inter * ih * sel(l, gl) + d_pa * (t + b),
        d_inter * iw * sel(t, gt) + d_pa * (l + r),
        d_inter * ih * sel(r, gr) + d_pa * (t + b),
        d_inter * iw * sel(b, gb) + d_pa * (l + r),
    ];
    (1.0 - iou, grads.map(|v| -v))
}

/// Balanced cross-entropy (`0.5 mean_pos + 0.5 mean_neg`, ignore cells excluded)
/// plus `lambda_reg` times the mean IoU loss over positive cells. Returns the
/// loss and its gradient w.r.t. the predicted logits and distances.
pub fn loss_stage1(pred: &ResponsePair, labels: &[LabelGrid], lambda_reg: f64) -> Result<(LossParts, ResponsePair)> {
    let [n, two, r, r2] = pred.cls.shape;
    if two != 2 || r != r2 || pred.reg.shape != [n, 4, r, r] || labels.len() != n {
        return Err(TsfError::ShapeMismatch(format!(
            "responses {:?}/{:?} with {} label grids",
            pred.cls.shape,
            pred.reg.shape,
            labels.len()
        )));
    }
    if labels.iter().any(|l| l.size != r) {
        return Err(TsfError::ShapeMismatch("label grid size differs from response size".into()));
    }
    let count = |l: Label| labels.iter().map(|g| g.count(l)).sum::<usize>();
    let (npos, nneg) = (count(Label::Pos), count(Label::Neg));
    if npos + nneg == 0 {
        return Err(TsfError::MalformedSample("no positive or negative cells".into()));
    }
    // each populated class contributes half; a lone class takes the whole weight
    let (wpos, wneg) = match (npos, nneg) {
        (0, _) => (0.0, 1.0 / nneg as f64),
        (_, 0) => (1.0 / npos as f64, 0.0),
        _ => (0.5 / npos as f64, 0.5 / nneg as f64),
    };
    let rr = r * r;
    let mut g = ResponsePair {
        cls: Tensor::zeros(pred.cls.shape),
        reg: Tensor::zeros(pred.reg.shape),
    };
    let mut parts = LossParts::default();
    for (s, grid) in labels.iter().enumerate() {
        for i in 0..rr {
            let (target, w) = match grid.cls[i] {
                Label::Pos => (1, wpos),
                Label::Neg => (0, wneg),
                Label::Ignore => continue,
            };
            let z = [pred.cls.data[(s * 2) * rr + i], pred.cls.data[(s * 2 + 1) * rr + i]];
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            parts.cls += w * (lse - z[target]);
            for (k, zk) in z.iter().enumerate() {
                let p = (zk - lse).exp();
                let y = if k == target { 1.0 } else { 0.0 };
                g.cls.data[(s * 2 + k) * rr + i] = w * (p - y);
            }
            if grid.cls[i] == Label::Pos {
                let p = [0, 1, 2, 3].map(|c| pred.reg.data[(s * 4 + c) * rr + i]);
                let (l, dl) = iou_loss(p, grid.reg[i]);
                parts.reg += l / npos as f64;
                for c in 0..4 {
                    g.reg.data[(s * 4 + c) * rr + i] = lambda_reg * dl[c] / npos as f64;
                }
            }
        }
    }
    parts.total = parts.cls + lambda_reg * parts.reg;
    Ok((parts, g))
}

/// Warmup then decay. Warmup is linear from `warmup_start_lr` to `base_lr`;
/// the decay runs from `base_lr` to `final_lr` evenly in log space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub warmup_start_lr: f64,
    pub base_lr: f64,
    pub final_lr: f64,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Schedule {
            warmup_epochs: 0,
            warmup_start_lr: lr,
            base_lr: lr,
            final_lr: lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.warmup_start_lr, self.base_lr, self.final_lr] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TsfError::InvalidArgument(format!("learning rate {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) out of `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        if epoch < self.warmup_epochs {
            let f = epoch as f64 / self.warmup_epochs as f64;
            return self.warmup_start_lr + (self.base_lr - self.warmup_start_lr) * f;
        }
        let decay = epochs.saturating_sub(self.warmup_epochs);
        if decay <= 1 {
            return self.base_lr;
        }
        let f = (epoch - self.warmup_epochs) as f64 / (decay - 1) as f64;
        if self.base_lr > 0.0 && self.final_lr > 0.0 {
            (self.base_lr.ln() + (self.final_lr.ln() - self.base_lr.ln()) * f).exp()
        } else {
            self.base_lr + (self.final_lr - self.base_lr) * f
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_reg: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn stage1_default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            schedule: Schedule {
                warmup_epochs: 2,
                warmup_start_lr: 0.002,
                base_lr: 0.02,
                final_lr: 0.002,
            },
            momentum: 0.9,
            weight_decay: 1e-4,
            lambda_reg: 1.0,
            grad_clip: 5.0,
            seed: 1,
        }
    }

    pub fn stage2_default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            schedule: Schedule {
                warmup_epochs: 2,
                warmup_start_lr: 0.002,
                base_lr: 0.01,
                final_lr: 0.001,
            },
            momentum: 0.9,
            weight_decay: 0.0,
            lambda_reg: 1.0,
            grad_clip: 5.0,
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(TsfError::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TsfError::InvalidArgument(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.lambda_reg >= 0.0 && self.grad_clip >= 0.0) {
            return Err(TsfError::InvalidArgument("weight_decay, lambda_reg and grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// SGD with momentum over the trainable parameters a filter selects.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            velocity: Vec::new(),
        }
    }

    /// Apply one step and return the pre-clip gradient norm.
    pub fn step(&mut self, m: &mut dyn Module, select: &dyn Fn(&str) -> bool, lr: f64) -> f64 {
        let mut sq = 0.0;
        m.visit("", &mut |name, p| {
            if p.trainable && select(name) {
                sq += p.grad.iter().map(|g| g * g).sum::<f64>();
            }
        });
        let norm = sq.sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let mut k = 0;
        let (mom, wd) = (self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        m.visit_mut("", &mut |name, p| {
            if !(p.trainable && select(name)) {
                return;
            }
            if vel.len() <= k {
                vel.push(vec![0.0; p.len()]);
            }
            let v = &mut vel[k];
            for ((w, g), vi) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                *vi = mom * *vi + g * scale + wd * *w;
                *w -= lr * *vi;
            }
            k += 1;
        });
        norm
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
    pub steps: usize,
}

pub fn write_log_csv(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in logs {
        w.serialize(l)?;
    }
    w.flush()?;
    Ok(())
}

/// How pairs are cut from annotated sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSampling {
    /// Largest frame gap between template and search frame.
    pub max_gap: usize,
    /// Largest target offset from the search-patch center, in patch pixels.
    pub max_shift: f64,
    /// Search side is scaled by `exp(u)`, `u` uniform in `±scale_jitter`.
    pub scale_jitter: f64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            max_gap: 20,
            max_shift: 48.0,
            scale_jitter: 0.2,
        }
    }
}

fn exemplar_crop(frame: &Image, b: &BBox) -> Result<Image> {
    let spec = CropSpec::new(b, exemplar_side(b), TEMPLATE_SIZE)?;
    crop_patch(frame, &spec, &frame.channel_means())
}

/// Draw `count` pairs from annotated sequences, deterministically for a given seed.
pub fn sample_pairs(seqs: &[SequenceRecord], count: usize, sampling: &PairSampling, seed: u64) -> Result<Vec<PairSample>> {
    let usable: Vec<&SequenceRecord> = seqs.iter().filter(|s| s.gt.iter().flatten().count() >= 2).collect();
    if usable.is_empty() {
        return Err(TsfError::MissingData("no sequence with two annotated frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let seq = usable[rng.random_range(0..usable.len())];
        let n = seq.len();
        let i = rng.random_range(0..n);
        let lo = i.saturating_sub(sampling.max_gap);
        let hi = (i + sampling.max_gap).min(n - 1);
        let j = rng.random_range(lo..=hi);
        let (Some(bi), Some(bj)) = (seq.gt[i], seq.gt[j]) else {
            continue;
        };
        let template_patch = exemplar_crop(&seq.frame(i)?, &bi)?;
        let side = instance_side(&bj, TEMPLATE_SIZE, INSTANCE_SIZE) * rng.random_range(-sampling.scale_jitter..=sampling.scale_jitter).exp();
        let per_px = side / INSTANCE_SIZE as f64;
        let dx = rng.random_range(-sampling.max_shift..=sampling.max_shift) * per_px;
        let dy = rng.random_range(-sampling.max_shift..=sampling.max_shift) * per_px;
        let center = BBox {
            cx: bj.cx + dx,
            cy: bj.cy + dy,
            ..bj
        };
        let spec = CropSpec::new(&center, side, INSTANCE_SIZE)?;
        let frame = seq.frame(j)?;
        out.push(PairSample {
            template_patch,
            search_patch: crop_patch(&frame, &spec, &frame.channel_means())?,
            gt_box_in_patch: spec.box_to_patch(&bj),
        });
    }
    Ok(out)
}

fn batch_tensor(imgs: &[&Image]) -> Result<Tensor> {
    let rgb: Vec<Image> = imgs.iter().map(|i| (*i).clone().to_rgb()).collect();
    Tensor::from_images(&rgb.iter().collect::<Vec<_>>())
}

/// Response-map placement for a model at the standard patch sizes.
pub fn response_geometry(model: &TsfModel) -> Result<ResponseGeometry> {
    let cfg = &model.backbone.cfg;
    let x = cfg.fused_size(INSTANCE_SIZE, Branch::Instance)?;
    let z = cfg.fused_size(TEMPLATE_SIZE, Branch::Template)?;
    Ok(ResponseGeometry {
        size: x - z + 1,
        stride: RESPONSE_STRIDE,
        patch_size: INSTANCE_SIZE,
    })
}

/// Forward a batch in training mode and return the loss; with `learn`, also
/// back-propagate (accumulating gradients and refreshing normalization statistics).
fn stage1_pass(model: &mut TsfModel, batch: &[&PairSample], labels: &[LabelGrid], lambda: f64, learn: bool) -> Result<LossParts> {
    let z_in = batch_tensor(&batch.iter().map(|p| &p.template_patch).collect::<Vec<_>>())?;
    let x_in = batch_tensor(&batch.iter().map(|p| &p.search_patch).collect::<Vec<_>>())?;
    let (z, zc) = model.backbone.forward(&z_in, Branch::Template, Mode::Train)?;
    let (x, xc) = model.backbone.forward(&x_in, Branch::Instance, Mode::Train)?;
    let (resp, hc) = model.head.forward(&z, &x, Depths::Both, Mode::Train)?;
    let (parts, g) = loss_stage1(&resp, labels, lambda)?;
    if learn && parts.total.is_finite() {
        let (gz, gx) = model.head.backward(hc, &g);
        model.backbone.backward(xc, &gx);
        model.backbone.backward(zc, &gz);
    }
    Ok(parts)
}

fn is_stage1_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("head.")
}

/// Mean stage-1 loss over `pairs` (batch statistics, no parameter change).
pub fn stage1_loss(model: &TsfModel, pairs: &[PairSample], cfg: &TrainConfig) -> Result<LossParts> {
    let geom = response_geometry(model)?;
    let mut probe = model.clone();
    let mut acc = LossParts::default();
    let mut batches = 0;
    for chunk in pairs.chunks(cfg.batch_size) {
        let labels = chunk
            .iter()
            .map(|p| encode_targets(&p.gt_box_in_patch, &geom))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PairSample> = chunk.iter().collect();
        let p = stage1_pass(&mut probe, &refs, &labels, cfg.lambda_reg, false)?;
        acc.total += p.total;
        acc.cls += p.cls;
        acc.reg += p.reg;
        batches += 1;
    }
    let b = batches.max(1) as f64;
    Ok(LossParts {
        total: acc.total / b,
        cls: acc.cls / b,
        reg: acc.reg / b,
    })
}

/// Stage 1: SGD over backbone and head. The template update is untouched.
pub fn train_stage1(model: &mut TsfModel, pairs: &[PairSample], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if pairs.is_empty() && cfg.epochs > 0 {
        return Err(TsfError::MissingData("no training pairs".into()));
    }
    let geom = response_geometry(model)?;
    let labels = pairs
        .iter()
        .map(|p| encode_targets(&p.gt_box_in_patch, &geom))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut opt = Sgd::new(cfg);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut acc = LossParts::default();
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            // a singleton batch has degenerate batch statistics
            if idx.len() < 2 && steps > 0 {
                continue;
            }
            let batch: Vec<&PairSample> = idx.iter().map(|&i| &pairs[i]).collect();
            let lab: Vec<LabelGrid> = idx.iter().map(|&i| labels[i].clone()).collect();
            model.zero_grad();
            let parts = stage1_pass(model, &batch, &lab, cfg.lambda_reg, true)?;
            if !parts.total.is_finite() {
                return Err(TsfError::Divergence {
                    epoch,
                    step,
                    detail: format!("stage-1 loss is {}", parts.total),
                });
            }
            let norm = opt.step(model, &is_stage1_param, lr);
            if !norm.is_finite() {
                return Err(TsfError::Divergence {
                    epoch,
                    step,
                    detail: format!("gradient norm is {norm}"),
                });
            }
            acc.total += parts.total;
            acc.cls += parts.cls;
            acc.reg += parts.reg;
            steps += 1;
        }
        let s = steps.max(1) as f64;
        let log = EpochLog {
            stage: 1,
            epoch,
            lr,
            loss: acc.total / s,
            cls_loss: acc.cls / s,
            reg_loss: acc.reg / s,
            steps,
        };
        log::info!("stage 1 epoch {epoch}: lr {lr:.5} loss {:.4} (cls {:.4}, reg {:.4})", log.loss, log.cls_loss, log.reg_loss);
        on_epoch(&log);
        logs.push(log);
    }
    model.zero_grad();
    Ok(logs)
}

/// Template bank at frame `i` and the ground-truth template of frame `i + 1`.
#[derive(Debug, Clone)]
pub struct MuTuple {
    pub z_in: TwofoldFeatures,
    pub z_ac: TwofoldFeatures,
    pub z_cu: TwofoldFeatures,
    pub z_gt: TwofoldFeatures,
}

/// Run the tracker with the zero (identity) update and record, for every
/// frame but the last, the bank and the template extracted at the next
/// frame's ground truth. Frames whose successor lacks annotation are skipped.
pub fn harvest_mu_tuples(model: &TsfModel, seqs: &[SequenceRecord], track: &TrackConfig) -> Result<Vec<MuTuple>> {
    harvest_mu_tuples_with(model, &MuWeights::zeros(model.channels()), seqs, track)
}

/// [`harvest_mu_tuples`] with the tracker running a given template update, so
/// that later rounds see banks shaped by the update itself.
pub fn harvest_mu_tuples_with(model: &TsfModel, mu: &MuWeights, seqs: &[SequenceRecord], track: &TrackConfig) -> Result<Vec<MuTuple>> {
    let mut m = model.clone();
    m.mu = mu.clone();
    let cfg = TrackConfig {
        update_templates: true,
        linear_update_rate: None,
        confidence_gate: None,
        ..track.clone()
    };
    let mut tuples = Vec::new();
    for seq in seqs {
        let box0 = seq.init_box()?;
        let mut banks: Vec<TemplateBank> = Vec::with_capacity(seq.len());
        run_sequence_with(seq.frame_iter(), &box0, &m, &cfg, |s| banks.push(s.bank.clone()))?;
        for (i, bank) in banks.into_iter().enumerate().take(seq.len().saturating_sub(1)) {
            let Some(gt) = seq.gt[i + 1] else { continue };
            let z_gt = template_features(&m, &seq.frame(i + 1)?, &gt, &cfg)?;
            tuples.push(MuTuple {
                z_in: bank.z_in,
                z_ac: bank.z_ac,
                z_cu: bank.z_cu,
                z_gt,
            });
        }
    }
    Ok(tuples)
}

fn stack_field(tuples: &[&MuTuple], f: impl Fn(&MuTuple) -> &TwofoldFeatures) -> Result<TwofoldFeatures> {
    TwofoldFeatures::stack(&tuples.iter().map(|t| f(t)).collect::<Vec<_>>())
}

fn tuple_bank(tuples: &[&MuTuple]) -> Result<TemplateBank> {
    Ok(TemplateBank {
        z_in: stack_field(tuples, |t| &t.z_in)?,
        z_ac: stack_field(tuples, |t| &t.z_ac)?,
        z_cu: stack_field(tuples, |t| &t.z_cu)?,
        z_final: None,
    })
}

/// Mean template-update loss of `mu` over `tuples`.
pub fn mean_mu_loss(mu: &MuWeights, tuples: &[MuTuple]) -> Result<f64> {
    if tuples.is_empty() {
        return Err(TsfError::MissingData("no tuples".into()));
    }
    let mut total = 0.0;
    for chunk in tuples.chunks(64) {
        let refs: Vec<&MuTuple> = chunk.iter().collect();
        let (pred, _) = mu.forward(&tuple_bank(&refs)?)?;
        for (i, t) in chunk.iter().enumerate() {
            total += mu_loss(&pred.select(i), &t.z_gt)?;
        }
    }
    Ok(total / tuples.len() as f64)
}

/// Stage 2: SGD over the template-update weights only.
pub fn train_stage2(mu: &mut MuWeights, tuples: &[MuTuple], cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if tuples.is_empty() {
        return Err(TsfError::MissingData("no template-update tuples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..tuples.len()).collect();
    let mut opt = Sgd::new(cfg);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&MuTuple> = idx.iter().map(|&i| &tuples[i]).collect();
            mu.zero_grad();
            let (pred, cache) = mu.forward(&tuple_bank(&batch)?)?;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(batch.len());
            for (i, t) in batch.iter().enumerate() {
                let (l, g) = mu_loss_with_grad(&pred.select(i), &t.z_gt)?;
                loss += l;
                grads.push(TwofoldFeatures {
                    shallow: g.shallow.scaled(1.0 / batch.len() as f64),
                    deep: g.deep.scaled(1.0 / batch.len() as f64),
                });
            }
            loss /= batch.len() as f64;
            if !loss.is_finite() {
                return Err(TsfError::Divergence {
                    epoch,
                    step,
                    detail: format!("template-update loss is {loss}"),
                });
            }
            let g = TwofoldFeatures::stack(&grads.iter().collect::<Vec<_>>())?;
            mu.backward(cache, &g);
            opt.step(mu, &|_| true, lr);
            total += loss;
            steps += 1;
        }
        let log = EpochLog {
            stage: 2,
            epoch,
            lr,
            loss: total / steps.max(1) as f64,
            cls_loss: 0.0,
            reg_loss: 0.0,
            steps,
        };
        log::info!("stage 2 epoch {epoch}: lr {lr:.6} loss {:.5}", log.loss);
        on_epoch(&log);
        logs.push(log);
    }
    mu.zero_grad();
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::head::decode_patch_box;
    use crate::nn::gradcheck::*;
    use crate::nn::Param;
    use proptest::prelude::{prop_assert, proptest};

    fn geom(size: usize) -> ResponseGeometry {
        ResponseGeometry {
            size,
            stride: RESPONSE_STRIDE,
            patch_size: INSTANCE_SIZE,
        }
    }

    #[test]
    fn huge_box_makes_every_cell_positive() {
        let g = encode_targets(&BBox::new(127.5, 127.5, 600.0, 600.0).unwrap(), &geom(25)).unwrap();
        assert_eq!(g.count(Label::Pos), 625);
    }

    #[test]
    fn one_pixel_box_forces_one_positive() {
        let g = encode_targets(&BBox::new(130.2, 121.0, 1.0, 1.0).unwrap(), &geom(25)).unwrap();
        assert_eq!(g.count(Label::Pos), 1);
        let i = g.cls.iter().position(|&l| l == Label::Pos).unwrap();
        // nearest anchor to (130.2, 121.0): column 12 (127.5), row 11 (119.5)
        assert_eq!(i, 11 * 25 + 12);
    }

    #[test]
    fn labels_partition_by_membership() {
        let gt = BBox::new(127.5, 127.5, 64.0, 32.0).unwrap();
        let g = encode_targets(&gt, &geom(25)).unwrap();
        for row in 0..25 {
            for col in 0..25 {
                let (ax, ay) = geom(25).anchor(row, col);
                let l = g.cls[row * 25 + col];
                let dx = (ax - gt.cx).abs();
                let dy = (ay - gt.cy).abs();
                let expect = if dx <= 16.0 && dy <= 8.0 {
                    Label::Pos
                } else if dx <= 32.0 && dy <= 16.0 {
                    Label::Ignore
                } else {
                    Label::Neg
                };
                assert_eq!(l, expect);
            }
        }
    }

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    fn small_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<LabelGrid> {
        let g = ResponseGeometry {
            size: 5,
            stride: 8.0,
            patch_size: 40,
        };
        (0..n)
            .map(|_| {
                let b = BBox::new(rng.random_range(12.0..28.0), rng.random_range(12.0..28.0), rng.random_range(10.0..24.0), rng.random_range(10.0..24.0)).unwrap();
                encode_targets(&b, &g).unwrap()
            })
            .collect()
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = small_labels(&mut rng, 2);
        let pred = ResponsePair {
            cls: Tensor::zeros([2, 2, 5, 5]),
            reg: Tensor::filled([2, 4, 5, 5], 5.0),
        };
        let (parts, _) = loss_stage1(&pred, &labels, 0.0).unwrap();
        assert!((parts.cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((parts.total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = small_labels(&mut rng, 1);
        let mut cls = Tensor::zeros([1, 2, 5, 5]);
        let mut reg = Tensor::filled([1, 4, 5, 5], 1.0);
        for i in 0..25 {
            let big = 800.0;
            match labels[0].cls[i] {
                Label::Pos => cls.data[25 + i] = big,
                Label::Neg => cls.data[i] = big,
                Label::Ignore => {}
            }
            for c in 0..4 {
                reg.data[c * 25 + i] = labels[0].reg[i][c];
            }
        }
        let (parts, _) = loss_stage1(&ResponsePair { cls, reg }, &labels, 1.0).unwrap();
        assert!(parts.total.abs() < 1e-12, "{parts:?}");
    }

    #[test]
    fn stage1_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let labels = small_labels(&mut rng, 2);
            let cls = rand_tensor([2, 2, 5, 5], &mut rng, -2.0, 2.0);
            let reg = rand_tensor([2, 4, 5, 5], &mut rng, 2.0, 20.0);
            let pred = ResponsePair { cls: cls.clone(), reg: reg.clone() };
            let (_, g) = loss_stage1(&pred, &labels, 1.0).unwrap();
            let nc = numeric_grad(&cls.data, 1e-6, |v| {
                let p = ResponsePair { cls: Tensor::from_vec(cls.shape, v.to_vec()).unwrap(), reg: reg.clone() };
                loss_stage1(&p, &labels, 1.0).unwrap().0.total
            });
            let nr = numeric_grad(&reg.data, 1e-6, |v| {
                let p = ResponsePair { cls: cls.clone(), reg: Tensor::from_vec(reg.shape, v.to_vec()).unwrap() };
                loss_stage1(&p, &labels, 1.0).unwrap().0.total
            });
            assert!(rel_err(&g.cls.data, &nc) < 1e-4);
            assert!(rel_err(&g.reg.data, &nr) < 1e-4);
        }
    }

    #[test]
    fn empty_label_set_is_rejected() {
        let grid = LabelGrid {
            size: 5,
            cls: vec![Label::Ignore; 25],
            reg: vec![[1.0; 4]; 25],
        };
        let pred = ResponsePair {
            cls: Tensor::zeros([1, 2, 5, 5]),
            reg: Tensor::filled([1, 4, 5, 5], 1.0),
        };
        assert!(matches!(loss_stage1(&pred, &[grid], 1.0), Err(TsfError::MalformedSample(_))));
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule {
            warmup_epochs: 2,
            warmup_start_lr: 0.001,
            base_lr: 0.01,
            final_lr: 0.0001,
        };
        assert_eq!(s.lr_at(0, 10), 0.001);
        assert!((s.lr_at(2, 10) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(9, 10) - 0.0001).abs() < 1e-15);
        let lrs: Vec<f64> = (2..10).map(|e| s.lr_at(e, 10)).collect();
        let ratios: Vec<f64> = lrs.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.windows(2).all(|r| (r[0] - r[1]).abs() < 1e-9));
    }

    fn tiny_pairs(n: usize, seed: u64) -> Vec<PairSample> {
        use crate::data_io::{generate_synthetic, synthetic_suite, SuiteProfile};
        let seqs: Vec<SequenceRecord> = synthetic_suite(SuiteProfile::Train, 2, 10, seed)
            .iter()
            .map(|s| generate_synthetic(s).unwrap())
            .collect();
        sample_pairs(&seqs, n, &PairSampling::default(), seed).unwrap()
    }

    fn trainable(m: &TsfModel) -> Vec<(String, Param)> {
        let mut v = Vec::new();
        m.visit("", &mut |n, p| {
            if p.trainable {
                v.push((n.to_string(), p.clone()))
            }
        });
        v
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let pairs = tiny_pairs(4, 1);
        let mut m = TsfModel::new(BackboneConfig::tiny(), 5).unwrap();
        let before = trainable(&m);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            schedule: Schedule::constant(0.0),
            ..TrainConfig::stage1_default()
        };
        train_stage1(&mut m, &pairs, &cfg, |_| {}).unwrap();
        let after = trainable(&m);
        for ((n, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a.value, b.value, "{n} changed");
        }
    }

    #[test]
    fn seeded_training_is_reproducible_and_leaves_mu() {
        let pairs = tiny_pairs(4, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::stage1_default()
        };
        let run = || {
            let mut m = TsfModel::new(BackboneConfig::tiny(), 5).unwrap();
            let logs = train_stage1(&mut m, &pairs, &cfg, |_| {}).unwrap();
            (logs, m)
        };
        let (la, ma) = run();
        let (lb, mb) = run();
        assert_eq!(la, lb);
        assert_eq!(ma.checksum(), mb.checksum());
        assert_eq!(ma.mu.shallow.conv2.weight.value, MuWeights::zeros(ma.channels()).shallow.conv2.weight.value);
    }

    #[test]
    fn pairs_keep_target_inside_search_patch() {
        for p in tiny_pairs(16, 3) {
            assert_eq!((p.search_patch.width, p.template_patch.width), (255, 127));
            let b = p.gt_box_in_patch;
            assert!(b.cx > 0.0 && b.cx < 255.0 && b.cy > 0.0 && b.cy < 255.0);
        }
    }

    #[test]
    fn harvest_cardinality_and_startup() {
        use crate::data_io::{generate_synthetic, synthetic_suite, SuiteProfile};
        let m = TsfModel::new(BackboneConfig::tiny(), 5).unwrap();
        let seq = generate_synthetic(&synthetic_suite(SuiteProfile::MotionSize, 1, 6, 4)[0]).unwrap();
        let tuples = harvest_mu_tuples(&m, std::slice::from_ref(&seq), &TrackConfig::default()).unwrap();
        assert_eq!(tuples.len(), 5);
        assert_eq!(tuples[0].z_ac, tuples[0].z_in);
        assert_eq!(tuples[0].z_cu, tuples[0].z_in);
        for t in &tuples {
            let s = t.z_in.shape();
            assert!([&t.z_ac, &t.z_cu, &t.z_gt].iter().all(|z| z.shape() == s));
        }
        // stage 2 never touches backbone or head; zero epochs leave MU unchanged
        let before = crate::model::checksum_of(&m.backbone) + &crate::model::checksum_of(&m.head);
        let mut mu = MuWeights::training_init(m.channels(), &mut ChaCha8Rng::seed_from_u64(0));
        let mu0 = crate::model::checksum_of(&mu);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::stage2_default()
        };
        train_stage2(&mut mu, &tuples, &cfg, |_| {}).unwrap();
        assert_eq!(crate::model::checksum_of(&mu), mu0);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::stage2_default()
        };
        let logs = train_stage2(&mut mu, &tuples, &cfg, |_| {}).unwrap();
        assert_eq!(logs.len(), 3);
        assert_eq!(logs[0].lr, cfg.schedule.warmup_start_lr);
        assert_eq!(crate::model::checksum_of(&m.backbone) + &crate::model::checksum_of(&m.head), before);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(cx in 80.0f64..175.0, cy in 80.0f64..175.0, w in 4.0f64..120.0, h in 4.0f64..120.0, scale in 0.5f64..3.0) {
            let gt = BBox::new(cx, cy, w, h).unwrap();
            let g = geom(25);
            let grid = encode_targets(&gt, &g).unwrap();
            let mut reg = Tensor::zeros([1, 4, 25, 25]);
            for i in 0..625 {
                for c in 0..4 {
                    reg.data[c * 625 + i] = grid.reg[i][c];
                }
            }
            let crop = CropSpec { cx: 300.0, cy: 200.0, side: 255.0 * scale, out_size: 255 };
            let boxes = crate::head::decode_boxes(&reg, &g, &crop);
            let want = crop.box_to_frame(&gt);
            for i in 0..625 {
                if grid.cls[i] != Label::Pos {
                    continue;
                }
                let b = decode_patch_box(&reg, 0, &g, i / 25, i % 25);
                prop_assert!((b.cx - gt.cx).abs() < 1e-9 && (b.w - gt.w).abs() < 1e-9 && (b.h - gt.h).abs() < 1e-9);
                let f = boxes[i];
                prop_assert!((f.cx - want.cx).abs() < 1e-5 && (f.cy - want.cy).abs() < 1e-5);
                prop_assert!((f.w - want.w).abs() < 1e-5 && (f.h - want.h).abs() < 1e-5);
            }
        }
    }
}
