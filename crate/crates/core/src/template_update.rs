//! Multi-template update: a two-layer pointwise residual network per depth
//! that fuses the initial, accumulated and current templates.
//!
//! `z_final = conv2(relu(conv1(concat(z_in, z_ac, z_cu)))) + z_in`, with the
//! shallow and deep depths handled by sub-networks of identical topology and
//! independent weights.

use rand::Rng;

use crate::backbone::TwofoldFeatures;
use crate::error::{Result, TsfError};
use crate::nn::{join, relu, relu_backward, Conv2d, ConvCache, Module, Param};
use crate::tensor::Tensor;

/// The three templates of one tracked sequence plus the latest fused template.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    pub z_in: TwofoldFeatures,
    pub z_ac: TwofoldFeatures,
    pub z_cu: TwofoldFeatures,
    pub z_final: Option<TwofoldFeatures>,
}

impl TemplateBank {
    /// Start-of-sequence bank: accumulated and current templates equal the initial one.
    pub fn new(z_in: TwofoldFeatures) -> Result<Self> {
        z_in.check_consistent()?;
        Ok(TemplateBank {
            z_ac: z_in.clone(),
            z_cu: z_in.clone(),
            z_in,
            z_final: None,
        })
    }

    pub fn check_consistent(&self) -> Result<()> {
        let s = self.z_in.shape();
        for (name, t) in [("z_ac", &self.z_ac), ("z_cu", &self.z_cu)] {
            t.check_consistent()?;
            if t.shape() != s {
                return Err(TsfError::ShapeMismatch(format!(
                    "{name} {:?} differs from z_in {:?}",
                    t.shape(),
                    s
                )));
            }
        }
        Ok(())
    }
}

/// Accumulated template takes the fused template; current template takes the
/// newly extracted one; the initial template never changes.
pub fn advance_bank(bank: TemplateBank, z_final: TwofoldFeatures, z_cu_next: TwofoldFeatures) -> TemplateBank {
    TemplateBank {
        z_in: bank.z_in,
        z_ac: z_final.clone(),
        z_cu: z_cu_next,
        z_final: Some(z_final),
    }
}

/// One depth's fusion sub-network.
#[derive(Debug, Clone)]
pub struct MuBranch {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

pub struct MuBranchCache {
    conv1: ConvCache,
    hidden: Tensor,
    conv2: ConvCache,
}

/// Hidden width of the fusion network: `3C/8`.
pub fn hidden_width(channels: usize) -> usize {
    (3 * channels / 8).max(1)
}

impl MuBranch {
    fn zeros(c: usize) -> Self {
        let mid = hidden_width(c);
        let zero_conv = |i: usize, o: usize| Conv2d {
            in_c: i,
            out_c: o,
            kernel: 1,
            stride: 1,
            pad: 0,
            dilation: 1,
            weight: Param::zeros(&[o, i]),
            bias: Some(Param::zeros(&[o])),
        };
        MuBranch {
            conv1: zero_conv(3 * c, mid),
            conv2: zero_conv(mid, c),
        }
    }

    fn random<R: Rng>(c: usize, rng: &mut R) -> Self {
        let mid = hidden_width(c);
        MuBranch {
            conv1: Conv2d::pointwise(3 * c, mid, true, rng),
            conv2: Conv2d::pointwise(mid, c, true, rng),
        }
    }

    /// Residual branch output (without the `z_in` skip).
    pub fn forward(&self, cat: &Tensor) -> Result<(Tensor, MuBranchCache)> {
        let (h, conv1) = self.conv1.forward(cat)?;
        let hidden = relu(&h);
        let (out, conv2) = self.conv2.forward(&hidden)?;
        Ok((out, MuBranchCache { conv1, hidden, conv2 }))
    }

    /// Accumulates weight gradients given the gradient of the residual output;
    /// returns the gradient w.r.t. the concatenated input.
    pub fn backward(&mut self, cache: MuBranchCache, g: &Tensor) -> Tensor {
        let gh = self.conv2.backward(cache.conv2, g, true).expect("input grad");
        let gh = relu_backward(&cache.hidden, &gh);
        self.conv1.backward(cache.conv1, &gh, true).expect("input grad")
    }
}

impl Module for MuBranch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct MuWeights {
    pub channels: usize,
    pub shallow: MuBranch,
    pub deep: MuBranch,
}

pub struct MuCache {
    shallow: MuBranchCache,
    deep: MuBranchCache,
}

impl MuWeights {
    /// All-zero weights: the fused template is exactly `z_in`.
    pub fn zeros(channels: usize) -> Self {
        MuWeights {
            channels,
            shallow: MuBranch::zeros(channels),
            deep: MuBranch::zeros(channels),
        }
    }

    /// Random first layer, zero second layer. Still an exact identity on
    /// `z_in` at initialization but with a non-vanishing gradient.
    pub fn training_init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut w = MuWeights {
            channels,
            shallow: MuBranch::random(channels, rng),
            deep: MuBranch::random(channels, rng),
        };
        for b in [&mut w.shallow, &mut w.deep] {
            b.conv2.weight.value.fill(0.0);
        }
        w
    }

    pub fn random<R: Rng>(channels: usize, rng: &mut R) -> Self {
        MuWeights {
            channels,
            shallow: MuBranch::random(channels, rng),
            deep: MuBranch::random(channels, rng),
        }
    }

    fn check_bank(&self, bank: &TemplateBank) -> Result<()> {
        bank.check_consistent()?;
        let c = bank.z_in.shape()[1];
        if c != self.channels {
            return Err(TsfError::ShapeMismatch(format!(
                "bank has {c} channels, update weights expect {}",
                self.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, bank: &TemplateBank) -> Result<(TwofoldFeatures, MuCache)> {
        self.check_bank(bank)?;
        let cat_s = Tensor::concat_channels(&[&bank.z_in.shallow, &bank.z_ac.shallow, &bank.z_cu.shallow])?;
        let cat_d = Tensor::concat_channels(&[&bank.z_in.deep, &bank.z_ac.deep, &bank.z_cu.deep])?;
        let (mut s, cs) = self.shallow.forward(&cat_s)?;
        let (mut d, cd) = self.deep.forward(&cat_d)?;
        s.add_assign(&bank.z_in.shallow);
        d.add_assign(&bank.z_in.deep);
        Ok((
            TwofoldFeatures { shallow: s, deep: d },
            MuCache {
                shallow: cs,
                deep: cd,
            },
        ))
    }

    /// Accumulate weight gradients from the gradient of `z_final`.
    pub fn backward(&mut self, cache: MuCache, g: &TwofoldFeatures) {
        self.shallow.backward(cache.shallow, &g.shallow);
        self.deep.backward(cache.deep, &g.deep);
    }
}

impl Module for MuWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.shallow.visit(&join(prefix, "shallow"), f);
        self.deep.visit(&join(prefix, "deep"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.shallow.visit_mut(&join(prefix, "shallow"), f);
        self.deep.visit_mut(&join(prefix, "deep"), f);
    }
}

/// Fused template for a bank.
pub fn fuse_templates(bank: &TemplateBank, weights: &MuWeights) -> Result<TwofoldFeatures> {
    Ok(weights.forward(bank)?.0)
}

/// Euclidean distance between predicted and target templates, summed over the two depths.
pub fn mu_loss(predicted: &TwofoldFeatures, target: &TwofoldFeatures) -> Result<f64> {
    Ok(mu_loss_with_grad(predicted, target)?.0)
}

/// Loss together with its gradient w.r.t. `predicted`.
pub fn mu_loss_with_grad(predicted: &TwofoldFeatures, target: &TwofoldFeatures) -> Result<(f64, TwofoldFeatures)> {
    predicted.check_consistent()?;
    if predicted.shape() != target.shape() || target.shallow.shape != target.deep.shape {
        return Err(TsfError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let depth = |p: &Tensor, t: &Tensor| -> (f64, Tensor) {
        let diff: Vec<f64> = p.data.iter().zip(&t.data).map(|(a, b)| a - b).collect();
        let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        let grad = if norm > 0.0 {
            diff.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; diff.len()]
        };
        (norm, Tensor { shape: p.shape, data: grad })
    };
    let (ls, gs) = depth(&predicted.shallow, &target.shallow);
    let (ld, gd) = depth(&predicted.deep, &target.deep);
    Ok((ls + ld, TwofoldFeatures { shallow: gs, deep: gd }))
}

/// Exponential moving-average template, the linear update baseline:
/// `z_ac <- (1 - rate) z_ac + rate z_cu`.
pub fn linear_update(bank: &TemplateBank, rate: f64) -> TwofoldFeatures {
    let mix = |a: &Tensor, b: &Tensor| Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| (1.0 - rate) * x + rate * y).collect(),
    };
    TwofoldFeatures {
        shallow: mix(&bank.z_ac.shallow, &bank.z_cu.shallow),
        deep: mix(&bank.z_ac.deep, &bank.z_cu.deep),
    }
}
