//! TOML run configuration. User tables are merged over the built-in defaults,
//! so any subset of keys may be given; unknown keys are rejected by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsf_core::backbone::Variant;
use tsf_core::data_io::{DatasetKind, SuiteProfile, SynthSpec};
use tsf_core::tracker::TrackConfig;
use tsf_core::training::{PairSampling, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialization (training data and SGD have their own seeds).
    pub seed: u64,
    pub variant: Variant,
    pub data: DataConfig,
    pub sampling: PairSampling,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub track: TrackConfig,
}

/// Training data: a dataset on disk, or a generated synthetic suite when `root` is unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub kind: DatasetKind,
    /// Stage-1 pairs drawn from the training sequences.
    pub pairs: usize,
    /// Sequences used to harvest stage-2 tuples (the last ones of the set).
    pub stage2_sequences: usize,
    pub synthetic_count: usize,
    pub synthetic_length: usize,
    pub synthetic_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            variant: Variant::Tiny,
            data: DataConfig {
                root: None,
                kind: DatasetKind::Synthetic,
                pairs: 500,
                stage2_sequences: 20,
                synthetic_count: 30,
                synthetic_length: 40,
                synthetic_seed: 11,
            },
            sampling: PairSampling::default(),
            stage1: TrainConfig::stage1_default(),
            stage2: TrainConfig::stage2_default(),
            track: TrackConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parse `text` as overrides of `T::default()`.
pub fn parse_with_defaults<T>(text: &str, origin: &str) -> Result<T, CliError>
where
    T: Serialize + for<'de> Deserialize<'de> + Default,
{
    let user: toml::Value = toml::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {e}")))?;
    let mut base = toml::Value::try_from(T::default()).map_err(|e| CliError::Usage(e.to_string()))?;
    merge(&mut base, user);
    base.try_into::<T>().map_err(|e| CliError::Usage(format!("{origin}: {e}")))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
                parse_with_defaults(&text, &p.display().to_string())?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.track.validate()?;
        Ok(())
    }
}

/// What `synth` generates: either a seeded suite or explicit sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SynthFile {
    pub suite: Option<SuiteSpec>,
    #[serde(default)]
    pub sequence: Vec<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub profile: SuiteProfile,
    pub count: usize,
    pub length: usize,
    pub seed: u64,
}

impl SynthFile {
    pub fn specs(&self) -> Vec<SynthSpec> {
        let mut out = self
            .suite
            .as_ref()
            .map(|s| tsf_core::data_io::synthetic_suite(s.profile, s.count, s.length, s.seed))
            .unwrap_or_default();
        out.extend(self.sequence.iter().cloned());
        out
    }
}
