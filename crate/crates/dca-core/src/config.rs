//! Experiment configuration: one JSON document describes a full run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attention::{FusionVariant, VisualAttentionNorm};
use crate::error::{DcaError, Result};

/// How the fusion output is pooled into an utterance embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One ASP over the row-concatenated fused sequence.
    #[default]
    Joint,
    /// One ASP per modality, embeddings concatenated. Variants that emit a
    /// single merged sequence fall back to joint pooling.
    PerModality,
}

/// Which modality the corruption process may hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptModality {
    Audio,
    Visual,
    /// A fair coin decides per corrupted utterance.
    Either,
}

/// Corruption process applied at data generation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionConfig {
    /// Fraction of utterances corrupted.
    pub probability: f64,
    pub modality: CorruptModality,
    /// Blend strength: the corrupted signal keeps max(0, 1 - severity) of
    /// itself, the rest is scale-matched noise.
    pub severity: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            probability: 0.0,
            modality: CorruptModality::Visual,
            severity: 1.0,
        }
    }
}

/// Synthetic-data section: together with the top-level dims, seed, and
/// corruption settings this fully determines a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthBlock {
    pub utterances_per_speaker: usize,
    pub d_latent: usize,
    /// Per-clip observation noise scale.
    pub noise_sigma: f64,
}

/// External data section: a manifest of AVF1 feature files plus a trial
/// list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub manifest: PathBuf,
    pub trials: PathBuf,
}

fn default_learning_rate() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    60
}
fn default_temperature() -> f64 {
    0.1
}
fn default_aam_scale() -> f64 {
    30.0
}
fn default_aam_margin() -> f64 {
    0.2
}
fn default_n_seeds() -> usize {
    3
}
fn default_train_fraction() -> f64 {
    0.75
}
fn default_n_target_trials() -> usize {
    60
}
fn default_n_nontarget_trials() -> usize {
    120
}

/// Full description of an experiment. Serializes losslessly to JSON; the
/// sha-256 of the serialized form is the config hash stored in reports and
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Fusion variants to run, each exactly once.
    pub variants: Vec<FusionVariant>,
    /// Audio feature dimension.
    pub d_a: usize,
    /// Visual feature dimension.
    pub d_v: usize,
    /// Clips per utterance (L).
    pub clips: usize,
    pub n_speakers: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Optional per-epoch multiplicative learning-rate decay.
    #[serde(default)]
    pub lr_decay: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Gate softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_aam_scale")]
    pub aam_scale: f64,
    #[serde(default = "default_aam_margin")]
    pub aam_margin: f64,
    /// Base seed; run k uses seed + k.
    pub seed: u64,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub pooling: PoolingMode,
    #[serde(default)]
    pub av_norm: VisualAttentionNorm,
    /// Fraction of each speaker's utterances used for training; the rest
    /// form the evaluation pool.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_n_target_trials")]
    pub n_target_trials: usize,
    #[serde(default = "default_n_nontarget_trials")]
    pub n_nontarget_trials: usize,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub synth: Option<SynthBlock>,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bail = |msg: String| Err(DcaError::Config(msg));
        if self.variants.is_empty() {
            return bail("variants must be non-empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for v in &self.variants {
            if !seen.insert(*v) {
                return bail(format!("variant {v} requested more than once"));
            }
        }
        for (name, value) in [
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("clips", self.clips),
            ("batch_size", self.batch_size),
            ("n_seeds", self.n_seeds),
        ] {
            if value == 0 {
                return bail(format!("{name} must be positive"));
            }
        }
        if self.n_speakers < 2 {
            return bail("n_speakers must be at least 2".into());
        }
        if !(self.learning_rate > 0.0) {
            return bail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if let Some(decay) = self.lr_decay {
            if !(decay > 0.0 && decay <= 1.0) {
                return bail(format!("lr_decay must be in (0, 1], got {decay}"));
            }
        }
        if !(self.temperature > 0.0) {
            return bail(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.aam_scale > 0.0) {
            return bail(format!("aam_scale must be positive, got {}", self.aam_scale));
        }
        if !(0.0..=0.5).contains(&self.aam_margin) {
            return bail(format!("aam_margin must be in [0, 0.5], got {}", self.aam_margin));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bail(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption.probability) {
            return bail(format!(
                "corruption probability must be in [0, 1], got {}",
                self.corruption.probability
            ));
        }
        if !(self.corruption.severity >= 0.0) {
            return bail(format!(
                "corruption severity must be non-negative, got {}",
                self.corruption.severity
            ));
        }
        if self.synth.is_none() && self.data.is_none() {
            return bail("either a synth block or data paths must be present".into());
        }
        if let Some(s) = &self.synth {
            if s.utterances_per_speaker < 2 {
                return bail("utterances_per_speaker must be at least 2".into());
            }
            if s.d_latent == 0 {
                return bail("d_latent must be positive".into());
            }
            if !(s.noise_sigma >= 0.0) {
                return bail(format!("noise_sigma must be non-negative, got {}", s.noise_sigma));
            }
            if self.n_target_trials == 0 || self.n_nontarget_trials == 0 {
                return bail("trial counts must be positive".into());
            }
        }
        let needs_equal_dims = self
            .variants
            .iter()
            .any(|v| matches!(v, FusionVariant::Jca | FusionVariant::JcaDca));
        if needs_equal_dims && self.d_a != self.d_v {
            return bail(format!(
                "joint cross-attention variants require d_a == d_v, got {} and {}",
                self.d_a, self.d_v
            ));
        }
        Ok(())
    }

    /// Canonical JSON serialization used for hashing and config echoes.
    pub fn canonical_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    /// Hex sha-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical_json()?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Embedding length produced under this config: 2 (d_a + d_v) for
    /// every variant and pooling mode.
    pub fn embed_dim(&self) -> usize {
        2 * (self.d_a + self.d_v)
    }
}
