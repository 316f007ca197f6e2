//! Audio-visual fusion for person verification with dynamically gated
//! cross-attention.
//!
//! The crate covers the full desk-scale experiment loop:
//!
//! - [`numerics`]: dense f64 matrices and a reverse-mode gradient tape.
//! - [`attention`]: fusion variants: feature concatenation, self-attention,
//!   cross-attention, joint cross-attention, and the dynamically gated
//!   variants that pick between cross-attended and unattended features
//!   per clip.
//! - [`embedding`]: attentive statistics pooling, cosine scoring, and the
//!   additive-angular-margin softmax objective.
//! - [`trainer`]: deterministic Adam training, checkpointing, embedding
//!   extraction, and trial scoring.
//! - [`metrics`]: EER, minimum normalized detection cost, DET curves, and
//!   score-level fusion.
//! - [`synthdata`]: a latent-factor bimodal generator with a controllable
//!   corruption dial.
//! - [`formats`]: the AVF1 feature container, manifests, trial/score files,
//!   and DET CSVs.
//! - [`runner`]: experiment orchestration across variants and seeds.

pub mod attention;
pub mod config;
pub mod embedding;
pub mod error;
pub mod formats;
pub mod metrics;
pub mod numerics;
pub mod runner;
pub mod synthdata;
pub mod trainer;

pub use attention::{
    AttentionMaps, FeatureSequence, FusionParams, FusionVariant, GateScores, Modality,
    VisualAttentionNorm,
};
pub use config::{CorruptModality, CorruptionConfig, ExperimentConfig, PoolingMode, SynthBlock};
pub use embedding::{ClassifierHead, UtteranceEmbedding};
pub use error::{DcaError, Result};
pub use metrics::{DetPoint, ScoreSet, TrialLabel, TrialScore};
pub use numerics::{grad_check, Matrix, Tape, ValueId};
pub use runner::Report;
pub use synthdata::{Dataset, SynthSpec, TrialPair, Utterance};
pub use trainer::Checkpoint;
