//! Synthetic bimodal data with a controllable complementarity dial.
//!
//! A shared per-speaker latent vector drives both modalities through fixed
//! random mixing maps, so audio and visual features genuinely carry the
//! same identity. A corruption process then blends a chosen modality of a
//! random subset of utterances toward scale-matched noise, producing the
//! regime where one modality stops being informative about the other.
//!
//! Generation is deterministic per seed. Normal variates come from
//! rand_distr's ziggurat sampler over a ChaCha8 stream; data and
//! corruption draw from separate stream ids of the same seed, so turning
//! the corruption dial never shifts the underlying clean features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{FeatureSequence, Modality};
use crate::config::{CorruptModality, ExperimentConfig};
use crate::error::{DcaError, Result};
use crate::metrics::TrialLabel;
use crate::numerics::Matrix;

/// Full description of one synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    pub d_latent: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub clips: usize,
    pub noise_sigma: f64,
    pub corrupt_prob: f64,
    pub corrupt_modality: CorruptModality,
    /// Signal retained fraction is max(0, 1 - severity).
    pub corrupt_severity: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bail = |msg: String| Err(DcaError::InvalidParameter(msg));
        for (name, v) in [
            ("n_speakers", self.n_speakers),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("d_latent", self.d_latent),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("clips", self.clips),
        ] {
            if v == 0 {
                return bail(format!("{name} must be positive"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bail(format!("noise_sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            return bail(format!("corrupt_prob must be in [0, 1], got {}", self.corrupt_prob));
        }
        if !(self.corrupt_severity >= 0.0) {
            return bail(format!(
                "corrupt_severity must be non-negative, got {}",
                self.corrupt_severity
            ));
        }
        Ok(())
    }

    /// Assemble the per-run spec from an experiment config.
    pub fn from_config(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let synth = config
            .synth
            .as_ref()
            .ok_or_else(|| DcaError::Config("config has no synth block".into()))?;
        let spec = SynthSpec {
            n_speakers: config.n_speakers,
            utterances_per_speaker: synth.utterances_per_speaker,
            d_latent: synth.d_latent,
            d_a: config.d_a,
            d_v: config.d_v,
            clips: config.clips,
            noise_sigma: synth.noise_sigma,
            corrupt_prob: config.corruption.probability,
            corrupt_modality: config.corruption.modality,
            corrupt_severity: config.corruption.severity,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One labeled utterance with its corruption annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
    /// Which modality was blended toward noise, if any.
    pub corrupted: Option<Modality>,
}

/// A generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// One requested verification pair, pre-scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialPair {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng)).expect("normal draws are finite")
}

/// Generate the dataset a spec describes.
///
/// Per speaker s a latent z_s ~ N(0, I) is drawn; clip l of every
/// utterance observes P z_s + sigma * eps with fresh per-entry noise,
/// where P is the modality's fixed mixing map (drawn once per seed).
/// Corrupted utterances replace the chosen modality with
/// (1 - severity) * signal + severity * sigma_c * eps', where sigma_c is
/// the root-mean-square of that utterance's clean modality matrix.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corrupt_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    corrupt_rng.set_stream(1);

    // mixing-map entries are N(0, 1/d_latent) so the projected signal has
    // unit variance per feature and noise_sigma reads as a relative scale
    let mix_scale = 1.0 / (spec.d_latent as f64).sqrt();
    let p_audio = normal_matrix(spec.d_a, spec.d_latent, &mut data_rng)
        .scale(mix_scale)
        .expect("finite mixing map");
    let p_visual = normal_matrix(spec.d_v, spec.d_latent, &mut data_rng)
        .scale(mix_scale)
        .expect("finite mixing map");

    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utterances_per_speaker);
    for speaker in 0..spec.n_speakers {
        let latent = normal_matrix(spec.d_latent, 1, &mut data_rng);
        let audio_signal = p_audio.matmul(&latent)?;
        let visual_signal = p_visual.matmul(&latent)?;
        for utt in 0..spec.utterances_per_speaker {
            let observe = |signal: &Matrix, dim: usize, rng: &mut ChaCha8Rng| {
                let mut m = Matrix::zeros(dim, spec.clips);
                for clip in 0..spec.clips {
                    for i in 0..dim {
                        m.set(i, clip, signal.get(i, 0) + spec.noise_sigma * normal(rng));
                    }
                }
                m
            };
            let audio = observe(&audio_signal, spec.d_a, &mut data_rng);
            let visual = observe(&visual_signal, spec.d_v, &mut data_rng);

            let corrupted = if spec.corrupt_prob > 0.0
                && corrupt_rng.random_bool(spec.corrupt_prob)
            {
                Some(match spec.corrupt_modality {
                    CorruptModality::Audio => Modality::Audio,
                    CorruptModality::Visual => Modality::Visual,
                    CorruptModality::Either => {
                        if corrupt_rng.random_bool(0.5) {
                            Modality::Audio
                        } else {
                            Modality::Visual
                        }
                    }
                })
            } else {
                None
            };

            let corrupt = |m: &Matrix, rng: &mut ChaCha8Rng| -> Result<Matrix> {
                let rms = (m.data().iter().map(|x| x * x).sum::<f64>()
                    / m.data().len() as f64)
                    .sqrt();
                let keep = (1.0 - spec.corrupt_severity).max(0.0);
                Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                    m.get(i, j) * keep + spec.corrupt_severity * rms * normal(rng)
                })
            };
            let (audio, visual) = match corrupted {
                Some(Modality::Audio) => (corrupt(&audio, &mut corrupt_rng)?, visual),
                Some(Modality::Visual) => (audio, corrupt(&visual, &mut corrupt_rng)?),
                _ => (audio, visual),
            };

            utterances.push(Utterance {
                id: format!("spk{speaker:03}_utt{utt:03}"),
                speaker,
                audio: FeatureSequence::new(Modality::Audio, audio),
                visual: FeatureSequence::new(Modality::Visual, visual),
                corrupted,
            });
        }
    }
    Ok(Dataset { utterances })
}

/// Sample verification trials without repeating a pair: targets are
/// same-speaker pairs of distinct utterances, nontargets cross speakers.
/// Pairs are enumerated in canonical order and shuffled by the seed.
pub fn make_trials(
    utterances: &[Utterance],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    let mut target_pairs = Vec::new();
    let mut nontarget_pairs = Vec::new();
    for i in 0..utterances.len() {
        for j in (i + 1)..utterances.len() {
            if utterances[i].speaker == utterances[j].speaker {
                target_pairs.push((i, j));
            } else {
                nontarget_pairs.push((i, j));
            }
        }
    }
    if target_pairs.len() < n_target {
        return Err(DcaError::InsufficientData(format!(
            "requested {n_target} target pairs, only {} exist",
            target_pairs.len()
        )));
    }
    if nontarget_pairs.len() < n_nontarget {
        return Err(DcaError::InsufficientData(format!(
            "requested {n_nontarget} nontarget pairs, only {} exist",
            nontarget_pairs.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    use rand::seq::SliceRandom;
    target_pairs.shuffle(&mut rng);
    nontarget_pairs.shuffle(&mut rng);

    let mut trials = Vec::with_capacity(n_target + n_nontarget);
    for &(i, j) in target_pairs.iter().take(n_target) {
        trials.push(TrialPair {
            enroll_id: utterances[i].id.clone(),
            test_id: utterances[j].id.clone(),
            label: TrialLabel::Target,
        });
    }
    for &(i, j) in nontarget_pairs.iter().take(n_nontarget) {
        trials.push(TrialPair {
            enroll_id: utterances[i].id.clone(),
            test_id: utterances[j].id.clone(),
            label: TrialLabel::Nontarget,
        });
    }
    Ok(trials)
}
