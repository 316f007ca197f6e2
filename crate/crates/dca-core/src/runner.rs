//! Experiment orchestration: one call runs the requested fusion variants
//! across seeds, writes score files, DET CSVs, checkpoints, and a JSON
//! report, and returns the report.
//!
//! Jobs (variant x seed) are independent and may run on worker threads;
//! the `DCA_THREADS` environment variable caps the pool. Results are
//! assembled in request order, so the report bytes do not depend on the
//! pool size; only the timing fields differ between runs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{FeatureSequence, FusionVariant, Modality};
use crate::config::ExperimentConfig;
use crate::error::{DcaError, Result};
use crate::formats;
use crate::metrics::{
    compute_eer, compute_min_dcf, det_curve, DEFAULT_C_FA, DEFAULT_C_MISS, DEFAULT_P_TARGET,
};
use crate::numerics::{grad_check, Matrix, Tape};
use crate::synthdata::{generate, make_trials, SynthSpec, TrialPair, Utterance};
use crate::trainer::{self, build_loss, train, Checkpoint, ModelParams};

/// One seed's verification result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub eer: f64,
    pub eer_percent: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
    pub final_loss: f64,
    pub n_trials: usize,
}

/// Per-variant block: seed breakdown plus means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: FusionVariant,
    pub seeds: Vec<SeedResult>,
    pub mean_eer: f64,
    pub mean_eer_percent: f64,
    pub mean_min_dcf: f64,
}

/// Wall-clock timings; excluded from determinism comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTiming {
    pub total_seconds: f64,
    pub per_variant_seconds: Vec<VariantTiming>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantTiming {
    pub variant: FusionVariant,
    pub seconds: f64,
}

/// Full experiment report. The config echo plus hash reproduce the run
/// exactly; everything except `timing` is a pure function of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub variants: Vec<VariantReport>,
    pub timing: ReportTiming,
}

impl Report {
    /// JSON with zeroed timing fields, for byte comparisons between runs.
    pub fn deterministic_json(&self) -> Result<String> {
        let mut copy = self.clone();
        copy.timing = ReportTiming {
            total_seconds: 0.0,
            per_variant_seconds: copy
                .timing
                .per_variant_seconds
                .iter()
                .map(|t| VariantTiming {
                    variant: t.variant,
                    seconds: 0.0,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&copy)?)
    }
}

/// The labeled utterances a run trains on and the trials it scores.
pub struct RunData {
    pub train: Vec<Utterance>,
    pub eval: Vec<Utterance>,
    pub trials: Vec<TrialPair>,
}

/// Assemble the per-run data: synthesize when the config carries a synth
/// block, otherwise load the manifest and trial list. Synthetic runs split
/// each speaker's utterances by `train_fraction` (earlier utterances
/// train) and draw trials from the evaluation pool; external runs train on
/// every utterance the trial list never references.
pub fn assemble_run_data(config: &ExperimentConfig, run_seed: u64) -> Result<RunData> {
    if config.synth.is_some() {
        let spec = SynthSpec::from_config(config, run_seed)?;
        let data = generate(&spec)?;
        let per_speaker = spec.utterances_per_speaker;
        let n_train = ((per_speaker as f64) * config.train_fraction).ceil() as usize;
        let n_train = n_train.clamp(1, per_speaker - 1);
        let mut train_set = Vec::new();
        let mut eval_set = Vec::new();
        for u in data.utterances {
            let utt_index: usize = u
                .id
                .rsplit("utt")
                .next()
                .and_then(|s| s.parse().ok())
                .expect("generated ids end in the utterance index");
            if utt_index < n_train {
                train_set.push(u);
            } else {
                eval_set.push(u);
            }
        }
        let trials = make_trials(
            &eval_set,
            config.n_target_trials,
            config.n_nontarget_trials,
            run_seed,
        )?;
        Ok(RunData {
            train: train_set,
            eval: eval_set,
            trials,
        })
    } else {
        let paths = config
            .data
            .as_ref()
            .ok_or_else(|| DcaError::Config("config has neither synth nor data".into()))?;
        let manifest = formats::read_manifest(&paths.manifest)?;
        if manifest.d_a != config.d_a
            || manifest.d_v != config.d_v
            || manifest.clips != config.clips
        {
            return Err(DcaError::Config(format!(
                "manifest dims (d_a={}, d_v={}, clips={}) do not match the config",
                manifest.d_a, manifest.d_v, manifest.clips
            )));
        }
        let trials = formats::read_trials(&paths.trials)?;
        let eval_ids: HashSet<&str> = trials
            .iter()
            .flat_map(|t| [t.enroll_id.as_str(), t.test_id.as_str()])
            .collect();
        let mut train_set = Vec::new();
        let mut eval_set = Vec::new();
        for (id, speaker, file) in &manifest.entries {
            if *speaker >= config.n_speakers {
                return Err(DcaError::InvalidLabel {
                    label: *speaker,
                    n_speakers: config.n_speakers,
                });
            }
            let (audio, visual) = formats::read_avf1(file)?;
            let u = Utterance {
                id: id.clone(),
                speaker: *speaker,
                audio,
                visual,
                corrupted: None,
            };
            if eval_ids.contains(id.as_str()) {
                eval_set.push(u);
            } else {
                train_set.push(u);
            }
        }
        if train_set.is_empty() {
            return Err(DcaError::InsufficientData(
                "every manifest utterance is referenced by the trial list; nothing left to train on"
                    .into(),
            ));
        }
        Ok(RunData {
            train: train_set,
            eval: eval_set,
            trials,
        })
    }
}

struct JobOutput {
    result: SeedResult,
    seconds: f64,
}

fn run_job(
    config: &ExperimentConfig,
    variant: FusionVariant,
    seed_index: usize,
    out_dir: &Path,
) -> Result<JobOutput> {
    let started = Instant::now();
    let run_seed = config.seed + seed_index as u64;
    let data = assemble_run_data(config, run_seed)?;
    let outcome = train(config, variant, run_seed, &data.train)?;
    let mut pool = data.eval.clone();
    pool.extend(data.train.iter().cloned());
    let scores = trainer::score_trials(&outcome.checkpoint, &data.trials, &pool)?;

    let (eer, eer_threshold) = compute_eer(&scores)?;
    let (min_dcf, min_dcf_threshold) =
        compute_min_dcf(&scores, DEFAULT_P_TARGET, DEFAULT_C_MISS, DEFAULT_C_FA)?;

    let stem = format!("{variant}_seed{run_seed}");
    formats::write_scores(&out_dir.join(format!("{stem}.scores")), &scores)?;
    formats::write_det_csv(&out_dir.join(format!("{stem}_det.csv")), &det_curve(&scores)?)?;
    outcome.checkpoint.save(&out_dir.join(format!("{stem}.dcac")))?;

    Ok(JobOutput {
        result: SeedResult {
            seed: run_seed,
            eer,
            eer_percent: eer * 100.0,
            eer_threshold,
            min_dcf,
            min_dcf_threshold,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            n_trials: scores.len(),
        },
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DCA_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            DcaError::Config(format!("DCA_THREADS must be a positive integer, got '{v}'"))
        })?;
        if n == 0 {
            return Err(DcaError::Config("DCA_THREADS must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| DcaError::Config(format!("failed to build worker pool: {e}")))
}

/// Run every configured variant across the configured seeds, writing all
/// artifacts into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Report> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();

    let jobs: Vec<(FusionVariant, usize)> = config
        .variants
        .iter()
        .flat_map(|&v| (0..config.n_seeds).map(move |k| (v, k)))
        .collect();

    let pool = thread_pool()?;
    let outputs: Result<Vec<JobOutput>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(variant, k)| run_job(config, variant, k, out_dir))
            .collect()
    });
    let outputs = outputs?;

    let mut variants = Vec::with_capacity(config.variants.len());
    let mut per_variant_seconds = Vec::with_capacity(config.variants.len());
    for (vi, &variant) in config.variants.iter().enumerate() {
        let slice = &outputs[vi * config.n_seeds..(vi + 1) * config.n_seeds];
        let n = slice.len() as f64;
        let mean_eer = slice.iter().map(|o| o.result.eer).sum::<f64>() / n;
        let mean_min_dcf = slice.iter().map(|o| o.result.min_dcf).sum::<f64>() / n;
        variants.push(VariantReport {
            variant,
            seeds: slice.iter().map(|o| o.result.clone()).collect(),
            mean_eer,
            mean_eer_percent: mean_eer * 100.0,
            mean_min_dcf,
        });
        per_variant_seconds.push(VariantTiming {
            variant,
            seconds: slice.iter().map(|o| o.seconds).sum(),
        });
    }

    let report = Report {
        config: config.clone(),
        config_hash: config.hash()?,
        variants,
        timing: ReportTiming {
            total_seconds: started.elapsed().as_secs_f64(),
            per_variant_seconds,
        },
    };
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

// ── Gradient verification suite ─────────────────────────────────────────

/// Worst observed finite-difference error for one variant's full loss.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckResult {
    pub variant: FusionVariant,
    pub points: usize,
    pub max_rel_error: f64,
}

/// Check the gradient of every parameter tensor (and the audio input) of
/// each variant's full loss against central differences, at `points`
/// seeded random points per variant. Returns the per-variant worst error.
pub fn gradient_verification(points: usize) -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    for variant in FusionVariant::ALL {
        let mut worst = 0.0f64;
        for point in 0..points {
            let seed = (point as u64) * 97 + 13;
            let err = variant_grad_error(variant, seed)?;
            worst = worst.max(err);
        }
        results.push(GradCheckResult {
            variant,
            points,
            max_rel_error: worst,
        });
    }
    Ok(results)
}

/// Max relative gradient error over all tensors of one variant's loss at
/// one random point.
fn variant_grad_error(variant: FusionVariant, seed: u64) -> Result<f64> {
    use crate::config::{CorruptionConfig, PoolingMode, SynthBlock};
    use crate::VisualAttentionNorm;

    let config = ExperimentConfig {
        variants: vec![variant],
        d_a: 4,
        d_v: 4,
        clips: 3,
        n_speakers: 3,
        learning_rate: 1e-3,
        lr_decay: None,
        batch_size: 4,
        epochs: 1,
        temperature: 0.1,
        aam_scale: 30.0,
        aam_margin: 0.2,
        seed,
        n_seeds: 1,
        pooling: PoolingMode::Joint,
        av_norm: VisualAttentionNorm::AudioAxis,
        train_fraction: 0.5,
        n_target_trials: 1,
        n_nontarget_trials: 1,
        corruption: CorruptionConfig::default(),
        synth: Some(SynthBlock {
            utterances_per_speaker: 2,
            d_latent: 2,
            noise_sigma: 0.3,
        }),
        data: None,
        output_dir: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&config, variant, &mut rng)?;
    let utt = Utterance {
        id: "probe".into(),
        speaker: 1,
        audio: FeatureSequence::new(
            Modality::Audio,
            Matrix::from_fn(config.d_a, config.clips, |_, _| rng.random_range(-1.0..1.0))?,
        ),
        visual: FeatureSequence::new(
            Modality::Visual,
            Matrix::from_fn(config.d_v, config.clips, |_, _| rng.random_range(-1.0..1.0))?,
        ),
        corrupted: None,
    };

    let mut worst = 0.0f64;
    let n_tensors = params.tensors().len();
    for idx in 0..n_tensors {
        let target = params.tensors()[idx].1.clone();
        let params_ref = &params;
        let utt_ref = &utt;
        let err = grad_check(
            move |tape: &mut Tape, xid| {
                let (ids, _) = params_ref.register_with(tape, Some((idx, xid)));
                build_loss(tape, &ids, params_ref, utt_ref)
            },
            &target,
            1e-5,
        )?;
        worst = worst.max(err);
    }

    // gradient with respect to the audio features
    let err = grad_check(
        |tape: &mut Tape, xid| {
            let (ids, _) = params.register_with(tape, None);
            let xv = tape.input(utt.visual.data().clone());
            let fused = crate::attention::build_fusion(tape, &ids.fusion, &params.fusion, xid, xv)?;
            let emb = crate::embedding::build_pooled_embedding(tape, fused, &ids.pooling)?;
            crate::embedding::build_aam_loss(
                tape,
                emb,
                utt.speaker,
                ids.head,
                params.head.scale,
                params.head.margin,
            )
        },
        utt.audio.data(),
        1e-5,
    )?;
    Ok(worst.max(err))
}

/// Restrict a config to one variant, as the CLI's `--variant` flag does.
pub fn restrict_to_variant(config: &ExperimentConfig, variant: FusionVariant) -> ExperimentConfig {
    let mut c = config.clone();
    c.variants = vec![variant];
    c
}

/// Synthesize the dataset a config describes and write it out as AVF1
/// files, a manifest, and a trial list. Returns the written paths.
pub struct SynthArtifacts {
    pub manifest: PathBuf,
    pub trials: PathBuf,
    pub n_utterances: usize,
}

pub fn synthesize_to_disk(config: &ExperimentConfig, out_dir: &Path) -> Result<SynthArtifacts> {
    config.validate()?;
    let spec = SynthSpec::from_config(config, config.seed)?;
    let data = generate(&spec)?;
    let features_dir = out_dir.join("features");
    std::fs::create_dir_all(&features_dir)?;
    let mut entries = Vec::new();
    for u in &data.utterances {
        let rel = PathBuf::from("features").join(format!("{}.avf1", u.id));
        formats::write_avf1(&out_dir.join(&rel), &u.audio, &u.visual)?;
        entries.push((u.id.clone(), u.speaker, rel));
    }
    let manifest = formats::Manifest {
        d_a: config.d_a,
        d_v: config.d_v,
        clips: config.clips,
        entries,
    };
    let manifest_path = out_dir.join("manifest.tsv");
    formats::write_manifest(&manifest_path, &manifest)?;

    let trials = make_trials(
        &data.utterances,
        config.n_target_trials,
        config.n_nontarget_trials,
        config.seed,
    )?;
    let trials_path = out_dir.join("trials.txt");
    formats::write_trials(&trials_path, &trials)?;
    Ok(SynthArtifacts {
        manifest: manifest_path,
        trials: trials_path,
        n_utterances: data.utterances.len(),
    })
}

/// Train a single variant with the config's base seed and save the
/// checkpoint; returns the checkpoint path and the loss curve.
pub fn train_to_disk(
    config: &ExperimentConfig,
    variant: FusionVariant,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<f64>)> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data = assemble_run_data(config, config.seed)?;
    let outcome = train(config, variant, config.seed, &data.train)?;
    let path = out_dir.join(format!("{variant}.dcac"));
    outcome.checkpoint.save(&path)?;
    Ok((path, outcome.losses))
}

/// Score the config's trial list with a saved checkpoint and write the
/// score file; returns its path.
pub fn score_to_disk(
    config: &ExperimentConfig,
    checkpoint: &Checkpoint,
    out_dir: &Path,
) -> Result<PathBuf> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let data = assemble_run_data(config, config.seed)?;
    let mut pool = data.eval.clone();
    pool.extend(data.train.iter().cloned());
    let scores = trainer::score_trials(checkpoint, &data.trials, &pool)?;
    let path = out_dir.join(format!("{}.scores", checkpoint.variant));
    formats::write_scores(&path, &scores)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CorruptionConfig, PoolingMode, SynthBlock};
    use crate::VisualAttentionNorm;

    fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            variants: vec![FusionVariant::Concat, FusionVariant::Ca],
            d_a: 4,
            d_v: 3,
            clips: 4,
            n_speakers: 3,
            learning_rate: 2e-3,
            lr_decay: None,
            batch_size: 4,
            epochs: 3,
            temperature: 0.1,
            aam_scale: 30.0,
            aam_margin: 0.2,
            seed: 5,
            n_seeds: 2,
            pooling: PoolingMode::Joint,
            av_norm: VisualAttentionNorm::AudioAxis,
            train_fraction: 0.5,
            n_target_trials: 4,
            n_nontarget_trials: 8,
            corruption: CorruptionConfig::default(),
            synth: Some(SynthBlock {
                utterances_per_speaker: 6,
                d_latent: 2,
                noise_sigma: 0.3,
            }),
            data: None,
            output_dir: None,
        }
    }

    #[test]
    fn experiment_writes_all_artifacts_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config();
        let report = run_experiment(&config, dir.path()).unwrap();

        assert_eq!(report.variants.len(), 2);
        for vr in &report.variants {
            assert_eq!(vr.seeds.len(), 2);
            for s in &vr.seeds {
                assert!(s.eer.is_finite());
                assert!(s.min_dcf.is_finite());
                assert!((0.0..=1.0).contains(&s.eer));
            }
        }
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("concat_seed5.scores").exists());
        assert!(dir.path().join("concat_seed6_det.csv").exists());
        assert!(dir.path().join("ca_seed5.dcac").exists());

        let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
        let parsed: Report = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed.config_hash, report.config_hash);
    }

    #[test]
    fn reports_are_deterministic_modulo_timing() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let config = quick_config();
        let a = run_experiment(&config, d1.path()).unwrap();
        let b = run_experiment(&config, d2.path()).unwrap();
        assert_eq!(
            a.deterministic_json().unwrap(),
            b.deterministic_json().unwrap()
        );
        // score files are byte-identical too
        for stem in ["concat_seed5.scores", "ca_seed6.scores"] {
            assert_eq!(
                std::fs::read(d1.path().join(stem)).unwrap(),
                std::fs::read(d2.path().join(stem)).unwrap()
            );
        }
    }

    #[test]
    fn synth_round_trip_through_disk_matches_dims() {
        let dir = tempfile::tempdir().unwrap();
        let config = quick_config();
        let artifacts = synthesize_to_disk(&config, dir.path()).unwrap();
        assert_eq!(artifacts.n_utterances, 18);
        let manifest = formats::read_manifest(&artifacts.manifest).unwrap();
        assert_eq!(manifest.entries.len(), 18);
        let trials = formats::read_trials(&artifacts.trials).unwrap();
        assert_eq!(trials.len(), 12);

        // an experiment can run off the written files
        let mut file_config = quick_config();
        file_config.synth = None;
        file_config.data = Some(crate::config::DataPaths {
            manifest: artifacts.manifest.clone(),
            trials: artifacts.trials.clone(),
        });
        file_config.n_seeds = 1;
        file_config.variants = vec![FusionVariant::Concat];
        let out = tempfile::tempdir().unwrap();
        let report = run_experiment(&file_config, out.path()).unwrap();
        assert_eq!(report.variants.len(), 1);
    }

    #[test]
    fn train_and_score_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = quick_config();
        config.variants = vec![FusionVariant::CaDca];
        let (ckpt_path, losses) = train_to_disk(&config, FusionVariant::CaDca, dir.path()).unwrap();
        assert!(!losses.is_empty());
        let ckpt = Checkpoint::load(&ckpt_path).unwrap();
        let score_path = score_to_disk(&config, &ckpt, dir.path()).unwrap();
        let scores = formats::read_scores(&score_path).unwrap();
        assert_eq!(scores.len(), 12);
    }

    #[test]
    fn gradient_suite_covers_all_variants() {
        let results = gradient_verification(2).unwrap();
        assert_eq!(results.len(), FusionVariant::ALL.len());
        for r in &results {
            assert!(
                r.max_rel_error < 1e-4,
                "{}: gradient error {}",
                r.variant,
                r.max_rel_error
            );
        }
    }
}
