//! Hot-path benchmarks: fusion forward passes, a full training step
//! (forward + backward + Adam), EER over a large score set, and dataset
//! generation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dca_core::attention::{concat_fuse, cross_attend, dca_fuse, self_attention_fuse};
use dca_core::metrics::{compute_eer, ScoreSet, TrialScore};
use dca_core::synthdata::{generate, SynthSpec};
use dca_core::trainer::train;
use dca_core::{
    CorruptModality, CorruptionConfig, ExperimentConfig, FeatureSequence, FusionParams,
    FusionVariant, Matrix, Modality, PoolingMode, SynthBlock, TrialLabel, VisualAttentionNorm,
};

const D_A: usize = 32;
const D_V: usize = 32;
const CLIPS: usize = 16;

fn random_pair(rng: &mut ChaCha8Rng) -> (FeatureSequence, FeatureSequence) {
    let xa = Matrix::from_fn(D_A, CLIPS, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    let xv = Matrix::from_fn(D_V, CLIPS, |_, _| rng.random_range(-1.0..1.0)).unwrap();
    (
        FeatureSequence::new(Modality::Audio, xa),
        FeatureSequence::new(Modality::Visual, xv),
    )
}

fn bench_fusion_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (xa, xv) = random_pair(&mut rng);
    let mut group = c.benchmark_group("fusion_forward");
    for variant in FusionVariant::ALL {
        let params = FusionParams::init(
            variant,
            D_A,
            D_V,
            0.1,
            VisualAttentionNorm::AudioAxis,
            &mut rng,
        )
        .unwrap();
        group.bench_with_input(
            BenchmarkId::from_parameter(variant),
            &params,
            |b, params| {
                b.iter(|| match variant {
                    FusionVariant::Concat => {
                        concat_fuse(&xa, &xv).unwrap();
                    }
                    FusionVariant::SelfAttention => {
                        self_attention_fuse(&xa, &xv, params).unwrap();
                    }
                    FusionVariant::Ca | FusionVariant::Jca => {
                        cross_attend(&xa, &xv, params).ok();
                        if variant == FusionVariant::Jca {
                            dca_core::attention::joint_cross_attend(&xa, &xv, params).unwrap();
                        }
                    }
                    FusionVariant::CaDca | FusionVariant::JcaDca => {
                        dca_fuse(&xa, &xv, params).unwrap();
                    }
                })
            },
        );
    }
    group.finish();
}

fn bench_training_epoch(c: &mut Criterion) {
    let config = ExperimentConfig {
        variants: vec![FusionVariant::CaDca],
        d_a: 16,
        d_v: 12,
        clips: 10,
        n_speakers: 8,
        learning_rate: 1e-3,
        lr_decay: None,
        batch_size: 16,
        epochs: 1,
        temperature: 0.1,
        aam_scale: 30.0,
        aam_margin: 0.2,
        seed: 0,
        n_seeds: 1,
        pooling: PoolingMode::Joint,
        av_norm: VisualAttentionNorm::AudioAxis,
        train_fraction: 0.75,
        n_target_trials: 10,
        n_nontarget_trials: 20,
        corruption: CorruptionConfig {
            probability: 0.3,
            modality: CorruptModality::Visual,
            severity: 1.0,
        },
        synth: Some(SynthBlock {
            utterances_per_speaker: 8,
            d_latent: 8,
            noise_sigma: 0.3,
        }),
        data: None,
        output_dir: None,
    };
    let spec = SynthSpec::from_config(&config, 0).unwrap();
    let data = generate(&spec).unwrap();
    c.bench_function("train_one_epoch_64_utterances", |b| {
        b.iter(|| train(&config, FusionVariant::CaDca, 0, &data.utterances).unwrap())
    });
}

fn bench_eer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials: Vec<TrialScore> = (0..10_000)
        .map(|i| {
            let target = i % 2 == 0;
            TrialScore {
                enroll_id: format!("e{i}"),
                test_id: format!("t{i}"),
                label: if target {
                    TrialLabel::Target
                } else {
                    TrialLabel::Nontarget
                },
                score: rng.random_range(-1.0..1.0) + if target { 0.5 } else { 0.0 },
            }
        })
        .collect();
    let scores = ScoreSet::new(trials).unwrap();
    c.bench_function("eer_10k_trials", |b| {
        b.iter(|| compute_eer(&scores).unwrap())
    });
}

fn bench_generation(c: &mut Criterion) {
    let spec = SynthSpec {
        n_speakers: 8,
        utterances_per_speaker: 20,
        d_latent: 8,
        d_a: 16,
        d_v: 12,
        clips: 10,
        noise_sigma: 0.3,
        corrupt_prob: 0.3,
        corrupt_modality: CorruptModality::Visual,
        corrupt_severity: 1.0,
        seed: 0,
    };
    c.bench_function("generate_160_utterances", |b| {
        b.iter(|| generate(&spec).unwrap())
    });
}

criterion_group!(
    benches,
    bench_fusion_forward,
    bench_training_epoch,
    bench_eer,
    bench_generation
);
criterion_main!(benches);
