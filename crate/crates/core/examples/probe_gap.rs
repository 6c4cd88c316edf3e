//! Linear-probe accuracy of a pretrained versus a randomly initialized
//! tiny encoder on the synthetic audiovisual set.
//!
//! Usage: `cargo run --release --example probe_gap -- [epochs] [seed]`

use std::time::Instant;

use avmae::audio::PatchSize;
use avmae::backbone::{DecoderFusion, EncoderFusion, FusionSpec, TransformerConfig};
use avmae::data::{generate_synthetic, PatchDataset, SynthConfig};
use avmae::finetune::{
    build_classifier, train_linear_probe, ClassifierArch, ClassifierMode, ClassifierSpec, ProbeConfig,
};
use avmae::model::{ArchConfig, AudioInput, AvMae, ObjectiveConfig, VideoInput};
use avmae::objectives::DecoderConfig;
use avmae::params::ParamStore;
use avmae::train::{pretrain, LoopOptions, TrainRecipe};
use avmae::video::Tubelet;
use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn arch() -> ArchConfig {
    let fusion = match std::env::var("ENC").as_deref() {
        Ok("separate") => FusionSpec {
            encoder: EncoderFusion::Separate,
            decoder: DecoderFusion::Separate,
        },
        Ok("shared") => FusionSpec {
            encoder: EncoderFusion::Shared,
            decoder: DecoderFusion::Shared,
        },
        _ => FusionSpec {
            encoder: EncoderFusion::Early,
            decoder: DecoderFusion::Shared,
        },
    };
    ArchConfig {
        audio: Some(AudioInput {
            frames: 32,
            bins: 128,
            patch: PatchSize {
                time: env("APT", 8),
                freq: 16,
            },
        }),
        video: Some(VideoInput {
            frames: 8,
            height: 32,
            width: 32,
            tubelet: Tubelet { t: 2, h: 8, w: 8 },
        }),
        encoder: TransformerConfig {
            hidden: 32,
            layers: 4,
            heads: 4,
            mlp: 64,
        },
        fusion,
        decoder: Some(DecoderConfig {
            hidden: 32,
            layers: env("DL", 1),
            heads: 4,
            mlp: 64,
        }),
    }
}

fn features(
    source_arch: &ArchConfig,
    store: &ParamStore<f32>,
    data: &PatchDataset,
    mode: ClassifierMode,
) -> Array2<f32> {
    let spec = ClassifierSpec {
        fusion_layer: source_arch.encoder.layers,
        bottlenecks: 0,
        ..ClassifierSpec::single(mode, 8)
    };
    let carch = ClassifierArch::from_pretrain(source_arch, spec);
    let (clf, cstore, _) = build_classifier(source_arch, store, carch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let idx: Vec<usize> = (0..data.data.len()).collect();
    let parts: Vec<Array2<f32>> = idx
        .chunks(64)
        .map(|c| clf.extract_features(&cstore, &data.eval_batch(c).unwrap()).unwrap())
        .collect();
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: f64 = args.get(1).and_then(|v| v.parse().ok()).unwrap_or(400.0);
    let seed: u64 = args.get(2).and_then(|v| v.parse().ok()).unwrap_or(0);
    let synth = SynthConfig {
        samples: 768,
        noise: env("NOISE", 0.1),
        jitter: 1.0,
        seed: 1000 + seed,
        ..SynthConfig::default()
    };
    let (data, samples) = generate_synthetic(&synth).unwrap();
    let labels: Vec<usize> = samples.iter().map(|s| s.video_class).collect();
    let arch = arch();
    let train_idx: Vec<usize> = (0..512).collect();
    let test_idx: Vec<usize> = (512..768).collect();
    let train = PatchDataset::new(data.subset(&train_idx), arch.audio, arch.video);
    let test = PatchDataset::new(data.subset(&test_idx), arch.audio, arch.video);

    let mut store = ParamStore::<f32>::new();
    let model = AvMae::new(&mut store, arch.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let init = store.clone();
    let recipe = TrainRecipe {
        batch_size: env("BS", 64),
        reference_batch: 64,
        base_lr: env("LR", 1e-3),
        epochs,
        warmup_epochs: (epochs / 10.0).min(40.0),
        seed,
        ..TrainRecipe::pretrain_default()
    };
    let objective = ObjectiveConfig::default();
    let t0 = Instant::now();
    let log = pretrain(&model, &mut store, &train, &objective, &recipe, LoopOptions::default()).unwrap();
    let n = log.losses.len();
    println!(
        "pretrain {} steps in {:.1}s, loss {:.4} -> {:.4}",
        n,
        t0.elapsed().as_secs_f64(),
        log.losses[0],
        log.losses[n.saturating_sub(8)..].iter().sum::<f64>() / 8.0
    );
    let ytr = &labels[..512];
    let yte = &labels[512..];
    let probe = ProbeConfig {
        seed,
        ..ProbeConfig::default()
    };
    for mode in [
        ClassifierMode::Audiovisual,
        ClassifierMode::Audio,
        ClassifierMode::Video,
    ] {
        let mut accs = Vec::new();
        for s in [&store, &init] {
            let ftr = features(&arch, s, &train, mode);
            let fte = features(&arch, s, &test, mode);
            let r = train_linear_probe((&ftr, ytr), (&fte, yte), 8, &probe).unwrap();
            accs.push((r.train_accuracy, r.test_accuracy));
        }
        println!(
            "{mode:?}: pretrained {:.3}/{:.3} random {:.3}/{:.3}",
            accs[0].0, accs[0].1, accs[1].0, accs[1].1
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
