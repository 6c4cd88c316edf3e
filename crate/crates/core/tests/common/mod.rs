#![allow(dead_code)]

use avmae::audio::PatchSize;
use avmae::backbone::{DecoderFusion, EncoderFusion, FusionSpec, TransformerConfig};
use avmae::model::{ArchConfig, AudioInput, PatchBatch, VideoInput};
use avmae::objectives::DecoderConfig;
use avmae::video::Tubelet;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 4x4 spectrogram in 2x2 patches and a 2x4x4 clip in 2x2x2 tubelets: four
/// tokens per modality.
pub fn micro_arch(encoder: EncoderFusion, decoder: DecoderFusion) -> ArchConfig {
    ArchConfig {
        audio: Some(AudioInput {
            frames: 4,
            bins: 4,
            patch: PatchSize { time: 2, freq: 2 },
        }),
        video: Some(VideoInput {
            frames: 2,
            height: 4,
            width: 4,
            tubelet: Tubelet { t: 2, h: 2, w: 2 },
        }),
        encoder: TransformerConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            mlp: 16,
        },
        fusion: FusionSpec { encoder, decoder },
        decoder: Some(DecoderConfig {
            hidden: 4,
            layers: 1,
            heads: 2,
            mlp: 8,
        }),
    }
}

/// Uniform random patch rows matching `arch`.
pub fn random_batch(arch: &ArchConfig, batch: usize, seed: u64) -> PatchBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = |geo: Option<avmae::backbone::TokenGeometry>| {
        geo.map(|g| Array2::from_shape_fn((batch * g.tokens(), g.patch_width), |_| rng.random_range(-1.0..1.0f32)))
    };
    PatchBatch {
        audio: rows(arch.audio_geometry().unwrap()),
        video: rows(arch.video_geometry().unwrap()),
        batch,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use avmae::autodiff::Graph;
use avmae::model::{AvMae, ObjectiveConfig};
use avmae::nn::ForwardCtx;
use avmae::params::{ParamStore, Scalar};

/// Norm-wise relative errors of analytic pretraining gradients against
/// central finite differences taken in 64-bit: `(f64 analytic, f32 analytic)`.
pub fn pretrain_gradient_errors(arch: ArchConfig, objective: &ObjectiveConfig, seed: u64) -> (f64, f64) {
    let mut store32 = ParamStore::<f32>::new();
    let model = AvMae::new(&mut store32, arch, &mut rng(seed)).unwrap();
    let store64 = store32.cast::<f64>();
    let batch = random_batch(&model.arch, 2, seed + 1);
    let plans = model.make_plans(&batch, objective, &mut rng(seed + 2)).unwrap();
    let assign_seed = seed + 3;

    fn grads<F: Scalar>(
        model: &AvMae,
        store: &ParamStore<F>,
        batch: &PatchBatch,
        plans: &avmae::objectives::BatchPlans,
        objective: &ObjectiveConfig,
        assign_seed: u64,
    ) -> (f64, Vec<Option<Array2<F>>>) {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let terms = model
            .loss_with_plans(&mut g, store, &mut ctx, batch, plans, objective, &mut rng(assign_seed))
            .unwrap();
        let value = g.scalar(terms.total).to_f64().unwrap();
        (value, g.backward(terms.total).params(store.len()))
    }

    let (_, g64) = grads(&model, &store64, &batch, &plans, objective, assign_seed);
    let (_, g32) = grads(&model, &store32, &batch, &plans, objective, assign_seed);

    let h = 1e-6;
    let mut probe = store64.clone();
    let (mut num, mut den64, mut den32, mut norm) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let ids: Vec<_> = store64.ids().collect();
    for id in ids {
        let shape = store64.get(id).dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = store64.get(id)[[r, c]];
                probe.get_mut(id)[[r, c]] = orig + h;
                let (lp, _) = grads(&model, &probe, &batch, &plans, objective, assign_seed);
                probe.get_mut(id)[[r, c]] = orig - h;
                let (lm, _) = grads(&model, &probe, &batch, &plans, objective, assign_seed);
                probe.get_mut(id)[[r, c]] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a64 = g64[id.index()].as_ref().map_or(0.0, |g| g[[r, c]]);
                let a32 = g32[id.index()].as_ref().map_or(0.0, |g| g[[r, c]] as f64);
                den64 += (a64 - fd).powi(2);
                den32 += (a32 - fd).powi(2);
                norm += fd * fd;
                num += 1.0;
            }
        }
    }
    assert!(num > 0.0);
    let scale = norm.sqrt().max(1e-12);
    (den64.sqrt() / scale, den32.sqrt() / scale)
}

/// Encoder width 16 and depth 4 over the micro inputs.
pub fn tiny_arch(encoder: EncoderFusion, decoder: DecoderFusion) -> ArchConfig {
    ArchConfig {
        encoder: TransformerConfig {
            hidden: 16,
            layers: 4,
            heads: 2,
            mlp: 32,
        },
        ..micro_arch(encoder, decoder)
    }
}

/// Copies every parameter of `src` into `dst`, renaming through `rename`.
/// Panics when a renamed tensor is missing from `dst`.
pub fn copy_renamed(src: &ParamStore<f32>, dst: &mut ParamStore<f32>, rename: impl Fn(&str) -> Vec<String>) {
    for (_, name, value) in src.iter() {
        for target in rename(name) {
            let id = dst
                .id(&target)
                .unwrap_or_else(|| panic!("no tensor {target} for {name}"));
            dst.get_mut(id).assign(value);
        }
    }
}

/// Encoder outputs for the kept tokens of `plans`.
pub fn encoder_outputs(
    model: &AvMae,
    store: &ParamStore<f32>,
    batch: &PatchBatch,
    plans: &avmae::objectives::BatchPlans,
) -> (Array2<f32>, Array2<f32>) {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    let (a, v) = model.encode_masked(&mut g, store, &mut ctx, batch, plans).unwrap();
    (g.value(a.unwrap()).clone(), g.value(v.unwrap()).clone())
}

pub fn max_abs_diff(a: &Array2<f32>, b: &Array2<f32>) -> f32 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Inputs sized for the synthetic generator below: an 8x16 spectrogram in
/// 4x4 patches and a 2x8x8 clip in 2x4x4 tubelets.
pub fn synth_arch(encoder: EncoderFusion, decoder: DecoderFusion) -> ArchConfig {
    ArchConfig {
        audio: Some(AudioInput {
            frames: 8,
            bins: 16,
            patch: PatchSize { time: 4, freq: 4 },
        }),
        video: Some(VideoInput {
            frames: 2,
            height: 8,
            width: 8,
            tubelet: Tubelet { t: 2, h: 4, w: 4 },
        }),
        encoder: TransformerConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            mlp: 32,
        },
        fusion: FusionSpec { encoder, decoder },
        decoder: Some(DecoderConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            mlp: 16,
        }),
    }
}

pub fn synth_config(classes: usize, samples: usize, seed: u64) -> avmae::data::SynthConfig {
    avmae::data::SynthConfig {
        classes,
        samples,
        frames: 2,
        height: 8,
        width: 8,
        spec_frames: 8,
        mel_bins: 16,
        square: 3,
        speed: 1.0,
        seed,
        ..avmae::data::SynthConfig::default()
    }
}
