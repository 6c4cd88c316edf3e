mod common;

use avmae::audio::{audio_grid, compute_log_mel, patchify_grid, time_shift, unpatchify_grid, PatchSize, Waveform};
use avmae::augment::{label_smooth, mix_with_lambda};
use avmae::backbone::{DecoderFusion, EncoderFusion, PositionalTable};
use avmae::config::RunConfig;
use avmae::data::{make_batches, synth_sample, SynthConfig};
use avmae::finetune::argmax;
use avmae::masking::{apply_mask, make_masking_plan, unshuffle};
use avmae::model::{AvMae, ObjectiveConfig};
use avmae::params::ParamStore;
use avmae::tokens::{GridShape, Modality, TokenSequence};
use avmae::train::{clip_grad_norm, global_norm, Phase, Schedule};
use avmae::video::{tubelet_tokenize_array, untokenize_tubelets, video_grid, Tubelet};
use common::{encoder_outputs, micro_arch, random_batch, rng};
use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;
use rand::Rng;

fn grid_values(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-5.0..5.0f32))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patchify_round_trip(tp in 1usize..5, fp in 1usize..5, nt in 1usize..6, nf in 1usize..6, seed in any::<u64>()) {
        let patch = PatchSize { time: tp, freq: fp };
        let values = grid_values(tp * nt, fp * nf, seed);
        let seq = patchify_grid(&values, patch).unwrap();
        prop_assert_eq!(seq.len(), nt * nf);
        prop_assert_eq!(unpatchify_grid(&seq.values, tp * nt, fp * nf, patch).unwrap(), values);
    }

    #[test]
    fn indivisible_spectrograms_are_rejected(frames in 1usize..64, bins in 1usize..64) {
        let patch = PatchSize { time: 16, freq: 16 };
        prop_assert_eq!(audio_grid(frames, bins, patch).is_ok(), frames % 16 == 0 && bins % 16 == 0);
    }

    #[test]
    fn time_shift_rotates(frames in 1usize..20, offset in 0usize..40, seed in any::<u64>()) {
        let values = grid_values(frames, 3, seed);
        let shifted = time_shift(&values, offset);
        let mut a: Vec<u32> = values.iter().map(|v| v.to_bits()).collect();
        let mut b: Vec<u32> = shifted.iter().map(|v| v.to_bits()).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        let o = offset % frames;
        prop_assert_eq!(time_shift(&shifted, frames - o), values);
    }

    #[test]
    fn tubelet_round_trip_and_count(
        gt in 1usize..4, gh in 1usize..4, gw in 1usize..4,
        tt in 1usize..3, th in 1usize..5, tw in 1usize..5,
        seed in any::<u64>(),
    ) {
        let tubelet = Tubelet { t: tt, h: th, w: tw };
        let (t, h, w) = (gt * tt, gh * th, gw * tw);
        let mut r = rng(seed);
        let clip = Array4::from_shape_fn((t, h, w, 3), |_| r.random_range(-1.0..1.0f32));
        let seq = tubelet_tokenize_array(&clip, tubelet).unwrap();
        prop_assert_eq!(seq.len(), (t / tt) * (h / th) * (w / tw));
        prop_assert_eq!(video_grid(t, h, w, tubelet).unwrap().len(), seq.len());
        prop_assert_eq!(untokenize_tubelets(&seq.values, t, h, w, tubelet).unwrap(), clip);
    }

    #[test]
    fn masking_partitions_indices(n in 1usize..2000, pct in 0usize..100, seed in any::<u64>()) {
        let alpha = pct as f64 / 100.0;
        let plan = make_masking_plan(n, alpha, &mut rng(seed)).unwrap();
        prop_assert_eq!(plan.kept().len() + plan.masked().len(), n);
        prop_assert_eq!(plan.kept().len(), ((100 - pct) * n / 100).max(1));
        let mut all: Vec<usize> = plan.kept().iter().chain(plan.masked()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn unshuffle_restores_original_slots(n in 1usize..64, pct in 0usize..100, seed in any::<u64>()) {
        let plan = make_masking_plan(n, pct as f64 / 100.0, &mut rng(seed)).unwrap();
        let grid = GridShape::new(n, 1, 1);
        let values = Array2::from_shape_fn((n, 4), |(i, c)| (i * 10 + c + 1) as f32);
        let tokens = TokenSequence::new(values.clone(), grid.positions(), Modality::Audio).unwrap();
        let kept = apply_mask(&tokens, &plan).unwrap();
        let zero = PositionalTable::from_rows(grid, Array2::zeros((n, 4)));
        let out = unshuffle(&kept, &plan, &[-1.0; 4], &zero).unwrap();
        for &k in plan.kept() {
            prop_assert_eq!(out.values.row(k), values.row(k));
        }
        for &m in plan.masked() {
            prop_assert!(out.values.row(m).iter().all(|&v| v == -1.0));
        }
    }

    #[test]
    fn smoothed_labels_are_distributions(k in 2usize..400, class in 0usize..400, eps in 0.0f64..1.0) {
        let mut one_hot = vec![0.0; k];
        one_hot[class % k] = 1.0;
        let t = label_smooth(&one_hot, eps);
        prop_assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(t.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mixed_labels_are_distributions(lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut dist = |rows: usize, k: usize| {
            let mut m = Array2::from_shape_fn((rows, k), |_| r.random_range(0.0..1.0f64));
            for mut row in m.outer_iter_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            m
        };
        let (la, lb) = (dist(3, 5), dist(3, 5));
        let x = grid_values(3, 4, seed);
        let mixed = mix_with_lambda((Some(&x), None), (Some(&x), None), &la, &lb, lambda).unwrap();
        for row in mixed.labels.outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let same = mix_with_lambda((Some(&x), None), (Some(&x), None), &la, &la, lambda).unwrap();
        for (a, b) in same.audio.unwrap().iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        for (a, b) in same.labels.iter().zip(la.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_is_continuous_and_nonnegative(peak in 1e-6f64..1.0, warmup in 1usize..200, extra in 1usize..2000) {
        let s = Schedule { peak, warmup_steps: warmup, total_steps: warmup + extra };
        for step in 0..=(warmup + extra + 5) {
            prop_assert!(s.lr_at(step) >= 0.0);
            prop_assert!(s.lr_at(step) <= peak * (1.0 + 1e-12));
        }
        let before = s.lr_at(warmup - 1);
        let at = s.lr_at(warmup);
        prop_assert!((at - peak).abs() < 1e-15);
        prop_assert!(at - before <= peak / warmup as f64 + 1e-15);
    }

    #[test]
    fn clipping_bounds_global_norm(scale in 1e-3f32..1e3, seed in any::<u64>()) {
        let mut grads = vec![
            Some(grid_values(4, 3, seed).mapv(|v| v * scale)),
            None,
            Some(grid_values(1, 7, seed ^ 1).mapv(|v| v * scale)),
        ];
        let before = global_norm(&grads);
        let reported = clip_grad_norm(&mut grads, 1.0);
        prop_assert_eq!(reported, before);
        prop_assert!(global_norm(&grads) <= 1.0 + 1e-6);
        if before <= 1.0 {
            prop_assert!((global_norm(&grads) - before).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_logit_shift(shift in -100.0f32..100.0, seed in any::<u64>()) {
        let logits = grid_values(1, 9, seed).row(0).to_owned();
        let shifted: Array1<f32> = logits.mapv(|v| v + shift);
        prop_assert_eq!(argmax(logits.view()), argmax(shifted.view()));
    }

    #[test]
    fn batches_cover_each_record_once(len in 0usize..200, bs in 1usize..40, seed in any::<u64>()) {
        let batches = make_batches(len, bs, true, &mut rng(seed), false);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
        prop_assert_eq!(make_batches(len, bs, true, &mut rng(seed), false), batches);
    }

    #[test]
    fn synthetic_sample_depends_only_on_config_and_index(index in 0usize..1000, seed in 0u64..100) {
        let cfg = SynthConfig { seed, frames: 2, height: 8, width: 8, spec_frames: 8, ..SynthConfig::default() };
        let a = synth_sample(&cfg, index);
        let b = synth_sample(&cfg, index);
        prop_assert_eq!(a.audio, b.audio);
        prop_assert_eq!(a.video, b.video);
        prop_assert_eq!(a.audio_class, b.audio_class);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn log_mel_frame_count(seconds in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let samples: Vec<f32> = (0..seconds * 16000 - r.random_range(0..8000)).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let a = compute_log_mel(&w);
        prop_assert_eq!(a.values().dim(), (100 * seconds, 128));
        prop_assert!(a.values().iter().all(|v| v.is_finite()));
        let again = compute_log_mel(&w);
        prop_assert_eq!(again.values(), a.values());
    }

    #[test]
    fn encoder_preserves_lengths(seed in any::<u64>(), variant in 0usize..4) {
        let enc = [
            EncoderFusion::Early,
            EncoderFusion::Separate,
            EncoderFusion::Shared,
            EncoderFusion::Mid { shared_layers: 1 },
        ][variant];
        let mut store = ParamStore::<f32>::new();
        let model = AvMae::new(&mut store, micro_arch(enc, DecoderFusion::Shared), &mut rng(seed)).unwrap();
        let batch = random_batch(&model.arch, 3, seed);
        let objective = ObjectiveConfig { alpha_audio: 0.25, alpha_video: 0.5, ..ObjectiveConfig::default() };
        let plans = model.make_plans(&batch, &objective, &mut rng(seed)).unwrap();
        let (a, v) = encoder_outputs(&model, &store, &batch, &plans);
        prop_assert_eq!(a.dim(), (3 * 3, 8));
        prop_assert_eq!(v.dim(), (3 * 2, 8));
        // Eval forward passes are deterministic.
        let (a2, v2) = encoder_outputs(&model, &store, &batch, &plans);
        prop_assert_eq!(a, a2);
        prop_assert_eq!(v, v2);
    }

    #[test]
    fn permuting_unmasked_targets_keeps_loss(seed in any::<u64>()) {
        use avmae::autodiff::Graph;
        use avmae::nn::ForwardCtx;
        use avmae::objectives::{joint_reconstruction_loss, PatchTargets};
        let mut store = ParamStore::<f32>::new();
        let model = AvMae::new(&mut store, micro_arch(EncoderFusion::Early, DecoderFusion::Shared), &mut rng(seed)).unwrap();
        let batch = random_batch(&model.arch, 2, seed);
        let objective = ObjectiveConfig { alpha_audio: 0.5, alpha_video: 0.5, ..ObjectiveConfig::default() };
        let plans = model.make_plans(&batch, &objective, &mut rng(seed)).unwrap();
        let loss = |targets: &PatchTargets| {
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::eval();
            let enc = model.encode_masked(&mut g, &store, &mut ctx, &batch, &plans).unwrap();
            let t = joint_reconstruction_loss(&mut g, &store, &mut ctx, &model.decoder, &model.arch.fusion, enc, &plans, targets).unwrap();
            g.scalar(t.total)
        };
        let targets = PatchTargets::from_patches(batch.audio.clone(), batch.video.clone(), false);
        let mut permuted = targets.clone();
        for (m, t) in [(Modality::Audio, permuted.audio.as_mut().unwrap()), (Modality::Video, permuted.video.as_mut().unwrap())] {
            let rows = plans.kept_rows(m);
            let original = t.clone();
            for (i, &r) in rows.iter().enumerate() {
                let from = rows[(i + 1) % rows.len()];
                t.row_mut(r).assign(&original.row(from));
            }
        }
        prop_assert_eq!(loss(&targets).to_bits(), loss(&permuted).to_bits());
    }
}

#[test]
fn masking_is_uniform_over_indices() {
    let (n, alpha, trials) = (40usize, 0.75, 4000usize);
    let mut counts = vec![0usize; n];
    let mut r = rng(9);
    for _ in 0..trials {
        for &k in make_masking_plan(n, alpha, &mut r).unwrap().kept() {
            counts[k] += 1;
        }
    }
    let p = 10.0 / 40.0;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &c) in counts.iter().enumerate() {
        // 3 sigma per index, widened for the 40 simultaneous comparisons.
        assert!((c as f64 - mean).abs() < 4.0 * sigma, "index {i} kept {c} times");
    }
}

#[test]
fn config_dump_round_trips() {
    let text = "model.encoder=mid\nmodel.S=1\nmodel.hidden=16\nmodel.layers=2\nmodel.heads=2\nmodel.mlp=32\n\
                decoder.hidden=8\ndecoder.layers=1\ndecoder.heads=2\ndecoder.mlp=16\ntrain.lr=0.001\n";
    for phase in [Phase::Pretrain, Phase::Finetune] {
        let cfg = RunConfig::parse(text, phase, Some(5)).unwrap();
        let again = RunConfig::parse(&cfg.dump(), phase, None).unwrap();
        assert_eq!(cfg, again);
    }
}
