//! Derived values checked against independent, brute-force computations.

mod common;

use std::f64::consts::PI;

use avmae::audio::{compute_log_mel, mel_centers, patchify_grid, PatchSize, Waveform, MEL_BINS};
use avmae::augment::smoothed_target;
use avmae::backbone::{DecoderFusion, EncoderFusion, TransformerConfig};
use avmae::checkpoint::{load_checkpoint, restore, save_checkpoint};
use avmae::data::{generate_synthetic, SynthConfig};
use avmae::finetune::{build_classifier, ClassifierArch, ClassifierMode, ClassifierSpec, InitMapping};
use avmae::masking::{keep_count, MaskingPlan};
use avmae::model::{ArchConfig, AvMae};
use avmae::objectives::inpainting_mask_count;
use avmae::params::ParamStore;
use avmae::train::{layerwise_lr_factors, steps_per_epoch, TrainRecipe};
use avmae::video::{frame_indices, tubelet_tokenize_array, SampleMode, Tubelet};
use avmae::Error;
use common::{micro_arch, rng, tiny_arch};
use ndarray::{Array2, Array4};

// Log-mel by direct DFT. Window 400 (Hamming), hop 160, FFT 512, reflect
// padding of 120 samples per side, 128 area-normalized triangles on the HTK
// mel scale between 0 and 8 kHz, log(x + 1e-6).
fn log_mel_oracle(x: &[f64]) -> Array2<f64> {
    let (win, hop, nfft, pad) = (400usize, 160usize, 512usize, 120usize);
    let n = x.len();
    let mut padded: Vec<f64> = (0..pad).map(|i| x[pad - i]).collect();
    padded.extend_from_slice(x);
    padded.extend((0..pad).map(|i| x[n - 2 - i]));
    let frames = n / hop;

    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let edges: Vec<f64> = (0..130).map(|i| hz(top * i as f64 / 129.0)).collect();

    let bins = nfft / 2 + 1;
    let mut out = Array2::zeros((frames, 128));
    for f in 0..frames {
        let mut power = vec![0.0; bins];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..win {
                let w = 0.54 - 0.46 * (2.0 * PI * i as f64 / win as f64).cos();
                let v = padded[f * hop + i] * w;
                let a = -2.0 * PI * (k * i) as f64 / nfft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            *p = re * re + im * im;
        }
        for m in 0..128 {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let fk = k as f64 * 16000.0 / nfft as f64;
                let tri = if fk >= lo && fk <= c {
                    (fk - lo) / (c - lo)
                } else if fk > c && fk <= hi {
                    (hi - fk) / (hi - c)
                } else {
                    0.0
                };
                e += p * tri * 2.0 / (hi - lo);
            }
            out[[f, m]] = (e + 1e-6).ln();
        }
    }
    out
}

#[test]
fn log_mel_of_sine_matches_direct_dft() {
    let samples: Vec<f64> = (0..16000)
        .map(|i| 0.5 * (2.0 * PI * 1000.0 * i as f64 / 16000.0).sin())
        .collect();
    let oracle = log_mel_oracle(&samples);
    let w = Waveform::new(samples.iter().map(|&v| v as f32).collect(), 16000).unwrap();
    let got = compute_log_mel(&w);
    assert_eq!(got.values().dim(), (100, MEL_BINS));
    let worst = got
        .values()
        .iter()
        .zip(oracle.iter())
        .map(|(&a, &b)| (a as f64 - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "max log-mel deviation {worst}");

    let mean = |grid: &Array2<f64>| -> Vec<f64> { (0..128).map(|m| grid.column(m).mean().unwrap()).collect() };
    let as_f64 = got.values().mapv(|v| v as f64);
    let argmax = |v: Vec<f64>| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let peak = argmax(mean(&as_f64));
    assert_eq!(peak, argmax(mean(&oracle)));
    let centers = mel_centers();
    let below = centers.iter().rposition(|&c| c <= 1000.0).unwrap();
    assert!(
        peak == below || peak == below + 1,
        "peak bin {peak}, 1 kHz lies after bin {below}"
    );
}

#[test]
fn audio_patch_order_matches_index_arithmetic() {
    let grid = Array2::from_shape_fn((32, 128), |(t, f)| (t * 1000 + f) as f32);
    let seq = patchify_grid(&grid, PatchSize { time: 16, freq: 16 }).unwrap();
    assert_eq!(seq.values.dim(), (16, 256));
    for k in 0..16 {
        let (tb, fb) = (k / 8, k % 8);
        assert_eq!((seq.positions[k].t, seq.positions[k].h), (tb, fb));
        for j in 0..256 {
            let (t, f) = (tb * 16 + j / 16, fb * 16 + j % 16);
            assert_eq!(seq.values[[k, j]], grid[[t, f]]);
        }
    }
}

#[test]
fn tubelet_order_matches_index_enumeration() {
    let clip = Array4::from_shape_fn((4, 32, 32, 3), |(t, y, x, c)| {
        (t * 100_000 + y * 1000 + x * 10 + c) as f32
    });
    let seq = tubelet_tokenize_array(&clip, Tubelet::default()).unwrap();
    assert_eq!(seq.values.dim(), (8, 1536));
    let mut k = 0;
    for tt in 0..2 {
        for yy in 0..2 {
            for xx in 0..2 {
                let p = seq.positions[k];
                assert_eq!((p.t, p.h, p.w), (tt, yy, xx));
                let mut j = 0;
                for dt in 0..2 {
                    for dy in 0..16 {
                        for dx in 0..16 {
                            for c in 0..3 {
                                let v = clip[[tt * 2 + dt, yy * 16 + dy, xx * 16 + dx, c]];
                                assert_eq!(seq.values[[k, j]], v);
                                j += 1;
                            }
                        }
                    }
                }
                k += 1;
            }
        }
    }
}

#[test]
fn token_counts() {
    let (t, h, w) = (16usize, 224usize, 224usize);
    assert_eq!((t / 2) * (h / 16) * (w / 16), 1568);
    let arch = ArchConfig::base();
    assert_eq!(
        arch.audio_geometry().unwrap().unwrap().tokens(),
        (800 / 16) * (128 / 16)
    );
    assert_eq!(arch.video_geometry().unwrap().unwrap().tokens(), 1568);
}

#[test]
fn center_frame_sampling() {
    let idx = frame_indices(64, 16, SampleMode::Center, &mut rng(0)).unwrap();
    let expected: Vec<usize> = (0..16).map(|i| 1 + 4 * i).collect();
    assert_eq!(idx, expected);
    // Gaps to both ends differ by at most one frame.
    let (left, right) = (idx[0], 63 - idx[15]);
    assert!(left.abs_diff(right) <= 1);

    let looped = frame_indices(8, 16, SampleMode::Center, &mut rng(0)).unwrap();
    let mut counts = [0usize; 8];
    for i in looped {
        counts[i] += 1;
    }
    assert_eq!(counts, [2; 8]);
    assert_eq!(
        frame_indices(16, 16, SampleMode::Random, &mut rng(3)).unwrap(),
        (0..16).collect::<Vec<_>>()
    );
}

#[test]
fn keep_counts_follow_the_floor_rule() {
    assert_eq!(keep_count(400, 0.5), 200);
    assert_eq!(keep_count(1568, 0.9), 156);
    assert_eq!(keep_count(400, 0.0), 400);
    for n in 1..300usize {
        for pct in 0..100usize {
            let alpha = pct as f64 / 100.0;
            // Exact integer arithmetic: floor((100 - pct) * n / 100).
            let exact = ((100 - pct) * n / 100).max(1);
            assert_eq!(keep_count(n, alpha), exact, "n={n} alpha={alpha}");
        }
    }
}

#[test]
fn inpainting_mask_counts() {
    let plan = |n: usize, alpha: f64| MaskingPlan::from_kept(n, (0..keep_count(n, alpha)).collect()).unwrap();
    let (audio, video) = (plan(400, 0.5), plan(1568, 0.9));
    assert_eq!(inpainting_mask_count(&audio, &video).unwrap(), 1568 - 200);
    assert_eq!(inpainting_mask_count(&video, &audio).unwrap(), 400 - 156);
    let heavy_video = plan(1568, 0.7);
    assert!(matches!(
        inpainting_mask_count(&heavy_video, &audio),
        Err(Error::Config(_))
    ));
}

#[test]
fn label_smoothing_closed_form() {
    let t = smoothed_target(4, 309, 0.3);
    let on = 0.7 + 0.3 / 309.0;
    let off = 0.3 / 309.0;
    assert!((t[4] - on).abs() < 1e-12);
    assert!((t[4] - 0.700_970_873_786_407_8).abs() < 1e-12);
    for (i, v) in t.iter().enumerate().filter(|&(i, _)| i != 4) {
        assert!((v - off).abs() < 1e-12, "class {i}");
    }
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn layerwise_factors_closed_form() {
    let f = layerwise_lr_factors(12, 0.75);
    assert_eq!(f.head, 1.0);
    assert_eq!(f.layers.len(), 12);
    for (i, v) in f.layers.iter().enumerate() {
        let mut expected = 1.0;
        for _ in 0..(12 - i) {
            expected *= 0.75;
        }
        assert!((v - expected).abs() < 1e-15);
    }
    assert_eq!(f.layers[11], 0.75);
    assert!((f.layers[0] - 0.031_676_352_024_078_37).abs() < 1e-15);
    assert!((f.embedding - 0.75f64.powi(13)).abs() < 1e-15);
    assert!(layerwise_lr_factors(12, 1.0).layers.iter().all(|&v| v == 1.0));
}

#[test]
fn pretraining_schedule_points() {
    let recipe = TrainRecipe::pretrain_default();
    let spe = steps_per_epoch(512 * 10, recipe.batch_size);
    let s = recipe.schedule(spe);
    assert_eq!(recipe.lr_at(0, spe), 0.0);
    assert!((recipe.lr_at(s.warmup_steps, spe) - 3e-4).abs() < 1e-18);
    let mid = s.warmup_steps + (s.total_steps - s.warmup_steps) / 2;
    assert!((recipe.lr_at(mid, spe) - 1.5e-4).abs() < 1e-15);
    assert_eq!(recipe.lr_at(s.total_steps, spe), 0.0);
}

#[test]
fn uncorrelated_synthetic_agreement_is_chance() {
    let cfg = SynthConfig {
        correlation: 0.0,
        samples: 2000,
        frames: 2,
        height: 8,
        width: 8,
        spec_frames: 8,
        ..SynthConfig::default()
    };
    let (_, samples) = generate_synthetic(&cfg).unwrap();
    let agree = samples.iter().filter(|s| s.audio_class == s.video_class).count();
    assert_eq!(agree, 0, "rho = 0 forces a different audio class");

    // With a uniform audio draw the agreement count is Binomial(n, 1/K).
    let cfg = SynthConfig {
        correlation: 1.0 / 8.0,
        ..cfg
    };
    let (_, samples) = generate_synthetic(&cfg).unwrap();
    let n = samples.len() as f64;
    let agree = samples.iter().filter(|s| s.audio_class == s.video_class).count() as f64;
    let p = 1.0 / 8.0;
    let sigma = (n * p * (1.0 - p)).sqrt();
    assert!((agree - n * p).abs() < 4.0 * sigma, "agreement {agree} of {n}");
}

fn first_shape_mismatch(src: &ParamStore<f32>, dst: &ParamStore<f32>) -> String {
    for (_, name, value) in dst.iter() {
        match src.by_name(name) {
            Some(v) if v.dim() == value.dim() => continue,
            _ => return name.to_string(),
        }
    }
    panic!("stores agree");
}

#[test]
fn cross_architecture_restore_names_first_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let small = tiny_arch(EncoderFusion::Early, DecoderFusion::Shared);
    let mut s_store = ParamStore::<f32>::new();
    AvMae::new(&mut s_store, small.clone(), &mut rng(0)).unwrap();
    save_checkpoint(dir.path(), "pretrain", &small.to_kv(), 0, "x", &s_store).unwrap();

    let large = ArchConfig {
        encoder: TransformerConfig {
            hidden: 24,
            ..small.encoder
        },
        ..small
    };
    let mut l_store = ParamStore::<f32>::new();
    AvMae::new(&mut l_store, large, &mut rng(0)).unwrap();
    let ckpt = load_checkpoint::<f32>(dir.path()).unwrap();
    let expected = first_shape_mismatch(&ckpt.store, &l_store);
    match restore(&ckpt.store, &mut l_store) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains(&format!("tensor {expected} ")), "{msg}"),
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

fn classifier_for(arch: &ArchConfig) -> ClassifierArch {
    let spec = ClassifierSpec {
        fusion_layer: 1,
        bottlenecks: 2,
        ..ClassifierSpec::single(ClassifierMode::Audiovisual, 5)
    };
    ClassifierArch::from_pretrain(arch, spec)
}

#[test]
fn separate_pretraining_initializes_each_stream_from_its_encoder() {
    let arch = micro_arch(EncoderFusion::Separate, DecoderFusion::Shared);
    let mut source = ParamStore::<f32>::new();
    AvMae::new(&mut source, arch.clone(), &mut rng(1)).unwrap();
    let (_, store, mapping) = build_classifier(&arch, &source, classifier_for(&arch), &mut rng(2)).unwrap();
    for (name, value) in store.iter().map(|(_, n, v)| (n, v)) {
        let Some((m, rest)) = name.split_once('.') else {
            continue;
        };
        let src = if let Some(r) = rest.strip_prefix("embed.") {
            format!("encoder.{m}_embed.{r}")
        } else if rest.starts_with("layer") || rest.starts_with("norm") {
            format!("encoder.{m}.{rest}")
        } else {
            continue;
        };
        assert_eq!(source.by_name(&src).unwrap(), value, "{name} <- {src}");
    }
    let assigned: Vec<&str> = mapping.assigned.iter().map(|(d, _)| d.as_str()).collect();
    assert_eq!(assigned.len() + mapping.fresh.len(), store.len());
    let mut unique = assigned.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), assigned.len());
}

#[test]
fn mid_fusion_mapping_parameter_counts() {
    let arch = tiny_arch(EncoderFusion::Mid { shared_layers: 2 }, DecoderFusion::Shared);
    let mut source = ParamStore::<f32>::new();
    AvMae::new(&mut source, arch.clone(), &mut rng(1)).unwrap();
    let mut store = ParamStore::<f32>::new();
    let clf = avmae::finetune::Classifier::new(&mut store, classifier_for(&arch), &mut rng(2)).unwrap();
    let mapping = InitMapping::new(arch.fusion.encoder, &clf, &store);

    let count = |s: &ParamStore<f32>, prefix: &str| -> usize {
        s.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, v)| v.len())
            .sum()
    };
    let scalars_from = |prefix: &str| -> usize {
        mapping
            .assigned
            .iter()
            .filter(|(_, s)| s.starts_with(prefix))
            .map(|(_, s)| source.by_name(s).unwrap().len())
            .sum()
    };
    // Joint layers and final norm feed both streams; separate layers one each.
    assert_eq!(scalars_from("encoder.joint."), 2 * count(&source, "encoder.joint."));
    assert_eq!(scalars_from("encoder.audio."), count(&source, "encoder.audio."));
    assert_eq!(scalars_from("encoder.video."), count(&source, "encoder.video."));
    for (dst, src) in &mapping.assigned {
        if let Some(rest) = src.strip_prefix("encoder.joint.layer") {
            let layer: usize = rest.split('.').next().unwrap().parse().unwrap();
            assert!(layer >= 2, "{src}");
            assert!(dst.contains(&format!("layer{layer}.")), "{dst} <- {src}");
        }
    }
    let fresh: usize = mapping.fresh.iter().map(|n| store.by_name(n).unwrap().len()).sum();
    let assigned: usize = mapping
        .assigned
        .iter()
        .map(|(d, _)| store.by_name(d).unwrap().len())
        .sum();
    assert_eq!(fresh + assigned, store.num_scalars());
}
