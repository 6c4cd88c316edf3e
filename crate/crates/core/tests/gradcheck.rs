mod common;

use avmae::backbone::{DecoderFusion, EncoderFusion};
use avmae::model::{ObjectiveConfig, ObjectiveKind};
use avmae::objectives::InpaintDirection;
use avmae::params::ParamStore;
use common::{micro_arch, pretrain_gradient_errors};

fn joint() -> ObjectiveConfig {
    ObjectiveConfig {
        kind: ObjectiveKind::Joint,
        alpha_audio: 0.5,
        alpha_video: 0.5,
        standardize_targets: false,
    }
}

fn inpaint(dirs: &[InpaintDirection]) -> ObjectiveConfig {
    ObjectiveConfig {
        kind: ObjectiveKind::Inpainting(dirs.to_vec()),
        ..joint()
    }
}

#[test]
fn micro_model_is_small() {
    let mut store = ParamStore::<f32>::new();
    let arch = micro_arch(EncoderFusion::Early, DecoderFusion::Shared);
    avmae::model::AvMae::new(&mut store, arch, &mut common::rng(0)).unwrap();
    assert!(store.num_scalars() <= 2000, "{} parameters", store.num_scalars());
}

#[test]
fn joint_reconstruction_gradients() {
    let cases = [
        (EncoderFusion::Early, DecoderFusion::Shared),
        (EncoderFusion::Mid { shared_layers: 1 }, DecoderFusion::Early),
        (EncoderFusion::Separate, DecoderFusion::Separate),
        (EncoderFusion::Shared, DecoderFusion::Shared),
    ];
    for (i, (enc, dec)) in cases.into_iter().enumerate() {
        let (e64, e32) = pretrain_gradient_errors(micro_arch(enc, dec), &joint(), 10 + i as u64);
        assert!(e64 < 1e-6, "{enc}/{dec}: f64 error {e64}");
        assert!(e32 < 1e-3, "{enc}/{dec}: f32 error {e32}");
    }
}

#[test]
fn inpainting_gradients() {
    let cases = [
        (
            EncoderFusion::Early,
            DecoderFusion::Shared,
            inpaint(&InpaintDirection::BOTH),
        ),
        (
            EncoderFusion::Mid { shared_layers: 1 },
            DecoderFusion::Separate,
            inpaint(&[InpaintDirection::VideoFromAudio]),
        ),
    ];
    for (i, (enc, dec, obj)) in cases.into_iter().enumerate() {
        let (e64, e32) = pretrain_gradient_errors(micro_arch(enc, dec), &obj, 20 + i as u64);
        assert!(e64 < 1e-6, "{enc}/{dec}: f64 error {e64}");
        assert!(e32 < 1e-3, "{enc}/{dec}: f32 error {e32}");
    }
}
