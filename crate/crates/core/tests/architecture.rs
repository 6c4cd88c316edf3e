mod common;

use avmae::autodiff::Graph;
use avmae::backbone::{DecoderFusion, EncoderFusion};
use avmae::model::{AvMae, ObjectiveConfig};
use avmae::nn::ForwardCtx;
use avmae::objectives::{joint_reconstruction_loss, PatchTargets};
use avmae::params::ParamStore;
use avmae::tokens::Modality;
use common::{copy_renamed, encoder_outputs, max_abs_diff, random_batch, rng, tiny_arch};

fn build(enc: EncoderFusion, seed: u64) -> (AvMae, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let model = AvMae::new(&mut store, tiny_arch(enc, DecoderFusion::Shared), &mut rng(seed)).unwrap();
    (model, store)
}

#[test]
fn shared_matches_separate_with_tied_weights() {
    let (shared, s_store) = build(EncoderFusion::Shared, 1);
    let (separate, mut p_store) = build(EncoderFusion::Separate, 2);
    copy_renamed(&s_store, &mut p_store, |name| {
        match name.strip_prefix("encoder.shared.") {
            Some(rest) => vec![format!("encoder.audio.{rest}"), format!("encoder.video.{rest}")],
            None => vec![name.to_string()],
        }
    });
    for seed in 0..5 {
        let batch = random_batch(&shared.arch, 3, 100 + seed);
        let plans = shared
            .make_plans(&batch, &ObjectiveConfig::default(), &mut rng(seed))
            .unwrap();
        let (a1, v1) = encoder_outputs(&shared, &s_store, &batch, &plans);
        let (a2, v2) = encoder_outputs(&separate, &p_store, &batch, &plans);
        assert!(max_abs_diff(&a1, &a2) < 1e-5);
        assert!(max_abs_diff(&v1, &v2) < 1e-5);
    }
}

#[test]
fn mid_fusion_with_all_layers_shared_is_early_fusion() {
    let (early, e_store) = build(EncoderFusion::Early, 3);
    let (mid, mut m_store) = build(EncoderFusion::Mid { shared_layers: 4 }, 4);
    assert_eq!(e_store.len(), m_store.len());
    copy_renamed(&e_store, &mut m_store, |name| vec![name.to_string()]);
    for seed in 0..5 {
        let batch = random_batch(&early.arch, 2, 200 + seed);
        let plans = early
            .make_plans(&batch, &ObjectiveConfig::default(), &mut rng(seed))
            .unwrap();
        let (a1, v1) = encoder_outputs(&early, &e_store, &batch, &plans);
        let (a2, v2) = encoder_outputs(&mid, &m_store, &batch, &plans);
        assert!(max_abs_diff(&a1, &a2) < 1e-5);
        assert!(max_abs_diff(&v1, &v2) < 1e-5);
    }
}

#[test]
fn untied_separate_encoder_differs_from_shared() {
    let (shared, s_store) = build(EncoderFusion::Shared, 1);
    let (separate, p_store) = build(EncoderFusion::Separate, 2);
    let batch = random_batch(&shared.arch, 1, 7);
    let plans = shared
        .make_plans(&batch, &ObjectiveConfig::default(), &mut rng(0))
        .unwrap();
    let (a1, _) = encoder_outputs(&shared, &s_store, &batch, &plans);
    let (a2, _) = encoder_outputs(&separate, &p_store, &batch, &plans);
    assert!(max_abs_diff(&a1, &a2) > 1e-3);
}

fn joint_loss(
    model: &AvMae,
    store: &ParamStore<f32>,
    batch: &avmae::model::PatchBatch,
    plans: &avmae::objectives::BatchPlans,
    targets: &PatchTargets,
) -> f32 {
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::eval();
    let encoded = model.encode_masked(&mut g, store, &mut ctx, batch, plans).unwrap();
    let terms = joint_reconstruction_loss(
        &mut g,
        store,
        &mut ctx,
        &model.decoder,
        &model.arch.fusion,
        encoded,
        plans,
        targets,
    )
    .unwrap();
    g.scalar(terms.total)
}

#[test]
fn loss_ignores_targets_at_unmasked_positions() {
    let (model, store) = build(EncoderFusion::Early, 5);
    for seed in 0..100u64 {
        let batch = random_batch(&model.arch, 2, 1000 + seed);
        let plans = model
            .make_plans(&batch, &ObjectiveConfig::default(), &mut rng(seed))
            .unwrap();
        let targets = PatchTargets::from_patches(batch.audio.clone(), batch.video.clone(), false);
        let mut perturbed = targets.clone();
        for m in Modality::BOTH {
            let t = match m {
                Modality::Audio => perturbed.audio.as_mut().unwrap(),
                Modality::Video => perturbed.video.as_mut().unwrap(),
            };
            for r in plans.kept_rows(m) {
                t.row_mut(r).mapv_inplace(|v| v * 3.0 + 10.0 + seed as f32);
            }
        }
        let base = joint_loss(&model, &store, &batch, &plans, &targets);
        let moved = joint_loss(&model, &store, &batch, &plans, &perturbed);
        assert_eq!(base.to_bits(), moved.to_bits(), "seed {seed}");

        // A masked row does move the loss.
        let mut hit = targets.clone();
        let r = plans.get(Modality::Video)[0].masked()[0];
        hit.video.as_mut().unwrap().row_mut(r).mapv_inplace(|v| v + 1.0);
        assert_ne!(joint_loss(&model, &store, &batch, &plans, &hit), base);
    }
}
