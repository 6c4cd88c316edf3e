//! Published configuration values and the behaviours tied to them.

mod common;

use avmae::autodiff::Graph;
use avmae::backbone::{DecoderFusion, EncoderFusion, TransformerConfig};
use avmae::config::RunConfig;
use avmae::finetune::{
    joint_accuracy, label_targets, multi_head_loss, Classifier, ClassifierArch, ClassifierMode, ClassifierSpec, Label,
};
use avmae::model::{ArchConfig, ObjectiveConfig};
use avmae::nn::ForwardCtx;
use avmae::objectives::DecoderConfig;
use avmae::params::ParamStore;
use avmae::train::{FinetuneDataset, OptimizerKind, Phase, TrainRecipe};
use avmae::video::normalize_u8;
use avmae::Error;
use common::{micro_arch, random_batch, rng};
use ndarray::{arr2, Array4};

#[test]
fn pretraining_recipe() {
    let r = TrainRecipe::pretrain_default();
    assert_eq!(
        r.optimizer,
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0
        }
    );
    assert_eq!(r.base_lr, 3e-4);
    assert_eq!(r.batch_size, 512);
    assert_eq!(r.warmup_epochs, 40.0);
    assert_eq!(r.regularizers, avmae::train::Regularizers::none());
    assert_eq!(TrainRecipe::pretrain_inpainting().base_lr, 1.5e-4);
}

#[test]
fn finetuning_recipes() {
    for (dataset, lr, batch) in [
        (FinetuneDataset::VggSound, 0.8, 64),
        (FinetuneDataset::EpicKitchens, 1.2, 64),
        (FinetuneDataset::AudioSet, 1.6, 128),
    ] {
        for audio_only in [false, true] {
            let r = TrainRecipe::finetune_default(dataset, audio_only);
            assert_eq!(
                r.optimizer,
                OptimizerKind::Sgd {
                    momentum: 0.9,
                    weight_decay: 0.0
                }
            );
            assert_eq!((r.base_lr, r.batch_size), (lr, batch));
            assert_eq!(r.layerwise_decay, Some(0.75));
            assert_eq!(r.grad_clip, Some(1.0));
            assert_eq!((r.warmup_epochs, r.epochs), (2.5, 50.0));
            let reg = &r.regularizers;
            assert_eq!((reg.drop_path, reg.label_smoothing), (0.3, 0.3));
            assert!(reg.spec_augment.is_some());
            assert_eq!(reg.time_shift, dataset != FinetuneDataset::VggSound);
            let mixup = if audio_only && dataset != FinetuneDataset::VggSound {
                1.25
            } else {
                0.5
            };
            assert_eq!(reg.mixup_alpha, Some(mixup));
        }
    }
}

#[test]
fn model_sizes() {
    assert_eq!(
        (
            DecoderConfig::BASE.hidden,
            DecoderConfig::BASE.layers,
            DecoderConfig::BASE.heads,
            DecoderConfig::BASE.mlp
        ),
        (384, 4, 6, 1536)
    );
    assert_eq!(
        (
            DecoderConfig::LARGE.hidden,
            DecoderConfig::LARGE.layers,
            DecoderConfig::LARGE.heads,
            DecoderConfig::LARGE.mlp
        ),
        (512, 4, 8, 2048)
    );
    assert_eq!(TransformerConfig::BASE.hidden, 768);
    assert_eq!(TransformerConfig::LARGE.hidden, 1024);
    let cfg = RunConfig::parse("model.size=large", Phase::Pretrain, None).unwrap();
    assert_eq!(cfg.arch.decoder, Some(DecoderConfig::LARGE));
}

#[test]
fn masking_ratios_and_input_sizes() {
    let o = ObjectiveConfig::default();
    assert_eq!((o.alpha_audio, o.alpha_video), (0.5, 0.9));
    let arch = ArchConfig::base();
    let audio = arch.audio.unwrap();
    assert_eq!((audio.frames, audio.bins), (800, 128));
    assert_eq!(arch.audio_geometry().unwrap().unwrap().tokens(), 400);
    let video = arch.video.unwrap();
    assert_eq!((video.frames, video.height, video.width), (16, 224, 224));
}

#[test]
fn pixel_normalization() {
    let raw = Array4::from_shape_vec((2, 1, 1, 3), vec![0u8, 255, 128, 0, 255, 127]).unwrap();
    let clip = normalize_u8(&raw, 25.0).unwrap();
    let v = clip.frames();
    assert_eq!(v[[0, 0, 0, 0]], -1.0);
    assert_eq!(v[[0, 0, 0, 1]], 1.0);
    let mid = avmae::video::normalize_rgb(&Array4::from_elem((2, 1, 1, 3), 127.5), 25.0).unwrap();
    assert!(mid.frames().iter().all(|&x| x == 0.0));
}

#[test]
fn zero_head_starts_at_uniform_loss() {
    let arch = micro_arch(EncoderFusion::Early, DecoderFusion::Shared);
    let spec = ClassifierSpec::single(ClassifierMode::Audio, 309);
    let mut store = ParamStore::<f32>::new();
    let clf = Classifier::new(
        &mut store,
        ClassifierArch::from_pretrain(&arch, spec.clone()),
        &mut rng(0),
    )
    .unwrap();
    let batch = random_batch(&arch, 3, 1);
    let batch = avmae::model::PatchBatch { video: None, ..batch };
    let logits = clf.predict(&store, &batch).unwrap();
    assert_eq!(logits[0].dim(), (3, 309));

    let mut g = Graph::<f64>::new();
    let store64 = store.cast::<f64>();
    let mut ctx = ForwardCtx::eval();
    let out = clf.forward(&mut g, &store64, &mut ctx, &batch).unwrap();
    let labels = vec![
        Label::Classes(vec![5]),
        Label::Classes(vec![0]),
        Label::Classes(vec![308]),
    ];
    let targets = label_targets(&spec, &labels, 0.0).unwrap();
    let loss = multi_head_loss(&mut g, &out, &targets, false).unwrap();
    assert!((g.scalar(loss) - 309f64.ln()).abs() < 1e-12);
}

#[test]
fn action_needs_both_heads_right() {
    let verbs = arr2(&[[0.9f32, 0.1], [0.9, 0.1], [0.1, 0.9]]);
    let nouns = arr2(&[[0.1f32, 0.2, 0.7], [0.8, 0.1, 0.1], [0.1, 0.2, 0.7]]);
    let labels = vec![vec![0, 2], vec![0, 2], vec![0, 2]];
    assert!((joint_accuracy(&[verbs, nouns], &labels) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn inpainting_without_cross_modal_encoder_is_rejected() {
    for encoder in ["separate", "shared"] {
        let text = format!("model.encoder={encoder}\nobjective.kind=inpainting\n");
        assert!(matches!(
            RunConfig::parse(&text, Phase::Pretrain, None),
            Err(Error::Config(_))
        ));
    }
    assert!(RunConfig::parse(
        "model.encoder=early\nobjective.kind=inpainting\n",
        Phase::Pretrain,
        None
    )
    .is_ok());
}
