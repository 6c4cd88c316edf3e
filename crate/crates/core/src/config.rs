//! Run configuration: a flat `key=value` text file with dotted sections.
//!
//! Blank lines and lines starting with `#` are ignored. Every key read is
//! recorded with its effective value, so [`RunConfig::dump`] reproduces
//! the run; keys that are never read are reported as errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::audio::PatchSize;
use crate::augment::SpecAugmentConfig;
use crate::backbone::{DecoderFusion, FusionSpec, TransformerConfig};
use crate::data::SynthConfig;
use crate::error::{config_err, Result};
use crate::finetune::{format_heads, parse_heads, ClassifierMode, ClassifierSpec, ProbeConfig};
use crate::model::{ArchConfig, AudioInput, ObjectiveConfig, ObjectiveKind, VideoInput};
use crate::objectives::{DecoderConfig, InpaintDirection};
use crate::train::{FinetuneDataset, OptimizerKind, Phase, TrainRecipe};
use crate::video::Tubelet;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "AVMAE_SEED";

/// Parses `key=value` lines. Duplicate keys and lines without `=` are
/// errors naming the line.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err!("line {}: expected key=value, got {line:?}", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.chars().any(char::is_whitespace) {
            return Err(config_err!("line {}: bad key {k:?}", i + 1));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(config_err!("line {}: key {k} given twice", i + 1));
        }
    }
    Ok(out)
}

/// Reads typed values out of a key map, remembering what was read.
struct Reader {
    raw: BTreeMap<String, String>,
    used: BTreeMap<String, String>,
}

impl Reader {
    fn new(raw: BTreeMap<String, String>) -> Self {
        Self {
            raw,
            used: BTreeMap::new(),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let value = match self.raw.remove(key) {
            Some(raw) => raw
                .parse()
                .map_err(|e| config_err!("bad value {raw:?} for {key}: {e}"))?,
            None => default,
        };
        self.used.insert(key.to_string(), value.to_string());
        Ok(value)
    }

    /// `none` or empty reads as `None`.
    fn opt<T: FromStr + Display>(&mut self, key: &str, default: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        let value = match self.raw.remove(key) {
            Some(raw) if raw.is_empty() || raw == "none" => None,
            Some(raw) => Some(
                raw.parse()
                    .map_err(|e| config_err!("bad value {raw:?} for {key}: {e}"))?,
            ),
            None => default,
        };
        let shown = value.as_ref().map_or("none".to_string(), |v| v.to_string());
        self.used.insert(key.to_string(), shown);
        Ok(value)
    }

    fn finish(self) -> Result<BTreeMap<String, String>> {
        if !self.raw.is_empty() {
            let keys: Vec<&str> = self.raw.keys().map(String::as_str).collect();
            return Err(config_err!("unknown config key(s): {}", keys.join(", ")));
        }
        Ok(self.used)
    }
}

/// Where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated train and evaluation splits.
    Synthetic {
        train: SynthConfig,
        eval_samples: usize,
    },
    Manifest {
        train: PathBuf,
        eval: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub objective: ObjectiveConfig,
    pub recipe: TrainRecipe,
    pub data: DataSource,
    pub classifier: ClassifierSpec,
    pub probe: ProbeConfig,
    /// Checkpoint to start from: pretrained for finetune/probe/reconstruct,
    /// a classifier for eval.
    pub init: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub max_steps: Option<usize>,
    pub views: usize,
    pub reconstruct_sample: usize,
    /// Effective value of every key, in key order.
    pub effective: BTreeMap<String, String>,
}

fn objective_from(r: &mut Reader) -> Result<ObjectiveConfig> {
    let d = ObjectiveConfig::default();
    let kind: String = r.get("objective.kind", "joint".to_string())?;
    let directions: String = r.get("objective.directions", "both".to_string())?;
    let kind = match kind.as_str() {
        "joint" => ObjectiveKind::Joint,
        "inpainting" => ObjectiveKind::Inpainting(match directions.as_str() {
            "both" => InpaintDirection::BOTH.to_vec(),
            one => vec![one.parse()?],
        }),
        other => return Err(config_err!("unknown objective {other:?}")),
    };
    Ok(ObjectiveConfig {
        kind,
        alpha_audio: r.get("objective.alpha_audio", d.alpha_audio)?,
        alpha_video: r.get("objective.alpha_video", d.alpha_video)?,
        standardize_targets: r.get("objective.standardize_targets", d.standardize_targets)?,
    })
}

fn arch_from(r: &mut Reader) -> Result<ArchConfig> {
    let base = ArchConfig::base();
    let size: String = r.get("model.size", "base".to_string())?;
    let (enc, dec) = match size.as_str() {
        "base" => (TransformerConfig::BASE, DecoderConfig::BASE),
        "large" => (TransformerConfig::LARGE, DecoderConfig::LARGE),
        other => return Err(config_err!("unknown model size {other:?}")),
    };
    let encoder = TransformerConfig {
        hidden: r.get("model.hidden", enc.hidden)?,
        layers: r.get("model.layers", enc.layers)?,
        heads: r.get("model.heads", enc.heads)?,
        mlp: r.get("model.mlp", enc.mlp)?,
    };
    let fusion_name: String = r.get("model.encoder", base.fusion.encoder.name().to_string())?;
    let s: usize = r.get("model.S", 2)?;
    let decoder_fusion: DecoderFusion = r
        .get::<String>("model.decoder", base.fusion.decoder.name().to_string())?
        .parse()?;
    let fusion = FusionSpec {
        encoder: FusionSpec::parse_encoder(&fusion_name, s)?,
        decoder: decoder_fusion,
    };
    let decoder = DecoderConfig {
        hidden: r.get("decoder.hidden", dec.hidden)?,
        layers: r.get("decoder.layers", dec.layers)?,
        heads: r.get("decoder.heads", dec.heads)?,
        mlp: r.get("decoder.mlp", dec.mlp)?,
    };
    let (a, v) = (AudioInput::DEFAULT, VideoInput::DEFAULT);
    let audio_on: bool = r.get("audio.enabled", true)?;
    let audio = AudioInput {
        frames: r.get("audio.frames", a.frames)?,
        bins: r.get("audio.bins", a.bins)?,
        patch: PatchSize {
            time: r.get("audio.patch_time", a.patch.time)?,
            freq: r.get("audio.patch_freq", a.patch.freq)?,
        },
    };
    let video_on: bool = r.get("video.enabled", true)?;
    let video = VideoInput {
        frames: r.get("video.frames", v.frames)?,
        height: r.get("video.height", v.height)?,
        width: r.get("video.width", v.width)?,
        tubelet: Tubelet {
            t: r.get("video.tubelet_t", v.tubelet.t)?,
            h: r.get("video.tubelet_h", v.tubelet.h)?,
            w: r.get("video.tubelet_w", v.tubelet.w)?,
        },
    };
    let arch = ArchConfig {
        audio: audio_on.then_some(audio),
        video: video_on.then_some(video),
        encoder,
        fusion,
        decoder: Some(decoder),
    };
    arch.validate()?;
    Ok(arch)
}

fn recipe_from(r: &mut Reader, phase: Phase, objective: &ObjectiveConfig, audio_only: bool) -> Result<TrainRecipe> {
    let dataset: String = r.get("train.dataset", "vggsound".to_string())?;
    let dataset = match dataset.as_str() {
        "vggsound" => FinetuneDataset::VggSound,
        "epic_kitchens" => FinetuneDataset::EpicKitchens,
        "audioset" => FinetuneDataset::AudioSet,
        other => return Err(config_err!("unknown dataset recipe {other:?}")),
    };
    let d = match (phase, &objective.kind) {
        (Phase::Pretrain, ObjectiveKind::Joint) => TrainRecipe::pretrain_default(),
        (Phase::Pretrain, ObjectiveKind::Inpainting(_)) => TrainRecipe::pretrain_inpainting(),
        (Phase::Finetune, _) => TrainRecipe::finetune_default(dataset, audio_only),
    };
    let optimizer: String = r.get(
        "train.optimizer",
        match d.optimizer {
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Sgd { .. } => "sgd",
        }
        .to_string(),
    )?;
    let (b1, b2, wd, mom) = match d.optimizer {
        OptimizerKind::Adam {
            beta1,
            beta2,
            weight_decay,
        } => (beta1, beta2, weight_decay, 0.9),
        OptimizerKind::Sgd { momentum, weight_decay } => (0.9, 0.95, weight_decay, momentum),
    };
    let beta1 = r.get("train.beta1", b1)?;
    let beta2 = r.get("train.beta2", b2)?;
    let weight_decay = r.get("train.weight_decay", wd)?;
    let momentum = r.get("train.momentum", mom)?;
    let optimizer = match optimizer.as_str() {
        "adam" => OptimizerKind::Adam {
            beta1,
            beta2,
            weight_decay,
        },
        "sgd" => OptimizerKind::Sgd { momentum, weight_decay },
        other => return Err(config_err!("unknown optimizer {other:?}")),
    };
    let reg = &d.regularizers;
    let spec_augment: bool = r.get("train.spec_augment", reg.spec_augment.is_some())?;
    let batch_size = r.get("train.batch_size", d.batch_size)?;
    let recipe = TrainRecipe {
        phase,
        optimizer,
        base_lr: r.get("train.lr", d.base_lr)?,
        batch_size,
        reference_batch: r.get("train.reference_batch", d.reference_batch)?,
        epochs: r.get("train.epochs", d.epochs)?,
        warmup_epochs: r.get("train.warmup_epochs", d.warmup_epochs)?,
        grad_clip: r.opt("train.grad_clip", d.grad_clip)?,
        layerwise_decay: r.opt("train.layerwise_decay", d.layerwise_decay)?,
        freeze_encoder: r.get("train.freeze_encoder", d.freeze_encoder)?,
        regularizers: crate::train::Regularizers {
            mixup_alpha: r.opt("train.mixup", reg.mixup_alpha)?,
            drop_path: r.get("train.drop_path", reg.drop_path)?,
            label_smoothing: r.get("train.label_smoothing", reg.label_smoothing)?,
            spec_augment: spec_augment.then(SpecAugmentConfig::default),
            time_shift: r.get("train.time_shift", reg.time_shift)?,
        },
        seed: r.get("train.seed", d.seed)?,
    };
    Ok(recipe)
}

fn data_from(r: &mut Reader, arch: &ArchConfig, classes: usize) -> Result<DataSource> {
    let source: String = r.get("data.source", "synthetic".to_string())?;
    let manifest: Option<PathBuf> = r.opt::<String>("data.manifest", None)?.map(PathBuf::from);
    let eval: Option<PathBuf> = r.opt::<String>("data.eval_manifest", None)?.map(PathBuf::from);
    let d = SynthConfig::default();
    let (frames, height, width) = arch
        .video
        .map_or((d.frames, d.height, d.width), |v| (v.frames, v.height, v.width));
    let (spec_frames, mel_bins) = arch.audio.map_or((d.spec_frames, d.mel_bins), |a| (a.frames, a.bins));
    let synth = SynthConfig {
        classes: r.get("data.synth.classes", classes)?,
        correlation: r.get("data.synth.correlation", d.correlation)?,
        samples: r.get("data.synth.samples", d.samples)?,
        frames,
        height,
        width,
        spec_frames,
        mel_bins,
        square: r.get("data.synth.square", d.square.min(height.min(width)))?,
        speed: r.get("data.synth.speed", d.speed)?,
        noise: r.get("data.synth.noise", d.noise)?,
        jitter: r.get("data.synth.jitter", d.jitter)?,
        seed: r.get("data.synth.seed", d.seed)?,
    };
    let eval_samples = r.get("data.synth.eval_samples", 256usize)?;
    match source.as_str() {
        "synthetic" => {
            synth.validate().map_err(|e| config_err!("synthetic data: {e}"))?;
            Ok(DataSource::Synthetic {
                train: synth,
                eval_samples,
            })
        }
        "manifest" => Ok(DataSource::Manifest {
            train: manifest.ok_or_else(|| config_err!("data.source=manifest needs data.manifest"))?,
            eval,
        }),
        other => Err(config_err!("unknown data source {other:?}")),
    }
}

impl RunConfig {
    /// Builds the configuration for a command of the given `phase`.
    /// `seed` (from the command line) beats `AVMAE_SEED`, which beats
    /// `train.seed`.
    pub fn from_kv(raw: BTreeMap<String, String>, phase: Phase, seed: Option<u64>) -> Result<Self> {
        let mut raw = raw;
        let env_seed = std::env::var(SEED_ENV).ok();
        if let Some(s) = seed.map(|s| s.to_string()).or(env_seed) {
            s.parse::<u64>()
                .map_err(|_| config_err!("seed override {s:?} is not an unsigned integer"))?;
            raw.insert("train.seed".into(), s);
        }
        let mut r = Reader::new(raw);
        let arch = arch_from(&mut r)?;
        let objective = objective_from(&mut r)?;
        if matches!(objective.kind, ObjectiveKind::Inpainting(_)) {
            crate::objectives::check_inpainting_fusion(&arch.fusion)?;
        }
        let mode: ClassifierMode = r.get::<String>("classifier.mode", "audiovisual".to_string())?.parse()?;
        let mode = match (mode, arch.audio.is_some(), arch.video.is_some()) {
            (ClassifierMode::Audiovisual, true, false) => ClassifierMode::Audio,
            (ClassifierMode::Audiovisual, false, true) => ClassifierMode::Video,
            (m, _, _) => m,
        };
        let heads = parse_heads(&r.get::<String>("classifier.heads", "label:8".to_string())?)?;
        let classifier = ClassifierSpec {
            mode,
            fusion_layer: r.get("classifier.fusion_layer", arch.encoder.layers.saturating_sub(4))?,
            bottlenecks: r.get("classifier.bottlenecks", 4)?,
            multilabel: r.get("classifier.multilabel", false)?,
            heads,
        };
        classifier.validate(arch.encoder.layers)?;
        let recipe = recipe_from(&mut r, phase, &objective, mode == ClassifierMode::Audio)?;
        recipe.validate()?;
        let data = data_from(&mut r, &arch, classifier.heads[0].classes)?;
        let pd = ProbeConfig::default();
        let probe = ProbeConfig {
            epochs: r.get("probe.epochs", pd.epochs)?,
            batch_size: r.get("probe.batch_size", pd.batch_size)?,
            lr: r.get("probe.lr", pd.lr)?,
            weight_decay: r.get("probe.weight_decay", pd.weight_decay)?,
            seed: recipe.seed,
        };
        let init = r.opt::<String>("init.checkpoint", None)?.map(PathBuf::from);
        let checkpoint_every = r.get("train.checkpoint_every", 0usize)?;
        let max_steps = r.opt("train.max_steps", None)?;
        let views = r.get("eval.views", 4usize)?;
        let reconstruct_sample = r.get("reconstruct.sample", 0usize)?;
        let effective = r.finish()?;
        Ok(Self {
            arch,
            objective,
            recipe,
            data,
            classifier,
            probe,
            init,
            checkpoint_every,
            max_steps,
            views,
            reconstruct_sample,
            effective,
        })
    }

    pub fn parse(text: &str, phase: Phase, seed: Option<u64>) -> Result<Self> {
        Self::from_kv(parse_kv(text)?, phase, seed)
    }

    /// Every effective setting as `key=value` lines; parsing the dump gives
    /// back the same configuration.
    pub fn dump(&self) -> String {
        self.effective.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn heads_string(&self) -> String {
        format_heads(&self.classifier.heads)
    }
}
