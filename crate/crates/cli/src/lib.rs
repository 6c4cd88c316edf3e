//! Commands behind the `avmae` binary.

use std::fs;
use std::path::{Path, PathBuf};

use avmae::backbone::{DecoderFusion, EncoderFusion, FusionSpec};
use avmae::checkpoint::{append_history, load_checkpoint, restore, save_checkpoint, write_text, HistoryRow};
use avmae::config::{DataSource, RunConfig};
use avmae::data::{generate_synthetic, load_manifest, AudioAugment, Dataset, PatchDataset};
use avmae::export::{reconstruction_rows, write_reconstruction};
use avmae::finetune::{
    build_classifier, train_linear_probe, Classifier, ClassifierArch, ClassifierSpec, Label, ProbeResult,
};
use avmae::model::{ArchConfig, AvMae};
use avmae::params::ParamStore;
use avmae::train::{evaluate, finetune, pretrain, LoopOptions, Phase};
use avmae::{Error, Result};
use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_CLASSIFIER: &str = "classifier";

/// Process exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Checkpoint(_) | Error::CorruptCheckpoint(_) => 3,
        Error::Diverged { .. } => 4,
        _ => 1,
    }
}

/// Options shared by every command.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub views: Option<usize>,
}

impl Invocation {
    /// Reads the config, prints the effective settings and saves them as
    /// `config.txt` in the output directory.
    pub fn load(&self, phase: Phase) -> Result<RunConfig> {
        let text = fs::read_to_string(&self.config)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", self.config.display())))?;
        let cfg = RunConfig::parse(&text, phase, self.seed)?;
        let dump = cfg.dump();
        println!("# effective config");
        print!("{dump}");
        write_text(&self.out.join("config.txt"), &dump)?;
        Ok(cfg)
    }
}

/// Train and optional evaluation datasets.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    match &cfg.data {
        DataSource::Synthetic { train, eval_samples } => {
            let mut all = train.clone();
            all.samples = train.samples + eval_samples;
            let (data, _) = generate_synthetic(&all)?;
            let train_idx: Vec<usize> = (0..train.samples).collect();
            let eval_idx: Vec<usize> = (train.samples..all.samples).collect();
            let eval = (*eval_samples > 0).then(|| data.subset(&eval_idx));
            Ok((data.subset(&train_idx), eval))
        }
        DataSource::Manifest { train, eval } => {
            Ok((load_manifest(train)?, eval.as_deref().map(load_manifest).transpose()?))
        }
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A pretrained model restored from `dir`.
pub fn load_pretrained(dir: &Path) -> Result<(AvMae, ParamStore<f32>, usize)> {
    let ckpt = load_checkpoint::<f32>(dir)?;
    if ckpt.manifest.kind != KIND_PRETRAIN {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint without a decoder; a pretraining checkpoint is needed",
            dir.display(),
            ckpt.manifest.kind
        )));
    }
    let arch = ArchConfig::from_kv(&ckpt.manifest.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut store = ParamStore::new();
    let model = AvMae::new(&mut store, arch, &mut rng(0))?;
    restore(&ckpt.store, &mut store)?;
    Ok((model, store, ckpt.manifest.step))
}

pub fn load_classifier(dir: &Path) -> Result<(Classifier, ParamStore<f32>, usize)> {
    let ckpt = load_checkpoint::<f32>(dir)?;
    if ckpt.manifest.kind != KIND_CLASSIFIER {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected a classifier",
            dir.display(),
            ckpt.manifest.kind
        )));
    }
    let arch = ClassifierArch::from_kv(&ckpt.manifest.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut store = ParamStore::new();
    let clf = Classifier::new(&mut store, arch, &mut rng(0))?;
    restore(&ckpt.store, &mut store)?;
    Ok((clf, store, ckpt.manifest.step))
}

/// Pretrained encoder from `init.checkpoint`, or a fresh one from the
/// config when no checkpoint is given.
fn source_encoder(cfg: &RunConfig) -> Result<(ArchConfig, ParamStore<f32>)> {
    match &cfg.init {
        Some(dir) => {
            let (model, store, step) = load_pretrained(dir)?;
            println!("initialized from {} (step {step})", dir.display());
            Ok((model.arch, store))
        }
        None => {
            println!("no init.checkpoint: encoder starts from random initialization");
            let mut store = ParamStore::new();
            let model = AvMae::new(&mut store, cfg.arch.clone(), &mut rng(cfg.recipe.seed))?;
            Ok((model.arch, store))
        }
    }
}

fn save_classifier(
    dir: &Path,
    clf: &Classifier,
    store: &ParamStore<f32>,
    step: usize,
    recipe_hash: &str,
) -> Result<()> {
    save_checkpoint(dir, KIND_CLASSIFIER, &clf.arch.to_kv(), step, recipe_hash, store)?;
    Ok(())
}

pub fn cmd_pretrain(inv: &Invocation) -> Result<()> {
    let cfg = inv.load(Phase::Pretrain)?;
    let (train, _) = load_datasets(&cfg)?;
    let data = PatchDataset::new(train, cfg.arch.audio, cfg.arch.video);
    let (log, _) = run_pretrain(&cfg, &data, &inv.out)?;
    let last = log.losses.last().copied().unwrap_or(f64::NAN);
    println!("steps {}", log.steps);
    println!("final loss {last:.6}");
    Ok(())
}

/// Pretrains per `cfg`, writing `checkpoint/`, intermediate checkpoints
/// and `history.csv` under `out`.
pub fn run_pretrain(
    cfg: &RunConfig,
    data: &PatchDataset,
    out: &Path,
) -> Result<(avmae::train::TrainLog, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = AvMae::new(&mut store, cfg.arch.clone(), &mut rng(cfg.recipe.seed))?;
    let kv = cfg.arch.to_kv();
    let hash = cfg.recipe.hash();
    let every = cfg.checkpoint_every;
    let options = LoopOptions {
        max_steps: cfg.max_steps,
        every_epochs: every,
        on_epoch: (every > 0).then(|| {
            let kv = kv.clone();
            let hash = hash.clone();
            let dir = out.join("checkpoints");
            Box::new(move |epoch: usize, step: usize, s: &ParamStore<f32>| {
                save_checkpoint(
                    &dir.join(format!("epoch{epoch:04}")),
                    KIND_PRETRAIN,
                    &kv,
                    step,
                    &hash,
                    s,
                )
                .map(|_| ())
            }) as Box<dyn FnMut(usize, usize, &ParamStore<f32>) -> Result<()>>
        }),
    };
    let log = pretrain(&model, &mut store, data, &cfg.objective, &cfg.recipe, options)?;
    save_checkpoint(&out.join("checkpoint"), KIND_PRETRAIN, &kv, log.steps, &hash, &store)?;
    append_history(&out.join("history.csv"), &log.history)?;
    Ok((log, store))
}

fn labeled(data: Dataset, arch: &ClassifierArch, augment: AudioAugment) -> Result<PatchDataset> {
    PatchDataset::new(data, arch.audio, arch.video)
        .with_labels(&arch.spec)
        .map(|d| d.with_augment(augment))
}

pub fn cmd_finetune(inv: &Invocation) -> Result<()> {
    let cfg = inv.load(Phase::Finetune)?;
    let (source_arch, source) = source_encoder(&cfg)?;
    let arch = ClassifierArch::from_pretrain(&source_arch, cfg.classifier.clone());
    let (clf, mut store, mapping) = build_classifier(&source_arch, &source, arch, &mut rng(cfg.recipe.seed))?;
    println!(
        "init mapping: {} tensors from the encoder, {} fresh ({})",
        mapping.assigned.len(),
        mapping.fresh.len(),
        mapping.fresh.join(", ")
    );
    let (train, eval) = load_datasets(&cfg)?;
    let reg = &cfg.recipe.regularizers;
    let augment = AudioAugment {
        spec_augment: reg.spec_augment,
        time_shift: reg.time_shift,
    };
    let train = labeled(train, &clf.arch, augment)?;
    let eval = eval
        .map(|e| labeled(e, &clf.arch, AudioAugment::default()))
        .transpose()?;
    let options = LoopOptions {
        max_steps: cfg.max_steps,
        ..LoopOptions::default()
    };
    let log = finetune(
        &clf,
        &mut store,
        &train,
        eval.as_ref().map(|e| e as &dyn avmae::train::LabeledSource),
        &cfg.recipe,
        options,
    )?;
    save_classifier(&inv.out.join("checkpoint"), &clf, &store, log.steps, &cfg.recipe.hash())?;
    let mut history = log.history;
    if let Some(eval) = &eval {
        let views = inv.views.unwrap_or(cfg.views);
        let metrics = evaluate(&clf, &store, eval, views, cfg.recipe.batch_size)?;
        for (name, v) in &metrics.values {
            println!("{name} {v:.4}");
            history.push(HistoryRow::new(log.steps, &format!("eval_{views}view"), name, *v));
        }
    }
    append_history(&inv.out.join("history.csv"), &history)?;
    println!("final loss {:.6}", log.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn class_labels(labels: &[Label]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| match l {
            Label::Classes(c) if c.len() == 1 => Ok(c[0]),
            _ => Err(Error::Config("linear probing needs one single-label head".into())),
        })
        .collect()
}

/// Pooled encoder features of every sample, in order.
pub fn dataset_features(
    clf: &Classifier,
    store: &ParamStore<f32>,
    data: &PatchDataset,
    batch: usize,
) -> Result<Array2<f32>> {
    let idx: Vec<usize> = (0..data.data.len()).collect();
    let parts = idx
        .chunks(batch.max(1))
        .map(|c| clf.extract_features(store, &data.eval_batch(c)?))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Classifier whose streams only meet in the head, for probing frozen
/// features.
pub fn probe_spec(cfg: &RunConfig, layers: usize) -> Result<ClassifierSpec> {
    let spec = ClassifierSpec {
        fusion_layer: layers,
        bottlenecks: 0,
        ..cfg.classifier.clone()
    };
    if spec.multilabel || spec.heads.len() != 1 {
        return Err(Error::Config("linear probing needs one single-label head".into()));
    }
    Ok(spec)
}

/// Folds the probe's feature standardization into the classifier head so
/// the saved classifier reproduces the probe's logits.
pub fn install_probe_head(clf: &Classifier, store: &mut ParamStore<f32>, probe: &ProbeResult) {
    let inv = &probe.norm.inv_std;
    let w = &probe.weight * &inv.t();
    let shift = (&probe.norm.mean * inv).dot(&probe.weight);
    let b = &probe.bias - &shift;
    let [wid, bid] = clf.heads[0].linear.params();
    store.get_mut(wid).assign(&w);
    store.get_mut(bid).assign(&b);
}

pub fn cmd_probe(inv: &Invocation) -> Result<()> {
    let cfg = inv.load(Phase::Finetune)?;
    let (source_arch, source) = source_encoder(&cfg)?;
    let result = run_probe(&cfg, &source_arch, &source, Some(&inv.out))?;
    println!("train_accuracy {:.4}", result.train_accuracy);
    println!("label_accuracy {:.4}", result.test_accuracy);
    Ok(())
}

/// Linear probe of the frozen encoder in `source`. With `out`, saves the
/// probe as a classifier checkpoint and appends to the history.
pub fn run_probe(
    cfg: &RunConfig,
    source_arch: &ArchConfig,
    source: &ParamStore<f32>,
    out: Option<&Path>,
) -> Result<ProbeResult> {
    let spec = probe_spec(cfg, source_arch.encoder.layers)?;
    let head = spec.heads[0].clone();
    let arch = ClassifierArch::from_pretrain(source_arch, spec);
    let (clf, mut store, _) = build_classifier(source_arch, source, arch, &mut rng(cfg.recipe.seed))?;
    let (train, eval) = load_datasets(cfg)?;
    let eval = eval.ok_or_else(|| Error::Config("linear probing needs an evaluation split".into()))?;
    let train = labeled(train, &clf.arch, AudioAugment::default())?;
    let eval = labeled(eval, &clf.arch, AudioAugment::default())?;
    let ytr = class_labels(train.labels.as_deref().unwrap_or_default())?;
    let yte = class_labels(eval.labels.as_deref().unwrap_or_default())?;
    let ftr = dataset_features(&clf, &store, &train, 64)?;
    let fte = dataset_features(&clf, &store, &eval, 64)?;
    let result = train_linear_probe((&ftr, &ytr), (&fte, &yte), head.classes, &cfg.probe)?;
    if let Some(out) = out {
        install_probe_head(&clf, &mut store, &result);
        save_classifier(
            &out.join("checkpoint"),
            &clf,
            &store,
            cfg.probe.epochs,
            &cfg.recipe.hash(),
        )?;
        let metric = format!("{}_accuracy", head.name);
        append_history(
            &out.join("history.csv"),
            &[
                HistoryRow::new(cfg.probe.epochs, "probe_train", &metric, result.train_accuracy),
                HistoryRow::new(cfg.probe.epochs, "probe_eval", &metric, result.test_accuracy),
            ],
        )?;
    }
    Ok(result)
}

pub fn cmd_eval(inv: &Invocation) -> Result<()> {
    let cfg = inv.load(Phase::Finetune)?;
    let dir = cfg
        .init
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs init.checkpoint".into()))?;
    let (clf, store, step) = load_classifier(dir)?;
    let (train, eval) = load_datasets(&cfg)?;
    let data = labeled(eval.unwrap_or(train), &clf.arch, AudioAugment::default())?;
    let views = inv.views.unwrap_or(cfg.views);
    let metrics = evaluate(&clf, &store, &data, views, 64)?;
    let mut rows = Vec::new();
    for (name, v) in &metrics.values {
        println!("{name} {v:.4}");
        rows.push(HistoryRow::new(step, &format!("eval_{views}view"), name, *v));
    }
    append_history(&inv.out.join("history.csv"), &rows)?;
    Ok(())
}

pub fn cmd_reconstruct(inv: &Invocation) -> Result<()> {
    let cfg = inv.load(Phase::Pretrain)?;
    let dir = cfg
        .init
        .as_ref()
        .ok_or_else(|| Error::Config("reconstruct needs init.checkpoint".into()))?;
    let (model, store, _) = load_pretrained(dir)?;
    let (train, eval) = load_datasets(&cfg)?;
    let data = PatchDataset::new(eval.unwrap_or(train), model.arch.audio, model.arch.video);
    if cfg.reconstruct_sample >= data.data.len() {
        return Err(Error::Config(format!(
            "reconstruct.sample {} out of range for {} samples",
            cfg.reconstruct_sample,
            data.data.len()
        )));
    }
    let batch = data.eval_batch(&[cfg.reconstruct_sample])?;
    let plans = model.make_plans(&batch, &cfg.objective, &mut rng(cfg.recipe.seed))?;
    let rows = reconstruction_rows(&model, &store, &batch, &plans, cfg.objective.standardize_targets)?;
    for path in write_reconstruction(&inv.out, &model, rows)? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

/// One grid point of a sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub name: String,
    pub config: RunConfig,
}

/// Encoder/decoder pairings of the pretraining-architecture ablation.
pub fn fusion_grid(cfg: &RunConfig) -> Vec<SweepPoint> {
    let mid = EncoderFusion::Mid {
        shared_layers: match cfg.arch.fusion.encoder {
            EncoderFusion::Mid { shared_layers } => shared_layers,
            _ => cfg.arch.encoder.layers.min(2),
        },
    };
    let pairs = [
        (EncoderFusion::Early, DecoderFusion::Shared),
        (EncoderFusion::Shared, DecoderFusion::Shared),
        (EncoderFusion::Separate, DecoderFusion::Shared),
        (mid, DecoderFusion::Shared),
        (mid, DecoderFusion::Early),
        (mid, DecoderFusion::Separate),
    ];
    pairs
        .iter()
        .map(|&(encoder, decoder)| {
            let mut c = cfg.clone();
            c.arch.fusion = FusionSpec { encoder, decoder };
            SweepPoint {
                name: format!("{}/{}", encoder.name(), decoder.name()),
                config: c,
            }
        })
        .collect()
}

/// Audio and video masking ratios of the masking-ratio ablation.
pub fn masking_grid(cfg: &RunConfig) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for video in [0.7, 0.9, 0.95] {
        for audio in [0.3, 0.5, 0.7, 0.8] {
            let mut c = cfg.clone();
            c.objective.alpha_audio = audio;
            c.objective.alpha_video = video;
            out.push(SweepPoint {
                name: format!("audio{audio}/video{video}"),
                config: c,
            });
        }
    }
    out
}

pub fn cmd_sweep(inv: &Invocation, grid: &str) -> Result<()> {
    let cfg = inv.load(Phase::Pretrain)?;
    let points = match grid {
        "fusion" => fusion_grid(&cfg),
        "masking" => masking_grid(&cfg),
        other => return Err(Error::Config(format!("unknown sweep grid {other:?}"))),
    };
    let (train, _) = load_datasets(&cfg)?;
    let mut lines = vec!["variant,final_loss,probe_accuracy".to_string()];
    for (i, p) in points.iter().enumerate() {
        p.config.arch.validate()?;
        let data = PatchDataset::new(train.clone(), p.config.arch.audio, p.config.arch.video);
        let dir = inv.out.join(format!("run{i:02}"));
        let (log, store) = run_pretrain(&p.config, &data, &dir)?;
        let probe = run_probe(&p.config, &p.config.arch, &store, None)?;
        let loss = log.losses.last().copied().unwrap_or(f64::NAN);
        println!("{:<24} loss {loss:.5} probe {:.4}", p.name, probe.test_accuracy);
        lines.push(format!("{},{loss},{}", p.name, probe.test_accuracy));
    }
    write_text(&inv.out.join("sweep.csv"), &(lines.join("\n") + "\n"))
}
