//! Optimizers, learning-rate schedules, recipes and the pretraining and
//! finetuning loops.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{mix_with_lambda, mixup_lambda, SpecAugmentConfig};
use crate::autodiff::Graph;
use crate::checkpoint::{sha256_hex, HistoryRow};
use crate::data::make_batches;
use crate::error::{config_err, Error, Result};
use crate::finetune::{
    accuracy, average_views, joint_accuracy, label_targets, mean_average_precision, multi_head_loss, Classifier, Label,
};
use crate::model::{AvMae, ObjectiveConfig, PatchBatch};
use crate::nn::ForwardCtx;
use crate::params::ParamStore;

/// Non-finite losses in a row before training is abandoned.
pub const DIVERGENCE_PATIENCE: usize = 20;

pub trait Optimizer {
    /// Updates every parameter that has a gradient. `factors[i]` scales the
    /// learning rate of parameter `i`; a zero factor freezes it.
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Array2<f32>>], lr: f64, factors: &[f64]);
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    t: Vec<u64>,
    m: Vec<Option<Array2<f32>>>,
    v: Vec<Option<Array2<f32>>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            t: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Array2<f32>>], lr: f64, factors: &[f64]) {
        let n = store.len();
        self.t.resize(n, 0);
        self.m.resize(n, None);
        self.v.resize(n, None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (Some(g), f) = (&grads[i], factors.get(i).copied().unwrap_or(1.0)) else {
                continue;
            };
            if f == 0.0 {
                continue;
            }
            self.t[i] += 1;
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let c1 = 1.0 - self.beta1.powi(self.t[i] as i32);
            let c2 = 1.0 - self.beta2.powi(self.t[i] as i32);
            let step = (lr * f) as f32;
            let (c1, c2, eps, wd) = (c1 as f32, c2 as f32, self.eps as f32, self.weight_decay as f32);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= step * (mhat / (vhat.sqrt() + eps) + wd * *p);
            });
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buf: Vec<Option<Array2<f32>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buf: Vec::new(),
        }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Array2<f32>>], lr: f64, factors: &[f64]) {
        self.buf.resize(store.len(), None);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let (Some(g), f) = (&grads[i], factors.get(i).copied().unwrap_or(1.0)) else {
                continue;
            };
            if f == 0.0 {
                continue;
            }
            let (mu, wd, step) = (self.momentum as f32, self.weight_decay as f32, (lr * f) as f32);
            let buf = self.buf[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(buf).and(g).for_each(|p, b, &g| {
                *b = mu * *b + g + wd * *p;
                *p -= step * *b;
            });
        }
    }
}

pub fn global_norm(grads: &[Option<Array2<f32>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Array2<f32>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, weight_decay: f64 },
    Sgd { momentum: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn build(&self) -> Box<dyn Optimizer> {
        match *self {
            Self::Adam {
                beta1,
                beta2,
                weight_decay,
            } => Box::new(Adam::new(beta1, beta2, weight_decay)),
            Self::Sgd { momentum, weight_decay } => Box::new(Sgd::new(momentum, weight_decay)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regularizers {
    pub mixup_alpha: Option<f64>,
    pub drop_path: f64,
    pub label_smoothing: f64,
    pub spec_augment: Option<SpecAugmentConfig>,
    pub time_shift: bool,
}

impl Regularizers {
    pub fn none() -> Self {
        Self {
            mixup_alpha: None,
            drop_path: 0.0,
            label_smoothing: 0.0,
            spec_augment: None,
            time_shift: false,
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            mixup_alpha: Some(0.5),
            drop_path: 0.3,
            label_smoothing: 0.3,
            spec_augment: Some(SpecAugmentConfig::default()),
            time_shift: true,
        }
    }
}

/// Finetuning datasets with published recipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneDataset {
    VggSound,
    EpicKitchens,
    AudioSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecipe {
    pub phase: Phase,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Batch size at which `base_lr` applies; the peak rate scales linearly.
    pub reference_batch: usize,
    pub epochs: f64,
    pub warmup_epochs: f64,
    pub grad_clip: Option<f64>,
    pub layerwise_decay: Option<f64>,
    /// Train only the heads.
    pub freeze_encoder: bool,
    pub regularizers: Regularizers,
    pub seed: u64,
}

impl TrainRecipe {
    pub fn pretrain_default() -> Self {
        Self {
            phase: Phase::Pretrain,
            optimizer: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.95,
                weight_decay: 0.0,
            },
            base_lr: 3e-4,
            batch_size: 512,
            reference_batch: 512,
            epochs: 800.0,
            warmup_epochs: 40.0,
            grad_clip: None,
            layerwise_decay: None,
            freeze_encoder: false,
            regularizers: Regularizers::none(),
            seed: 0,
        }
    }

    /// Inpainting is less stable, so its default rate is halved.
    pub fn pretrain_inpainting() -> Self {
        Self {
            base_lr: 1.5e-4,
            ..Self::pretrain_default()
        }
    }

    pub fn finetune_default(dataset: FinetuneDataset, audio_only: bool) -> Self {
        let (base_lr, batch_size) = match dataset {
            FinetuneDataset::VggSound => (0.8, 64),
            FinetuneDataset::EpicKitchens => (1.2, 64),
            FinetuneDataset::AudioSet => (1.6, 128),
        };
        let mut regularizers = Regularizers::finetune_default();
        if audio_only && dataset != FinetuneDataset::VggSound {
            regularizers.mixup_alpha = Some(1.25);
        }
        // The VGGSound recipe has no random time shifting.
        regularizers.time_shift = dataset != FinetuneDataset::VggSound;
        Self {
            phase: Phase::Finetune,
            optimizer: OptimizerKind::Sgd {
                momentum: 0.9,
                weight_decay: 0.0,
            },
            base_lr,
            batch_size,
            reference_batch: batch_size,
            epochs: 50.0,
            warmup_epochs: 2.5,
            grad_clip: Some(1.0),
            layerwise_decay: Some(0.75),
            freeze_encoder: false,
            regularizers,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.reference_batch == 0 {
            return Err(config_err!("batch sizes must be positive"));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs) {
            return Err(config_err!(
                "warmup epochs {} must be below epochs {}",
                self.warmup_epochs,
                self.epochs
            ));
        }
        if !(self.base_lr >= 0.0) {
            return Err(config_err!("learning rate must be non-negative"));
        }
        if let Some(d) = self.layerwise_decay {
            if !(d > 0.0 && d <= 1.0) {
                return Err(config_err!("layerwise decay {d} outside (0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.regularizers.drop_path) {
            return Err(config_err!("stochastic depth rate outside [0, 1)"));
        }
        Ok(())
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / self.reference_batch as f64
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> Schedule {
        let spe = steps_per_epoch as f64;
        Schedule {
            peak: self.peak_lr(),
            warmup_steps: (self.warmup_epochs * spe).round() as usize,
            total_steps: (self.epochs * spe).round() as usize,
        }
    }

    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        self.schedule(steps_per_epoch).lr_at(step)
    }

    /// Canonical text form; its digest identifies the recipe in checkpoints.
    pub fn describe(&self) -> String {
        format!("{self:?}")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.describe().as_bytes())[..16].to_string()
    }
}

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps).max(1) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Learning-rate multipliers for an `layers`-deep encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerwiseFactors {
    pub head: f64,
    /// Indexed by layer, 0 = closest to the input.
    pub layers: Vec<f64>,
    pub embedding: f64,
}

/// Head gets 1, layer `i` gets `decay^(L - i)`, embeddings `decay^(L + 1)`.
pub fn layerwise_lr_factors(layers: usize, decay: f64) -> LayerwiseFactors {
    LayerwiseFactors {
        head: 1.0,
        layers: (0..layers).map(|i| decay.powi((layers - i) as i32)).collect(),
        embedding: decay.powi(layers as i32 + 1),
    }
}

fn layer_index(name: &str) -> Option<usize> {
    name.split('.')
        .find_map(|part| part.strip_prefix("layer").and_then(|r| r.parse().ok()))
}

/// Multiplier for a classifier parameter, from its name.
pub fn param_lr_factor(name: &str, factors: &LayerwiseFactors) -> f64 {
    if let Some(i) = layer_index(name) {
        return factors.layers.get(i).copied().unwrap_or(factors.head);
    }
    if name.contains(".embed.") {
        return factors.embedding;
    }
    factors.head
}

/// Per-parameter multipliers for a finetuning recipe.
pub fn classifier_lr_factors(classifier: &Classifier, store: &ParamStore<f32>, recipe: &TrainRecipe) -> Vec<f64> {
    let head: Vec<_> = classifier.head_params();
    let lw = recipe
        .layerwise_decay
        .map(|d| layerwise_lr_factors(classifier.arch.encoder.layers, d));
    store
        .iter()
        .map(|(id, name, _)| {
            if head.contains(&id) {
                1.0
            } else if recipe.freeze_encoder {
                0.0
            } else {
                lw.as_ref().map_or(1.0, |f| param_lr_factor(name, f))
            }
        })
        .collect()
}

/// Steps in one epoch, counting a final partial batch.
pub fn steps_per_epoch(len: usize, batch_size: usize) -> usize {
    len.div_ceil(batch_size.max(1))
}

/// Random generator for one epoch's shuffle.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Unlabeled training data for pretraining.
pub trait PatchSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Random crops are drawn from `rng`.
    fn patches(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<PatchBatch>;
}

/// Labeled data for finetuning and evaluation.
pub trait LabeledSource {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Training batches may be augmented with `rng`.
    fn train_batch(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<(PatchBatch, Vec<Label>)>;
    /// `views` deterministic evaluation crops of the same samples.
    fn eval_views(&self, indices: &[usize], views: usize) -> Result<(Vec<PatchBatch>, Vec<Label>)>;
}

/// Consecutive non-finite loss counter.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    consecutive: usize,
}

impl DivergenceGuard {
    /// Records `loss`; errors once `DIVERGENCE_PATIENCE` non-finite values
    /// arrive in a row. Returns whether the step should be applied.
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<bool> {
        if loss.is_finite() {
            self.consecutive = 0;
            return Ok(true);
        }
        self.consecutive += 1;
        if self.consecutive >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                step,
                consecutive: self.consecutive,
            });
        }
        Ok(false)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub history: Vec<HistoryRow>,
    /// Loss of every step.
    pub losses: Vec<f64>,
    pub steps: usize,
}

/// Options shared by both loops.
#[derive(Default)]
pub struct LoopOptions<'a> {
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Called after every `every_epochs` epochs with (epoch, step, store).
    pub every_epochs: usize,
    #[allow(clippy::type_complexity)]
    pub on_epoch: Option<Box<dyn FnMut(usize, usize, &ParamStore<f32>) -> Result<()> + 'a>>,
}

fn total_steps(recipe: &TrainRecipe, spe: usize, max_steps: Option<usize>) -> usize {
    let planned = (recipe.epochs * spe as f64).round() as usize;
    max_steps.map_or(planned, |m| m.min(planned))
}

/// Masked-autoencoder pretraining.
pub fn pretrain(
    model: &AvMae,
    store: &mut ParamStore<f32>,
    data: &dyn PatchSource,
    objective: &ObjectiveConfig,
    recipe: &TrainRecipe,
    mut options: LoopOptions<'_>,
) -> Result<TrainLog> {
    recipe.validate()?;
    model.check_objective(objective)?;
    if data.is_empty() {
        return Err(config_err!("pretraining dataset is empty"));
    }
    let spe = steps_per_epoch(data.len(), recipe.batch_size);
    let schedule = recipe.schedule(spe);
    let total = total_steps(recipe, spe, options.max_steps);
    let mut opt = recipe.optimizer.build();
    let factors = vec![1.0; store.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut guard = DivergenceGuard::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let batches = make_batches(
            data.len(),
            recipe.batch_size,
            true,
            &mut epoch_rng(recipe.seed, epoch),
            false,
        );
        for idx in batches {
            if step >= total {
                break;
            }
            let batch = data.patches(&idx, &mut rng)?;
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(
                recipe.regularizers.drop_path,
                ChaCha8Rng::seed_from_u64(rng_u64(&mut rng)),
            );
            let (terms, _) = model.loss(&mut g, store, &mut ctx, &batch, objective, &mut rng)?;
            let loss = g.scalar(terms.total) as f64;
            log.losses.push(loss);
            log.history.push(HistoryRow::new(step, "train", "loss", loss));
            for (name, v) in [("loss_audio", terms.audio), ("loss_video", terms.video)] {
                if let Some(v) = v {
                    log.history
                        .push(HistoryRow::new(step, "train", name, g.scalar(v) as f64));
                }
            }
            if guard.observe(step, loss)? {
                let mut grads = g.backward(terms.total).params(store.len());
                if let Some(c) = recipe.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                opt.step(store, &grads, schedule.lr_at(step), &factors);
            }
            step += 1;
        }
        epoch += 1;
        if let Some(cb) = options.on_epoch.as_mut() {
            if options.every_epochs > 0 && (epoch % options.every_epochs == 0 || step >= total) {
                cb(epoch, step, store)?;
            }
        }
    }
    log.steps = step;
    Ok(log)
}

fn rng_u64(rng: &mut ChaCha8Rng) -> u64 {
    use rand::Rng;
    rng.random()
}

/// Evaluation metrics for a classifier on `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// `(metric name, value)`; top-1 accuracy per head, `action` for two
    /// heads, `mAP` in multilabel mode.
    pub values: Vec<(String, f64)>,
}

impl EvalMetrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

pub fn evaluate(
    classifier: &Classifier,
    store: &ParamStore<f32>,
    data: &dyn LabeledSource,
    views: usize,
    batch_size: usize,
) -> Result<EvalMetrics> {
    let spec = &classifier.arch.spec;
    let mut outputs: Vec<Vec<Array2<f32>>> = Vec::new();
    let mut labels = Vec::new();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (view_batches, l) = data.eval_views(chunk, views.max(1))?;
        let per_view = view_batches
            .iter()
            .map(|b| classifier.predict(store, b))
            .collect::<Result<Vec<_>>>()?;
        outputs.push(average_views(&per_view, spec.multilabel)?);
        labels.extend(l);
    }
    let heads = spec.heads.len();
    let stacked: Vec<Array2<f32>> = (0..heads)
        .map(|h| {
            let views: Vec<_> = outputs.iter().map(|o| o[h].view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("same head width")
        })
        .collect();
    let mut values = Vec::new();
    if spec.multilabel {
        let targets = label_targets(spec, &labels, 0.0)?;
        values.push(("mAP".to_string(), mean_average_precision(&stacked[0], &targets[0])));
    } else {
        let per_sample: Vec<Vec<usize>> = labels
            .iter()
            .map(|l| match l {
                Label::Classes(c) => Ok(c.clone()),
                Label::Multi(_) => Err(Error::InvalidInput("multilabel sample for a softmax classifier".into())),
            })
            .collect::<Result<_>>()?;
        for (h, head) in spec.heads.iter().enumerate() {
            let y: Vec<usize> = per_sample.iter().map(|c| c[h]).collect();
            values.push((format!("{}_accuracy", head.name), accuracy(&stacked[h], &y)));
        }
        if heads == 2 {
            values.push(("action_accuracy".to_string(), joint_accuracy(&stacked, &per_sample)));
        }
    }
    Ok(EvalMetrics { values })
}

/// Supervised finetuning with the recipe's regularizers, gradient
/// clipping and layerwise learning-rate decay. Evaluates on `eval` after
/// every epoch.
pub fn finetune(
    classifier: &Classifier,
    store: &mut ParamStore<f32>,
    train: &dyn LabeledSource,
    eval: Option<&dyn LabeledSource>,
    recipe: &TrainRecipe,
    mut options: LoopOptions<'_>,
) -> Result<TrainLog> {
    recipe.validate()?;
    if train.is_empty() {
        return Err(config_err!("finetuning dataset is empty"));
    }
    let spec = &classifier.arch.spec;
    let spe = steps_per_epoch(train.len(), recipe.batch_size);
    let schedule = recipe.schedule(spe);
    let total = total_steps(recipe, spe, options.max_steps);
    let factors = classifier_lr_factors(classifier, store, recipe);
    let mut opt = recipe.optimizer.build();
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    let mut guard = DivergenceGuard::default();
    let mut log = TrainLog::default();
    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        let batches = make_batches(
            train.len(),
            recipe.batch_size,
            true,
            &mut epoch_rng(recipe.seed, epoch),
            false,
        );
        for idx in batches {
            if step >= total {
                break;
            }
            let (batch, labels) = train.train_batch(&idx, &mut rng)?;
            let mut targets = label_targets(spec, &labels, recipe.regularizers.label_smoothing)?;
            let batch = match recipe.regularizers.mixup_alpha {
                Some(alpha) if batch.batch > 1 => {
                    let lambda = mixup_lambda(alpha, &mut rng)?;
                    let (mixed, mixed_targets) = mixup_batch(&batch, &targets, lambda)?;
                    targets = mixed_targets;
                    mixed
                }
                _ => batch,
            };
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(
                recipe.regularizers.drop_path,
                ChaCha8Rng::seed_from_u64(rng_u64(&mut rng)),
            );
            let logits = classifier.forward(&mut g, store, &mut ctx, &batch)?;
            let loss_var = multi_head_loss(&mut g, &logits, &targets, spec.multilabel)?;
            let loss = g.scalar(loss_var) as f64;
            log.losses.push(loss);
            log.history.push(HistoryRow::new(step, "train", "loss", loss));
            if guard.observe(step, loss)? {
                let mut grads = g.backward(loss_var).params(store.len());
                if let Some(c) = recipe.grad_clip {
                    clip_grad_norm(&mut grads, c);
                }
                opt.step(store, &grads, schedule.lr_at(step), &factors);
            }
            step += 1;
        }
        epoch += 1;
        if let Some(eval) = eval {
            let metrics = evaluate(classifier, store, eval, 1, recipe.batch_size)?;
            for (name, v) in metrics.values {
                log.history.push(HistoryRow::new(step, "eval", &name, v));
            }
        }
        if let Some(cb) = options.on_epoch.as_mut() {
            if options.every_epochs > 0 && (epoch % options.every_epochs == 0 || step >= total) {
                cb(epoch, step, store)?;
            }
        }
    }
    log.steps = step;
    Ok(log)
}

/// Mixes each sample with the sample in reversed batch order.
pub fn mixup_batch(batch: &PatchBatch, targets: &[Array2<f64>], lambda: f64) -> Result<(PatchBatch, Vec<Array2<f64>>)> {
    let n = batch.batch;
    let partner: Vec<usize> = (0..n).rev().collect();
    let permute_rows = |x: &Array2<f32>| {
        let per = x.nrows() / n.max(1);
        let rows: Vec<usize> = partner.iter().flat_map(|&p| p * per..(p + 1) * per).collect();
        x.select(ndarray::Axis(0), &rows)
    };
    let pa = batch.audio.as_ref().map(permute_rows);
    let pv = batch.video.as_ref().map(permute_rows);
    let mut out_targets = Vec::with_capacity(targets.len());
    let mut mixed = None;
    for t in targets {
        let tp = t.select(ndarray::Axis(0), &partner);
        let m = mix_with_lambda(
            (batch.audio.as_ref(), batch.video.as_ref()),
            (pa.as_ref(), pv.as_ref()),
            t,
            &tp,
            lambda,
        )?;
        out_targets.push(m.labels);
        mixed.get_or_insert((m.audio, m.video));
    }
    let (audio, video) = mixed.ok_or_else(|| Error::InvalidInput("mixup needs at least one head".into()))?;
    Ok((PatchBatch { audio, video, batch: n }, out_targets))
}
