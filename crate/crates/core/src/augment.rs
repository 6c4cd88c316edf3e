//! Finetuning regularizers: SpecAugment, mixup, label smoothing and
//! stochastic depth.

use ndarray::{Array, Array2, Dimension};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::audio::LogMelSpectrogram;
use crate::error::{invalid, shape_err, Result};
use crate::nn::layer_drop_rate;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    /// Maximum time-mask width as a fraction of the frame count.
    pub max_time_fraction: f64,
    pub freq_masks: usize,
    pub max_freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            time_masks: 2,
            max_time_fraction: 0.1,
            freq_masks: 2,
            max_freq_width: 24,
        }
    }
}

/// A contiguous band `[start, start + width)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Band {
    pub start: usize,
    pub width: usize,
}

/// Replaces the given time rows and frequency columns with the mean of the
/// input grid.
pub fn mask_bands(values: &Array2<f32>, time: &[Band], freq: &[Band]) -> Result<Array2<f32>> {
    let (frames, bins) = values.dim();
    for b in time {
        if b.start + b.width > frames {
            return Err(invalid!("time band {b:?} exceeds {frames} frames"));
        }
    }
    for b in freq {
        if b.start + b.width > bins {
            return Err(invalid!("frequency band {b:?} exceeds {bins} bins"));
        }
    }
    let fill = values.mean().unwrap_or(0.0);
    let mut out = values.clone();
    for b in time {
        for t in b.start..b.start + b.width {
            out.row_mut(t).fill(fill);
        }
    }
    for b in freq {
        for f in b.start..b.start + b.width {
            out.column_mut(f).fill(fill);
        }
    }
    Ok(out)
}

fn random_bands(count: usize, max_width: usize, axis: usize, rng: &mut impl Rng) -> Vec<Band> {
    (0..count)
        .map(|_| {
            let width = rng.random_range(0..=max_width);
            let start = rng.random_range(0..=axis - width);
            Band { start, width }
        })
        .collect()
}

pub fn spec_augment(
    spec: &LogMelSpectrogram,
    config: &SpecAugmentConfig,
    rng: &mut impl Rng,
) -> Result<LogMelSpectrogram> {
    LogMelSpectrogram::new(spec_augment_grid(spec.values(), config, rng)?)
}

/// [`spec_augment`] on a `[time, freq]` grid of any size.
pub fn spec_augment_grid(values: &Array2<f32>, config: &SpecAugmentConfig, rng: &mut impl Rng) -> Result<Array2<f32>> {
    let (frames, bins) = values.dim();
    let max_time = (config.max_time_fraction * frames as f64).floor() as usize;
    if max_time > frames || config.max_freq_width > bins {
        return Err(invalid!(
            "mask widths ({max_time}, {}) exceed grid {frames}x{bins}",
            config.max_freq_width
        ));
    }
    let time = random_bands(config.time_masks, max_time, frames, rng);
    let freq = random_bands(config.freq_masks, config.max_freq_width, bins, rng);
    mask_bands(values, &time, &freq)
}

pub fn mixup_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(invalid!("mixup alpha must be positive, got {alpha}"));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid!("mixup alpha: {e}"))?;
    Ok(beta.sample(rng))
}

/// `lambda * a + (1 - lambda) * b`.
pub fn mix<D: Dimension>(a: &Array<f32, D>, b: &Array<f32, D>, lambda: f64) -> Result<Array<f32, D>> {
    if a.shape() != b.shape() {
        return Err(shape_err!("mixup shapes {:?} vs {:?}", a.shape(), b.shape()));
    }
    let l = lambda as f32;
    Ok(a * l + &(b * (1.0 - l)))
}

/// Mixed inputs and soft labels for one paired batch.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub audio: Option<Array2<f32>>,
    pub video: Option<Array2<f32>>,
    pub labels: Array2<f64>,
    pub lambda: f64,
}

/// Mixes two batches with one `lambda ~ Beta(alpha, alpha)`, applied to both
/// modalities and to the label distributions.
pub fn mixup(
    batch_a: (Option<&Array2<f32>>, Option<&Array2<f32>>),
    batch_b: (Option<&Array2<f32>>, Option<&Array2<f32>>),
    labels_a: &Array2<f64>,
    labels_b: &Array2<f64>,
    alpha: f64,
    rng: &mut impl Rng,
) -> Result<Mixed> {
    let lambda = mixup_lambda(alpha, rng)?;
    mix_with_lambda(batch_a, batch_b, labels_a, labels_b, lambda)
}

pub fn mix_with_lambda(
    batch_a: (Option<&Array2<f32>>, Option<&Array2<f32>>),
    batch_b: (Option<&Array2<f32>>, Option<&Array2<f32>>),
    labels_a: &Array2<f64>,
    labels_b: &Array2<f64>,
    lambda: f64,
) -> Result<Mixed> {
    let pair = |a: Option<&Array2<f32>>, b: Option<&Array2<f32>>| -> Result<Option<Array2<f32>>> {
        match (a, b) {
            (Some(a), Some(b)) => mix(a, b, lambda).map(Some),
            (None, None) => Ok(None),
            _ => Err(shape_err!("mixup batches carry different modalities")),
        }
    };
    if labels_a.dim() != labels_b.dim() {
        return Err(shape_err!("mixup label shapes differ"));
    }
    Ok(Mixed {
        audio: pair(batch_a.0, batch_b.0)?,
        video: pair(batch_a.1, batch_b.1)?,
        labels: labels_a * lambda + &(labels_b * (1.0 - lambda)),
        lambda,
    })
}

/// True class gets `1 - eps + eps / K`, every other class `eps / K`.
pub fn label_smooth(one_hot: &[f64], eps: f64) -> Vec<f64> {
    let k = one_hot.len() as f64;
    one_hot.iter().map(|&y| y * (1.0 - eps) + eps / k).collect()
}

pub fn smoothed_target(class: usize, classes: usize, eps: f64) -> Vec<f64> {
    let mut one_hot = vec![0.0; classes];
    one_hot[class] = 1.0;
    label_smooth(&one_hot, eps)
}

/// Per-sample residual-branch multipliers: 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn drop_path_factors(rate: f64, batch: usize, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..batch)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
        .collect()
}

/// Residual update `residual + branch` with the branch randomly dropped in
/// training. The drop probability ramps linearly with depth up to `rate`.
/// Evaluation is the identity on the residual sum.
pub fn stochastic_depth(
    branch: &Array2<f32>,
    residual: &Array2<f32>,
    rate: f64,
    layer_index: usize,
    num_layers: usize,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Array2<f32>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid!("stochastic depth rate {rate} outside [0, 1)"));
    }
    if branch.dim() != residual.dim() {
        return Err(shape_err!("branch and residual shapes differ"));
    }
    let p = layer_drop_rate(rate, layer_index, num_layers);
    if !training || p == 0.0 {
        return Ok(residual + branch);
    }
    let factor = drop_path_factors(p, 1, rng)[0] as f32;
    Ok(residual + &(branch * factor))
}
