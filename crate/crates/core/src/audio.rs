//! Waveform to log-mel spectrogram, and spectrogram patch tokenization.
//!
//! The STFT uses a 400-sample (25 ms) Hamming window, a 160-sample (10 ms)
//! hop and a 512-point FFT. Input is zero-padded to a whole number of
//! seconds and reflect-padded by 120 samples on each side, which yields
//! exactly 100 frames per second. 128 triangular, area-normalized mel
//! filters cover 0 to 8 kHz.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use ndarray::{s, Array2};
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, shape_err, Result};
use crate::tokens::{GridPos, GridShape, Modality, TokenSequence};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const MEL_BINS: usize = 128;
pub const FRAMES_PER_SECOND: usize = 100;
pub const LOG_FLOOR: f64 = 1e-6;

const SIDE_PAD: usize = (WIN_LENGTH - HOP_LENGTH) / 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
}

impl Waveform {
    /// Mono samples at 16 kHz. No resampling is done.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(invalid!("sample rate {sample_rate} Hz, expected {SAMPLE_RATE} Hz"));
        }
        if samples.is_empty() {
            return Err(invalid!("empty waveform"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(invalid!("waveform contains non-finite samples"));
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn seconds(&self) -> usize {
        self.samples.len().div_ceil(SAMPLE_RATE as usize)
    }
}

/// `[time_frames, 128]` grid of log mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array2<f32>,
}

impl LogMelSpectrogram {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.ncols() != MEL_BINS {
            return Err(shape_err!(
                "spectrogram has {} bins, expected {MEL_BINS}",
                values.ncols()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("spectrogram contains non-finite values"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f32> {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Band edges in Hz: `MEL_BINS + 2` points evenly spaced on the mel scale.
pub fn mel_band_edges() -> Vec<f64> {
    let lo = hz_to_mel(0.0);
    let hi = hz_to_mel(SAMPLE_RATE as f64 / 2.0);
    (0..MEL_BINS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (MEL_BINS + 1) as f64))
        .collect()
}

/// Center frequency (Hz) of every mel filter.
pub fn mel_centers() -> Vec<f64> {
    mel_band_edges()[1..=MEL_BINS].to_vec()
}

/// `[N_FFT / 2 + 1, MEL_BINS]` filterbank matrix.
pub fn mel_filterbank() -> &'static Array2<f64> {
    static BANK: OnceLock<Array2<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let edges = mel_band_edges();
        let bins = N_FFT / 2 + 1;
        let mut bank = Array2::zeros((bins, MEL_BINS));
        for m in 0..MEL_BINS {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            for k in 0..bins {
                let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
                let w = if f >= lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f <= hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                bank[[k, m]] = w * norm;
            }
        }
        bank
    })
}

fn hamming() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..WIN_LENGTH)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / WIN_LENGTH as f64).cos())
            .collect()
    })
}

fn fft_plan() -> Arc<dyn Fft<f64>> {
    static PLAN: OnceLock<Arc<dyn Fft<f64>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT)).clone()
}

/// Zero-pads to whole seconds, then reflect-pads `SIDE_PAD` on both ends.
fn padded_signal(w: &Waveform) -> Vec<f64> {
    let total = w.seconds() * SAMPLE_RATE as usize;
    let mut x: Vec<f64> = w.samples.iter().map(|&v| v as f64).collect();
    x.resize(total, 0.0);
    let mut out = Vec::with_capacity(total + 2 * SIDE_PAD);
    out.extend((1..=SIDE_PAD).rev().map(|i| x[i]));
    out.extend_from_slice(&x);
    out.extend((1..=SIDE_PAD).map(|i| x[total - 1 - i]));
    out
}

/// Power spectrum frames `[frames, N_FFT / 2 + 1]` of the padded signal.
pub fn power_spectrogram(w: &Waveform) -> Array2<f64> {
    let x = padded_signal(w);
    let frames = w.seconds() * FRAMES_PER_SECOND;
    let bins = N_FFT / 2 + 1;
    let window = hamming();
    let fft = fft_plan();
    let mut out = Array2::zeros((frames, bins));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for f in 0..frames {
        let start = f * HOP_LENGTH;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WIN_LENGTH {
                Complex::new(x[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for k in 0..bins {
            out[[f, k]] = buf[k].norm_sqr();
        }
    }
    out
}

pub fn compute_log_mel(w: &Waveform) -> LogMelSpectrogram {
    let power = power_spectrogram(w);
    let mel = power.dot(mel_filterbank());
    let values = mel.mapv(|e| (e + LOG_FLOOR).ln() as f32);
    LogMelSpectrogram { values }
}

/// Patch extent on the spectrogram grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchSize {
    pub time: usize,
    pub freq: usize,
}

impl PatchSize {
    pub const DEFAULT: PatchSize = PatchSize { time: 16, freq: 16 };

    pub fn width(&self) -> usize {
        self.time * self.freq
    }
}

impl Default for PatchSize {
    fn default() -> Self {
        Self::DEFAULT
    }
}

pub fn audio_grid(frames: usize, bins: usize, patch: PatchSize) -> Result<GridShape> {
    if patch.time == 0 || patch.freq == 0 {
        return Err(shape_err!("zero patch size"));
    }
    if !frames.is_multiple_of(patch.time) || !bins.is_multiple_of(patch.freq) || frames == 0 || bins == 0 {
        return Err(shape_err!(
            "spectrogram {frames}x{bins} not divisible into {}x{} patches",
            patch.time,
            patch.freq
        ));
    }
    Ok(GridShape::new(frames / patch.time, bins / patch.freq, 1))
}

/// Splits a `[time, freq]` grid into non-overlapping patches ordered
/// row-major over (time patch, freq patch). Each patch is flattened
/// row-major over (time, freq).
pub fn patchify_grid(values: &Array2<f32>, patch: PatchSize) -> Result<TokenSequence> {
    let (frames, bins) = values.dim();
    let grid = audio_grid(frames, bins, patch)?;
    let mut out = Array2::zeros((grid.len(), patch.width()));
    let mut positions = Vec::with_capacity(grid.len());
    for ti in 0..grid.t {
        for fi in 0..grid.h {
            let idx = grid.index(GridPos::new(ti, fi, 0));
            let block = values.slice(s![
                ti * patch.time..(ti + 1) * patch.time,
                fi * patch.freq..(fi + 1) * patch.freq
            ]);
            for (dst, &src) in out.row_mut(idx).iter_mut().zip(block.iter()) {
                *dst = src;
            }
            positions.push(GridPos::new(ti, fi, 0));
        }
    }
    TokenSequence::new(out, positions, Modality::Audio)
}

pub fn patchify_spectrogram(s: &LogMelSpectrogram, patch: PatchSize) -> Result<TokenSequence> {
    patchify_grid(&s.values, patch)
}

/// Inverse of [`patchify_grid`].
pub fn unpatchify_grid(tokens: &Array2<f32>, frames: usize, bins: usize, patch: PatchSize) -> Result<Array2<f32>> {
    let grid = audio_grid(frames, bins, patch)?;
    if tokens.dim() != (grid.len(), patch.width()) {
        return Err(shape_err!(
            "expected {}x{} patches, got {:?}",
            grid.len(),
            patch.width(),
            tokens.dim()
        ));
    }
    let mut out = Array2::zeros((frames, bins));
    for idx in 0..grid.len() {
        let p = grid.position(idx);
        let mut block = out.slice_mut(s![
            p.t * patch.time..(p.t + 1) * patch.time,
            p.h * patch.freq..(p.h + 1) * patch.freq
        ]);
        for (dst, &src) in block.iter_mut().zip(tokens.row(idx).iter()) {
            *dst = src;
        }
    }
    Ok(out)
}

/// Circularly rotates the time axis: frame `t` moves to `(t + offset) mod T`.
pub fn time_shift(values: &Array2<f32>, offset: usize) -> Array2<f32> {
    let frames = values.nrows();
    if frames == 0 {
        return values.clone();
    }
    let mut out = Array2::zeros(values.dim());
    for t in 0..frames {
        out.row_mut((t + offset) % frames).assign(&values.row(t));
    }
    out
}

/// [`time_shift`] by an offset drawn uniformly from `0..T`.
pub fn random_time_shift(s: &LogMelSpectrogram, rng: &mut impl Rng) -> LogMelSpectrogram {
    let frames = s.frames();
    let offset = if frames == 0 { 0 } else { rng.random_range(0..frames) };
    LogMelSpectrogram {
        values: time_shift(&s.values, offset),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eight_seconds_gives_800_frames() {
        let w = Waveform::new(vec![0.1; 128_000], 16_000).unwrap();
        let s = compute_log_mel(&w);
        assert_eq!(s.values().dim(), (800, 128));
    }

    #[test]
    fn partial_second_is_padded_to_whole_seconds() {
        let w = Waveform::new(vec![0.1; 16_001], 16_000).unwrap();
        assert_eq!(compute_log_mel(&w).frames(), 200);
    }

    #[test]
    fn silence_is_constant_log_floor() {
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let s = compute_log_mel(&w);
        let expected = (LOG_FLOOR).ln() as f32;
        assert!(s.values().iter().all(|&v| v == expected));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            Waveform::new(vec![], 16_000),
            Err(crate::Error::InvalidInput(_))
        ));
        assert!(matches!(
            Waveform::new(vec![0.0; 10], 44_100),
            Err(crate::Error::InvalidInput(_))
        ));
    }

    #[test]
    fn filterbank_is_area_normalized() {
        let bank = mel_filterbank();
        assert_eq!(bank.dim(), (N_FFT / 2 + 1, MEL_BINS));
        let edges = mel_band_edges();
        assert!((edges[0]).abs() < 1e-9);
        assert!((edges[MEL_BINS + 1] - 8000.0).abs() < 1e-6);
    }

    #[test]
    fn patch_counts() {
        let s = LogMelSpectrogram::new(Array2::zeros((800, 128))).unwrap();
        assert_eq!(patchify_spectrogram(&s, PatchSize::DEFAULT).unwrap().len(), 400);

        let single = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f32);
        let t = patchify_grid(&single, PatchSize::DEFAULT).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.values.row(0).to_vec(), single.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn patch_order_matches_index_arithmetic() {
        let values = Array2::from_shape_fn((32, 128), |(i, j)| (i * 128 + j) as f32);
        let t = patchify_grid(&values, PatchSize::DEFAULT).unwrap();
        assert_eq!(t.len(), 16);
        for n in 0..16 {
            let (ti, fi) = (n / 8, n % 8);
            assert_eq!(t.positions[n], GridPos::new(ti, fi, 0));
            for k in 0..256 {
                let (dt, df) = (k / 16, k % 16);
                let expect = ((ti * 16 + dt) * 128 + fi * 16 + df) as f32;
                assert_eq!(t.values[[n, k]], expect);
            }
        }
    }

    #[test]
    fn non_divisible_is_shape_error() {
        let values = Array2::zeros((30, 128));
        assert!(matches!(
            patchify_grid(&values, PatchSize::DEFAULT),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn time_shift_cases() {
        let values = Array2::from_shape_fn((10, 128), |(i, j)| (i * 1000 + j) as f32);
        assert_eq!(time_shift(&values, 0), values);
        assert_eq!(time_shift(&values, 10), values);

        let mut single = Array2::zeros((10, 128));
        single.row_mut(5).fill(1.0);
        let shifted = time_shift(&single, 3);
        for t in 0..10 {
            let expect = if t == 8 { 1.0 } else { 0.0 };
            assert!(shifted.row(t).iter().all(|&v| v == expect));
        }

        let back = time_shift(&time_shift(&values, 7), 3);
        assert_eq!(back, values);
    }

    #[test]
    fn random_shift_preserves_frames() {
        let values = Array2::from_shape_fn((12, 128), |(i, j)| (i * 7 + j) as f32);
        let s = LogMelSpectrogram::new(values.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shifted = random_shift_frames(&random_time_shift(&s, &mut rng));
        let mut orig = random_shift_frames(&s);
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut got = shifted;
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(orig, got);
    }

    fn random_shift_frames(s: &LogMelSpectrogram) -> Vec<Vec<f32>> {
        s.values().outer_iter().map(|r| r.to_vec()).collect()
    }
}
