//! Dataset manifests, media decoding, the synthetic audiovisual generator
//! and batch assembly.
//!
//! A manifest is a CSV file with header `id,audio,video,labels`. Paths are
//! resolved relative to the manifest's directory. Audio is a 16-bit PCM
//! WAV file or a spectrogram blob (`.spec`); video is a directory of
//! numbered PNG/JPEG frames or a tensor blob (`.vblob`). Labels are
//! `;`-separated class indices, or `head=index` pairs for multi-head
//! datasets. Media are only read when a sample is first accessed.

use std::f64::consts::PI;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::{compute_log_mel, patchify_grid, time_shift, Waveform};
use crate::augment::{spec_augment_grid, SpecAugmentConfig};
use crate::error::{invalid, Error, Result};
use crate::finetune::{ClassifierSpec, Label};
use crate::model::{AudioInput, PatchBatch, VideoInput};
use crate::train::{LabeledSource, PatchSource};
use crate::video::{frame_indices, tubelet_tokenize_array, view_offsets, SampleMode};

pub const VIDEO_BLOB_MAGIC: [u8; 4] = *b"AVVB";
pub const SPEC_BLOB_MAGIC: [u8; 4] = *b"AVSG";
const VIDEO_HEADER: usize = 16;
const SPEC_HEADER: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub enum AudioRef {
    Wav(PathBuf),
    Spectrogram(PathBuf),
    /// `[time, bins]` log-mel values.
    Memory(Array2<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum VideoRef {
    FrameDir(PathBuf),
    Blob(PathBuf),
    /// `[T, H, W, 3]` values in `[-1, 1]`.
    Memory(Array4<f32>),
}

/// Labels as written in the manifest, before they are matched to heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelField {
    Indices(Vec<usize>),
    Named(Vec<(String, usize)>),
}

impl LabelField {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Self::Indices(Vec::new()));
        }
        let parts: Vec<&str> = s.split(';').map(str::trim).collect();
        if parts.iter().any(|p| p.contains('=')) {
            let mut named = Vec::with_capacity(parts.len());
            for p in parts {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| format!("label {p:?} mixes named and plain"))?;
                let idx = v.trim().parse().map_err(|_| format!("bad class index {v:?}"))?;
                let k = k.trim();
                if k.is_empty() {
                    return Err("empty head name".into());
                }
                if named.iter().any(|(n, _): &(String, usize)| n == k) {
                    return Err(format!("head {k} labelled twice"));
                }
                named.push((k.to_string(), idx));
            }
            Ok(Self::Named(named))
        } else {
            parts
                .iter()
                .map(|p| p.parse().map_err(|_| format!("bad class index {p:?}")))
                .collect::<std::result::Result<_, _>>()
                .map(Self::Indices)
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Self::Indices(v) => v.is_empty(),
            Self::Named(v) => v.is_empty(),
        }
    }

    /// Matches the field to a classifier's heads.
    pub fn resolve(&self, spec: &ClassifierSpec) -> std::result::Result<Label, String> {
        if spec.multilabel {
            return match self {
                Self::Indices(v) => {
                    let classes = spec.heads[0].classes;
                    if let Some(c) = v.iter().find(|&&c| c >= classes) {
                        return Err(format!("class {c} out of range for {classes} classes"));
                    }
                    Ok(Label::Multi(v.clone()))
                }
                Self::Named(_) => Err("multilabel datasets take plain class indices".into()),
            };
        }
        let classes = match self {
            Self::Indices(v) => {
                if v.len() != spec.heads.len() {
                    return Err(format!("{} labels for {} heads", v.len(), spec.heads.len()));
                }
                v.clone()
            }
            Self::Named(pairs) => spec
                .heads
                .iter()
                .map(|h| {
                    pairs
                        .iter()
                        .find(|(n, _)| *n == h.name)
                        .map(|(_, c)| *c)
                        .ok_or_else(|| format!("no label for head {}", h.name))
                })
                .collect::<std::result::Result<_, _>>()?,
        };
        for (c, h) in classes.iter().zip(&spec.heads) {
            if *c >= h.classes {
                return Err(format!(
                    "class {c} out of range for head {} ({} classes)",
                    h.name, h.classes
                ));
            }
        }
        Ok(Label::Classes(classes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub audio: Option<AudioRef>,
    pub video: Option<VideoRef>,
    pub labels: LabelField,
    /// Line in the manifest, counting the header as line 1. Zero for
    /// generated samples.
    pub row: usize,
}

/// Decoded media of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub audio: Option<Array2<f32>>,
    pub video: Option<Array4<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
}

fn audio_ref(field: &str, base: &Path) -> Option<AudioRef> {
    if field.is_empty() {
        return None;
    }
    let path = base.join(field);
    Some(if field.ends_with(".spec") {
        AudioRef::Spectrogram(path)
    } else {
        AudioRef::Wav(path)
    })
}

fn video_ref(field: &str, base: &Path) -> Option<VideoRef> {
    if field.is_empty() {
        return None;
    }
    let path = base.join(field);
    Some(if field.ends_with(".vblob") {
        VideoRef::Blob(path)
    } else {
        VideoRef::FrameDir(path)
    })
}

/// Parses manifest text; relative paths are joined to `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Manifest {
        row: 1,
        message: e.to_string(),
    })?;
    let expected = ["id", "audio", "video", "labels"];
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Manifest {
            row: 1,
            message: format!("header must be {}", expected.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = match &rec {
            Ok(r) => r.position().map_or(i + 2, |p| p.line() as usize),
            Err(e) => e.position().map_or(i + 2, |p| p.line() as usize),
        };
        let bad = |message: String| Error::Manifest { row, message };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 4 {
            return Err(bad(format!("expected 4 fields, found {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(bad("empty id".into()));
        }
        let audio = audio_ref(&rec[1], base);
        let video = video_ref(&rec[2], base);
        if audio.is_none() && video.is_none() {
            return Err(bad(format!("sample {id} has neither audio nor video")));
        }
        let labels = LabelField::parse(&rec[3]).map_err(bad)?;
        records.push(SampleRecord {
            id,
            audio,
            video,
            labels,
            row,
        });
    }
    Ok(Dataset { records })
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest {
        row: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Mono 16 kHz 16-bit PCM WAV bytes.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(|e| invalid!("wav: {e}"))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(invalid!("wav has {} channels, expected mono", spec.channels));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(invalid!("wav must be 16-bit PCM"));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| invalid!("wav: {e}"))?;
    Waveform::new(samples, spec.sample_rate)
}

pub fn encode_wav(samples: &[f32], path: &Path) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: crate::audio::SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.finalize().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Decodes a video blob: magic, then `T`, `H`, `W` as little-endian u32,
/// then `T*H*W*3` RGB bytes.
pub fn decode_video_blob(bytes: &[u8]) -> Result<Array4<u8>> {
    if bytes.len() < VIDEO_HEADER || bytes[..4] != VIDEO_BLOB_MAGIC {
        return Err(invalid!("not a video blob"));
    }
    let (t, h, w) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let len = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| invalid!("video blob dimensions overflow"))?;
    if t == 0 || h == 0 || w == 0 {
        return Err(invalid!("video blob has an empty dimension"));
    }
    let data = &bytes[VIDEO_HEADER..];
    if data.len() != len {
        return Err(invalid!("video blob holds {} bytes, header implies {len}", data.len()));
    }
    Ok(Array4::from_shape_vec((t, h, w, 3), data.to_vec()).expect("length checked"))
}

pub fn encode_video_blob(frames: &Array4<u8>) -> Vec<u8> {
    let (t, h, w, _) = frames.dim();
    let mut out = Vec::with_capacity(VIDEO_HEADER + frames.len());
    out.extend_from_slice(&VIDEO_BLOB_MAGIC);
    for v in [t, h, w] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(frames.iter());
    out
}

/// Decodes a spectrogram blob: magic, then frames and bins as
/// little-endian u32, then row-major little-endian f32 values.
pub fn decode_spectrogram_blob(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < SPEC_HEADER || bytes[..4] != SPEC_BLOB_MAGIC {
        return Err(invalid!("not a spectrogram blob"));
    }
    let (t, f) = (read_u32(bytes, 4) as usize, read_u32(bytes, 8) as usize);
    let data = &bytes[SPEC_HEADER..];
    let expected = t.checked_mul(f).and_then(|v| v.checked_mul(4));
    if t == 0 || f == 0 || expected != Some(data.len()) {
        return Err(invalid!("spectrogram blob size does not match {t}x{f}"));
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("spectrogram blob contains non-finite values"));
    }
    Ok(Array2::from_shape_vec((t, f), values).expect("length checked"))
}

pub fn encode_spectrogram_blob(values: &Array2<f32>) -> Vec<u8> {
    let (t, f) = values.dim();
    let mut out = Vec::with_capacity(SPEC_HEADER + values.len() * 4);
    out.extend_from_slice(&SPEC_BLOB_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(f as u32).to_le_bytes());
    for v in values.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Reads a directory of numbered PNG/JPEG frames in file-name order.
pub fn read_frame_dir(dir: &Path) -> Result<Array4<u8>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(invalid!("no frames in {}", dir.display()));
    }
    let mut frames: Vec<image::RgbImage> = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f).map_err(|e| invalid!("{}: {e}", f.display()))?.to_rgb8();
        if let Some(first) = frames.first() {
            if first.dimensions() != img.dimensions() {
                return Err(invalid!("{} has a different size from the first frame", f.display()));
            }
        }
        frames.push(img);
    }
    let (w, h) = frames[0].dimensions();
    let mut out = Array4::zeros((frames.len(), h as usize, w as usize, 3));
    for (t, img) in frames.iter().enumerate() {
        for (dst, &src) in out.slice_mut(s![t, .., .., ..]).iter_mut().zip(img.as_raw()) {
            *dst = src;
        }
    }
    Ok(out)
}

/// Bilinear resize of every frame to `height` x `width`.
pub fn resize_frames(frames: &Array4<u8>, height: usize, width: usize) -> Array4<u8> {
    let (t, h, w, _) = frames.dim();
    if (h, w) == (height, width) {
        return frames.clone();
    }
    let mut out = Array4::zeros((t, height, width, 3));
    for f in 0..t {
        let raw: Vec<u8> = frames.slice(s![f, .., .., ..]).iter().copied().collect();
        let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("frame buffer size");
        let resized = image::imageops::resize(&img, width as u32, height as u32, image::imageops::FilterType::Triangle);
        for (dst, &src) in out.slice_mut(s![f, .., .., ..]).iter_mut().zip(resized.as_raw()) {
            *dst = src;
        }
    }
    out
}

fn to_unit(frames: &Array4<u8>) -> Array4<f32> {
    frames.mapv(|v| v as f32 / 127.5 - 1.0)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Decodes the media of sample `i`. Missing or unreadable files are
    /// reported against the sample's manifest row.
    pub fn load(&self, i: usize) -> Result<LoadedSample> {
        let rec = self
            .records
            .get(i)
            .ok_or_else(|| invalid!("sample {i} out of range for {} samples", self.records.len()))?;
        let fail = |path: &Path, what: String| Error::Manifest {
            row: rec.row,
            message: format!("{}: {what}", path.display()),
        };
        let read = |path: &Path| fs::read(path).map_err(|e| fail(path, e.to_string()));
        let audio = match &rec.audio {
            None => None,
            Some(AudioRef::Memory(a)) => Some(a.clone()),
            Some(AudioRef::Wav(p)) => {
                let w = decode_wav(&read(p)?).map_err(|e| fail(p, e.to_string()))?;
                Some(compute_log_mel(&w).into_values())
            }
            Some(AudioRef::Spectrogram(p)) => {
                Some(decode_spectrogram_blob(&read(p)?).map_err(|e| fail(p, e.to_string()))?)
            }
        };
        let video = match &rec.video {
            None => None,
            Some(VideoRef::Memory(v)) => Some(v.clone()),
            Some(VideoRef::Blob(p)) => Some(to_unit(
                &decode_video_blob(&read(p)?).map_err(|e| fail(p, e.to_string()))?,
            )),
            Some(VideoRef::FrameDir(p)) => {
                if !p.is_dir() {
                    return Err(fail(p, "frame directory not found".into()));
                }
                Some(to_unit(&read_frame_dir(p).map_err(|e| fail(p, e.to_string()))?))
            }
        };
        Ok(LoadedSample { audio, video })
    }

    pub fn labels(&self, spec: &ClassifierSpec) -> Result<Vec<Label>> {
        self.records
            .iter()
            .map(|r| {
                r.labels.resolve(spec).map_err(|message| Error::Manifest {
                    row: r.row,
                    message: format!("sample {}: {message}", r.id),
                })
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Correlated audiovisual classes for desk-scale experiments.
///
/// Class `c` moves a bright square across a dark field with velocity
/// direction `2 pi c / K`, and draws two pulsing stripes in mel band `c`
/// of the spectrogram. The square's start and the pulse phase are random
/// per sample, scaled by `jitter`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    /// Probability that the audio class equals the video class.
    pub correlation: f64,
    pub samples: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub spec_frames: usize,
    pub mel_bins: usize,
    pub square: usize,
    /// Pixels per frame.
    pub speed: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Scale of the per-sample random start position and pulse phase.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            correlation: 0.9,
            samples: 512,
            frames: 8,
            height: 32,
            width: 32,
            spec_frames: 32,
            mel_bins: 128,
            square: 8,
            speed: 2.0,
            noise: 0.1,
            jitter: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(invalid!("correlation {} outside [0, 1]", self.correlation));
        }
        if self.classes < 1 {
            return Err(invalid!("need at least one class"));
        }
        if self.mel_bins < 2 * self.classes {
            return Err(invalid!(
                "{} mel bins cannot hold {} class bands",
                self.mel_bins,
                self.classes
            ));
        }
        if self.square == 0 || self.square > self.height.min(self.width) {
            return Err(invalid!("square side {} does not fit the frame", self.square));
        }
        if self.frames == 0 || self.spec_frames == 0 {
            return Err(invalid!("clip lengths must be positive"));
        }
        if !(self.noise >= 0.0 && self.jitter >= 0.0) {
            return Err(invalid!("noise and jitter must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub audio: Array2<f32>,
    pub video: Array4<f32>,
    pub audio_class: usize,
    pub video_class: usize,
}

/// Sample `index` of the synthetic set; depends only on `config` and
/// `index`.
pub fn synth_sample(config: &SynthConfig, index: usize) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let k = config.classes;
    let video_class = rng.random_range(0..k);
    let audio_class = if k < 2 || rng.random_bool(config.correlation) {
        video_class
    } else {
        let other = rng.random_range(0..k - 1);
        if other >= video_class {
            other + 1
        } else {
            other
        }
    };
    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let noise_at = |rng: &mut ChaCha8Rng| if config.noise > 0.0 { noise.sample(rng) } else { 0.0 };

    let (h, w) = (config.height as f64, config.width as f64);
    let start_y = config.jitter * rng.random_range(0.0..h);
    let start_x = config.jitter * rng.random_range(0.0..w);
    let angle = 2.0 * PI * video_class as f64 / k as f64;
    let (vy, vx) = (config.speed * angle.sin(), config.speed * angle.cos());
    let mut video = Array4::from_elem((config.frames, config.height, config.width, 3), -1.0f32);
    for t in 0..config.frames {
        let y0 = (start_y + vy * t as f64).rem_euclid(h).floor() as usize;
        let x0 = (start_x + vx * t as f64).rem_euclid(w).floor() as usize;
        for dy in 0..config.square {
            for dx in 0..config.square {
                let (y, x) = ((y0 + dy) % config.height, (x0 + dx) % config.width);
                video.slice_mut(s![t, y, x, ..]).fill(1.0);
            }
        }
    }

    let band = config.mel_bins / k;
    let base = audio_class * band;
    let stripes = [base + band / 4, base + (3 * band) / 4];
    let period = 8usize;
    let phase = (config.jitter * rng.random_range(0.0..period as f64)).floor() as usize;
    let mut audio = Array2::<f32>::zeros((config.spec_frames, config.mel_bins));
    for t in 0..config.spec_frames {
        if ((t + phase) / (period / 2)).is_multiple_of(2) {
            for &b in &stripes {
                audio[[t, b]] = 1.0;
                if b + 1 < config.mel_bins {
                    audio[[t, b + 1]] = 1.0;
                }
            }
        }
    }

    if config.noise > 0.0 {
        video.mapv_inplace(|v| (v as f64 + noise_at(&mut rng)).clamp(-1.0, 1.0) as f32);
        audio.mapv_inplace(|v| (v as f64 + noise_at(&mut rng)) as f32);
    }
    SynthSample {
        audio,
        video,
        audio_class,
        video_class,
    }
}

/// In-memory synthetic dataset labelled with the video class.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(Dataset, Vec<SynthSample>)> {
    config.validate()?;
    let samples: Vec<SynthSample> = (0..config.samples).map(|i| synth_sample(config, i)).collect();
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| SampleRecord {
            id: format!("synth{i:05}"),
            audio: Some(AudioRef::Memory(s.audio.clone())),
            video: Some(VideoRef::Memory(s.video.clone())),
            labels: LabelField::Indices(vec![s.video_class]),
            row: 0,
        })
        .collect();
    Ok((Dataset { records }, samples))
}

/// Index lists for one epoch. Shuffling uses `rng`, normally the
/// epoch-seeded generator from [`crate::train::epoch_rng`].
pub fn make_batches(
    len: usize,
    batch_size: usize,
    shuffle: bool,
    rng: &mut ChaCha8Rng,
    drop_last: bool,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size.max(1))
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect()
}

/// How a clip is cut from a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Crop {
    Random,
    /// View `index` of `count` evenly spread temporal windows.
    View {
        index: usize,
        count: usize,
    },
}

/// Train-time augmentation of spectrograms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AudioAugment {
    pub spec_augment: Option<SpecAugmentConfig>,
    pub time_shift: bool,
}

/// Cuts `frames` spectrogram frames, looping shorter inputs.
pub fn crop_audio(values: &Array2<f32>, frames: usize, crop: Crop, rng: &mut impl Rng) -> Array2<f32> {
    let total = values.nrows();
    let start = match crop {
        Crop::Random if total > frames => rng.random_range(0..=total - frames),
        Crop::Random => 0,
        Crop::View { index, count } => view_offsets(total, frames, count)[index.min(count.max(1) - 1)],
    };
    let rows: Vec<usize> = (0..frames).map(|i| (start + i) % total).collect();
    values.select(Axis(0), &rows)
}

/// Samples `frames` video frames with uniform stride.
pub fn crop_video(clip: &Array4<f32>, frames: usize, crop: Crop, rng: &mut impl Rng) -> Result<Array4<f32>> {
    let total = clip.dim().0;
    let idx = match crop {
        Crop::Random => frame_indices(total, frames, SampleMode::Random, rng)?,
        Crop::View { index, count } => {
            let base = frame_indices(total, frames, SampleMode::Center, rng)?;
            if total < frames || count <= 1 {
                base
            } else {
                let stride = total / frames;
                let span = (frames - 1) * stride + 1;
                let start = view_offsets(total, span, count)[index.min(count - 1)];
                (0..frames).map(|i| start + i * stride).collect()
            }
        }
    };
    Ok(clip.select(Axis(0), &idx))
}

/// Fits a decoded video to the model's spatial size.
fn fit_spatial(clip: Array4<f32>, height: usize, width: usize) -> Array4<f32> {
    let (_, h, w, _) = clip.dim();
    if (h, w) == (height, width) {
        return clip;
    }
    let bytes = clip.mapv(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
    to_unit(&resize_frames(&bytes, height, width))
}

/// Turns datasets into model-ready patch batches.
#[derive(Clone, Debug)]
pub struct PatchDataset {
    pub data: Dataset,
    pub audio: Option<AudioInput>,
    pub video: Option<VideoInput>,
    pub augment: AudioAugment,
    /// Required for labelled use.
    pub labels: Option<Vec<Label>>,
}

impl PatchDataset {
    pub fn new(data: Dataset, audio: Option<AudioInput>, video: Option<VideoInput>) -> Self {
        Self {
            data,
            audio,
            video,
            augment: AudioAugment::default(),
            labels: None,
        }
    }

    pub fn with_labels(mut self, spec: &ClassifierSpec) -> Result<Self> {
        self.labels = Some(self.data.labels(spec)?);
        Ok(self)
    }

    pub fn with_augment(mut self, augment: AudioAugment) -> Self {
        self.augment = augment;
        self
    }

    /// Patch rows of sample `i` under `crop`.
    pub fn sample_patches(
        &self,
        i: usize,
        crop: Crop,
        augment: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Option<Array2<f32>>, Option<Array2<f32>>)> {
        let loaded = self.data.load(i)?;
        let row = self.data.records[i].row;
        let missing = |m: &str| Error::Manifest {
            row,
            message: format!("sample {} has no {m}", self.data.records[i].id),
        };
        let audio = match self.audio {
            None => None,
            Some(input) => {
                let spec = loaded.audio.as_ref().ok_or_else(|| missing("audio"))?;
                if spec.ncols() != input.bins {
                    return Err(invalid!(
                        "spectrogram has {} bins, model expects {}",
                        spec.ncols(),
                        input.bins
                    ));
                }
                let mut grid = crop_audio(spec, input.frames, crop, rng);
                if augment {
                    if self.augment.time_shift {
                        let offset = rng.random_range(0..input.frames);
                        grid = time_shift(&grid, offset);
                    }
                    if let Some(cfg) = &self.augment.spec_augment {
                        grid = spec_augment_grid(&grid, cfg, rng)?;
                    }
                }
                Some(patchify_grid(&grid, input.patch)?.values)
            }
        };
        let video = match self.video {
            None => None,
            Some(input) => {
                let clip = loaded.video.ok_or_else(|| missing("video"))?;
                let clip = fit_spatial(crop_video(&clip, input.frames, crop, rng)?, input.height, input.width);
                Some(tubelet_tokenize_array(&clip, input.tubelet)?.values)
            }
        };
        Ok((audio, video))
    }

    fn collate(&self, indices: &[usize], crop: Crop, augment: bool, rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
        let mut audio = Vec::with_capacity(indices.len());
        let mut video = Vec::with_capacity(indices.len());
        for &i in indices {
            let (a, v) = self.sample_patches(i, crop, augment, rng)?;
            audio.extend(a);
            video.extend(v);
        }
        let stack = |parts: Vec<Array2<f32>>| -> Option<Array2<f32>> {
            if parts.is_empty() {
                return None;
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Some(ndarray::concatenate(Axis(0), &views).expect("equal patch widths"))
        };
        Ok(PatchBatch {
            audio: stack(audio),
            video: stack(video),
            batch: indices.len(),
        })
    }

    fn labels_for(&self, indices: &[usize]) -> Result<Vec<Label>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| invalid!("dataset has no resolved labels"))?;
        Ok(indices.iter().map(|&i| labels[i].clone()).collect())
    }

    /// Deterministic single-view batch, for evaluation and feature
    /// extraction.
    pub fn eval_batch(&self, indices: &[usize]) -> Result<PatchBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.collate(indices, Crop::View { index: 0, count: 1 }, false, &mut rng)
    }
}

impl PatchSource for PatchDataset {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn patches(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<PatchBatch> {
        self.collate(indices, Crop::Random, false, rng)
    }
}

impl LabeledSource for PatchDataset {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn train_batch(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<(PatchBatch, Vec<Label>)> {
        Ok((
            self.collate(indices, Crop::Random, true, rng)?,
            self.labels_for(indices)?,
        ))
    }

    fn eval_views(&self, indices: &[usize], views: usize) -> Result<(Vec<PatchBatch>, Vec<Label>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batches = (0..views.max(1))
            .map(|index| {
                self.collate(
                    indices,
                    Crop::View {
                        index,
                        count: views.max(1),
                    },
                    false,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((batches, self.labels_for(indices)?))
    }
}
