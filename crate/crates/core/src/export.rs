//! Reconstruction images: one PNG grid per modality with the original
//! input, the masked input and the reconstruction stacked vertically.
//! Unmasked patches of the reconstruction show the original input.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array4};

use crate::audio::unpatchify_grid;
use crate::error::{invalid, Error, Result};
use crate::masking::MaskingPlan;
use crate::model::{AudioInput, AvMae, PatchBatch, VideoInput};
use crate::objectives::{paste_visible, BatchPlans};
use crate::params::ParamStore;
use crate::tokens::Modality;
use crate::video::untokenize_tubelets;

/// Colour of masked patches in the second row.
pub const MASK_GRAY: Rgb<u8> = Rgb([128, 128, 128]);

/// Original, masked and pasted reconstruction patch rows of one sample.
/// Masked patches of the middle entry are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionRows {
    pub original: Array2<f32>,
    pub masked: Array2<f32>,
    pub reconstruction: Array2<f32>,
}

impl ReconstructionRows {
    pub fn new(original: &Array2<f32>, prediction: &Array2<f32>, plan: &MaskingPlan) -> Result<Self> {
        let mut masked = original.clone();
        for &k in plan.masked() {
            masked.row_mut(k).fill(f32::NAN);
        }
        Ok(Self {
            original: original.clone(),
            masked,
            reconstruction: paste_visible(original, prediction, plan)?,
        })
    }

    fn rows(&self) -> [&Array2<f32>; 3] {
        [&self.original, &self.masked, &self.reconstruction]
    }
}

/// Undoes per-patch target standardization using the original patches'
/// statistics.
pub fn destandardize(prediction: &Array2<f32>, original: &Array2<f32>) -> Array2<f32> {
    let mut out = prediction.clone();
    for (mut p, o) in out.outer_iter_mut().zip(original.outer_iter()) {
        let n = o.len().max(1) as f32;
        let mean = o.sum() / n;
        let var = o.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let std = (var + crate::objectives::STANDARDIZE_EPS).sqrt();
        p.mapv_inplace(|v| v * std + mean);
    }
    out
}

fn gray(v: f32, lo: f32, hi: f32) -> Rgb<u8> {
    if v.is_nan() {
        return MASK_GRAY;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let p = (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8;
    Rgb([p, p, p])
}

/// Spectrogram rows with time running left to right and low frequencies
/// at the bottom, scaled to the original's value range.
pub fn render_audio(rows: &ReconstructionRows, input: AudioInput) -> Result<RgbImage> {
    let grids: Vec<Array2<f32>> = rows
        .rows()
        .iter()
        .map(|r| unpatchify_grid(r, input.frames, input.bins, input.patch))
        .collect::<Result<_>>()?;
    let finite = grids[0].iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (w, h) = (input.frames, input.bins);
    let mut img = RgbImage::new(w as u32, (3 * h) as u32);
    for (r, grid) in grids.iter().enumerate() {
        for t in 0..w {
            for f in 0..h {
                let y = r * h + (h - 1 - f);
                img.put_pixel(t as u32, y as u32, gray(grid[[t, f]], lo, hi));
            }
        }
    }
    Ok(img)
}

fn to_byte(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Video rows with frames laid out left to right.
pub fn render_video(rows: &ReconstructionRows, input: VideoInput) -> Result<RgbImage> {
    let clips: Vec<Array4<f32>> = rows
        .rows()
        .iter()
        .map(|r| untokenize_tubelets(r, input.frames, input.height, input.width, input.tubelet))
        .collect::<Result<_>>()?;
    let (t, h, w) = (input.frames, input.height, input.width);
    let mut img = RgbImage::new((t * w) as u32, (3 * h) as u32);
    for (r, clip) in clips.iter().enumerate() {
        for f in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let px = if clip[[f, y, x, 0]].is_nan() {
                        MASK_GRAY
                    } else {
                        Rgb([0, 1, 2].map(|c| to_byte(clip[[f, y, x, c]])))
                    };
                    img.put_pixel((f * w + x) as u32, (r * h + y) as u32, px);
                }
            }
        }
    }
    Ok(img)
}

/// Rows for each modality of a single-sample batch.
pub fn reconstruction_rows(
    model: &AvMae,
    store: &ParamStore<f32>,
    batch: &PatchBatch,
    plans: &BatchPlans,
    standardized: bool,
) -> Result<(Option<ReconstructionRows>, Option<ReconstructionRows>)> {
    if batch.batch != 1 {
        return Err(invalid!("reconstruction export takes one sample, got {}", batch.batch));
    }
    let (pa, pv) = model.reconstruct(store, batch, plans)?;
    let build = |m: Modality, pred: Option<Array2<f32>>| -> Result<Option<ReconstructionRows>> {
        match (batch.get(m), pred) {
            (Some(orig), Some(pred)) => {
                let pred = if standardized { destandardize(&pred, orig) } else { pred };
                Ok(Some(ReconstructionRows::new(orig, &pred, &plans.get(m)[0])?))
            }
            _ => Ok(None),
        }
    };
    Ok((build(Modality::Audio, pa)?, build(Modality::Video, pv)?))
}

/// Writes `audio.png` and `video.png` (for the modalities present) into
/// `dir` and returns their paths.
pub fn write_reconstruction(
    dir: &Path,
    model: &AvMae,
    rows: (Option<ReconstructionRows>, Option<ReconstructionRows>),
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let save = |img: RgbImage, name: &str| -> Result<PathBuf> {
        let path = dir.join(name);
        img.save(&path)
            .map_err(|e| Error::io(path.clone(), std::io::Error::other(e)))?;
        Ok(path)
    };
    if let (Some(r), Some(input)) = (rows.0, model.arch.audio) {
        written.push(save(render_audio(&r, input)?, "audio.png")?);
    }
    if let (Some(r), Some(input)) = (rows.1, model.arch.video) {
        written.push(save(render_video(&r, input)?, "video.png")?);
    }
    Ok(written)
}
