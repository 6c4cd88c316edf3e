//! Frame sampling, RGB normalization and tubelet tokenization.

use ndarray::{s, Array2, Array4, Axis};
use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::tokens::{GridPos, GridShape, Modality, TokenSequence};

/// `[frames, height, width, 3]` RGB clip with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Array4<f32>,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: Array4<f32>, fps: f32) -> Result<Self> {
        if frames.dim().3 != 3 {
            return Err(shape_err!("expected 3 channels, got {}", frames.dim().3));
        }
        if frames.dim().0 == 0 {
            return Err(invalid!("clip has no frames"));
        }
        if let Some(v) = frames.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(invalid!("clip value {v} outside [-1, 1]"));
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Array4<f32> {
        &self.frames
    }

    pub fn into_frames(self) -> Array4<f32> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }
}

/// Maps `[0, 255]` to `[-1, 1]` via `v / 127.5 - 1`.
pub fn normalize_rgb(raw: &Array4<f32>, fps: f32) -> Result<VideoClip> {
    if let Some(v) = raw.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(invalid!("pixel value {v} outside [0, 255]"));
    }
    VideoClip::new(raw.mapv(|v| v / 127.5 - 1.0), fps)
}

pub fn normalize_u8(raw: &Array4<u8>, fps: f32) -> Result<VideoClip> {
    VideoClip::new(raw.mapv(|v| v as f32 / 127.5 - 1.0), fps)
}

pub fn denormalize_rgb(clip: &Array4<f32>) -> Array4<f32> {
    clip.mapv(|v| (v + 1.0) * 127.5)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Center,
}

/// Source frame indices for a clip of `count` frames taken from a video of
/// `total` frames. Longer videos use stride `total / count`; shorter videos
/// loop circularly.
pub fn frame_indices(total: usize, count: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(invalid!("frame count must be positive"));
    }
    if total == 0 {
        return Err(invalid!("video has no frames"));
    }
    if total < count {
        let start = match mode {
            SampleMode::Center => 0,
            SampleMode::Random => rng.random_range(0..total),
        };
        return Ok((0..count).map(|i| (start + i) % total).collect());
    }
    let stride = total / count;
    let span = (count - 1) * stride + 1;
    let slack = total - span;
    let start = match mode {
        SampleMode::Center => slack / 2,
        SampleMode::Random => rng.random_range(0..=slack),
    };
    Ok((0..count).map(|i| start + i * stride).collect())
}

pub fn sample_frames(video: &VideoClip, count: usize, mode: SampleMode, rng: &mut impl Rng) -> Result<VideoClip> {
    let idx = frame_indices(video.len(), count, mode, rng)?;
    Ok(VideoClip {
        frames: video.frames.select(Axis(0), &idx),
        fps: video.fps,
    })
}

/// Start frames of `views` temporal windows of `window` frames spread
/// evenly over `total` frames.
pub fn view_offsets(total: usize, window: usize, views: usize) -> Vec<usize> {
    let slack = total.saturating_sub(window);
    if views <= 1 {
        return vec![slack / 2];
    }
    (0..views)
        .map(|j| (j as f64 * slack as f64 / (views - 1) as f64).round() as usize)
        .collect()
}

/// Crops a `[crop_h, crop_w]` region at a random location covering a
/// random fraction of the frame area in `scale`, then resizes it
/// bilinearly back to the original resolution. Off by default in all
/// recipes.
pub fn random_resized_crop(clip: &VideoClip, scale: (f64, f64), rng: &mut impl Rng) -> VideoClip {
    let (t, h, w, c) = clip.frames.dim();
    let area = rng.random_range(scale.0..=scale.1).clamp(0.01, 1.0);
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let mut out = Array4::zeros((t, h, w, c));
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, (ch - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(ch - 1);
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, (cw - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(cw - 1);
            for f in 0..t {
                for k in 0..c {
                    let p = |yy: usize, xx: usize| clip.frames[[f, top + yy, left + xx, k]] as f64;
                    let v = p(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + p(y0, x1) * (1.0 - fy) * fx
                        + p(y1, x0) * fy * (1.0 - fx)
                        + p(y1, x1) * fy * fx;
                    out[[f, y, x, k]] = v as f32;
                }
            }
        }
    }
    VideoClip {
        frames: out,
        fps: clip.fps,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tubelet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Tubelet {
    pub const DEFAULT: Tubelet = Tubelet { t: 2, h: 16, w: 16 };

    /// Flattened RGB values per tubelet.
    pub fn width(&self) -> usize {
        self.t * self.h * self.w * 3
    }
}

impl Default for Tubelet {
    fn default() -> Self {
        Self::DEFAULT
    }
}

pub fn video_grid(frames: usize, height: usize, width: usize, tubelet: Tubelet) -> Result<GridShape> {
    if tubelet.t == 0 || tubelet.h == 0 || tubelet.w == 0 {
        return Err(shape_err!("zero tubelet size"));
    }
    if frames == 0
        || !frames.is_multiple_of(tubelet.t)
        || !height.is_multiple_of(tubelet.h)
        || !width.is_multiple_of(tubelet.w)
    {
        return Err(shape_err!(
            "clip {frames}x{height}x{width} not divisible into {}x{}x{} tubelets",
            tubelet.t,
            tubelet.h,
            tubelet.w
        ));
    }
    Ok(GridShape::new(
        frames / tubelet.t,
        height / tubelet.h,
        width / tubelet.w,
    ))
}

/// Splits a `[T, H, W, 3]` array into tubelets ordered time-major then
/// row-major spatially; each tubelet is flattened row-major over
/// `(dt, dh, dw, channel)`.
pub fn tubelet_tokenize_array(frames: &Array4<f32>, tubelet: Tubelet) -> Result<TokenSequence> {
    let (t, h, w, c) = frames.dim();
    if c != 3 {
        return Err(shape_err!("expected 3 channels, got {c}"));
    }
    let grid = video_grid(t, h, w, tubelet)?;
    let mut out = Array2::zeros((grid.len(), tubelet.width()));
    let positions = grid.positions();
    // Each (frame, row) of a tubelet is one run of `w * 3` values.
    let run = tubelet.w * 3;
    for (idx, p) in positions.iter().enumerate() {
        let mut row = out.row_mut(idx);
        let dst = row.as_slice_mut().expect("rows of a fresh array are contiguous");
        let mut at = 0;
        for dt in 0..tubelet.t {
            for dh in 0..tubelet.h {
                let src = frames.slice(s![
                    p.t * tubelet.t + dt,
                    p.h * tubelet.h + dh,
                    p.w * tubelet.w..(p.w + 1) * tubelet.w,
                    ..
                ]);
                let dst = &mut dst[at..at + run];
                match src.as_slice() {
                    Some(src) => dst.copy_from_slice(src),
                    None => dst.iter_mut().zip(src.iter()).for_each(|(d, &s)| *d = s),
                }
                at += run;
            }
        }
    }
    TokenSequence::new(out, positions, Modality::Video)
}

pub fn tubelet_tokenize(clip: &VideoClip, tubelet: Tubelet) -> Result<TokenSequence> {
    tubelet_tokenize_array(&clip.frames, tubelet)
}

/// Inverse of [`tubelet_tokenize_array`].
pub fn untokenize_tubelets(
    tokens: &Array2<f32>,
    frames: usize,
    height: usize,
    width: usize,
    tubelet: Tubelet,
) -> Result<Array4<f32>> {
    let grid = video_grid(frames, height, width, tubelet)?;
    if tokens.dim() != (grid.len(), tubelet.width()) {
        return Err(shape_err!(
            "expected {}x{} tubelets, got {:?}",
            grid.len(),
            tubelet.width(),
            tokens.dim()
        ));
    }
    let mut out = Array4::zeros((frames, height, width, 3));
    for idx in 0..grid.len() {
        let p: GridPos = grid.position(idx);
        let mut block = out.slice_mut(s![
            p.t * tubelet.t..(p.t + 1) * tubelet.t,
            p.h * tubelet.h..(p.h + 1) * tubelet.h,
            p.w * tubelet.w..(p.w + 1) * tubelet.w,
            ..
        ]);
        for (dst, &src) in block.iter_mut().zip(tokens.row(idx).iter()) {
            *dst = src;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn normalization_endpoints() {
        let raw = Array4::from_shape_vec(
            (1, 1, 3, 3),
            vec![0.0, 255.0, 127.5, 0.0, 0.0, 0.0, 255.0, 255.0, 255.0],
        )
        .unwrap();
        let clip = normalize_rgb(&raw, 25.0).unwrap();
        let f = clip.frames();
        assert_eq!(f[[0, 0, 0, 0]], -1.0);
        assert_eq!(f[[0, 0, 0, 1]], 1.0);
        assert_eq!(f[[0, 0, 0, 2]], 0.0);
    }

    #[test]
    fn normalization_rejects_out_of_range() {
        let raw = Array4::from_elem((1, 1, 1, 3), 256.0);
        assert!(matches!(normalize_rgb(&raw, 25.0), Err(crate::Error::InvalidInput(_))));
        let raw = Array4::from_elem((1, 1, 1, 3), -0.5);
        assert!(normalize_rgb(&raw, 25.0).is_err());
    }

    #[test]
    fn normalization_inverse_round_trip() {
        let mut r = rng();
        let raw = Array4::from_shape_fn((2, 4, 4, 3), |_| r.random_range(0.0f32..=255.0));
        let clip = normalize_rgb(&raw, 25.0).unwrap();
        let back = denormalize_rgb(clip.frames());
        for (a, b) in raw.iter().zip(back.iter()) {
            assert!((a - b).abs() / 255.0 < 1e-6);
        }
    }

    #[test]
    fn center_sampling_of_long_video() {
        let idx = frame_indices(64, 16, SampleMode::Center, &mut rng()).unwrap();
        assert_eq!(idx.len(), 16);
        assert!(idx.windows(2).all(|w| w[1] - w[0] == 4));
        let left = idx[0];
        let right = 63 - idx[15];
        assert!(left.abs_diff(right) <= 1, "margins {left} vs {right}");
    }

    #[test]
    fn identity_and_looping() {
        let idx = frame_indices(16, 16, SampleMode::Center, &mut rng()).unwrap();
        assert_eq!(idx, (0..16).collect::<Vec<_>>());

        for mode in [SampleMode::Center, SampleMode::Random] {
            let idx = frame_indices(8, 16, mode, &mut rng()).unwrap();
            let mut counts = [0usize; 8];
            for i in idx {
                counts[i] += 1;
            }
            assert!(counts.iter().all(|&c| c == 2));
        }
        assert!(frame_indices(8, 0, SampleMode::Center, &mut rng()).is_err());
    }

    #[test]
    fn random_sampling_is_seeded() {
        let a = frame_indices(100, 16, SampleMode::Random, &mut rng()).unwrap();
        let b = frame_indices(100, 16, SampleMode::Random, &mut rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tubelet_counts() {
        let clip = Array4::<f32>::zeros((16, 224, 224, 3));
        assert_eq!(tubelet_tokenize_array(&clip, Tubelet::DEFAULT).unwrap().len(), 1568);

        let clip = Array4::from_shape_fn((2, 16, 16, 3), |(t, h, w, c)| (t * 1000 + h * 50 + w * 3 + c) as f32);
        let toks = tubelet_tokenize_array(&clip, Tubelet::DEFAULT).unwrap();
        assert_eq!(toks.len(), 1);
        assert_eq!(toks.values.row(0).to_vec(), clip.iter().copied().collect::<Vec<_>>());
    }

    #[test]
    fn tubelet_order_matches_enumeration() {
        let clip = Array4::from_shape_fn((4, 32, 32, 3), |(t, h, w, c)| {
            ((t * 32 + h) * 32 + w) as f32 * 3.0 + c as f32
        });
        let toks = tubelet_tokenize_array(&clip, Tubelet::DEFAULT).unwrap();
        assert_eq!(toks.len(), 8);
        let mut n = 0;
        for ti in 0..2 {
            for hi in 0..2 {
                for wi in 0..2 {
                    assert_eq!(toks.positions[n], GridPos::new(ti, hi, wi));
                    let mut k = 0;
                    for dt in 0..2 {
                        for dh in 0..16 {
                            for dw in 0..16 {
                                for c in 0..3 {
                                    let v = clip[[ti * 2 + dt, hi * 16 + dh, wi * 16 + dw, c]];
                                    assert_eq!(toks.values[[n, k]], v);
                                    k += 1;
                                }
                            }
                        }
                    }
                    n += 1;
                }
            }
        }
    }

    #[test]
    fn non_divisible_is_shape_error() {
        let clip = Array4::<f32>::zeros((3, 32, 32, 3));
        assert!(matches!(
            tubelet_tokenize_array(&clip, Tubelet::DEFAULT),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn view_offsets_spread() {
        assert_eq!(view_offsets(32, 16, 4), vec![0, 5, 11, 16]);
        assert_eq!(view_offsets(16, 16, 4), vec![0, 0, 0, 0]);
        assert_eq!(view_offsets(32, 16, 1), vec![8]);
    }
}
