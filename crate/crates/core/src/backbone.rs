//! Token projection, positional embeddings and the audiovisual encoder in
//! its four fusion variants (early, separate, shared, mid).

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2};
use rand::Rng;

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{BlockDims, ForwardCtx, LayerNorm, Linear, Stack};
use crate::params::{cast, ParamId, ParamStore, Scalar};
use crate::tokens::{GridShape, Modality, TokenSequence};

pub use crate::tokens::GridPos;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
}

impl TransformerConfig {
    pub const BASE: Self = Self {
        hidden: 768,
        layers: 12,
        heads: 12,
        mlp: 3072,
    };
    pub const LARGE: Self = Self {
        hidden: 1024,
        layers: 24,
        heads: 16,
        mlp: 4096,
    };

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(config_err!("transformer needs at least one layer"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(config_err!(
                "hidden {} not divisible by {} heads",
                self.hidden,
                self.heads
            ));
        }
        if self.mlp == 0 {
            return Err(config_err!("mlp dimension must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> BlockDims {
        BlockDims {
            hidden: self.hidden,
            heads: self.heads,
            mlp: self.mlp,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderFusion {
    Early,
    Separate,
    Shared,
    /// `shared_layers` joint layers after `L - shared_layers` separate ones.
    Mid {
        shared_layers: usize,
    },
}

impl EncoderFusion {
    pub const DEFAULT_MID: EncoderFusion = EncoderFusion::Mid { shared_layers: 2 };

    pub fn name(&self) -> &'static str {
        match self {
            EncoderFusion::Early => "early",
            EncoderFusion::Separate => "separate",
            EncoderFusion::Shared => "shared",
            EncoderFusion::Mid { .. } => "mid",
        }
    }

    /// True when the encoder lets audio and video tokens attend to each other.
    pub fn is_cross_modal(&self) -> bool {
        matches!(self, EncoderFusion::Early | EncoderFusion::Mid { .. })
    }
}

impl fmt::Display for EncoderFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderFusion {
    Early,
    Separate,
    Shared,
}

impl DecoderFusion {
    pub fn name(&self) -> &'static str {
        match self {
            DecoderFusion::Early => "early",
            DecoderFusion::Separate => "separate",
            DecoderFusion::Shared => "shared",
        }
    }
}

impl fmt::Display for DecoderFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecoderFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(DecoderFusion::Early),
            "separate" => Ok(DecoderFusion::Separate),
            "shared" => Ok(DecoderFusion::Shared),
            other => Err(config_err!("unknown decoder fusion {other:?}")),
        }
    }
}

/// Encoder and decoder fusion variants of a pretraining model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub encoder: EncoderFusion,
    pub decoder: DecoderFusion,
}

impl FusionSpec {
    pub fn parse_encoder(name: &str, shared_layers: usize) -> Result<EncoderFusion> {
        match name {
            "early" => Ok(EncoderFusion::Early),
            "separate" => Ok(EncoderFusion::Separate),
            "shared" => Ok(EncoderFusion::Shared),
            "mid" => Ok(EncoderFusion::Mid { shared_layers }),
            other => Err(config_err!("unknown encoder fusion {other:?}")),
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if let EncoderFusion::Mid { shared_layers } = self.encoder {
            if shared_layers == 0 || shared_layers > layers {
                return Err(config_err!(
                    "mid fusion needs 1 <= S <= L, got S = {shared_layers}, L = {layers}"
                ));
            }
        }
        Ok(())
    }

    /// Separate encoding followed by separate decoding trains two unrelated
    /// single-modality autoencoders.
    pub fn is_uncoupled(&self) -> bool {
        self.encoder == EncoderFusion::Separate && self.decoder == DecoderFusion::Separate
    }
}

/// Fixed sinusoidal embeddings for every cell of a patch grid. The hidden
/// size is split evenly across the grid axes (time and frequency for audio;
/// time, row and column for video); leftover dimensions stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTable {
    grid: GridShape,
    rows: Array2<f64>,
}

fn sincos(out: &mut [f64], pos: f64) {
    let half = out.len() / 2;
    for j in 0..half {
        let omega = 1.0 / 10000f64.powf(j as f64 / half as f64);
        out[j] = (pos * omega).sin();
        out[half + j] = (pos * omega).cos();
    }
}

impl PositionalTable {
    pub fn new(modality: Modality, grid: GridShape, dim: usize) -> Self {
        Self::with_time_reference(modality, grid, dim, grid.t)
    }

    /// Table whose time axis is stretched to span the `reference_t` time
    /// extent the model was trained with, i.e. a linear interpolation of
    /// that table along time.
    pub fn with_time_reference(modality: Modality, grid: GridShape, dim: usize, reference_t: usize) -> Self {
        let axes = match modality {
            Modality::Audio => 2,
            Modality::Video => 3,
        };
        let per_axis = 2 * (dim / (2 * axes));
        let time_scale = if grid.t > 1 && reference_t > 1 && reference_t != grid.t {
            (reference_t - 1) as f64 / (grid.t - 1) as f64
        } else {
            1.0
        };
        let mut rows = Array2::zeros((grid.len(), dim));
        for idx in 0..grid.len() {
            let p = grid.position(idx);
            let coords = [p.t as f64 * time_scale, p.h as f64, p.w as f64];
            let mut row = vec![0.0; dim];
            for (axis, &c) in coords.iter().enumerate().take(axes) {
                sincos(&mut row[axis * per_axis..(axis + 1) * per_axis], c);
            }
            for (k, v) in row.into_iter().enumerate() {
                rows[[idx, k]] = v;
            }
        }
        Self { grid, rows }
    }

    pub fn from_rows(grid: GridShape, rows: Array2<f64>) -> Self {
        assert_eq!(grid.len(), rows.nrows());
        Self { grid, rows }
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, idx: usize) -> ndarray::ArrayView1<'_, f64> {
        self.rows.row(idx)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// Rows for the given grid indices, as a graph constant.
    pub fn gather<F: Scalar>(&self, indices: &[usize]) -> Array2<F> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (mut row, &i) in out.outer_iter_mut().zip(indices) {
            for (dst, &src) in row.iter_mut().zip(self.rows.row(i)) {
                *dst = cast(src);
            }
        }
        out
    }
}

/// Geometry of one modality's token grid as seen by a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenGeometry {
    pub modality: Modality,
    pub grid: GridShape,
    /// Flattened patch width before projection.
    pub patch_width: usize,
}

impl TokenGeometry {
    pub fn tokens(&self) -> usize {
        self.grid.len()
    }
}

/// Patch projection plus fixed positional embedding for one modality.
#[derive(Clone, Debug)]
pub struct TokenEmbed {
    pub geometry: TokenGeometry,
    pub proj: Linear,
    pub positions: PositionalTable,
}

impl TokenEmbed {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        geometry: TokenGeometry,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), geometry.patch_width, hidden, rng),
            positions: PositionalTable::new(geometry.modality, geometry.grid, hidden),
            geometry,
        }
    }

    /// Projects `patches` (rows at grid indices `indices`) and adds their
    /// positional embeddings.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &ForwardCtx,
        patches: Array2<F>,
        indices: &[usize],
    ) -> Var {
        assert_eq!(patches.nrows(), indices.len());
        let x = g.constant(patches);
        let y = self.proj.forward(g, store, ctx, x);
        let pos = g.constant(self.positions.gather(indices));
        g.add(y, pos)
    }
}

/// Concatenates sequences sample by sample: row block `b` of the result is
/// `[parts[0] block b ; parts[1] block b ; ...]`.
pub fn concat_sequences<F: Scalar>(g: &mut Graph<F>, parts: &[(Var, SeqLayout)]) -> (Var, SeqLayout) {
    let batch = parts[0].1.batch;
    assert!(parts.iter().all(|(_, l)| l.batch == batch), "batch mismatch");
    let len: usize = parts.iter().map(|(_, l)| l.len).sum();
    let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
    let stacked = g.concat_rows(&vars);
    let mut offsets = Vec::with_capacity(parts.len());
    let mut acc = 0;
    for (_, l) in parts {
        offsets.push(acc);
        acc += l.rows();
    }
    let mut idx = Vec::with_capacity(batch * len);
    for b in 0..batch {
        for ((_, l), &off) in parts.iter().zip(&offsets) {
            idx.extend(off + b * l.len..off + (b + 1) * l.len);
        }
    }
    (g.gather_rows(stacked, idx), SeqLayout::new(batch, len))
}

/// Inverse of [`concat_sequences`].
pub fn split_sequences<F: Scalar>(g: &mut Graph<F>, x: Var, layout: SeqLayout, lens: &[usize]) -> Vec<Var> {
    assert_eq!(lens.iter().sum::<usize>(), layout.len);
    let mut out = Vec::with_capacity(lens.len());
    let mut start = 0;
    for &len in lens {
        let idx = (0..layout.batch)
            .flat_map(|b| b * layout.len + start..b * layout.len + start + len)
            .collect();
        out.push(g.gather_rows(x, idx));
        start += len;
    }
    out
}

/// Takes rows `range` of every sample.
pub fn slice_sequences<F: Scalar>(g: &mut Graph<F>, x: Var, layout: SeqLayout, range: std::ops::Range<usize>) -> Var {
    let idx = (0..layout.batch)
        .flat_map(|b| b * layout.len + range.start..b * layout.len + range.end)
        .collect();
    g.gather_rows(x, idx)
}

/// Kept tokens of one modality, ready for the encoder.
pub struct EncoderInput<F> {
    /// `[batch * kept, patch_width]` raw patches.
    pub patches: Array2<F>,
    /// Grid index of every row.
    pub indices: Vec<usize>,
    pub layout: SeqLayout,
}

impl<F: Scalar> EncoderInput<F> {
    /// All tokens of every sample, unmasked.
    pub fn full(patches: Array2<F>, tokens: usize) -> Self {
        assert_eq!(patches.nrows() % tokens.max(1), 0);
        let batch = patches.nrows() / tokens.max(1);
        let indices = (0..batch).flat_map(|_| 0..tokens).collect();
        Self {
            patches,
            indices,
            layout: SeqLayout::new(batch, tokens),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Tower {
    pub(crate) stack: Stack,
    pub(crate) norm: Option<LayerNorm>,
}

impl Tower {
    pub(crate) fn params(&self) -> Vec<ParamId> {
        let mut ids = self.stack.params();
        if let Some(n) = &self.norm {
            ids.extend(n.params());
        }
        ids
    }
}

#[derive(Clone, Debug)]
enum Towers {
    Early(Tower),
    Separate {
        audio: Option<Tower>,
        video: Option<Tower>,
    },
    Shared(Tower),
    Mid {
        audio: Option<Tower>,
        video: Option<Tower>,
        joint: Tower,
    },
}

/// Audiovisual transformer encoder.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub fusion: EncoderFusion,
    pub audio_embed: Option<TokenEmbed>,
    pub video_embed: Option<TokenEmbed>,
    towers: Towers,
}

impl Encoder {
    /// Parameters are registered under `prefix` (normally `encoder`):
    /// `{prefix}.{audio,video}_embed`, and stacks `{prefix}.joint`,
    /// `{prefix}.audio`, `{prefix}.video` or `{prefix}.shared`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        config: TransformerConfig,
        fusion: EncoderFusion,
        audio: Option<TokenGeometry>,
        video: Option<TokenGeometry>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        FusionSpec {
            encoder: fusion,
            decoder: DecoderFusion::Shared,
        }
        .validate(config.layers)?;
        if audio.is_none() && video.is_none() {
            return Err(config_err!("encoder needs at least one modality"));
        }
        let d = config.hidden;
        let l = config.layers;
        let audio_embed = audio.map(|geo| TokenEmbed::new(store, &format!("{prefix}.audio_embed"), geo, d, rng));
        let video_embed = video.map(|geo| TokenEmbed::new(store, &format!("{prefix}.video_embed"), geo, d, rng));
        let dims = config.dims();
        let mut tower = |store: &mut ParamStore<F>, name: &str, first: usize, count: usize, norm: bool| Tower {
            stack: Stack::new(store, &format!("{prefix}.{name}"), dims, first, count, l, rng),
            norm: norm.then(|| LayerNorm::new(store, &format!("{prefix}.{name}.norm"), d)),
        };
        let towers = match fusion {
            EncoderFusion::Early => Towers::Early(tower(store, "joint", 0, l, true)),
            EncoderFusion::Shared => Towers::Shared(tower(store, "shared", 0, l, true)),
            EncoderFusion::Separate => Towers::Separate {
                audio: audio.map(|_| tower(store, "audio", 0, l, true)),
                video: video.map(|_| tower(store, "video", 0, l, true)),
            },
            EncoderFusion::Mid { shared_layers } => {
                let sep = l - shared_layers;
                Towers::Mid {
                    audio: audio.map(|_| tower(store, "audio", 0, sep, false)),
                    video: video.map(|_| tower(store, "video", 0, sep, false)),
                    joint: tower(store, "joint", sep, shared_layers, true),
                }
            }
        };
        Ok(Self {
            config,
            fusion,
            audio_embed,
            video_embed,
            towers,
        })
    }

    pub fn embed(&self, modality: Modality) -> Option<&TokenEmbed> {
        match modality {
            Modality::Audio => self.audio_embed.as_ref(),
            Modality::Video => self.video_embed.as_ref(),
        }
    }

    pub fn has(&self, modality: Modality) -> bool {
        self.embed(modality).is_some()
    }

    /// Projects pre-projection patches to `hidden` and adds positional
    /// embeddings, outside any training graph.
    pub fn project_tokens(&self, store: &ParamStore<f32>, patches: &TokenSequence) -> Result<TokenSequence> {
        let embed = self
            .embed(patches.modality)
            .ok_or_else(|| Error::InvalidInput(format!("encoder has no {} input", patches.modality)))?;
        if patches.width() != embed.geometry.patch_width {
            return Err(shape_err!(
                "{} patches have width {}, expected {}",
                patches.modality,
                patches.width(),
                embed.geometry.patch_width
            ));
        }
        let grid = embed.geometry.grid;
        let mut indices = Vec::with_capacity(patches.len());
        for p in &patches.positions {
            if p.t >= grid.t || p.h >= grid.h || p.w >= grid.w {
                return Err(shape_err!("position {p:?} outside grid {grid:?}"));
            }
            indices.push(grid.index(*p));
        }
        let mut g = Graph::new();
        let ctx = ForwardCtx::eval();
        let out = embed.forward(&mut g, store, &ctx, patches.values.clone(), &indices);
        TokenSequence::new(g.value(out).clone(), patches.positions.clone(), patches.modality)
    }

    pub(crate) fn run_tower<F: Scalar>(
        tower: &Tower,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        x: Var,
        layout: SeqLayout,
    ) -> Var {
        let x = tower.stack.forward(g, store, ctx, x, layout);
        match &tower.norm {
            Some(n) => n.forward(g, store, ctx, x),
            None => x,
        }
    }

    pub(crate) fn run_joint<F: Scalar>(
        tower: &Tower,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        a: Option<(Var, SeqLayout)>,
        v: Option<(Var, SeqLayout)>,
    ) -> (Option<Var>, Option<Var>) {
        match (a, v) {
            (Some(a), Some(v)) => {
                let (x, layout) = concat_sequences(g, &[a, v]);
                let y = Self::run_tower(tower, g, store, ctx, x, layout);
                let parts = split_sequences(g, y, layout, &[a.1.len, v.1.len]);
                (Some(parts[0]), Some(parts[1]))
            }
            (Some(a), None) => (Some(Self::run_tower(tower, g, store, ctx, a.0, a.1)), None),
            (None, Some(v)) => (None, Some(Self::run_tower(tower, g, store, ctx, v.0, v.1))),
            (None, None) => (None, None),
        }
    }

    /// Encodes the supplied tokens. Output sequences keep the input lengths.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        audio: Option<EncoderInput<F>>,
        video: Option<EncoderInput<F>>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let mut embed = |m: Modality, input: Option<EncoderInput<F>>| -> Result<Option<(Var, SeqLayout)>> {
            let Some(input) = input else { return Ok(None) };
            let e = self
                .embed(m)
                .ok_or_else(|| Error::InvalidInput(format!("encoder has no {m} input")))?;
            if input.patches.ncols() != e.geometry.patch_width {
                return Err(shape_err!(
                    "{m} patches have width {}, expected {}",
                    input.patches.ncols(),
                    e.geometry.patch_width
                ));
            }
            let layout = input.layout;
            Ok(Some((e.forward(g, store, ctx, input.patches, &input.indices), layout)))
        };
        let a = embed(Modality::Audio, audio)?;
        let v = embed(Modality::Video, video)?;

        Ok(match &self.towers {
            Towers::Early(t) => Self::run_joint(t, g, store, ctx, a, v),
            Towers::Shared(t) => (
                a.map(|(x, l)| Self::run_tower(t, g, store, ctx, x, l)),
                v.map(|(x, l)| Self::run_tower(t, g, store, ctx, x, l)),
            ),
            Towers::Separate { audio, video } => {
                let ea = match (a, audio) {
                    (Some((x, l)), Some(t)) => Some(Self::run_tower(t, g, store, ctx, x, l)),
                    _ => None,
                };
                let ev = match (v, video) {
                    (Some((x, l)), Some(t)) => Some(Self::run_tower(t, g, store, ctx, x, l)),
                    _ => None,
                };
                (ea, ev)
            }
            Towers::Mid { audio, video, joint } => {
                let a = match (a, audio) {
                    (Some((x, l)), Some(t)) => Some((Self::run_tower(t, g, store, ctx, x, l), l)),
                    _ => None,
                };
                let v = match (v, video) {
                    (Some((x, l)), Some(t)) => Some((Self::run_tower(t, g, store, ctx, x, l), l)),
                    _ => None,
                };
                Self::run_joint(joint, g, store, ctx, a, v)
            }
        })
    }
}

/// Copies `rows` of `src` (`[batch * len, d]` layout) into a new matrix;
/// used to pick kept patch rows before projection.
pub fn gather_rows<F: Scalar>(src: &Array2<f32>, rows: &[usize]) -> Array2<F> {
    let mut out = Array2::zeros((rows.len(), src.ncols()));
    for (mut dst, &r) in out.outer_iter_mut().zip(rows) {
        for (d, &s) in dst.iter_mut().zip(src.slice(s![r, ..])) {
            *d = cast(s as f64);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geo(modality: Modality, n: usize, width: usize) -> TokenGeometry {
        TokenGeometry {
            modality,
            grid: GridShape::new(n, 1, 1),
            patch_width: width,
        }
    }

    #[test]
    fn positional_table_shapes() {
        let t = PositionalTable::new(Modality::Video, GridShape::new(8, 14, 14), 768);
        assert_eq!((t.len(), t.dim()), (1568, 768));
        let a = PositionalTable::new(Modality::Audio, GridShape::new(50, 8, 1), 768);
        assert_eq!(a.len(), 400);
        // rows are distinct
        assert_ne!(a.row(0), a.row(1));
        assert_ne!(a.row(0), a.row(8));
    }

    #[test]
    fn interpolated_table_matches_at_shared_endpoints() {
        let pre = PositionalTable::new(Modality::Video, GridShape::new(8, 2, 2), 24);
        let ft = PositionalTable::with_time_reference(Modality::Video, GridShape::new(16, 2, 2), 24, 8);
        let g_pre = pre.grid();
        let g_ft = ft.grid();
        assert_eq!(
            ft.row(g_ft.index(GridPos::new(0, 1, 1))),
            pre.row(g_pre.index(GridPos::new(0, 1, 1)))
        );
        let last_ft = ft.row(g_ft.index(GridPos::new(15, 0, 1)));
        let last_pre = pre.row(g_pre.index(GridPos::new(7, 0, 1)));
        for (a, b) in last_ft.iter().zip(last_pre.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mid_fusion_range_checked() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TransformerConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            mlp: 16,
        };
        for s in [0, 3] {
            let r = Encoder::new(
                &mut store,
                &format!("e{s}"),
                cfg,
                EncoderFusion::Mid { shared_layers: s },
                Some(geo(Modality::Audio, 4, 4)),
                None,
                &mut rng,
            );
            assert!(matches!(r, Err(Error::Config(_))));
        }
    }

    #[test]
    fn project_tokens_zero_patch_gives_position() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TransformerConfig {
            hidden: 8,
            layers: 1,
            heads: 2,
            mlp: 16,
        };
        let enc = Encoder::new(
            &mut store,
            "encoder",
            cfg,
            EncoderFusion::Early,
            Some(geo(Modality::Audio, 4, 6)),
            None,
            &mut rng,
        )
        .unwrap();
        let grid = GridShape::new(4, 1, 1);
        let zero = TokenSequence::new(Array2::zeros((4, 6)), grid.positions(), Modality::Audio).unwrap();
        let out = enc.project_tokens(&store, &zero).unwrap();
        let table = &enc.audio_embed.as_ref().unwrap().positions;
        for i in 0..4 {
            for k in 0..8 {
                assert!((out.values[[i, k]] as f64 - table.row(i)[k]).abs() < 1e-6);
            }
        }
        let doubled_in = TokenSequence::new(
            Array2::from_shape_fn((4, 6), |(i, k)| (i + k) as f32 * 0.1),
            grid.positions(),
            Modality::Audio,
        )
        .unwrap();
        let mut twice = doubled_in.clone();
        twice.values *= 2.0;
        let one = enc.project_tokens(&store, &doubled_in).unwrap().values - &zero_proj(&enc, &store);
        let two = enc.project_tokens(&store, &twice).unwrap().values - &zero_proj(&enc, &store);
        for (a, b) in one.iter().zip(two.iter()) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
        let video = TokenSequence::new(Array2::zeros((1, 6)), vec![GridPos::new(0, 0, 0)], Modality::Video).unwrap();
        assert!(matches!(
            enc.project_tokens(&store, &video),
            Err(Error::InvalidInput(_))
        ));
    }

    fn zero_proj(enc: &Encoder, store: &ParamStore<f32>) -> Array2<f32> {
        let grid = GridShape::new(4, 1, 1);
        let zero = TokenSequence::new(Array2::zeros((4, 6)), grid.positions(), Modality::Audio).unwrap();
        enc.project_tokens(store, &zero).unwrap().values
    }
}
