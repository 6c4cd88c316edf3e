//! Pretraining decoder, reconstruction targets, and the two pretraining
//! losses: joint masked reconstruction and cross-modal inpainting.

use std::fmt;
use std::str::FromStr;
use std::sync::Once;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::Rng;

use crate::audio::{patchify_spectrogram, LogMelSpectrogram, PatchSize};
use crate::autodiff::{Graph, SeqLayout, Var};
use crate::backbone::{
    gather_rows, DecoderFusion, Encoder, FusionSpec, PositionalTable, TokenGeometry, Tower, TransformerConfig,
};
use crate::error::{config_err, invalid, shape_err, Result};
use crate::masking::MaskingPlan;
use crate::nn::{normal_init, ForwardCtx, LayerNorm, Linear, Stack};
use crate::params::{ParamId, ParamStore, Scalar};
use crate::tokens::{GridPos, Modality, TokenSequence};
use crate::video::{tubelet_tokenize, Tubelet, VideoClip};

pub const STANDARDIZE_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
}

impl DecoderConfig {
    pub const BASE: Self = Self {
        hidden: 384,
        layers: 4,
        heads: 6,
        mlp: 1536,
    };
    pub const LARGE: Self = Self {
        hidden: 512,
        layers: 4,
        heads: 8,
        mlp: 2048,
    };

    pub fn as_transformer(&self) -> TransformerConfig {
        TransformerConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            mlp: self.mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.as_transformer().validate()
    }
}

/// Reconstruction targets: patchified inputs in tokenizer row order. Batched
/// targets stack samples as `[batch * n, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTargets {
    pub audio: Option<Array2<f32>>,
    pub video: Option<Array2<f32>>,
    pub standardized: bool,
}

/// Per-row `(x - mean) / sqrt(var + eps)`.
pub fn standardize_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.len().max(1) as f32;
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + STANDARDIZE_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

impl PatchTargets {
    pub fn from_patches(audio: Option<Array2<f32>>, video: Option<Array2<f32>>, standardize: bool) -> Self {
        let prep = |x: Array2<f32>| if standardize { standardize_rows(&x) } else { x };
        Self {
            audio: audio.map(prep),
            video: video.map(prep),
            standardized: standardize,
        }
    }

    pub fn get(&self, m: Modality) -> Option<&Array2<f32>> {
        match m {
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
    }
}

/// Targets for one sample, in the same row order as the tokenizers.
pub fn patch_targets(
    spec: Option<&LogMelSpectrogram>,
    clip: Option<&VideoClip>,
    patch: PatchSize,
    tubelet: Tubelet,
    standardize: bool,
) -> Result<PatchTargets> {
    let audio = spec.map(|s| patchify_spectrogram(s, patch)).transpose()?;
    let video = clip.map(|c| tubelet_tokenize(c, tubelet)).transpose()?;
    Ok(PatchTargets::from_patches(
        audio.map(|s| s.values),
        video.map(|s| s.values),
        standardize,
    ))
}

/// Per-modality pieces of the decoder: input projection from encoder width,
/// learned mask token, decoder positional table and the patch predictor.
#[derive(Clone, Debug)]
pub struct ModalityDecoder {
    pub geometry: TokenGeometry,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub positions: PositionalTable,
    pub pred: Linear,
}

#[derive(Clone, Debug)]
enum DecoderTowers {
    Early(Tower),
    Shared(Tower),
    Separate { audio: Option<Tower>, video: Option<Tower> },
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub fusion: DecoderFusion,
    pub audio: Option<ModalityDecoder>,
    pub video: Option<ModalityDecoder>,
    towers: DecoderTowers,
}

impl Decoder {
    /// Parameters live under `{prefix}.{audio,video}.{embed,mask_token,pred}`
    /// and towers `{prefix}.joint`, `{prefix}.shared` or
    /// `{prefix}.{audio,video}_tower`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        config: DecoderConfig,
        fusion: DecoderFusion,
        encoder_hidden: usize,
        audio: Option<TokenGeometry>,
        video: Option<TokenGeometry>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let part = |store: &mut ParamStore<F>, geo: TokenGeometry, rng: &mut _| {
            let name = format!("{prefix}.{}", geo.modality);
            ModalityDecoder {
                embed: Linear::new(store, &format!("{name}.embed"), encoder_hidden, d, rng),
                mask_token: store.add(format!("{name}.mask_token"), normal_init(rng, 1, d, 0.02)),
                positions: PositionalTable::new(geo.modality, geo.grid, d),
                pred: Linear::new(store, &format!("{name}.pred"), d, geo.patch_width, rng),
                geometry: geo,
            }
        };
        let audio_part = audio.map(|geo| part(store, geo, rng));
        let video_part = video.map(|geo| part(store, geo, rng));
        let dims = config.as_transformer().dims();
        let layers = config.layers;
        let mut tower = |store: &mut ParamStore<F>, name: &str| Tower {
            stack: Stack::new(store, &format!("{prefix}.{name}"), dims, 0, layers, layers, rng),
            norm: Some(LayerNorm::new(store, &format!("{prefix}.{name}.norm"), d)),
        };
        let towers = match fusion {
            DecoderFusion::Early => DecoderTowers::Early(tower(store, "joint")),
            DecoderFusion::Shared => DecoderTowers::Shared(tower(store, "shared")),
            DecoderFusion::Separate => DecoderTowers::Separate {
                audio: audio.map(|_| tower(store, "audio_tower")),
                video: video.map(|_| tower(store, "video_tower")),
            },
        };
        Ok(Self {
            config,
            fusion,
            audio: audio_part,
            video: video_part,
            towers,
        })
    }

    pub fn part(&self, m: Modality) -> Result<&ModalityDecoder> {
        match m {
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
        .ok_or_else(|| invalid!("decoder has no {m} branch"))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for p in [&self.audio, &self.video].into_iter().flatten() {
            ids.extend(p.embed.params());
            ids.push(p.mask_token);
            ids.extend(p.pred.params());
        }
        match &self.towers {
            DecoderTowers::Early(t) | DecoderTowers::Shared(t) => ids.extend(t.params()),
            DecoderTowers::Separate { audio, video } => {
                for t in [audio, video].into_iter().flatten() {
                    ids.extend(t.params());
                }
            }
        }
        ids
    }

    /// Graph form of unshuffle for a batch: projects encoded rows to decoder
    /// width, places them at their kept slots, fills masked slots with the
    /// mask token and adds decoder positions. Output is `[batch * n, d_dec]`.
    pub fn unshuffle<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &ForwardCtx,
        m: Modality,
        encoded: Var,
        plans: &[MaskingPlan],
    ) -> Result<(Var, SeqLayout)> {
        let part = self.part(m)?;
        let n = part.geometry.tokens();
        let batch = plans.len();
        let u = plans.first().map_or(0, |p| p.keep_count());
        if plans.iter().any(|p| p.n() != n || p.keep_count() != u) {
            return Err(shape_err!("{m} plans disagree with the {n}-token grid"));
        }
        if g.value(encoded).nrows() != batch * u {
            return Err(shape_err!(
                "{} encoded {m} rows for {batch} samples keeping {u}",
                g.value(encoded).nrows()
            ));
        }
        let x = part.embed.forward(g, store, ctx, encoded);
        let mask = ctx.load(g, store, part.mask_token);
        let stacked = g.concat_rows(&[x, mask]);
        let mask_row = batch * u;
        let mut idx = Vec::with_capacity(batch * n);
        for (b, plan) in plans.iter().enumerate() {
            idx.extend(
                plan.unshuffle_sources()
                    .into_iter()
                    .map(|s| if s < u { b * u + s } else { mask_row }),
            );
        }
        let z = g.gather_rows(stacked, idx);
        let all: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        let pos = g.constant(part.positions.gather(&all));
        Ok((g.add(z, pos), SeqLayout::new(batch, n)))
    }

    fn tower_for(&self, m: Modality) -> Result<&Tower> {
        match &self.towers {
            DecoderTowers::Early(t) | DecoderTowers::Shared(t) => Ok(t),
            DecoderTowers::Separate { audio, video } => match m {
                Modality::Audio => audio.as_ref(),
                Modality::Video => video.as_ref(),
            }
            .ok_or_else(|| invalid!("decoder has no {m} tower")),
        }
    }

    /// Runs the decoder towers on unshuffled sequences. The early variant
    /// decodes the concatenation of both modalities.
    pub fn decode_pair<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        za: Option<(Var, SeqLayout)>,
        zv: Option<(Var, SeqLayout)>,
    ) -> Result<(Option<Var>, Option<Var>)> {
        if let DecoderTowers::Early(t) = &self.towers {
            return Ok(Encoder::run_joint(t, g, store, ctx, za, zv));
        }
        let mut run = |m: Modality, z: Option<(Var, SeqLayout)>| -> Result<Option<Var>> {
            match z {
                Some((x, layout)) => Ok(Some(Encoder::run_tower(self.tower_for(m)?, g, store, ctx, x, layout))),
                None => Ok(None),
            }
        };
        let a = run(Modality::Audio, za)?;
        let v = run(Modality::Video, zv)?;
        Ok((a, v))
    }

    /// Decodes one mixed sequence whose predictions target modality `m`.
    pub fn decode_single<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        m: Modality,
        z: Var,
        layout: SeqLayout,
    ) -> Result<Var> {
        Ok(Encoder::run_tower(self.tower_for(m)?, g, store, ctx, z, layout))
    }

    /// Patch predictions for the given rows of a decoded sequence.
    pub fn predict<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &ForwardCtx,
        m: Modality,
        decoded: Var,
        rows: Vec<usize>,
    ) -> Result<Var> {
        let part = self.part(m)?;
        let x = g.gather_rows(decoded, rows);
        Ok(part.pred.forward(g, store, ctx, x))
    }
}

/// Kept/masked plans of one batch, one plan per sample and modality.
#[derive(Clone, Debug, Default)]
pub struct BatchPlans {
    pub audio: Vec<MaskingPlan>,
    pub video: Vec<MaskingPlan>,
}

impl BatchPlans {
    pub fn get(&self, m: Modality) -> &[MaskingPlan] {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Flat row indices of the kept tokens, `b * n + kept[j]`.
    pub fn kept_rows(&self, m: Modality) -> Vec<usize> {
        self.get(m)
            .iter()
            .enumerate()
            .flat_map(|(b, p)| p.kept().iter().map(move |&k| b * p.n() + k))
            .collect()
    }

    /// Grid indices of the kept tokens, sample after sample.
    pub fn kept_indices(&self, m: Modality) -> Vec<usize> {
        self.get(m).iter().flat_map(|p| p.kept().iter().copied()).collect()
    }
}

/// Scalar loss with its per-modality parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub audio: Option<Var>,
    pub video: Option<Var>,
}

static UNCOUPLED_WARNING: Once = Once::new();

fn masked_mse<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ctx: &ForwardCtx,
    decoder: &Decoder,
    m: Modality,
    decoded: Var,
    plans: &[MaskingPlan],
    targets: &Array2<f32>,
) -> Result<Var> {
    let n = decoder.part(m)?.geometry.tokens();
    if targets.nrows() != plans.len() * n {
        return Err(shape_err!(
            "{m} targets have {} rows, expected {}",
            targets.nrows(),
            plans.len() * n
        ));
    }
    let rows: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.masked().iter().map(move |&i| b * n + i))
        .collect();
    let target = gather_rows::<F>(targets, &rows);
    let pred = decoder.predict(g, store, ctx, m, decoded, rows)?;
    Ok(g.mse(pred, &target))
}

fn sum_terms<F: Scalar>(g: &mut Graph<F>, audio: Option<Var>, video: Option<Var>) -> Result<LossTerms> {
    let total = match (audio, video) {
        (Some(a), Some(v)) => g.add(a, v),
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(invalid!("no loss terms")),
    };
    Ok(LossTerms { total, audio, video })
}

/// Masked-patch reconstruction of every modality present. Each term is the
/// squared error averaged over the masked rows and patch elements; audio and
/// video are weighted equally.
#[allow(clippy::too_many_arguments)]
pub fn joint_reconstruction_loss<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ctx: &mut ForwardCtx,
    decoder: &Decoder,
    spec: &FusionSpec,
    encoded: (Option<Var>, Option<Var>),
    plans: &BatchPlans,
    targets: &PatchTargets,
) -> Result<LossTerms> {
    if spec.is_uncoupled() {
        UNCOUPLED_WARNING.call_once(|| {
            log::warn!("separate encoder with separate decoder trains two uncoupled single-modality models")
        });
    }
    let mut z = [None, None];
    for (slot, (m, e)) in z
        .iter_mut()
        .zip([(Modality::Audio, encoded.0), (Modality::Video, encoded.1)])
    {
        if let Some(e) = e {
            *slot = Some(decoder.unshuffle(g, store, ctx, m, e, plans.get(m))?);
        }
    }
    let (da, dv) = decoder.decode_pair(g, store, ctx, z[0], z[1])?;
    let mut term = |m: Modality, d: Option<Var>| -> Result<Option<Var>> {
        let Some(d) = d else { return Ok(None) };
        let t = targets.get(m).ok_or_else(|| invalid!("missing {m} targets"))?;
        masked_mse(g, store, ctx, decoder, m, d, plans.get(m), t).map(Some)
    };
    let la = term(Modality::Audio, da)?;
    let lv = term(Modality::Video, dv)?;
    sum_terms(g, la, lv)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InpaintDirection {
    VideoFromAudio,
    AudioFromVideo,
}

impl InpaintDirection {
    pub const BOTH: [InpaintDirection; 2] = [InpaintDirection::VideoFromAudio, InpaintDirection::AudioFromVideo];

    pub fn source(self) -> Modality {
        match self {
            Self::VideoFromAudio => Modality::Audio,
            Self::AudioFromVideo => Modality::Video,
        }
    }

    pub fn target(self) -> Modality {
        self.source().other()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::VideoFromAudio => "video_from_audio",
            Self::AudioFromVideo => "audio_from_video",
        }
    }
}

impl fmt::Display for InpaintDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InpaintDirection {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "video_from_audio" => Ok(Self::VideoFromAudio),
            "audio_from_video" => Ok(Self::AudioFromVideo),
            other => Err(config_err!("unknown inpainting direction {other:?}")),
        }
    }
}

/// Inpainting needs encoded source tokens that have seen the other modality.
pub fn check_inpainting_fusion(spec: &FusionSpec) -> Result<()> {
    if spec.encoder.is_cross_modal() {
        Ok(())
    } else {
        Err(config_err!(
            "inpainting needs cross-modal encoding (early or mid); the {} encoder never mixes modalities",
            spec.encoder
        ))
    }
}

/// Number of target mask tokens, `n_tgt - u_src`.
pub fn inpainting_mask_count(src: &MaskingPlan, tgt: &MaskingPlan) -> Result<usize> {
    let u = src.keep_count();
    if u >= tgt.n() {
        return Err(config_err!(
            "inpainting needs fewer kept source tokens than target tokens: \
             source keeps {u} of {} (alpha = {}), target has {} tokens (alpha = {})",
            src.n(),
            src.alpha(),
            tgt.n(),
            tgt.alpha()
        ));
    }
    Ok(tgt.n() - u)
}

/// Target rows reconstructed by the `k` mask tokens, in increasing order: a
/// uniform `k`-subset of the target's masked rows. When `k` exceeds the
/// masked count, every masked row is used and the remainder is drawn
/// uniformly from the kept rows.
pub fn assign_inpainting_rows(k: usize, tgt: &MaskingPlan, rng: &mut impl Rng) -> Vec<usize> {
    let masked = tgt.masked();
    let mut rows: Vec<usize> = if k <= masked.len() {
        sample(rng, masked.len(), k).into_iter().map(|i| masked[i]).collect()
    } else {
        let kept = tgt.kept();
        let extra = sample(rng, kept.len(), k - masked.len()).into_iter().map(|i| kept[i]);
        masked.iter().copied().chain(extra).collect()
    };
    rows.sort_unstable();
    rows
}

/// Builds `[e_src ; mask tokens]` for one sample. Source tokens get the
/// source-modality decoder position of their grid index, each mask slot the
/// target-modality decoder position of its assigned row. Returns the
/// sequence (width of `e_src`) and the assigned target rows.
#[allow(clippy::too_many_arguments)]
pub fn build_inpainting_sequence(
    spec: &FusionSpec,
    e_src: &TokenSequence,
    target: Modality,
    src_plan: &MaskingPlan,
    tgt_plan: &MaskingPlan,
    mask_token: &[f32],
    src_positions: &PositionalTable,
    tgt_positions: &PositionalTable,
    rng: &mut impl Rng,
) -> Result<(TokenSequence, Vec<usize>)> {
    check_inpainting_fusion(spec)?;
    if e_src.modality == target {
        return Err(invalid!("source and target modality are both {target}"));
    }
    let k = inpainting_mask_count(src_plan, tgt_plan)?;
    let u = src_plan.keep_count();
    let d = mask_token.len();
    if e_src.len() != u || (u > 0 && e_src.width() != d) {
        return Err(shape_err!(
            "{}x{} encoded source rows, plan keeps {u} with width {d}",
            e_src.len(),
            e_src.width()
        ));
    }
    if src_positions.dim() != d || tgt_positions.dim() != d {
        return Err(shape_err!("decoder position width differs from {d}"));
    }
    let assigned = assign_inpainting_rows(k, tgt_plan, rng);
    let mut values = Array2::<f32>::zeros((u + k, d));
    let mut positions: Vec<GridPos> = Vec::with_capacity(u + k);
    for (j, &idx) in src_plan.kept().iter().enumerate() {
        let pos = src_positions.row(idx);
        for c in 0..d {
            values[[j, c]] = e_src.values[[j, c]] + pos[c] as f32;
        }
        positions.push(src_positions.grid().position(idx));
    }
    for (j, &idx) in assigned.iter().enumerate() {
        let pos = tgt_positions.row(idx);
        for c in 0..d {
            values[[u + j, c]] = mask_token[c] + pos[c] as f32;
        }
        positions.push(tgt_positions.grid().position(idx));
    }
    Ok((TokenSequence::new(values, positions, target)?, assigned))
}

/// Cross-modal inpainting, summed with equal weights over `directions`.
/// The audio term of the result is the audio-from-video loss and the video
/// term the video-from-audio loss.
#[allow(clippy::too_many_arguments)]
pub fn inpainting_loss<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    ctx: &mut ForwardCtx,
    decoder: &Decoder,
    spec: &FusionSpec,
    encoded: (Option<Var>, Option<Var>),
    plans: &BatchPlans,
    targets: &PatchTargets,
    directions: &[InpaintDirection],
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    check_inpainting_fusion(spec)?;
    if directions.is_empty() {
        return Err(config_err!("inpainting needs at least one direction"));
    }
    let mut terms = [None, None];
    for &dir in directions {
        let (src, tgt) = (dir.source(), dir.target());
        let e_src = match src {
            Modality::Audio => encoded.0,
            Modality::Video => encoded.1,
        }
        .ok_or_else(|| invalid!("inpainting {dir} needs encoded {src} tokens"))?;
        let src_plans = plans.get(src);
        let tgt_plans = plans.get(tgt);
        if src_plans.len() != tgt_plans.len() || src_plans.is_empty() {
            return Err(shape_err!("inpainting plans cover different batches"));
        }
        let batch = src_plans.len();
        let u = src_plans[0].keep_count();
        let n_tgt = tgt_plans[0].n();
        let k = inpainting_mask_count(&src_plans[0], &tgt_plans[0])?;
        let src_part = decoder.part(src)?;
        let tgt_part = decoder.part(tgt)?;
        if g.value(e_src).nrows() != batch * u {
            return Err(shape_err!("encoded {src} rows do not match the plans"));
        }

        let x = src_part.embed.forward(g, store, ctx, e_src);
        let mask = ctx.load(g, store, tgt_part.mask_token);
        let stacked = g.concat_rows(&[x, mask]);
        let mask_row = batch * u;
        let mut idx = Vec::with_capacity(batch * n_tgt);
        let mut pos_rows = Array2::<F>::zeros((batch * n_tgt, decoder.config.hidden));
        let mut pred_rows = Vec::with_capacity(batch * k);
        let mut target_rows = Vec::with_capacity(batch * k);
        for b in 0..batch {
            let (sp, tp) = (&src_plans[b], &tgt_plans[b]);
            if inpainting_mask_count(sp, tp)? != k {
                return Err(shape_err!("inpainting plans differ in size within a batch"));
            }
            let assigned = assign_inpainting_rows(k, tp, rng);
            let base = b * n_tgt;
            for (j, &kept) in sp.kept().iter().enumerate() {
                idx.push(b * u + j);
                pos_rows
                    .row_mut(base + j)
                    .assign(&src_part.positions.gather::<F>(&[kept]).row(0));
            }
            for (j, &row) in assigned.iter().enumerate() {
                idx.push(mask_row);
                pos_rows
                    .row_mut(base + u + j)
                    .assign(&tgt_part.positions.gather::<F>(&[row]).row(0));
                pred_rows.push(base + u + j);
                target_rows.push(b * n_tgt + row);
            }
        }
        let z = g.gather_rows(stacked, idx);
        let pos = g.constant(pos_rows);
        let z = g.add(z, pos);
        let layout = SeqLayout::new(batch, n_tgt);
        let decoded = decoder.decode_single(g, store, ctx, tgt, z, layout)?;
        let t = targets.get(tgt).ok_or_else(|| invalid!("missing {tgt} targets"))?;
        if t.nrows() != batch * n_tgt {
            return Err(shape_err!(
                "{tgt} targets have {} rows, expected {}",
                t.nrows(),
                batch * n_tgt
            ));
        }
        let target = gather_rows::<F>(t, &target_rows);
        let pred = decoder.predict(g, store, ctx, tgt, decoded, pred_rows)?;
        let loss = g.mse(pred, &target);
        let slot = match tgt {
            Modality::Audio => 0,
            Modality::Video => 1,
        };
        terms[slot] = Some(match terms[slot] {
            Some(prev) => g.add(prev, loss),
            None => loss,
        });
    }
    sum_terms(g, terms[0], terms[1])
}

/// Replaces unmasked rows of `reconstruction` with the original patches.
pub fn paste_visible(original: &Array2<f32>, reconstruction: &Array2<f32>, plan: &MaskingPlan) -> Result<Array2<f32>> {
    if original.dim() != reconstruction.dim() || original.nrows() != plan.n() {
        return Err(shape_err!("paste shapes disagree"));
    }
    let mut out = reconstruction.clone();
    for &k in plan.kept() {
        out.row_mut(k).assign(&original.row(k));
    }
    Ok(out)
}

/// Stacks per-sample row blocks into one `[batch * n, width]` matrix.
pub fn stack_rows(parts: &[&Array2<f32>]) -> Result<Array2<f32>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| shape_err!("stacking rows: {e}"))
}
