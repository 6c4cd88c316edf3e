//! The pretraining model: input geometry, encoder, decoder and one
//! objective evaluation per batch.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;

use crate::audio::{audio_grid, PatchSize, MEL_BINS};
use crate::autodiff::{Graph, SeqLayout, Var};
use crate::backbone::{
    gather_rows, DecoderFusion, Encoder, EncoderFusion, EncoderInput, FusionSpec, TokenGeometry, TransformerConfig,
};
use crate::error::{config_err, invalid, shape_err, Result};
use crate::masking::{keep_count, make_masking_plan, MaskingPlan};
use crate::nn::ForwardCtx;
use crate::objectives::{
    check_inpainting_fusion, inpainting_loss, inpainting_mask_count, joint_reconstruction_loss, BatchPlans, Decoder,
    DecoderConfig, InpaintDirection, LossTerms, PatchTargets,
};
use crate::params::{ParamStore, Scalar};
use crate::tokens::Modality;
use crate::video::{video_grid, Tubelet};

/// Spectrogram extent seen by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AudioInput {
    pub frames: usize,
    pub bins: usize,
    pub patch: PatchSize,
}

impl AudioInput {
    /// 8 s of audio at 100 frames per second.
    pub const DEFAULT: Self = Self {
        frames: 800,
        bins: MEL_BINS,
        patch: PatchSize::DEFAULT,
    };

    pub fn geometry(&self) -> Result<TokenGeometry> {
        Ok(TokenGeometry {
            modality: Modality::Audio,
            grid: audio_grid(self.frames, self.bins, self.patch)?,
            patch_width: self.patch.width(),
        })
    }
}

/// Clip extent seen by the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VideoInput {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub tubelet: Tubelet,
}

impl VideoInput {
    pub const DEFAULT: Self = Self {
        frames: 16,
        height: 224,
        width: 224,
        tubelet: Tubelet::DEFAULT,
    };

    pub fn geometry(&self) -> Result<TokenGeometry> {
        Ok(TokenGeometry {
            modality: Modality::Video,
            grid: video_grid(self.frames, self.height, self.width, self.tubelet)?,
            patch_width: self.tubelet.width(),
        })
    }
}

/// Everything needed to rebuild a model's parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub audio: Option<AudioInput>,
    pub video: Option<VideoInput>,
    pub encoder: TransformerConfig,
    pub fusion: FusionSpec,
    /// Absent for finetuned models.
    pub decoder: Option<DecoderConfig>,
}

impl ArchConfig {
    pub fn base() -> Self {
        Self {
            audio: Some(AudioInput::DEFAULT),
            video: Some(VideoInput::DEFAULT),
            encoder: TransformerConfig::BASE,
            fusion: FusionSpec {
                encoder: EncoderFusion::Early,
                decoder: DecoderFusion::Shared,
            },
            decoder: Some(DecoderConfig::BASE),
        }
    }

    pub fn audio_geometry(&self) -> Result<Option<TokenGeometry>> {
        self.audio.map(|a| a.geometry()).transpose()
    }

    pub fn video_geometry(&self) -> Result<Option<TokenGeometry>> {
        self.video.map(|v| v.geometry()).transpose()
    }

    pub fn geometry(&self, m: Modality) -> Result<Option<TokenGeometry>> {
        match m {
            Modality::Audio => self.audio_geometry(),
            Modality::Video => self.video_geometry(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.audio.is_none() && self.video.is_none() {
            return Err(config_err!("model needs at least one modality"));
        }
        self.audio_geometry().map_err(|e| config_err!("audio input: {e}"))?;
        self.video_geometry().map_err(|e| config_err!("video input: {e}"))?;
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.layers)?;
        if let Some(d) = &self.decoder {
            d.validate()?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        if let Some(a) = &self.audio {
            put("audio.frames", a.frames.to_string());
            put("audio.bins", a.bins.to_string());
            put("audio.patch_time", a.patch.time.to_string());
            put("audio.patch_freq", a.patch.freq.to_string());
        }
        if let Some(v) = &self.video {
            put("video.frames", v.frames.to_string());
            put("video.height", v.height.to_string());
            put("video.width", v.width.to_string());
            put("video.tubelet_t", v.tubelet.t.to_string());
            put("video.tubelet_h", v.tubelet.h.to_string());
            put("video.tubelet_w", v.tubelet.w.to_string());
        }
        put("encoder.hidden", self.encoder.hidden.to_string());
        put("encoder.layers", self.encoder.layers.to_string());
        put("encoder.heads", self.encoder.heads.to_string());
        put("encoder.mlp", self.encoder.mlp.to_string());
        put("encoder.fusion", self.fusion.encoder.name().to_string());
        if let EncoderFusion::Mid { shared_layers } = self.fusion.encoder {
            put("encoder.shared_layers", shared_layers.to_string());
        }
        put("decoder.fusion", self.fusion.decoder.name().to_string());
        if let Some(d) = &self.decoder {
            put("decoder.hidden", d.hidden.to_string());
            put("decoder.layers", d.layers.to_string());
            put("decoder.heads", d.heads.to_string());
            put("decoder.mlp", d.mlp.to_string());
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let audio = if kv.contains_key("audio.frames") {
            Some(AudioInput {
                frames: kv_get(kv, "audio.frames")?,
                bins: kv_get(kv, "audio.bins")?,
                patch: PatchSize {
                    time: kv_get(kv, "audio.patch_time")?,
                    freq: kv_get(kv, "audio.patch_freq")?,
                },
            })
        } else {
            None
        };
        let video = if kv.contains_key("video.frames") {
            Some(VideoInput {
                frames: kv_get(kv, "video.frames")?,
                height: kv_get(kv, "video.height")?,
                width: kv_get(kv, "video.width")?,
                tubelet: Tubelet {
                    t: kv_get(kv, "video.tubelet_t")?,
                    h: kv_get(kv, "video.tubelet_h")?,
                    w: kv_get(kv, "video.tubelet_w")?,
                },
            })
        } else {
            None
        };
        let encoder = TransformerConfig {
            hidden: kv_get(kv, "encoder.hidden")?,
            layers: kv_get(kv, "encoder.layers")?,
            heads: kv_get(kv, "encoder.heads")?,
            mlp: kv_get(kv, "encoder.mlp")?,
        };
        let shared_layers = if kv.contains_key("encoder.shared_layers") {
            kv_get(kv, "encoder.shared_layers")?
        } else {
            2
        };
        let fusion = FusionSpec {
            encoder: FusionSpec::parse_encoder(&kv_get::<String>(kv, "encoder.fusion")?, shared_layers)?,
            decoder: kv_get(kv, "decoder.fusion")?,
        };
        let decoder = if kv.contains_key("decoder.hidden") {
            Some(DecoderConfig {
                hidden: kv_get(kv, "decoder.hidden")?,
                layers: kv_get(kv, "decoder.layers")?,
                heads: kv_get(kv, "decoder.heads")?,
                mlp: kv_get(kv, "decoder.mlp")?,
            })
        } else {
            None
        };
        let arch = Self {
            audio,
            video,
            encoder,
            fusion,
            decoder,
        };
        arch.validate()?;
        Ok(arch)
    }
}

pub(crate) fn kv_get<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = kv.get(key).ok_or_else(|| config_err!("missing key {key}"))?;
    raw.parse().map_err(|e| config_err!("bad value {raw:?} for {key}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ObjectiveKind {
    Joint,
    Inpainting(Vec<InpaintDirection>),
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::Inpainting(_) => "inpainting",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub alpha_audio: f64,
    pub alpha_video: f64,
    pub standardize_targets: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Joint,
            alpha_audio: 0.5,
            alpha_video: 0.9,
            standardize_targets: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn alpha(&self, m: Modality) -> f64 {
        match m {
            Modality::Audio => self.alpha_audio,
            Modality::Video => self.alpha_video,
        }
    }
}

/// Patch rows for a batch, `[batch * n, width]` per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub audio: Option<Array2<f32>>,
    pub video: Option<Array2<f32>>,
    pub batch: usize,
}

impl PatchBatch {
    pub fn get(&self, m: Modality) -> Option<&Array2<f32>> {
        match m {
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
    }
}

/// Audiovisual masked autoencoder.
#[derive(Clone, Debug)]
pub struct AvMae {
    pub arch: ArchConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl AvMae {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, arch: ArchConfig, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let dec_config = arch
            .decoder
            .ok_or_else(|| config_err!("pretraining model needs a decoder configuration"))?;
        let audio = arch.audio_geometry()?;
        let video = arch.video_geometry()?;
        if arch.fusion.is_uncoupled() {
            log::warn!("separate encoder with separate decoder trains two uncoupled single-modality models");
        }
        let encoder = Encoder::new(store, "encoder", arch.encoder, arch.fusion.encoder, audio, video, rng)?;
        let decoder = Decoder::new(
            store,
            "decoder",
            dec_config,
            arch.fusion.decoder,
            arch.encoder.hidden,
            audio,
            video,
            rng,
        )?;
        Ok(Self { arch, encoder, decoder })
    }

    /// Checks that `objective` can run on this architecture.
    pub fn check_objective(&self, objective: &ObjectiveConfig) -> Result<()> {
        for m in Modality::BOTH {
            let a = objective.alpha(m);
            if self.encoder.has(m) && !(0.0..1.0).contains(&a) {
                return Err(config_err!("{m} masking ratio {a} outside [0, 1)"));
            }
        }
        if let ObjectiveKind::Inpainting(dirs) = &objective.kind {
            check_inpainting_fusion(&self.arch.fusion)?;
            if dirs.is_empty() {
                return Err(config_err!("inpainting needs at least one direction"));
            }
            if !(self.encoder.has(Modality::Audio) && self.encoder.has(Modality::Video)) {
                return Err(config_err!("inpainting needs both modalities"));
            }
            for d in dirs {
                let src = self.arch.geometry(d.source())?.expect("checked").tokens();
                let tgt = self.arch.geometry(d.target())?.expect("checked").tokens();
                let (a_src, a_tgt) = (objective.alpha(d.source()), objective.alpha(d.target()));
                let sp = MaskingPlan::from_kept(src, (0..keep_count(src, a_src)).collect())?;
                let tp = MaskingPlan::from_kept(tgt, (0..keep_count(tgt, a_tgt)).collect())?;
                inpainting_mask_count(&sp, &tp).map_err(|e| {
                    config_err!(
                        "{d} with alpha_{} = {a_src}, alpha_{} = {a_tgt}: {e}",
                        d.source(),
                        d.target()
                    )
                })?;
            }
        }
        Ok(())
    }

    /// Draws one masking plan per sample and present modality.
    pub fn make_plans(
        &self,
        batch: &PatchBatch,
        objective: &ObjectiveConfig,
        rng: &mut impl Rng,
    ) -> Result<BatchPlans> {
        let mut plans = BatchPlans::default();
        for m in Modality::BOTH {
            if batch.get(m).is_none() {
                continue;
            }
            let n = self
                .arch
                .geometry(m)?
                .ok_or_else(|| invalid!("model has no {m} input"))?
                .tokens();
            let list = (0..batch.batch)
                .map(|_| make_masking_plan(n, objective.alpha(m), rng))
                .collect::<Result<Vec<_>>>()?;
            match m {
                Modality::Audio => plans.audio = list,
                Modality::Video => plans.video = list,
            }
        }
        Ok(plans)
    }

    fn check_batch(&self, batch: &PatchBatch) -> Result<()> {
        for m in Modality::BOTH {
            if let Some(x) = batch.get(m) {
                let geo = self
                    .arch
                    .geometry(m)?
                    .ok_or_else(|| invalid!("model has no {m} input"))?;
                if x.dim() != (batch.batch * geo.tokens(), geo.patch_width) {
                    return Err(shape_err!(
                        "{m} batch is {:?}, expected ({}, {})",
                        x.dim(),
                        batch.batch * geo.tokens(),
                        geo.patch_width
                    ));
                }
            }
        }
        Ok(())
    }

    /// Encodes the kept tokens given by `plans`.
    pub fn encode_masked<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        batch: &PatchBatch,
        plans: &BatchPlans,
    ) -> Result<(Option<Var>, Option<Var>)> {
        self.check_batch(batch)?;
        let input = |m: Modality| -> Option<EncoderInput<F>> {
            let x = batch.get(m)?;
            let list = plans.get(m);
            let u = list.first().map_or(0, |p| p.keep_count());
            Some(EncoderInput {
                patches: gather_rows(x, &plans.kept_rows(m)),
                indices: plans.kept_indices(m),
                layout: SeqLayout::new(list.len(), u),
            })
        };
        self.encoder
            .encode(g, store, ctx, input(Modality::Audio), input(Modality::Video))
    }

    /// Objective value for `batch` under fixed `plans`.
    #[allow(clippy::too_many_arguments)]
    pub fn loss_with_plans<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        batch: &PatchBatch,
        plans: &BatchPlans,
        objective: &ObjectiveConfig,
        rng: &mut impl Rng,
    ) -> Result<LossTerms> {
        let encoded = self.encode_masked(g, store, ctx, batch, plans)?;
        let targets =
            PatchTargets::from_patches(batch.audio.clone(), batch.video.clone(), objective.standardize_targets);
        match &objective.kind {
            ObjectiveKind::Joint => joint_reconstruction_loss(
                g,
                store,
                ctx,
                &self.decoder,
                &self.arch.fusion,
                encoded,
                plans,
                &targets,
            ),
            ObjectiveKind::Inpainting(dirs) => inpainting_loss(
                g,
                store,
                ctx,
                &self.decoder,
                &self.arch.fusion,
                encoded,
                plans,
                &targets,
                dirs,
                rng,
            ),
        }
    }

    /// Draws masks and evaluates the objective.
    pub fn loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        batch: &PatchBatch,
        objective: &ObjectiveConfig,
        rng: &mut impl Rng,
    ) -> Result<(LossTerms, BatchPlans)> {
        let plans = self.make_plans(batch, objective, rng)?;
        let terms = self.loss_with_plans(g, store, ctx, batch, &plans, objective, rng)?;
        Ok((terms, plans))
    }

    /// Decoder predictions for every token (masked and unmasked) under the
    /// joint-reconstruction path, `[batch * n, width]` per modality.
    pub fn reconstruct(
        &self,
        store: &ParamStore<f32>,
        batch: &PatchBatch,
        plans: &BatchPlans,
    ) -> Result<(Option<Array2<f32>>, Option<Array2<f32>>)> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let encoded = self.encode_masked(&mut g, store, &mut ctx, batch, plans)?;
        let mut z = [None, None];
        for (slot, (m, e)) in z
            .iter_mut()
            .zip([(Modality::Audio, encoded.0), (Modality::Video, encoded.1)])
        {
            if let Some(e) = e {
                *slot = Some(self.decoder.unshuffle(&mut g, store, &ctx, m, e, plans.get(m))?);
            }
        }
        let (da, dv) = self.decoder.decode_pair(&mut g, store, &mut ctx, z[0], z[1])?;
        let mut out = [None, None];
        for (slot, (m, d, zz)) in out
            .iter_mut()
            .zip([(Modality::Audio, da, z[0]), (Modality::Video, dv, z[1])])
        {
            if let (Some(d), Some((_, layout))) = (d, zz) {
                let pred = self
                    .decoder
                    .predict(&mut g, store, &ctx, m, d, (0..layout.rows()).collect())?;
                *slot = Some(g.value(pred).clone());
            }
        }
        let [a, v] = out;
        Ok((a, v))
    }
}
