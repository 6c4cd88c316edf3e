//! Downstream classifiers built from a pretrained encoder: unimodal
//! streams, bottleneck-fused audiovisual streams, multi-head outputs,
//! linear probing and multi-view evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autodiff::{Graph, SeqLayout, Var};
use crate::backbone::{
    concat_sequences, split_sequences, EncoderFusion, EncoderInput, PositionalTable, TokenEmbed, TokenGeometry,
    TransformerConfig,
};
use crate::error::{config_err, invalid, shape_err, Error, Result};
use crate::model::{kv_get, ArchConfig, AudioInput, PatchBatch, VideoInput};
use crate::nn::{normal_init, ForwardCtx, LayerNorm, Linear, Stack};
use crate::params::{cast, ParamId, ParamStore, Scalar};
use crate::tokens::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierMode {
    Audio,
    Video,
    Audiovisual,
}

impl ClassifierMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Audio => "audio",
            Self::Video => "video",
            Self::Audiovisual => "audiovisual",
        }
    }

    pub fn uses(self, m: Modality) -> bool {
        match self {
            Self::Audio => m == Modality::Audio,
            Self::Video => m == Modality::Video,
            Self::Audiovisual => true,
        }
    }
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "video" => Ok(Self::Video),
            "audiovisual" | "av" => Ok(Self::Audiovisual),
            other => Err(config_err!("unknown classifier mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

/// Parses `name:classes` pairs separated by commas, e.g. `verb:97,noun:300`.
pub fn parse_heads(s: &str) -> Result<Vec<HeadSpec>> {
    s.split(',')
        .map(|part| {
            let (name, classes) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| config_err!("head {part:?} is not name:classes"))?;
            let classes = classes
                .trim()
                .parse()
                .map_err(|_| config_err!("bad class count in head {part:?}"))?;
            Ok(HeadSpec {
                name: name.trim().to_string(),
                classes,
            })
        })
        .collect()
}

pub fn format_heads(heads: &[HeadSpec]) -> String {
    heads
        .iter()
        .map(|h| format!("{}:{}", h.name, h.classes))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub mode: ClassifierMode,
    pub heads: Vec<HeadSpec>,
    /// First layer at which the audiovisual streams exchange information;
    /// equal to the encoder depth, the streams only meet in the heads.
    pub fusion_layer: usize,
    pub bottlenecks: usize,
    /// Sigmoid outputs with mAP evaluation instead of softmax.
    pub multilabel: bool,
}

impl ClassifierSpec {
    pub fn single(mode: ClassifierMode, classes: usize) -> Self {
        Self {
            mode,
            heads: vec![HeadSpec {
                name: "label".into(),
                classes,
            }],
            fusion_layer: 8,
            bottlenecks: 4,
            multilabel: false,
        }
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.heads.is_empty() {
            return Err(config_err!("classifier needs at least one head"));
        }
        for h in &self.heads {
            if h.classes < 2 {
                return Err(config_err!("head {} needs at least 2 classes", h.name));
            }
        }
        if self.multilabel && self.heads.len() != 1 {
            return Err(config_err!("multilabel classifiers have exactly one head"));
        }
        if self.mode == ClassifierMode::Audiovisual {
            if self.fusion_layer > layers {
                return Err(config_err!(
                    "fusion layer {} exceeds the {layers} encoder layers",
                    self.fusion_layer
                ));
            }
            if self.fusion_layer < layers && self.bottlenecks == 0 {
                return Err(config_err!("audiovisual fusion needs at least one bottleneck token"));
            }
        }
        Ok(())
    }
}

/// Architecture of a finetuned classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierArch {
    pub audio: Option<AudioInput>,
    pub video: Option<VideoInput>,
    pub encoder: TransformerConfig,
    pub spec: ClassifierSpec,
    /// Token-grid time extents used during pretraining; positional tables
    /// are stretched to them when the finetuning input is longer or shorter.
    pub audio_reference_t: Option<usize>,
    pub video_reference_t: Option<usize>,
}

impl ClassifierArch {
    /// Classifier over `source`'s encoder with `spec`, keeping the
    /// pretraining input geometry.
    pub fn from_pretrain(source: &ArchConfig, spec: ClassifierSpec) -> Self {
        Self {
            audio: source.audio.filter(|_| spec.mode.uses(Modality::Audio)),
            video: source.video.filter(|_| spec.mode.uses(Modality::Video)),
            encoder: source.encoder,
            spec,
            audio_reference_t: None,
            video_reference_t: None,
        }
    }

    pub fn geometry(&self, m: Modality) -> Result<Option<TokenGeometry>> {
        match m {
            Modality::Audio => self.audio.map(|a| a.geometry()).transpose(),
            Modality::Video => self.video.map(|v| v.geometry()).transpose(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.spec.validate(self.encoder.layers)?;
        for m in Modality::BOTH {
            let present = self.geometry(m).map_err(|e| config_err!("{m} input: {e}"))?.is_some();
            if present != self.spec.mode.uses(m) {
                return Err(config_err!(
                    "{} classifier {} a {m} input",
                    self.spec.mode,
                    if present { "does not take" } else { "needs" }
                ));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = ArchConfig {
            audio: self.audio,
            video: self.video,
            encoder: self.encoder,
            fusion: crate::backbone::FusionSpec {
                encoder: EncoderFusion::Separate,
                decoder: crate::backbone::DecoderFusion::Separate,
            },
            decoder: None,
        }
        .to_kv();
        kv.retain(|(k, _)| !k.ends_with(".fusion"));
        let mut put = |k: &str, v: String| kv.push((k.to_string(), v));
        put("classifier.mode", self.spec.mode.name().into());
        put("classifier.heads", format_heads(&self.spec.heads));
        put("classifier.fusion_layer", self.spec.fusion_layer.to_string());
        put("classifier.bottlenecks", self.spec.bottlenecks.to_string());
        put("classifier.multilabel", self.spec.multilabel.to_string());
        if let Some(t) = self.audio_reference_t {
            put("audio.reference_t", t.to_string());
        }
        if let Some(t) = self.video_reference_t {
            put("video.reference_t", t.to_string());
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut base = kv.clone();
        base.insert("encoder.fusion".into(), "separate".into());
        base.insert("decoder.fusion".into(), "separate".into());
        let arch = ArchConfig::from_kv(&base)?;
        let spec = ClassifierSpec {
            mode: kv_get(kv, "classifier.mode")?,
            heads: parse_heads(&kv_get::<String>(kv, "classifier.heads")?)?,
            fusion_layer: kv_get(kv, "classifier.fusion_layer")?,
            bottlenecks: kv_get(kv, "classifier.bottlenecks")?,
            multilabel: kv_get(kv, "classifier.multilabel")?,
        };
        let opt = |k: &str| -> Result<Option<usize>> { kv.contains_key(k).then(|| kv_get(kv, k)).transpose() };
        let out = Self {
            audio: arch.audio,
            video: arch.video,
            encoder: arch.encoder,
            spec,
            audio_reference_t: opt("audio.reference_t")?,
            video_reference_t: opt("video.reference_t")?,
        };
        out.validate()?;
        Ok(out)
    }
}

/// One modality's token embedding, transformer layers and final norm.
#[derive(Clone, Debug)]
pub struct Stream {
    pub modality: Modality,
    pub embed: TokenEmbed,
    pub stack: Stack,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Head {
    pub spec: HeadSpec,
    pub linear: Linear,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    pub arch: ClassifierArch,
    pub audio: Option<Stream>,
    pub video: Option<Stream>,
    /// `[bottlenecks, hidden]` tokens shared by the streams from the fusion
    /// layer onward.
    pub bottleneck: Option<ParamId>,
    pub heads: Vec<Head>,
}

impl Classifier {
    /// Fresh classifier. Stream parameters are named `{audio,video}.embed`,
    /// `{audio,video}.layer{i}` and `{audio,video}.norm`; heads are
    /// zero-initialized under `head.{name}`.
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, arch: ClassifierArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let cfg = arch.encoder;
        let dims = cfg.dims();
        let mut streams = [None, None];
        for (slot, m) in streams.iter_mut().zip(Modality::BOTH) {
            let Some(geo) = arch.geometry(m)? else { continue };
            let mut embed = TokenEmbed::new(store, &format!("{m}.embed"), geo, cfg.hidden, rng);
            let reference = match m {
                Modality::Audio => arch.audio_reference_t,
                Modality::Video => arch.video_reference_t,
            };
            if let Some(t) = reference {
                embed.positions = PositionalTable::with_time_reference(m, geo.grid, cfg.hidden, t);
            }
            *slot = Some(Stream {
                modality: m,
                embed,
                stack: Stack::new(store, &m.to_string(), dims, 0, cfg.layers, cfg.layers, rng),
                norm: LayerNorm::new(store, &format!("{m}.norm"), cfg.hidden),
            });
        }
        let bottleneck = (arch.spec.mode == ClassifierMode::Audiovisual && arch.spec.fusion_layer < cfg.layers)
            .then(|| store.add("bottleneck", normal_init(rng, arch.spec.bottlenecks, cfg.hidden, 0.02)));
        let streams_used = streams.iter().flatten().count();
        let heads = arch
            .spec
            .heads
            .iter()
            .map(|h| Head {
                spec: h.clone(),
                linear: Linear::zeros(store, &format!("head.{}", h.name), streams_used * cfg.hidden, h.classes),
            })
            .collect();
        let [audio, video] = streams;
        Ok(Self {
            arch,
            audio,
            video,
            bottleneck,
            heads,
        })
    }

    pub fn stream(&self, m: Modality) -> Option<&Stream> {
        match m {
            Modality::Audio => self.audio.as_ref(),
            Modality::Video => self.video.as_ref(),
        }
    }

    /// Width of the pooled feature vector fed to the heads.
    pub fn feature_dim(&self) -> usize {
        [&self.audio, &self.video].iter().filter(|s| s.is_some()).count() * self.arch.encoder.hidden
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| h.linear.params()).collect()
    }

    fn embed_input<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &ForwardCtx,
        m: Modality,
        batch: &PatchBatch,
    ) -> Result<Option<(Var, SeqLayout)>> {
        let Some(stream) = self.stream(m) else { return Ok(None) };
        let x = batch
            .get(m)
            .ok_or_else(|| invalid!("{} classifier needs {m} input", self.arch.spec.mode))?;
        let geo = stream.embed.geometry;
        if x.dim() != (batch.batch * geo.tokens(), geo.patch_width) {
            return Err(shape_err!(
                "{m} batch is {:?}, expected ({}, {})",
                x.dim(),
                batch.batch * geo.tokens(),
                geo.patch_width
            ));
        }
        let input = EncoderInput::<F>::full(x.mapv(|v| cast(v as f64)), geo.tokens());
        let v = stream.embed.forward(g, store, ctx, input.patches, &input.indices);
        Ok(Some((v, input.layout)))
    }

    /// Mean-pooled final tokens, `[batch, feature_dim]`; audio features
    /// come first in the audiovisual case.
    pub fn features<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        batch: &PatchBatch,
    ) -> Result<Var> {
        let a = self.embed_input(g, store, ctx, Modality::Audio, batch)?;
        let v = self.embed_input(g, store, ctx, Modality::Video, batch)?;
        let pooled = match (a, v) {
            (Some((xa, la)), Some((xv, lv))) => {
                let (sa, sv) = (
                    self.audio.as_ref().expect("stream"),
                    self.video.as_ref().expect("stream"),
                );
                let (ya, yv) = self.fused_layers(g, store, ctx, sa, sv, (xa, la), (xv, lv))?;
                let pa = g.mean_pool(ya, la);
                let pv = g.mean_pool(yv, lv);
                g.concat_cols(&[pa, pv])
            }
            (Some((x, l)), None) | (None, Some((x, l))) => {
                let s = self.audio.as_ref().or(self.video.as_ref()).expect("stream");
                let y = s.stack.forward(g, store, ctx, x, l);
                let y = s.norm.forward(g, store, ctx, y);
                g.mean_pool(y, l)
            }
            (None, None) => return Err(invalid!("classifier has no input streams")),
        };
        Ok(pooled)
    }

    #[allow(clippy::too_many_arguments)]
    fn fused_layers<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        sa: &Stream,
        sv: &Stream,
        (mut xa, la): (Var, SeqLayout),
        (mut xv, lv): (Var, SeqLayout),
    ) -> Result<(Var, Var)> {
        let layers = self.arch.encoder.layers;
        let fusion = self.arch.spec.fusion_layer;
        let nb = self.arch.spec.bottlenecks;
        let batch = la.batch;
        let mut bn: Option<Var> = None;
        for i in 0..layers {
            let rate = crate::nn::layer_drop_rate(ctx.drop_path, i, layers);
            let (ba, bv) = (&sa.stack.blocks[i], &sv.stack.blocks[i]);
            if i < fusion {
                xa = ba.forward(g, store, ctx, xa, la, rate);
                xv = bv.forward(g, store, ctx, xv, lv, rate);
                continue;
            }
            let tokens = match bn {
                Some(b) => b,
                None => {
                    let p = ctx.load(g, store, self.bottleneck.expect("audiovisual bottleneck"));
                    g.gather_rows(p, (0..batch).flat_map(|_| 0..nb).collect())
                }
            };
            let bl = SeqLayout::new(batch, nb);
            let (ja, jla) = concat_sequences(g, &[(xa, la), (tokens, bl)]);
            let (jv, jlv) = concat_sequences(g, &[(xv, lv), (tokens, bl)]);
            let ya = ba.forward(g, store, ctx, ja, jla, rate);
            let yv = bv.forward(g, store, ctx, jv, jlv, rate);
            let pa = split_sequences(g, ya, jla, &[la.len, nb]);
            let pv = split_sequences(g, yv, jlv, &[lv.len, nb]);
            xa = pa[0];
            xv = pv[0];
            let sum = g.add(pa[1], pv[1]);
            bn = Some(g.scale(sum, cast(0.5)));
        }
        let ya = sa.norm.forward(g, store, ctx, xa);
        let yv = sv.norm.forward(g, store, ctx, xv);
        Ok((ya, yv))
    }

    /// Applies every head to pooled features.
    pub fn heads_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &ForwardCtx,
        features: Var,
    ) -> Vec<Var> {
        self.heads
            .iter()
            .map(|h| h.linear.forward(g, store, ctx, features))
            .collect()
    }

    /// Logits per head, each `[batch, classes]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut ForwardCtx,
        batch: &PatchBatch,
    ) -> Result<Vec<Var>> {
        let f = self.features(g, store, ctx, batch)?;
        Ok(self.heads_forward(g, store, ctx, f))
    }

    /// Evaluation-mode logits as plain arrays.
    pub fn predict(&self, store: &ParamStore<f32>, batch: &PatchBatch) -> Result<Vec<Array2<f32>>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        let logits = self.forward(&mut g, store, &mut ctx, batch)?;
        Ok(logits.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Evaluation-mode pooled features.
    pub fn extract_features(&self, store: &ParamStore<f32>, batch: &PatchBatch) -> Result<Array2<f32>> {
        let mut g = Graph::new();
        let mut ctx = ForwardCtx::eval();
        ctx.frozen = true;
        let f = self.features(&mut g, store, &mut ctx, batch)?;
        Ok(g.value(f).clone())
    }
}

/// Source tensor for every classifier parameter taken from a pretrained
/// encoder; the rest (heads, bottlenecks) are fresh.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitMapping {
    /// `(classifier name, pretrained name)` pairs.
    pub assigned: Vec<(String, String)>,
    pub fresh: Vec<String>,
}

fn source_layer_prefix(fusion: EncoderFusion, layers: usize, m: Modality, layer: usize) -> String {
    match fusion {
        EncoderFusion::Separate => format!("encoder.{m}.layer{layer}"),
        EncoderFusion::Early => format!("encoder.joint.layer{layer}"),
        EncoderFusion::Shared => format!("encoder.shared.layer{layer}"),
        EncoderFusion::Mid { shared_layers } => {
            if layer < layers - shared_layers {
                format!("encoder.{m}.layer{layer}")
            } else {
                format!("encoder.joint.layer{layer}")
            }
        }
    }
}

fn source_norm_prefix(fusion: EncoderFusion, m: Modality) -> String {
    match fusion {
        EncoderFusion::Separate => format!("encoder.{m}.norm"),
        EncoderFusion::Early | EncoderFusion::Mid { .. } => "encoder.joint.norm".into(),
        EncoderFusion::Shared => "encoder.shared.norm".into(),
    }
}

impl InitMapping {
    /// Mapping from an encoder pretrained with `fusion` onto `classifier`.
    /// Separate encoders initialize their own stream; early and shared
    /// weights initialize both streams; mid fusion maps its per-modality
    /// layers onto the lower stream layers and its joint layers onto the top
    /// layers of both streams.
    pub fn new<F: Scalar>(fusion: EncoderFusion, classifier: &Classifier, store: &ParamStore<F>) -> Self {
        let layers = classifier.arch.encoder.layers;
        let mut assigned = Vec::new();
        let mut fresh = Vec::new();
        for (_, name, _) in store.iter() {
            let source = Modality::BOTH.iter().find_map(|&m| {
                let rest = name.strip_prefix(&format!("{m}."))?;
                if let Some(r) = rest.strip_prefix("embed.") {
                    return Some(format!("encoder.{m}_embed.{r}"));
                }
                if let Some(r) = rest.strip_prefix("norm.") {
                    return Some(format!("{}.{r}", source_norm_prefix(fusion, m)));
                }
                let r = rest.strip_prefix("layer")?;
                let (idx, tail) = r.split_once('.')?;
                let layer: usize = idx.parse().ok()?;
                Some(format!("{}.{tail}", source_layer_prefix(fusion, layers, m, layer)))
            });
            match source {
                Some(s) => assigned.push((name.to_string(), s)),
                None => fresh.push(name.to_string()),
            }
        }
        Self { assigned, fresh }
    }

    /// Copies every assigned tensor from `source` into `target`.
    pub fn apply<F: Scalar>(&self, source: &ParamStore<F>, target: &mut ParamStore<F>) -> Result<()> {
        for (dst, src) in &self.assigned {
            let value = source
                .by_name(src)
                .ok_or_else(|| Error::Checkpoint(format!("pretrained checkpoint has no tensor {src} for {dst}")))?;
            let id = target.id(dst).expect("mapping built from this store");
            if target.get(id).dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {src} has shape {:?}, {dst} expects {:?}",
                    value.dim(),
                    target.get(id).dim()
                )));
            }
            target.get_mut(id).assign(value);
        }
        Ok(())
    }
}

/// Builds a classifier over a pretrained encoder and copies its weights in.
pub fn build_classifier(
    source_arch: &ArchConfig,
    source: &ParamStore<f32>,
    arch: ClassifierArch,
    rng: &mut impl Rng,
) -> Result<(Classifier, ParamStore<f32>, InitMapping)> {
    for m in Modality::BOTH {
        if arch.spec.mode.uses(m) && source_arch.geometry(m)?.is_none() {
            return Err(Error::Checkpoint(format!("pretrained model has no {m} encoder")));
        }
    }
    if arch.encoder != source_arch.encoder {
        return Err(Error::Checkpoint(format!(
            "classifier encoder {:?} differs from pretrained {:?}",
            arch.encoder, source_arch.encoder
        )));
    }
    let mut store = ParamStore::new();
    let classifier = Classifier::new(&mut store, arch, rng)?;
    let mapping = InitMapping::new(source_arch.fusion.encoder, &classifier, &store);
    mapping.apply(source, &mut store)?;
    Ok((classifier, store, mapping))
}

/// Supervision for one sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    /// One class index per head.
    Classes(Vec<usize>),
    /// Active classes of a single multilabel head.
    Multi(Vec<usize>),
}

/// Per-head target distributions for a batch: smoothed one-hot rows for
/// softmax heads, 0/1 rows for a multilabel head.
pub fn label_targets(spec: &ClassifierSpec, labels: &[Label], smoothing: f64) -> Result<Vec<Array2<f64>>> {
    let mut out: Vec<Array2<f64>> = spec
        .heads
        .iter()
        .map(|h| Array2::zeros((labels.len(), h.classes)))
        .collect();
    for (i, label) in labels.iter().enumerate() {
        match (label, spec.multilabel) {
            (Label::Multi(active), true) => {
                for &c in active {
                    if c >= spec.heads[0].classes {
                        return Err(invalid!("class {c} out of range"));
                    }
                    out[0][[i, c]] = 1.0;
                }
            }
            (Label::Classes(cls), false) => {
                if cls.len() != spec.heads.len() {
                    return Err(invalid!(
                        "sample {i} has {} labels for {} heads",
                        cls.len(),
                        spec.heads.len()
                    ));
                }
                for (h, (&c, head)) in cls.iter().zip(&spec.heads).enumerate() {
                    if c >= head.classes {
                        return Err(invalid!("class {c} out of range for head {}", head.name));
                    }
                    let row = crate::augment::smoothed_target(c, head.classes, smoothing);
                    for (k, v) in row.into_iter().enumerate() {
                        out[h][[i, k]] = v;
                    }
                }
            }
            _ => return Err(invalid!("label kind of sample {i} does not match the classifier")),
        }
    }
    Ok(out)
}

/// Unweighted sum of per-head losses: softmax cross-entropy against soft
/// targets, or sigmoid cross-entropy in multilabel mode.
pub fn multi_head_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: &[Var],
    targets: &[Array2<f64>],
    multilabel: bool,
) -> Result<Var> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(invalid!("{} heads but {} label sets", logits.len(), targets.len()));
    }
    let mut total: Option<Var> = None;
    for (&l, t) in logits.iter().zip(targets) {
        let t = t.mapv(|v| cast::<F>(v));
        let loss = if multilabel {
            g.bce_with_logits(l, &t)
        } else {
            g.soft_cross_entropy(l, &t)
        };
        total = Some(match total {
            Some(prev) => g.add(prev, loss),
            None => loss,
        });
    }
    Ok(total.expect("at least one head"))
}

pub fn argmax(row: ndarray::ArrayView1<'_, f32>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Array2<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(row.view()) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Fraction of rows where every head's argmax is correct, e.g. action
/// accuracy from verb and noun heads.
pub fn joint_accuracy(logits: &[Array2<f32>], labels: &[Vec<usize>]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..labels.len())
        .filter(|&i| logits.iter().enumerate().all(|(h, l)| argmax(l.row(i)) == labels[i][h]))
        .count();
    hits as f64 / labels.len() as f64
}

/// Mean over classes with at least one positive of the average precision.
pub fn mean_average_precision(scores: &Array2<f32>, targets: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    let mut counted = 0;
    for c in 0..scores.ncols() {
        let mut order: Vec<usize> = (0..scores.nrows()).collect();
        order.sort_by(|&a, &b| scores[[b, c]].total_cmp(&scores[[a, c]]));
        let positives = targets.column(c).iter().filter(|&&t| t > 0.5).count();
        if positives == 0 {
            continue;
        }
        let (mut hits, mut ap) = (0usize, 0.0);
        for (rank, &i) in order.iter().enumerate() {
            if targets[[i, c]] > 0.5 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / positives as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Averages per-view outputs: logits for softmax heads, sigmoid
/// probabilities for multilabel heads.
pub fn average_views(views: &[Vec<Array2<f32>>], multilabel: bool) -> Result<Vec<Array2<f32>>> {
    let first = views.first().ok_or_else(|| invalid!("need at least one view"))?;
    let mut out: Vec<Array2<f32>> = first.iter().map(|l| Array2::zeros(l.dim())).collect();
    for view in views {
        if view.len() != out.len() {
            return Err(shape_err!("views have different head counts"));
        }
        for (acc, l) in out.iter_mut().zip(view) {
            if acc.dim() != l.dim() {
                return Err(shape_err!("views have different logit shapes"));
            }
            if multilabel {
                *acc += &l.mapv(|v| 1.0 / (1.0 + (-v).exp()));
            } else {
                *acc += l;
            }
        }
    }
    let n = views.len() as f32;
    for acc in &mut out {
        acc.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// Evaluates every view batch (same samples, different temporal crops) and
/// averages the outputs.
pub fn multiview_eval(
    classifier: &Classifier,
    store: &ParamStore<f32>,
    views: &[PatchBatch],
) -> Result<Vec<Array2<f32>>> {
    let outputs = views
        .iter()
        .map(|v| classifier.predict(store, v))
        .collect::<Result<Vec<_>>>()?;
    average_views(&outputs, classifier.arch.spec.multilabel)
}

/// Per-dimension standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    pub mean: Array2<f32>,
    pub inv_std: Array2<f32>,
}

impl FeatureNorm {
    pub fn fit(features: &Array2<f32>) -> Self {
        let mean = features
            .mean_axis(Axis(0))
            .unwrap_or_else(|| ndarray::Array1::zeros(features.ncols()));
        let var = features.var_axis(Axis(0), 0.0);
        Self {
            mean: mean.insert_axis(Axis(0)),
            inv_std: var.mapv(|v| 1.0 / (v + 1e-6).sqrt()).insert_axis(Axis(0)),
        }
    }

    pub fn apply(&self, features: &Array2<f32>) -> Array2<f32> {
        (features - &self.mean) * &self.inv_std
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub weight: Array2<f32>,
    pub bias: Array2<f32>,
    pub norm: FeatureNorm,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains a softmax linear classifier on frozen features (standardized with
/// training statistics) with Adam, and reports train/test accuracy.
pub fn train_linear_probe(
    train: (&Array2<f32>, &[usize]),
    test: (&Array2<f32>, &[usize]),
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    use crate::train::{Adam, Optimizer};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let (xtr, ytr) = train;
    let (xte, yte) = test;
    if xtr.nrows() != ytr.len() || xte.nrows() != yte.len() || xtr.ncols() != xte.ncols() {
        return Err(shape_err!("probe features and labels disagree"));
    }
    if ytr.iter().chain(yte).any(|&y| y >= classes) {
        return Err(invalid!("probe label out of range"));
    }
    let norm = FeatureNorm::fit(xtr);
    let xtr = norm.apply(xtr);
    let xte = norm.apply(xte);
    let d = xtr.ncols();
    let mut store = ParamStore::<f32>::new();
    let w = store.add("probe.weight", Array2::zeros((d, classes)));
    let b = store.add("probe.bias", Array2::zeros((1, classes)));
    let mut opt = Adam::new(0.9, 0.999, config.weight_decay);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..xtr.nrows()).collect();
    let bs = config.batch_size.max(1);
    let mut losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(bs) {
            let x = xtr.select(Axis(0), chunk);
            let mut t = Array2::<f32>::zeros((chunk.len(), classes));
            for (r, &i) in chunk.iter().enumerate() {
                t[[r, ytr[i]]] = 1.0;
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.param(&store, w);
            let bv = g.param(&store, b);
            let logits = g.matmul(xv, wv);
            let logits = g.add_row(logits, bv);
            let loss = g.soft_cross_entropy(logits, &t);
            epoch_loss += g.scalar(loss) as f64;
            steps += 1;
            let grads = g.backward(loss).params(store.len());
            opt.step(&mut store, &grads, config.lr, &[1.0, 1.0]);
        }
        losses.push(epoch_loss / steps.max(1) as f64);
    }
    let predict = |x: &Array2<f32>| x.dot(store.get(w)) + store.get(b);
    Ok(ProbeResult {
        train_accuracy: accuracy(&predict(&xtr), ytr),
        test_accuracy: accuracy(&predict(&xte), yte),
        weight: store.get(w).clone(),
        bias: store.get(b).clone(),
        norm,
        losses,
    })
}
