//! The miniature UIFormer network.
//!
//! Pipeline: conv backbone -> 1x1 projection -> dense transformer encoder with
//! foreground / box / mask heads -> top-q foreground query selection with
//! mask-derived anchors -> transformer decoder with iterative box refinement
//! -> swappable classifier.

mod backbone;
pub mod checkpoint;
mod classifier;
mod transformer;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneFeatures, MultiScaleFeatures, Projection};
pub use classifier::{normalize_rows, Classifier, ClassifierKind, PRIOR_BIAS};
use transformer::{DecoderLayer, EncoderLayer};

use crate::dataset::{ImageSample, Instance};
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BBox, BinaryMask};
use crate::nn::{self, Component, Conv2d, Init, LayerNorm, Linear, Mlp, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub backbone_channels: [usize; 4],
    pub width: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub queries: usize,
    /// `binary` (class-agnostic foreground head) or `linear` (shared classifier).
    pub encoder_head: ClassifierKind,
    /// `linear` or `cosine`.
    pub decoder_classifier: ClassifierKind,
    pub cosine_scale: f64,
    pub mask_threshold: f64,
    pub dn_box_noise: f64,
    pub dn_label_flip: f64,
    /// Cut gradients into selected query content and between refinement stages.
    pub stop_gradients: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            backbone_channels: [16, 32, 64, 96],
            width: 64,
            heads: 4,
            ffn_dim: 128,
            encoder_layers: 2,
            decoder_layers: 3,
            queries: 20,
            encoder_head: ClassifierKind::Binary,
            decoder_classifier: ClassifierKind::Cosine,
            cosine_scale: 20.0,
            mask_threshold: 0.5,
            dn_box_noise: 0.1,
            dn_label_flip: 0.2,
            stop_gradients: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return Err(Error::Config(format!("image size {} must be a positive multiple of 16", self.image_size)));
        }
        if self.width == 0 || self.width % self.heads.max(1) != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!("width {} must be divisible by 4 and by {} heads", self.width, self.heads)));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("at least one decoder layer is required".into()));
        }
        if self.queries == 0 || self.queries > self.num_tokens() {
            return Err(Error::Config(format!(
                "query count {} must be in 1..={} (encoder tokens)",
                self.queries,
                self.num_tokens()
            )));
        }
        if !matches!(self.encoder_head, ClassifierKind::Binary | ClassifierKind::Linear) {
            return Err(Error::Config("encoder head must be binary or linear".into()));
        }
        if !matches!(self.decoder_classifier, ClassifierKind::Linear | ClassifierKind::Cosine) {
            return Err(Error::Config("decoder classifier must be linear or cosine".into()));
        }
        if self.cosine_scale <= 0.0 || !(0.0..1.0).contains(&self.mask_threshold) {
            return Err(Error::Config("cosine scale must be positive and mask threshold in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        [4, 8, 16].iter().map(|s| (self.image_size / s, self.image_size / s)).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.level_shapes().iter().map(|(h, w)| h * w).sum()
    }

    /// Resolution of predicted masks (the stride-4 grid).
    pub fn mask_shape(&self) -> (usize, usize) {
        self.level_shapes()[0]
    }
}

/// Encoder tokens and the per-token head outputs.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(T, d)`
    pub memory: Tensor,
    /// `(T, d)` positional + level embeddings.
    pub pos: Tensor,
    pub level_shapes: Vec<(usize, usize)>,
    /// `(T, 1)` for a binary head, `(T, C)` for a linear one.
    pub class_logits: Tensor,
    /// Selection score per token (foreground logit, or max class logit).
    pub foreground_scores: Vec<f32>,
    /// `(T, 4)` center-format boxes.
    pub boxes: Tensor,
    /// `(T, M)` mask probabilities on the stride-4 grid.
    pub masks: Tensor,
    /// `(d, M)` pixel embedding shared by every mask prediction.
    pub pixel_embedding: Tensor,
}

impl EncoderOutput {
    pub fn num_tokens(&self) -> usize {
        self.foreground_scores.len()
    }
}

/// Initial decoder queries.
#[derive(Debug, Clone)]
pub struct QuerySelection {
    pub indices: Vec<usize>,
    /// `(Q, d)` token features, detached when `stop_gradients` is set.
    pub content: Tensor,
    /// `(Q, 4)`, built from values and never differentiable.
    pub anchors: Tensor,
    /// Whether each anchor came from the token's predicted mask.
    pub from_mask: Vec<bool>,
}

/// Predictions from one decoder stage.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// `(Q, d)` normalized query features fed to the heads.
    pub features: Tensor,
    /// `(Q, C)`
    pub class_logits: Tensor,
    /// `(Q, 4)`
    pub boxes: Tensor,
    /// `(Q, M)` probabilities.
    pub masks: Tensor,
}

/// Noised ground-truth queries for denoising training.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoisingQueries {
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
}

impl DenoisingQueries {
    /// Jitter boxes (`w, h` by up to `±noise`, centers by up to `noise` of the size)
    /// and replace each label with a random class with probability `flip`.
    pub fn sample<R: Rng>(instances: &[Instance], num_classes: usize, noise: f64, flip: f64, rng: &mut R) -> Self {
        let mut labels = Vec::with_capacity(instances.len());
        let mut boxes = Vec::with_capacity(instances.len());
        for inst in instances {
            let b = inst.bbox;
            let mut j = || rng.gen_range(-noise..=noise);
            let w = (b.w * (1.0 + j())).clamp(1e-3, 1.0);
            let h = (b.h * (1.0 + j())).clamp(1e-3, 1.0);
            let cx = (b.cx + j() * b.w).clamp(0.0, 1.0);
            let cy = (b.cy + j() * b.h).clamp(0.0, 1.0);
            boxes.push(BBox { cx, cy, w, h });
            let label = if rng.gen_bool(flip) { rng.gen_range(0..num_classes) } else { inst.class_id };
            labels.push(label);
        }
        DenoisingQueries { labels, boxes }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub main: StageOutput,
    /// Stages before the last one; length equals the decoder depth.
    pub aux: Vec<StageOutput>,
    pub encoder: EncoderOutput,
    pub selection: QuerySelection,
    pub denoising: Option<StageOutput>,
    pub backbone: BackboneFeatures,
    pub projections: MultiScaleFeatures,
    pub mask_shape: (usize, usize),
}

/// Indices of the `q` highest scores; equal scores keep index order.
pub fn top_k_indices(scores: &[f32], q: usize) -> Result<Vec<usize>> {
    if q > scores.len() {
        return Err(Error::Config(format!("cannot select {q} queries from {} tokens", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(q);
    Ok(idx)
}

/// Row-major `(N, 4)` tensor of boxes.
pub fn boxes_to_tensor(boxes: &[BBox], dtype: DType, device: &Device) -> Result<Tensor> {
    let v: Vec<f64> = boxes.iter().flat_map(|b| b.to_array()).collect();
    Ok(Tensor::from_vec(v, (boxes.len(), 4), device)?.to_dtype(dtype)?)
}

pub fn tensor_to_boxes(t: &Tensor) -> Result<Vec<BBox>> {
    let rows = t.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|r| BBox {
            cx: r[0],
            cy: r[1],
            w: r[2].max(1e-6),
            h: r[3].max(1e-6),
        })
        .collect())
}

pub fn image_tensor(sample: &ImageSample, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(sample.chw(), (1, 3, sample.height, sample.width), &Device::Cpu)?.to_dtype(dtype)?)
}

pub struct UiFormer {
    config: ModelConfig,
    params: ParamStore,
    num_base: usize,
    unknown_class: Option<usize>,
    backbone: Backbone,
    projection: Projection,
    encoder_layers: Vec<EncoderLayer>,
    level_embed: Tensor,
    foreground: Option<Linear>,
    box_head: Mlp,
    mask_embed: Mlp,
    pixel_conv: Conv2d,
    query_pos: Mlp,
    decoder_layers: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    label_embed: Tensor,
    classifier: Classifier,
}

impl UiFormer {
    /// Fresh model over `num_base` classes.
    pub fn new(config: &ModelConfig, num_base: usize, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        if num_base == 0 {
            return Err(Error::Config("at least one base class is required".into()));
        }
        let d = config.width;
        let mut ps = ParamStore::new(seed, dtype);
        let backbone = Backbone::new(&mut ps, &config.backbone_channels)?;
        let projection = Projection::new(&mut ps, &config.backbone_channels, d)?;
        let encoder_layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut ps, i, d, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        let level_embed = ps.create(Component::Encoder, "level_embed", &[3, d], Init::Uniform(0.1))?;
        let foreground = match config.encoder_head {
            ClassifierKind::Binary => Some(Linear::with_bias_init(
                &mut ps,
                Component::ForegroundHead,
                "logit",
                d,
                1,
                Init::Const(PRIOR_BIAS),
            )?),
            _ => None,
        };
        let box_head = Mlp::new_zero_last(&mut ps, Component::BoxHead, "mlp", &[d, d, 4])?;
        let mask_embed = Mlp::new(&mut ps, Component::MaskHead, "embed", &[d, d, d])?;
        let pixel_conv = Conv2d::new(&mut ps, Component::MaskHead, "pixel", d, d, 1, 1, 0)?;
        let query_pos = Mlp::new(&mut ps, Component::Decoder, "query_pos", &[2 * d, d, d])?;
        let decoder_layers = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut ps, i, d, config.heads, config.ffn_dim))
            .collect::<Result<_>>()?;
        let decoder_norm = LayerNorm::new(&mut ps, Component::Decoder, "norm", d)?;
        let label_embed = ps.create(Component::Decoder, "label_embed", &[num_base, d], Init::Uniform(1.0))?;
        let classifier = Classifier::new(&mut ps, config.decoder_classifier, num_base, d, config.cosine_scale)?;
        Ok(UiFormer {
            config: config.clone(),
            params: ps,
            num_base,
            unknown_class: None,
            backbone,
            projection,
            encoder_layers,
            level_embed,
            foreground,
            box_head,
            mask_embed,
            pixel_conv,
            query_pos,
            decoder_layers,
            decoder_norm,
            label_embed,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn num_base(&self) -> usize {
        self.num_base
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn unknown_class(&self) -> Option<usize> {
        self.unknown_class
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    /// `image: (1, 3, H, W)`
    pub fn extract_features(&self, image: &Tensor) -> Result<BackboneFeatures> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "image is {c}x{h}x{w}, model expects 3x{0}x{0}",
                self.config.image_size
            )));
        }
        self.backbone.forward(image)
    }

    pub fn project(&self, features: &BackboneFeatures) -> Result<MultiScaleFeatures> {
        self.projection.forward(features)
    }

    /// Flattened tokens `(T, d)` and their position embeddings `(T, d)`.
    pub fn tokens(&self, ms: &MultiScaleFeatures) -> Result<(Tensor, Tensor)> {
        let d = self.config.width;
        let mut toks = Vec::with_capacity(ms.levels.len());
        let mut pos = Vec::with_capacity(ms.levels.len());
        for (i, level) in ms.levels.iter().enumerate() {
            let (_, c, h, w) = level.dims4()?;
            toks.push(level.reshape((c, h * w))?.t()?);
            let centers = nn::grid_centers(h, w, self.dtype(), self.params.device())?;
            let p = nn::sine_embedding(&centers, d / 2)?.broadcast_add(&self.level_embed.i(i)?.unsqueeze(0)?)?;
            pos.push(p);
        }
        Ok((Tensor::cat(&toks, 0)?.contiguous()?, Tensor::cat(&pos, 0)?))
    }

    /// Run the encoder stack on already flattened tokens.
    pub fn encode_tokens(&self, tokens: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.encoder_layers {
            x = layer.forward(&x, pos)?;
        }
        Ok(x)
    }

    fn token_anchors(&self, shapes: &[(usize, usize)]) -> Result<Tensor> {
        let mut v = Vec::new();
        for (level, &(h, w)) in shapes.iter().enumerate() {
            let size = 0.1 * (1 << level) as f64;
            for r in 0..h {
                for c in 0..w {
                    v.extend([(c as f64 + 0.5) / w as f64, (r as f64 + 0.5) / h as f64, size, size]);
                }
            }
        }
        let n = v.len() / 4;
        Ok(Tensor::from_vec(v, (n, 4), self.params.device())?.to_dtype(self.dtype())?)
    }

    fn refine_boxes(&self, features: &Tensor, reference: &Tensor) -> Result<Tensor> {
        let delta = self.box_head.forward(features)?;
        nn::sigmoid(&(delta + nn::inverse_sigmoid(reference)?)?)
    }

    fn predict_masks(&self, features: &Tensor, pixel: &Tensor) -> Result<Tensor> {
        let emb = self.mask_embed.forward(features)?;
        nn::sigmoid(&emb.matmul(pixel)?)
    }

    pub fn encode(&self, ms: &MultiScaleFeatures) -> Result<EncoderOutput> {
        let shapes = ms.shapes()?;
        let (tokens, pos) = self.tokens(ms)?;
        let memory = self.encode_tokens(&tokens, &pos)?;
        let d = self.config.width;
        let (h0, w0) = shapes[0];
        let level0 = memory.narrow(0, 0, h0 * w0)?.t()?.reshape((1, d, h0, w0))?;
        let pixel_embedding = self.pixel_conv.forward(&level0)?.reshape((d, h0 * w0))?;
        let class_logits = match &self.foreground {
            Some(fg) => fg.forward(&memory)?,
            None => self.classifier.classify(&memory)?,
        };
        let foreground_scores = class_logits
            .max(D::Minus1)?
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?;
        let anchors = self.token_anchors(&shapes)?;
        let boxes = self.refine_boxes(&memory, &anchors)?;
        let masks = self.predict_masks(&memory, &pixel_embedding)?;
        Ok(EncoderOutput {
            memory,
            pos,
            level_shapes: shapes,
            class_logits,
            foreground_scores,
            boxes,
            masks,
            pixel_embedding,
        })
    }

    /// Top-q tokens by foreground score, anchored on the tight box of their predicted mask.
    pub fn select_queries(&self, enc: &EncoderOutput) -> Result<QuerySelection> {
        let indices = top_k_indices(&enc.foreground_scores, self.config.queries)?;
        let idx = Tensor::from_vec(
            indices.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            indices.len(),
            self.params.device(),
        )?;
        let content = self.cut(enc.memory.index_select(&idx, 0)?);
        let masks = enc.masks.index_select(&idx, 0)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let head_boxes = tensor_to_boxes(&enc.boxes.index_select(&idx, 0)?)?;
        let (mh, mw) = enc.level_shapes[0];
        let mut anchors = Vec::with_capacity(indices.len());
        let mut from_mask = Vec::with_capacity(indices.len());
        for (m, fallback) in masks.iter().zip(head_boxes) {
            let bin = BinaryMask::from_soft(mh, mw, m, self.config.mask_threshold as f32)?;
            match mask_to_box(&bin) {
                Ok(b) => {
                    anchors.push(b);
                    from_mask.push(true);
                }
                Err(Error::EmptyMask) => {
                    anchors.push(fallback);
                    from_mask.push(false);
                }
                Err(e) => return Err(e),
            }
        }
        let anchors = boxes_to_tensor(&anchors, self.dtype(), self.params.device())?;
        Ok(QuerySelection {
            indices,
            content,
            anchors,
            from_mask,
        })
    }

    fn cut(&self, t: Tensor) -> Tensor {
        if self.config.stop_gradients {
            t.detach()
        } else {
            t
        }
    }

    fn predict_stage(&self, tgt: &Tensor, reference: &Tensor, pixel: &Tensor) -> Result<StageOutput> {
        let features = self.decoder_norm.forward(tgt)?;
        Ok(StageOutput {
            class_logits: self.classifier.classify(&features)?,
            boxes: self.refine_boxes(&features, reference)?,
            masks: self.predict_masks(&features, pixel)?,
            features,
        })
    }

    /// Run the decoder from `content: (Q, d)` and `anchors: (Q, 4)`.
    ///
    /// Returns `L + 1` stages: the initial queries followed by every layer.
    pub fn decode(&self, content: &Tensor, anchors: &Tensor, enc: &EncoderOutput) -> Result<Vec<StageOutput>> {
        let d = self.config.width;
        let mut stages = Vec::with_capacity(self.decoder_layers.len() + 1);
        let first = self.predict_stage(content, anchors, &enc.pixel_embedding)?;
        let mut reference = self.cut(first.boxes.clone());
        stages.push(first);
        let mut tgt = content.clone();
        for layer in &self.decoder_layers {
            let qpos = self.query_pos.forward(&nn::sine_embedding(&reference, d / 2)?)?;
            tgt = layer.forward(&tgt, &qpos, &enc.memory, &enc.pos)?;
            let out = self.predict_stage(&tgt, &reference, &enc.pixel_embedding)?;
            reference = self.cut(out.boxes.clone());
            stages.push(out);
        }
        Ok(stages)
    }

    /// Decoder pass over noised ground-truth queries; returns the last stage.
    pub fn decode_denoising(&self, dn: &DenoisingQueries, enc: &EncoderOutput) -> Result<StageOutput> {
        if dn.labels.iter().any(|&l| l >= self.num_base) {
            return Err(Error::Input("denoising label outside the base class space".into()));
        }
        let idx = Tensor::from_vec(
            dn.labels.iter().map(|&l| l as u32).collect::<Vec<_>>(),
            dn.labels.len(),
            self.params.device(),
        )?;
        let content = self.label_embed.index_select(&idx, 0)?;
        let anchors = boxes_to_tensor(&dn.boxes, self.dtype(), self.params.device())?;
        let mut stages = self.decode(&content, &anchors, enc)?;
        Ok(stages.pop().expect("decoder yields at least one stage"))
    }

    pub fn forward(&self, image: &Tensor, dn: Option<&DenoisingQueries>) -> Result<PredictionSet> {
        let backbone = self.extract_features(image)?;
        let projections = self.project(&backbone)?;
        let encoder = self.encode(&projections)?;
        let selection = self.select_queries(&encoder)?;
        let mut stages = self.decode(&selection.content, &selection.anchors, &encoder)?;
        let main = stages.pop().expect("decoder yields at least one stage");
        let denoising = match dn {
            Some(q) if !q.labels.is_empty() => Some(self.decode_denoising(q, &encoder)?),
            _ => None,
        };
        Ok(PredictionSet {
            main,
            aux: stages,
            mask_shape: encoder.level_shapes[0],
            encoder,
            selection,
            denoising,
            backbone,
            projections,
        })
    }

    pub fn forward_sample(&self, sample: &ImageSample, dn: Option<&DenoisingQueries>) -> Result<PredictionSet> {
        self.forward(&image_tensor(sample, self.dtype())?, dn)
    }

    /// Append classes; see [`Classifier::expand`] for how new rows start.
    pub fn expand_class_space(&mut self, new_count: usize, supports: Option<&[Vec<Vec<f64>>]>) -> Result<()> {
        self.classifier.expand(&mut self.params, new_count, supports)
    }

    /// Append the pseudo "unknown object" class at id `B`.
    pub fn add_unknown_class(&mut self) -> Result<usize> {
        if self.unknown_class.is_some() || self.num_classes() != self.num_base {
            return Err(Error::Unsupported("the unknown class can only follow the base classes".into()));
        }
        self.expand_class_space(self.num_base + 1, None)?;
        self.unknown_class = Some(self.num_base);
        Ok(self.num_base)
    }

    /// Remove the unknown class row, leaving the base classes.
    pub fn drop_unknown_class(&mut self) -> Result<()> {
        if let Some(u) = self.unknown_class.take() {
            self.classifier.truncate(&mut self.params, u)?;
        }
        Ok(())
    }

    pub fn renormalize_classifier(&self) -> Result<()> {
        self.classifier.renormalize(&self.params)
    }

    /// Parameter snapshot keyed `component/path`.
    pub fn snapshot(&self) -> Result<std::collections::BTreeMap<String, Tensor>> {
        self.params.snapshot()
    }

    pub(crate) fn set_class_layout(&mut self, num_classes: usize, unknown: Option<usize>) -> Result<()> {
        if num_classes > self.num_classes() {
            self.expand_class_space(num_classes, None)?;
        }
        self.unknown_class = unknown;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}
