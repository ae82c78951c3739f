//! Two-stage training schedule: base pre-training, base fine-tuning with
//! pseudo labels, and novel fine-tuning with projection distillation.

pub mod criterion;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{derived_rng, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::BinaryMask;
use crate::losses::{compose_bft, compose_bpt, compose_nft, compose_nft_without_kd, kd_projection_loss, LossTerms, LossWeights};
use crate::matching::{assign, cost_matrix, GtView, MatchWeights, PredView};
use crate::model::checkpoint::{hash_tensors, Checkpoint, Manifest};
use crate::model::{tensor_to_boxes, ClassifierKind, DenoisingQueries, UiFormer};
use crate::nn::Component;
use crate::pseudolabel::attention_map_from_tensor;
pub use criterion::{target_mask, Criterion, ImageTargets, PseudoSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    BasePretrain,
    BaseFinetune,
    NovelFinetune,
}

impl StageId {
    pub fn name(self) -> &'static str {
        match self {
            StageId::BasePretrain => "base_pretrain",
            StageId::BaseFinetune => "base_finetune",
            StageId::NovelFinetune => "novel_finetune",
        }
    }
}

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which components receive gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FreezeSpec {
    trainable: BTreeMap<Component, bool>,
}

impl FreezeSpec {
    pub fn only(components: &[Component]) -> Self {
        FreezeSpec {
            trainable: Component::ALL.iter().map(|c| (*c, components.contains(c))).collect(),
        }
    }

    pub fn all_trainable() -> Self {
        Self::only(&Component::ALL)
    }

    pub fn all_frozen() -> Self {
        Self::only(&[])
    }

    pub fn for_stage(stage: StageId) -> Self {
        match stage {
            StageId::BasePretrain => Self::all_trainable(),
            StageId::BaseFinetune => Self::only(&[Component::Projection, Component::ForegroundHead, Component::Classifier]),
            StageId::NovelFinetune => Self::only(&[Component::Projection, Component::Classifier]),
        }
    }

    /// Build from `(component name, trainable)` pairs; unnamed components are frozen.
    pub fn from_names<'a>(entries: impl IntoIterator<Item = (&'a str, bool)>) -> Result<Self> {
        let mut spec = Self::all_frozen();
        for (name, on) in entries {
            spec.trainable.insert(name.parse()?, on);
        }
        Ok(spec)
    }

    pub fn is_trainable(&self, c: Component) -> bool {
        self.trainable.get(&c).copied().unwrap_or(false)
    }

    pub fn trainable_components(&self) -> BTreeSet<Component> {
        self.trainable.iter().filter(|(_, on)| **on).map(|(c, _)| *c).collect()
    }
}

/// Parameters handed to the optimizer under `spec`; frozen ones get no optimizer state.
pub fn apply_freeze(model: &UiFormer, spec: &FreezeSpec) -> Vec<Var> {
    model
        .params()
        .iter()
        .filter(|(_, c, _)| spec.is_trainable(*c))
        .map(|(_, _, v)| v.clone())
        .collect()
}

/// Optimizer and schedule settings for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 1e-4,
            iterations: 100,
            batch_size: 2,
            weight_decay: 1e-4,
            lr_milestones: Vec::new(),
            lr_decay: 0.1,
            grad_clip: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings: {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| iteration >= m).count();
        self.learning_rate * self.lr_decay.powi(drops as i32)
    }
}

/// Stop once the moving-average total improves by less than `min_improvement` (relative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Convergence {
    pub window: usize,
    pub min_improvement: f64,
}

impl Default for Convergence {
    fn default() -> Self {
        Convergence {
            window: 50,
            min_improvement: 0.01,
        }
    }
}

/// A validated stage configuration. Denoising is only reachable in base
/// pre-training and distillation only in novel fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    stage: StageId,
    optim: OptimConfig,
    weights: LossWeights,
    seed: u64,
    dn_enabled: bool,
    kd_enabled: bool,
    pseudo_k: Option<usize>,
    convergence: Option<Convergence>,
}

impl StageConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        stage: StageId,
        optim: OptimConfig,
        weights: LossWeights,
        seed: u64,
        dn_enabled: bool,
        kd_enabled: bool,
        pseudo_k: Option<usize>,
        convergence: Option<Convergence>,
    ) -> Result<Self> {
        optim.validate()?;
        weights.validate()?;
        if dn_enabled && stage != StageId::BasePretrain {
            return Err(Error::Config(format!("denoising is only available in base pre-training, not {stage}")));
        }
        if kd_enabled && stage != StageId::NovelFinetune {
            return Err(Error::Config(format!("distillation is only available in novel fine-tuning, not {stage}")));
        }
        if pseudo_k.is_some() && stage != StageId::BaseFinetune {
            return Err(Error::Config(format!("pseudo labels are only available in base fine-tuning, not {stage}")));
        }
        if pseudo_k == Some(0) {
            return Err(Error::Config("pseudo-label k must be at least 1".into()));
        }
        if let Some(c) = convergence {
            if c.window == 0 || c.min_improvement < 0.0 {
                return Err(Error::Config(format!("invalid convergence rule {c:?}")));
            }
        }
        Ok(StageConfig {
            stage,
            optim,
            weights,
            seed,
            dn_enabled,
            kd_enabled,
            pseudo_k,
            convergence,
        })
    }

    pub fn base_pretrain(optim: OptimConfig, weights: LossWeights, seed: u64) -> Result<Self> {
        Self::new(StageId::BasePretrain, optim, weights, seed, true, false, None, None)
    }

    pub fn base_finetune(optim: OptimConfig, weights: LossWeights, seed: u64, pseudo_k: Option<usize>) -> Result<Self> {
        Self::new(StageId::BaseFinetune, optim, weights, seed, false, false, pseudo_k, None)
    }

    pub fn novel_finetune(
        optim: OptimConfig,
        weights: LossWeights,
        seed: u64,
        kd_enabled: bool,
        convergence: Option<Convergence>,
    ) -> Result<Self> {
        Self::new(StageId::NovelFinetune, optim, weights, seed, false, kd_enabled, None, convergence)
    }

    pub fn stage(&self) -> StageId {
        self.stage
    }

    pub fn optim(&self) -> &OptimConfig {
        &self.optim
    }

    pub fn dn_enabled(&self) -> bool {
        self.dn_enabled
    }

    pub fn kd_enabled(&self) -> bool {
        self.kd_enabled
    }

    pub fn pseudo_k(&self) -> Option<usize> {
        self.pseudo_k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLog {
    pub image_id: usize,
    pub prediction_index: usize,
    pub bbox: [f64; 4],
    pub objectness: f64,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: StageId,
    pub iter: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
    pub lr: f64,
    pub pseudo_count: usize,
    pub pseudo_labels: Vec<PseudoLog>,
}

pub struct StageOutcome {
    pub model: UiFormer,
    pub metrics: Vec<MetricRecord>,
    /// True when the convergence rule ended the stage before its budget.
    pub converged_early: bool,
}

impl StageOutcome {
    pub fn checkpoint(&self, config_hash: &str, seed: u64) -> Result<Checkpoint> {
        to_checkpoint(&self.model, self.metrics.first().map(|m| m.stage), config_hash, seed)
    }
}

pub fn to_checkpoint(model: &UiFormer, stage: Option<StageId>, config_hash: &str, seed: u64) -> Result<Checkpoint> {
    let manifest = Manifest {
        stage: stage.map(|s| s.name().to_string()).unwrap_or_else(|| "init".into()),
        model: model.config().clone(),
        num_classes: model.num_classes(),
        num_base: model.num_base(),
        unknown_class: model.unknown_class(),
        config_hash: config_hash.to_string(),
        seed,
    };
    Checkpoint::from_model(model, manifest)
}

fn frozen_hashes(model: &UiFormer, spec: &FreezeSpec) -> Result<BTreeMap<Component, String>> {
    let snap = model.snapshot()?;
    let mut out = BTreeMap::new();
    for c in Component::ALL.into_iter().filter(|c| !spec.is_trainable(*c)) {
        let prefix = format!("{}/", c.name());
        out.insert(c, hash_tensors(snap.iter().filter(|(k, _)| k.starts_with(&prefix)))?);
    }
    Ok(out)
}

/// Union of instance masks resampled to each projection level.
fn novel_level_masks(sample: &ImageSample, shapes: &[(usize, usize)]) -> Vec<BinaryMask> {
    let mut union = BinaryMask::zeros(sample.height, sample.width);
    for inst in &sample.instances {
        union.union_with(&inst.mask);
    }
    shapes.iter().map(|&(h, w)| union.downsample(h, w)).collect()
}

fn finite_check(terms: &BTreeMap<String, f64>, total: f64, iteration: usize) -> Result<()> {
    if let Some((k, _)) = terms.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            term: k.clone(),
            iteration,
        });
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            term: "total".into(),
            iteration,
        });
    }
    Ok(())
}

/// Scale gradients of `vars` so their global norm is at most `max_norm`.
fn clip_gradients(grads: &mut candle_core::backprop::GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

struct Loop<'a> {
    cfg: &'a StageConfig,
    freeze: FreezeSpec,
    teacher: Option<&'a UiFormer>,
    pseudo: Option<PseudoSettings>,
    class_name: &'static str,
}

impl Loop<'_> {
    fn image_terms(
        &self,
        model: &UiFormer,
        sample: &ImageSample,
        rng: &mut rand_chacha::ChaCha8Rng,
        logs: &mut Vec<PseudoLog>,
    ) -> Result<LossTerms> {
        let dn = self.cfg.dn_enabled.then(|| {
            let mc = model.config();
            DenoisingQueries::sample(&sample.instances, model.num_base(), mc.dn_box_noise, mc.dn_label_flip, rng)
        });
        let pred = model.forward_sample(sample, dn.as_ref())?;
        let targets = ImageTargets::new(&sample.instances, pred.mask_shape, model.dtype())?;
        let criterion = Criterion::new(self.cfg.weights);
        let map = match &self.pseudo {
            Some(_) => Some(attention_map_from_tensor(pred.backbone.final_grid(), sample.height, sample.width)?),
            None => None,
        };
        let pseudo = self.pseudo.as_ref().zip(map.as_ref());
        let out = criterion.image_losses(&pred, &targets, self.class_name, pseudo)?;
        logs.extend(out.pseudo.iter().map(|p| PseudoLog {
            image_id: sample.id,
            prediction_index: p.prediction_index,
            bbox: p.bbox.to_array(),
            objectness: p.objectness,
        }));
        let mut terms = out.terms;
        if self.cfg.dn_enabled && pred.denoising.is_none() {
            // nothing to denoise on an image without instances
            for name in ["dn_cls", "dn_box_l1", "dn_box_giou", "dn_mask_ce", "dn_mask_dice"] {
                terms.add(name, Tensor::zeros((), model.dtype(), &candle_core::Device::Cpu)?)?;
            }
        }
        if self.cfg.kd_enabled {
            let teacher = self.teacher.ok_or_else(|| Error::Config("distillation needs a teacher model".into()))?;
            let teacher_proj = teacher.project(&pred.backbone)?;
            let shapes = pred.projections.shapes()?;
            if teacher_proj.shapes()? != shapes {
                return Err(Error::Config("teacher and student projection shapes differ".into()));
            }
            let masks = novel_level_masks(sample, &shapes);
            terms.add("kd", kd_projection_loss(&pred.projections.levels, &teacher_proj.levels, &masks)?)?;
        }
        Ok(terms)
    }

    fn run(&self, model: &mut UiFormer, data: &[ImageSample], mut sink: Option<&mut dyn Write>) -> Result<(Vec<MetricRecord>, bool)> {
        let optim = &self.cfg.optim;
        let vars = apply_freeze(model, &self.freeze);
        let before = frozen_hashes(model, &self.freeze)?;
        let mut opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: optim.learning_rate,
                weight_decay: optim.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        let stage_index = self.cfg.stage as u64;
        let mut order_rng = derived_rng(self.cfg.seed, 2 * stage_index);
        let mut dn_rng = derived_rng(self.cfg.seed, 2 * stage_index + 1);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        let mut metrics = Vec::with_capacity(optim.iterations);
        let mut converged = false;
        let renormalize = model.classifier().kind() == ClassifierKind::Cosine && self.freeze.is_trainable(Component::Classifier);
        if data.is_empty() && optim.iterations > 0 {
            return Err(Error::Input(format!("{} has no training images", self.cfg.stage)));
        }
        for iteration in 0..optim.iterations {
            let mut terms = LossTerms::new();
            let mut logs = Vec::new();
            for _ in 0..optim.batch_size {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(&mut order_rng);
                    cursor = 0;
                }
                let sample = &data[order[cursor]];
                cursor += 1;
                terms.merge(self.image_terms(model, sample, &mut dn_rng, &mut logs)?)?;
            }
            terms.scale(1.0 / optim.batch_size as f64)?;
            let (total, report) = match self.cfg.stage {
                StageId::BasePretrain => compose_bpt(&terms)?,
                StageId::BaseFinetune => compose_bft(&terms)?,
                StageId::NovelFinetune if self.cfg.kd_enabled => compose_nft(&terms)?,
                StageId::NovelFinetune => compose_nft_without_kd(&terms)?,
            };
            finite_check(&report.terms, report.total, iteration)?;
            let lr = optim.lr_at(iteration);
            if !vars.is_empty() {
                let mut grads = total.backward()?;
                clip_gradients(&mut grads, &vars, optim.grad_clip)?;
                opt.set_learning_rate(lr);
                opt.step(&grads)?;
                if renormalize {
                    model.renormalize_classifier()?;
                }
            }
            let record = MetricRecord {
                stage: self.cfg.stage,
                iter: iteration,
                terms: report.terms,
                total: report.total,
                lr,
                pseudo_count: logs.len(),
                pseudo_labels: logs,
            };
            if let Some(w) = sink.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                writeln!(w).map_err(|e| Error::io("metrics stream", e))?;
            }
            metrics.push(record);
            if let Some(c) = self.cfg.convergence {
                if has_converged(&metrics, c) {
                    converged = true;
                    break;
                }
            }
        }
        let after = frozen_hashes(model, &self.freeze)?;
        for (c, h) in &before {
            if after.get(c) != Some(h) {
                return Err(Error::Integrity(format!("frozen component `{c}` changed during {}", self.cfg.stage)));
            }
        }
        Ok((metrics, converged))
    }
}

/// Moving-average rule: the last `window` mean improved on the previous one by less than the threshold.
pub fn has_converged(metrics: &[MetricRecord], rule: Convergence) -> bool {
    let n = metrics.len();
    let w = rule.window;
    if n < 2 * w {
        return false;
    }
    let mean = |s: &[MetricRecord]| s.iter().map(|m| m.total).sum::<f64>() / s.len() as f64;
    let recent = mean(&metrics[n - w..]);
    let previous = mean(&metrics[n - 2 * w..n - w]);
    previous - recent < rule.min_improvement * previous.abs()
}

fn check_classes(data: &[ImageSample], range: std::ops::Range<usize>, what: &str) -> Result<()> {
    for s in data {
        if let Some(c) = s.class_ids().find(|c| !range.contains(c)) {
            return Err(Error::Input(format!(
                "{what} image {} carries class {c} outside {}..{}",
                s.id, range.start, range.end
            )));
        }
    }
    Ok(())
}

fn expect_stage(ckpt: &Checkpoint, allowed: &[StageId], next: StageId) -> Result<()> {
    if allowed.iter().any(|s| s.name() == ckpt.manifest.stage) {
        return Ok(());
    }
    let wanted: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
    Err(Error::StageOrder(format!(
        "{next} needs a checkpoint from {}; got one from `{}`",
        wanted.join(" or "),
        ckpt.manifest.stage
    )))
}

/// Stage 1, step 1: every component trains on the base classes with denoising.
pub fn run_base_pretrain(
    mut model: UiFormer,
    base_set: &[ImageSample],
    cfg: &StageConfig,
    sink: Option<&mut dyn Write>,
) -> Result<StageOutcome> {
    if cfg.stage != StageId::BasePretrain {
        return Err(Error::Config(format!("run_base_pretrain given a {} config", cfg.stage)));
    }
    if model.num_classes() != model.num_base() || model.unknown_class().is_some() {
        return Err(Error::Config("pre-training starts from the base class space".into()));
    }
    check_classes(base_set, 0..model.num_base(), "base")?;
    let l = Loop {
        cfg,
        freeze: FreezeSpec::for_stage(StageId::BasePretrain),
        teacher: None,
        pseudo: None,
        class_name: "cls",
    };
    let (metrics, converged_early) = l.run(&mut model, base_set, sink)?;
    Ok(StageOutcome {
        model,
        metrics,
        converged_early,
    })
}

/// Stage 1, step 2: expand by the unknown class and tune projection, foreground head and classifier.
pub fn run_base_finetune(
    pretrained: &Checkpoint,
    base_set: &[ImageSample],
    cfg: &StageConfig,
    sink: Option<&mut dyn Write>,
) -> Result<StageOutcome> {
    if cfg.stage != StageId::BaseFinetune {
        return Err(Error::Config(format!("run_base_finetune given a {} config", cfg.stage)));
    }
    expect_stage(pretrained, &[StageId::BasePretrain], StageId::BaseFinetune)?;
    let mut model = pretrained.instantiate(DType::F32)?;
    check_classes(base_set, 0..model.num_base(), "base")?;
    let unknown = model.add_unknown_class()?;
    let l = Loop {
        cfg,
        freeze: FreezeSpec::for_stage(StageId::BaseFinetune),
        teacher: None,
        pseudo: cfg.pseudo_k.map(|k| PseudoSettings { unknown_class: unknown, k }),
        class_name: "pcls",
    };
    let (metrics, converged_early) = l.run(&mut model, base_set, sink)?;
    Ok(StageOutcome {
        model,
        metrics,
        converged_early,
    })
}

/// Features of the main-stage queries matched (by box and mask) to each support instance,
/// centred on the mean feature of all queries on the support images. Decoder features share a
/// strong common direction, so an uncentred mean would score every query high for every new class.
fn support_features(model: &UiFormer, novel_set: &[ImageSample], num_novel: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let b = model.num_base();
    let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_novel];
    let mut centre: Vec<f64> = Vec::new();
    let mut seen = 0usize;
    let weights = LossWeights::default();
    let mw = MatchWeights {
        class: 0.0,
        ..MatchWeights::default()
    };
    for sample in novel_set {
        if sample.instances.is_empty() {
            continue;
        }
        let pred = model.forward_sample(sample, None)?;
        let targets = ImageTargets::new(&sample.instances, pred.mask_shape, model.dtype())?;
        let boxes = tensor_to_boxes(&pred.main.boxes)?;
        let masks = pred.main.masks.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let feats = pred.main.features.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        for f in &feats {
            if centre.is_empty() {
                centre = vec![0.0; f.len()];
            }
            for (c, x) in centre.iter_mut().zip(f) {
                *c += x;
            }
            seen += 1;
        }
        let probs = vec![0f32; 1];
        let preds: Vec<PredView> = boxes
            .iter()
            .zip(&masks)
            .map(|(b, m)| PredView {
                class_probs: &probs,
                bbox: *b,
                mask: m,
            })
            .collect();
        let gts: Vec<GtView> = (0..targets.len())
            .map(|j| GtView {
                class_index: 0,
                bbox: targets.boxes[j],
                mask: &targets.masks[j],
            })
            .collect();
        let m = assign(&cost_matrix(&preds, &gts, &weights, &mw), gts.len())?;
        for (p, g) in m.pairs {
            out[targets.class_ids[g] - b].push(feats[p].clone());
        }
    }
    for c in centre.iter_mut() {
        *c /= seen.max(1) as f64;
    }
    for f in out.iter_mut().flatten() {
        for (x, c) in f.iter_mut().zip(&centre) {
            *x -= c;
        }
    }
    Ok(out)
}

/// Stage 2: drop the unknown class, append the novel classes and tune projection and classifier,
/// distilling projection features from the frozen base model.
pub fn run_novel_finetune(
    base: &Checkpoint,
    novel_set: &[ImageSample],
    num_novel: usize,
    cfg: &StageConfig,
    sink: Option<&mut dyn Write>,
) -> Result<StageOutcome> {
    if cfg.stage != StageId::NovelFinetune {
        return Err(Error::Config(format!("run_novel_finetune given a {} config", cfg.stage)));
    }
    expect_stage(base, &[StageId::BasePretrain, StageId::BaseFinetune], StageId::NovelFinetune)?;
    if num_novel == 0 {
        return Err(Error::Config("novel fine-tuning needs at least one novel class".into()));
    }
    let teacher = base.instantiate(DType::F32)?;
    let mut model = base.instantiate(DType::F32)?;
    let b = model.num_base();
    check_classes(novel_set, b..b + num_novel, "novel")?;
    model.drop_unknown_class()?;
    let supports = support_features(&model, novel_set, num_novel)?;
    model.expand_class_space(b + num_novel, Some(&supports))?;
    let l = Loop {
        cfg,
        freeze: FreezeSpec::for_stage(StageId::NovelFinetune),
        teacher: Some(&teacher),
        pseudo: None,
        class_name: "cls",
    };
    let (metrics, converged_early) = l.run(&mut model, novel_set, sink)?;
    Ok(StageOutcome {
        model,
        metrics,
        converged_early,
    })
}

/// Run an optimizer over `model` with an arbitrary freeze spec and loss; used to audit freezing.
pub fn optimize_with(model: &mut UiFormer, spec: &FreezeSpec, lr: f64, steps: usize, loss: impl Fn(&UiFormer) -> Result<Tensor>) -> Result<()> {
    let vars = apply_freeze(model, spec);
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr,
            ..ParamsAdamW::default()
        },
    )?;
    for _ in 0..steps {
        let l = loss(model)?;
        let grads = l.backward()?;
        if !vars.is_empty() {
            opt.step(&grads)?;
        }
    }
    Ok(())
}
