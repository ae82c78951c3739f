//! Set-prediction losses for one image: matching, target construction and
//! the per-stage terms that feed the stage compositions.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::Instance;
use crate::error::Result;
use crate::geometry::{BBox, BinaryMask};
use crate::losses::{box_loss_rows, focal_loss_elements, mask_loss_rows, LossTerms, LossWeights};
use crate::matching::{assign, cost_matrix, GtView, MatchResult, MatchWeights, PredView};
use crate::model::{boxes_to_tensor, tensor_to_boxes, PredictionSet, StageOutput};
use crate::nn;
use crate::pseudolabel::{search_pseudo_gt, AttentionMap, PseudoLabel};

/// Ground truth of one image, with masks resampled to the prediction grid.
#[derive(Debug, Clone)]
pub struct ImageTargets {
    pub class_ids: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub masks: Vec<BinaryMask>,
    box_tensor: Tensor,
    mask_tensor: Tensor,
}

/// Area-average downsampling; an instance too thin to survive keeps its best-covered cell.
pub fn target_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let m = mask.downsample(height, width);
    if !m.is_empty() {
        return m;
    }
    let fractions = mask.area_fractions(height, width);
    let best = fractions
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0;
    let mut m = BinaryMask::zeros(height, width);
    m.set(best / width, best % width, true);
    m
}

impl ImageTargets {
    pub fn new(instances: &[Instance], mask_shape: (usize, usize), dtype: DType) -> Result<Self> {
        let (h, w) = mask_shape;
        let masks: Vec<BinaryMask> = instances.iter().map(|i| target_mask(&i.mask, h, w)).collect();
        let boxes: Vec<BBox> = instances.iter().map(|i| i.bbox).collect();
        let flat: Vec<f32> = masks.iter().flat_map(|m| m.to_f32()).collect();
        let mask_tensor = Tensor::from_vec(flat, (masks.len(), h * w), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(ImageTargets {
            class_ids: instances.iter().map(|i| i.class_id).collect(),
            box_tensor: boxes_to_tensor(&boxes, dtype, &Device::Cpu)?,
            boxes,
            masks,
            mask_tensor,
        })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }
}

/// How pseudo "unknown" labels are produced for the main and auxiliary stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoSettings {
    pub unknown_class: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Criterion {
    pub weights: LossWeights,
    pub match_weights: MatchWeights,
}

/// Detached host copies of a prediction block, for matching.
struct HostView {
    probs: Vec<Vec<f32>>,
    boxes: Vec<BBox>,
    masks: Vec<Vec<f32>>,
}

impl HostView {
    fn new(logits: &Tensor, boxes: &Tensor, masks: &Tensor) -> Result<Self> {
        Ok(HostView {
            probs: nn::sigmoid(&logits.detach())?.to_dtype(DType::F32)?.to_vec2::<f32>()?,
            boxes: tensor_to_boxes(&boxes.detach())?,
            masks: masks.detach().to_dtype(DType::F32)?.to_vec2::<f32>()?,
        })
    }
}

fn index_tensor(idx: &[usize]) -> Result<Tensor> {
    Ok(Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?)
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &Device::Cpu)?)
}

/// Output of [`Criterion::image_losses`].
#[derive(Debug, Clone, Default)]
pub struct ImageLosses {
    pub terms: LossTerms,
    /// Pseudo labels chosen for the main decoder stage.
    pub pseudo: Vec<PseudoLabel>,
}

impl Criterion {
    pub fn new(weights: LossWeights) -> Self {
        Criterion {
            weights,
            match_weights: MatchWeights::from_loss(&weights),
        }
    }

    fn matching(&self, view: &HostView, targets: &ImageTargets, class_of: &dyn Fn(usize) -> usize) -> Result<MatchResult> {
        let preds: Vec<PredView> = (0..view.boxes.len())
            .map(|i| PredView {
                class_probs: &view.probs[i],
                bbox: view.boxes[i],
                mask: &view.masks[i],
            })
            .collect();
        let gts: Vec<GtView> = (0..targets.len())
            .map(|j| GtView {
                class_index: class_of(j),
                bbox: targets.boxes[j],
                mask: &targets.masks[j],
            })
            .collect();
        let cost = cost_matrix(&preds, &gts, &self.weights, &self.match_weights);
        assign(&cost, targets.len())
    }

    /// Class, box and mask terms for one block of predictions under a fixed assignment.
    ///
    /// `extra_positives` are `(prediction, class)` pairs that only enter the class target.
    #[allow(clippy::too_many_arguments)]
    fn set_terms(
        &self,
        terms: &mut LossTerms,
        prefix: &str,
        class_name: &str,
        logits: &Tensor,
        boxes: &Tensor,
        masks: &Tensor,
        targets: &ImageTargets,
        matching: &MatchResult,
        class_of: &dyn Fn(usize) -> usize,
        extra_positives: &[(usize, usize)],
    ) -> Result<()> {
        let dtype = logits.dtype();
        let (q, c) = logits.dims2()?;
        let norm = targets.len().max(1) as f64;
        let mut t = vec![0f32; q * c];
        for &(p, g) in &matching.pairs {
            t[p * c + class_of(g)] = 1.0;
        }
        for &(p, k) in extra_positives {
            t[p * c + k] = 1.0;
        }
        let t = Tensor::from_vec(t, (q, c), &Device::Cpu)?.to_dtype(dtype)?;
        let w = &self.weights;
        let cls = (focal_loss_elements(logits, &t, w.focal_alpha, w.focal_gamma)?.sum_all()? * (w.class / norm))?;
        terms.add(format!("{prefix}{class_name}"), cls)?;
        let (l1, giou, ce, dice) = if matching.pairs.is_empty() {
            (zero(dtype)?, zero(dtype)?, zero(dtype)?, zero(dtype)?)
        } else {
            let pi = index_tensor(&matching.pairs.iter().map(|p| p.0).collect::<Vec<_>>())?;
            let gi = index_tensor(&matching.pairs.iter().map(|p| p.1).collect::<Vec<_>>())?;
            let (l1, giou) = box_loss_rows(&boxes.index_select(&pi, 0)?, &targets.box_tensor.index_select(&gi, 0)?, w)?;
            let (ce, dice) = mask_loss_rows(&masks.index_select(&pi, 0)?, &targets.mask_tensor.index_select(&gi, 0)?, w)?;
            (
                (l1.sum_all()? / norm)?,
                (giou.sum_all()? / norm)?,
                (ce.sum_all()? / norm)?,
                (dice.sum_all()? / norm)?,
            )
        };
        terms.add(format!("{prefix}box_l1"), l1)?;
        terms.add(format!("{prefix}box_giou"), giou)?;
        terms.add(format!("{prefix}mask_ce"), ce)?;
        terms.add(format!("{prefix}mask_dice"), dice)?;
        Ok(())
    }

    fn decoder_stage(
        &self,
        terms: &mut LossTerms,
        prefix: &str,
        class_name: &str,
        stage: &StageOutput,
        targets: &ImageTargets,
        pseudo: Option<(&PseudoSettings, &AttentionMap)>,
    ) -> Result<Vec<PseudoLabel>> {
        let view = HostView::new(&stage.class_logits, &stage.boxes, &stage.masks)?;
        let class_of = |g: usize| targets.class_ids[g];
        let matching = self.matching(&view, targets, &class_of)?;
        let labels = match pseudo {
            Some((s, map)) => search_pseudo_gt(&view.boxes, &matching, map, s.k, s.unknown_class)?,
            None => Vec::new(),
        };
        let extra: Vec<(usize, usize)> = labels.iter().map(|l| (l.prediction_index, l.class_id)).collect();
        self.set_terms(
            terms,
            prefix,
            class_name,
            &stage.class_logits,
            &stage.boxes,
            &stage.masks,
            targets,
            &matching,
            &class_of,
            &extra,
        )?;
        Ok(labels)
    }

    /// Every loss term of one image for the given stage configuration.
    ///
    /// `class_name` is `cls` or `pcls`. Denoising terms are added when the
    /// prediction set carries a denoising pass (queries built from `targets` in order).
    pub fn image_losses(
        &self,
        pred: &PredictionSet,
        targets: &ImageTargets,
        class_name: &str,
        pseudo: Option<(&PseudoSettings, &AttentionMap)>,
    ) -> Result<ImageLosses> {
        let mut terms = LossTerms::new();
        let labels = self.decoder_stage(&mut terms, "", class_name, &pred.main, targets, pseudo)?;
        for (i, stage) in pred.aux.iter().enumerate() {
            self.decoder_stage(&mut terms, &format!("aux_{i}_"), class_name, stage, targets, pseudo)?;
        }
        self.interm_terms(&mut terms, pred, targets)?;
        if let Some(dn) = &pred.denoising {
            let identity = MatchResult {
                pairs: (0..targets.len()).map(|i| (i, i)).collect(),
                unmatched_predictions: Vec::new(),
            };
            let class_of = |g: usize| targets.class_ids[g];
            self.set_terms(
                &mut terms,
                "dn_",
                "cls",
                &dn.class_logits,
                &dn.boxes,
                &dn.masks,
                targets,
                &identity,
                &class_of,
                &[],
            )?;
        }
        Ok(ImageLosses { terms, pseudo: labels })
    }

    /// Losses on the selected encoder tokens; a binary head scores foreground only.
    fn interm_terms(&self, terms: &mut LossTerms, pred: &PredictionSet, targets: &ImageTargets) -> Result<()> {
        let enc = &pred.encoder;
        let idx = index_tensor(&pred.selection.indices)?;
        let logits = enc.class_logits.index_select(&idx, 0)?;
        let boxes = enc.boxes.index_select(&idx, 0)?;
        let masks = enc.masks.index_select(&idx, 0)?;
        let binary = logits.dims2()?.1 == 1;
        let class_of = |g: usize| if binary { 0 } else { targets.class_ids[g] };
        let view = HostView::new(&logits, &boxes, &masks)?;
        let matching = self.matching(&view, targets, &class_of)?;
        self.set_terms(terms, "interm_", "cls", &logits, &boxes, &masks, targets, &matching, &class_of, &[])
    }
}
