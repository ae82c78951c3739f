//! Loss terms and their stage-specific compositions.
//!
//! Every term is built from differentiable tensor ops. Composition validates
//! which families are present for the stage before summing.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Loss weights; defaults follow the usual Mask DINO settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mask_ce: f64,
    pub mask_dice: f64,
    pub l1: f64,
    pub giou: f64,
    pub class: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mask_ce: 5.0,
            mask_dice: 5.0,
            l1: 5.0,
            giou: 2.0,
            class: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.mask_ce,
            self.mask_dice,
            self.l1,
            self.giou,
            self.class,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be strictly positive: {self:?}")))
        }
    }
}

const PROB_EPS: f64 = 1e-8;

/// Probability clamp that stays representable below 1 in the tensor's precision.
fn prob_eps(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => PROB_EPS,
        _ => 1e-6,
    }
}

/// Element-wise sigmoid focal loss (not reduced).
pub fn focal_loss_elements(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::Shape(format!("focal: logits {:?} vs targets {:?}", logits.dims(), targets.dims())));
    }
    let p = candle_nn::ops::sigmoid(logits)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    // p_t = p t + (1 - p)(1 - t)
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let eps = prob_eps(p_t.dtype());
    let p_t = p_t.clamp(eps, 1.0 - eps)?;
    let alpha_t = (targets.affine(alpha, 0.0)? + one_minus_t.affine(1.0 - alpha, 0.0)?)?;
    let modulator = p_t.affine(-1.0, 1.0)?.powf(gamma)?;
    Ok(alpha_t.mul(&modulator)?.mul(&p_t.log()?)?.neg()?)
}

/// Mean sigmoid focal loss over all elements.
pub fn focal_loss(logits: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    Ok(focal_loss_elements(logits, targets, alpha, gamma)?.mean_all()?)
}

/// Mean pixel binary cross-entropy of probabilities against a binary target.
pub fn mask_bce(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let eps = prob_eps(pred.dtype());
    let p = pred.clamp(eps, 1.0 - eps)?;
    let pos = (gt * p.log()?)?;
    let neg = (gt.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean(D::Minus1)?)
}

/// Dice loss with unit smoothing, per row: `pred`, `gt` are `(N, M)` -> `(N,)`.
pub fn dice_loss_rows(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inter = (pred * gt)?.sum(D::Minus1)?;
    let denom = ((pred.sum(D::Minus1)? + gt.sum(D::Minus1)?)? + 1.0)?;
    Ok(((inter * 2.0)? + 1.0)?.div(&denom)?.affine(-1.0, 1.0)?)
}

/// Dice loss of a single soft mask against a binary mask, both flattened.
pub fn dice_loss(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let inter = (pred * gt)?.sum_all()?;
    let denom = ((pred.sum_all()? + gt.sum_all()?)? + 1.0)?;
    Ok(((inter * 2.0)? + 1.0)?.div(&denom)?.affine(-1.0, 1.0)?)
}

/// `lambda_ce * BCE + lambda_dice * dice` per row.
pub fn mask_loss_rows(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("mask loss: prediction {:?} vs target {:?}", pred.dims(), gt.dims())));
    }
    let ce = (mask_bce(pred, gt)? * w.mask_ce)?;
    let dice = (dice_loss_rows(pred, gt)? * w.mask_dice)?;
    Ok((ce, dice))
}

/// Weighted mask loss of one soft mask against a binary mask of the same resolution.
pub fn mask_loss(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("mask loss: prediction {:?} vs target {:?}", pred.dims(), gt.dims())));
    }
    let n = pred.elem_count();
    let (ce, dice) = mask_loss_rows(&pred.reshape((1, n))?, &gt.reshape((1, n))?, w)?;
    Ok((ce + dice)?.sum_all()?)
}

fn corners(b: &Tensor) -> Result<[Tensor; 4]> {
    let cx = b.narrow(1, 0, 1)?;
    let cy = b.narrow(1, 1, 1)?;
    let hw = (b.narrow(1, 2, 1)? * 0.5)?;
    let hh = (b.narrow(1, 3, 1)? * 0.5)?;
    Ok([(&cx - &hw)?, (&cy - &hh)?, (&cx + &hw)?, (&cy + &hh)?])
}

/// `1 - GIoU` per row for `(N, 4)` center-form boxes.
pub fn giou_loss_rows(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let [ax0, ay0, ax1, ay1] = corners(pred)?;
    let [bx0, by0, bx1, by1] = corners(gt)?;
    let iw = (ax1.minimum(&bx1)? - ax0.maximum(&bx0)?)?.relu()?;
    let ih = (ay1.minimum(&by1)? - ay0.maximum(&by0)?)?.relu()?;
    let inter = (iw * ih)?;
    let area_a = ((&ax1 - &ax0)? * (&ay1 - &ay0)?)?;
    let area_b = ((&bx1 - &bx0)? * (&by1 - &by0)?)?;
    let union = ((area_a + area_b)? - &inter)?;
    let ew = (ax1.maximum(&bx1)? - ax0.minimum(&bx0)?)?;
    let eh = (ay1.maximum(&by1)? - ay0.minimum(&by0)?)?;
    let enclosure = (ew * eh)?;
    let iou = inter.div(&union)?;
    let penalty = (&enclosure - &union)?.div(&enclosure)?;
    Ok((iou - penalty)?.affine(-1.0, 1.0)?.squeeze(1)?)
}

/// Weighted box terms per row: `(lambda_1 * mean |d|, lambda_giou * (1 - GIoU))`.
pub fn box_loss_rows(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<(Tensor, Tensor)> {
    if pred.dims() != gt.dims() || pred.dim(D::Minus1)? != 4 {
        return Err(Error::Shape(format!("box loss: {:?} vs {:?}", pred.dims(), gt.dims())));
    }
    let l1 = ((pred - gt)?.abs()?.mean(1)? * w.l1)?;
    let giou = (giou_loss_rows(pred, gt)? * w.giou)?;
    Ok((l1, giou))
}

/// Box loss of a single `(4,)` prediction.
pub fn box_loss(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let (l1, giou) = box_loss_rows(&pred.reshape((1, 4))?, &gt.reshape((1, 4))?, w)?;
    Ok((l1 + giou)?.sum_all()?)
}

/// Background-restricted projection distillation.
///
/// Each level `i` contributes `sum (1 - m) ||f_student - f_teacher||^2 / (2 N_i)`
/// with `N_i = sum (1 - m)`; a level with `N_i == 0` contributes 0.
/// Features are `(1, c, h, w)` or `(c, h, w)`; masks are `h x w` novel-union masks.
pub fn kd_projection_loss(student: &[Tensor], teacher: &[Tensor], novel_masks: &[BinaryMask]) -> Result<Tensor> {
    if student.len() != teacher.len() || student.len() != novel_masks.len() || student.is_empty() {
        return Err(Error::Shape(format!(
            "kd: {} student levels, {} teacher levels, {} masks",
            student.len(),
            teacher.len(),
            novel_masks.len()
        )));
    }
    let dtype = student[0].dtype();
    let device = student[0].device().clone();
    let mut total = Tensor::zeros((), dtype, &device)?;
    for ((s, t), m) in student.iter().zip(teacher).zip(novel_masks) {
        if s.dims() != t.dims() {
            return Err(Error::Shape(format!("kd: student {:?} vs teacher {:?}", s.dims(), t.dims())));
        }
        let dims = s.dims();
        let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape(format!("kd: mask {}x{} vs features {h}x{w}", m.height(), m.width())));
        }
        let keep: Vec<f64> = m.data().iter().map(|&v| 1.0 - v as f64).collect();
        let n_keep: f64 = keep.iter().sum();
        if n_keep == 0.0 {
            continue;
        }
        let c = s.elem_count() / (h * w);
        let diff = (s.reshape((c, h * w))? - t.detach().reshape((c, h * w))?)?;
        let per_pixel = diff.sqr()?.sum(0)?;
        let keep = Tensor::from_vec(keep, h * w, &device)?.to_dtype(dtype)?;
        let level = ((per_pixel * keep)?.sum_all()? / (2.0 * n_keep))?;
        total = (total + level)?;
    }
    Ok(total)
}

/// Named, already weighted scalar loss terms for one batch.
#[derive(Debug, Clone, Default)]
pub struct LossTerms {
    terms: BTreeMap<String, Tensor>,
}

impl LossTerms {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add to an existing term or create it.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        let v = match self.terms.remove(&name) {
            Some(prev) => (prev + value)?,
            None => value,
        };
        self.terms.insert(name, v);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.terms.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.terms.keys()
    }

    /// Add every term of `other` into `self`.
    pub fn merge(&mut self, other: LossTerms) -> Result<()> {
        for (k, v) in other.terms {
            self.add(k, v)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn scale(&mut self, factor: f64) -> Result<()> {
        for v in self.terms.values_mut() {
            *v = (&*v * factor)?;
        }
        Ok(())
    }

    fn has_family(&self, prefix: &str) -> bool {
        self.terms.keys().any(|k| family_matches(k, prefix))
    }
}

fn family_matches(name: &str, family: &str) -> bool {
    name == family || name.starts_with(&format!("{family}_"))
}

/// Scalar summary of one batch: every term plus their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossReport {
    pub fn from_values(terms: BTreeMap<String, f64>) -> Self {
        let total = terms.values().sum();
        LossReport { terms, total }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.get(name).copied()
    }

    /// Sum of every term in a family (`cls`, `mask`, `box`, `interm`, `dn`, `aux`, `kd`, `pcls`).
    pub fn family(&self, family: &str) -> f64 {
        self.terms
            .iter()
            .filter(|(k, _)| family_matches(k, family))
            .map(|(_, v)| v)
            .sum()
    }
}

/// Which families a stage requires and which it forbids.
struct Recipe {
    name: &'static str,
    required: &'static [&'static str],
    forbidden: &'static [&'static str],
}

const BPT: Recipe = Recipe {
    name: "base pre-training",
    required: &["cls", "mask", "box", "interm", "dn", "aux"],
    forbidden: &["pcls", "kd"],
};

const BFT: Recipe = Recipe {
    name: "base fine-tuning",
    required: &["pcls", "mask", "box", "interm", "aux"],
    forbidden: &["cls", "dn", "kd"],
};

const NFT: Recipe = Recipe {
    name: "novel fine-tuning",
    required: &["cls", "mask", "box", "interm", "aux", "kd"],
    forbidden: &["pcls", "dn"],
};

const NFT_WITHOUT_KD: Recipe = Recipe {
    name: "novel fine-tuning without distillation",
    required: &["cls", "mask", "box", "interm", "aux"],
    forbidden: &["pcls", "dn", "kd"],
};

const FAMILIES: [&str; 8] = ["cls", "pcls", "mask", "box", "interm", "dn", "aux", "kd"];

fn compose(terms: &LossTerms, recipe: &Recipe) -> Result<(Tensor, LossReport)> {
    for name in terms.names() {
        if !FAMILIES.iter().any(|f| family_matches(name, f)) {
            return Err(Error::Composition(format!("unknown loss term `{name}`")));
        }
    }
    for f in recipe.forbidden {
        if terms.has_family(f) {
            return Err(Error::Composition(format!("`{f}` terms are not allowed in {}", recipe.name)));
        }
    }
    for f in recipe.required {
        if !terms.has_family(f) {
            return Err(Error::Composition(format!("{} requires `{f}` terms", recipe.name)));
        }
    }
    let mut values = BTreeMap::new();
    let mut total: Option<Tensor> = None;
    for (k, v) in &terms.terms {
        let v = if v.rank() == 0 { v.clone() } else { v.sum_all()? };
        values.insert(k.clone(), v.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        total = Some(match total {
            Some(t) => (t + v)?,
            None => v,
        });
    }
    let total = total.ok_or_else(|| Error::Composition("no loss terms".into()))?;
    Ok((total, LossReport::from_values(values)))
}

/// `L_cls + L_mask + L_box + L_interm + L_dn + L_aux`
pub fn compose_bpt(terms: &LossTerms) -> Result<(Tensor, LossReport)> {
    compose(terms, &BPT)
}

/// `L_pcls + L_mask + L_box + L_interm + L_aux`; denoising terms are rejected.
pub fn compose_bft(terms: &LossTerms) -> Result<(Tensor, LossReport)> {
    compose(terms, &BFT)
}

/// `L_cls + L_mask + L_box + L_interm + L_aux + L_kd`; denoising terms are rejected.
pub fn compose_nft(terms: &LossTerms) -> Result<(Tensor, LossReport)> {
    compose(terms, &NFT)
}

/// The novel fine-tuning sum with the distillation term ablated away.
pub fn compose_nft_without_kd(terms: &LossTerms) -> Result<(Tensor, LossReport)> {
    compose(terms, &NFT_WITHOUT_KD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn focal_hand_value_and_asymptote() {
        let l = scalar(&focal_loss(&t1(&[0.0]), &t1(&[1.0]), 0.25, 2.0).unwrap());
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.04332).abs() < 1e-5);
        let big = scalar(&focal_loss(&t1(&[40.0]), &t1(&[1.0]), 0.25, 2.0).unwrap());
        assert!(big < 1e-12);
    }

    #[test]
    fn focal_reduces_to_bce() {
        let x = [-2.0, -0.3, 0.0, 0.7, 3.0];
        let bce = |x: f64, t: f64| {
            let p = 1.0 / (1.0 + (-x).exp());
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        };
        // positives only: alpha = 1, gamma = 0 is plain BCE
        let ones = [1.0; 5];
        let l = scalar(&focal_loss(&t1(&x), &t1(&ones), 1.0, 0.0).unwrap());
        let expected: f64 = x.iter().map(|&v| bce(v, 1.0)).sum::<f64>() / 5.0;
        assert!((l - expected).abs() < 1e-12);
        // mixed targets: alpha = 0.5 weights both classes equally
        let t = [1.0, 0.0, 1.0, 0.0, 0.0];
        let l = scalar(&focal_loss(&t1(&x), &t1(&t), 0.5, 0.0).unwrap()) * 2.0;
        let expected: f64 = x.iter().zip(t).map(|(&v, t)| bce(v, t)).sum::<f64>() / 5.0;
        assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn dice_cases() {
        let gt = t1(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(scalar(&dice_loss(&gt, &gt).unwrap()), 0.0);
        let z = t1(&[0.0; 4]);
        assert_eq!(scalar(&dice_loss(&z, &z).unwrap()), 0.0);
        // 2x2 grid, 2 gt pixels, prediction covers one of them
        let pred = t1(&[1.0, 0.0, 0.0, 0.0]);
        let l = scalar(&dice_loss(&pred, &gt).unwrap());
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dice_strictly_decreases_toward_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<f64> = (0..16).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let start: Vec<f64> = (0..16).map(|_| rng.gen()).collect();
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let a = step as f64 / 10.0;
            let p: Vec<f64> = start.iter().zip(&gt).map(|(s, g)| s + a * (g - s)).collect();
            let l = scalar(&dice_loss(&t1(&p), &t1(&gt)).unwrap());
            assert!(l < prev || (step == 10 && l == 0.0));
            prev = l;
        }
    }

    #[test]
    fn mask_loss_reductions() {
        let w = LossWeights::default();
        let gt = t1(&[1.0, 0.0, 0.0, 1.0]);
        assert!(scalar(&mask_loss(&gt, &gt, &w).unwrap()) < 1e-6);
        let pred = t1(&[0.7, 0.2, 0.4, 0.9]);
        let no_dice = LossWeights { mask_dice: 1e-300, ..w };
        let l = scalar(&mask_loss(&pred, &gt, &no_dice).unwrap());
        let bce = scalar(&mask_bce(&pred.reshape((1, 4)).unwrap(), &gt.reshape((1, 4)).unwrap()).unwrap().sum_all().unwrap());
        assert!((l - 5.0 * bce).abs() < 1e-12);
        assert!(matches!(mask_loss(&pred, &t1(&[1.0; 3]), &w), Err(Error::Shape(_))));
    }

    #[test]
    fn mask_loss_matches_termwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = LossWeights::default();
        let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.01..0.99)).collect();
        let g: Vec<f64> = (0..16).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        let bce: f64 = p.iter().zip(&g).map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())).sum::<f64>() / 16.0;
        let inter: f64 = p.iter().zip(&g).map(|(p, g)| p * g).sum();
        let dice = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + g.iter().sum::<f64>() + 1.0);
        let l = scalar(&mask_loss(&t1(&p), &t1(&g), &w).unwrap());
        assert!((l - (5.0 * bce + 5.0 * dice)).abs() < 1e-12);
    }

    #[test]
    fn box_loss_cases() {
        let w = LossWeights::default();
        let a = t1(&[0.5, 0.4, 0.2, 0.3]);
        assert_eq!(scalar(&box_loss(&a, &a, &w).unwrap()), 0.0);
        let b = t1(&[0.6, 0.5, 0.3, 0.4]);
        let l1_only = LossWeights { giou: 1e-300, ..w };
        assert!((scalar(&box_loss(&a, &b, &l1_only).unwrap()) - 0.5).abs() < 1e-12);
        let (l1, giou) = box_loss_rows(
            &t1(&[0.2, 0.5, 0.2, 0.2]).reshape((1, 4)).unwrap(),
            &t1(&[0.8, 0.5, 0.2, 0.2]).reshape((1, 4)).unwrap(),
            &w,
        )
        .unwrap();
        assert!(scalar(&l1.sum_all().unwrap()) > 0.0 && scalar(&giou.sum_all().unwrap()) > 0.0);
    }

    #[test]
    fn tensor_giou_agrees_with_geometry() {
        use crate::geometry::{giou_loss, BBox};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let v: Vec<f64> = (0..8)
                .map(|i| if i % 4 < 2 { rng.gen_range(0.1..0.9) } else { rng.gen_range(0.05..0.5) })
                .collect();
            let t = giou_loss_rows(&t1(&v[..4]).reshape((1, 4)).unwrap(), &t1(&v[4..]).reshape((1, 4)).unwrap()).unwrap();
            let a = BBox::new(v[0], v[1], v[2], v[3]).unwrap();
            let b = BBox::new(v[4], v[5], v[6], v[7]).unwrap();
            assert!((scalar(&t.sum_all().unwrap()) - giou_loss(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn kd_hand_case_and_guards() {
        let s = [Tensor::new(&[[[2.0f64]]], &Device::Cpu).unwrap()];
        let t = [Tensor::new(&[[[0.0f64]]], &Device::Cpu).unwrap()];
        let m = [BinaryMask::zeros(1, 1)];
        assert_eq!(scalar(&kd_projection_loss(&s, &t, &m).unwrap()), 2.0);
        assert_eq!(scalar(&kd_projection_loss(&s, &s, &m).unwrap()), 0.0);
        let full = [BinaryMask::from_fn(1, 1, |_, _| true)];
        assert_eq!(scalar(&kd_projection_loss(&s, &t, &full).unwrap()), 0.0);
        let wrong = [Tensor::zeros((1, 2, 1), DType::F64, &Device::Cpu).unwrap()];
        assert!(matches!(kd_projection_loss(&s, &wrong, &m), Err(Error::Shape(_))));
    }

    fn term(v: f64) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn bpt_terms(values: &[f64]) -> LossTerms {
        let names = [
            "cls", "mask_ce", "mask_dice", "box_l1", "box_giou", "interm_cls", "interm_box_l1", "interm_mask_ce",
            "dn_cls", "dn_box_l1", "dn_mask_ce", "aux_0_cls", "aux_1_box_l1",
        ];
        let mut t = LossTerms::new();
        for (n, v) in names.iter().zip(values.iter().cycle()) {
            t.add(*n, term(*v)).unwrap();
        }
        t
    }

    #[test]
    fn bpt_composition() {
        let (total, report) = compose_bpt(&bpt_terms(&[0.0])).unwrap();
        assert_eq!(scalar(&total), 0.0);
        assert_eq!(report.total, 0.0);

        let mut t = bpt_terms(&[0.0]);
        t.add("cls", term(1.3)).unwrap();
        assert!((compose_bpt(&t).unwrap().1.total - 1.3).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals: Vec<f64> = (0..13).map(|_| rng.gen_range(0.0..3.0)).collect();
        let (total, report) = compose_bpt(&bpt_terms(&vals)).unwrap();
        let resum: f64 = report.terms.values().sum();
        assert!((report.total - resum).abs() <= 1e-9 * resum);
        assert!((scalar(&total) - resum).abs() <= 1e-9 * resum);
        assert_eq!(report.terms.len(), 13);
    }

    #[test]
    fn composition_guards() {
        let mut t = bpt_terms(&[1.0]);
        t.add("kd", term(1.0)).unwrap();
        assert!(matches!(compose_bpt(&t), Err(Error::Composition(_))));

        // dn is mandatory in pre-training and rejected afterwards
        assert!(compose_bft(&bpt_terms(&[1.0])).is_err());
        let mut missing = LossTerms::new();
        missing.add("cls", term(1.0)).unwrap();
        assert!(matches!(compose_bpt(&missing), Err(Error::Composition(_))));
        let mut unknown = bpt_terms(&[1.0]);
        unknown.add("bogus", term(1.0)).unwrap();
        assert!(compose_bpt(&unknown).is_err());
    }

    fn finetune_terms(first: &str, kd: Option<f64>, others: f64) -> LossTerms {
        let mut t = LossTerms::new();
        for n in [first, "mask_ce", "mask_dice", "box_l1", "box_giou", "interm_cls", "interm_box_giou", "aux_0_cls"] {
            t.add(n, term(others)).unwrap();
        }
        if let Some(k) = kd {
            t.add("kd", term(k)).unwrap();
        }
        t
    }

    #[test]
    fn bft_and_nft_composition() {
        assert_eq!(compose_bft(&finetune_terms("pcls", None, 0.0)).unwrap().1.total, 0.0);
        let mut with_dn = finetune_terms("pcls", None, 0.0);
        with_dn.add("dn_cls", term(0.1)).unwrap();
        assert!(matches!(compose_bft(&with_dn), Err(Error::Composition(_))));

        assert_eq!(compose_nft(&finetune_terms("cls", Some(0.0), 0.0)).unwrap().1.total, 0.0);
        assert_eq!(compose_nft(&finetune_terms("cls", Some(2.0), 0.0)).unwrap().1.total, 2.0);
        let mut with_dn = finetune_terms("cls", Some(2.0), 0.0);
        with_dn.add("dn_box_l1", term(0.1)).unwrap();
        assert!(matches!(compose_nft(&with_dn), Err(Error::Composition(_))));
        assert!(compose_nft(&finetune_terms("cls", None, 1.0)).is_err());
        assert_eq!(compose_nft_without_kd(&finetune_terms("cls", None, 1.0)).unwrap().1.total, 8.0);
        assert!(compose_nft_without_kd(&finetune_terms("cls", Some(0.0), 0.0)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = finetune_terms("pcls", None, 0.0);
        for n in ["pcls", "mask_ce", "box_giou", "aux_2_mask_dice"] {
            t.add(n, term(rng.gen_range(0.0..2.0))).unwrap();
        }
        let (total, r) = compose_bft(&t).unwrap();
        let resum: f64 = r.terms.values().sum();
        assert!((scalar(&total) - resum).abs() <= 1e-9 * resum);
        let mut t = finetune_terms("cls", Some(rng.gen()), rng.gen());
        t.add("interm_mask_dice", term(0.4)).unwrap();
        let (total, r) = compose_nft(&t).unwrap();
        assert!((scalar(&total) - r.terms.values().sum::<f64>()).abs() <= 1e-9 * r.total);
    }
}
