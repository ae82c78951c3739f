//! Independent oracles and randomized checks shared by the integration tests
//! and the acceptance runner.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uiformer::config::{DataConfig, RunConfig};
use uiformer::dataset::{generate_corpus_with, CorpusConfig, ImageSample};
use uiformer::eval::{average_precision, coco_thresholds, DetectionResult, GroundTruth, Interpolation, MatchKind};
use uiformer::geometry::{iou, render_box, BBox, BinaryMask};
use uiformer::losses::{box_loss_rows, dice_loss, focal_loss, kd_projection_loss, LossWeights};
use uiformer::matching::{assign, MatchResult};
use uiformer::model::checkpoint::{tensor_bits, Checkpoint};
use uiformer::model::{DenoisingQueries, ModelConfig, UiFormer};
use uiformer::pseudolabel::{objectness, search_pseudo_gt, AttentionMap};
use uiformer::trainer::{Criterion, FreezeSpec, ImageTargets, StageId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

/// `||a - b|| / max(||a||, ||b||)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn tensor(values: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(values.to_vec(), shape, &Device::Cpu).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Analytic vs central-difference gradient of `f` at `x`.
pub fn gradient_error(x: &[f64], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&tensor(x, shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let h = 1e-6;
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = scalar(&f(&tensor(&p, shape)));
            p[i] -= 2.0 * h;
            let down = scalar(&f(&tensor(&p, shape)));
            (up - down) / (2.0 * h)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect()
}

/// Worst relative error over `trials` random focal-loss inputs.
pub fn focal_gradient_trials(trials: usize) -> f64 {
    let mut r = rng(101);
    (0..trials)
        .map(|_| {
            let (n, c) = (r.gen_range(1..6), r.gen_range(1..5));
            let x = uniform(&mut r, n * c, -4.0, 4.0);
            let t = tensor(&binary(&mut r, n * c), &[n, c]);
            let (alpha, gamma) = (r.gen_range(0.1..0.9), r.gen_range(0.0..3.0));
            gradient_error(&x, &[n, c], |l| focal_loss(l, &t, alpha, gamma).unwrap())
        })
        .fold(0.0, f64::max)
}

pub fn dice_gradient_trials(trials: usize) -> f64 {
    let mut r = rng(102);
    (0..trials)
        .map(|_| {
            let m = r.gen_range(2..20);
            let x = uniform(&mut r, m, 0.02, 0.98);
            let gt = tensor(&binary(&mut r, m), &[m]);
            gradient_error(&x, &[m], |p| dice_loss(p, &gt).unwrap())
        })
        .fold(0.0, f64::max)
}

fn random_boxes(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| [r.gen_range(0.2..0.8), r.gen_range(0.2..0.8), r.gen_range(0.05..0.5), r.gen_range(0.05..0.5)])
        .collect()
}

pub fn box_gradient_trials(trials: usize) -> f64 {
    let mut r = rng(103);
    let w = LossWeights::default();
    (0..trials)
        .map(|_| {
            let n = r.gen_range(1..5);
            let pred = random_boxes(&mut r, n);
            let gt = tensor(&random_boxes(&mut r, n), &[n, 4]);
            gradient_error(&pred, &[n, 4], |p| {
                let (l1, giou) = box_loss_rows(p, &gt, &w).unwrap();
                (l1 + giou).unwrap().sum_all().unwrap()
            })
        })
        .fold(0.0, f64::max)
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| r.gen_bool(p))
}

pub fn kd_gradient_trials(trials: usize) -> f64 {
    let mut r = rng(104);
    (0..trials)
        .map(|_| {
            let c = r.gen_range(1..4);
            let shapes = [(4usize, 4usize), (2, 2)];
            let masks: Vec<BinaryMask> = shapes.iter().map(|&(h, w)| random_mask(&mut r, h, w, 0.3)).collect();
            let teacher: Vec<Tensor> = shapes
                .iter()
                .map(|&(h, w)| tensor(&uniform(&mut r, c * h * w, -1.0, 1.0), &[c, h, w]))
                .collect();
            let first = uniform(&mut r, c * 16, -1.0, 1.0);
            let second = tensor(&uniform(&mut r, c * 4, -1.0, 1.0), &[c, 2, 2]);
            gradient_error(&first, &[c, 4, 4], |s| {
                kd_projection_loss(&[s.clone(), second.clone()], &teacher, &masks).unwrap()
            })
        })
        .fold(0.0, f64::max)
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        backbone_channels: [4, 6, 8, 8],
        width: 16,
        heads: 2,
        ffn_dim: 24,
        encoder_layers: 1,
        decoder_layers: 2,
        queries: 6,
        ..ModelConfig::default()
    }
}

pub fn tiny_corpus(n: usize, classes: usize, seed: u64) -> Vec<ImageSample> {
    let cfg = CorpusConfig {
        image_size: 32,
        max_instances: 3,
        ..CorpusConfig::default()
    };
    generate_corpus_with(&cfg, n, classes, seed, 0).unwrap()
}

/// Every pre-training loss term of one image, in double precision.
fn model_terms(model: &UiFormer, sample: &ImageSample, dn: &DenoisingQueries) -> BTreeMap<String, Tensor> {
    let pred = model.forward_sample(sample, Some(dn)).unwrap();
    let targets = ImageTargets::new(&sample.instances, pred.mask_shape, DType::F64).unwrap();
    let out = Criterion::new(LossWeights::default()).image_losses(&pred, &targets, "cls", None).unwrap();
    let names: Vec<String> = out.terms.names().cloned().collect();
    names
        .into_iter()
        .map(|n| {
            let t = out.terms.get(&n).unwrap().sum_all().unwrap();
            (n, t)
        })
        .collect()
}

/// End-to-end probe on a 32x32 image: for every loss term, analytic gradients
/// of 16 random parameter entries against central differences. Returns the
/// worst relative error and the term it came from.
pub fn end_to_end_gradient_error(seed: u64) -> (f64, String) {
    let cfg = ModelConfig {
        stop_gradients: false,
        ..tiny_model_config()
    };
    let model = UiFormer::new(&cfg, 3, seed, DType::F64).unwrap();
    let sample = tiny_corpus(1, 3, seed).remove(0);
    let dn = DenoisingQueries::sample(&sample.instances, 3, 0.1, 0.2, &mut rng(seed));
    let mut r = rng(seed ^ 0xabc);
    let vars: Vec<(String, Var)> = model.params().iter().map(|(k, _, v)| (k.clone(), v.clone())).collect();
    // zero-initialised layers make equal predictions and tied matchings; move to a generic point
    for (_, var) in &vars {
        let t = var.as_tensor();
        let v: Vec<f64> = t
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
            .into_iter()
            .map(|x| x + r.gen_range(-0.05..0.05))
            .collect();
        var.set(&tensor(&v, t.dims())).unwrap();
    }
    let probes: Vec<(Var, usize)> = (0..16)
        .map(|_| {
            let (_, var) = &vars[r.gen_range(0..vars.len())];
            (var.clone(), r.gen_range(0..var.as_tensor().elem_count()))
        })
        .collect();

    let terms = model_terms(&model, &sample, &dn);
    let mut analytic: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, t) in &terms {
        let grads = t.backward().unwrap();
        let g = probes
            .iter()
            .map(|(var, i)| {
                grads
                    .get(var.as_tensor())
                    .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[*i])
                    .unwrap_or(0.0)
            })
            .collect();
        analytic.insert(name.clone(), g);
    }

    let h = 1e-6;
    let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (var, i) in &probes {
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().dims().to_vec();
        let eval_at = |delta: f64| {
            let mut v = original.clone();
            v[*i] += delta;
            var.set(&tensor(&v, &shape)).unwrap();
            model_terms(&model, &sample, &dn)
        };
        let up = eval_at(h);
        let down = eval_at(-h);
        var.set(&tensor(&original, &shape)).unwrap();
        for name in terms.keys() {
            let d = (scalar(&up[name]) - scalar(&down[name])) / (2.0 * h);
            numeric.entry(name.clone()).or_default().push(d);
        }
    }
    terms
        .keys()
        .map(|n| (relative_error(&analytic[n], &numeric[n]), n.clone()))
        .fold((0.0, String::new()), |a, b| if b.0 > a.0 { b } else { a })
}

// ---------------------------------------------------------------- distillation

pub struct KdChecks {
    pub identity: f64,
    pub masked_perturbation: f64,
    pub hand_case: f64,
}

/// Identity (loss of equal projections), change under masked perturbations, and the 1x1 hand case.
pub fn kd_checks(trials: usize) -> KdChecks {
    let mut r = rng(105);
    let mut identity: f64 = 0.0;
    let mut masked: f64 = 0.0;
    for _ in 0..trials {
        let c = r.gen_range(1..4);
        let shapes = [(4usize, 4usize), (2, 2), (1, 1)];
        let masks: Vec<BinaryMask> = shapes.iter().map(|&(h, w)| random_mask(&mut r, h, w, 0.4)).collect();
        let student: Vec<Vec<f64>> = shapes.iter().map(|&(h, w)| uniform(&mut r, c * h * w, -2.0, 2.0)).collect();
        let teacher: Vec<Tensor> = shapes
            .iter()
            .map(|&(h, w)| tensor(&uniform(&mut r, c * h * w, -2.0, 2.0), &[c, h, w]))
            .collect();
        let to_t = |v: &[Vec<f64>]| -> Vec<Tensor> { v.iter().zip(&shapes).map(|(x, &(h, w))| tensor(x, &[c, h, w])).collect() };
        let s = to_t(&student);
        identity = identity.max(scalar(&kd_projection_loss(&s, &s, &masks).unwrap()).abs());
        let base = scalar(&kd_projection_loss(&s, &teacher, &masks).unwrap());
        let mut perturbed = student.clone();
        for (lvl, &(h, w)) in shapes.iter().enumerate() {
            for ch in 0..c {
                for p in 0..h * w {
                    if masks[lvl].data()[p] == 1 {
                        perturbed[lvl][ch * h * w + p] += r.gen_range(-5.0..5.0);
                    }
                }
            }
        }
        let moved = scalar(&kd_projection_loss(&to_t(&perturbed), &teacher, &masks).unwrap());
        masked = masked.max((moved - base).abs());
    }
    let hand = scalar(
        &kd_projection_loss(&[tensor(&[2.0], &[1, 1, 1])], &[tensor(&[0.0], &[1, 1, 1])], &[BinaryMask::zeros(1, 1)]).unwrap(),
    );
    KdChecks {
        identity,
        masked_perturbation: masked,
        hand_case: hand,
    }
}

// ---------------------------------------------------------------- assignment

/// Exhaustive minimum over injective assignments; pairs sorted by prediction index.
pub fn brute_force_assignment(cost: &[Vec<f64>], g: usize) -> (f64, Vec<(usize, usize)>) {
    let p = cost.len();
    let k = p.min(g);
    let mut best = (f64::INFINITY, Vec::new());
    // enumerate ordered selections of k predictions for the first k of the chosen ground truths
    let gts: Vec<usize> = (0..g).collect();
    let preds: Vec<usize> = (0..p).collect();
    for gset in combinations(&gts, k) {
        for pset in permutations(&preds, k) {
            let mut pairs: Vec<(usize, usize)> = pset.iter().copied().zip(gset.iter().copied()).collect();
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
            if total < best.0 {
                best = (total, pairs);
            }
        }
    }
    if k == 0 {
        best.0 = 0.0;
    }
    best
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        for mut rest in combinations(&items[i + 1..], k - 1) {
            rest.insert(0, x);
            out.push(rest);
        }
    }
    out
}

fn permutations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for (i, &x) in items.iter().enumerate() {
        let rest: Vec<usize> = items.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
        for mut tail in permutations(&rest, k - 1) {
            tail.insert(0, x);
            out.push(tail);
        }
    }
    out
}

/// Number of random matrices (P, G <= 6) where the solver disagrees with enumeration.
pub fn assignment_mismatches(trials: usize) -> usize {
    let mut r = rng(201);
    (0..trials)
        .filter(|_| {
            let (p, g) = (r.gen_range(1..=6), r.gen_range(1..=6));
            let cost: Vec<Vec<f64>> = (0..p).map(|_| uniform(&mut r, g, -2.0, 6.0)).collect();
            let got = assign(&cost, g).unwrap();
            let (best, pairs) = brute_force_assignment(&cost, g);
            got.pairs != pairs || got.total_cost(&cost) != best
        })
        .count()
}

// ---------------------------------------------------------------- average precision

/// Reference AP: every prefix of the ranking is re-matched from scratch, and
/// interpolated precision is the maximum over all points at or beyond each recall level.
pub fn reference_ap(
    results: &[DetectionResult],
    gts: &[GroundTruth],
    thresholds: &[f64],
    kind: MatchKind,
    interp: Interpolation,
) -> BTreeMap<usize, f64> {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class_id).collect();
    let mut out = BTreeMap::new();
    for c in classes {
        let class_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == c).collect();
        let mut dets: Vec<&DetectionResult> = results.iter().filter(|d| d.class_id == c).collect();
        // stable: equal confidences keep input order
        dets.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        let npos = class_gts.len();
        let mut sum = 0.0;
        for &t in thresholds {
            let mut points = Vec::new();
            for n in 1..=dets.len() {
                let tp = prefix_true_positives(&dets[..n], &class_gts, t, kind);
                points.push((tp as f64 / n as f64, tp as f64 / npos as f64));
            }
            let ap = match interp {
                Interpolation::Exact => {
                    let mut area = 0.0;
                    let mut prev = 0.0;
                    for &(p, r) in &points {
                        area += (r - prev) * p;
                        prev = r;
                    }
                    area
                }
                Interpolation::Coco101 => {
                    let mut total = 0.0;
                    for level in 0..=100 {
                        let level = level as f64 / 100.0;
                        let best = points.iter().filter(|(_, r)| *r >= level).map(|(p, _)| *p).fold(None, |m: Option<f64>, p| {
                            Some(m.map_or(p, |m| m.max(p)))
                        });
                        total += best.unwrap_or(0.0);
                    }
                    total / 101.0
                }
            };
            sum += ap;
        }
        out.insert(c, sum / thresholds.len() as f64);
    }
    out
}

fn prefix_true_positives(dets: &[&DetectionResult], gts: &[&GroundTruth], t: f64, kind: MatchKind) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for d in dets {
        let mut best: Option<usize> = None;
        let mut best_overlap = f64::NEG_INFINITY;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.image_id != d.image_id {
                continue;
            }
            let o = match kind {
                MatchKind::Box => iou(&d.bbox, &g.bbox),
                MatchKind::Mask => d.mask.iou(&g.mask),
            };
            if o >= t && o > best_overlap {
                best = Some(j);
                best_overlap = o;
            }
        }
        if let Some(j) = best {
            used[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Random small evaluation instance on a coarse grid, so that IoU and confidence ties occur.
pub fn random_eval_instance(r: &mut ChaCha8Rng) -> (Vec<DetectionResult>, Vec<GroundTruth>) {
    let images = r.gen_range(1..=5);
    let classes = r.gen_range(1..=4);
    let grid_box = |r: &mut ChaCha8Rng| {
        let x0 = r.gen_range(0..6) as f64 / 8.0;
        let y0 = r.gen_range(0..6) as f64 / 8.0;
        let x1 = x0 + r.gen_range(1..=3) as f64 / 8.0;
        let y1 = y0 + r.gen_range(1..=3) as f64 / 8.0;
        BBox::from_corners(x0, y0, x1, y1).unwrap()
    };
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for image_id in 0..images {
        for _ in 0..r.gen_range(0..=4) {
            let b = grid_box(r);
            gts.push(GroundTruth {
                image_id,
                class_id: r.gen_range(0..classes),
                bbox: b,
                mask: render_box(&b, 8, 8),
            });
        }
        for _ in 0..r.gen_range(0..=6) {
            let b = grid_box(r);
            dets.push(DetectionResult {
                image_id,
                class_id: r.gen_range(0..classes),
                confidence: r.gen_range(1..=10) as f64 / 10.0,
                bbox: b,
                mask: render_box(&b, 8, 8),
            });
        }
    }
    (dets, gts)
}

/// Instances (out of `trials`) where AP differs from the reference in any class, task or mode.
pub fn ap_mismatches(trials: usize) -> usize {
    let mut r = rng(202);
    let thresholds = coco_thresholds();
    (0..trials)
        .filter(|_| {
            let (d, g) = random_eval_instance(&mut r);
            [MatchKind::Box, MatchKind::Mask].into_iter().any(|kind| {
                [Interpolation::Coco101, Interpolation::Exact].into_iter().any(|interp| {
                    [&thresholds[..], &[0.5][..]]
                        .into_iter()
                        .any(|t| average_precision(&d, &g, t, kind, interp) != reference_ap(&d, &g, t, kind, interp))
                })
            })
        })
        .count()
}

// ---------------------------------------------------------------- objectness and pseudo labels

pub fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> AttentionMap {
    AttentionMap {
        height: h,
        width: w,
        values: uniform(r, h * w, 0.0, 1.0),
    }
}

/// Boxes of the 16x16 grid (corners on grid lines) where objectness differs from pixel averaging.
pub fn objectness_grid_mismatches() -> (usize, usize) {
    let n = 16;
    let map = random_map(&mut rng(203), n, n);
    let mut checked = 0;
    let mut wrong = 0;
    for r0 in 0..n {
        for r1 in r0 + 1..=n {
            for c0 in 0..n {
                for c1 in c0 + 1..=n {
                    let b = BBox::from_corners(c0 as f64 / n as f64, r0 as f64 / n as f64, c1 as f64 / n as f64, r1 as f64 / n as f64)
                        .unwrap();
                    let mut sum = 0.0;
                    let mut count = 0;
                    for r in r0..r1 {
                        for c in c0..c1 {
                            sum += map.values[r * n + c];
                            count += 1;
                        }
                    }
                    checked += 1;
                    if objectness(&map, &b).unwrap() != sum / count as f64 {
                        wrong += 1;
                    }
                }
            }
        }
    }
    (checked, wrong)
}

/// Violations of the pseudo-label laws over `trials` random instances.
pub fn pseudo_law_violations(trials: usize) -> usize {
    let mut r = rng(204);
    let mut violations = 0;
    for _ in 0..trials {
        let p = r.gen_range(0..=40);
        let matched = r.gen_range(0..=p);
        let k = r.gen_range(0..=12);
        let map = random_map(&mut r, 16, 16);
        let boxes: Vec<BBox> = (0..p)
            .map(|_| {
                let w = if r.gen_bool(0.1) { 1e-4 } else { r.gen_range(0.02..0.6) };
                BBox::new(r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), w, r.gen_range(0.02..0.6)).unwrap()
            })
            .collect();
        let mut order: Vec<usize> = (0..p).collect();
        order.shuffle(&mut r);
        let mut pairs: Vec<(usize, usize)> = order[..matched].iter().enumerate().map(|(g, &i)| (i, g)).collect();
        pairs.sort_unstable();
        let mut unmatched: Vec<usize> = order[matched..].to_vec();
        unmatched.sort_unstable();
        let m = MatchResult {
            pairs,
            unmatched_predictions: unmatched,
        };
        let labels = search_pseudo_gt(&boxes, &m, &map, k, 99).unwrap();
        let matched_set: BTreeSet<usize> = m.pairs.iter().map(|(i, _)| *i).collect();
        let ok = labels.len() == k.min(p - matched)
            && labels.iter().all(|l| !matched_set.contains(&l.prediction_index) && l.class_id == 99)
            && labels.windows(2).all(|w| w[0].objectness >= w[1].objectness)
            && labels.iter().map(|l| l.prediction_index).collect::<BTreeSet<_>>().len() == labels.len();
        if !ok {
            violations += 1;
        }
    }
    violations
}

// ---------------------------------------------------------------- stages

/// A configuration small enough to run the whole chain in seconds.
pub fn tiny_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataConfig {
        image_size: 32,
        num_base: 3,
        num_novel: 2,
        train_images: 40,
        test_images: 8,
        min_instances: 1,
        max_instances: 3,
        shots: 2,
    };
    cfg.model = tiny_model_config();
    cfg.pretrain.iterations = 6;
    cfg.pretrain.batch_size = 2;
    cfg.pretrain.lr_milestones = vec![4];
    cfg.base_finetune.optim.iterations = 3;
    cfg.base_finetune.optim.batch_size = 2;
    cfg.novel_finetune.optim.iterations = 3;
    cfg.novel_finetune.optim.batch_size = 2;
    cfg.protocol.shots = vec![1, 2];
    cfg.protocol.runs = 1;
    cfg
}

/// Parameters whose float32 bits differ between two checkpoints, including
/// parameters present in only one of them.
pub fn changed_params(a: &Checkpoint, b: &Checkpoint) -> BTreeSet<String> {
    let (x, y) = (tensor_bits(&a.tensors).unwrap(), tensor_bits(&b.tensors).unwrap());
    x.keys()
        .chain(y.keys())
        .filter(|k| x.get(*k) != y.get(*k))
        .cloned()
        .collect()
}

/// Parameters of `ck` that belong to the stage's trainable components.
pub fn trainable_params(ck: &Checkpoint, stage: StageId) -> BTreeSet<String> {
    let names: BTreeSet<&str> = FreezeSpec::for_stage(stage).trainable_components().into_iter().map(|c| c.name()).collect();
    ck.tensors
        .keys()
        .filter(|k| names.contains(k.split('/').next().unwrap()))
        .cloned()
        .collect()
}

/// Changed parameters outside the trainable set, and trainable parameters left untouched.
pub struct FreezeAudit {
    pub frozen_changed: BTreeSet<String>,
    pub trainable_unchanged: BTreeSet<String>,
}

impl FreezeAudit {
    pub fn new(entry: &Checkpoint, exit: &Checkpoint, stage: StageId) -> Self {
        let changed = changed_params(entry, exit);
        let mut trainable = trainable_params(entry, stage);
        trainable.extend(trainable_params(exit, stage));
        FreezeAudit {
            frozen_changed: changed.difference(&trainable).cloned().collect(),
            trainable_unchanged: trainable.difference(&changed).cloned().collect(),
        }
    }

    pub fn is_exact(&self) -> bool {
        self.frozen_changed.is_empty() && self.trainable_unchanged.is_empty()
    }
}
