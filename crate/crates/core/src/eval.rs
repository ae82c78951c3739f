//! Detection and segmentation AP / AP50 over all, base and novel classes,
//! and the multi-run few-shot protocol.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeSpec, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, BinaryMask};
use crate::model::checkpoint::Checkpoint;
use crate::model::{tensor_to_boxes, UiFormer};
use crate::nn::sigmoid;
use crate::pseudolabel::bilinear_resize;

pub const MAX_DETECTIONS: usize = 100;
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub image_id: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: usize,
    pub class_id: usize,
    pub bbox: BBox,
    pub mask: BinaryMask,
}

pub fn ground_truth(samples: &[ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.instances.iter().map(|i| GroundTruth {
                image_id: s.id,
                class_id: i.class_id,
                bbox: i.bbox,
                mask: i.mask.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Box,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Mean interpolated precision at recall 0, 0.01, ..., 1.
    #[default]
    Coco101,
    /// Area under the raw precision/recall step curve.
    Exact,
}

/// `0.50, 0.55, ..., 0.95`
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

fn overlap(d: &DetectionResult, g: &GroundTruth, kind: MatchKind) -> f64 {
    match kind {
        MatchKind::Box => iou(&d.bbox, &g.bbox),
        MatchKind::Mask => d.mask.iou(&g.mask),
    }
}

/// True/false-positive flags in confidence order (ties keep input order) for one class.
fn tp_flags(dets: &[&DetectionResult], gts: &[&GroundTruth], threshold: f64, kind: MatchKind) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let d = dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.image_id != d.image_id {
                    continue;
                }
                let o = overlap(d, g, kind);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// AP of one ranked TP/FP sequence against `num_gt` ground-truth objects.
pub fn ap_from_flags(flags: &[bool], num_gt: usize, interp: Interpolation) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    match interp {
        Interpolation::Exact => {
            let mut ap = 0.0;
            let mut prev = 0.0;
            for (p, r) in precision.iter().zip(&recall) {
                ap += (r - prev) * p;
                prev = *r;
            }
            ap
        }
        Interpolation::Coco101 => {
            for i in (0..precision.len().saturating_sub(1)).rev() {
                precision[i] = precision[i].max(precision[i + 1]);
            }
            let mut sum = 0.0;
            let mut j = 0;
            for t in 0..=100 {
                let level = t as f64 / 100.0;
                while j < recall.len() && recall[j] < level {
                    j += 1;
                }
                if j < recall.len() {
                    sum += precision[j];
                }
            }
            sum / 101.0
        }
    }
}

/// Per-class AP averaged over `thresholds`; classes without ground truth are omitted.
pub fn average_precision(
    results: &[DetectionResult],
    ground_truth: &[GroundTruth],
    thresholds: &[f64],
    kind: MatchKind,
    interp: Interpolation,
) -> BTreeMap<usize, f64> {
    let mut gts: BTreeMap<usize, Vec<&GroundTruth>> = BTreeMap::new();
    for g in ground_truth {
        gts.entry(g.class_id).or_default().push(g);
    }
    let mut out = BTreeMap::new();
    for (&c, class_gts) in &gts {
        let dets: Vec<&DetectionResult> = results.iter().filter(|d| d.class_id == c).collect();
        let sum: f64 = thresholds
            .iter()
            .map(|&t| ap_from_flags(&tp_flags(&dets, class_gts, t, kind), class_gts.len(), interp))
            .sum();
        out.insert(c, sum / thresholds.len() as f64);
    }
    out
}

/// Top `max_detections` (query, class) pairs by sigmoid score, with masks
/// upsampled to the image and binarised. The unknown class is never reported.
pub fn detect(model: &UiFormer, sample: &ImageSample, max_detections: usize) -> Result<Vec<DetectionResult>> {
    let pred = model.forward_sample(sample, None)?;
    let scores = sigmoid(&pred.main.class_logits)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let boxes = tensor_to_boxes(&pred.main.boxes)?;
    let masks = pred.main.masks.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (mh, mw) = pred.mask_shape;
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for (q, row) in scores.iter().enumerate() {
        for (c, &s) in row.iter().enumerate() {
            if Some(c) != model.unknown_class() {
                pairs.push((q, c, s));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    pairs.truncate(max_detections);
    let mut upsampled: BTreeMap<usize, BinaryMask> = BTreeMap::new();
    let mut out = Vec::with_capacity(pairs.len());
    for (q, c, s) in pairs {
        let mask = upsampled
            .entry(q)
            .or_insert_with(|| {
                let full = bilinear_resize(&masks[q], mh, mw, sample.height, sample.width);
                BinaryMask::from_fn(sample.height, sample.width, |r, col| full[r * sample.width + col] >= MASK_THRESHOLD)
            })
            .clone();
        out.push(DetectionResult {
            image_id: sample.id,
            class_id: c,
            confidence: s,
            bbox: boxes[q],
            mask,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Segmentation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    All,
    Base,
    Novel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    AP,
    AP50,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Detection, Task::Segmentation];

    pub fn name(self) -> &'static str {
        match self {
            Task::Detection => "detection",
            Task::Segmentation => "segmentation",
        }
    }
}

impl Split {
    pub const ALL: [Split; 3] = [Split::All, Split::Base, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::All => "all",
            Split::Base => "base",
            Split::Novel => "novel",
        }
    }
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::AP, Metric::AP50];

    pub fn name(self) -> &'static str {
        match self {
            Metric::AP => "AP",
            Metric::AP50 => "AP50",
        }
    }
}

pub fn report_key(task: Task, split: Split, metric: Metric) -> String {
    format!("{}/{}/{}", task.name(), split.name(), metric.name())
}

/// AP values scaled to `[0, 100]`, keyed `task/split/metric`. A split without
/// ground truth is stored as `null`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct APReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub values: BTreeMap<String, Option<f64>>,
}

impl APReport {
    pub fn get(&self, task: Task, split: Split, metric: Metric) -> Option<f64> {
        self.values.get(&report_key(task, split, metric)).copied().flatten()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned table with one row per split and AP / AP50 columns per task.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>9} {:>9} {:>9} {:>9}", "", "det AP", "det AP50", "seg AP", "seg AP50");
        for split in Split::ALL {
            let _ = write!(s, "{:<8}", split.name());
            for task in Task::ALL {
                for metric in Metric::ALL {
                    match self.get(task, split, metric) {
                        Some(v) => {
                            let _ = write!(s, " {v:>9.2}");
                        }
                        None => {
                            let _ = write!(s, " {:>9}", "-");
                        }
                    }
                }
            }
            s.push('\n');
        }
        s
    }
}

fn mean_over(per_class: &BTreeMap<usize, f64>, keep: impl Fn(usize) -> bool) -> Option<f64> {
    let vals: Vec<f64> = per_class.iter().filter(|(c, _)| keep(**c)).map(|(_, v)| *v).collect();
    (!vals.is_empty()).then(|| 100.0 * vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Score a fixed set of detections against ground truth.
pub fn report_from_results(
    results: &[DetectionResult],
    ground_truth: &[GroundTruth],
    episode: &EpisodeSpec,
    interp: Interpolation,
) -> APReport {
    let mut values = BTreeMap::new();
    let coco = coco_thresholds();
    for task in Task::ALL {
        let kind = match task {
            Task::Detection => MatchKind::Box,
            Task::Segmentation => MatchKind::Mask,
        };
        for metric in Metric::ALL {
            let thresholds: &[f64] = match metric {
                Metric::AP => &coco,
                Metric::AP50 => &[0.5],
            };
            let per_class = average_precision(results, ground_truth, thresholds, kind, interp);
            for split in Split::ALL {
                let v = match split {
                    Split::All => mean_over(&per_class, |_| true),
                    Split::Base => mean_over(&per_class, |c| episode.is_base(c)),
                    Split::Novel => mean_over(&per_class, |c| episode.is_novel(c)),
                };
                values.insert(report_key(task, split, metric), v);
            }
        }
    }
    APReport {
        config_hash: None,
        values,
    }
}

/// Run `model` over `test_set` and report AP / AP50 for both tasks and every split.
pub fn evaluate_split(model: &UiFormer, test_set: &[ImageSample], episode: &EpisodeSpec) -> Result<APReport> {
    episode.validate()?;
    if model.num_classes() - model.unknown_class().is_some() as usize > episode.num_base() + episode.num_novel() {
        return Err(Error::Input("model predicts classes outside the episode".into()));
    }
    let mut results = Vec::new();
    for s in test_set {
        results.extend(detect(model, s, MAX_DETECTIONS)?);
    }
    Ok(report_from_results(&results, &ground_truth(test_set), episode, Interpolation::Coco101))
}

pub fn evaluate_checkpoint(ckpt: &Checkpoint, test_set: &[ImageSample], episode: &EpisodeSpec) -> Result<APReport> {
    let mut report = evaluate_split(&ckpt.instantiate(DType::F32)?, test_set, episode)?;
    report.config_hash = Some(ckpt.manifest.config_hash.clone());
    Ok(report)
}

/// Entry-wise mean and population standard deviation over the reports that carry a value.
pub fn aggregate(reports: &[&APReport]) -> (APReport, APReport) {
    let mut keys: Vec<&String> = reports.iter().flat_map(|r| r.values.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut mean = APReport::default();
    let mut std = APReport::default();
    for k in keys {
        let vals: Vec<f64> = reports.iter().filter_map(|r| r.values.get(k).copied().flatten()).collect();
        if vals.is_empty() {
            mean.values.insert(k.clone(), None);
            std.values.insert(k.clone(), None);
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        mean.values.insert(k.clone(), Some(m));
        std.values.insert(k.clone(), Some(var.sqrt()));
    }
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolCell {
    pub shots: usize,
    pub run: usize,
    /// `None` when no checkpoint was available for this cell.
    pub report: Option<APReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSummary {
    pub shots: usize,
    pub runs: usize,
    pub mean: APReport,
    pub std: APReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub cells: Vec<ProtocolCell>,
    pub summary: Vec<ShotSummary>,
}

impl ProtocolReport {
    pub fn summary_for(&self, shots: usize) -> Option<&ShotSummary> {
        self.summary.iter().find(|s| s.shots == shots)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        for sum in &self.summary {
            let _ = writeln!(s, "K={} (mean over {} runs)", sum.shots, sum.runs);
            s.push_str(&sum.mean.render_table());
        }
        let missing: Vec<String> = self
            .cells
            .iter()
            .filter(|c| c.report.is_none())
            .map(|c| format!("K={} run {}", c.shots, c.run))
            .collect();
        if !missing.is_empty() {
            let _ = writeln!(s, "missing checkpoints: {}", missing.join(", "));
        }
        s
    }
}

/// Seed of run `run` at `shots` shots, derived from `master`.
pub fn protocol_seed(master: u64, shots: usize, run: usize) -> u64 {
    crate::dataset::mix_seed(crate::dataset::mix_seed(master, shots as u64), run as u64)
}

/// Evaluate every `(shots, run)` checkpoint; absent ones become explicit gaps.
pub fn run_protocol(
    checkpoints: &BTreeMap<(usize, usize), Checkpoint>,
    test_set: &[ImageSample],
    base_episode: &EpisodeSpec,
    shots_list: &[usize],
    runs: usize,
) -> Result<ProtocolReport> {
    if runs == 0 {
        return Err(Error::Config("protocol needs at least one run".into()));
    }
    let mut cells = Vec::new();
    let mut summary = Vec::new();
    for &shots in shots_list {
        let episode = EpisodeSpec {
            shots,
            ..base_episode.clone()
        };
        let mut present = Vec::new();
        for run in 0..runs {
            let report = match checkpoints.get(&(shots, run)) {
                Some(c) => Some(evaluate_checkpoint(c, test_set, &episode)?),
                None => None,
            };
            if let Some(r) = &report {
                present.push(r.clone());
            }
            cells.push(ProtocolCell { shots, run, report });
        }
        let refs: Vec<&APReport> = present.iter().collect();
        let (mean, std) = aggregate(&refs);
        summary.push(ShotSummary {
            shots,
            runs: present.len(),
            mean,
            std,
        });
    }
    Ok(ProtocolReport { cells, summary })
}
