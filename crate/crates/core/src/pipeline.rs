//! End-to-end orchestration shared by the command-line tool: corpus
//! generation, the three training stages, evaluation, the shot protocol and
//! the two ablation grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{generate_corpus_with, mix_seed, split_base_novel, EpisodeSpec, ImageSample};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate_split, run_protocol, APReport, Metric, ProtocolReport, Split, Task};
use crate::model::checkpoint::Checkpoint;
use crate::model::{ClassifierKind, UiFormer};
use crate::trainer::{
    run_base_finetune, run_base_pretrain, run_novel_finetune, to_checkpoint, StageConfig, StageId,
};

/// Training and test images of one run configuration.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

pub fn generate(cfg: &RunConfig) -> Result<Corpus> {
    let d = &cfg.data;
    let corpus = d.corpus();
    let classes = d.num_classes();
    Ok(Corpus {
        train: generate_corpus_with(&corpus, d.train_images, classes, mix_seed(cfg.seed, 1), 0)?,
        test: generate_corpus_with(&corpus, d.test_images, classes, mix_seed(cfg.seed, 2), d.train_images)?,
    })
}

/// Seed of protocol run `run`; model initialisation, batching and the shot draw all derive from it.
pub fn run_seed(master: u64, run: usize) -> u64 {
    mix_seed(master, 1000 + run as u64)
}

/// The K-shot episode of run `run`. Draws for different K share the image order,
/// so smaller support sets are subsets of larger ones.
pub fn episode(cfg: &RunConfig, shots: usize, run: usize) -> EpisodeSpec {
    cfg.data.episode(shots, run_seed(cfg.seed, run))
}

/// Base-class training images (novel annotations removed) and the support set.
pub fn split(cfg: &RunConfig, train: &[ImageSample], shots: usize, run: usize) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    split_base_novel(train, &episode(cfg, shots, run))
}

/// Content-addressed store of stage checkpoints.
#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Cache { root: root.into() }
    }

    fn get_or_train(&self, key: &str, train: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
        let dir = self.root.join(key);
        if dir.join(crate::model::checkpoint::MANIFEST_FILE).exists() {
            log::info!("reusing checkpoint {}", dir.display());
            return Checkpoint::read(&dir);
        }
        let ck = train()?;
        ck.write(&dir)?;
        Ok(ck)
    }
}

fn key_of(parts: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(parts).expect("key parts serialize");
    hex::encode(&Sha256::digest(bytes)[..10])
}

fn cached(cache: Option<&Cache>, key: String, train: impl FnOnce() -> Result<Checkpoint>) -> Result<Checkpoint> {
    match cache {
        Some(c) => c.get_or_train(&key, train),
        None => train(),
    }
}

pub fn pretrain(cfg: &RunConfig, seed: u64, base_set: &[ImageSample], sink: Option<&mut dyn Write>) -> Result<Checkpoint> {
    let model = UiFormer::new(&cfg.model, cfg.data.num_base, seed, DType::F32)?;
    let sc = StageConfig::base_pretrain(cfg.pretrain.clone(), cfg.loss, seed)?;
    run_base_pretrain(model, base_set, &sc, sink)?.checkpoint(&cfg.hash(), seed)
}

pub fn base_finetune(
    cfg: &RunConfig,
    seed: u64,
    pretrained: &Checkpoint,
    base_set: &[ImageSample],
    sink: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let b = &cfg.base_finetune;
    let sc = StageConfig::base_finetune(b.optim.clone(), cfg.loss, seed, b.pseudo_labels.then_some(b.pseudo_k))?;
    run_base_finetune(pretrained, base_set, &sc, sink)?.checkpoint(&cfg.hash(), seed)
}

pub fn novel_finetune(
    cfg: &RunConfig,
    seed: u64,
    base: &Checkpoint,
    support: &[ImageSample],
    sink: Option<&mut dyn Write>,
) -> Result<Checkpoint> {
    let n = &cfg.novel_finetune;
    let sc = StageConfig::novel_finetune(n.optim.clone(), cfg.loss, seed, n.kd, n.early_stop.then_some(n.convergence))?;
    run_novel_finetune(base, support, cfg.data.num_novel, &sc, sink)?.checkpoint(&cfg.hash(), seed)
}

/// Evaluate a checkpoint of any stage; classes it cannot predict score zero.
pub fn evaluate(ck: &Checkpoint, test: &[ImageSample], spec: &EpisodeSpec) -> Result<APReport> {
    let mut r = evaluate_split(&ck.instantiate(DType::F32)?, test, spec)?;
    r.config_hash = Some(ck.manifest.config_hash.clone());
    Ok(r)
}

/// Checkpoints and reports of one full chain.
#[derive(Debug, Clone)]
pub struct ChainResult {
    pub pretrain: Checkpoint,
    /// Entry checkpoint of novel fine-tuning (the pre-trained one when base fine-tuning is off).
    pub base: Checkpoint,
    pub novel: Checkpoint,
    pub base_report: APReport,
    pub novel_report: APReport,
}

/// Run the three stages for `(shots, run)`, reusing cached stages where the settings match.
pub fn run_chain(cfg: &RunConfig, corpus: &Corpus, shots: usize, run: usize, cache: Option<&Cache>) -> Result<ChainResult> {
    let seed = run_seed(cfg.seed, run);
    let spec = episode(cfg, shots, run);
    let (base_set, support) = split_base_novel(&corpus.train, &spec)?;
    let pre_key = key_of(&("pretrain", &cfg.data, &cfg.model, &cfg.loss, &cfg.pretrain, cfg.seed, run));
    let pre = cached(cache, pre_key.clone(), || pretrain(cfg, seed, &base_set, None))?;
    let (base, base_key) = if cfg.base_finetune.enabled {
        let key = key_of(&("base_finetune", &pre_key, &cfg.base_finetune));
        (cached(cache, key.clone(), || base_finetune(cfg, seed, &pre, &base_set, None))?, key)
    } else {
        (pre.clone(), pre_key)
    };
    let novel_key = key_of(&("novel_finetune", &base_key, &cfg.novel_finetune, shots));
    let novel = cached(cache, novel_key, || novel_finetune(cfg, seed, &base, &support, None))?;
    Ok(ChainResult {
        base_report: evaluate(&base, &corpus.test, &spec)?,
        novel_report: evaluate(&novel, &corpus.test, &spec)?,
        pretrain: pre,
        base,
        novel,
    })
}

/// Every `(shots, run)` chain of the protocol, evaluated with means and deviations.
pub fn protocol(cfg: &RunConfig, corpus: &Corpus, cache: Option<&Cache>) -> Result<ProtocolReport> {
    let mut checkpoints = BTreeMap::new();
    for &shots in &cfg.protocol.shots {
        for run in 0..cfg.protocol.runs {
            checkpoints.insert((shots, run), run_chain(cfg, corpus, shots, run, cache)?.novel);
        }
    }
    let spec = cfg.data.episode(cfg.data.shots, cfg.seed);
    run_protocol(&checkpoints, &corpus.test, &spec, &cfg.protocol.shots, cfg.protocol.runs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Classifiers,
    Components,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classifiers" => Ok(AblationAxis::Classifiers),
            "components" => Ok(AblationAxis::Components),
            _ => Err(Error::Config(format!("unknown ablation axis `{s}` (expected classifiers or components)"))),
        }
    }
}

/// The configurations of one ablation grid, with their row labels.
pub fn ablation_cells(cfg: &RunConfig, axis: AblationAxis) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Classifiers => [
            (ClassifierKind::Linear, ClassifierKind::Linear),
            (ClassifierKind::Binary, ClassifierKind::Linear),
            (ClassifierKind::Binary, ClassifierKind::Cosine),
        ]
        .into_iter()
        .map(|(e, d)| (format!("{}+{}", title(e.name()), title(d.name())), cfg.with_classifiers(e, d)))
        .collect(),
        AblationAxis::Components => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(ft, kd)| {
                let mut c = cfg.clone();
                c.base_finetune.enabled = ft;
                c.novel_finetune.kd = kd;
                let mark = |on: bool| if on { "+" } else { "-" };
                (format!("{}base-FT {}KD", mark(ft), mark(kd)), c)
            })
            .collect(),
    }
}

fn title(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    /// Stage-1 reports (before novel fine-tuning), one per run.
    pub base_runs: Vec<APReport>,
    /// Final reports, one per run.
    pub runs: Vec<APReport>,
    pub base_mean: APReport,
    pub mean: APReport,
    pub std: APReport,
}

impl AblationRow {
    /// Mean base-class AP lost during novel fine-tuning.
    pub fn base_drop(&self, task: Task) -> Option<f64> {
        Some(self.base_mean.get(task, Split::Base, Metric::AP)? - self.mean.get(task, Split::Base, Metric::AP)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub shots: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:?} ablation, K={}, mean over {} runs (desk-scale synthetic numbers; not comparable to published absolute values)",
            self.axis,
            self.shots,
            self.rows.first().map_or(0, |r| r.runs.len())
        );
        let _ = writeln!(
            s,
            "{:<18} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
            "", "det base", "det novel", "seg base", "seg novel", "det stage1", "seg stage1"
        );
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<18} {:>9} {:>9} {:>9} {:>9} {:>10} {:>10}",
                r.label,
                cell(r.mean.get(Task::Detection, Split::Base, Metric::AP)),
                cell(r.mean.get(Task::Detection, Split::Novel, Metric::AP)),
                cell(r.mean.get(Task::Segmentation, Split::Base, Metric::AP)),
                cell(r.mean.get(Task::Segmentation, Split::Novel, Metric::AP)),
                cell(r.base_mean.get(Task::Detection, Split::Base, Metric::AP)),
                cell(r.base_mean.get(Task::Segmentation, Split::Base, Metric::AP)),
            );
        }
        s
    }
}

/// Run every cell of `axis` for `runs` shared seeds at `cfg.data.shots` shots.
pub fn ablate(cfg: &RunConfig, axis: AblationAxis, corpus: &Corpus, runs: usize, cache: Option<&Cache>) -> Result<AblationReport> {
    ablate_cells(cfg, axis, ablation_cells(cfg, axis), corpus, runs, cache)
}

/// Like [`ablate`], restricted to the given cells.
pub fn ablate_cells(
    cfg: &RunConfig,
    axis: AblationAxis,
    cells: Vec<(String, RunConfig)>,
    corpus: &Corpus,
    runs: usize,
    cache: Option<&Cache>,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (label, c) in cells {
        log::info!("ablation cell {label}");
        let mut base_runs = Vec::new();
        let mut finals = Vec::new();
        for run in 0..runs {
            let chain = run_chain(&c, corpus, c.data.shots, run, cache)?;
            base_runs.push(chain.base_report);
            finals.push(chain.novel_report);
        }
        let (base_mean, _) = aggregate(&base_runs.iter().collect::<Vec<_>>());
        let (mean, std) = aggregate(&finals.iter().collect::<Vec<_>>());
        rows.push(AblationRow {
            label,
            config_hash: c.hash(),
            base_runs,
            runs: finals,
            base_mean,
            mean,
            std,
        });
    }
    Ok(AblationReport {
        axis,
        shots: cfg.data.shots,
        rows,
    })
}

/// Write `text` to `path` through a temporary file.
pub fn write_atomic(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A freshly initialised model packaged as a checkpoint (stage `init`).
pub fn initial_checkpoint(cfg: &RunConfig, seed: u64) -> Result<Checkpoint> {
    let model = UiFormer::new(&cfg.model, cfg.data.num_base, seed, DType::F32)?;
    to_checkpoint(&model, None, &cfg.hash(), seed)
}

/// Stage that produced a checkpoint, if it was one of the training stages.
pub fn stage_of(ck: &Checkpoint) -> Option<StageId> {
    [StageId::BasePretrain, StageId::BaseFinetune, StageId::NovelFinetune]
        .into_iter()
        .find(|s| s.name() == ck.manifest.stage)
}
