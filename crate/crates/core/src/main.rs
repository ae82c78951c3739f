use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use uiformer::config::{Profile, RunConfig};
use uiformer::dataset::{read_annotations, write_annotations, Category, ClassSplit};
use uiformer::dataset::shapes::Shape;
use uiformer::dataset::ImageSample;
use uiformer::model::checkpoint::Checkpoint;
use uiformer::pipeline::{self, AblationAxis, Cache};
use uiformer::trainer::StageId;
use uiformer::Error;

#[derive(Parser)]
#[command(name = "uiformer", version, about = "Incremental few-shot detection and segmentation on synthetic shapes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file layered over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Default settings to start from: desk or paper_scale.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Override a setting, e.g. `--set pretrain.iterations=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the corpus: base training set, K-shot support sets and test set.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1 step 1: base pre-training.
    Pretrain {
        #[command(flatten)]
        stage: StageArgs,
        /// Base training annotations written by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage 1 step 2: base fine-tuning with pseudo labels.
    BaseFt {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint from pretrain.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Stage 2: novel fine-tuning on a K-shot support set.
    NovelFt {
        #[command(flatten)]
        stage: StageArgs,
        /// Support-set annotations (novel classes only).
        #[arg(long)]
        support: PathBuf,
        /// Checkpoint from pretrain or base-ft.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Score a checkpoint on the test set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every shot count and run of the protocol and report means.
    Protocol {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare classifier combinations or training components.
    Ablate {
        /// classifiers or components
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of shared seeds; defaults to protocol.runs.
        #[arg(long)]
        runs: Option<usize>,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Output checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Protocol run index; selects the derived seed.
    #[arg(long, default_value_t = 0)]
    run: usize,
}

#[derive(Serialize)]
struct DataManifest<'a> {
    config_hash: String,
    config: &'a RunConfig,
    files: Vec<(String, String)>,
}

fn categories(cfg: &RunConfig) -> Vec<Category> {
    (0..cfg.data.num_classes())
        .map(|id| Category {
            id,
            name: Shape::from_class(id).map_or_else(|| format!("class{id}"), |s| s.name().to_string()),
            split: if id < cfg.data.num_base { ClassSplit::Base } else { ClassSplit::Novel },
        })
        .collect()
}

fn support_file(shots: usize, run: usize) -> String {
    format!("support_k{shots}_run{run}.json")
}

fn file_digest(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let corpus = pipeline::generate(cfg)?;
    let cats = categories(cfg);
    let mut names = vec!["base_train.json".to_string(), "test.json".to_string()];
    let (base_set, _) = pipeline::split(cfg, &corpus.train, cfg.data.shots, 0)?;
    write_annotations(&base_set, &cats, &out.join("base_train.json"))?;
    write_annotations(&corpus.test, &cats, &out.join("test.json"))?;
    let mut shots = cfg.protocol.shots.clone();
    shots.push(cfg.data.shots);
    shots.sort_unstable();
    shots.dedup();
    for &k in &shots {
        for run in 0..cfg.protocol.runs {
            let (_, support) = pipeline::split(cfg, &corpus.train, k, run)?;
            let name = support_file(k, run);
            write_annotations(&support, &cats, &out.join(&name))?;
            names.push(name);
        }
    }
    let files = names
        .into_iter()
        .map(|n| Ok((file_digest(&out.join(&n))?, n)))
        .collect::<anyhow::Result<Vec<_>>>()?
        .into_iter()
        .map(|(h, n)| (n, h))
        .collect();
    let manifest = DataManifest {
        config_hash: cfg.hash(),
        config: cfg,
        files,
    };
    pipeline::write_atomic(&out.join("data_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!("wrote corpus to {}", out.display());
    Ok(())
}

fn read_set(path: &Path) -> anyhow::Result<Vec<ImageSample>> {
    Ok(read_annotations(path)?.0)
}

fn metrics_sink(out: &Path) -> anyhow::Result<BufWriter<File>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("metrics.jsonl");
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn require_stage(ck: &Checkpoint, allowed: &[StageId], command: &str, hint: &str) -> Result<(), Error> {
    match pipeline::stage_of(ck) {
        Some(s) if allowed.contains(&s) => Ok(()),
        _ => Err(Error::StageOrder(format!(
            "{command} cannot start from a `{}` checkpoint; {hint}",
            ck.manifest.stage
        ))),
    }
}

fn warn_hash(ck: &Checkpoint, cfg: &RunConfig) {
    if ck.manifest.config_hash != cfg.hash() {
        log::warn!(
            "checkpoint config hash {} differs from the current configuration {}",
            ck.manifest.config_hash,
            cfg.hash()
        );
    }
}

fn finish_stage(ck: &Checkpoint, out: &Path, mut sink: BufWriter<File>) -> anyhow::Result<()> {
    sink.flush()?;
    ck.write(out)?;
    println!("wrote {} checkpoint to {}", ck.manifest.stage, out.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let profile: Profile = cli.common.profile.parse()?;
    let cfg = RunConfig::load(profile, cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::GenData { out } => gen_data(&cfg, &out),
        Command::Pretrain { stage, data } => {
            let base_set = read_set(&data)?;
            let mut sink = metrics_sink(&stage.out)?;
            let ck = pipeline::pretrain(&cfg, pipeline::run_seed(cfg.seed, stage.run), &base_set, Some(&mut sink))?;
            finish_stage(&ck, &stage.out, sink)
        }
        Command::BaseFt { stage, data, ckpt } => {
            let pre = Checkpoint::read(&ckpt)?;
            require_stage(&pre, &[StageId::BasePretrain], "base-ft", "run `pretrain` first and pass its output with --ckpt")?;
            warn_hash(&pre, &cfg);
            let base_set = read_set(&data)?;
            let mut sink = metrics_sink(&stage.out)?;
            let ck = pipeline::base_finetune(&cfg, pipeline::run_seed(cfg.seed, stage.run), &pre, &base_set, Some(&mut sink))?;
            finish_stage(&ck, &stage.out, sink)
        }
        Command::NovelFt { stage, support, ckpt } => {
            let base = Checkpoint::read(&ckpt)?;
            require_stage(
                &base,
                &[StageId::BasePretrain, StageId::BaseFinetune],
                "novel-ft",
                "pass a checkpoint written by `pretrain` or `base-ft` with --ckpt",
            )?;
            warn_hash(&base, &cfg);
            let support = read_set(&support)?;
            let mut sink = metrics_sink(&stage.out)?;
            let ck = pipeline::novel_finetune(&cfg, pipeline::run_seed(cfg.seed, stage.run), &base, &support, Some(&mut sink))?;
            finish_stage(&ck, &stage.out, sink)
        }
        Command::Eval { ckpt, data, out } => {
            let ck = Checkpoint::read(&ckpt)?;
            warn_hash(&ck, &cfg);
            let test = read_set(&data)?;
            let report = pipeline::evaluate(&ck, &test, &cfg.data.episode(cfg.data.shots, cfg.seed))?;
            pipeline::write_atomic(&out.join("report.json"), &report.to_json()?)?;
            let table = format!("config {}\n{}", report.config_hash.as_deref().unwrap_or("-"), report.render_table());
            pipeline::write_atomic(&out.join("report.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Protocol { out } => {
            let out = out.unwrap_or_else(|| cfg.output_root.join("protocol"));
            let corpus = pipeline::generate(&cfg)?;
            let report = pipeline::protocol(&cfg, &corpus, Some(&Cache::new(cfg.output_root.join("cache"))))?;
            pipeline::write_atomic(&out.join("protocol.json"), &serde_json::to_string_pretty(&report)?)?;
            let table = format!("config {}\n{}", cfg.hash(), report.render_table());
            pipeline::write_atomic(&out.join("protocol.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate { axis, out, runs } => {
            let axis: AblationAxis = axis.parse()?;
            let runs = runs.unwrap_or(cfg.protocol.runs);
            if runs == 0 {
                bail!("--runs must be at least 1");
            }
            let out = out.unwrap_or_else(|| cfg.output_root.join("ablate"));
            let corpus = pipeline::generate(&cfg)?;
            let report = pipeline::ablate(&cfg, axis, &corpus, runs, Some(&Cache::new(cfg.output_root.join("cache"))))?;
            let name = match axis {
                AblationAxis::Classifiers => "classifiers",
                AblationAxis::Components => "components",
            };
            pipeline::write_atomic(&out.join(format!("{name}.json")), &serde_json::to_string_pretty(&report)?)?;
            let table = report.render_table();
            pipeline::write_atomic(&out.join(format!("{name}.txt")), &table)?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Error>() {
                Some(Error::StageOrder(_)) | Some(Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
