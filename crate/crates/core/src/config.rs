//! Run configuration: profile defaults, overlaid by a TOML file, the
//! output-root environment variable and `key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CorpusConfig, EpisodeSpec};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{ClassifierKind, ModelConfig};
use crate::trainer::{Convergence, OptimConfig};

/// Environment variable that overrides `output_root`.
pub const OUTPUT_ROOT_ENV: &str = "UIFORMER_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub num_base: usize,
    pub num_novel: usize,
    pub train_images: usize,
    pub test_images: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Shots per novel class for single-episode commands.
    pub shots: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 64,
            num_base: 8,
            num_novel: 4,
            train_images: 240,
            test_images: 60,
            min_instances: 1,
            max_instances: 4,
            shots: 10,
        }
    }
}

impl DataConfig {
    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            image_size: self.image_size,
            min_instances: self.min_instances,
            max_instances: self.max_instances,
            ..CorpusConfig::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_base + self.num_novel
    }

    pub fn episode(&self, shots: usize, seed: u64) -> EpisodeSpec {
        EpisodeSpec::contiguous(self.num_base, self.num_novel, shots, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseFinetuneConfig {
    /// Skip the stage entirely (novel fine-tuning then starts from the pre-trained model).
    pub enabled: bool,
    pub pseudo_labels: bool,
    /// Pseudo labels per image.
    pub pseudo_k: usize,
    pub optim: OptimConfig,
}

impl Default for BaseFinetuneConfig {
    fn default() -> Self {
        BaseFinetuneConfig {
            enabled: true,
            pseudo_labels: true,
            pseudo_k: 5,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovelFinetuneConfig {
    pub kd: bool,
    pub early_stop: bool,
    pub convergence: Convergence,
    pub optim: OptimConfig,
}

impl Default for NovelFinetuneConfig {
    fn default() -> Self {
        NovelFinetuneConfig {
            kd: true,
            early_stop: false,
            convergence: Convergence::default(),
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub shots: Vec<usize>,
    pub runs: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            shots: vec![1, 5, 10],
            runs: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    PaperScale,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper_scale" => Ok(Profile::PaperScale),
            _ => Err(Error::Config(format!("unknown profile `{s}` (expected desk or paper_scale)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub output_root: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub pretrain: OptimConfig,
    pub base_finetune: BaseFinetuneConfig,
    pub novel_finetune: NovelFinetuneConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => RunConfig {
                seed: 0,
                output_root: PathBuf::from("runs"),
                data: DataConfig::default(),
                model: ModelConfig {
                    image_size: 64,
                    ..ModelConfig::default()
                },
                loss: LossWeights::default(),
                pretrain: OptimConfig {
                    learning_rate: 1e-3,
                    iterations: 900,
                    batch_size: 4,
                    lr_milestones: vec![750],
                    ..OptimConfig::default()
                },
                base_finetune: BaseFinetuneConfig {
                    optim: OptimConfig {
                        learning_rate: 2e-4,
                        iterations: 200,
                        batch_size: 2,
                        ..OptimConfig::default()
                    },
                    ..BaseFinetuneConfig::default()
                },
                novel_finetune: NovelFinetuneConfig {
                    optim: OptimConfig {
                        learning_rate: 1e-3,
                        iterations: 300,
                        batch_size: 2,
                        ..OptimConfig::default()
                    },
                    early_stop: true,
                    ..NovelFinetuneConfig::default()
                },
                protocol: ProtocolConfig::default(),
            },
            Profile::PaperScale => RunConfig {
                seed: 0,
                output_root: PathBuf::from("runs"),
                data: DataConfig {
                    image_size: 128,
                    train_images: 20_000,
                    test_images: 2_000,
                    max_instances: 6,
                    ..DataConfig::default()
                },
                model: ModelConfig {
                    image_size: 128,
                    backbone_channels: [64, 128, 256, 512],
                    width: 256,
                    heads: 8,
                    ffn_dim: 2048,
                    encoder_layers: 6,
                    decoder_layers: 9,
                    queries: 300,
                    ..ModelConfig::default()
                },
                loss: LossWeights::default(),
                pretrain: OptimConfig {
                    learning_rate: 1e-4,
                    iterations: 90_000,
                    batch_size: 16,
                    lr_milestones: vec![60_000, 80_000],
                    ..OptimConfig::default()
                },
                base_finetune: BaseFinetuneConfig {
                    optim: OptimConfig {
                        learning_rate: 1e-5,
                        iterations: 10_000,
                        batch_size: 16,
                        ..OptimConfig::default()
                    },
                    ..BaseFinetuneConfig::default()
                },
                novel_finetune: NovelFinetuneConfig {
                    early_stop: true,
                    optim: OptimConfig {
                        learning_rate: 1e-4,
                        iterations: 5_000,
                        batch_size: 16,
                        ..OptimConfig::default()
                    },
                    ..NovelFinetuneConfig::default()
                },
                protocol: ProtocolConfig {
                    shots: vec![1, 5, 10],
                    runs: 10,
                },
            },
        }
    }

    /// Layer `file` and the environment over the profile defaults, then apply `overrides`.
    pub fn load(profile: Profile, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match file {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        Self::layered(profile, text.as_deref(), env_root, overrides)
    }

    /// [`RunConfig::load`] with the file contents and environment passed in.
    pub fn layered(profile: Profile, file: Option<&str>, output_root: Option<PathBuf>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::profile(profile)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(text) = file {
            let table: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
                context: "config file".into(),
                message: e.to_string(),
            })?;
            merge(&mut value, toml::Value::Table(table));
        }
        if let Some(root) = output_root {
            set_path(&mut value, "output_root", toml::Value::String(root.display().to_string()))?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut value, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        for o in [&self.pretrain, &self.base_finetune.optim, &self.novel_finetune.optim] {
            o.validate()?;
        }
        let d = &self.data;
        if d.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                d.image_size, self.model.image_size
            )));
        }
        if d.num_base == 0 || d.num_novel == 0 || d.shots == 0 {
            return Err(Error::Config("num_base, num_novel and shots must be positive".into()));
        }
        if d.min_instances == 0 || d.min_instances > d.max_instances {
            return Err(Error::Config("need 1 <= min_instances <= max_instances".into()));
        }
        if self.base_finetune.pseudo_k == 0 {
            return Err(Error::Config("base_finetune.pseudo_k must be at least 1".into()));
        }
        if self.protocol.runs == 0 || self.protocol.shots.contains(&0) {
            return Err(Error::Config("protocol needs runs >= 1 and positive shot counts".into()));
        }
        Ok(())
    }

    /// Hash of every setting that affects results (the output root is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_root = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(bytes)[..8])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply a classifier combination (encoder head, decoder classifier).
    pub fn with_classifiers(&self, encoder: ClassifierKind, decoder: ClassifierKind) -> Self {
        let mut c = self.clone();
        c.model.encoder_head = encoder;
        c.model.decoder_classifier = decoder;
        c
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}
