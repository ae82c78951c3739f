use candle_core::{Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Component, Init, ParamStore};

/// Classification head family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Linear,
    Binary,
    Cosine,
}

impl ClassifierKind {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::Linear => "linear",
            ClassifierKind::Binary => "binary",
            ClassifierKind::Cosine => "cosine",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ClassifierKind::Linear),
            "binary" => Ok(ClassifierKind::Binary),
            "cosine" => Ok(ClassifierKind::Cosine),
            _ => Err(Error::Config(format!("unknown classifier kind `{s}`"))),
        }
    }
}

/// Bias that makes every sigmoid start at probability 0.01.
pub const PRIOR_BIAS: f64 = -4.59511985013459;

const COSINE_EPS: f64 = 1e-8;

const LINEAR_WEIGHT: &str = "linear.weight";
const LINEAR_BIAS: &str = "linear.bias";
const PROTOTYPES: &str = "prototypes";

/// Multi-class decoder classifier whose rows live in the parameter store.
#[derive(Debug, Clone)]
pub enum Classifier {
    Linear { weight: Tensor, bias: Tensor },
    Cosine { prototypes: Tensor, scale: f64 },
}

/// `x / (||x|| + eps)` row-wise.
pub fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + COSINE_EPS)?)?)
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (n + COSINE_EPS)).collect()
}

impl Classifier {
    pub fn new(ps: &mut ParamStore, kind: ClassifierKind, classes: usize, width: usize, scale: f64) -> Result<Self> {
        let c = Component::Classifier;
        match kind {
            ClassifierKind::Linear => {
                let b = 1.0 / (width as f64).sqrt();
                let weight = ps.create(c, LINEAR_WEIGHT, &[classes, width], Init::Uniform(b))?;
                let bias = ps.create(c, LINEAR_BIAS, &[classes], Init::Const(PRIOR_BIAS))?;
                Ok(Classifier::Linear { weight, bias })
            }
            ClassifierKind::Cosine => {
                if scale <= 0.0 {
                    return Err(Error::Config(format!("cosine scale must be positive, got {scale}")));
                }
                let mut values = Vec::with_capacity(classes * width);
                for _ in 0..classes {
                    let row: Vec<f64> = (0..width).map(|_| ps.rng().sample(StandardNormal)).collect();
                    values.extend(unit(&row));
                }
                let prototypes = ps.create_from(c, PROTOTYPES, &[classes, width], &values)?;
                Ok(Classifier::Cosine { prototypes, scale })
            }
            ClassifierKind::Binary => Err(Error::Config("the decoder classifier must be linear or cosine".into())),
        }
    }

    pub fn kind(&self) -> ClassifierKind {
        match self {
            Classifier::Linear { .. } => ClassifierKind::Linear,
            Classifier::Cosine { .. } => ClassifierKind::Cosine,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Classifier::Linear { weight, .. } => weight.dims()[0],
            Classifier::Cosine { prototypes, .. } => prototypes.dims()[0],
        }
    }

    /// `features: (Q, d) -> (Q, C)` logits.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        match self {
            Classifier::Linear { weight, bias } => Ok(features.matmul(&weight.t()?)?.broadcast_add(bias)?),
            Classifier::Cosine { prototypes, scale } => {
                let f = normalize_rows(features)?;
                Ok((f.matmul(&prototypes.t()?)? * *scale)?)
            }
        }
    }

    fn rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
        Ok(t.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
    }

    /// Append classes up to `new_count`; existing rows are copied bit-exactly.
    ///
    /// New linear rows get zero weights and the prior bias. New cosine
    /// prototypes are the normalized mean of `supports[k]` (features of the
    /// class's support instances), or a random unit vector when none exist.
    pub fn expand(&mut self, ps: &mut ParamStore, new_count: usize, supports: Option<&[Vec<Vec<f64>>]>) -> Result<()> {
        let old = self.num_classes();
        if new_count <= old {
            return Err(Error::Unsupported(format!("class space can only grow: {old} -> {new_count}")));
        }
        let added = new_count - old;
        let c = Component::Classifier;
        match self {
            Classifier::Linear { weight, bias } => {
                let width = weight.dims()[1];
                let w_old = weight.copy()?;
                let b_old = bias.copy()?;
                let w_new = Tensor::zeros((added, width), w_old.dtype(), w_old.device())?;
                let b_new = (Tensor::ones(added, b_old.dtype(), b_old.device())? * PRIOR_BIAS)?;
                let w = Tensor::cat(&[&w_old, &w_new], 0)?;
                let b = Tensor::cat(&[&b_old, &b_new], 0)?;
                *weight = replace(ps, c, LINEAR_WEIGHT, &w)?;
                *bias = replace(ps, c, LINEAR_BIAS, &b)?;
            }
            Classifier::Cosine { prototypes, .. } => {
                let width = prototypes.dims()[1];
                let mut values = Vec::with_capacity(added * width);
                for k in 0..added {
                    let feats = supports.and_then(|s| s.get(k)).filter(|f| !f.is_empty());
                    let row = match feats {
                        Some(feats) => {
                            let mut mean = vec![0.0; width];
                            for f in feats {
                                for (m, x) in mean.iter_mut().zip(f) {
                                    *m += x / feats.len() as f64;
                                }
                            }
                            mean
                        }
                        None => (0..width).map(|_| ps.rng().sample(StandardNormal)).collect(),
                    };
                    values.extend(unit(&row));
                }
                let old_t = prototypes.copy()?;
                let new_t = Tensor::from_vec(values, (added, width), old_t.device())?.to_dtype(old_t.dtype())?;
                let p = Tensor::cat(&[&old_t, &new_t], 0)?;
                *prototypes = replace(ps, c, PROTOTYPES, &p)?;
            }
        }
        Ok(())
    }

    /// Keep only the first `count` classes.
    pub fn truncate(&mut self, ps: &mut ParamStore, count: usize) -> Result<()> {
        let old = self.num_classes();
        if count == 0 || count > old {
            return Err(Error::Unsupported(format!("cannot truncate {old} classes to {count}")));
        }
        let c = Component::Classifier;
        match self {
            Classifier::Linear { weight, bias } => {
                let w = weight.narrow(0, 0, count)?.copy()?;
                let b = bias.narrow(0, 0, count)?.copy()?;
                *weight = replace(ps, c, LINEAR_WEIGHT, &w)?;
                *bias = replace(ps, c, LINEAR_BIAS, &b)?;
            }
            Classifier::Cosine { prototypes, .. } => {
                let p = prototypes.narrow(0, 0, count)?.copy()?;
                *prototypes = replace(ps, c, PROTOTYPES, &p)?;
            }
        }
        Ok(())
    }

    /// Re-project cosine prototypes onto the unit sphere (no-op for linear).
    pub fn renormalize(&self, ps: &ParamStore) -> Result<()> {
        if let Classifier::Cosine { .. } = self {
            let var = ps
                .get(&ParamStore::key(Component::Classifier, PROTOTYPES))
                .ok_or_else(|| Error::Shape("missing cosine prototypes".into()))?;
            let normed = normalize_rows(&var.as_tensor().detach())?;
            var.set(&normed)?;
        }
        Ok(())
    }

    pub fn prototype_rows(&self) -> Result<Option<Vec<Vec<f64>>>> {
        match self {
            Classifier::Cosine { prototypes, .. } => Ok(Some(Self::rows(prototypes)?)),
            Classifier::Linear { .. } => Ok(None),
        }
    }
}

fn replace(ps: &mut ParamStore, c: Component, name: &str, t: &Tensor) -> Result<Tensor> {
    let dims = t.dims().to_vec();
    let values = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    ps.create_from(c, name, &dims, &values)
}
