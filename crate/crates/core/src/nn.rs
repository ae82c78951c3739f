//! Parameter store and the small set of differentiable layers the model is built from.
//!
//! Everything here is composed from basic candle ops so that backprop covers
//! the whole graph in both `f32` and `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trainability unit of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    CnnBackbone,
    Projection,
    Encoder,
    Decoder,
    ForegroundHead,
    BoxHead,
    MaskHead,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 8] = [
        Component::CnnBackbone,
        Component::Projection,
        Component::Encoder,
        Component::Decoder,
        Component::ForegroundHead,
        Component::BoxHead,
        Component::MaskHead,
        Component::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::CnnBackbone => "cnn_backbone",
            Component::Projection => "projection",
            Component::Encoder => "encoder",
            Component::Decoder => "decoder",
            Component::ForegroundHead => "foreground_head",
            Component::BoxHead => "box_head",
            Component::MaskHead => "mask_head",
            Component::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown component `{s}`")))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// `U(-b, b)`
    Uniform(f64),
}

/// Named parameters, keyed `component/path`.
pub struct ParamStore {
    vars: BTreeMap<String, (Component, Var)>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn key(component: Component, name: &str) -> String {
        format!("{}/{}", component.name(), name)
    }

    /// Create (or replace) a parameter and return a tensor sharing its storage.
    pub fn create(&mut self, component: Component, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Uniform(b) => (0..n).map(|_| self.rng.gen_range(-b..=b)).collect(),
        };
        self.create_from(component, name, shape, &values)
    }

    pub fn create_from(&mut self, component: Component, name: &str, shape: &[usize], values: &[f64]) -> Result<Tensor> {
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(Self::key(component, name), (component, var));
        Ok(out)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn get(&self, key: &str) -> Option<&Var> {
        self.vars.get(key).map(|(_, v)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Component, &Var)> {
        self.vars.iter().map(|(k, (c, v))| (k, *c, v))
    }

    pub fn vars_of(&self, component: Component) -> Vec<Var> {
        self.vars
            .values()
            .filter(|(c, _)| *c == component)
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Overwrite every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        if tensors.len() != self.vars.len() || tensors.keys().zip(self.vars.keys()).any(|(a, b)| a != b) {
            return Err(Error::Shape("checkpoint parameter names differ from the model".into()));
        }
        for (k, (_, var)) in &self.vars {
            let t = &tensors[k];
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!("{k}: checkpoint {:?} vs model {:?}", t.dims(), var.dims())));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, (_, v))| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, component: Component, name: &str, input: usize, output: usize) -> Result<Self> {
        let b = fan_in_bound(input);
        let weight = ps.create(component, &format!("{name}.weight"), &[output, input], Init::Uniform(b))?;
        let bias = ps.create(component, &format!("{name}.bias"), &[output], Init::Uniform(b))?;
        Ok(Linear { weight, bias })
    }

    pub fn with_bias_init(
        ps: &mut ParamStore,
        component: Component,
        name: &str,
        input: usize,
        output: usize,
        bias: Init,
    ) -> Result<Self> {
        let b = fan_in_bound(input);
        let weight = ps.create(component, &format!("{name}.weight"), &[output, input], Init::Uniform(b))?;
        let bias = ps.create(component, &format!("{name}.bias"), &[output], bias)?;
        Ok(Linear { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        Linear { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `x: (N, in) -> (N, out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        component: Component,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        // He-style bound keeps activations alive through the ReLU stack
        let b = (6.0 / (input * kernel * kernel) as f64).sqrt();
        let weight = ps.create(component, &format!("{name}.weight"), &[output, input, kernel, kernel], Init::Uniform(b))?;
        let bias = ps.create(component, &format!("{name}.bias"), &[output], Init::Zeros)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// `x: (1, C, H, W)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = self.weight.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, component: Component, name: &str, dim: usize) -> Result<Self> {
        let gain = ps.create(component, &format!("{name}.gain"), &[dim], Init::Const(1.0))?;
        let bias = ps.create(component, &format!("{name}.bias"), &[dim], Init::Zeros)?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Fully connected stack with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, component: Component, name: &str, dims: &[usize]) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, component, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    /// Zero the last layer so the stack starts as the zero map.
    pub fn new_zero_last(ps: &mut ParamStore, component: Component, name: &str, dims: &[usize]) -> Result<Self> {
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            if i + 1 == n {
                let weight = ps.create(component, &format!("{name}.{i}.weight"), &[w[1], w[0]], Init::Zeros)?;
                let bias = ps.create(component, &format!("{name}.{i}.bias"), &[w[1]], Init::Zeros)?;
                layers.push(Linear::from_tensors(weight, bias));
            } else {
                layers.push(Linear::new(ps, component, &format!("{name}.{i}"), w[0], w[1])?);
            }
        }
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Softmax over the last dimension with a detached max shift.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// `log(x / (1 - x))` with `x` clamped away from 0 and 1.
pub fn inverse_sigmoid(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(1e-4, 1.0 - 1e-4)?;
    let one_minus = x.affine(-1.0, 1.0)?;
    Ok((x.log()? - one_minus.log()?)?)
}

/// Dense multi-head attention.
#[derive(Debug, Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, component: Component, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(ps, component, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, component, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, component, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(ps, component, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        Ok(x.reshape((n, self.heads, d / self.heads))?.transpose(0, 1)?.contiguous()?)
    }

    /// `query: (Nq, d)`, `key`/`value`: `(Nk, d)` -> `(Nq, d)`
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        let (nq, d) = query.dims2()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? * scale)?;
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((nq, d))?;
        self.o.forward(&out)
    }
}

/// Fixed sine embedding of scalar coordinates in `[0, 1]`.
///
/// `coords: (N, k)` -> `(N, k * dim)`; each coordinate gets `dim` channels.
pub fn sine_embedding(coords: &Tensor, dim: usize) -> Result<Tensor> {
    let (n, k) = coords.dims2()?;
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 2.0 * std::f64::consts::PI / 10000f64.powf(2.0 * i as f64 / dim as f64))
        .collect();
    let freqs = Tensor::from_slice(&freqs, (1, 1, half), coords.device())?.to_dtype(coords.dtype())?;
    let angles = coords.reshape((n, k, 1))?.broadcast_mul(&freqs)?;
    let emb = Tensor::cat(&[angles.sin()?, angles.cos()?], 2)?;
    Ok(emb.reshape((n, k * 2 * half))?)
}

/// Cell-center coordinates of an `h x w` grid, `(h*w, 2)` as `(x, y)`.
pub fn grid_centers(h: usize, w: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = Vec::with_capacity(h * w * 2);
    for r in 0..h {
        for c in 0..w {
            v.push((c as f64 + 0.5) / w as f64);
            v.push((r as f64 + 0.5) / h as f64);
        }
    }
    Ok(Tensor::from_vec(v, (h * w, 2), device)?.to_dtype(dtype)?)
}
