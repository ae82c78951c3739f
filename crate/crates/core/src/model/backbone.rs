use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Component, Conv2d, ParamStore};

/// Four stride-2 conv blocks; blocks 2-4 feed the multi-scale stack (strides 4/8/16).
pub struct Backbone {
    blocks: Vec<(Conv2d, Conv2d)>,
}

/// Backbone outputs at strides 4, 8 and 16, each `(1, c_i, h_i, w_i)`.
#[derive(Debug, Clone)]
pub struct BackboneFeatures {
    pub levels: Vec<Tensor>,
}

impl BackboneFeatures {
    /// Stride-16 grid used to build the attention map.
    pub fn final_grid(&self) -> &Tensor {
        self.levels.last().expect("backbone has at least one level")
    }
}

impl Backbone {
    pub fn new(ps: &mut ParamStore, channels: &[usize; 4]) -> Result<Self> {
        let c = Component::CnnBackbone;
        let mut blocks = Vec::with_capacity(4);
        let mut input = 3;
        for (i, &out) in channels.iter().enumerate() {
            let down = Conv2d::new(ps, c, &format!("block{i}.down"), input, out, 3, 2, 1)?;
            let conv = Conv2d::new(ps, c, &format!("block{i}.conv"), out, out, 3, 1, 1)?;
            blocks.push((down, conv));
            input = out;
        }
        Ok(Backbone { blocks })
    }

    /// `image: (1, 3, H, W)`
    pub fn forward(&self, image: &Tensor) -> Result<BackboneFeatures> {
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(3);
        for (i, (down, conv)) in self.blocks.iter().enumerate() {
            x = down.forward(&x)?.relu()?;
            x = conv.forward(&x)?.relu()?;
            if i >= 1 {
                levels.push(x.clone());
            }
        }
        Ok(BackboneFeatures { levels })
    }
}

/// Per-level 1x1 convolutions mapping backbone channels to the model width.
pub struct Projection {
    convs: Vec<Conv2d>,
}

/// Projected features, one `(1, c, h_i, w_i)` grid per level.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub levels: Vec<Tensor>,
}

impl MultiScaleFeatures {
    pub fn shapes(&self) -> Result<Vec<(usize, usize)>> {
        self.levels
            .iter()
            .map(|t| {
                let (_, _, h, w) = t.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

impl Projection {
    pub fn new(ps: &mut ParamStore, channels: &[usize; 4], width: usize) -> Result<Self> {
        let convs = channels[1..]
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(ps, Component::Projection, &format!("level{i}"), c, width, 1, 1, 0))
            .collect::<Result<_>>()?;
        Ok(Projection { convs })
    }

    pub fn forward(&self, features: &BackboneFeatures) -> Result<MultiScaleFeatures> {
        let levels = self
            .convs
            .iter()
            .zip(&features.levels)
            .map(|(conv, f)| conv.forward(f))
            .collect::<Result<_>>()?;
        Ok(MultiScaleFeatures { levels })
    }
}
