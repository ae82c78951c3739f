use candle_core::Tensor;

use crate::error::Result;
use crate::nn::{Attention, Component, LayerNorm, Linear, ParamStore};

struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(ps: &mut ParamStore, c: Component, name: &str, width: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(ps, c, &format!("{name}.up"), width, hidden)?,
            down: Linear::new(ps, c, &format!("{name}.down"), hidden, width)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu()?)
    }
}

/// Post-norm self-attention block over flattened multi-scale tokens.
pub struct EncoderLayer {
    attn: Attention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, i: usize, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        let c = Component::Encoder;
        Ok(EncoderLayer {
            attn: Attention::new(ps, c, &format!("layer{i}.attn"), width, heads)?,
            norm1: LayerNorm::new(ps, c, &format!("layer{i}.norm1"), width)?,
            ffn: FeedForward::new(ps, c, &format!("layer{i}.ffn"), width, hidden)?,
            norm2: LayerNorm::new(ps, c, &format!("layer{i}.norm2"), width)?,
        })
    }

    /// `x`, `pos`: `(T, d)`
    pub fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qk = (x + pos)?;
        let x = self.norm1.forward(&(x + self.attn.forward(&qk, &qk, x)?)?)?;
        self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

/// Query self-attention, cross-attention into encoder memory, then feed-forward.
pub struct DecoderLayer {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, i: usize, width: usize, heads: usize, hidden: usize) -> Result<Self> {
        let c = Component::Decoder;
        Ok(DecoderLayer {
            self_attn: Attention::new(ps, c, &format!("layer{i}.self_attn"), width, heads)?,
            norm1: LayerNorm::new(ps, c, &format!("layer{i}.norm1"), width)?,
            cross_attn: Attention::new(ps, c, &format!("layer{i}.cross_attn"), width, heads)?,
            norm2: LayerNorm::new(ps, c, &format!("layer{i}.norm2"), width)?,
            ffn: FeedForward::new(ps, c, &format!("layer{i}.ffn"), width, hidden)?,
            norm3: LayerNorm::new(ps, c, &format!("layer{i}.norm3"), width)?,
        })
    }

    /// `tgt`, `query_pos`: `(Q, d)`; `memory`, `memory_pos`: `(T, d)`
    pub fn forward(&self, tgt: &Tensor, query_pos: &Tensor, memory: &Tensor, memory_pos: &Tensor) -> Result<Tensor> {
        let q = (tgt + query_pos)?;
        let tgt = self.norm1.forward(&(tgt + self.self_attn.forward(&q, &q, tgt)?)?)?;
        let q = (&tgt + query_pos)?;
        let k = (memory + memory_pos)?;
        let tgt = self.norm2.forward(&(&tgt + self.cross_attn.forward(&q, &k, memory)?)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }
}
