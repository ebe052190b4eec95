use candle_core::Tensor;

use super::ops::{self, ForwardCtx};
use super::params::{Init, ParamGroup};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Result<Self> {
        let weight = init.fan_in(&format!("{name}.weight"), &[out_dim, in_dim], group)?;
        let bias = init.uniform(
            &format!("{name}.bias"),
            &[out_dim],
            1.0 / (in_dim as f64).sqrt(),
            group,
        )?;
        Ok(Linear { weight, bias })
    }

    pub fn new_xavier(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, group: ParamGroup) -> Result<Self> {
        let weight = init.xavier(&format!("{name}.weight"), &[out_dim, in_dim], group)?;
        let bias = init.constant(&format!("{name}.bias"), &[out_dim], 0.0, group)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::linear(x, &self.weight, Some(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize, group: ParamGroup) -> Result<Self> {
        Ok(LayerNorm {
            weight: init.constant(&format!("{name}.weight"), &[dim], 1.0, group)?,
            bias: init.constant(&format!("{name}.bias"), &[dim], 0.0, group)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.weight, &self.bias, 1e-5)
    }
}

/// Multi-head attention with a packed `[3d, d]` input projection.
#[derive(Debug, Clone)]
pub struct MultiheadAttention {
    in_proj_weight: Tensor,
    in_proj_bias: Tensor,
    out_proj: Linear,
    num_heads: usize,
    d_model: usize,
}

impl MultiheadAttention {
    pub fn new(init: &mut Init, name: &str, d_model: usize, num_heads: usize) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(MultiheadAttention {
            in_proj_weight: init.xavier(&format!("{name}.in_proj_weight"), &[3 * d_model, d_model], g)?,
            in_proj_bias: init.constant(&format!("{name}.in_proj_bias"), &[3 * d_model], 0.0, g)?,
            out_proj: Linear::new_xavier(init, &format!("{name}.out_proj"), d_model, d_model, g)?,
            num_heads,
            d_model,
        })
    }

    fn project(&self, x: &Tensor, part: usize) -> Result<Tensor> {
        let d = self.d_model;
        let w = self.in_proj_weight.narrow(0, part * d, d)?;
        let b = self.in_proj_bias.narrow(0, part * d, d)?;
        let (bsz, len, _) = x.dims3()?;
        let y = ops::linear(x, &w, Some(&b))?;
        // [B, L, h, dh] -> [B, h, L, dh]
        Ok(y
            .reshape((bsz, len, self.num_heads, d / self.num_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the attended values `[B, Lq, d]` and the per-head attention
    /// weights `[B, h, Lq, Lk]` (rows sum to one).
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let (bsz, lq, d) = query.dims3()?;
        let dh = d / self.num_heads;
        let q = (self.project(query, 0)? * (1.0 / (dh as f64).sqrt()))?;
        let k = self.project(key, 1)?;
        let v = self.project(value, 2)?;
        let scores = q.matmul(&k.t()?)?;
        let attn = ops::softmax_last(&scores)?;
        let out = ctx.dropout(&attn)?.matmul(&v)?;
        let out = out.transpose(1, 2)?.reshape((bsz, lq, d))?;
        Ok((self.out_proj.forward(&out)?, attn))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    linear1: Linear,
    linear2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, prefix: &str, d_model: usize, ffn_dim: usize) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(FeedForward {
            linear1: Linear::new_xavier(init, &format!("{prefix}.linear1"), d_model, ffn_dim, g)?,
            linear2: Linear::new_xavier(init, &format!("{prefix}.linear2"), ffn_dim, d_model, g)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let h = self.linear1.forward(x)?.relu()?;
        self.linear2.forward(&ctx.dropout(&h)?)
    }
}

fn add_pos(x: &Tensor, pos: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_add(pos)?)
}

/// Post-norm encoder layer: positional encoding enters query and key only.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    self_attn: MultiheadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, prefix: &str, d_model: usize, num_heads: usize, ffn_dim: usize) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(EncoderLayer {
            self_attn: MultiheadAttention::new(init, &format!("{prefix}.self_attn"), d_model, num_heads)?,
            ffn: FeedForward::new(init, prefix, d_model, ffn_dim)?,
            norm1: LayerNorm::new(init, &format!("{prefix}.norm1"), d_model, g)?,
            norm2: LayerNorm::new(init, &format!("{prefix}.norm2"), d_model, g)?,
        })
    }

    pub fn forward(&self, src: &Tensor, pos: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Tensor)> {
        let qk = add_pos(src, pos)?;
        let (attended, attn) = self.self_attn.forward(&qk, &qk, src, ctx)?;
        let src = self.norm1.forward(&(src + ctx.dropout(&attended)?)?)?;
        let ff = self.ffn.forward(&src, ctx)?;
        let src = self.norm2.forward(&(&src + ctx.dropout(&ff)?)?)?;
        Ok((src, attn))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_attn: MultiheadAttention,
    cross_attn: MultiheadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, prefix: &str, d_model: usize, num_heads: usize, ffn_dim: usize) -> Result<Self> {
        let g = ParamGroup::Transformer;
        Ok(DecoderLayer {
            self_attn: MultiheadAttention::new(init, &format!("{prefix}.self_attn"), d_model, num_heads)?,
            cross_attn: MultiheadAttention::new(init, &format!("{prefix}.multihead_attn"), d_model, num_heads)?,
            ffn: FeedForward::new(init, prefix, d_model, ffn_dim)?,
            norm1: LayerNorm::new(init, &format!("{prefix}.norm1"), d_model, g)?,
            norm2: LayerNorm::new(init, &format!("{prefix}.norm2"), d_model, g)?,
            norm3: LayerNorm::new(init, &format!("{prefix}.norm3"), d_model, g)?,
        })
    }

    /// `tgt` is `None` on the first layer, meaning zeros. The queries are
    /// positional: they enter attention queries and keys, never values.
    pub fn forward(
        &self,
        tgt: Option<&Tensor>,
        queries: &Tensor,
        memory: &Tensor,
        pos: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<(Tensor, Tensor)> {
        let tgt = match tgt {
            Some(t) => t.clone(),
            None => queries.zeros_like()?,
        };
        let qk = tgt.broadcast_add(queries)?;
        let (sa, _) = self.self_attn.forward(&qk, &qk, &tgt, ctx)?;
        let tgt = (&tgt + ctx.dropout(&sa)?)?;
        let tgt = self.norm1.forward(&tgt)?;
        let q = tgt.broadcast_add(queries)?;
        let k = add_pos(memory, pos)?;
        let (ca, cross) = self.cross_attn.forward(&q, &k, memory, ctx)?;
        let tgt = self.norm2.forward(&(&tgt + ctx.dropout(&ca)?)?)?;
        let ff = self.ffn.forward(&tgt, ctx)?;
        let tgt = self.norm3.forward(&(&tgt + ctx.dropout(&ff)?)?)?;
        Ok((tgt, cross))
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(init: &mut Init, prefix: &str, dims: &[usize], group: ParamGroup) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| Linear::new(init, &format!("{prefix}.layers.{k}"), w[0], w[1], group))
            .collect::<Result<Vec<_>>>()?;
        Ok(Mlp { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if k + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}
