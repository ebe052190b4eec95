//! The set-prediction network: CNN backbone, 1×1 channel reduction, sine
//! positional encoding, transformer encoder/decoder over learned queries, and
//! five prediction heads (three 3-way classifiers, two box regressors).

pub mod backbone;
pub mod import;
pub mod layers;
pub mod ops;
pub mod params;
pub mod position;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MgtrError, Result};
use crate::instances::{decode_predictions, PredictionSet, RawQueryOutput, NUM_CLASSES};
pub use backbone::{Backbone, BackboneConfig};
use layers::{DecoderLayer, EncoderLayer, LayerNorm, Linear, Mlp};
pub use ops::ForwardCtx;
pub use params::{ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_queries: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub backbone: BackboneConfig,
    /// Apply the heads to every decoder layer and train them all.
    pub aux_loss: bool,
    pub dropout: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            num_queries: 100,
            enc_layers: 6,
            dec_layers: 6,
            num_heads: 8,
            ffn_dim: 2048,
            backbone: BackboneConfig::Resnet50,
            aux_loss: true,
            dropout: 0.1,
            precision: Precision::F32,
        }
    }
}

impl ModelConfig {
    /// CPU-trainable configuration used by the desk-scale experiments.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            num_queries: 16,
            enc_layers: 2,
            dec_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
            backbone: BackboneConfig::Tiny { channels: vec![16, 32, 64] },
            aux_loss: true,
            dropout: 0.0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return Err(MgtrError::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(MgtrError::Config("d_model must be even".into()));
        }
        if let BackboneConfig::Tiny { channels } = &self.backbone {
            if channels.is_empty() || channels.len() > 5 || channels.contains(&0) {
                return Err(MgtrError::Config(format!(
                    "tiny backbone needs 1 to 5 non-empty stages, got {channels:?}"
                )));
            }
        }
        if self.num_queries == 0 {
            return Err(MgtrError::Config("num_queries must be >= 1".into()));
        }
        if self.dec_layers == 0 {
            return Err(MgtrError::Config("at least one decoder layer is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MgtrError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Head outputs of one decoder layer for a batch.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    /// `[B, N, 3]` logits: person / non-person / not-match.
    pub h1_logits: Tensor,
    pub h2_logits: Tensor,
    /// `[B, N, 3]` logits: laeo / not-laeo / not-match.
    pub gaze_logits: Tensor,
    /// `[B, N, 4]` pre-squashing box outputs.
    pub box_a_logits: Tensor,
    pub box_b_logits: Tensor,
}

impl HeadOutputs {
    pub fn box_a(&self) -> Result<Tensor> {
        ops::sigmoid(&self.box_a_logits)
    }

    pub fn box_b(&self) -> Result<Tensor> {
        ops::sigmoid(&self.box_b_logits)
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.h1_logits.dim(0)?)
    }

    /// Copies the outputs to the host, one vector of queries per image.
    pub fn to_raw(&self) -> Result<Vec<Vec<RawQueryOutput>>> {
        let fetch = |t: &Tensor| -> Result<Vec<Vec<Vec<f64>>>> { Ok(t.to_dtype(DType::F64)?.to_vec3::<f64>()?) };
        let (h1, h2, gz, ba, bb) = (
            fetch(&self.h1_logits)?,
            fetch(&self.h2_logits)?,
            fetch(&self.gaze_logits)?,
            fetch(&self.box_a_logits)?,
            fetch(&self.box_b_logits)?,
        );
        let arr3 = |v: &[f64]| -> [f64; NUM_CLASSES] { [v[0], v[1], v[2]] };
        let arr4 = |v: &[f64]| -> [f64; 4] { [v[0], v[1], v[2], v[3]] };
        Ok((0..h1.len())
            .map(|b| {
                (0..h1[b].len())
                    .map(|q| RawQueryOutput {
                        h1_logits: arr3(&h1[b][q]),
                        h2_logits: arr3(&h2[b][q]),
                        gaze_logits: arr3(&gz[b][q]),
                        box_a_logits: arr4(&ba[b][q]),
                        box_b_logits: arr4(&bb[b][q]),
                    })
                    .collect()
            })
            .collect())
    }

    pub fn decode(&self, image_ids: &[String]) -> Result<Vec<PredictionSet>> {
        let raw = self.to_raw()?;
        if raw.len() != image_ids.len() {
            return Err(MgtrError::Shape(format!(
                "{} images in the batch but {} ids",
                raw.len(),
                image_ids.len()
            )));
        }
        raw.iter()
            .zip(image_ids)
            .map(|(r, id)| decode_predictions(id.clone(), r))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One entry per supervised decoder layer; the final layer is last.
    pub layers: Vec<HeadOutputs>,
    /// Per encoder layer, `[B, heads, HW, HW]`.
    pub encoder_attention: Vec<Tensor>,
    /// Per decoder layer, `[B, heads, N, HW]`.
    pub decoder_cross_attention: Vec<Tensor>,
    /// Feature-map (H, W).
    pub feature_size: (usize, usize),
}

impl ForwardOutput {
    pub fn final_heads(&self) -> &HeadOutputs {
        self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Debug, Clone)]
struct PredictionHeads {
    h1_class: Linear,
    h2_class: Linear,
    gaze_class: Linear,
    h1_bbox: Mlp,
    h2_bbox: Mlp,
}

pub struct Mgtr {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    input_proj_weight: Tensor,
    input_proj_bias: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    query_embed: Tensor,
    heads: PredictionHeads,
}

impl Mgtr {
    /// Builds a freshly initialized model; identical seeds give identical
    /// parameters.
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(device.clone(), cfg.precision.dtype());
        let mut init = params::Init::new(&mut store, seed);
        let d = cfg.d_model;
        let t = ParamGroup::Transformer;
        let backbone = Backbone::new(&mut init, &cfg.backbone)?;
        let c = cfg.backbone.out_channels();
        let input_proj_weight = init.fan_in("input_proj.weight", &[d, c, 1, 1], t)?;
        let input_proj_bias = init.uniform("input_proj.bias", &[d], 1.0 / (c as f64).sqrt(), t)?;
        let encoder = (0..cfg.enc_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut init,
                    &format!("transformer.encoder.layers.{i}"),
                    d,
                    cfg.num_heads,
                    cfg.ffn_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.dec_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut init,
                    &format!("transformer.decoder.layers.{i}"),
                    d,
                    cfg.num_heads,
                    cfg.ffn_dim,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder_norm = LayerNorm::new(&mut init, "transformer.decoder.norm", d, t)?;
        let query_embed = init.normal("query_embed.weight", &[cfg.num_queries, d], 1.0, t)?;
        let heads = PredictionHeads {
            h1_class: Linear::new(&mut init, "h1_class_embed", d, NUM_CLASSES, t)?,
            h2_class: Linear::new(&mut init, "h2_class_embed", d, NUM_CLASSES, t)?,
            gaze_class: Linear::new(&mut init, "gaze_class_embed", d, NUM_CLASSES, t)?,
            h1_bbox: Mlp::new(&mut init, "h1_bbox_embed", &[d, d, d, 4], t)?,
            h2_bbox: Mlp::new(&mut init, "h2_bbox_embed", &[d, d, d, 4], t)?,
        };
        Ok(Mgtr {
            cfg: cfg.clone(),
            params: store,
            backbone,
            input_proj_weight,
            input_proj_bias,
            encoder,
            decoder,
            decoder_norm,
            query_embed,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn query_embed(&self) -> &Tensor {
        &self.query_embed
    }

    pub fn extract_features(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.forward(&images.to_dtype(self.dtype())?)
    }

    /// 1×1 convolution from C to d channels, then flattening of the spatial
    /// grid in row-major order. Returns `[B, H·W, d]`.
    pub fn reduce_and_flatten(&self, features: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = features.dims4()?;
        let tokens = features.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let weight = self.input_proj_weight.reshape((self.cfg.d_model, c))?;
        ops::linear(&tokens, &weight, Some(&self.input_proj_bias))
    }

    /// Runs the encoder stack. `pos` is `[H·W, d]` or `[B, H·W, d]`.
    pub fn encode(&self, src: &Tensor, pos: &Tensor, ctx: &mut ForwardCtx) -> Result<(Tensor, Vec<Tensor>)> {
        let mut x = src.clone();
        let mut maps = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (y, attn) = layer.forward(&x, pos, ctx)?;
            x = y;
            maps.push(attn);
        }
        Ok((x, maps))
    }

    /// Runs the decoder stack over `queries` (`[N, d]`). Returns the
    /// normalized output embedding of every layer (`[B, N, d]` each) and the
    /// cross-attention maps.
    pub fn decode(
        &self,
        memory: &Tensor,
        pos: &Tensor,
        queries: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let b = memory.dim(0)?;
        let (n, d) = queries.dims2()?;
        let queries = queries.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let mut tgt: Option<Tensor> = None;
        let mut outs = Vec::with_capacity(self.decoder.len());
        let mut maps = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let (y, cross) = layer.forward(tgt.as_ref(), &queries, memory, pos, ctx)?;
            outs.push(self.decoder_norm.forward(&y)?);
            maps.push(cross);
            tgt = Some(y);
        }
        Ok((outs, maps))
    }

    pub fn predict_heads(&self, embedding: &Tensor) -> Result<HeadOutputs> {
        let h = &self.heads;
        Ok(HeadOutputs {
            h1_logits: h.h1_class.forward(embedding)?,
            h2_logits: h.h2_class.forward(embedding)?,
            gaze_logits: h.gaze_class.forward(embedding)?,
            box_a_logits: h.h1_bbox.forward(embedding)?,
            box_b_logits: h.h2_bbox.forward(embedding)?,
        })
    }

    /// Full forward pass on a `[B, 3, H, W]` batch of normalized images.
    pub fn forward(&self, images: &Tensor, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let features = self.extract_features(images)?;
        let (_, _, h, w) = features.dims4()?;
        let src = self.reduce_and_flatten(&features)?;
        let pos = position::positional_tensor(h, w, self.cfg.d_model, self.dtype(), self.device())?;
        let (memory, encoder_attention) = self.encode(&src, &pos, ctx)?;
        let (outs, decoder_cross_attention) = self.decode(&memory, &pos, &self.query_embed, ctx)?;
        let supervised: Vec<&Tensor> = if self.cfg.aux_loss {
            outs.iter().collect()
        } else {
            outs.last().into_iter().collect()
        };
        let layers = supervised
            .into_iter()
            .map(|o| self.predict_heads(o))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput {
            layers,
            encoder_attention,
            decoder_cross_attention,
            feature_size: (h, w),
        })
    }

    /// Eval-mode forward followed by decoding of the final layer.
    pub fn predict(&self, images: &Tensor, image_ids: &[String]) -> Result<Vec<PredictionSet>> {
        let out = self.forward(images, &mut ForwardCtx::Eval)?;
        out.final_heads().decode(image_ids)
    }
}
