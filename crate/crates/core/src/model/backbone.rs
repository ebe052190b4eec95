//! Convolutional feature extractors.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamGroup};
use crate::error::{MgtrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// ResNet-50 with frozen batch-norm, stride 32, 2048 output channels.
    Resnet50,
    /// One stage per entry, each a stride-2 3×3 convolution followed by a
    /// stride-1 one, so the total stride is `2^stages`. No normalization
    /// layers.
    Tiny { channels: Vec<usize> },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Tiny { channels: vec![16, 32, 64] }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        match self {
            BackboneConfig::Resnet50 => 32,
            BackboneConfig::Tiny { channels } => 1 << channels.len(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            BackboneConfig::Resnet50 => 2048,
            BackboneConfig::Tiny { channels } => channels.last().copied().unwrap_or(3),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    fn new(
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Result<Self> {
        let weight = init.kaiming(&format!("{name}.weight"), &[c_out, c_in, k, k], group)?;
        let bias = if bias {
            Some(init.constant(&format!("{name}.bias"), &[c_out], 0.0, group)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let k = self.weight.dim(2)?;
        let y = if k <= 3 {
            self.forward_im2col(x)?
        } else {
            // Pad explicitly and drop the rows/columns past the last stride
            // window: the output is unchanged, and candle's conv backward
            // (which derives the output padding from the height alone) then
            // sees an exact fit in both dimensions.
            let (p, s) = (self.padding, self.stride);
            let x = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
            let (_, _, h, w) = x.dims4()?;
            let used = |n: usize| (n - k) / s * s + k;
            let x = x.narrow(2, 0, used(h))?.narrow(3, 0, used(w))?;
            x.conv2d(&self.weight, 0, s, 1, 1)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }

    /// Small kernels as shifted views times a matrix. candle's CPU conv
    /// backward goes through a transposed convolution that dominates the
    /// training step; here the backward pass is matmuls and slice copies.
    fn forward_im2col(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (o, _, k, _) = self.weight.dims4()?;
        let (p, s) = (self.padding, self.stride);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        // enough trailing zeros for every view to span s·ho rows and s·wo columns
        let extra = |n: usize, out: usize| (k - 1 + s * out).saturating_sub(n + 2 * p);
        let x = x
            .pad_with_zeros(2, p, p + extra(h, ho))?
            .pad_with_zeros(3, p, p + extra(w, wo))?;
        let mut views = Vec::with_capacity(k * k);
        for di in 0..k {
            for dj in 0..k {
                let v = x.narrow(2, di, s * ho)?.narrow(3, dj, s * wo)?;
                let v = if s > 1 {
                    v.contiguous()?
                        .reshape((b, c, ho, s, wo, s))?
                        .narrow(3, 0, 1)?
                        .narrow(5, 0, 1)?
                        .reshape((b, c, ho, wo))?
                } else {
                    v
                };
                views.push(v);
            }
        }
        let cols = Tensor::stack(&views, 2)?.reshape((b, c * k * k, ho * wo))?;
        let y = self.weight.reshape((o, c * k * k))?.broadcast_matmul(&cols)?;
        Ok(y.reshape((b, o, ho, wo))?)
    }
}

/// Batch norm with fixed statistics and affine parameters.
#[derive(Debug, Clone)]
struct FrozenBatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

impl FrozenBatchNorm {
    fn new(init: &mut Init, name: &str, c: usize) -> Result<Self> {
        let g = ParamGroup::Frozen;
        Ok(FrozenBatchNorm {
            weight: init.constant(&format!("{name}.weight"), &[c], 1.0, g)?,
            bias: init.constant(&format!("{name}.bias"), &[c], 0.0, g)?,
            running_mean: init.constant(&format!("{name}.running_mean"), &[c], 0.0, g)?,
            running_var: init.constant(&format!("{name}.running_var"), &[c], 1.0, g)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = self.weight.broadcast_mul(&(&self.running_var + 1e-5)?.sqrt()?.recip()?)?;
        let shift = (&self.bias - self.running_mean.broadcast_mul(&scale)?)?;
        Ok(x
            .broadcast_mul(&scale.reshape((1, (), 1, 1))?)?
            .broadcast_add(&shift.reshape((1, (), 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: FrozenBatchNorm,
    conv2: Conv2d,
    bn2: FrozenBatchNorm,
    conv3: Conv2d,
    bn3: FrozenBatchNorm,
    downsample: Option<(Conv2d, FrozenBatchNorm)>,
}

impl Bottleneck {
    fn new(init: &mut Init, name: &str, c_in: usize, width: usize, stride: usize, group: ParamGroup) -> Result<Self> {
        let c_out = width * 4;
        let downsample = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(init, &format!("{name}.downsample.0"), c_in, c_out, 1, stride, false, group)?,
                FrozenBatchNorm::new(init, &format!("{name}.downsample.1"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Bottleneck {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), c_in, width, 1, 1, false, group)?,
            bn1: FrozenBatchNorm::new(init, &format!("{name}.bn1"), width)?,
            conv2: Conv2d::new(init, &format!("{name}.conv2"), width, width, 3, stride, false, group)?,
            bn2: FrozenBatchNorm::new(init, &format!("{name}.bn2"), width)?,
            conv3: Conv2d::new(init, &format!("{name}.conv3"), width, c_out, 1, 1, false, group)?,
            bn3: FrozenBatchNorm::new(init, &format!("{name}.bn3"), c_out)?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let h = self.bn2.forward(&self.conv2.forward(&h)?)?.relu()?;
        let h = self.bn3.forward(&self.conv3.forward(&h)?)?;
        let identity = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        Ok((h + identity)?.relu()?)
    }
}

#[derive(Debug, Clone)]
enum Layers {
    Resnet50 {
        conv1: Conv2d,
        bn1: FrozenBatchNorm,
        blocks: Vec<Bottleneck>,
    },
    Tiny {
        convs: Vec<Conv2d>,
    },
}

#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Layers,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        match cfg {
            BackboneConfig::Tiny { channels } => {
                let g = ParamGroup::Backbone;
                let mut convs = Vec::new();
                let mut c_in = 3;
                for (s, &c) in channels.iter().enumerate() {
                    convs.push(Conv2d::new(init, &format!("backbone.stage{s}.conv1"), c_in, c, 3, 2, true, g)?);
                    convs.push(Conv2d::new(init, &format!("backbone.stage{s}.conv2"), c, c, 3, 1, true, g)?);
                    c_in = c;
                }
                Ok(Backbone {
                    layers: Layers::Tiny { convs },
                })
            }
            BackboneConfig::Resnet50 => {
                let prefix = "backbone.0.body";
                // stem and layer1 stay frozen, as in the reference detector setup
                let frozen = ParamGroup::Frozen;
                let conv1 = Conv2d::new(init, &format!("{prefix}.conv1"), 3, 64, 7, 2, false, frozen)?;
                let bn1 = FrozenBatchNorm::new(init, &format!("{prefix}.bn1"), 64)?;
                let mut blocks = Vec::new();
                let mut c_in = 64;
                for (li, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                    let group = if li == 0 { frozen } else { ParamGroup::Backbone };
                    for b in 0..depth {
                        let stride = if b == 0 && li > 0 { 2 } else { 1 };
                        let name = format!("{prefix}.layer{}.{b}", li + 1);
                        blocks.push(Bottleneck::new(init, &name, c_in, width, stride, group)?);
                        c_in = width * 4;
                    }
                }
                Ok(Backbone {
                    layers: Layers::Resnet50 { conv1, bn1, blocks },
                })
            }
        }
    }

    pub fn stride(&self) -> usize {
        match self.layers {
            Layers::Resnet50 { .. } => 32,
            Layers::Tiny { ref convs } => 1 << (convs.len() / 2),
        }
    }

    /// `[B, 3, H, W]` normalized pixels to a `[B, C, H/s, W/s]` feature map.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.stride();
        if c != 3 {
            return Err(MgtrError::Shape(format!("expected 3 image channels, got {c}")));
        }
        if h < s || w < s {
            return Err(MgtrError::ImageTooSmall(format!(
                "{w}x{h} image is smaller than one {s}x{s} stride window"
            )));
        }
        match &self.layers {
            Layers::Tiny { convs } => {
                let mut x = images.clone();
                for conv in convs {
                    x = conv.forward(&x)?.relu()?;
                }
                Ok(x)
            }
            Layers::Resnet50 { conv1, bn1, blocks } => {
                let x = bn1.forward(&conv1.forward(images)?)?.relu()?;
                // 3x3/2 max pool with one pixel of padding; inputs are >= 0
                // after the ReLU so zero padding is neutral.
                let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
                let mut x = x.max_pool2d_with_stride((3, 3), (2, 2))?;
                for block in blocks {
                    x = block.forward(&x)?;
                }
                Ok(x)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use candle_core::{DType, Device, Var};

    use super::*;
    use crate::model::params::ParamStore;

    #[test]
    fn conv_matches_candle_reference() {
        for (k, stride, h, w) in [(3, 2, 10, 9), (3, 1, 7, 8), (1, 2, 9, 10), (7, 2, 17, 12), (3, 2, 8, 8)] {
            let mut store = ParamStore::new(Device::Cpu, DType::F64);
            let conv = Conv2d::new(&mut Init::new(&mut store, 3), "c", 2, 3, k, stride, true, ParamGroup::Backbone).unwrap();
            let x = Tensor::randn(0f64, 1.0, (2, 2, h, w), &Device::Cpu).unwrap();
            let reference = x
                .conv2d(&conv.weight, k / 2, stride, 1, 1)
                .unwrap()
                .broadcast_add(&conv.bias.as_ref().unwrap().reshape((1, (), 1, 1)).unwrap())
                .unwrap();
            let ours = conv.forward(&x).unwrap();
            assert_eq!(ours.dims(), reference.dims(), "k={k} s={stride} {h}x{w}");
            let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "k={k} s={stride} {h}x{w}: {diff}");
        }
    }

    #[test]
    fn backward_through_odd_non_square_images() {
        let mut store = ParamStore::new(Device::Cpu, DType::F32);
        let cfg = BackboneConfig::Tiny { channels: vec![4, 4, 4] };
        let backbone = Backbone::new(&mut Init::new(&mut store, 1), &cfg).unwrap();
        for (h, w) in [(37, 36), (36, 37), (45, 64), (64, 45)] {
            let x = Var::from_tensor(&Tensor::ones((2, 3, h, w), DType::F32, &Device::Cpu).unwrap()).unwrap();
            let y = backbone.forward(x.as_tensor()).unwrap();
            let grads = y.sum_all().unwrap().backward().unwrap();
            assert_eq!(grads.get(x.as_tensor()).unwrap().dims(), &[2, 3, h, w]);
        }
    }
}
