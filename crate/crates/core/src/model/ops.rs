//! Differentiable building blocks on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Numerically stable logistic function, written through `tanh` so the
/// backward pass stays finite for large negative inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `|x|` whose subgradient at zero is zero.
pub fn abs_zero_subgrad(x: &Tensor) -> Result<Tensor> {
    let sign = x.detach().sign()?;
    Ok((x * sign)?)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// Affine map over the last dimension with a `[out, in]` weight.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (in_dim, out_dim) = (dims[dims.len() - 1], weight.dim(0)?);
    let rows: usize = dims[..dims.len() - 1].iter().product();
    let y = x.reshape((rows, in_dim))?.matmul(&weight.t()?)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = out_dim;
    Ok(y.reshape(out_dims)?)
}

/// Forward-pass mode. Training mode carries the RNG that draws dropout masks,
/// so a seeded context reproduces the same masks.
pub enum ForwardCtx {
    Eval,
    Train { rng: ChaCha8Rng, dropout: f64 },
}

impl ForwardCtx {
    pub fn train(rng: ChaCha8Rng, dropout: f64) -> Self {
        ForwardCtx::Train { rng, dropout }
    }

    pub fn is_train(&self) -> bool {
        matches!(self, ForwardCtx::Train { .. })
    }

    pub fn dropout(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            ForwardCtx::Eval => Ok(x.clone()),
            ForwardCtx::Train { dropout, .. } if *dropout <= 0.0 => Ok(x.clone()),
            ForwardCtx::Train { rng, dropout } => {
                let keep = 1.0 - *dropout;
                let scale = 1.0 / keep;
                let mask: Vec<f64> = (0..x.elem_count())
                    .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
                Ok((x * mask)?)
            }
        }
    }
}

struct Atan;

impl candle_core::CustomOp1 for Atan {
    fn name(&self) -> &'static str {
        "atan"
    }

    fn cpu_fwd(
        &self,
        storage: &candle_core::CpuStorage,
        layout: &candle_core::Layout,
    ) -> candle_core::Result<(candle_core::CpuStorage, candle_core::Shape)> {
        use candle_core::cpu_backend::unary_map;
        use candle_core::CpuStorage;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unary_map(v, layout, f32::atan)),
            CpuStorage::F64(v) => CpuStorage::F64(unary_map(v, layout, f64::atan)),
            _ => candle_core::bail!("atan: only f32 and f64 are supported"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.div(&(arg.sqr()? + 1.0)?)?))
    }
}

/// Elementwise arctangent with a backward pass.
pub fn atan(x: &Tensor) -> Result<Tensor> {
    Ok(x.apply_op1(Atan)?)
}

pub fn host_tensor(data: Vec<f64>, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}
