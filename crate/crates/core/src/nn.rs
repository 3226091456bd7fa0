//! Layer primitives on top of candle tensors.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{bail, Result};
use crate::params::{Init, ParamBuilder};
use candle_core::Var;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        mut pb: ParamBuilder<'_>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = pb.weight("weight", &[c_out, c_in, kernel, kernel], Init::Kaiming(fan_in))?;
        let bias = pb.weight("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: ParamBuilder<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_bias(pb, d_in, d_out, Init::Const(0.0))
    }

    pub fn with_bias(pb: ParamBuilder<'_>, d_in: usize, d_out: usize, bias: Init) -> Result<Self> {
        Self::with_init(pb, d_in, d_out, 1.0, bias)
    }

    /// Weights drawn from `N(0, gain² / d_in)`.
    pub fn with_init(mut pb: ParamBuilder<'_>, d_in: usize, d_out: usize, gain: f64, bias: Init) -> Result<Self> {
        let weight = pb.weight("weight", &[d_out, d_in], Init::Normal(gain / (d_in as f64).sqrt()))?;
        let bias = pb.weight("bias", &[d_out], bias)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization without affine parameters: batch statistics in
/// training mode, running averages at inference.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub fn new(mut pb: ParamBuilder<'_>, channels: usize) -> Result<Self> {
        let running_mean = pb.buffer("running_mean", &[channels], 0.0)?;
        let running_var = pb.buffer("running_var", &[channels], 1.0)?;
        Ok(Self { running_mean, running_var, momentum: 0.1, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.running_mean.dim(0)? {
            bail!(Shape, "batch norm expects {} channels, got {c}", self.running_mean.dim(0)?);
        }
        let (centered, var) = if train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let new_mean = (self.running_mean.as_detached_tensor().affine(1.0 - m, 0.0)?
                + mean.detach().flatten_all()?.affine(m, 0.0)?)?;
            let new_var = (self.running_var.as_detached_tensor().affine(1.0 - m, 0.0)?
                + var.detach().flatten_all()?.affine(m * unbiased, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (centered, var)
        } else {
            let mean = self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?;
            (x.broadcast_sub(&mean)?, self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?)
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        Ok(centered.broadcast_mul(&inv_std)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// Logistic sigmoid with the pre-activation clamped to ±15 so outputs stay
/// strictly inside (0, 1) in single precision.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    let z = x.clamp(-15.0f64, 15.0f64)?;
    Ok((z.neg()?.exp()? + 1.0)?.recip()?)
}

/// Row-stochastic interpolation matrix for 2× bilinear upsampling with
/// pixel-center (align-corners = false) sampling.
pub fn bilinear_matrix(size: usize) -> Vec<f64> {
    let out = 2 * size;
    let mut m = vec![0.0; out * size];
    for o in 0..out {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        let frac = src - i0 as f64;
        m[o * size + i0] += 1.0 - frac;
        m[o * size + i1] += frac;
    }
    m
}

/// 2× bilinear upsampling of an `(N, C, H, W)` map, expressed as two
/// matrix products so that it is differentiable.
pub fn upsample_bilinear2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let dev = x.device();
    let dtype = x.dtype();
    let uw = Tensor::from_vec(bilinear_matrix(w), (2 * w, w), dev)?.to_dtype(dtype)?;
    let uh = Tensor::from_vec(bilinear_matrix(h), (2 * h, h), dev)?.to_dtype(dtype)?;
    // (N,C,H,W) x (W,2W) -> (N,C,H,2W)
    let y = x.broadcast_matmul(&uw.t()?.contiguous()?)?;
    // (N,C,2W,H) x (H,2H) -> (N,C,2W,2H)
    let y = y.transpose(2, 3)?.contiguous()?.broadcast_matmul(&uh.t()?.contiguous()?)?;
    Ok(y.transpose(2, 3)?.contiguous()?)
}

/// Numerically stable log-softmax over the last dimension.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Scalar tensor helper.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?.iter().sum())
}

pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn cpu() -> Device {
    Device::Cpu
}
