//! Minimal layer primitives shared by the reprogramming layers, heads and
//! backbones. Weights are either trainable [`Var`]s or frozen constants; both
//! run through the same forward code.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;
use crate::ops;
use crate::params::ParamSet;
use crate::rng::{fan_in_bound, uniform_vec, DetRng};

/// A weight that is either trainable or frozen.
#[derive(Debug, Clone)]
pub enum Weight {
    Trainable(Var),
    Frozen(Tensor),
}

impl Weight {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Weight::Trainable(v) => v.as_tensor(),
            Weight::Frozen(t) => t,
        }
    }
}

pub fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)
}

/// 2-D convolution layer (square kernel).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Weight,
    pub bias: Option<Weight>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Fan-in scaled random init; registers parameters under `name` when trainable.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dtype: DType,
        dev: &Device,
        rng: &mut DetRng,
        params: Option<&mut ParamSet>,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let bound = fan_in_bound(fan_in);
        let w = tensor_from_f64(
            uniform_vec(rng, c_out * fan_in, bound),
            &[c_out, c_in, kernel, kernel],
            dtype,
            dev,
        )?;
        let b = tensor_from_f64(uniform_vec(rng, c_out, bound), &[c_out], dtype, dev)?;
        match params {
            Some(set) => {
                let wv = Var::from_tensor(&w)?;
                let bv = Var::from_tensor(&b)?;
                set.push(format!("{name}.weight"), wv.clone())?;
                set.push(format!("{name}.bias"), bv.clone())?;
                Ok(Self {
                    weight: Weight::Trainable(wv),
                    bias: Some(Weight::Trainable(bv)),
                    stride,
                    padding,
                })
            }
            None => Ok(Self {
                weight: Weight::Frozen(w),
                bias: Some(Weight::Frozen(b)),
                stride,
                padding,
            }),
        }
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>, stride: usize, padding: usize) -> Self {
        Self {
            weight: Weight::Frozen(weight),
            bias: bias.map(Weight::Frozen),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::conv2d(
            x,
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
            self.stride,
            self.padding,
        )
    }
}

/// Fully connected layer, input (k, in) -> (k, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Weight, // (out, in)
    pub bias: Weight,   // (out)
}

impl Linear {
    pub fn init(
        name: &str,
        d_in: usize,
        d_out: usize,
        dtype: DType,
        dev: &Device,
        rng: &mut DetRng,
        params: Option<&mut ParamSet>,
    ) -> Result<Self> {
        let bound = fan_in_bound(d_in);
        let w = tensor_from_f64(uniform_vec(rng, d_out * d_in, bound), &[d_out, d_in], dtype, dev)?;
        let b = tensor_from_f64(uniform_vec(rng, d_out, bound), &[d_out], dtype, dev)?;
        match params {
            Some(set) => {
                let wv = Var::from_tensor(&w)?;
                let bv = Var::from_tensor(&b)?;
                set.push(format!("{name}.weight"), wv.clone())?;
                set.push(format!("{name}.bias"), bv.clone())?;
                Ok(Self {
                    weight: Weight::Trainable(wv),
                    bias: Weight::Trainable(bv),
                })
            }
            None => Ok(Self {
                weight: Weight::Frozen(w),
                bias: Weight::Frozen(b),
            }),
        }
    }

    /// Zero-initialised variant: useful for heads that must start uniform.
    pub fn zeros(
        name: &str,
        d_in: usize,
        d_out: usize,
        dtype: DType,
        dev: &Device,
        params: &mut ParamSet,
    ) -> Result<Self> {
        let wv = Var::zeros((d_out, d_in), dtype, dev)?;
        let bv = Var::zeros((d_out,), dtype, dev)?;
        params.push(format!("{name}.weight"), wv.clone())?;
        params.push(format!("{name}.bias"), bv.clone())?;
        Ok(Self {
            weight: Weight::Trainable(wv),
            bias: Weight::Trainable(bv),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.tensor().t()?.contiguous()?)?
            .broadcast_add(self.bias.tensor())?)
    }
}

/// Inverted-scaling dropout driven by an explicit RNG. `None` means the layer
/// runs deterministically (identity).
pub fn dropout(x: &Tensor, p: f64, rng: Option<&mut DetRng>) -> Result<Tensor> {
    let rng = match rng {
        Some(rng) if p > 0.0 => rng,
        _ => return Ok(x.clone()),
    };
    let n = x.elem_count();
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..n)
        .map(|_| {
            if rand::Rng::gen::<f64>(rng) < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let mask = tensor_from_f64(mask, x.dims(), x.dtype(), x.device())?;
    Ok((x * mask)?)
}

/// Mean over the spatial dimensions: (b, c, h, w) -> (b, c).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(3)?.mean(2)?)
}
