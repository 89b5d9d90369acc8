//! Parameter storage and the handful of layers the model is assembled from.
//!
//! Every trainable tensor lives in a [`ParamStore`] under its canonical
//! dotted name. Initialization draws from a seeded ChaCha stream so that a
//! model built twice from the same seed is bit-identical.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Named trainable parameters, ordered by name.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
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

    fn insert(&mut self, name: String, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(out)
    }

    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name.into(), values, shape)
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name.into(), vec![value; n], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Variables whose name satisfies `pred`, in name order.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Total scalar count across all parameters satisfying `pred`.
    pub fn count(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.vars
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrite parameters from `values`; every stored parameter must be present
    /// with a matching shape.
    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: expected {:?}, got {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Overwrite a single parameter.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if value.dims() != var.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}`: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Affine map over the last dimension; weight is `(out, in)`.
pub fn linear(
    store: &mut ParamStore,
    name: &str,
    input: usize,
    output: usize,
    init: Init,
) -> Result<candle_nn::Linear> {
    let weight = match init {
        Init::Vit => store.normal(format!("{name}.weight"), &[output, input], 0.02)?,
        Init::FanIn => {
            store.uniform(format!("{name}.weight"), &[output, input], 1.0 / (input as f64).sqrt())?
        }
    };
    let bias = match init {
        Init::Vit => store.constant(format!("{name}.bias"), &[output], 0.0)?,
        Init::FanIn => store.uniform(format!("{name}.bias"), &[output], 1.0 / (input as f64).sqrt())?,
    };
    Ok(candle_nn::Linear::new(weight, Some(bias)))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, 0.02) weights and zero biases.
    Vit,
    /// Uniform(±1/sqrt(fan_in)) weights and biases.
    FanIn,
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.constant(format!("{name}.weight"), &[dim], 1.0)?,
            bias: store.constant(format!("{name}.bias"), &[dim], 0.0)?,
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// 2-D convolution over `(B, C, H, W)` with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        let weight = store.uniform(format!("{name}.weight"), &[output, input, kernel, kernel], bound)?;
        let bias = if bias {
            Some(store.uniform(format!("{name}.bias"), &[output], bound)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: kernel / 2,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Softmax over the last dimension, stabilized by a detached row maximum.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `sigmoid(x) = (tanh(x/2) + 1) / 2`; finite gradients for any finite input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Row-stochastic weights of 1-D bilinear resampling (half-pixel centers,
/// edge clamped), shaped `(output, input)`.
pub fn bilinear_weights(output: usize, input: usize) -> Vec<f64> {
    let mut w = vec![0.0; output * input];
    let ratio = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        w[o * input + i0] += 1.0 - frac;
        w[o * input + i1] += frac;
    }
    w
}

/// Bilinear resize of a `(B, C, H, W)` tensor, expressed as two matrix
/// products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dtype = x.dtype();
    let cols = Tensor::from_vec(bilinear_weights(out_w, w), (out_w, w), dev)?
        .to_dtype(dtype)?
        .t()?;
    let rows = Tensor::from_vec(bilinear_weights(out_h, h), (out_h, h), dev)?.to_dtype(dtype)?;
    let x = x.broadcast_matmul(&cols)?;
    Ok(rows.broadcast_matmul(&x)?)
}

/// Applies any candle module; keeps call sites uniform with the local layers.
pub fn apply<M: Module>(m: &M, x: &Tensor) -> Result<Tensor> {
    Ok(m.forward(x)?)
}
