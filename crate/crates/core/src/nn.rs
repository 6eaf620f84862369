//! Parameter storage and the handful of layers the generator, discriminator
//! and feature networks are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::im2col::{col2im, im2col};

/// Named trainable tensors of one network, ordered by path.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, path: String, value: Tensor) -> Result<Var> {
        if self.vars.contains_key(&path) {
            return Err(invalid(format!("duplicate parameter {path}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.vars.insert(path, var.clone());
        Ok(var)
    }

    pub fn get(&self, path: &str) -> Option<&Var> {
        self.vars.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites parameters from `values`; every stored path must be present
    /// with a matching shape.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (path, var) in &self.vars {
            let v = values
                .get(path)
                .ok_or_else(|| invalid(format!("missing parameter {path}")))?;
            if v.dims() != var.dims() {
                return Err(invalid(format!(
                    "parameter {path}: shape {:?} does not match {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Registers parameters under a path prefix with seeded initialization.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: String::new(),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let saved = std::mem::replace(&mut self.prefix, String::new());
        self.prefix = if saved.is_empty() {
            name.to_string()
        } else {
            format!("{saved}.{name}")
        };
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).map_err(|e| invalid(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value, shape, &self.store.device)?;
        let path = self.path(name);
        self.store.insert(path, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample, per-channel statistics.
    #[default]
    Instance,
    /// Statistics shared across the batch, always computed from the current batch.
    Batch,
    None,
}

const INIT_STD: f64 = 0.02;

#[derive(Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.normal("weight", &[c_out, c_in, kernel, kernel], 0.0, INIT_STD)?;
            let bias = if bias {
                Some(b.constant("bias", &[c_out], 0.0)?)
            } else {
                None
            };
            Ok(Self {
                weight,
                bias,
                stride,
                padding,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d_patches(x, self.weight.as_tensor(), self.stride, self.padding)?;
        add_channel_bias(y, self.bias.as_ref())
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }
}

/// Convolution as patch extraction and one matrix product. Candle's direct
/// kernel computes the weight gradient as a convolution with an image-sized
/// kernel, which is several times slower on CPU.
pub fn conv2d_patches(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (c_out, c_in, kh, kw) = w.dims4()?;
    if c_in != c || h + 2 * padding < kh || wd + 2 * padding < kw || stride == 0 {
        return Err(invalid(format!(
            "conv2d: input {:?} incompatible with kernel {:?}",
            x.dims(),
            w.dims()
        )));
    }
    let (ho, wo) = ((h + 2 * padding - kh) / stride + 1, (wd + 2 * padding - kw) / stride + 1);
    let cols = im2col(x, kh, kw, stride, padding)?;
    let wm = w.reshape((c_out, c * kh * kw))?;
    Ok(wm.broadcast_matmul(&cols)?.reshape((n, c_out, ho, wo))?)
}

/// Transposed convolution; with kernel 3, stride 2, padding 1 and output
/// padding 1 it doubles the spatial size exactly.
#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    pub fn upsample2x(b: &mut Builder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        b.scoped(name, |b| {
            let weight = b.normal("weight", &[c_in, c_out, 3, 3], 0.0, INIT_STD)?;
            Ok(Self {
                weight,
                bias: None,
                stride: 2,
                padding: 1,
                output_padding: 1,
            })
        })
    }

    /// Computed as the adjoint of patch extraction applied to Wᵀ·x.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (c_in, c_out, k, _) = self.weight.dims4()?;
        let (s, p, op) = (self.stride, self.padding, self.output_padding);
        if c != c_in || k < p + 1 || op >= s || h == 0 || w == 0 {
            return Err(invalid(format!(
                "transposed convolution: input {:?} incompatible with kernel {:?}",
                x.dims(),
                self.weight.dims()
            )));
        }
        let (ho, wo) = ((h - 1) * s + k + op - 2 * p, (w - 1) * s + k + op - 2 * p);
        let wt = self.weight.as_tensor().reshape((c_in, c_out * k * k))?.t()?;
        let cols = wt.broadcast_matmul(&x.reshape((n, c_in, h * w))?)?;
        let y = col2im(&cols, (c_out, ho, wo), k, k, s, p)?;
        add_channel_bias(y, self.bias.as_ref())
    }
}

fn add_channel_bias(y: Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
        None => Ok(y),
    }
}

#[derive(Clone)]
pub struct Norm {
    kind: NormKind,
    affine: Option<(Var, Var)>,
}

impl Norm {
    const EPS: f64 = 1e-5;

    pub fn new(b: &mut Builder, name: &str, kind: NormKind, channels: usize) -> Result<Self> {
        let affine = match kind {
            NormKind::None => None,
            _ => Some(b.scoped(name, |b| {
                Ok((
                    b.normal("weight", &[channels], 1.0, INIT_STD)?,
                    b.constant("bias", &[channels], 0.0)?,
                ))
            })?),
        };
        Ok(Self { kind, affine })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normalized = match self.kind {
            NormKind::None => return Ok(x.clone()),
            NormKind::Instance => {
                let (n, c, h, w) = x.dims4()?;
                let flat = x.reshape((n, c, h * w))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                centered
                    .broadcast_div(&(var + Self::EPS)?.sqrt()?)?
                    .reshape((n, c, h, w))?
            }
            NormKind::Batch => {
                let (n, c, h, w) = x.dims4()?;
                let flat = x.transpose(0, 1)?.reshape((c, n * h * w))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                centered
                    .broadcast_div(&(var + Self::EPS)?.sqrt()?)?
                    .reshape((c, n, h, w))?
                    .transpose(0, 1)?
                    .contiguous()?
            }
        };
        let (gamma, beta) = self.affine.as_ref().expect("affine params for active norm");
        let gamma = gamma.as_tensor().reshape((1, (), 1, 1))?;
        let beta = beta.as_tensor().reshape((1, (), 1, 1))?;
        Ok(normalized.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.normal("weight", &[d_out, d_in], 0.0, INIT_STD)?,
                bias: b.constant("bias", &[d_out], 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}
