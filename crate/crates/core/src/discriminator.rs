//! Patch discriminator with an auxiliary weather-class head on a shared trunk.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::dataset::WeatherClass;
use crate::error::{invalid, Result};
use crate::nn::{leaky_relu, Builder, Conv2d, Linear, Norm, NormKind, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Stride-2 convolution blocks in the trunk.
    pub n_layers: usize,
    pub norm: NormKind,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_layers: 4,
            norm: NormKind::Instance,
        }
    }
}

impl DiscriminatorConfig {
    /// Spatial size of the realness map for a given input size.
    pub fn patch_grid(&self, (h, w): (usize, usize)) -> (usize, usize) {
        // k3 s2 p1: out = (in - 1) / 2 + 1; the patch head keeps size
        let mut s = (h, w);
        for _ in 0..self.n_layers {
            s = ((s.0 - 1) / 2 + 1, (s.1 - 1) / 2 + 1);
        }
        s
    }
}

const SLOPE: f64 = 0.2;

#[derive(Clone)]
pub struct Discriminator {
    image_size: (usize, usize),
    trunk: Vec<(Conv2d, Norm)>,
    patch_head: Conv2d,
    class_head: Linear,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(
        config: &DiscriminatorConfig,
        image_size: (usize, usize),
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if config.n_layers < 1 || config.base_channels < 1 {
            return Err(invalid("discriminator needs at least one layer and channel"));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(invalid("discriminator image size must be nonzero"));
        }
        let mut params = ParamStore::new(dtype, device.clone());
        let mut b = Builder::new(&mut params, seed);
        let mut trunk = Vec::with_capacity(config.n_layers);
        let mut c_in = 3;
        let mut ch = config.base_channels;
        for i in 0..config.n_layers {
            // no normalization on the first block
            let kind = if i == 0 { NormKind::None } else { config.norm };
            let conv = Conv2d::new(&mut b, &format!("trunk{i}"), c_in, ch, 3, 2, 1, true)?;
            let norm = Norm::new(&mut b, &format!("trunk{i}_norm"), kind, ch)?;
            trunk.push((conv, norm));
            c_in = ch;
            ch = (ch * 2).min(config.base_channels * 8);
        }
        let patch_head = Conv2d::new(&mut b, "patch", c_in, 1, 3, 1, 1, true)?;
        let class_head = Linear::new(&mut b, "class", c_in, WeatherClass::COUNT)?;
        Ok(Self {
            image_size,
            trunk,
            patch_head,
            class_head,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn check_input(&self, img: &Tensor) -> Result<()> {
        let d = img.dims();
        if d.len() != 4 || d[1] != 3 || (d[2], d[3]) != self.image_size {
            return Err(invalid(format!(
                "discriminator expects (N, 3, {}, {}), got {d:?}",
                self.image_size.0, self.image_size.1
            )));
        }
        Ok(())
    }

    fn features(&self, img: &Tensor) -> Result<Tensor> {
        self.check_input(img)?;
        let mut h = img.clone();
        for (conv, norm) in &self.trunk {
            h = leaky_relu(&norm.forward(&conv.forward(&h)?)?, SLOPE)?;
        }
        Ok(h)
    }

    /// Per-patch realness logits, (N, 1, h, w).
    pub fn discriminate(&self, img: &Tensor) -> Result<Tensor> {
        self.patch_head.forward(&self.features(img)?)
    }

    /// Weather-class logits, (N, 5).
    pub fn classify(&self, img: &Tensor) -> Result<Tensor> {
        let f = self.features(img)?;
        self.class_head.forward(&f.mean((2, 3))?)
    }

    /// Both heads from a single trunk pass.
    pub fn forward(&self, img: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.features(img)?;
        let realness = self.patch_head.forward(&f)?;
        let logits = self.class_head.forward(&f.mean((2, 3))?)?;
        Ok((realness, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_grid_at_paper_resolution() {
        // 300 -> 150 -> 75 -> 38 -> 19
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.patch_grid((300, 300)), (19, 19));
        let small = DiscriminatorConfig {
            base_channels: 2,
            ..cfg
        };
        let d = Discriminator::new(&small, (300, 300), 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 300, 300), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.discriminate(&x).unwrap().dims(), &[1, 1, 19, 19]);
    }

    #[test]
    fn outputs_are_finite_and_deterministic() {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            n_layers: 3,
            ..Default::default()
        };
        let d = Discriminator::new(&cfg, (16, 16), 5, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 3.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let (r1, c1) = d.forward(&x).unwrap();
        let r2 = d.discriminate(&x).unwrap();
        let c2 = d.classify(&x).unwrap();
        assert_eq!(c1.dims(), &[2, 5]);
        assert_eq!(r1.dims(), &[2, 1, 2, 2]);
        let a = r1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, r2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(a.iter().all(|v| v.is_finite()));
        let b = c1.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(b, c2.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert!(b.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trunk_perturbations_move_both_heads() {
        let cfg = DiscriminatorConfig {
            base_channels: 4,
            n_layers: 3,
            ..Default::default()
        };
        let d = Discriminator::new(&cfg, (16, 16), 2, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let flat = |t: Tensor| t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let (r0, c0) = d.forward(&x).unwrap();
        let (r0, c0) = (flat(r0), flat(c0));
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let weights: Vec<_> = d
            .params()
            .iter()
            .filter(|(k, _)| k.starts_with("trunk") && k.ends_with("weight"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        assert_eq!(weights.iter().filter(|(k, _)| !k.contains("norm")).count(), 3);
        for (name, var) in weights {
            let original = var.as_tensor().copy().unwrap();
            let delta = Tensor::randn(0f64, 1e-4, original.shape(), &Device::Cpu).unwrap();
            var.set(&(&original + delta).unwrap()).unwrap();
            let (r1, c1) = d.forward(&x).unwrap();
            var.set(&original).unwrap();
            assert!(dist(&r0, &flat(r1)) > 1e-9, "{name} leaves the patch head unchanged");
            assert!(dist(&c0, &flat(c1)) > 1e-9, "{name} leaves the class head unchanged");
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let cfg = DiscriminatorConfig {
            base_channels: 2,
            n_layers: 2,
            ..Default::default()
        };
        let d = Discriminator::new(&cfg, (16, 16), 5, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 8, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(d.discriminate(&x).is_err());
        assert!(d.classify(&x).is_err());
    }
}
