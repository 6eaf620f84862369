//! Frozen convolutional feature networks used by the perceptual loss and by
//! the FID/KID embedding step.
//!
//! A network is described by a VGG-style plan: comma-separated output channel
//! counts for 3×3 conv+ReLU layers, with `M` for 2×2 max pooling. `vgg19`
//! expands to the standard 19-layer plan and expects torchvision-style
//! `features.<i>.weight` / `features.<i>.bias` tensors in a safetensors file.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image_tensor::{stack_images, ImageTensor};
use crate::losses::PerceptualExtractor;
use crate::nn::conv2d_patches;

const VGG19_PLAN: &str = "64,64,M,128,128,M,256,256,256,256,M,512,512,512,512,M,512,512,512,512,M";
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlanItem {
    Conv(usize),
    Pool,
}

fn parse_plan(plan: &str) -> Result<Vec<PlanItem>> {
    let plan = if plan.trim() == "vgg19" { VGG19_PLAN } else { plan };
    let items = plan
        .split(',')
        .map(str::trim)
        .map(|tok| match tok {
            "M" | "m" => Ok(PlanItem::Pool),
            n => n
                .parse::<usize>()
                .ok()
                .filter(|&c| c > 0)
                .map(PlanItem::Conv)
                .ok_or_else(|| invalid(format!("bad feature plan entry {n:?}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    if !items.iter().any(|i| matches!(i, PlanItem::Conv(_))) {
        return Err(invalid("feature plan has no conv layers"));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureNetConfig {
    /// Layer plan, or `vgg19`.
    pub plan: String,
    /// Zero-based conv ordinals whose ReLU outputs are emitted. Empty means the last conv.
    pub taps: Vec<usize>,
    /// Safetensors file with pretrained weights; seeded random weights when absent.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    /// Map [-1, 1] inputs to ImageNet-normalized [0, 1] before the first layer.
    pub imagenet_input: bool,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        Self {
            plan: "16,16,M,32,32".into(),
            taps: Vec::new(),
            weights: None,
            seed: 0x5eed,
            imagenet_input: false,
        }
    }
}

impl FeatureNetConfig {
    /// Pretrained VGG19 truncated at relu3_4.
    pub fn vgg19(weights: PathBuf) -> Self {
        Self {
            plan: "vgg19".into(),
            taps: vec![7],
            weights: Some(weights),
            seed: 0,
            imagenet_input: true,
        }
    }
}

struct ConvLayer {
    weight: Tensor,
    bias: Tensor,
    tap: bool,
}

enum Layer {
    Conv(ConvLayer),
    Pool,
}

/// A frozen conv+ReLU stack. Weights are plain tensors, so gradients reach
/// the input but never the network.
pub struct ConvFeatureNet {
    layers: Vec<Layer>,
    tap_channels: Vec<usize>,
    imagenet_input: bool,
    device: Device,
    dtype: DType,
}

impl ConvFeatureNet {
    pub fn new(config: &FeatureNetConfig, dtype: DType, device: &Device) -> Result<Self> {
        let plan = parse_plan(&config.plan)?;
        let n_conv = plan.iter().filter(|p| matches!(p, PlanItem::Conv(_))).count();
        let taps: Vec<usize> = if config.taps.is_empty() {
            vec![n_conv - 1]
        } else {
            config.taps.clone()
        };
        if let Some(&bad) = taps.iter().find(|&&t| t >= n_conv) {
            return Err(invalid(format!("feature tap {bad} beyond {n_conv} conv layers")));
        }
        let last_tap = *taps.iter().max().expect("nonempty taps");
        let loaded = match &config.weights {
            Some(p) => Some(load_safetensors(p, device)?),
            None => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::new();
        let mut tap_channels = Vec::new();
        let mut c_in = 3;
        let mut conv_ordinal = 0;
        // torchvision numbering: conv i, relu i+1; pool takes one index
        let mut tv_index = 0;
        for item in plan {
            if conv_ordinal > last_tap {
                break;
            }
            match item {
                PlanItem::Pool => {
                    layers.push(Layer::Pool);
                    tv_index += 1;
                }
                PlanItem::Conv(c_out) => {
                    let (weight, bias) = match &loaded {
                        Some(map) => {
                            let w = take(map, &format!("features.{tv_index}.weight"), &[c_out, c_in, 3, 3])?;
                            let b = take(map, &format!("features.{tv_index}.bias"), &[c_out])?;
                            (w, b)
                        }
                        None => {
                            let std = (2.0 / (c_in * 9) as f64).sqrt();
                            let dist = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
                            let v: Vec<f64> = (0..c_out * c_in * 9).map(|_| dist.sample(&mut rng)).collect();
                            (
                                Tensor::from_vec(v, (c_out, c_in, 3, 3), device)?,
                                Tensor::zeros(c_out, DType::F64, device)?,
                            )
                        }
                    };
                    let tap = taps.contains(&conv_ordinal);
                    if tap {
                        tap_channels.push(c_out);
                    }
                    layers.push(Layer::Conv(ConvLayer {
                        weight: weight.to_dtype(dtype)?,
                        bias: bias.to_dtype(dtype)?.reshape((1, c_out, 1, 1))?,
                        tap,
                    }));
                    c_in = c_out;
                    conv_ordinal += 1;
                    tv_index += 2;
                }
            }
        }
        Ok(Self {
            layers,
            tap_channels,
            imagenet_input: config.imagenet_input,
            device: device.clone(),
            dtype,
        })
    }

    /// Total width of the pooled embedding.
    pub fn embedding_dim(&self) -> usize {
        self.tap_channels.iter().sum()
    }

    fn prepare_input(&self, x: &Tensor) -> Result<Tensor> {
        if !self.imagenet_input {
            return Ok(x.clone());
        }
        let mean = Tensor::new(&IMAGENET_MEAN, &self.device)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, &self.device)?.to_dtype(x.dtype())?.reshape((1, 3, 1, 1))?;
        let unit = x.affine(0.5, 0.5)?;
        Ok(unit.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    /// ReLU outputs of every tapped layer, (N, C_j, H_j, W_j).
    pub fn feature_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h == 0 || w == 0 {
            return Err(invalid(format!("feature net expects (N, 3, H, W), got {:?}", x.dims())));
        }
        let mut h = self.prepare_input(&x.to_dtype(self.dtype)?)?;
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Pool => {
                    h = max_pool_2x2(&h)?;
                }
                Layer::Conv(conv) => {
                    h = conv2d_patches(&h, &conv.weight, 1, 1)?
                        .broadcast_add(&conv.bias)?
                        .relu()?;
                    if conv.tap {
                        out.push(h.clone());
                    }
                }
            }
        }
        Ok(out)
    }
}

impl PerceptualExtractor for ConvFeatureNet {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let maps = self.feature_maps(x)?;
        Ok(maps.into_iter().map(|m| m.to_dtype(x.dtype())).collect::<candle_core::Result<_>>()?)
    }
}

fn load_safetensors(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
        });
    }
    Ok(candle_core::safetensors::load(path, device)?)
}

fn take(map: &HashMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = map
        .get(name)
        .ok_or_else(|| invalid(format!("weights file lacks {name}")))?;
    if t.dims() != shape {
        return Err(invalid(format!("{name}: expected {shape:?}, found {:?}", t.dims())));
    }
    Ok(t.clone())
}

/// Maps images to fixed-width embedding vectors.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>>;
}

impl Embedder for ConvFeatureNet {
    fn dim(&self) -> usize {
        self.embedding_dim()
    }

    /// Spatially averaged tap outputs, concatenated.
    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        let x = stack_images(images, &self.device, self.dtype)?;
        let pooled: Vec<Tensor> = self
            .feature_maps(&x)?
            .iter()
            .map(|m| m.mean((2, 3)))
            .collect::<candle_core::Result<_>>()?;
        let joined = Tensor::cat(&pooled, 1)?.to_dtype(DType::F64)?;
        Ok(joined.to_vec2::<f64>()?)
    }
}

/// Flattened pixels as the embedding.
pub struct FlattenEmbedder {
    pub dim: usize,
}

impl Embedder for FlattenEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<f64>>> {
        images
            .iter()
            .map(|img| {
                if img.data.len() != self.dim {
                    return Err(invalid(format!(
                        "image has {} values, embedder expects {}",
                        img.data.len(),
                        self.dim
                    )));
                }
                Ok(img.data.iter().map(|&v| v as f64).collect())
            })
            .collect()
    }
}

/// 2×2 max pooling with stride 2; an odd trailing row or column is dropped.
/// Written as a reduction over window axes because candle's max_pool2d
/// backward divides the gradient by the window area.
fn max_pool_2x2(h: &Tensor) -> Result<Tensor> {
    let (n, c, ih, iw) = h.dims4()?;
    if ih < 2 || iw < 2 {
        return Err(invalid("input too small for feature net pooling"));
    }
    let (oh, ow) = (ih / 2, iw / 2);
    Ok(h.narrow(2, 0, oh * 2)?
        .narrow(3, 0, ow * 2)?
        .reshape((n, c, oh, 2, ow, 2))?
        .max(5)?
        .max(3)?)
}
