//! Three-branch generator: a global initial translation, a spatial attention
//! map and a weather-cue segmentation, fused into a translation map that
//! blends the translated image with the input.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{Builder, Conv2d, ConvTranspose2d, Norm, NormKind, ParamStore};

/// How the translation map is assembled from the branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// T = attention ⊙ reduced segmentation.
    #[default]
    Full,
    /// T = attention; the segmentation branch is unused.
    AttentionOnly,
    /// T = reduced segmentation; the attention branch is unused.
    SegmentationOnly,
    /// T ≡ 1, so the output is the initial translation scaled by α.
    InitOnly,
}

impl Composition {
    pub fn name(self) -> &'static str {
        match self {
            Composition::Full => "full",
            Composition::AttentionOnly => "attention_only",
            Composition::SegmentationOnly => "segmentation_only",
            Composition::InitOnly => "init_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Composition::Full,
            Composition::AttentionOnly,
            Composition::SegmentationOnly,
            Composition::InitOnly,
        ]
        .into_iter()
        .find(|c| c.name() == s)
    }

    pub fn uses_attention(self) -> bool {
        matches!(self, Composition::Full | Composition::AttentionOnly)
    }

    pub fn uses_segmentation(self) -> bool {
        matches!(self, Composition::Full | Composition::SegmentationOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BranchSharing {
    /// One encoder and residual trunk feeding three decoder heads.
    #[default]
    Shared,
    /// Each branch has its own encoder and trunk.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub n_residual_blocks: usize,
    /// Encoder convolution blocks; all but the first halve the resolution.
    pub n_down: usize,
    /// Kernel of the first encoder conv and of each head's output conv.
    pub edge_kernel: usize,
    pub norm: NormKind,
    pub sharing: BranchSharing,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            n_residual_blocks: 6,
            n_down: 3,
            edge_kernel: 7,
            norm: NormKind::Instance,
            sharing: BranchSharing::Shared,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_down < 1 {
            return Err(invalid("n_down must be at least 1"));
        }
        if self.n_residual_blocks < 1 {
            return Err(invalid("n_residual_blocks must be at least 1"));
        }
        if self.base_channels < 1 {
            return Err(invalid("base_channels must be at least 1"));
        }
        if self.edge_kernel % 2 == 0 {
            return Err(invalid("edge_kernel must be odd"));
        }
        Ok(())
    }

    /// Spatial sizes must survive `n_down - 1` halvings exactly.
    pub fn check_image_size(&self, (h, w): (usize, usize)) -> Result<()> {
        let f = 1usize << (self.n_down - 1);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid(format!(
                "image size {h}x{w} must be a positive multiple of {f}"
            )));
        }
        Ok(())
    }
}

/// Everything one generator pass produces. Branches not used by the
/// configured composition are `None`.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub g_init: Tensor,
    pub att: Option<Tensor>,
    pub seg: Option<Tensor>,
    pub t: Tensor,
    pub g: Tensor,
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: Norm,
}

impl ConvBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.conv.forward(x)?)?.relu()?)
    }
}

#[derive(Clone)]
struct ResidualBlock {
    a: ConvBlock,
    conv: Conv2d,
    norm: Norm,
}

impl ResidualBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.a.forward(x)?;
        let h = self.norm.forward(&self.conv.forward(&h)?)?;
        Ok((x + h)?)
    }
}

#[derive(Clone)]
struct Encoder {
    downs: Vec<ConvBlock>,
    trunk: Vec<ResidualBlock>,
}

impl Encoder {
    fn new(b: &mut Builder, cfg: &GeneratorConfig) -> Result<Self> {
        let bias = cfg.norm == NormKind::None;
        let mut ch = cfg.base_channels;
        let mut downs = Vec::with_capacity(cfg.n_down);
        downs.push(ConvBlock {
            conv: Conv2d::new(b, "down0", 3, ch, cfg.edge_kernel, 1, cfg.edge_kernel / 2, bias)?,
            norm: Norm::new(b, "down0_norm", cfg.norm, ch)?,
        });
        for i in 1..cfg.n_down {
            downs.push(ConvBlock {
                conv: Conv2d::new(b, &format!("down{i}"), ch, ch * 2, 3, 2, 1, bias)?,
                norm: Norm::new(b, &format!("down{i}_norm"), cfg.norm, ch * 2)?,
            });
            ch *= 2;
        }
        let mut trunk = Vec::with_capacity(cfg.n_residual_blocks);
        for i in 0..cfg.n_residual_blocks {
            trunk.push(b.scoped(&format!("res{i}"), |b| {
                Ok(ResidualBlock {
                    a: ConvBlock {
                        conv: Conv2d::new(b, "conv0", ch, ch, 3, 1, 1, bias)?,
                        norm: Norm::new(b, "norm0", cfg.norm, ch)?,
                    },
                    conv: Conv2d::new(b, "conv1", ch, ch, 3, 1, 1, bias)?,
                    norm: Norm::new(b, "norm1", cfg.norm, ch)?,
                })
            })?);
        }
        Ok(Self { downs, trunk })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for d in &self.downs {
            h = d.forward(&h)?;
        }
        for r in &self.trunk {
            h = r.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Clone)]
struct Head {
    ups: Vec<(ConvTranspose2d, Norm)>,
    out: Conv2d,
}

impl Head {
    fn new(b: &mut Builder, cfg: &GeneratorConfig, out_channels: usize) -> Result<Self> {
        let mut ch = cfg.base_channels << (cfg.n_down - 1);
        let mut ups = Vec::with_capacity(cfg.n_down - 1);
        for i in 0..cfg.n_down - 1 {
            ups.push((
                ConvTranspose2d::upsample2x(b, &format!("up{i}"), ch, ch / 2)?,
                Norm::new(b, &format!("up{i}_norm"), cfg.norm, ch / 2)?,
            ));
            ch /= 2;
        }
        let out = Conv2d::new(
            b,
            "out",
            ch,
            out_channels,
            cfg.edge_kernel,
            1,
            cfg.edge_kernel / 2,
            true,
        )?;
        Ok(Self { ups, out })
    }

    /// Pre-activation output.
    fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut h = features.clone();
        for (up, norm) in &self.ups {
            h = norm.forward(&up.forward(&h)?)?.relu()?;
        }
        self.out.forward(&h)
    }
}

#[derive(Clone)]
enum Trunks {
    Shared(Encoder),
    Separate {
        init: Encoder,
        att: Encoder,
        seg: Encoder,
    },
}

/// A generator for one translation direction.
#[derive(Clone)]
pub struct Generator {
    config: GeneratorConfig,
    image_size: (usize, usize),
    n_s: usize,
    relevant_cues: Vec<usize>,
    composition: Composition,
    trunks: Trunks,
    init_head: Head,
    att_head: Head,
    seg_head: Head,
    params: ParamStore,
}

impl Generator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: &GeneratorConfig,
        image_size: (usize, usize),
        n_s: usize,
        relevant_cues: &[usize],
        composition: Composition,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        config.check_image_size(image_size)?;
        validate_relevant_cues(relevant_cues, n_s)?;
        let mut params = ParamStore::new(dtype, device.clone());
        let mut b = Builder::new(&mut params, seed);
        let trunks = match config.sharing {
            BranchSharing::Shared => Trunks::Shared(b.scoped("encoder", |b| Encoder::new(b, config))?),
            BranchSharing::Separate => Trunks::Separate {
                init: b.scoped("encoder_init", |b| Encoder::new(b, config))?,
                att: b.scoped("encoder_att", |b| Encoder::new(b, config))?,
                seg: b.scoped("encoder_seg", |b| Encoder::new(b, config))?,
            },
        };
        let init_head = b.scoped("init", |b| Head::new(b, config, 3))?;
        let att_head = b.scoped("att", |b| Head::new(b, config, 1))?;
        let seg_head = b.scoped("seg", |b| Head::new(b, config, n_s))?;
        Ok(Self {
            config: config.clone(),
            image_size,
            n_s,
            relevant_cues: relevant_cues.to_vec(),
            composition,
            trunks,
            init_head,
            att_head,
            seg_head,
            params,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn composition(&self) -> Composition {
        self.composition
    }

    pub fn n_s(&self) -> usize {
        self.n_s
    }

    pub fn relevant_cues(&self) -> &[usize] {
        &self.relevant_cues
    }

    /// Same weights, different composition.
    pub fn with_composition(&self, composition: Composition) -> Self {
        Self {
            composition,
            ..self.clone()
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != 3 || (dims[2], dims[3]) != self.image_size {
            return Err(invalid(format!(
                "generator expects (N, 3, {}, {}), got {dims:?}",
                self.image_size.0, self.image_size.1
            )));
        }
        Ok(())
    }

    fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        match &self.trunks {
            Trunks::Shared(e) => {
                let f = e.forward(x)?;
                Ok((f.clone(), f.clone(), f))
            }
            Trunks::Separate { init, att, seg } => {
                Ok((init.forward(x)?, att.forward(x)?, seg.forward(x)?))
            }
        }
    }

    /// Global style translation, saturated to [-1, 1].
    pub fn init_translation(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (f, _, _) = self.features(x)?;
        Ok(self.init_head.forward(&f)?.tanh()?)
    }

    /// Spatial attention in [0, 1], one channel.
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, f, _) = self.features(x)?;
        Ok(candle_nn::ops::sigmoid(&self.att_head.forward(&f)?)?)
    }

    /// Per-pixel distribution over the N_s cue classes.
    pub fn segment_cues(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (_, _, f) = self.features(x)?;
        Ok(candle_nn::ops::softmax(&self.seg_head.forward(&f)?, 1)?)
    }

    /// Full pass: every branch the composition needs, the translation map and
    /// the α-weighted composite.
    pub fn generate(&self, x: &Tensor, alpha: f64) -> Result<GeneratorOutput> {
        check_alpha(alpha)?;
        self.check_input(x)?;
        let (f_init, f_att, f_seg) = self.features(x)?;
        let g_init = self.init_head.forward(&f_init)?.tanh()?;
        let att = if self.composition.uses_attention() {
            Some(candle_nn::ops::sigmoid(&self.att_head.forward(&f_att)?)?)
        } else {
            None
        };
        let seg = if self.composition.uses_segmentation() {
            Some(candle_nn::ops::softmax(&self.seg_head.forward(&f_seg)?, 1)?)
        } else {
            None
        };
        let t = match (self.composition, &att, &seg) {
            (Composition::Full, Some(a), Some(s)) => translation_map(a, s, &self.relevant_cues)?,
            (Composition::AttentionOnly, Some(a), _) => a.clone(),
            (Composition::SegmentationOnly, _, Some(s)) => reduce_cues(s, &self.relevant_cues)?,
            _ => {
                let (n, _, h, w) = x.dims4()?;
                Tensor::ones((n, 1, h, w), x.dtype(), x.device())?
            }
        };
        let g = compose(x, &g_init, &t, alpha)?;
        Ok(GeneratorOutput {
            g_init,
            att,
            seg,
            t,
            g,
        })
    }
}

fn validate_relevant_cues(relevant: &[usize], n_s: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(invalid("relevant cue set is empty"));
    }
    for &c in relevant {
        if c == crate::dataset::CueVocabulary::BACKGROUND {
            return Err(invalid("relevant cues must exclude background"));
        }
        if c >= n_s {
            return Err(invalid(format!("relevant cue {c} out of range for {n_s} classes")));
        }
    }
    Ok(())
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Sum of the relevant cue channels of a (N, N_s, H, W) distribution,
/// clamped to [0, 1], as a (N, 1, H, W) map.
pub fn reduce_cues(seg: &Tensor, relevant: &[usize]) -> Result<Tensor> {
    let n_s = seg.dim(1)?;
    validate_relevant_cues(relevant, n_s)?;
    let mut acc = seg.i((.., relevant[0]..relevant[0] + 1))?;
    for &c in &relevant[1..] {
        acc = (acc + seg.i((.., c..c + 1))?)?;
    }
    Ok(acc.clamp(0f64, 1f64)?)
}

/// T = att ⊙ clamp(Σ_{c ∈ relevant} seg_c, 0, 1).
pub fn translation_map(att: &Tensor, seg: &Tensor, relevant: &[usize]) -> Result<Tensor> {
    let (n, c, h, w) = att.dims4()?;
    let (sn, _, sh, sw) = seg.dims4()?;
    if c != 1 || (n, h, w) != (sn, sh, sw) {
        return Err(invalid(format!(
            "attention {:?} and segmentation {:?} are not congruent",
            att.dims(),
            seg.dims()
        )));
    }
    Ok((att * reduce_cues(seg, relevant)?)?)
}

/// g = αT ⊙ g_init + (1 − αT) ⊙ x.
pub fn compose(x: &Tensor, g_init: &Tensor, t: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if x.dims() != g_init.dims() {
        return Err(invalid(format!(
            "input {:?} and initial translation {:?} differ in shape",
            x.dims(),
            g_init.dims()
        )));
    }
    let w = (t * alpha)?;
    let keep = w.affine(-1.0, 1.0)?;
    Ok((g_init.broadcast_mul(&w)? + x.broadcast_mul(&keep)?)?)
}
