//! Training objectives. Every function takes and returns candle tensors so
//! gradients flow through; scalar results are rank-0 tensors.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::dataset::WeatherClass;
use crate::error::{invalid, Error, Result};

pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the L1 term inside the cycle loss; the perceptual term gets 1 − λ.
    pub lambda_cycle_blend: f64,
    pub w_adv: f64,
    pub w_cycle: f64,
    pub w_class: f64,
    pub w_seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cycle_blend: 0.8,
            w_adv: 1.0,
            w_cycle: 1.0,
            w_class: 1.0,
            w_seg: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_adv", self.w_adv),
            ("w_cycle", self.w_cycle),
            ("w_class", self.w_class),
            ("w_seg", self.w_seg),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(invalid(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        check_lambda(self.lambda_cycle_blend)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let ok = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric(what.to_string()))
    }
}

/// Scalar value of a rank-0 tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// log(1 + e^z), stable for large |z|.
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let neg_abs = z.abs()?.neg()?;
    Ok((z.relu()? + (neg_abs.exp()? + 1.0)?.log()?)?)
}

/// Cross-entropy between a predicted cue distribution (N, N_s, H, W) and a
/// one-hot target of the same shape, averaged over pixels.
pub fn seg_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target, "segmentation loss")?;
    if pred.rank() != 4 {
        return Err(invalid("segmentation maps must be (N, N_s, H, W)"));
    }
    let log_p = (pred + LOG_EPS)?.log()?;
    let per_pixel = (target * log_p)?.sum(1)?.neg()?;
    Ok(per_pixel.mean_all()?)
}

/// Discriminator objective: −log σ(real) − log(1 − σ(fake)), each averaged over patches.
pub fn adversarial_loss_d(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    check_finite(d_real, "real logits")?;
    check_finite(d_fake, "fake logits")?;
    Ok((softplus(&d_real.neg()?)?.mean_all()? + softplus(d_fake)?.mean_all()?)?)
}

/// Non-saturating generator objective: −log σ(fake).
pub fn adversarial_loss_g(d_fake: &Tensor) -> Result<Tensor> {
    check_finite(d_fake, "fake logits")?;
    Ok(softplus(&d_fake.neg()?)?.mean_all()?)
}

pub fn cycle_l1(x: &Tensor, x_rec: &Tensor, y: &Tensor, y_rec: &Tensor) -> Result<Tensor> {
    same_shape(x, x_rec, "cycle x")?;
    same_shape(y, y_rec, "cycle y")?;
    Ok(((x_rec - x)?.abs()?.mean_all()? + (y_rec - y)?.abs()?.mean_all()?)?)
}

/// A frozen feature network φ returning one map per selected layer.
pub trait PerceptualExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// φ(x) = x, useful for checking the loss arithmetic.
pub struct IdentityExtractor;

impl PerceptualExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Σ_j (1 / H_j W_j) Σ_{h,w} (‖φ_j(x) − φ_j(x_rec)‖² + ‖φ_j(y) − φ_j(y_rec)‖²),
/// averaged over the batch.
pub fn perceptual_loss(
    phi: &dyn PerceptualExtractor,
    x: &Tensor,
    x_rec: &Tensor,
    y: &Tensor,
    y_rec: &Tensor,
) -> Result<Tensor> {
    same_shape(x, x_rec, "perceptual x")?;
    same_shape(y, y_rec, "perceptual y")?;
    let mut total: Option<Tensor> = None;
    for (a, b) in [(x, x_rec), (y, y_rec)] {
        let fa = phi.features(a).map_err(|e| invalid(format!("feature extractor: {e}")))?;
        let fb = phi.features(b).map_err(|e| invalid(format!("feature extractor: {e}")))?;
        if fa.len() != fb.len() {
            return Err(invalid("feature extractor returned inconsistent layer counts"));
        }
        for (ma, mb) in fa.iter().zip(&fb) {
            same_shape(ma, mb, "feature map")?;
            let (_, _, h, w) = ma.dims4()?;
            let term = ((ma - mb)?.sqr()?.sum((1, 2, 3))? / (h * w) as f64)?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| invalid("feature extractor returned no layers"))
}

/// λ · l1 + (1 − λ) · perceptual.
pub fn cycle_total(l1: &Tensor, perc: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    Ok(((l1 * lambda)? + (perc * (1.0 - lambda))?)?)
}

/// Mean cross-entropy of (N, 5) logits against one class.
pub fn class_cross_entropy(logits: &Tensor, target: WeatherClass) -> Result<Tensor> {
    let (_, k) = logits.dims2()?;
    if target.code() >= k {
        return Err(invalid(format!("class index {} out of range", target.code())));
    }
    let log_p = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(log_p.narrow(1, target.code(), 1)?.mean_all()?.neg()?)
}

/// Classifier loss pushing G(x) toward the target class and F(y) toward the source class.
pub fn classification_loss(
    logits_gx: &Tensor,
    target_y: WeatherClass,
    logits_fy: &Tensor,
    target_x: WeatherClass,
) -> Result<Tensor> {
    Ok((class_cross_entropy(logits_gx, target_y)? + class_cross_entropy(logits_fy, target_x)?)?)
}

/// The generator-side terms of one step. Segmentation terms are absent when
/// the composition does not use the segmentation branch.
#[derive(Debug, Clone)]
pub struct GeneratorTerms {
    pub adv_g_xy: Tensor,
    pub adv_g_yx: Tensor,
    pub cycle: Tensor,
    pub classify: Tensor,
    pub seg_x: Option<Tensor>,
    pub seg_y: Option<Tensor>,
}

pub fn total_generator_loss(terms: &GeneratorTerms, w: &LossWeights) -> Result<Tensor> {
    let named = [
        ("adv_g_xy", Some(&terms.adv_g_xy)),
        ("adv_g_yx", Some(&terms.adv_g_yx)),
        ("cycle", Some(&terms.cycle)),
        ("classify", Some(&terms.classify)),
        ("seg_x", terms.seg_x.as_ref()),
        ("seg_y", terms.seg_y.as_ref()),
    ];
    for (name, t) in named {
        if let Some(t) = t {
            if !scalar(t)?.is_finite() {
                return Err(Error::Numeric(format!("loss term {name}")));
            }
        }
    }
    let mut total = ((((&terms.adv_g_xy + &terms.adv_g_yx)? * w.w_adv)?
        + (&terms.cycle * w.w_cycle)?)?
        + (&terms.classify * w.w_class)?)?;
    for s in [&terms.seg_x, &terms.seg_y].into_iter().flatten() {
        total = (total + (s * w.w_seg)?)?;
    }
    Ok(total)
}
