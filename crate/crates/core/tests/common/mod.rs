#![allow(dead_code)]

pub mod cases;
pub mod toy_run;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn set_elem(var: &Var, flat: usize, value: f64) {
    let shape = var.dims().to_vec();
    let mut v = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    v[flat] = value;
    var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
}

/// Below this norm a gradient is indistinguishable from zero at the probe
/// step; parameters that feed straight into a normalization have exactly
/// zero gradient and are compared in absolute terms.
const ZERO_GRAD_NORM: f64 = 1e-6;

/// Worst per-variable relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
/// of central differences with step `h`, checking at most `max_elems` evenly
/// spaced entries of each variable.
pub fn gradcheck(vars: &[Var], f: &dyn Fn() -> Tensor, h: f64, max_elems: usize) -> f64 {
    let loss = f();
    assert_eq!(loss.dtype(), DType::F64);
    let grads = loss.backward().unwrap();
    let mut worst: f64 = 0.0;
    for var in vars {
        let n = var.elem_count();
        let analytic_all = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; n],
        };
        let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let stride = n.div_ceil(max_elems).max(1);
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            set_elem(var, i, base[i] + h);
            let up = f().to_scalar::<f64>().unwrap();
            set_elem(var, i, base[i] - h);
            let down = f().to_scalar::<f64>().unwrap();
            set_elem(var, i, base[i]);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_all[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(ZERO_GRAD_NORM);
        let rel = diff2.sqrt() / denom;
        worst = worst.max(rel);
    }
    worst
}

/// Brute-force T(p) = att(p) · min(1, Σ_{c ∈ relevant} seg(c, p)) from flat
/// row-major buffers of one image.
pub fn translation_map_oracle(att: &[f64], seg: &[f64], n_s: usize, hw: usize, relevant: &[usize]) -> Vec<f64> {
    assert_eq!(seg.len(), n_s * hw);
    (0..hw)
        .map(|p| {
            let mut s = 0.0;
            for &c in relevant {
                s += seg[c * hw + p];
            }
            att[p] * s.clamp(0.0, 1.0)
        })
        .collect()
}

/// O(n²) unbiased MMD² with the cubic polynomial kernel, written as explicit loops.
pub fn mmd2_double_loop(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let m = x.len();
    let d = x[0].len() as f64;
    let k = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        (dot / d + 1.0).powi(3)
    };
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                acc += k(&x[i], &x[j]) + k(&y[i], &y[j]) - k(&x[i], &y[j]) - k(&x[j], &y[i]);
            }
        }
    }
    acc / (m * (m - 1)) as f64
}
