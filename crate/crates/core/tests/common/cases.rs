//! Gradient-check cases shared by the gradient tests and the acceptance run.

use candle_core::{DType, Device, Tensor, Var};
use weather_gan::dataset::WeatherClass;
use weather_gan::discriminator::{Discriminator, DiscriminatorConfig};
use weather_gan::features::{ConvFeatureNet, FeatureNetConfig};
use weather_gan::generator::{Composition, Generator, GeneratorConfig};
use weather_gan::losses::*;
use weather_gan::nn::NormKind;

use super::{gradcheck, random_tensor, rng};

const H: f64 = 1e-6;

fn var(t: Tensor) -> Var {
    Var::from_tensor(&t).unwrap()
}

/// (name, worst relative error) for every loss function.
pub fn loss_cases() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();

    let logits = var(random_tensor(&mut r, &[2, 4, 4, 4], -2.0, 2.0));
    let mut onehot = vec![0f64; 2 * 4 * 16];
    for n in 0..2 {
        for p in 0..16 {
            onehot[(n * 4 + (p * 7 + n) % 4) * 16 + p] = 1.0;
        }
    }
    let target = Tensor::from_vec(onehot, (2, 4, 4, 4), &Device::Cpu).unwrap();
    out.push((
        "seg_loss",
        gradcheck(
            &[logits.clone()],
            &|| seg_loss(&candle_nn::ops::softmax(logits.as_tensor(), 1).unwrap(), &target).unwrap(),
            H,
            64,
        ),
    ));

    let real = var(random_tensor(&mut r, &[2, 1, 4, 4], -3.0, 3.0));
    let fake = var(random_tensor(&mut r, &[2, 1, 4, 4], -3.0, 3.0));
    out.push((
        "adversarial_loss_d",
        gradcheck(
            &[real.clone(), fake.clone()],
            &|| adversarial_loss_d(real.as_tensor(), fake.as_tensor()).unwrap(),
            H,
            64,
        ),
    ));
    out.push((
        "adversarial_loss_g",
        gradcheck(&[fake.clone()], &|| adversarial_loss_g(fake.as_tensor()).unwrap(), H, 64),
    ));

    let x = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let y = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    // offsets bounded away from zero keep |·| differentiable under the probe step
    let away = |t: &Tensor, r: &mut rand_chacha::ChaCha8Rng| {
        let sign = random_tensor(r, t.dims(), -1.0, 1.0).sign().unwrap();
        let mag = random_tensor(r, t.dims(), 0.1, 0.5);
        var((t + (sign * mag).unwrap()).unwrap())
    };
    let x_rec = away(&x, &mut r);
    let y_rec = away(&y, &mut r);
    out.push((
        "cycle_l1",
        gradcheck(
            &[x_rec.clone(), y_rec.clone()],
            &|| cycle_l1(&x, x_rec.as_tensor(), &y, y_rec.as_tensor()).unwrap(),
            H,
            64,
        ),
    ));

    let phi = ConvFeatureNet::new(
        &FeatureNetConfig {
            plan: "4,M,6".into(),
            ..FeatureNetConfig::default()
        },
        DType::F64,
        &Device::Cpu,
    )
    .unwrap();
    out.push((
        "perceptual_loss",
        gradcheck(
            &[x_rec.clone(), y_rec.clone()],
            &|| perceptual_loss(&phi, &x, x_rec.as_tensor(), &y, y_rec.as_tensor()).unwrap(),
            H,
            64,
        ),
    ));

    let l1 = var(Tensor::new(0.7f64, &Device::Cpu).unwrap());
    let perc = var(Tensor::new(1.9f64, &Device::Cpu).unwrap());
    out.push((
        "cycle_total",
        gradcheck(
            &[l1.clone(), perc.clone()],
            &|| cycle_total(l1.as_tensor(), perc.as_tensor(), 0.8).unwrap(),
            H,
            4,
        ),
    ));

    let lx = var(random_tensor(&mut r, &[3, 5], -2.0, 2.0));
    let ly = var(random_tensor(&mut r, &[3, 5], -2.0, 2.0));
    out.push((
        "class_cross_entropy",
        gradcheck(
            &[lx.clone()],
            &|| class_cross_entropy(lx.as_tensor(), WeatherClass::Rainy).unwrap(),
            H,
            64,
        ),
    ));
    out.push((
        "classification_loss",
        gradcheck(
            &[lx.clone(), ly.clone()],
            &|| classification_loss(lx.as_tensor(), WeatherClass::Cloudy, ly.as_tensor(), WeatherClass::Sunny).unwrap(),
            H,
            64,
        ),
    ));

    let terms: Vec<Var> = [0.3f64, 1.1, 0.8, 2.0, 0.4, 0.6]
        .iter()
        .map(|v| var(Tensor::new(*v, &Device::Cpu).unwrap()))
        .collect();
    let w = LossWeights {
        w_adv: 1.5,
        w_cycle: 0.7,
        w_class: 2.0,
        w_seg: 0.3,
        ..LossWeights::default()
    };
    out.push((
        "total_generator_loss",
        gradcheck(
            &terms,
            &|| {
                let t = GeneratorTerms {
                    adv_g_xy: terms[0].as_tensor().clone(),
                    adv_g_yx: terms[1].as_tensor().clone(),
                    cycle: terms[2].as_tensor().clone(),
                    classify: terms[3].as_tensor().clone(),
                    seg_x: Some(terms[4].as_tensor().clone()),
                    seg_y: Some(terms[5].as_tensor().clone()),
                };
                total_generator_loss(&t, &w).unwrap()
            },
            H,
            4,
        ),
    ));
    out
}

fn tiny_generator(composition: Composition) -> Generator {
    let cfg = GeneratorConfig {
        base_channels: 4,
        n_residual_blocks: 1,
        n_down: 2,
        edge_kernel: 3,
        norm: NormKind::Instance,
        ..GeneratorConfig::default()
    };
    Generator::new(&cfg, (8, 8), 4, &[1, 2], composition, 5, DType::F64, &Device::Cpu).unwrap()
}

/// Relative error of d/dθ Σ G(x)·R over the input and every generator parameter.
pub fn generator_case(composition: Composition) -> f64 {
    let g = tiny_generator(composition);
    let mut r = rng(21);
    let x = var(random_tensor(&mut r, &[1, 3, 8, 8], -1.0, 1.0));
    let weights = random_tensor(&mut r, &[1, 3, 8, 8], -1.0, 1.0);
    let mut vars = vec![x.clone()];
    vars.extend(g.params().iter().map(|(_, v)| v.clone()));
    gradcheck(
        &vars,
        &|| {
            (g.generate(x.as_tensor(), 0.7).unwrap().g * &weights)
                .unwrap()
                .sum_all()
                .unwrap()
        },
        H,
        12,
    )
}

/// Relative error of the gradient of both discriminator heads with respect
/// to every discriminator parameter.
pub fn discriminator_case() -> f64 {
    let cfg = DiscriminatorConfig {
        base_channels: 4,
        n_layers: 2,
        norm: NormKind::Instance,
    };
    let d = Discriminator::new(&cfg, (8, 8), 7, DType::F64, &Device::Cpu).unwrap();
    let mut r = rng(31);
    let x = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
    let wp = random_tensor(&mut r, &[2, 1, 2, 2], -1.0, 1.0);
    let wc = random_tensor(&mut r, &[2, 5], -1.0, 1.0);
    let vars: Vec<Var> = d.params().iter().map(|(_, v)| v.clone()).collect();
    gradcheck(
        &vars,
        &|| {
            let (p, c) = d.forward(&x).unwrap();
            ((p * &wp).unwrap().sum_all().unwrap() + (c * &wc).unwrap().sum_all().unwrap()).unwrap()
        },
        H,
        12,
    )
}
