//! The synthetic two-domain experiment and its measurements.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use weather_gan::dataset::{load_dataset, DatasetIndex, ImageCache};
use weather_gan::features::{ConvFeatureNet, FeatureNetConfig};
use weather_gan::image_tensor::ImageTensor;
use weather_gan::metrics::{extract_features, fid};
use weather_gan::toy;
use weather_gan::training::{StepReport, TrainConfig, Trainer};

pub const PER_DOMAIN: usize = 200;
pub const SIZE: u32 = 64;

/// Writes (once) and loads the toy corpus under `dir`.
pub fn corpus(dir: &Path) -> DatasetIndex {
    let manifest = dir.join("manifest.tsv");
    if !manifest.exists() {
        toy::write_corpus(dir, PER_DOMAIN, SIZE, 7).unwrap();
    }
    load_dataset(dir, &manifest).unwrap()
}

pub fn run(index: &DatasetIndex, config: TrainConfig) -> (Trainer, Vec<StepReport>) {
    let mut trainer = Trainer::new(config, index.vocabulary.clone(), &Device::Cpu).unwrap();
    let cache = ImageCache::new(trainer.config().image_hw());
    let mut reports = Vec::new();
    while !trainer.is_finished() {
        let batch = trainer.next_batch(index, &cache).unwrap();
        reports.push(trainer.train_step(&batch).unwrap());
    }
    (trainer, reports)
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    /// Mean T inside the cue region minus mean T outside it.
    pub t_gap: f64,
    /// Mean |G(x) − x| outside the cue region, in model pixel units.
    pub outside_change: f64,
    pub fid_generated: f64,
    pub fid_baseline: f64,
    /// Share of generated images the target-domain classifier assigns to the target class.
    pub target_accuracy: f64,
}

/// Translates every source-domain image at α = 1 and measures the outcome.
/// The cue region is the upper half of each image.
pub fn measure(trainer: &Trainer, index: &DatasetIndex) -> ToyOutcome {
    let cfg = trainer.config();
    let (h, w) = cfg.image_hw();
    let cache = ImageCache::new((h, w));
    let dev = Device::Cpu;
    let inside = Tensor::from_vec(
        (0..h * w).map(|p| if p / w < h / 2 { 1f32 } else { 0.0 }).collect::<Vec<_>>(),
        (1, 1, h, w),
        &dev,
    )
    .unwrap();
    let outside = (1.0 - &inside).unwrap();
    let masked_mean = |t: &Tensor, m: &Tensor| -> f64 {
        let c = t.dim(1).unwrap() as f64;
        let num = t.broadcast_mul(m).unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap() as f64;
        let den = m.sum_all().unwrap().to_scalar::<f32>().unwrap() as f64 * c;
        num / den
    };
    let models = trainer.models();
    let (mut gap, mut change, mut hits) = (0.0, 0.0, 0usize);
    let mut generated = Vec::new();
    let sources = index.class_records(cfg.domain_x);
    for &r in sources {
        let x = cache.get(index, r).unwrap().0.to_tensor(&dev, DType::F32).unwrap();
        let out = models.g.generate(&x, 1.0).unwrap();
        gap += masked_mean(&out.t, &inside) - masked_mean(&out.t, &outside);
        change += masked_mean(&(&out.g - &x).unwrap().abs().unwrap(), &outside);
        let logits = models.d_y.classify(&out.g).unwrap();
        let pred = logits.argmax(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<u32>().unwrap()[0];
        if pred as usize == cfg.domain_y.code() {
            hits += 1;
        }
        generated.push(ImageTensor::from_tensor(&out.g, 0).unwrap());
    }
    let n = sources.len() as f64;
    let load = |class| -> Vec<ImageTensor> {
        index
            .class_records(class)
            .iter()
            .map(|&r| cache.get(index, r).unwrap().0.clone())
            .collect()
    };
    let (xs, ys) = (load(cfg.domain_x), load(cfg.domain_y));
    let net = ConvFeatureNet::new(&FeatureNetConfig::default(), DType::F32, &dev).unwrap();
    let feats = |imgs: &[ImageTensor]| extract_features(&imgs.iter().collect::<Vec<_>>(), &net).unwrap();
    let (fx, fy, fg) = (feats(&xs), feats(&ys), feats(&generated));
    ToyOutcome {
        t_gap: gap / n,
        outside_change: change / n,
        fid_generated: fid(&fg, &fy).unwrap(),
        fid_baseline: fid(&fx, &fy).unwrap(),
        target_accuracy: hits as f64 / n,
    }
}
