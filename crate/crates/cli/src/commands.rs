use std::io::Cursor;
use std::path::{Path, PathBuf};

use anyhow::Context;
use candle_core::{DType, Device};
use image::{DynamicImage, GrayImage, ImageFormat, Luma};
use weather_gan::checkpoint::{write_atomic, Container};
use weather_gan::dataset::{load_dataset, load_image, render_manifest, scan_class_tree, CueVocabulary};
use weather_gan::features::{ConvFeatureNet, FeatureNetConfig};
use weather_gan::generator::{compose, Composition, Generator};
use weather_gan::image_tensor::{encode_weight, ImageTensor};
use weather_gan::metrics::{evaluate_images, load_image_dir, EvalConfig};
use weather_gan::training::{self, load_models, RunOutput, Trainer};

use crate::run_file::RunFile;
use crate::{usage, Failure};

fn write_png(path: &Path, img: DynamicImage) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    img.write_to(&mut Cursor::new(&mut buf), ImageFormat::Png)?;
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

pub fn prepare(root: &Path, manifest_out: &Path) -> Result<(), Failure> {
    let entries = scan_class_tree(root)?;
    if entries.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!(
            "no images found under {}/<class>/",
            root.display()
        )));
    }
    let vocab = CueVocabulary::default();
    write_atomic(manifest_out, render_manifest(&vocab, &entries).as_bytes())?;
    let mut counts = std::collections::BTreeMap::new();
    for e in &entries {
        *counts.entry(e.class.code()).or_insert(0usize) += 1;
    }
    for (code, n) in counts {
        let class = weather_gan::dataset::WeatherClass::from_code(code).expect("valid code");
        println!("{class}\t{n}");
    }
    println!("wrote {} entries to {}", entries.len(), manifest_out.display());
    Ok(())
}

/// Trains per the run file. `override_mode` replaces the configured
/// composition and moves the output into a per-mode subdirectory.
pub fn train(config: &Path, resume: Option<&Path>, override_mode: Option<Composition>) -> Result<(), Failure> {
    let mut rf = RunFile::load(config)?;
    if let Some(mode) = override_mode {
        rf.train.ablation = mode;
        rf.output.dir = rf.output.dir.join(mode.name());
    }
    let device = Device::Cpu;
    let index = load_dataset(&rf.data.root, &rf.data.manifest)?;
    let mut trainer = match resume {
        Some(path) => {
            let c = Container::load(path, &device)?;
            Trainer::resume(&c, rf.train.clone(), &device)?
        }
        None => Trainer::new(rf.train.clone(), index.vocabulary.clone(), &device)?,
    };
    log::info!(
        "training {}→{} with composition {} from iteration {} to {}",
        rf.train.domain_x,
        rf.train.domain_y,
        rf.train.ablation.name(),
        trainer.iteration(),
        rf.train.total_iterations
    );
    let out = RunOutput {
        dir: rf.output.dir.clone(),
    };
    let every = rf.output.log_every;
    training::train(&mut trainer, &index, &out, |r| {
        if (r.iteration + 1) % every == 0 {
            let summary: Vec<String> = r.losses.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            log::info!(
                "iter {} lr={:.3e} composition={} {}",
                r.iteration + 1,
                r.lr,
                r.composition.name(),
                summary.join(" ")
            );
        }
    })?;
    println!("{}", out.final_path().display());
    Ok(())
}

pub fn ablate(config: &Path, mode: &str, translate_to: Option<(&Path, &Path)>) -> Result<(), Failure> {
    let mode = Composition::parse(mode).ok_or_else(|| {
        usage(format!(
            "unknown mode {mode:?}; expected full, attention_only, segmentation_only or init_only"
        ))
    })?;
    train(config, None, Some(mode))?;
    if let Some((input, out)) = translate_to {
        let rf = RunFile::load(config)?;
        let ckpt = RunOutput {
            dir: rf.output.dir.join(mode.name()),
        }
        .final_path();
        translate(&ckpt, input, &parse_alphas("0,0.25,0.5,0.75,1")?, out, false, false)?;
    }
    Ok(())
}

pub fn parse_alphas(list: &str) -> Result<Vec<f64>, Failure> {
    let alphas = list
        .split(',')
        .map(|s| {
            let v: f64 = s
                .trim()
                .parse()
                .map_err(|_| usage(format!("bad alpha value {s:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(usage(format!("alpha {v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>, _>>()?;
    if alphas.is_empty() {
        return Err(usage("empty alpha list"));
    }
    Ok(alphas)
}

fn image_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        })
        .collect();
    paths.sort();
    anyhow::ensure!(!paths.is_empty(), "no images in {}", input.display());
    Ok(paths)
}

/// Channel `c` of a (1, C, H, W) tensor in [0, 1] as a grayscale image.
fn gray(t: &candle_core::Tensor, c: usize) -> anyhow::Result<DynamicImage> {
    let plane = t.get(0)?.get(c)?.to_dtype(DType::F32)?;
    let (h, w) = plane.dims2()?;
    let data = plane.flatten_all()?.to_vec1::<f32>()?;
    Ok(DynamicImage::ImageLuma8(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([encode_weight(data[y as usize * w + x as usize])])
    })))
}

pub fn translate(
    checkpoint: &Path,
    input: &Path,
    alphas: &[f64],
    out: &Path,
    dump: bool,
    reverse: bool,
) -> Result<(), Failure> {
    let device = Device::Cpu;
    let (config, vocab, models) = load_models(checkpoint, &device)?;
    let gen: &Generator = if reverse { &models.f } else { &models.g };
    let paths = image_inputs(input)?;
    std::fs::create_dir_all(out)?;
    for path in paths {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let img = load_image(&path, config.image_hw())?;
        let x = img.to_tensor(&device, DType::F32)?;
        let full = gen.generate(&x, 1.0)?;
        for &alpha in alphas {
            let g = compose(&x, &full.g_init, &full.t, alpha)?;
            let rgb = ImageTensor::from_tensor(&g, 0)?.to_rgb8();
            write_png(&out.join(format!("{stem}_a{alpha:.2}.png")), DynamicImage::ImageRgb8(rgb))?;
        }
        if dump {
            write_png(&out.join(format!("{stem}_input.png")), DynamicImage::ImageRgb8(img.to_rgb8()))?;
            let init = ImageTensor::from_tensor(&full.g_init, 0)?.to_rgb8();
            write_png(&out.join(format!("{stem}_init.png")), DynamicImage::ImageRgb8(init))?;
            let att = match &full.att {
                Some(a) => a.clone(),
                None => gen.attention_map(&x)?,
            };
            write_png(&out.join(format!("{stem}_attention.png")), gray(&att, 0)?)?;
            write_png(&out.join(format!("{stem}_t.png")), gray(&full.t, 0)?)?;
            let seg = match &full.seg {
                Some(s) => s.clone(),
                None => gen.segment_cues(&x)?,
            };
            for (c, name) in vocab.names().iter().enumerate() {
                write_png(&out.join(format!("{stem}_seg_{name}.png")), gray(&seg, c)?)?;
            }
        }
        log::info!("translated {}", path.display());
    }
    Ok(())
}

pub fn evaluate(
    real_dir: &Path,
    fake_dir: &Path,
    weights: Option<PathBuf>,
    image_size: usize,
    kid_subsets: usize,
    seed: u64,
    report_out: &Path,
) -> Result<(), Failure> {
    let config = EvalConfig {
        image_size: (image_size, image_size),
        kid_subsets,
        seed,
        ..EvalConfig::default()
    };
    let (real, skipped_real) = load_image_dir(real_dir, config.image_size)?;
    let (fake, skipped_fake) = load_image_dir(fake_dir, config.image_size)?;
    for (imgs, dir) in [(&real, real_dir), (&fake, fake_dir)] {
        if imgs.len() < 2 {
            return Err(usage(format!(
                "{} has {} readable images, need at least 2",
                dir.display(),
                imgs.len()
            )));
        }
    }
    let net_config = match weights {
        Some(p) => FeatureNetConfig::vgg19(p),
        None => FeatureNetConfig::default(),
    };
    let net = ConvFeatureNet::new(&net_config, DType::F32, &Device::Cpu)?;
    let report = evaluate_images(&real, &fake, &net, &config, (skipped_real, skipped_fake))?;
    let text = report.to_string();
    print!("{text}");
    write_atomic(report_out, text.as_bytes())?;
    Ok(())
}
