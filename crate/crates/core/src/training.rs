//! Alternating discriminator/generator optimization for one domain pair.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Container;
use crate::dataset::{sample_unpaired_batch, Batch, CueVocabulary, DatasetIndex, ImageCache, SegMapTarget, WeatherClass};
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::error::{invalid, Error, Result};
use crate::features::{ConvFeatureNet, FeatureNetConfig};
use crate::generator::{Composition, Generator, GeneratorConfig};
use crate::image_tensor::stack_images;
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, class_cross_entropy, classification_loss, cycle_l1, cycle_total,
    perceptual_loss, scalar, seg_loss, total_generator_loss, GeneratorTerms, LossWeights,
};
use crate::nn::{NormKind, ParamStore};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub domain_x: WeatherClass,
    pub domain_y: WeatherClass,
    pub total_iterations: u64,
    pub decay_start: u64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// (height, width)
    pub image_size: [usize; 2],
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub ablation: Composition,
    /// Cue names or indices treated as weather-relevant. Defaults to the
    /// union of both classes' usual cues.
    pub relevant_cues: Option<Vec<String>>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual: FeatureNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            domain_x: WeatherClass::Sunny,
            domain_y: WeatherClass::Cloudy,
            total_iterations: 5000,
            decay_start: 1000,
            lr0: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            seed: 0,
            loss_weights: LossWeights::default(),
            image_size: [300, 300],
            checkpoint_every: 1000,
            ablation: Composition::Full,
            relevant_cues: None,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual: FeatureNetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small networks on 64×64 images, sized for single-core runs.
    pub fn toy() -> Self {
        Self {
            total_iterations: 2000,
            image_size: [64, 64],
            checkpoint_every: 0,
            generator: GeneratorConfig {
                base_channels: 8,
                n_residual_blocks: 2,
                n_down: 3,
                edge_kernel: 3,
                norm: NormKind::Instance,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                base_channels: 16,
                n_layers: 3,
                norm: NormKind::Instance,
            },
            perceptual: FeatureNetConfig {
                plan: "8,M,16".into(),
                ..FeatureNetConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn image_hw(&self) -> (usize, usize) {
        (self.image_size[0], self.image_size[1])
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain_x == self.domain_y {
            return Err(invalid("domain_x and domain_y must differ"));
        }
        if self.decay_start >= self.total_iterations {
            return Err(invalid(format!(
                "decay_start ({}) must be below total_iterations ({})",
                self.decay_start, self.total_iterations
            )));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(invalid(format!("lr0 must be positive, got {}", self.lr0)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size < 1 {
            return Err(invalid("batch_size must be at least 1"));
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.generator.check_image_size(self.image_hw())?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn resolve_relevant_cues(&self, vocab: &CueVocabulary) -> Result<Vec<usize>> {
        match &self.relevant_cues {
            None => Ok(vocab.relevant_for(self.domain_x, self.domain_y)),
            Some(tokens) => {
                let mut out = tokens.iter().map(|t| vocab.resolve(t)).collect::<Result<Vec<_>>>()?;
                out.sort_unstable();
                out.dedup();
                Ok(out)
            }
        }
    }
}

/// Learning rate before the step at `iteration`: constant through
/// `decay_start`, then linear to zero at `total_iterations`.
pub fn lr_schedule(iteration: u64, config: &TrainConfig) -> Result<f64> {
    if iteration > config.total_iterations {
        return Err(invalid(format!(
            "iteration {iteration} beyond total_iterations {}",
            config.total_iterations
        )));
    }
    if config.decay_start >= config.total_iterations {
        return Err(invalid("decay_start must be below total_iterations"));
    }
    if iteration <= config.decay_start {
        return Ok(config.lr0);
    }
    if iteration == config.total_iterations {
        return Ok(0.0);
    }
    let frac = (iteration - config.decay_start) as f64 / (config.total_iterations - config.decay_start) as f64;
    Ok(config.lr0 * (1.0 - frac))
}

/// Independent stream `tag` of the run seed.
fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng.next_u64()
}

/// Seed for the batch drawn at `iteration`; the data order needs no stored
/// RNG state beyond the run seed.
pub fn batch_seed(seed: u64, iteration: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(16 + iteration);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfStep {
    Discriminator,
    Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_ms: f64,
    pub composition: Composition,
}

/// G: X→Y, F: Y→X, and one discriminator per domain.
#[derive(Clone)]
pub struct Models {
    pub g: Generator,
    pub f: Generator,
    pub d_x: Discriminator,
    pub d_y: Discriminator,
}

impl Models {
    pub fn new(config: &TrainConfig, n_s: usize, relevant: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let size = config.image_hw();
        let gen = |tag| {
            Generator::new(
                &config.generator,
                size,
                n_s,
                relevant,
                config.ablation,
                sub_seed(config.seed, tag),
                dtype,
                device,
            )
        };
        let disc = |tag| Discriminator::new(&config.discriminator, size, sub_seed(config.seed, tag), dtype, device);
        Ok(Self {
            g: gen(1)?,
            f: gen(2)?,
            d_x: disc(3)?,
            d_y: disc(4)?,
        })
    }

    pub fn stores(&self) -> [(&'static str, &ParamStore); 4] {
        [
            ("g", self.g.params()),
            ("f", self.f.params()),
            ("d_x", self.d_x.params()),
            ("d_y", self.d_y.params()),
        ]
    }

    /// Every parameter keyed `<model>.<path>`.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (prefix, store) in self.stores() {
            for (k, t) in store.snapshot()? {
                out.insert(format!("{prefix}.{k}"), t);
            }
        }
        Ok(out)
    }

    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (prefix, store) in self.stores() {
            store.load(&strip_prefix(values, prefix))?;
        }
        Ok(())
    }

    pub fn with_composition(&self, composition: Composition) -> Self {
        Self {
            g: self.g.with_composition(composition),
            f: self.f.with_composition(composition),
            ..self.clone()
        }
    }
}

fn strip_prefix(values: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let p = format!("{prefix}.");
    values
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(&p).map(|rest| (rest.to_string(), t.clone())))
        .collect()
}

fn prefixed_vars(pairs: &[(&str, &ParamStore)]) -> Vec<(String, candle_core::Var)> {
    pairs
        .iter()
        .flat_map(|(prefix, store)| store.iter().map(move |(k, v)| (format!("{prefix}.{k}"), v.clone())))
        .collect()
}

fn seg_target_tensor(targets: &[SegMapTarget], dtype: DType, device: &Device) -> Result<Tensor> {
    let t = &targets[0];
    let data: Vec<f32> = targets.iter().flat_map(|t| t.one_hot()).collect();
    Ok(Tensor::from_vec(data, (targets.len(), t.n_s, t.height, t.width), device)?.to_dtype(dtype)?)
}

fn check_finite(name: &str, t: &Tensor) -> Result<f64> {
    let v = scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("loss term {name}")))
    }
}

/// Models, optimizers and the iteration counter of one run.
pub struct Trainer {
    config: TrainConfig,
    vocabulary: CueVocabulary,
    relevant: Vec<usize>,
    models: Models,
    perceptual: ConvFeatureNet,
    opt_g: Adam,
    opt_d: Adam,
    iteration: u64,
    device: Device,
    dtype: DType,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocabulary: CueVocabulary, device: &Device) -> Result<Self> {
        config.validate()?;
        let dtype = DType::F32;
        let relevant = config.resolve_relevant_cues(&vocabulary)?;
        let models = Models::new(&config, vocabulary.len(), &relevant, dtype, device)?;
        let perceptual = ConvFeatureNet::new(&config.perceptual, dtype, device)?;
        let opt_g = Adam::new(
            prefixed_vars(&[("g", models.g.params()), ("f", models.f.params())]),
            config.beta1,
            config.beta2,
        );
        let opt_d = Adam::new(
            prefixed_vars(&[("d_x", models.d_x.params()), ("d_y", models.d_y.params())]),
            config.beta1,
            config.beta2,
        );
        Ok(Self {
            config,
            vocabulary,
            relevant,
            models,
            perceptual,
            opt_g,
            opt_d,
            iteration: 0,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn vocabulary(&self) -> &CueVocabulary {
        &self.vocabulary
    }

    pub fn relevant_cues(&self) -> &[usize] {
        &self.relevant
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total_iterations
    }

    /// Draws the batch for the current iteration.
    pub fn next_batch(&self, index: &DatasetIndex, cache: &ImageCache) -> Result<Batch> {
        sample_unpaired_batch(
            index,
            cache,
            self.config.domain_x,
            self.config.domain_y,
            self.config.batch_size,
            batch_seed(self.config.seed, self.iteration),
        )
    }

    /// One discriminator update followed by one generator update. On a
    /// non-finite loss the models and optimizers are left as they were
    /// before the call.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepReport> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// [`Trainer::train_step`] that shows the models to `observe` after each
    /// half-step.
    pub fn train_step_observed(
        &mut self,
        batch: &Batch,
        mut observe: impl FnMut(HalfStep, &Models),
    ) -> Result<StepReport> {
        if batch.x_class != self.config.domain_x || batch.y_class != self.config.domain_y {
            return Err(invalid(format!(
                "batch domains {}→{} do not match the configured {}→{}",
                batch.x_class, batch.y_class, self.config.domain_x, self.config.domain_y
            )));
        }
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        if self.is_finished() {
            return Err(invalid("training already reached total_iterations"));
        }
        let start = Instant::now();
        let lr = lr_schedule(self.iteration, &self.config)?;
        let (dt, dev) = (self.dtype, &self.device);
        let x = stack_images(&batch.x_images.iter().collect::<Vec<_>>(), dev, dt)?;
        let y = stack_images(&batch.y_images.iter().collect::<Vec<_>>(), dev, dt)?;
        let m = &self.models;
        let w = &self.config.loss_weights;
        let mut losses = BTreeMap::new();

        let gx = m.g.generate(&x, 1.0)?;
        let fy = m.f.generate(&y, 1.0)?;

        // Discriminator half-step on detached fakes; the classifier heads
        // learn from real labeled images.
        let (rx, cx_x) = m.d_x.forward(&x)?;
        let (ry, cy_y) = m.d_y.forward(&y)?;
        let cx_y = m.d_x.classify(&y)?;
        let cy_x = m.d_y.classify(&x)?;
        let adv_dx = adversarial_loss_d(&rx, &m.d_x.discriminate(&fy.g.detach())?)?;
        let adv_dy = adversarial_loss_d(&ry, &m.d_y.discriminate(&gx.g.detach())?)?;
        let class_d = (((class_cross_entropy(&cx_x, batch.x_class)? + class_cross_entropy(&cx_y, batch.y_class)?)?
            + class_cross_entropy(&cy_x, batch.x_class)?)?
            + class_cross_entropy(&cy_y, batch.y_class)?)?;
        for (name, t) in [("d_adv_x", &adv_dx), ("d_adv_y", &adv_dy), ("d_class", &class_d)] {
            losses.insert(name.to_string(), check_finite(name, t)?);
        }
        let d_total = (((&adv_dx + &adv_dy)? * w.w_adv)? + (&class_d * w.w_class)?)?;
        losses.insert("d_total".into(), check_finite("d_total", &d_total)?);

        let d_backup = (
            m.d_x.params().snapshot()?,
            m.d_y.params().snapshot()?,
            self.opt_d.snapshot()?,
        );
        self.opt_d.step(&d_total.backward()?, lr)?;
        observe(HalfStep::Discriminator, &self.models);

        match self.generator_half_step(batch, &x, &y, &gx, &fy, lr, &mut losses) {
            Ok(()) => observe(HalfStep::Generator, &self.models),
            Err(e) => {
                self.models.d_x.params().load(&d_backup.0)?;
                self.models.d_y.params().load(&d_backup.1)?;
                self.opt_d.load_state(d_backup.2 .0, &d_backup.2 .1)?;
                return Err(e);
            }
        }

        let report = StepReport {
            iteration: self.iteration,
            losses,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            composition: self.config.ablation,
        };
        self.iteration += 1;
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn generator_half_step(
        &mut self,
        batch: &Batch,
        x: &Tensor,
        y: &Tensor,
        gx: &crate::generator::GeneratorOutput,
        fy: &crate::generator::GeneratorOutput,
        lr: f64,
        losses: &mut BTreeMap<String, f64>,
    ) -> Result<()> {
        let m = &self.models;
        let w = &self.config.loss_weights;
        let (dx_fake, dx_logits) = m.d_x.forward(&fy.g)?;
        let (dy_fake, dy_logits) = m.d_y.forward(&gx.g)?;
        let x_rec = m.f.generate(&gx.g, 1.0)?.g;
        let y_rec = m.g.generate(&fy.g, 1.0)?.g;
        let l1 = cycle_l1(x, &x_rec, y, &y_rec)?;
        let perc = perceptual_loss(&self.perceptual, x, &x_rec, y, &y_rec)?;
        let seg_terms = |out: &crate::generator::GeneratorOutput, targets: &[SegMapTarget]| -> Result<Option<Tensor>> {
            match &out.seg {
                Some(s) => Ok(Some(seg_loss(s, &seg_target_tensor(targets, self.dtype, &self.device)?)?)),
                None => Ok(None),
            }
        };
        let terms = GeneratorTerms {
            adv_g_xy: adversarial_loss_g(&dy_fake)?,
            adv_g_yx: adversarial_loss_g(&dx_fake)?,
            cycle: cycle_total(&l1, &perc, w.lambda_cycle_blend)?,
            classify: classification_loss(&dy_logits, batch.y_class, &dx_logits, batch.x_class)?,
            seg_x: seg_terms(gx, &batch.x_seg_targets)?,
            seg_y: seg_terms(fy, &batch.y_seg_targets)?,
        };
        let total = total_generator_loss(&terms, w)?;
        losses.insert("g_adv_xy".into(), scalar(&terms.adv_g_xy)?);
        losses.insert("g_adv_yx".into(), scalar(&terms.adv_g_yx)?);
        losses.insert("cycle_l1".into(), check_finite("cycle_l1", &l1)?);
        losses.insert("perceptual".into(), check_finite("perceptual", &perc)?);
        losses.insert("cycle".into(), scalar(&terms.cycle)?);
        losses.insert("classify".into(), scalar(&terms.classify)?);
        if let Some(s) = &terms.seg_x {
            losses.insert("seg_x".into(), scalar(s)?);
        }
        if let Some(s) = &terms.seg_y {
            losses.insert("seg_y".into(), scalar(s)?);
        }
        losses.insert("g_total".into(), check_finite("g_total", &total)?);
        self.opt_g.step(&total.backward()?, lr)
    }

    /// Full state as a checkpoint container.
    pub fn to_checkpoint(&self) -> Result<Container> {
        let mut c = Container::default();
        c.tensors = self.models.snapshot()?;
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            let (step, state) = opt.snapshot()?;
            c.metadata.insert(format!("{prefix}_step"), step.to_string());
            for (k, t) in state {
                c.tensors.insert(format!("{prefix}.{k}"), t);
            }
        }
        c.metadata.insert("iteration".into(), self.iteration.to_string());
        c.metadata.insert("config".into(), self.config.to_toml()?);
        c.metadata.insert(
            "vocabulary".into(),
            serde_json::to_string(self.vocabulary.names()).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        c.metadata.insert(
            "relevant_cues".into(),
            serde_json::to_string(&self.relevant).map_err(|e| Error::Checkpoint(e.to_string()))?,
        );
        // Batches are drawn from (seed, iteration), so this is the whole RNG state.
        c.metadata
            .insert("rng".into(), format!("seed={};iteration={}", self.config.seed, self.iteration));
        Ok(c)
    }

    pub fn from_checkpoint(c: &Container, device: &Device) -> Result<Self> {
        let (config, vocabulary, _) = checkpoint_header(c)?;
        let mut t = Self::new(config, vocabulary, device)?;
        t.models.load(&c.tensors)?;
        for (prefix, opt) in [("opt_g", &mut t.opt_g), ("opt_d", &mut t.opt_d)] {
            let step = meta_u64(c, &format!("{prefix}_step"))?;
            opt.load_state(step, &strip_prefix(&c.tensors, prefix))?;
        }
        t.iteration = meta_u64(c, "iteration")?;
        if t.iteration > t.config.total_iterations {
            return Err(Error::Checkpoint("iteration beyond total_iterations".into()));
        }
        Ok(t)
    }

    /// Restores a checkpoint under `config`, which may change only the run
    /// length, decay start and checkpoint cadence.
    pub fn resume(c: &Container, config: TrainConfig, device: &Device) -> Result<Self> {
        let (saved, _, _) = checkpoint_header(c)?;
        let comparable = |cfg: &TrainConfig| TrainConfig {
            total_iterations: 0,
            decay_start: 0,
            checkpoint_every: 0,
            ..cfg.clone()
        };
        if comparable(&saved) != comparable(&config) {
            return Err(Error::Config(
                "checkpoint was trained with a different configuration".into(),
            ));
        }
        let mut updated = c.clone();
        updated.metadata.insert("config".into(), config.to_toml()?);
        Self::from_checkpoint(&updated, device)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        Self::from_checkpoint(&Container::load(path, device)?, device)
    }
}

fn meta<'a>(c: &'a Container, key: &str) -> Result<&'a str> {
    c.metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))
}

fn meta_u64(c: &Container, key: &str) -> Result<u64> {
    meta(c, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad metadata {key}")))
}

fn checkpoint_header(c: &Container) -> Result<(TrainConfig, CueVocabulary, Vec<usize>)> {
    let config = TrainConfig::from_toml(meta(c, "config")?)?;
    let names: Vec<String> =
        serde_json::from_str(meta(c, "vocabulary")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let relevant: Vec<usize> =
        serde_json::from_str(meta(c, "relevant_cues")?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((config, CueVocabulary::new(&names)?, relevant))
}

/// Trained generators and discriminators restored from a checkpoint, for
/// inference.
pub fn load_models(path: &Path, device: &Device) -> Result<(TrainConfig, CueVocabulary, Models)> {
    let c = Container::load(path, device)?;
    let (config, vocab, relevant) = checkpoint_header(&c)?;
    let models = Models::new(&config, vocab.len(), &relevant, DType::F32, device)?;
    models.load(&c.tensors)?;
    Ok((config, vocab, models))
}

/// Where a run writes checkpoints and its step log.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:08}.wgan"))
    }

    pub fn final_path(&self) -> PathBuf {
        self.dir.join("final.wgan")
    }

    pub fn abort_path(&self) -> PathBuf {
        self.dir.join("abort.wgan")
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

/// Runs from the trainer's current iteration to `total_iterations`,
/// appending one JSON line per step to the log and calling `on_step`.
/// A failing step saves the pre-step state to the abort checkpoint before
/// returning the error.
pub fn train(
    trainer: &mut Trainer,
    index: &DatasetIndex,
    out: &RunOutput,
    mut on_step: impl FnMut(&StepReport),
) -> Result<Vec<StepReport>> {
    if trainer.vocabulary() != &index.vocabulary {
        return Err(invalid("dataset cue vocabulary differs from the trainer's"));
    }
    for class in [trainer.config.domain_x, trainer.config.domain_y] {
        if index.class_records(class).is_empty() {
            return Err(invalid(format!("dataset has no {class} images")));
        }
    }
    std::fs::create_dir_all(&out.dir)?;
    let cache = ImageCache::new(trainer.config.image_hw());
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.log_path())?;
    let mut reports = Vec::new();
    while !trainer.is_finished() {
        let step = trainer.next_batch(index, &cache).and_then(|b| trainer.train_step(&b));
        let report = match step {
            Ok(r) => r,
            Err(e) => {
                log::error!("step {} failed: {e}", trainer.iteration());
                trainer.save(&out.abort_path())?;
                return Err(e);
            }
        };
        let line = serde_json::to_string(&report).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{line}")?;
        on_step(&report);
        reports.push(report);
        let done = trainer.iteration();
        let every = trainer.config.checkpoint_every;
        if every > 0 && done % every == 0 && !trainer.is_finished() {
            trainer.save(&out.checkpoint_path(done))?;
        }
    }
    log.flush()?;
    trainer.save(&out.final_path())?;
    Ok(reports)
}
