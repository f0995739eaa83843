//! Adam and the alternating discriminator/generator training loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::autodiff::{zero_grads, ParamId, Parameter, Tape};
use crate::data::{Batch, Batcher, PatchPair};
use crate::error::{Error, Result};
use crate::losses::{self, ContentOptions, LossBreakdown, LossParts, LossWeights, TvNorm};
use crate::metrics::{ColorMode, MetricAccumulator, MetricReport};
use crate::models::{weights, Discriminator, DiscriminatorConfig, FeatureExtractor, Generator, GeneratorConfig, Mode, Model};
use crate::ops::blur::{COLOR_BLUR_AMPLITUDE, COLOR_BLUR_MU, COLOR_BLUR_RADIUS, COLOR_BLUR_SIGMA};
use crate::ops::{GaussianKernel, SigmaMode};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are created lazily per parameter.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    moments: HashMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Adam {
        Adam {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, p: &Parameter) -> Option<&(Tensor, Tensor)> {
        self.moments.get(&p.id())
    }

    /// Updates every trainable parameter from its `grad`. Nothing is touched
    /// if any gradient is non-finite.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let mut params: Vec<&mut Parameter> = params.into_iter().filter(|p| p.trainable()).collect();
        if let Some(p) = params.iter().find(|p| !p.grad().is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", p.name())));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for p in params.iter_mut() {
            let shape = p.value().shape();
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (Tensor::zeros(shape), Tensor::zeros(shape)));
            let grad = p.grad().clone();
            let value = p.value_mut();
            for (((w, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub gen: GeneratorConfig,
    pub disc: DiscriminatorConfig,
    pub seed: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// 0 disables evaluation snapshots.
    pub eval_every: usize,
    pub adam: AdamConfig,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub content: ContentOptions,
    pub tv_norm: TvNorm,
    /// Denominator of the color-loss blur.
    pub color_sigma: SigmaMode,
    pub metric_mode: ColorMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 500,
            batch_size: 8,
            weights: LossWeights::default(),
            gen: GeneratorConfig::strided(),
            disc: DiscriminatorConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            adam: AdamConfig::default(),
            d_steps: 1,
            content: ContentOptions::default(),
            tv_norm: TvNorm::default(),
            color_sigma: SigmaMode::default(),
            metric_mode: ColorMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "iterations and batch_size must be >= 1, got {} and {}",
                self.iterations, self.batch_size
            )));
        }
        self.gen.validate()?;
        self.disc.validate()
    }

    /// SHA-256 of the debug rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn uses_discriminator(&self) -> bool {
        self.weights.texture != 0.0 && self.d_steps > 0
    }
}

/// One line of the training log.
#[derive(Clone, Debug)]
pub struct LogRow {
    pub iteration: usize,
    pub losses: LossBreakdown,
    pub d_loss: Option<f32>,
    pub wall_ms: f64,
}

impl LogRow {
    pub fn header() -> String {
        format!("iteration,{},d_loss,wall_ms", LossBreakdown::CSV_HEADER)
    }

    pub fn csv(&self) -> String {
        let d = self.d_loss.map_or(String::new(), |d| format!("{d:e}"));
        format!("{},{},{},{:.3}", self.iteration, self.losses.csv_fields(), d, self.wall_ms)
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub features: FeatureExtractor,
    g_opt: Adam,
    d_opt: Adam,
    kernel: GaussianKernel,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, features: FeatureExtractor) -> Result<Trainer> {
        cfg.validate()?;
        let rng = Rng::new(cfg.seed);
        let generator = Generator::new(&cfg.gen, &mut rng.derive(1))?;
        let discriminator = Discriminator::new(&cfg.disc, &mut rng.derive(2))?;
        let kernel = GaussianKernel::new(
            COLOR_BLUR_AMPLITUDE,
            COLOR_BLUR_MU,
            COLOR_BLUR_SIGMA,
            COLOR_BLUR_RADIUS,
            cfg.color_sigma,
        )?;
        Ok(Trainer {
            g_opt: Adam::new(cfg.adam),
            d_opt: Adam::new(cfg.adam),
            kernel,
            cfg,
            generator,
            discriminator,
            features,
        })
    }

    /// One cross-entropy step on real targets against current fakes.
    pub fn discriminator_step(&mut self, batch: &Batch) -> Result<f32> {
        let fake = {
            let tape = Tape::no_grad();
            let x = tape.constant(batch.phone.clone());
            self.generator.forward(&tape, &x, Mode::TrainFrozenStats)?.to_tensor()
        };
        self.discriminator.set_frozen(false);
        let tape = Tape::new();
        let real = tape.constant(batch.dslr.clone());
        let fake = tape.constant(fake);
        let loss = losses::texture_loss_discriminator(&mut self.discriminator, &real, &fake, Mode::Train)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss (batch ids: {})", batch.ids.join(" "))));
        }
        let grads = tape.backward(&loss)?;
        let mut params = self.discriminator.params_mut();
        zero_grads(params.iter_mut().map(|p| &mut **p));
        grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
        self.d_opt.step(params)?;
        Ok(value)
    }

    /// One step on the weighted total with the discriminator frozen.
    pub fn generator_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        self.discriminator.set_frozen(true);
        let tape = Tape::new();
        let phone = tape.constant(batch.phone.clone());
        let target = tape.constant(batch.dslr.clone());
        let enhanced = self.generator.forward(&tape, &phone, Mode::Train)?;
        let texture = if self.cfg.uses_discriminator() {
            losses::texture_loss_generator(&mut self.discriminator, &enhanced, Mode::TrainFrozenStats)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let parts = LossParts {
            content: losses::content_loss(&self.features, &enhanced, &target, self.cfg.content)?,
            texture,
            color: losses::color_loss(&enhanced, &target, &self.kernel)?,
            tv: losses::tv_loss(&enhanced, self.cfg.tv_norm)?,
        };
        let (total, breakdown) = losses::total_loss(&parts, &self.cfg.weights)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss (batch ids: {})", batch.ids.join(" "))));
        }
        let grads = tape.backward(&total)?;
        let mut params = self.generator.params_mut();
        zero_grads(params.iter_mut().map(|p| &mut **p));
        grads.accumulate_into(params.iter_mut().map(|p| &mut **p));
        self.g_opt.step(params)?;
        Ok(breakdown)
    }

    /// `d_steps` discriminator updates (skipped when the texture weight is 0)
    /// followed by one generator update.
    pub fn step(&mut self, batch: &Batch) -> Result<(LossBreakdown, Option<f32>)> {
        let mut d_loss = None;
        if self.cfg.uses_discriminator() {
            for _ in 0..self.cfg.d_steps {
                d_loss = Some(self.discriminator_step(batch)?);
            }
        }
        Ok((self.generator_step(batch)?, d_loss))
    }
}

/// Enhances every pair's phone side and scores it against the DSLR side.
pub fn evaluate(generator: &mut Generator, pairs: &[PatchPair], mode: ColorMode) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(mode);
    for p in pairs {
        acc.add(&generator.enhance(&p.phone)?, &p.dslr)?;
    }
    acc.report()
}

/// Scores the unprocessed phone side: the bar a generator has to clear.
pub fn evaluate_identity(pairs: &[PatchPair], mode: ColorMode) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(mode);
    for p in pairs {
        acc.add(&p.phone, &p.dslr)?;
    }
    acc.report()
}

pub const MANIFEST_EXT: &str = "manifest";

/// Paths written for one checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub iteration: usize,
    pub generator: PathBuf,
    pub discriminator: PathBuf,
    pub manifest: PathBuf,
}

pub fn write_checkpoint(dir: &Path, iteration: usize, trainer: &Trainer) -> Result<Checkpoint> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("checkpoint_{iteration:06}");
    let ck = Checkpoint {
        iteration,
        generator: dir.join(format!("{stem}.fpie")),
        discriminator: dir.join(format!("{stem}.disc.fpie")),
        manifest: dir.join(format!("{stem}.{MANIFEST_EXT}")),
    };
    weights::save(&ck.generator, &trainer.generator.params())?;
    weights::save(&ck.discriminator, &trainer.discriminator.params())?;
    let file_name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let manifest = format!(
        "config_hash = {}\niteration = {}\nseed = {}\ngenerator = {}\nweights = {}\ndiscriminator = {}\n",
        trainer.cfg.hash(),
        iteration,
        trainer.cfg.seed,
        trainer.cfg.gen.label(),
        file_name(&ck.generator),
        file_name(&ck.discriminator),
    );
    fs::write(&ck.manifest, manifest).map_err(|e| Error::io(&ck.manifest, e))?;
    Ok(ck)
}

/// `key = value` pairs of a checkpoint manifest.
pub fn read_manifest(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}

/// Where training writes its artifacts, and what it evaluates on.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Receives `train_log.csv`, `eval_log.tsv` and `checkpoints/`.
    pub out_dir: Option<PathBuf>,
    pub eval_set: Option<&'a [PatchPair]>,
    pub progress: Option<&'a mut dyn FnMut(&LogRow)>,
    /// Log `wall_ms` as 0 so repeated runs produce identical logs.
    pub omit_timing: bool,
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: Vec<LogRow>,
    pub evals: Vec<(usize, MetricReport)>,
    pub checkpoints: Vec<Checkpoint>,
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Runs `cfg.iterations` steps on batches drawn from `data`.
pub fn train(cfg: TrainConfig, features: FeatureExtractor, data: &[PatchPair], mut opts: TrainOptions<'_>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg, features)?;
    let cfg = trainer.cfg.clone();
    let mut batches = Batcher::new(data, cfg.batch_size, Rng::new(cfg.seed).derive(3).next_u64())?;
    let mut log_file = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.csv");
            let mut f = create(&path)?;
            writeln!(f, "{}", LogRow::header()).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };
    let mut eval_file = match (&opts.out_dir, opts.eval_set, cfg.eval_every) {
        (Some(dir), Some(_), every) if every > 0 => {
            let path = dir.join("eval_log.tsv");
            let mut f = create(&path)?;
            writeln!(f, "iteration\t{}", MetricReport::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        _ => None,
    };
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();
    let mut checkpoints = Vec::new();
    for iteration in 1..=cfg.iterations {
        let batch = batches.next_batch()?;
        let start = Instant::now();
        let (losses, d_loss) = match trainer.step(&batch) {
            Ok(r) => r,
            Err(e) => {
                if let (Error::NonFinite(_), Some(dir)) = (&e, &opts.out_dir) {
                    let path = dir.join("failed_batch.txt");
                    let dump = format!("iteration {iteration}\n{}\n", batch.ids.join("\n"));
                    fs::write(&path, dump).map_err(|io| Error::io(&path, io))?;
                }
                return Err(e);
            }
        };
        let row = LogRow {
            iteration,
            losses,
            d_loss,
            wall_ms: if opts.omit_timing { 0.0 } else { start.elapsed().as_secs_f64() * 1e3 },
        };
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", row.csv()).map_err(|e| Error::io(&*path, e))?;
        }
        if let Some(cb) = opts.progress.as_mut() {
            cb(&row);
        }
        log.push(row);

        let last = iteration == cfg.iterations;
        if let (Some(set), true) = (opts.eval_set, cfg.eval_every > 0 && (iteration % cfg.eval_every == 0 || last)) {
            let report = evaluate(&mut trainer.generator, set, cfg.metric_mode)?;
            if let Some((f, path)) = &mut eval_file {
                writeln!(f, "{iteration}\t{report}").map_err(|e| Error::io(&*path, e))?;
            }
            evals.push((iteration, report));
        }
        if let Some(dir) = &opts.out_dir {
            if last || (cfg.checkpoint_every > 0 && iteration % cfg.checkpoint_every == 0) {
                checkpoints.push(write_checkpoint(&dir.join("checkpoints"), iteration, &trainer)?);
            }
        }
    }
    Ok(TrainOutcome {
        trainer,
        log,
        evals,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_param(v: f32) -> Parameter {
        Parameter::new("p", Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), v), true)
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(1.0);
        p.grad_mut().fill(1.0);
        let mut adam = Adam::new(AdamConfig { lr: 1e-3, ..Default::default() });
        adam.step([&mut p]).unwrap();
        // m_hat = 1, v_hat = 1: the step is lr / (1 + eps).
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.value().item() - expected).abs() < 1e-7);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut p = scalar_param(0.5);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.step([&mut p]).unwrap();
        }
        assert_eq!(p.value().item(), 0.5);
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn nan_grad_names_param() {
        let mut p = scalar_param(0.5);
        p.grad_mut().fill(f32::NAN);
        let err = Adam::new(AdamConfig::default()).step([&mut p]).unwrap_err();
        assert!(err.to_string().contains("gradient of p"), "{err}");
        assert_eq!(p.value().item(), 0.5);
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = scalar_param(0.5);
        p.set_trainable(false);
        p.grad_mut().fill(1.0);
        Adam::new(AdamConfig::default()).step([&mut p]).unwrap();
        assert_eq!(p.value().item(), 0.5);
    }

    #[test]
    fn config_hash_tracks_fields() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
