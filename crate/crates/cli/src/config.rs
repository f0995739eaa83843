//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Every key can also be set with `--set key=value`; later assignments win.
//! Unknown keys are rejected.
//!
//! ```text
//! seed = 0
//! threads = 1
//! deterministic = false
//! data.dir = data                # holds train/ and test/, each with phone/ and dslr/
//! data.train_pairs = 64          # `synth` only
//! data.test_pairs = 16           # `synth` only
//! data.patch_size = 64           # `synth` only
//! degrade.blur_sigma = 1.0
//! degrade.saturation = 0.7
//! degrade.noise_sigma = 0.02
//! out.dir = runs/default
//! gen.arch = strided 3-4 16-64 2 # or `baseline 3 64 4`, optional trailing `prelu`
//! gen.batch_norm = true
//! gen.skip_pre_activation = true
//! disc.channels = 48,96,128,192
//! disc.strides = 2,2,2,2,2       # one per hidden layer plus the head
//! disc.kernel = 4
//! disc.head_kernel = 3
//! disc.leaky_slope = 0.2
//! disc.batch_norm = true
//! loss.content = 1.0
//! loss.texture = 0.4
//! loss.color = 0.1
//! loss.tv = 400
//! loss.content_squared = false
//! loss.tv_norm = squared_fields  # or literal_sum
//! loss.color_sigma = as_printed  # or squared
//! features.kind = tiny_fixed     # or vgg19
//! features.weights =             # VGG-19 weight file, required for vgg19
//! features.layer = relu5_4
//! train.iterations = 500
//! train.batch_size = 8
//! train.checkpoint_every = 0     # 0: final checkpoint only
//! train.eval_every = 0           # 0: no evaluation snapshots
//! train.d_steps = 1
//! train.lr = 5e-4
//! train.beta1 = 0.9
//! train.beta2 = 0.999
//! train.eps = 1e-8
//! metrics.color_mode = luma      # or rgb_mean
//! bench.height = 720
//! bench.width = 1280
//! bench.repeats = 5
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use enhance_core::data::DegradeSpec;
use enhance_core::losses::TvNorm;
use enhance_core::metrics::ColorMode;
use enhance_core::models::{weights, FeatureExtractor, GeneratorConfig};
use enhance_core::ops::SigmaMode;
use enhance_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureChoice {
    TinyFixed,
    Vgg19,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub deterministic: bool,
    pub data_dir: PathBuf,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub patch_size: usize,
    pub degrade: DegradeSpec,
    pub out_dir: PathBuf,
    pub gen_arch: String,
    pub gen_batch_norm: bool,
    pub gen_skip_pre_activation: bool,
    pub train: TrainConfig,
    pub features: FeatureChoice,
    pub features_weights: Option<PathBuf>,
    pub features_layer: String,
    pub bench_height: usize,
    pub bench_width: usize,
    pub bench_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            threads: 1,
            deterministic: false,
            data_dir: PathBuf::from("data"),
            train_pairs: 64,
            test_pairs: 16,
            patch_size: 64,
            degrade: DegradeSpec::default(),
            out_dir: PathBuf::from("runs/default"),
            gen_arch: train.gen.label(),
            gen_batch_norm: train.gen.batch_norm,
            gen_skip_pre_activation: train.gen.skip_pre_activation,
            train,
            features: FeatureChoice::TinyFixed,
            features_weights: None,
            features_layer: "relu5_4".into(),
            bench_height: 720,
            bench_width: 1280,
            bench_repeats: 5,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow!("`{key}`: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got {v:?}"),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|t| num(key, t.trim())).collect()
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(name, _)| *name == v).map(|(_, t)| *t).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        anyhow!("`{key}`: expected one of {}, got {v:?}", names.join(", "))
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`, got {line:?}", i + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", i + 1))?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("override {kv:?} is not `key=value`"))?;
        self.set(k.trim(), v.trim()).with_context(|| format!("override {kv:?}"))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "threads" => self.threads = num(key, v)?,
            "deterministic" => self.deterministic = flag(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "data.train_pairs" => self.train_pairs = num(key, v)?,
            "data.test_pairs" => self.test_pairs = num(key, v)?,
            "data.patch_size" => self.patch_size = num(key, v)?,
            "degrade.blur_sigma" => self.degrade.blur_sigma = num(key, v)?,
            "degrade.saturation" => self.degrade.saturation_scale = num(key, v)?,
            "degrade.noise_sigma" => self.degrade.noise_sigma = num(key, v)?,
            "out.dir" => self.out_dir = PathBuf::from(v),
            "gen.arch" => {
                GeneratorConfig::parse_label(v)?;
                self.gen_arch = v.to_string();
            }
            "gen.batch_norm" => self.gen_batch_norm = flag(key, v)?,
            "gen.skip_pre_activation" => self.gen_skip_pre_activation = flag(key, v)?,
            "disc.channels" => t.disc.channels = list(key, v)?,
            "disc.strides" => t.disc.strides = list(key, v)?,
            "disc.kernel" => t.disc.kernel = num(key, v)?,
            "disc.head_kernel" => t.disc.head_kernel = num(key, v)?,
            "disc.leaky_slope" => t.disc.leaky_slope = num(key, v)?,
            "disc.batch_norm" => t.disc.batch_norm = flag(key, v)?,
            "loss.content" => t.weights.content = num(key, v)?,
            "loss.texture" => t.weights.texture = num(key, v)?,
            "loss.color" => t.weights.color = num(key, v)?,
            "loss.tv" => t.weights.tv = num(key, v)?,
            "loss.content_squared" => t.content.squared = flag(key, v)?,
            "loss.tv_norm" => {
                t.tv_norm = choice(key, v, &[("squared_fields", TvNorm::SquaredFields), ("literal_sum", TvNorm::LiteralSum)])?
            }
            "loss.color_sigma" => {
                t.color_sigma = choice(key, v, &[("as_printed", SigmaMode::AsPrinted), ("squared", SigmaMode::Squared)])?
            }
            "features.kind" => {
                self.features = choice(key, v, &[("tiny_fixed", FeatureChoice::TinyFixed), ("vgg19", FeatureChoice::Vgg19)])?
            }
            "features.weights" => self.features_weights = (!v.is_empty()).then(|| PathBuf::from(v)),
            "features.layer" => self.features_layer = v.to_string(),
            "train.iterations" => t.iterations = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = num(key, v)?,
            "train.eval_every" => t.eval_every = num(key, v)?,
            "train.d_steps" => t.d_steps = num(key, v)?,
            "train.lr" => t.adam.lr = num(key, v)?,
            "train.beta1" => t.adam.beta1 = num(key, v)?,
            "train.beta2" => t.adam.beta2 = num(key, v)?,
            "train.eps" => t.adam.eps = num(key, v)?,
            "metrics.color_mode" => {
                t.metric_mode = choice(key, v, &[("luma", ColorMode::Luma), ("rgb_mean", ColorMode::RgbMean)])?
            }
            "bench.height" => self.bench_height = num(key, v)?,
            "bench.width" => self.bench_width = num(key, v)?,
            "bench.repeats" => self.bench_repeats = num(key, v)?,
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::parse_label(&self.gen_arch)?;
        g.batch_norm = self.gen_batch_norm;
        g.skip_pre_activation = self.gen_skip_pre_activation;
        g.validate()?;
        Ok(g)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.gen = self.generator()?;
        t.seed = self.seed;
        t.validate()?;
        Ok(t)
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        match self.features {
            FeatureChoice::TinyFixed => Ok(FeatureExtractor::tiny_fixed()),
            FeatureChoice::Vgg19 => {
                let path = self
                    .features_weights
                    .as_ref()
                    .ok_or_else(|| anyhow!("features.kind = vgg19 needs features.weights"))?;
                let tensors = weights::load(path).with_context(|| format!("loading {}", path.display()))?;
                Ok(FeatureExtractor::vgg19(&tensors, &self.features_layer)?)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 7 # comment\n\n gen.arch = baseline 3 16 1\nloss.tv_norm = literal_sum\ndisc.channels = 8, 16\n")
            .unwrap();
        c.apply_override("train.iterations=3").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.tv_norm, TvNorm::LiteralSum);
        assert_eq!(c.train.disc.channels, [8, 16]);
        let t = c.train_config();
        // Three strides are needed for two hidden layers.
        assert!(t.is_err());
        c.apply_override("disc.strides=2,2,2").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!((t.iterations, t.seed, t.gen.label()), (3, 7, "baseline 3 16 1".to_string()));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::default().apply_text("seed = 1\ntrain.iteration = 5\n").unwrap_err();
        let msg = format!("{err:#}");
        assert!(msg.contains("train.iteration") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn bad_values() {
        let mut c = RunConfig::default();
        assert!(c.set("train.lr", "fast").is_err());
        assert!(c.set("metrics.color_mode", "hsv").is_err());
        assert!(c.set("gen.arch", "strided 3").is_err());
        assert!(c.apply_text("seed 3\n").is_err());
    }
}
