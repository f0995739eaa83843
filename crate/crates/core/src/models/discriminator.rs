use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Conv2dSpec;
use crate::tensor::Rng;

use super::layers::{BatchNorm, Conv, Mode};
use super::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    /// Output channels of the hidden layers; a 1-channel head follows.
    pub channels: Vec<usize>,
    /// One stride per hidden layer plus one for the head.
    pub strides: Vec<usize>,
    pub kernel: usize,
    pub head_kernel: usize,
    pub leaky_slope: f32,
    /// Batch normalization on every hidden layer but the first.
    pub batch_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![48, 96, 128, 192],
            strides: vec![2; 5],
            kernel: 4,
            head_kernel: 3,
            leaky_slope: 0.2,
            batch_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "discriminator channels must be non-empty and positive: {:?}",
                self.channels
            )));
        }
        if self.strides.len() != self.channels.len() + 1 || self.strides.iter().any(|&s| s == 0 || s > 2) {
            return Err(Error::InvalidConfig(format!(
                "discriminator needs {} strides in 1..=2, got {:?}",
                self.channels.len() + 1,
                self.strides
            )));
        }
        if self.kernel == 0 || self.head_kernel == 0 || !(self.leaky_slope >= 0.0) {
            return Err(Error::InvalidConfig("discriminator kernel/slope out of range".into()));
        }
        Ok(())
    }
}

/// Scores grayscale images: probability that each is a real target photo.
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    layers: Vec<(Conv, Option<BatchNorm>)>,
    head: Conv,
}

impl Discriminator {
    pub fn new(cfg: &DiscriminatorConfig, rng: &mut Rng) -> Result<Discriminator> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let norm = cfg.batch_norm && i > 0;
            let mut spec = Conv2dSpec::new(cin, c, cfg.kernel, cfg.strides[i], cfg.kernel.saturating_sub(2) / 2);
            if norm {
                spec = spec.without_bias();
            }
            let name = format!("discriminator.conv{}", i + 1);
            layers.push((
                Conv::new(&name, spec, rng),
                norm.then(|| BatchNorm::new(&format!("discriminator.bn{}", i + 1), c)),
            ));
            cin = c;
        }
        let head_spec = Conv2dSpec::new(cin, 1, cfg.head_kernel, *cfg.strides.last().unwrap(), cfg.head_kernel / 2);
        Ok(Discriminator {
            cfg: cfg.clone(),
            layers,
            head: Conv::new("discriminator.head", head_spec, rng),
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }
}

impl Model for Discriminator {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for (conv, bn) in &self.layers {
            conv.params(&mut v);
            if let Some(bn) = bn {
                bn.params(&mut v);
            }
        }
        self.head.params(&mut v);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for (conv, bn) in &mut self.layers {
            conv.params_mut(&mut v);
            if let Some(bn) = bn {
                bn.params_mut(&mut v);
            }
        }
        self.head.params_mut(&mut v);
        v
    }

    /// `(n, 1, h, w)` grayscale in, `(n, 1, 1, 1)` probabilities out.
    fn forward<'t>(&mut self, tape: &'t Tape, x: &Var<'t>, mode: Mode) -> Result<Var<'t>> {
        if x.shape().c != 1 {
            return Err(Error::ChannelMismatch {
                op: "discriminator",
                expected: 1,
                actual: x.shape().c,
            });
        }
        let slope = self.cfg.leaky_slope;
        let mut h = x.clone();
        for (conv, bn) in &mut self.layers {
            h = conv.forward(tape, &h)?;
            if let Some(bn) = bn {
                h = bn.forward(tape, &h, mode)?;
            }
            h = h.leaky_relu(slope);
        }
        Ok(self.head.forward(tape, &h)?.mean_planes().sigmoid())
    }
}
