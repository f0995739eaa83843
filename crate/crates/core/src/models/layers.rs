//! Parameterized building blocks shared by the generators, the
//! discriminator and the feature extractor.

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::Result;
use crate::ops::norm::{BN_MOMENTUM};
use crate::ops::{batch_norm, conv2d, conv2d_transpose, Conv2dSpec, ConvTranspose2dSpec, NormMode};
use crate::tensor::{Rng, Shape, Tensor};

/// How a forward pass treats batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Batch statistics, running averages left alone.
    TrainFrozenStats,
    /// Running averages.
    Eval,
}

impl Mode {
    fn norm(self) -> NormMode {
        match self {
            Mode::Eval => NormMode::Eval,
            _ => NormMode::Train,
        }
    }
}

/// `normal(0, 0.02 * sqrt(2 / fan_in))`.
pub fn init_weight(shape: Shape, fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = 0.02 * (2.0 / fan_in as f32).sqrt();
    Tensor::random_normal(shape, 0.0, std, rng).expect("std is positive")
}

fn per_channel(c: usize, v: f32) -> Tensor {
    Tensor::full(Shape { n: 1, c, h: 1, w: 1 }, v)
}

pub struct Conv {
    pub spec: Conv2dSpec,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Conv {
    pub fn new(name: &str, spec: Conv2dSpec, rng: &mut Rng) -> Conv {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let weight = init_weight(spec.weight_shape(), fan_in, rng);
        Conv::with_weight(name, spec, weight)
    }

    pub fn with_weight(name: &str, spec: Conv2dSpec, weight: Tensor) -> Conv {
        Conv {
            spec,
            weight: Parameter::new(format!("{name}.weight"), weight, true),
            bias: spec
                .has_bias
                .then(|| Parameter::new(format!("{name}.bias"), per_channel(spec.out_channels, 0.0), true)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.as_ref().map(|b| tape.param(b));
        conv2d(x, &self.spec, &tape.param(&self.weight), b.as_ref())
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

pub struct ConvT {
    pub spec: ConvTranspose2dSpec,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl ConvT {
    pub fn new(name: &str, spec: ConvTranspose2dSpec, rng: &mut Rng) -> ConvT {
        // Each output sums over in_channels * (k / stride)^2 taps on average.
        let fan_in = (spec.in_channels * spec.kernel * spec.kernel / (spec.stride * spec.stride)).max(1);
        ConvT {
            spec,
            weight: Parameter::new(
                format!("{name}.weight"),
                init_weight(spec.weight_shape(), fan_in, rng),
                true,
            ),
            bias: spec
                .has_bias
                .then(|| Parameter::new(format!("{name}.bias"), per_channel(spec.out_channels, 0.0), true)),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        let b = self.bias.as_ref().map(|b| tape.param(b));
        conv2d_transpose(x, &self.spec, &tape.param(&self.weight), b.as_ref())
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.weight);
        out.extend(self.bias.as_ref());
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.push(&mut self.weight);
        out.extend(self.bias.as_mut());
    }
}

/// Batch normalization with learnable affine and running statistics. The
/// running statistics are stored as non-trainable parameters so they travel
/// with the weight file.
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running_mean: Parameter,
    pub running_var: Parameter,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Parameter::new(format!("{name}.gamma"), per_channel(channels, 1.0), true),
            beta: Parameter::new(format!("{name}.beta"), per_channel(channels, 0.0), true),
            running_mean: Parameter::new(format!("{name}.running_mean"), per_channel(channels, 0.0), false),
            running_var: Parameter::new(format!("{name}.running_var"), per_channel(channels, 1.0), false),
        }
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape, x: &Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let (y, stats) = batch_norm(
            x,
            &tape.param(&self.gamma),
            &tape.param(&self.beta),
            mode.norm(),
            self.running_mean.value(),
            self.running_var.value(),
        )?;
        if let (Mode::Train, Some(stats)) = (mode, stats) {
            let mut mean = self.running_mean.value().clone();
            let mut var = self.running_var.value().clone();
            stats.blend_into(&mut mean, &mut var, BN_MOMENTUM);
            self.running_mean.set_value(mean)?;
            self.running_var.set_value(var)?;
        }
        Ok(y)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.extend([&self.gamma, &self.beta, &self.running_mean, &self.running_var]);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        out.extend([
            &mut self.gamma,
            &mut self.beta,
            &mut self.running_mean,
            &mut self.running_var,
        ]);
    }
}

pub enum Activation {
    Relu,
    Leaky(f32),
    /// Learned per-channel slope, initialized to 0.25.
    Prelu(Parameter),
}

impl Activation {
    pub fn prelu(name: &str, channels: usize) -> Activation {
        Activation::Prelu(Parameter::new(format!("{name}.slope"), per_channel(channels, 0.25), true))
    }

    pub fn relu_or_prelu(use_prelu: bool, name: &str, channels: usize) -> Activation {
        if use_prelu {
            Activation::prelu(name, channels)
        } else {
            Activation::Relu
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => Ok(x.relu()),
            Activation::Leaky(s) => Ok(x.leaky_relu(*s)),
            Activation::Prelu(a) => x.prelu(&tape.param(a)),
        }
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        if let Activation::Prelu(a) = self {
            out.push(a);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        if let Activation::Prelu(a) = self {
            out.push(a);
        }
    }
}

/// conv-BN-act-conv-BN plus identity skip. Without normalization the convs
/// carry biases instead.
pub struct ResBlock {
    pub conv1: Conv,
    pub bn1: Option<BatchNorm>,
    pub act: Activation,
    pub conv2: Conv,
    pub bn2: Option<BatchNorm>,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize, kernel: usize, norm: bool, use_prelu: bool, rng: &mut Rng) -> ResBlock {
        let spec = if norm {
            Conv2dSpec::same(channels, channels, kernel).without_bias()
        } else {
            Conv2dSpec::same(channels, channels, kernel)
        };
        ResBlock {
            conv1: Conv::new(&format!("{name}.conv1"), spec, rng),
            bn1: norm.then(|| BatchNorm::new(&format!("{name}.bn1"), channels)),
            act: Activation::relu_or_prelu(use_prelu, &format!("{name}.act"), channels),
            conv2: Conv::new(&format!("{name}.conv2"), spec, rng),
            bn2: norm.then(|| BatchNorm::new(&format!("{name}.bn2"), channels)),
        }
    }

    pub fn forward<'t>(&mut self, tape: &'t Tape, x: &Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let mut h = self.conv1.forward(tape, x)?;
        if let Some(bn) = &mut self.bn1 {
            h = bn.forward(tape, &h, mode)?;
        }
        h = self.act.forward(tape, &h)?;
        h = self.conv2.forward(tape, &h)?;
        if let Some(bn) = &mut self.bn2 {
            h = bn.forward(tape, &h, mode)?;
        }
        x.add(&h)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        self.conv1.params(out);
        if let Some(bn) = &self.bn1 {
            bn.params(out);
        }
        self.act.params(out);
        self.conv2.params(out);
        if let Some(bn) = &self.bn2 {
            bn.params(out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter>) {
        self.conv1.params_mut(out);
        if let Some(bn) = &mut self.bn1 {
            bn.params_mut(out);
        }
        self.act.params_mut(out);
        self.conv2.params_mut(out);
        if let Some(bn) = &mut self.bn2 {
            bn.params_mut(out);
        }
    }
}
