use std::collections::HashMap;
use std::fmt;

use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv2dSpec, ConvTranspose2dSpec};
use crate::tensor::{Rng, Tensor};

use super::layers::{Activation, Conv, ConvT, Mode, ResBlock};
use super::pad::pad_to_multiple;
use super::Model;

/// Kernel of the first and last convolution of the baseline network.
pub const BASELINE_OUTER_KERNEL: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Strided,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Strided => "strided",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "strided" => Ok(Variant::Strided),
            _ => Err(Error::InvalidConfig(format!("unknown generator variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GeneratorConfig {
    pub variant: Variant,
    pub kernel: usize,
    /// Kernel of the stride-2 and transposed layers (strided variant only).
    pub strided_kernel: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub blocks: usize,
    pub use_prelu: bool,
    /// Batch normalization inside residual blocks.
    pub batch_norm: bool,
    /// Add skip connections before the activation (`act(up + skip)`) rather
    /// than after it (`act(up) + skip`).
    pub skip_pre_activation: bool,
}

impl GeneratorConfig {
    /// Residual network with 4 blocks of 64 channels, 3x3 kernels.
    pub fn baseline() -> Self {
        GeneratorConfig {
            variant: Variant::Baseline,
            kernel: 3,
            strided_kernel: 4,
            base_channels: 64,
            max_channels: 64,
            blocks: 4,
            use_prelu: false,
            batch_norm: true,
            skip_pre_activation: true,
        }
    }

    /// 3x3 kernels, 4x4 in the resampling layers, 16 channels growing to 64.
    pub fn strided() -> Self {
        GeneratorConfig {
            variant: Variant::Strided,
            kernel: 3,
            strided_kernel: 4,
            base_channels: 16,
            max_channels: 64,
            blocks: 2,
            use_prelu: false,
            batch_norm: true,
            skip_pre_activation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.kernel == 0 {
            return bad("kernel must be >= 1".into());
        }
        if self.base_channels == 0 {
            return bad("base_channels must be >= 1".into());
        }
        if self.blocks == 0 {
            return bad("blocks must be >= 1".into());
        }
        match self.variant {
            Variant::Baseline => {
                if self.max_channels != self.base_channels {
                    return bad(format!(
                        "baseline keeps one width: max_channels {} != base_channels {}",
                        self.max_channels, self.base_channels
                    ));
                }
            }
            Variant::Strided => {
                if self.max_channels != 4 * self.base_channels {
                    return bad(format!(
                        "strided variant doubles channels twice: max_channels must be {} (4 x {}), got {}",
                        4 * self.base_channels,
                        self.base_channels,
                        self.max_channels
                    ));
                }
                if self.strided_kernel < 2 {
                    return bad(format!("strided_kernel must be >= 2, got {}", self.strided_kernel));
                }
            }
        }
        Ok(())
    }

    /// `(padding, extra_padding)` that makes the stride-2 layers exactly
    /// halve even sizes and the transposed layers exactly double them.
    pub fn strided_padding(&self) -> (usize, usize) {
        let total = self.strided_kernel - 2;
        (total / 2, total % 2)
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.variant {
            Variant::Baseline => 1,
            Variant::Strided => 4,
        }
    }

    /// `baseline 3 64 4`, `strided 3-4 16-64 2` or `strided 4 32-128 2 prelu`.
    /// A single strided kernel size means the resampling layers share it.
    pub fn label(&self) -> String {
        self.to_string()
    }

    /// Parses the [`label`](Self::label) form (defaults for the flags).
    pub fn parse_label(s: &str) -> Result<GeneratorConfig> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let (variant, kernel, channels, blocks, prelu) = match parts[..] {
            [v, k, c, b] => (v, k, c, b, false),
            [v, k, c, b, "prelu"] => (v, k, c, b, true),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "expected `<variant> <kernel> <channels> <blocks> [prelu]`, got {s:?}"
                )))
            }
        };
        let num = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("not a count: {t:?} in {s:?}")))
        };
        let pair = |t: &str| -> Result<(usize, Option<usize>)> {
            match t.split_once('-') {
                Some((a, b)) => Ok((num(a)?, Some(num(b)?))),
                None => Ok((num(t)?, None)),
            }
        };
        let variant = Variant::parse(variant)?;
        let (kernel, sk) = pair(kernel)?;
        let (base, max) = pair(channels)?;
        let mut cfg = match variant {
            Variant::Baseline => GeneratorConfig::baseline(),
            Variant::Strided => GeneratorConfig::strided(),
        };
        cfg.kernel = kernel;
        cfg.base_channels = base;
        cfg.blocks = num(blocks)?;
        cfg.use_prelu = prelu;
        match variant {
            Variant::Baseline => {
                cfg.max_channels = max.unwrap_or(base);
                if sk.is_some() {
                    return Err(Error::InvalidConfig(format!(
                        "baseline has no strided kernel: {s:?}"
                    )));
                }
            }
            Variant::Strided => {
                cfg.max_channels = max.unwrap_or(4 * base);
                cfg.strided_kernel = sk.unwrap_or(kernel);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Recovers the architecture from generator tensor names and shapes.
    pub fn infer(tensors: &HashMap<String, Tensor>) -> Result<GeneratorConfig> {
        let get = |name: &str| {
            tensors
                .get(&format!("generator.{name}"))
                .ok_or_else(|| Error::WeightFormat(format!("missing tensor generator.{name}")))
        };
        let has = |name: &str| tensors.contains_key(&format!("generator.{name}"));
        let blocks = (0..)
            .take_while(|i| has(&format!("block{i}.conv1.weight")))
            .count();
        let head = get("head.weight")?.shape();
        let block = get("block0.conv1.weight")?.shape();
        let mut cfg = if has("down1.weight") {
            let down = get("down1.weight")?.shape();
            GeneratorConfig {
                variant: Variant::Strided,
                kernel: head.h,
                strided_kernel: down.h,
                base_channels: head.n,
                max_channels: block.n,
                ..GeneratorConfig::strided()
            }
        } else {
            GeneratorConfig {
                variant: Variant::Baseline,
                kernel: block.h,
                base_channels: head.n,
                max_channels: head.n,
                ..GeneratorConfig::baseline()
            }
        };
        cfg.blocks = blocks;
        cfg.use_prelu = has("head_act.slope");
        cfg.batch_norm = has("block0.bn1.gamma");
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for GeneratorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.variant {
            Variant::Baseline => write!(f, "baseline {} {} {}", self.kernel, self.base_channels, self.blocks)?,
            Variant::Strided if self.strided_kernel == self.kernel => write!(
                f,
                "strided {} {}-{} {}",
                self.kernel, self.base_channels, self.max_channels, self.blocks
            )?,
            Variant::Strided => write!(
                f,
                "strided {}-{} {}-{} {}",
                self.kernel, self.strided_kernel, self.base_channels, self.max_channels, self.blocks
            )?,
        }
        if self.use_prelu {
            write!(f, " prelu")?;
        }
        Ok(())
    }
}

struct Baseline {
    head: Conv,
    head_act: Activation,
    blocks: Vec<ResBlock>,
    tail1: Conv,
    tail1_act: Activation,
    tail2: Conv,
    tail2_act: Activation,
    out: Conv,
}

struct Strided {
    head: Conv,
    head_act: Activation,
    down1: Conv,
    down1_act: Activation,
    down2: Conv,
    down2_act: Activation,
    blocks: Vec<ResBlock>,
    up1: ConvT,
    up1_act: Activation,
    up2: ConvT,
    up2_act: Activation,
    out: Conv,
}

enum Body {
    Baseline(Baseline),
    Strided(Strided),
}

/// Image-to-image network predicting a residual that is added to the input
/// and clamped to `[0, 1]`.
pub struct Generator {
    cfg: GeneratorConfig,
    body: Body,
}

fn act(use_prelu: bool, name: &str, channels: usize) -> Activation {
    Activation::relu_or_prelu(use_prelu, &format!("generator.{name}"), channels)
}

fn merge_skip<'t>(tape: &'t Tape, up: Var<'t>, skip: &Var<'t>, a: &Activation, pre: bool) -> Result<Var<'t>> {
    if pre {
        a.forward(tape, &up.add(skip)?)
    } else {
        a.forward(tape, &up)?.add(skip)
    }
}

impl Generator {
    pub fn new(cfg: &GeneratorConfig, rng: &mut Rng) -> Result<Generator> {
        cfg.validate()?;
        let (k, p) = (cfg.kernel, cfg.use_prelu);
        let c = cfg.base_channels;
        let block = |i: usize, ch: usize, rng: &mut Rng| {
            ResBlock::new(&format!("generator.block{i}"), ch, k, cfg.batch_norm, p, rng)
        };
        let body = match cfg.variant {
            Variant::Baseline => {
                let ok = BASELINE_OUTER_KERNEL;
                Body::Baseline(Baseline {
                    head: Conv::new("generator.head", Conv2dSpec::same(3, c, ok), rng),
                    head_act: act(p, "head_act", c),
                    blocks: (0..cfg.blocks).map(|i| block(i, c, rng)).collect(),
                    tail1: Conv::new("generator.tail1", Conv2dSpec::same(c, c, k), rng),
                    tail1_act: act(p, "tail1_act", c),
                    tail2: Conv::new("generator.tail2", Conv2dSpec::same(c, c, k), rng),
                    tail2_act: act(p, "tail2_act", c),
                    out: Conv::new("generator.out", Conv2dSpec::same(c, 3, ok), rng),
                })
            }
            Variant::Strided => {
                let (sk, (sp, extra)) = (cfg.strided_kernel, cfg.strided_padding());
                let down = |cin, cout| Conv2dSpec::new(cin, cout, sk, 2, sp).with_extra_padding(extra);
                let up = |cin, cout| ConvTranspose2dSpec::new(cin, cout, sk, 2, sp).with_extra_padding(extra);
                Body::Strided(Strided {
                    head: Conv::new("generator.head", Conv2dSpec::same(3, c, k), rng),
                    head_act: act(p, "head_act", c),
                    down1: Conv::new("generator.down1", down(c, 2 * c), rng),
                    down1_act: act(p, "down1_act", 2 * c),
                    down2: Conv::new("generator.down2", down(2 * c, 4 * c), rng),
                    down2_act: act(p, "down2_act", 4 * c),
                    blocks: (0..cfg.blocks).map(|i| block(i, 4 * c, rng)).collect(),
                    up1: ConvT::new("generator.up1", up(4 * c, 2 * c), rng),
                    up1_act: act(p, "up1_act", 2 * c),
                    up2: ConvT::new("generator.up2", up(2 * c, c), rng),
                    up2_act: act(p, "up2_act", c),
                    out: Conv::new("generator.out", Conv2dSpec::same(c, 3, k), rng),
                })
            }
        };
        Ok(Generator { cfg: cfg.clone(), body })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Eval-mode inference on an arbitrary-size image; pads to the required
    /// multiple and crops back.
    pub fn enhance(&mut self, image: &Tensor) -> Result<Tensor> {
        let (padded, crop) = pad_to_multiple(image, self.cfg.size_multiple());
        let tape = Tape::no_grad();
        let y = self.forward(&tape, &tape.constant(padded), Mode::Eval)?;
        crop.apply(&y.to_tensor())
    }
}

impl Model for Generator {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        match &self.body {
            Body::Baseline(b) => {
                b.head.params(&mut v);
                b.head_act.params(&mut v);
                for blk in &b.blocks {
                    blk.params(&mut v);
                }
                b.tail1.params(&mut v);
                b.tail1_act.params(&mut v);
                b.tail2.params(&mut v);
                b.tail2_act.params(&mut v);
                b.out.params(&mut v);
            }
            Body::Strided(s) => {
                s.head.params(&mut v);
                s.head_act.params(&mut v);
                s.down1.params(&mut v);
                s.down1_act.params(&mut v);
                s.down2.params(&mut v);
                s.down2_act.params(&mut v);
                for blk in &s.blocks {
                    blk.params(&mut v);
                }
                s.up1.params(&mut v);
                s.up1_act.params(&mut v);
                s.up2.params(&mut v);
                s.up2_act.params(&mut v);
                s.out.params(&mut v);
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        match &mut self.body {
            Body::Baseline(b) => {
                b.head.params_mut(&mut v);
                b.head_act.params_mut(&mut v);
                for blk in &mut b.blocks {
                    blk.params_mut(&mut v);
                }
                b.tail1.params_mut(&mut v);
                b.tail1_act.params_mut(&mut v);
                b.tail2.params_mut(&mut v);
                b.tail2_act.params_mut(&mut v);
                b.out.params_mut(&mut v);
            }
            Body::Strided(s) => {
                s.head.params_mut(&mut v);
                s.head_act.params_mut(&mut v);
                s.down1.params_mut(&mut v);
                s.down1_act.params_mut(&mut v);
                s.down2.params_mut(&mut v);
                s.down2_act.params_mut(&mut v);
                for blk in &mut s.blocks {
                    blk.params_mut(&mut v);
                }
                s.up1.params_mut(&mut v);
                s.up1_act.params_mut(&mut v);
                s.up2.params_mut(&mut v);
                s.up2_act.params_mut(&mut v);
                s.out.params_mut(&mut v);
            }
        }
        v
    }

    fn forward<'t>(&mut self, tape: &'t Tape, x: &Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::ChannelMismatch {
                op: "generator",
                expected: 3,
                actual: s.c,
            });
        }
        let m = self.cfg.size_multiple();
        if s.h % m != 0 || s.w % m != 0 {
            return Err(Error::arg(
                "generator",
                format!("input {}x{} must be a multiple of {m} (pad first)", s.h, s.w),
            ));
        }
        let residual = match &mut self.body {
            Body::Baseline(b) => {
                let mut h = b.head_act.forward(tape, &b.head.forward(tape, x)?)?;
                for blk in &mut b.blocks {
                    h = blk.forward(tape, &h, mode)?;
                }
                h = b.tail1_act.forward(tape, &b.tail1.forward(tape, &h)?)?;
                h = b.tail2_act.forward(tape, &b.tail2.forward(tape, &h)?)?;
                b.out.forward(tape, &h)?
            }
            Body::Strided(st) => {
                let pre = self.cfg.skip_pre_activation;
                let h0 = st.head_act.forward(tape, &st.head.forward(tape, x)?)?;
                let s1 = st.down1_act.forward(tape, &st.down1.forward(tape, &h0)?)?;
                let mut r = st.down2_act.forward(tape, &st.down2.forward(tape, &s1)?)?;
                for blk in &mut st.blocks {
                    r = blk.forward(tape, &r, mode)?;
                }
                let u1 = merge_skip(tape, st.up1.forward(tape, &r)?, &s1, &st.up1_act, pre)?;
                drop((r, s1));
                let u2 = merge_skip(tape, st.up2.forward(tape, &u1)?, &h0, &st.up2_act, pre)?;
                drop((u1, h0));
                st.out.forward(tape, &u2)?
            }
        };
        Ok(x.add(&residual)?.clamp(0.0, 1.0))
    }
}
