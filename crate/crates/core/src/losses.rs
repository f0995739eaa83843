//! Color, content, texture and total-variation losses and their weighted sum.
//!
//! Every loss is averaged over the batch. Within one image the color loss is
//! an unnormalized sum of squares, while content and TV are divided by the
//! element count `C*H*W` of the tensor they measure.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Discriminator, FeatureExtractor, Mode, Model};
use crate::ops::{conv2d, gaussian_blur, grayscale, Conv2dSpec, GaussianKernel};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before the log.
pub const PROB_EPS: f32 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub content: f32,
    pub texture: f32,
    pub color: f32,
    pub tv: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 1.0,
            texture: 0.4,
            color: 0.1,
            tv: 400.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ContentOptions {
    /// Square the feature-difference norm.
    pub squared: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TvNorm {
    /// `sum dx^2 + sum dy^2`.
    #[default]
    SquaredFields,
    /// `sqrt(sum (dx + dy)^2)` over the region where both differences exist.
    LiteralSum,
}

fn check_pair(op: &'static str, x: &Var<'_>, y: &Var<'_>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape(),
            right: y.shape(),
        });
    }
    if x.shape().c != 3 {
        return Err(Error::ChannelMismatch {
            op,
            expected: 3,
            actual: x.shape().c,
        });
    }
    Ok(())
}

/// `||blur(x) - blur(y)||^2` per image, batch mean.
pub fn color_loss<'t>(x: &Var<'t>, y: &Var<'t>, kernel: &GaussianKernel) -> Result<Var<'t>> {
    check_pair("color_loss", x, y)?;
    let n = x.shape().n as f32;
    let d = gaussian_blur(x, kernel).sub(&gaussian_blur(y, kernel))?;
    Ok(d.square().sum().scale(1.0 / n))
}

/// Per-image `||d|| / (C*H*W)` (or `||d||^2 / (C*H*W)`), batch mean.
fn normalized_norm<'t>(d: &Var<'t>, squared: bool) -> Var<'t> {
    let s = d.shape();
    let per_item = d.square().sum_items();
    let norm = if squared { per_item } else { per_item.sqrt() };
    norm.scale(1.0 / (s.c * s.h * s.w) as f32).mean()
}

/// Feature-space distance; the target side carries no gradient.
pub fn content_loss<'t>(
    fe: &FeatureExtractor,
    enhanced: &Var<'t>,
    target: &Var<'t>,
    opts: ContentOptions,
) -> Result<Var<'t>> {
    check_pair("content_loss", enhanced, target)?;
    let tape = enhanced.tape();
    let fe_enh = fe.extract(tape, enhanced)?;
    let fe_tgt = tape.constant(fe.extract(tape, target)?.to_tensor());
    Ok(normalized_norm(&fe_enh.sub(&fe_tgt)?, opts.squared))
}

/// `-mean log p` with `p` clamped away from 0 and 1.
pub fn generator_adversarial<'t>(p: &Var<'t>) -> Var<'t> {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln().mean().scale(-1.0)
}

/// Binary cross-entropy with the first `n_real` items labelled real:
/// `-(mean log p_real + mean log(1 - p_fake))`.
pub fn discriminator_adversarial<'t>(p: &Var<'t>, n_real: usize) -> Result<Var<'t>> {
    let s = p.shape();
    if s.c * s.h * s.w != 1 || n_real == 0 || n_real >= s.n {
        return Err(Error::arg(
            "discriminator_adversarial",
            format!("need (n,1,1,1) probabilities with 0 < n_real < n, got {s} and {n_real}"),
        ));
    }
    let n_fake = s.n - n_real;
    let tape = p.tape();
    let mask = |real: bool| {
        let w = if real { 1.0 / n_real as f32 } else { 1.0 / n_fake as f32 };
        let data = (0..s.n).map(|i| if (i < n_real) == real { w } else { 0.0 }).collect();
        tape.constant(Tensor::from_vec(s, data).unwrap())
    };
    let q = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let log_real = q.ln().mul(&mask(true))?;
    let log_fake = q.scale(-1.0).add_scalar(1.0).ln().mul(&mask(false))?;
    Ok(log_real.add(&log_fake)?.sum().scale(-1.0))
}

/// `-mean log D(gray(enhanced))`.
pub fn texture_loss_generator<'t>(d: &mut Discriminator, enhanced: &Var<'t>, mode: Mode) -> Result<Var<'t>> {
    let p = d.forward(enhanced.tape(), &grayscale(enhanced)?, mode)?;
    Ok(generator_adversarial(&p))
}

/// Scores real and fake images in one batch (shared normalization
/// statistics) and returns the cross-entropy.
pub fn texture_loss_discriminator<'t>(
    d: &mut Discriminator,
    real: &Var<'t>,
    fake: &Var<'t>,
    mode: Mode,
) -> Result<Var<'t>> {
    check_pair("texture_loss_discriminator", real, fake)?;
    let tape = real.tape();
    let both = Tensor::concat_batch(&[&grayscale(real)?.to_tensor(), &grayscale(fake)?.to_tensor()])?;
    let p = d.forward(tape, &tape.constant(both), mode)?;
    discriminator_adversarial(&p, real.shape().n)
}

/// `dx + dy` over the `(h-1) x (w-1)` region as a fixed depthwise 2x2 conv.
fn summed_differences<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let c = x.shape().c;
    let spec = Conv2dSpec::new(c, c, 2, 1, 0).without_bias();
    let taps = [-2.0, 1.0, 1.0, 0.0];
    let w = Tensor::from_fn(spec.weight_shape(), |o, i, ky, kx| if o == i { taps[ky * 2 + kx] } else { 0.0 });
    conv2d(x, &spec, &x.tape().constant(w), None)
}

/// Total-variation penalty, `1/(C*H*W)` normalized, batch mean.
pub fn tv_loss<'t>(x: &Var<'t>, norm: TvNorm) -> Result<Var<'t>> {
    let s = x.shape();
    let tape = x.tape();
    let chw = (s.c * s.h * s.w) as f32;
    let zero = || tape.constant(Tensor::scalar(0.0));
    match norm {
        TvNorm::SquaredFields => {
            let fields: Vec<Var<'t>> = [x.diff_w(), x.diff_h()]
                .into_iter()
                .flatten()
                .map(|d| d.square().sum_items())
                .collect();
            let Some((first, rest)) = fields.split_first() else {
                return Ok(zero());
            };
            let mut acc = first.clone();
            for f in rest {
                acc = acc.add(f)?;
            }
            Ok(acc.scale(1.0 / chw).mean())
        }
        TvNorm::LiteralSum => {
            if s.h < 2 || s.w < 2 {
                return Ok(zero());
            }
            let d = summed_differences(x)?;
            Ok(d.square().sum_items().sqrt().scale(1.0 / chw).mean())
        }
    }
}

/// The four raw losses of one step.
pub struct LossParts<'t> {
    pub content: Var<'t>,
    pub texture: Var<'t>,
    pub color: Var<'t>,
    pub tv: Var<'t>,
}

impl<'t> LossParts<'t> {
    /// Constant parts, for arithmetic checks.
    pub fn from_values(tape: &'t Tape, content: f32, texture: f32, color: f32, tv: f32) -> Self {
        let c = |v| tape.constant(Tensor::scalar(v));
        LossParts {
            content: c(content),
            texture: c(texture),
            color: c(color),
            tv: c(tv),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// content, texture, color, tv before weighting.
    pub raw: [f32; 4],
    pub weighted: [f32; 4],
    pub total: f32,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "content,texture,color,tv,w_content,w_texture,w_color,w_tv,total";

    pub fn csv_fields(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in self.raw.iter().chain(&self.weighted) {
            write!(f, "{v:e},")?;
        }
        write!(f, "{:e}", self.total)
    }
}

/// `w.content*content + w.texture*texture + w.color*color + w.tv*tv`,
/// accumulated in that order.
pub fn total_loss<'t>(parts: &LossParts<'t>, w: &LossWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let pairs = [
        (&parts.content, w.content),
        (&parts.texture, w.texture),
        (&parts.color, w.color),
        (&parts.tv, w.tv),
    ];
    for (p, _) in &pairs {
        if !p.shape().is_scalar() {
            return Err(Error::NonScalarRoot(p.shape()));
        }
    }
    let weighted: Vec<Var<'t>> = pairs.iter().map(|(p, k)| p.scale(*k)).collect();
    let mut total = weighted[0].clone();
    for term in &weighted[1..] {
        total = total.add(term)?;
    }
    let breakdown = LossBreakdown {
        raw: pairs.map(|(p, _)| p.item()),
        weighted: [0, 1, 2, 3].map(|i| weighted[i].item()),
        total: total.item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Shape};

    fn image(seed: u64, n: usize, h: usize, w: usize) -> Tensor {
        Tensor::random_uniform(Shape::new(n, 3, h, w).unwrap(), 0.0, 1.0, &mut Rng::new(seed))
    }

    #[test]
    fn color_loss_shift_closed_form() {
        let k = GaussianKernel::color_loss_default();
        let tape = Tape::no_grad();
        let y = image(1, 2, 12, 9);
        let c = 0.05f32;
        let x = y.map(|v| v + c);
        let got = color_loss(&tape.constant(x), &tape.constant(y), &k).unwrap().item() as f64;
        // Blur is linear: the difference is the constant c * sum(G) everywhere.
        let per_image = (k.sum() * c as f64).powi(2) * (3 * 12 * 9) as f64;
        assert!((got - per_image).abs() < 1e-4 * per_image, "{got} vs {per_image}");
    }

    #[test]
    fn color_loss_symmetric_and_zero_at_identity() {
        let k = GaussianKernel::color_loss_default();
        let tape = Tape::no_grad();
        let (a, b) = (tape.constant(image(2, 1, 8, 8)), tape.constant(image(3, 1, 8, 8)));
        assert_eq!(color_loss(&a, &b, &k).unwrap().item(), color_loss(&b, &a, &k).unwrap().item());
        assert_eq!(color_loss(&a, &a, &k).unwrap().item(), 0.0);
        let gray = tape.constant(Tensor::zeros(Shape::new(1, 1, 8, 8).unwrap()));
        assert!(color_loss(&gray, &gray, &k).is_err());
    }

    #[test]
    fn content_norm_scales_inversely_with_size() {
        // Same difference norm spread over twice the elements halves the loss.
        let tape = Tape::no_grad();
        let small = tape.constant(Tensor::full(Shape::new(1, 2, 2, 2).unwrap(), 0.5));
        let big = tape.constant(Tensor::full(Shape::new(1, 2, 2, 4).unwrap(), 0.5 / 2f32.sqrt()));
        let a = normalized_norm(&small, false).item();
        let b = normalized_norm(&big, false).item();
        assert!((b - a / 2.0).abs() < 1e-7, "{a} {b}");
        // Squared variant: sum of squares / CHW.
        assert!((normalized_norm(&small, true).item() - 0.25).abs() < 1e-7);
    }

    #[test]
    fn content_loss_zero_for_identical() {
        let fe = FeatureExtractor::tiny_fixed();
        let tape = Tape::no_grad();
        let x = tape.constant(image(4, 2, 16, 16));
        assert_eq!(content_loss(&fe, &x, &x, ContentOptions::default()).unwrap().item(), 0.0);
    }

    #[test]
    fn adversarial_arithmetic() {
        let tape = Tape::no_grad();
        let probs = |v: &[f32]| tape.constant(Tensor::from_vec(Shape::new(v.len(), 1, 1, 1).unwrap(), v.to_vec()).unwrap());
        assert!((generator_adversarial(&probs(&[0.5, 0.5])).item() - 0.693_147_2).abs() < 1e-6);
        assert!(generator_adversarial(&probs(&[1.0, 1.0])).item().abs() < 1e-6);
        let perfect = discriminator_adversarial(&probs(&[1.0, 1.0, 0.0, 0.0]), 2).unwrap();
        assert!(perfect.item().abs() < 1e-5);
        let chance = discriminator_adversarial(&probs(&[0.5, 0.5, 0.5]), 1).unwrap();
        assert!((chance.item() - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
        assert!(discriminator_adversarial(&probs(&[0.5, 0.5]), 2).is_err());
    }

    #[test]
    fn tv_step_edge_closed_form() {
        // 1x1x6x8 image: 0 left of column 3, h from column 3 on.
        let h = 0.7f32;
        let s = Shape::new(1, 1, 6, 8).unwrap();
        let x = Tensor::from_fn(s, |_, _, _, j| if j >= 3 { h } else { 0.0 });
        let tape = Tape::no_grad();
        let got = tv_loss(&tape.constant(x.clone()), TvNorm::SquaredFields).unwrap().item();
        // One nonzero horizontal difference per row, none vertical.
        let expected = 6.0 * h * h / 48.0;
        assert!((got - expected).abs() < 1e-7);
        // Literal form: dx + dy is h at column 2 for rows 0..5.
        let lit = tv_loss(&tape.constant(x), TvNorm::LiteralSum).unwrap().item();
        assert!((lit - (5.0 * h * h).sqrt() / 48.0).abs() < 1e-7);
    }

    #[test]
    fn tv_zero_on_constants() {
        let tape = Tape::no_grad();
        for norm in [TvNorm::SquaredFields, TvNorm::LiteralSum] {
            let x = tape.constant(Tensor::full(Shape::new(2, 3, 5, 7).unwrap(), 0.3));
            assert_eq!(tv_loss(&x, norm).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::no_grad();
        let parts = LossParts::from_values(&tape, 1.0, 1.0, 1.0, 0.001);
        let (t, b) = total_loss(&parts, &LossWeights::default()).unwrap();
        assert_eq!(t.item(), 1.9);
        assert_eq!(b.total, 1.9);
        assert_eq!(b.raw, [1.0, 1.0, 1.0, 0.001]);
        let zero = LossWeights {
            content: 0.0,
            texture: 0.0,
            color: 0.0,
            tv: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero).unwrap().1.total, 0.0);
        let none = LossParts::from_values(&tape, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(total_loss(&none, &LossWeights::default()).unwrap().1.total, 0.0);
        assert_eq!(b.csv_fields().split(',').count(), LossBreakdown::CSV_HEADER.split(',').count());
    }
}
