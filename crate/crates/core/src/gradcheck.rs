//! Central finite-difference checks for every differentiable op and loss.
//!
//! Each case maps a few small random inputs to an output `y`; the checked
//! scalar is `sum_i r_i * y_i` for a fixed random `r`, accumulated in f64.
//! The relative error of a case is `max|a - n| / max(max|n|, max|a|)` over
//! all input elements, with `a` the analytic and `n` the numeric gradient.

use std::cell::RefCell;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::losses::{self, ContentOptions, TvNorm};
use crate::models::{Discriminator, DiscriminatorConfig, FeatureExtractor, Mode};
use crate::ops::{self, Conv2dSpec, ConvTranspose2dSpec, GaussianKernel, NormMode};
use crate::tensor::{Rng, Shape, Tensor};

pub const FD_EPS: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
/// Required distance between every kinked op's input and its kink, well
/// above what one `FD_EPS` nudge propagates through the small nets here.
pub const KINK_MARGIN: f32 = 1e-3;
/// Inputs are redrawn at most this many times to clear [`KINK_MARGIN`].
pub const MAX_DRAWS: u64 = 64;

type Forward = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor>,
    forward: Forward,
    /// Draws whose output fails this are redrawn like kinked ones.
    accept: fn(&Tensor) -> bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w).expect("fixed test shape")
}

fn normal(s: Shape, std: f32, rng: &mut Rng) -> Tensor {
    Tensor::random_normal(s, 0.0, std, rng).expect("positive std")
}

/// Values at least `gap` away from zero, so piecewise-linear kinks sit
/// outside the finite-difference stencil.
fn off_kink(s: Shape, gap: f32, rng: &mut Rng) -> Tensor {
    let mut t = normal(s, 1.0, rng);
    t.map_inplace(|v| v.signum() * (gap + v.abs()));
    t
}

/// Shuffled distinct values spaced by `0.01`, so every pooling window has a
/// unique maximum that a `1e-3` nudge cannot overturn.
fn distinct(s: Shape, rng: &mut Rng) -> Tensor {
    let n = s.numel();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.below(i + 1));
    }
    Tensor::from_vec(s, order.iter().map(|&k| k as f32 * 0.01 - 0.5).collect()).unwrap()
}

fn uniform(s: Shape, lo: f32, hi: f32, rng: &mut Rng) -> Tensor {
    Tensor::random_uniform(s, lo, hi, rng)
}

fn case(name: &'static str, inputs: Vec<Tensor>, forward: Forward) -> Case {
    Case {
        name,
        inputs,
        forward,
        accept: |_| true,
    }
}

/// `-ln p` for one image with `p` in `[0.1, 0.9]`. Closer to 1, f32 cannot
/// resolve `1 - p` finely enough for the finite difference.
fn unsaturated(loss: &Tensor) -> bool {
    (0.9f32.ln().abs()..=0.1f32.ln().abs()).contains(&loss.item())
}

fn small_discriminator(rng: &mut Rng) -> Discriminator {
    let cfg = DiscriminatorConfig {
        channels: vec![4, 6],
        strides: vec![2, 2, 2],
        ..DiscriminatorConfig::default()
    };
    let mut d = Discriminator::new(&cfg, rng).expect("valid config");
    // Larger weights than the training init so the check is not trivially flat.
    for p in crate::models::Model::params_mut(&mut d) {
        if p.name().ends_with(".weight") {
            let s = p.value().shape();
            p.set_value(normal(s, 0.5, rng)).unwrap();
        }
    }
    d
}

fn cases(seed: u64, attempt: u64) -> Vec<Case> {
    let mut rng = Rng::new(seed).derive(attempt);
    let r = &mut rng;
    let img = shape(1, 3, 8, 8);
    // Scalar losses of large sums lose f32 resolution; keep those inputs small.
    let small = shape(1, 3, 4, 4);
    let mut v = Vec::new();

    let spec = Conv2dSpec::new(2, 3, 3, 1, 1);
    v.push(case(
        "conv2d",
        vec![normal(shape(1, 2, 6, 6), 1.0, r), normal(spec.weight_shape(), 0.5, r), normal(shape(1, 3, 1, 1), 0.5, r)],
        Box::new(move |_, x| ops::conv2d(&x[0], &spec, &x[1], Some(&x[2]))),
    ));
    let strided = Conv2dSpec::new(2, 4, 4, 2, 1);
    v.push(case(
        "conv2d_strided",
        vec![normal(shape(1, 2, 8, 8), 1.0, r), normal(strided.weight_shape(), 0.5, r), normal(shape(1, 4, 1, 1), 0.5, r)],
        Box::new(move |_, x| ops::conv2d(&x[0], &strided, &x[1], Some(&x[2]))),
    ));
    let tspec = ConvTranspose2dSpec::new(4, 2, 4, 2, 1);
    v.push(case(
        "conv2d_transpose",
        vec![normal(shape(1, 4, 4, 4), 1.0, r), normal(tspec.weight_shape(), 0.5, r), normal(shape(1, 2, 1, 1), 0.5, r)],
        Box::new(move |_, x| ops::conv2d_transpose(&x[0], &tspec, &x[1], Some(&x[2]))),
    ));
    let even = Conv2dSpec::same(2, 3, 4);
    v.push(case(
        "conv2d_even_kernel",
        vec![normal(shape(1, 2, 5, 7), 1.0, r), normal(even.weight_shape(), 0.5, r), normal(shape(1, 3, 1, 1), 0.5, r)],
        Box::new(move |_, x| ops::conv2d(&x[0], &even, &x[1], Some(&x[2]))),
    ));
    let odd_up = ConvTranspose2dSpec::new(4, 2, 3, 2, 0).with_extra_padding(1);
    v.push(case(
        "conv2d_transpose_odd_kernel",
        vec![normal(shape(1, 4, 4, 4), 1.0, r), normal(odd_up.weight_shape(), 0.5, r), normal(shape(1, 2, 1, 1), 0.5, r)],
        Box::new(move |_, x| ops::conv2d_transpose(&x[0], &odd_up, &x[1], Some(&x[2]))),
    ));
    v.push(case("relu", vec![off_kink(shape(1, 4, 8, 8), 0.05, r)], Box::new(|_, x| Ok(x[0].relu()))));
    v.push(case(
        "leaky_relu",
        vec![off_kink(shape(1, 4, 8, 8), 0.05, r)],
        Box::new(|_, x| Ok(x[0].leaky_relu(0.2))),
    ));
    v.push(case(
        "prelu",
        vec![off_kink(shape(1, 4, 8, 8), 0.05, r), uniform(shape(1, 4, 1, 1), 0.1, 0.4, r)],
        Box::new(|_, x| x[0].prelu(&x[1])),
    ));
    v.push(case("sigmoid", vec![normal(shape(1, 4, 8, 8), 2.0, r)], Box::new(|_, x| Ok(x[0].sigmoid()))));
    v.push(case(
        "clamp",
        vec![uniform(shape(1, 4, 8, 8), 0.05, 0.95, r)],
        Box::new(|_, x| Ok(x[0].clamp(0.0, 1.0))),
    ));
    v.push(case("ln", vec![uniform(shape(1, 4, 8, 8), 0.5, 2.0, r)], Box::new(|_, x| Ok(x[0].ln()))));
    v.push(case("sqrt", vec![uniform(shape(1, 4, 8, 8), 0.5, 2.0, r)], Box::new(|_, x| Ok(x[0].sqrt()))));
    v.push(case(
        "add_sub_mul",
        vec![normal(shape(1, 4, 8, 8), 1.0, r), normal(shape(1, 4, 8, 8), 1.0, r)],
        Box::new(|_, x| x[0].add(&x[1])?.mul(&x[0].sub(&x[1])?)),
    ));
    v.push(case("sum", vec![normal(shape(1, 2, 4, 4), 1.0, r)], Box::new(|_, x| Ok(x[0].sum()))));
    v.push(case("mean", vec![normal(shape(1, 2, 4, 4), 1.0, r)], Box::new(|_, x| Ok(x[0].mean()))));
    v.push(case("sum_items", vec![normal(shape(2, 2, 4, 4), 1.0, r)], Box::new(|_, x| Ok(x[0].sum_items()))));
    v.push(case("mean_planes", vec![normal(shape(2, 2, 4, 4), 1.0, r)], Box::new(|_, x| Ok(x[0].mean_planes()))));
    v.push(case("diff_w", vec![normal(shape(1, 4, 8, 8), 1.0, r)], Box::new(|_, x| Ok(x[0].diff_w().unwrap()))));
    v.push(case("diff_h", vec![normal(shape(1, 4, 8, 8), 1.0, r)], Box::new(|_, x| Ok(x[0].diff_h().unwrap()))));
    let (rm, rv) = (normal(shape(1, 4, 1, 1), 0.3, r), uniform(shape(1, 4, 1, 1), 0.5, 1.5, r));
    v.push(case(
        "batch_norm_train",
        vec![normal(shape(1, 4, 4, 4), 1.0, r), uniform(shape(1, 4, 1, 1), 0.5, 1.5, r), normal(shape(1, 4, 1, 1), 0.5, r)],
        Box::new(move |_, x| Ok(ops::batch_norm(&x[0], &x[1], &x[2], NormMode::Train, &rm, &rv)?.0)),
    ));
    let (rm, rv) = (normal(shape(1, 4, 1, 1), 0.3, r), uniform(shape(1, 4, 1, 1), 0.5, 1.5, r));
    v.push(case(
        "batch_norm_eval",
        vec![normal(shape(1, 4, 8, 8), 1.0, r), uniform(shape(1, 4, 1, 1), 0.5, 1.5, r), normal(shape(1, 4, 1, 1), 0.5, r)],
        Box::new(move |_, x| Ok(ops::batch_norm(&x[0], &x[1], &x[2], NormMode::Eval, &rm, &rv)?.0)),
    ));
    let kernel = GaussianKernel::color_loss_default();
    v.push(case(
        "gaussian_blur",
        vec![normal(img, 1.0, r)],
        Box::new(move |_, x| Ok(ops::gaussian_blur(&x[0], &kernel))),
    ));
    v.push(case("grayscale", vec![normal(img, 1.0, r)], Box::new(|_, x| ops::grayscale(&x[0]))));
    v.push(case("max_pool2x2", vec![distinct(shape(1, 4, 8, 8), r)], Box::new(|_, x| ops::max_pool2x2(&x[0]))));

    let kernel = GaussianKernel::color_loss_default();
    v.push(case(
        "color_loss",
        vec![uniform(small, 0.0, 1.0, r), uniform(small, 0.0, 1.0, r)],
        Box::new(move |_, x| losses::color_loss(&x[0], &x[1], &kernel)),
    ));
    // Targets near the input keep the loss small relative to its gradient.
    let near = |x: &Tensor, r: &mut Rng| x.add(&normal(x.shape(), 0.05, r)).unwrap();
    let fe = FeatureExtractor::tiny_fixed();
    let enhanced = uniform(img, 0.0, 1.0, r);
    let target = near(&enhanced, r);
    v.push(case(
        "content_loss",
        vec![enhanced],
        Box::new(move |t, x| losses::content_loss(&fe, &x[0], &t.constant(target.clone()), ContentOptions::default())),
    ));
    let fe = FeatureExtractor::tiny_fixed();
    let enhanced = uniform(img, 0.0, 1.0, r);
    let target = near(&enhanced, r);
    v.push(case(
        "content_loss_squared",
        vec![enhanced],
        Box::new(move |t, x| {
            losses::content_loss(&fe, &x[0], &t.constant(target.clone()), ContentOptions { squared: true })
        }),
    ));
    v.push(case(
        "tv_loss",
        vec![uniform(small, 0.0, 1.0, r)],
        Box::new(|_, x| losses::tv_loss(&x[0], TvNorm::SquaredFields)),
    ));
    v.push(case(
        "tv_loss_literal",
        vec![uniform(small, 0.0, 1.0, r)],
        Box::new(|_, x| losses::tv_loss(&x[0], TvNorm::LiteralSum)),
    ));
    let d = RefCell::new(small_discriminator(r));
    v.push(Case {
        accept: unsaturated,
        ..case(
            "texture_loss_generator",
            vec![uniform(shape(1, 3, 8, 8), -0.5, 0.5, r)],
            Box::new(move |_, x| losses::texture_loss_generator(&mut d.borrow_mut(), &x[0], Mode::Eval)),
        )
    });
    v.push(case(
        "texture_loss_discriminator",
        vec![uniform(shape(4, 1, 1, 1), 0.05, 0.95, r)],
        Box::new(|_, x| losses::discriminator_adversarial(&x[0], 2)),
    ));
    v.push(case(
        "total_loss",
        (0..4).map(|_| uniform(Shape::SCALAR, 0.0, 1.0, r)).collect(),
        Box::new(|t, x| {
            let parts = losses::LossParts {
                content: x[0].clone(),
                texture: x[1].clone(),
                color: x[2].clone(),
                tv: x[3].clone(),
            };
            let _ = t;
            Ok(losses::total_loss(&parts, &losses::LossWeights::default())?.0)
        }),
    ));
    v
}

/// Names of every checked op and loss, in suite order.
pub fn op_names() -> Vec<&'static str> {
    cases(0, 0).iter().map(|c| c.name).collect()
}

fn projected(y: &Tensor, r: &Tensor) -> f64 {
    y.dot_f64(r).expect("projection shape")
}

fn check(index: usize, seed: u64, corrupt: bool) -> Result<CheckResult> {
    for attempt in 0..MAX_DRAWS {
        let cases = cases(seed, attempt);
        let case = &cases[index];
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = case.inputs.iter().map(|t| tape.input(t.clone())).collect();
        let y = (case.forward)(&tape, &vars)?;
        if tape.kink_margin() < KINK_MARGIN || !(case.accept)(y.value()) {
            continue;
        }
        return check_at(case, &tape, &vars, y, seed, corrupt);
    }
    Err(crate::error::Error::arg(
        "gradcheck",
        format!("no acceptable input draw for {} after {MAX_DRAWS} tries", cases(seed, 0)[index].name),
    ))
}

fn check_at<'t>(case: &Case, tape: &'t Tape, vars: &[Var<'t>], y: Var<'t>, seed: u64, corrupt: bool) -> Result<CheckResult> {
    let r = Tensor::random_normal(y.shape(), 0.0, 1.0, &mut Rng::new(seed).derive(0x7072_6f6a))?;
    let loss = y.mul(&tape.constant(r.clone()))?.sum();
    let grads = tape.backward(&loss)?;

    let mut max_diff = 0.0f64;
    let mut max_num = 0.0f64;
    let mut max_ana = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let analytic = if corrupt { analytic.scale(1.5) } else { analytic };
        for k in 0..input.numel() {
            let eval = |delta: f32| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                inputs[i].data_mut()[k] += delta;
                let t = Tape::no_grad();
                let vs: Vec<Var<'_>> = inputs.into_iter().map(|x| t.constant(x)).collect();
                Ok(projected((case.forward)(&t, &vs)?.value(), &r))
            };
            let numeric = (eval(FD_EPS)? - eval(-FD_EPS)?) / (2.0 * FD_EPS as f64);
            let a = analytic.data()[k] as f64;
            max_diff = max_diff.max((a - numeric).abs());
            max_num = max_num.max(numeric.abs());
            max_ana = max_ana.max(a.abs());
        }
    }
    let scale = max_num.max(max_ana);
    let rel = if scale > 0.0 { max_diff / scale } else { 0.0 };
    Ok(CheckResult {
        name: case.name.to_string(),
        seed,
        max_rel_err: rel,
        passed: rel < TOLERANCE && rel.is_finite(),
    })
}

/// Runs every case for one seed. `corrupt` names a case whose analytic
/// gradient is deliberately scaled, to exercise the failure path.
pub fn run(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckResult>> {
    op_names()
        .into_iter()
        .enumerate()
        .map(|(i, name)| check(i, seed, corrupt == Some(name)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let names = op_names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"conv2d_transpose"));
        assert!(names.contains(&"texture_loss_generator"));
    }

    #[test]
    fn corrupted_case_fails() {
        let results = run(5, Some("grayscale")).unwrap();
        let bad: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        assert_eq!(bad, ["grayscale"]);
    }
}


