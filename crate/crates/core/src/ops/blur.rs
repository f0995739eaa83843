//! Gaussian blur used by the color loss.
//!
//! The kernel is evaluated literally as
//! `G(k, l) = A * exp(-(k - mu)^2 / (2 s) - (l - mu)^2 / (2 s))`
//! where `s` is `sigma` in [`SigmaMode::AsPrinted`] and `sigma^2` in
//! [`SigmaMode::Squared`]. With `A = 0.053`, `sigma = 3` the printed form sums
//! to about one over a 21x21 support. The kernel factors into a row and a
//! column profile, so blurring runs as two 1-D passes with mirror borders.

use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{reflect_index, Tensor};

pub const COLOR_BLUR_AMPLITUDE: f32 = 0.053;
pub const COLOR_BLUR_MU: f32 = 0.0;
pub const COLOR_BLUR_SIGMA: f32 = 3.0;
pub const COLOR_BLUR_RADIUS: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SigmaMode {
    /// Denominator `2 * sigma`.
    #[default]
    AsPrinted,
    /// Denominator `2 * sigma^2` (the conventional Gaussian).
    Squared,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    radius: usize,
    amplitude: f32,
    /// `exp(-(t - mu)^2 / (2 s))` for `t = -radius..=radius`.
    profile: Vec<f32>,
    /// Full `(2r+1) x (2r+1)` weights, row index `k`, column index `l`.
    weights: Vec<f32>,
}

impl GaussianKernel {
    pub fn new(amplitude: f32, mu: f32, sigma: f32, radius: usize, mode: SigmaMode) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::arg("gaussian_kernel", format!("sigma must be > 0, got {sigma}")));
        }
        if radius < 1 {
            return Err(Error::arg("gaussian_kernel", "radius must be >= 1"));
        }
        let denom = match mode {
            SigmaMode::AsPrinted => 2.0 * sigma as f64,
            SigmaMode::Squared => 2.0 * (sigma as f64).powi(2),
        };
        let r = radius as isize;
        let taps: Vec<f64> = (-r..=r).map(|t| t as f64 - mu as f64).collect();
        let profile = taps.iter().map(|t| (-t * t / denom).exp() as f32).collect();
        let weights = taps
            .iter()
            .flat_map(|k| {
                taps.iter()
                    .map(move |l| (amplitude as f64 * (-k * k / denom - l * l / denom).exp()) as f32)
            })
            .collect();
        Ok(GaussianKernel {
            radius,
            amplitude,
            profile,
            weights,
        })
    }

    /// `A = 0.053, mu = 0, sigma = 3`, radius 10, denominator as printed.
    pub fn color_loss_default() -> Self {
        GaussianKernel::new(
            COLOR_BLUR_AMPLITUDE,
            COLOR_BLUR_MU,
            COLOR_BLUR_SIGMA,
            COLOR_BLUR_RADIUS,
            SigmaMode::AsPrinted,
        )
        .expect("default kernel parameters are valid")
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn size(&self) -> usize {
        2 * self.radius + 1
    }

    /// `G(k, l)` for offsets in `-radius..=radius`.
    pub fn weight(&self, k: isize, l: isize) -> f32 {
        let size = self.size() as isize;
        let r = self.radius as isize;
        self.weights[((k + r) * size + (l + r)) as usize]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|&v| v as f64).sum()
    }
}

/// One 1-D correlation pass with mirror borders.
fn pass(src: &[f32], dst: &mut [f32], h: usize, w: usize, taps: &[f32], scale: f32, along_h: bool) {
    let r = (taps.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (t, &g) in taps.iter().enumerate() {
                let off = t as isize - r;
                let i = if along_h {
                    reflect_index(y as isize + off, h) * w + x
                } else {
                    y * w + reflect_index(x as isize + off, w)
                };
                acc += src[i] as f64 * g as f64;
            }
            dst[y * w + x] = (scale as f64 * acc) as f32;
        }
    }
}

/// Adjoint of [`pass`]: scatters `src` back through the same taps.
fn pass_adjoint(src: &[f32], dst: &mut [f32], h: usize, w: usize, taps: &[f32], scale: f32, along_h: bool) {
    dst.fill(0.0);
    let r = (taps.len() / 2) as isize;
    for y in 0..h {
        for x in 0..w {
            let v = scale * src[y * w + x];
            for (t, &g) in taps.iter().enumerate() {
                let off = t as isize - r;
                let i = if along_h {
                    reflect_index(y as isize + off, h) * w + x
                } else {
                    y * w + reflect_index(x as isize + off, w)
                };
                dst[i] += v * g;
            }
        }
    }
}

fn blur_tensor(x: &Tensor, k: &GaussianKernel, adjoint: bool) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let mut tmp = vec![0.0f32; s.plane()];
    let f = if adjoint { pass_adjoint } else { pass };
    for n in 0..s.n {
        for c in 0..s.c {
            if adjoint {
                f(x.plane(n, c), &mut tmp, s.h, s.w, &k.profile, k.amplitude, true);
                f(&tmp, out.plane_mut(n, c), s.h, s.w, &k.profile, 1.0, false);
            } else {
                f(x.plane(n, c), &mut tmp, s.h, s.w, &k.profile, 1.0, false);
                f(&tmp, out.plane_mut(n, c), s.h, s.w, &k.profile, k.amplitude, true);
            }
        }
    }
    out
}

struct BlurBackward(GaussianKernel);

impl BackwardOp for BlurBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        vec![Some(blur_tensor(ctx.grad, &self.0, true))]
    }
}

/// Per-channel correlation with `kernel`, mirror-reflected borders.
pub fn gaussian_blur<'t>(x: &Var<'t>, kernel: &GaussianKernel) -> Var<'t> {
    let out = blur_tensor(x.value(), kernel, false);
    x.tape().record(out, &[x], BlurBackward(kernel.clone()))
}

/// Reference 2-D evaluation of the blur sum with the full weight table.
pub fn gaussian_blur_direct(x: &Tensor, kernel: &GaussianKernel) -> Tensor {
    let s = x.shape();
    let r = kernel.radius as isize;
    Tensor::from_fn(s, |n, c, i, j| {
        let mut acc = 0.0f64;
        for k in -r..=r {
            for l in -r..=r {
                let y = reflect_index(i as isize + k, s.h);
                let xx = reflect_index(j as isize + l, s.w);
                acc += x.at(n, c, y, xx) as f64 * kernel.weight(k, l) as f64;
            }
        }
        acc as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::{Rng, Shape};

    #[test]
    fn default_kernel_center_and_mass() {
        let k = GaussianKernel::color_loss_default();
        assert_eq!(k.size(), 21);
        assert!((k.weight(0, 0) - 0.053).abs() < 1e-9);
        // Hand sum: A * (sum_t exp(-t^2/6))^2 with t in -10..=10.
        let row: f64 = (-10..=10).map(|t: i32| (-(t * t) as f64 / 6.0).exp()).sum();
        let expected = 0.053 * row * row;
        assert!((k.sum() - expected).abs() < 1e-5);
        assert!((k.sum() - 1.0).abs() < 0.02, "sum {}", k.sum());
    }

    #[test]
    fn kernel_is_point_symmetric() {
        let k = GaussianKernel::new(0.053, 0.0, 3.0, 10, SigmaMode::Squared).unwrap();
        for a in -10..=10 {
            for b in -10..=10 {
                assert_eq!(k.weight(a, b), k.weight(-a, -b));
            }
        }
        assert!(GaussianKernel::new(1.0, 0.0, 0.0, 3, SigmaMode::AsPrinted).is_err());
        assert!(GaussianKernel::new(1.0, 0.0, 1.0, 0, SigmaMode::AsPrinted).is_err());
    }

    #[test]
    fn constant_image_scales_by_kernel_mass() {
        let k = GaussianKernel::color_loss_default();
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::full(Shape::new(1, 2, 9, 6).unwrap(), 0.4));
        let y = gaussian_blur(&x, &k);
        let expected = 0.4 * k.sum() as f32;
        for &v in y.value().data() {
            assert!((v - expected).abs() < 1e-5, "{v} vs {expected}");
        }
    }

    #[test]
    fn separable_matches_direct() {
        let k = GaussianKernel::new(0.1, 0.5, 2.0, 4, SigmaMode::Squared).unwrap();
        let x = Tensor::random_normal(Shape::new(2, 2, 7, 11).unwrap(), 0.0, 1.0, &mut Rng::new(4)).unwrap();
        let tape = Tape::no_grad();
        let fast = gaussian_blur(&tape.constant(x.clone()), &k);
        let direct = gaussian_blur_direct(&x, &k);
        let err = fast.value().sub(&direct).unwrap().max_abs() / direct.max_abs();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn adjoint_identity() {
        let k = GaussianKernel::color_loss_default();
        let mut rng = Rng::new(12);
        let s = Shape::new(1, 1, 8, 5).unwrap();
        let x = Tensor::random_normal(s, 0.0, 1.0, &mut rng).unwrap();
        let y = Tensor::random_normal(s, 0.0, 1.0, &mut rng).unwrap();
        let lhs = blur_tensor(&x, &k, false).dot_f64(&y).unwrap();
        let rhs = x.dot_f64(&blur_tensor(&y, &k, true)).unwrap();
        assert!((lhs - rhs).abs() < 1e-4 * lhs.abs().max(1.0));
    }
}
