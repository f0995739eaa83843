//! PSNR, SSIM and MS-SSIM.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `K1 = 0.01`, `K2 = 0.03`
//! and "valid" filtering (no padding). MS-SSIM runs five scales separated by
//! 2x2 average pooling with exponents `0.0448, 0.2856, 0.3001, 0.2363,
//! 0.1333`. By default images are reduced to luma first.

use std::fmt;

use crate::error::{Error, Result};
use crate::ops::color::luma;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Smallest side that survives four halvings with a full window left.
pub const MS_SSIM_MIN_SIZE: usize = SSIM_WINDOW << 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ColorMode {
    /// `0.299 R + 0.587 G + 0.114 B`.
    #[default]
    Luma,
    /// Average of the per-channel values.
    RgbMean,
}

fn check_same(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape(),
            right: y.shape(),
        });
    }
    Ok(())
}

pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_same("mse", x, y)?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / x.numel() as f64)
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// `10 log10(max^2 / MSE)` over all elements; `+inf` for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f32) -> Result<f32> {
    if !(max_val > 0.0) {
        return Err(Error::arg("psnr", format!("max_val must be > 0, got {max_val}")));
    }
    Ok(psnr_from_mse(mse(x, y)?, max_val as f64) as f32)
}

/// A single-channel image in f64.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.data[(2 * y + dy) * self.w + 2 * x + dx];
                data.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
            }
        }
        Plane { h, w, data }
    }
}

fn window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering with the normalized Gaussian window.
fn filter_valid(p: &Plane, g: &[f64]) -> Plane {
    let k = g.len();
    let (oh, ow) = (p.h + 1 - k, p.w + 1 - k);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = g.iter().zip(&row[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut data = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            data[y * ow + x] = (0..k).map(|t| g[t] * tmp[(y + t) * ow + x]).sum();
        }
    }
    Plane { h: oh, w: ow, data }
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_terms(x: &Plane, y: &Plane, max_val: f64) -> (f64, f64) {
    let g = window();
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let mx = filter_valid(x, &g);
    let my = filter_valid(y, &g);
    let sxx = filter_valid(&x.map2(x, |a, b| a * b), &g);
    let syy = filter_valid(&y.map2(y, |a, b| a * b), &g);
    let sxy = filter_valid(&x.map2(y, |a, b| a * b), &g);
    let n = mx.data.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = sxx.data[i] - ux * ux;
        let vy = syy.data[i] - uy * uy;
        let cov = sxy.data[i] - ux * uy;
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        ssim += (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1) * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

/// `sign(v) * |v|^e`, so a negative contrast term cannot produce NaN.
fn signed_pow(v: f64, e: f64) -> f64 {
    v.signum() * v.abs().powf(e)
}

fn ms_ssim_planes(x: &Plane, y: &Plane, max_val: f64) -> f64 {
    let (mut x, mut y) = (x.clone(), y.clone());
    let mut out = 1.0;
    for (j, &wj) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&x, &y, max_val);
        if j + 1 == MS_SSIM_WEIGHTS.len() {
            out *= signed_pow(ssim, wj);
        } else {
            out *= signed_pow(cs, wj);
            x = x.downsample();
            y = y.downsample();
        }
    }
    out
}

/// The per-image planes a metric averages over.
fn planes(t: &Tensor, mode: ColorMode) -> Result<Vec<Vec<Plane>>> {
    let s = t.shape();
    let to_plane = |d: &[f32]| Plane {
        h: s.h,
        w: s.w,
        data: d.iter().map(|&v| v as f64).collect(),
    };
    match mode {
        ColorMode::Luma if s.c == 3 => {
            let l = luma(t)?;
            Ok((0..s.n).map(|n| vec![to_plane(l.plane(n, 0))]).collect())
        }
        ColorMode::Luma if s.c != 1 => Err(Error::ChannelMismatch {
            op: "luma metric",
            expected: 3,
            actual: s.c,
        }),
        _ => Ok((0..s.n)
            .map(|n| (0..s.c).map(|c| to_plane(t.plane(n, c))).collect())
            .collect()),
    }
}

fn per_image(
    x: &Tensor,
    y: &Tensor,
    mode: ColorMode,
    min: usize,
    what: &'static str,
    f: impl Fn(&Plane, &Plane) -> f64,
) -> Result<Vec<f64>> {
    check_same(what, x, y)?;
    let s = x.shape();
    if s.h < min || s.w < min {
        return Err(Error::ImageTooSmall {
            what,
            height: s.h,
            width: s.w,
            min,
        });
    }
    let (px, py) = (planes(x, mode)?, planes(y, mode)?);
    Ok(px
        .iter()
        .zip(&py)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| f(p, q)).sum::<f64>() / a.len() as f64)
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean SSIM over the batch, images in `[0, max_val]`.
pub fn ssim_with(x: &Tensor, y: &Tensor, mode: ColorMode, max_val: f32) -> Result<f32> {
    let v = per_image(x, y, mode, SSIM_WINDOW, "SSIM", |a, b| ssim_terms(a, b, max_val as f64).0)?;
    Ok(mean(&v) as f32)
}

pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f32> {
    ssim_with(x, y, ColorMode::Luma, 1.0)
}

pub fn ms_ssim_with(x: &Tensor, y: &Tensor, mode: ColorMode, max_val: f32) -> Result<f32> {
    let v = per_image(x, y, mode, MS_SSIM_MIN_SIZE, "MS-SSIM", |a, b| {
        ms_ssim_planes(a, b, max_val as f64)
    })?;
    Ok(mean(&v) as f32)
}

pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f32> {
    ms_ssim_with(x, y, ColorMode::Luma, 1.0)
}

/// Averages over a set of images. `ms_ssim` is `None` when any image is
/// smaller than [`MS_SSIM_MIN_SIZE`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub psnr_db: f32,
    pub ssim: f32,
    pub ms_ssim: Option<f32>,
    pub n_images: usize,
}

impl MetricReport {
    pub const HEADER: &'static str = "psnr\tssim\tms_ssim\tn";
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ms = match self.ms_ssim {
            Some(v) => format!("{v:.4}"),
            None => "n/a".into(),
        };
        write!(f, "{}\t{:.4}\t{ms}\t{}", fmt_db(self.psnr_db), self.ssim, self.n_images)
    }
}

pub fn fmt_db(v: f32) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Accumulates per-image metrics in `[0, 1]` images.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    mode: ColorMode,
    psnr: Vec<f64>,
    ssim: Vec<f64>,
    ms_ssim: Vec<Option<f64>>,
}

impl MetricAccumulator {
    pub fn new(mode: ColorMode) -> Self {
        MetricAccumulator {
            mode,
            ..Default::default()
        }
    }

    /// Adds every image of an `(n, c, h, w)` pair.
    pub fn add(&mut self, x: &Tensor, y: &Tensor) -> Result<()> {
        check_same("metrics", x, y)?;
        let s = x.shape();
        let (px, py) = (planes(x, self.mode)?, planes(y, self.mode)?);
        for n in 0..s.n {
            // Equal-sized planes: the mean of per-plane MSEs is the overall MSE.
            let e = px[n]
                .iter()
                .zip(&py[n])
                .map(|(a, b)| a.data.iter().zip(&b.data).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.data.len() as f64)
                .sum::<f64>()
                / px[n].len() as f64;
            self.psnr.push(psnr_from_mse(e, 1.0));
            if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
                return Err(Error::ImageTooSmall {
                    what: "SSIM",
                    height: s.h,
                    width: s.w,
                    min: SSIM_WINDOW,
                });
            }
            let avg = |f: &dyn Fn(&Plane, &Plane) -> f64| {
                px[n].iter().zip(&py[n]).map(|(a, b)| f(a, b)).sum::<f64>() / px[n].len() as f64
            };
            self.ssim.push(avg(&|a, b| ssim_terms(a, b, 1.0).0));
            let big = s.h >= MS_SSIM_MIN_SIZE && s.w >= MS_SSIM_MIN_SIZE;
            self.ms_ssim.push(big.then(|| avg(&|a, b| ms_ssim_planes(a, b, 1.0))));
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.psnr.is_empty() {
            return Err(Error::EmptyDataset("no images were evaluated".into()));
        }
        let ms: Option<Vec<f64>> = self.ms_ssim.iter().copied().collect();
        Ok(MetricReport {
            psnr_db: mean(&self.psnr) as f32,
            ssim: mean(&self.ssim) as f32,
            ms_ssim: ms.map(|v| mean(&v) as f32),
            n_images: self.psnr.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Rng, Shape};

    #[test]
    fn psnr_closed_forms() {
        let s = Shape::new(1, 1, 4, 4).unwrap();
        let x = Tensor::full(s, 100.0);
        let y = Tensor::full(s, 101.0);
        let v = psnr(&x, &y, 255.0).unwrap() as f64;
        assert!((v - 20.0 * 255f64.log10()).abs() < 1e-4);
        assert!(psnr(&x, &x, 255.0).unwrap().is_infinite());
        let z = Tensor::full(s, 100.0 + 255.0);
        assert!(psnr(&x, &z, 255.0).unwrap().abs() < 1e-6);
        assert!(psnr(&x, &y, 0.0).is_err());
    }

    #[test]
    fn ms_ssim_weights_sum_to_one() {
        assert!((MS_SSIM_WEIGHTS.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        assert_eq!(MS_SSIM_MIN_SIZE, 176);
    }

    #[test]
    fn window_matches_gaussian() {
        let g = window();
        assert_eq!(g.len(), 11);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g[5] / g[6] - (1.0 / 4.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn signed_pow_keeps_sign() {
        assert_eq!(signed_pow(-0.25, 0.5), -0.5);
        assert_eq!(signed_pow(0.25, 0.5), 0.5);
    }

    #[test]
    fn inverted_image_has_low_ssim() {
        let x = Tensor::random_uniform(Shape::new(1, 3, 32, 32).unwrap(), 0.0, 1.0, &mut Rng::new(8));
        let y = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &y).unwrap() < 0.5);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn ms_ssim_requires_size() {
        let x = Tensor::zeros(Shape::new(1, 3, 100, 200).unwrap());
        assert!(matches!(ms_ssim(&x, &x), Err(Error::ImageTooSmall { .. })));
    }
}
