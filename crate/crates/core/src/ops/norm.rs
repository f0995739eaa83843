use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f32 = 1e-5;
/// Weight of the old value in the running-average update.
pub const BN_MOMENTUM: f32 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics over `(n, h, w)`.
    Train,
    /// Normalize with the running statistics.
    Eval,
}

/// Per-channel statistics of one training batch (variance unbiased).
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl BatchStats {
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn blend_into(&self, running_mean: &mut Tensor, running_var: &mut Tensor, momentum: f32) {
        for (r, &b) in running_mean.data_mut().iter_mut().zip(&self.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in running_var.data_mut().iter_mut().zip(&self.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

struct BatchNormBackward {
    /// Normalized input, `(x - mean) * inv_std`.
    xhat: Tensor,
    inv_std: Vec<f32>,
    /// Batch statistics were used (the mean/var depend on `x`).
    train: bool,
}

impl BackwardOp for BatchNormBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad;
        let s = g.shape();
        let gamma = ctx.inputs[1].data();
        let m = (s.n * s.plane()) as f64;
        let mut sum_g = vec![0.0f64; s.c];
        let mut sum_gx = vec![0.0f64; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                for (&gv, &xv) in g.plane(n, c).iter().zip(self.xhat.plane(n, c)) {
                    sum_g[c] += gv as f64;
                    sum_gx[c] += gv as f64 * xv as f64;
                }
            }
        }
        let dx = ctx.needs[0].then(|| {
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let k = gamma[c] * self.inv_std[c];
                    let (mg, mgx) = ((sum_g[c] / m) as f32, (sum_gx[c] / m) as f32);
                    let xh = self.xhat.plane(n, c);
                    let gp = g.plane(n, c);
                    for ((o, &gv), &xv) in dx.plane_mut(n, c).iter_mut().zip(gp).zip(xh) {
                        *o = if self.train {
                            k * (gv - mg - xv * mgx)
                        } else {
                            k * gv
                        };
                    }
                }
            }
            dx
        });
        let per_channel = |v: &[f64]| {
            Tensor::from_vec(
                Shape { n: 1, c: s.c, h: 1, w: 1 },
                v.iter().map(|&x| x as f32).collect(),
            )
            .unwrap()
        };
        vec![
            dx,
            ctx.needs[1].then(|| per_channel(&sum_gx)),
            ctx.needs[2].then(|| per_channel(&sum_g)),
        ]
    }
}

/// Per-channel affine normalization. Returns the batch statistics in
/// [`NormMode::Train`] so the caller can update its running averages.
pub fn batch_norm<'t>(
    x: &Var<'t>,
    gamma: &Var<'t>,
    beta: &Var<'t>,
    mode: NormMode,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<(Var<'t>, Option<BatchStats>)> {
    let s = x.shape();
    for (what, t) in [
        ("gamma", gamma.value()),
        ("beta", beta.value()),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if t.numel() != s.c {
            return Err(Error::arg(
                "batch_norm",
                format!("{what} has {} entries for {} channels", t.numel(), s.c),
            ));
        }
    }
    let xv = x.value();
    let (mean, var, stats) = match mode {
        NormMode::Train => {
            let m = (s.n * s.plane()) as f64;
            let mut mean = vec![0.0f64; s.c];
            let mut var = vec![0.0f64; s.c];
            for c in 0..s.c {
                let sum: f64 = (0..s.n)
                    .map(|n| xv.plane(n, c).iter().map(|&v| v as f64).sum::<f64>())
                    .sum();
                mean[c] = sum / m;
                var[c] = (0..s.n)
                    .map(|n| {
                        xv.plane(n, c)
                            .iter()
                            .map(|&v| (v as f64 - mean[c]).powi(2))
                            .sum::<f64>()
                    })
                    .sum::<f64>()
                    / m;
            }
            let unbiased = var
                .iter()
                .map(|&v| if m > 1.0 { (v * m / (m - 1.0)) as f32 } else { v as f32 })
                .collect();
            let stats = BatchStats {
                mean: mean.iter().map(|&v| v as f32).collect(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval => (
            running_mean.data().iter().map(|&v| v as f64).collect(),
            running_var.data().iter().map(|&v| v as f64).collect(),
            None,
        ),
    };
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v + BN_EPS as f64).sqrt()) as f32)
        .collect();
    let (gm, bt) = (gamma.value().data(), beta.value().data());
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let mu = mean[c] as f32;
            for (h, &v) in xhat.plane_mut(n, c).iter_mut().zip(xv.plane(n, c)) {
                *h = (v - mu) * inv_std[c];
            }
            for (o, &h) in out.plane_mut(n, c).iter_mut().zip(xhat.plane(n, c)) {
                *o = gm[c] * h + bt[c];
            }
        }
    }
    let op = BatchNormBackward {
        xhat,
        inv_std,
        train: mode == NormMode::Train,
    };
    Ok((x.tape().record(out, &[x, gamma, beta], op), stats))
}
