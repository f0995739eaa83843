//! Elementwise maps, activations and reductions on tape values.

use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::{BinaryOp, Shape, Tensor};

struct Binary(BinaryOp);

impl BackwardOp for Binary {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = ctx.grad;
        let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
        let (ga, gb) = match self.0 {
            BinaryOp::Add => (
                ctx.needs[0].then(|| g.clone()),
                ctx.needs[1].then(|| g.clone()),
            ),
            BinaryOp::Sub => (
                ctx.needs[0].then(|| g.clone()),
                ctx.needs[1].then(|| g.scale(-1.0)),
            ),
            BinaryOp::Mul => (
                ctx.needs[0].then(|| g.mul(b).unwrap()),
                ctx.needs[1].then(|| g.mul(a).unwrap()),
            ),
        };
        vec![ga, gb]
    }
}

/// Gradient is `g * d(x)` with `d` evaluated from input and output values.
struct Pointwise<F: Fn(f32, f32) -> f32>(F);

impl<F: Fn(f32, f32) -> f32> BackwardOp for Pointwise<F> {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = ctx.inputs[0].data();
        let y = ctx.output.data();
        let data = ctx
            .grad
            .data()
            .iter()
            .zip(x.iter().zip(y))
            .map(|(&g, (&x, &y))| g * (self.0)(x, y))
            .collect();
        vec![Some(Tensor::from_vec(ctx.grad.shape(), data).unwrap())]
    }
}

struct Prelu;

impl BackwardOp for Prelu {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let x = &ctx.inputs[0];
        let slope = ctx.inputs[1].data();
        let s = x.shape();
        let g = ctx.grad;
        let mut gx = ctx.needs[0].then(|| Tensor::zeros(s));
        let mut ga = vec![0.0f64; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let xp = x.plane(n, c);
                let gp = g.plane(n, c);
                if let Some(gx) = gx.as_mut() {
                    for ((o, &xv), &gv) in gx.plane_mut(n, c).iter_mut().zip(xp).zip(gp) {
                        *o = if xv > 0.0 { gv } else { slope[c] * gv };
                    }
                }
                ga[c] += xp
                    .iter()
                    .zip(gp)
                    .filter(|(&xv, _)| xv <= 0.0)
                    .map(|(&xv, &gv)| xv as f64 * gv as f64)
                    .sum::<f64>();
            }
        }
        let ga = ctx.needs[1].then(|| {
            Tensor::from_vec(ctx.inputs[1].shape(), ga.iter().map(|&v| v as f32).collect())
                .unwrap()
        });
        vec![gx, ga]
    }
}

/// Broadcasts the upstream gradient of a reduction back over its input.
struct Reduce {
    kind: ReduceKind,
}

#[derive(Clone, Copy)]
enum ReduceKind {
    Sum,
    Mean,
    /// Per batch item, to `(n,1,1,1)`.
    SumItems,
    /// Per `(n, c)` plane, to `(n,c,1,1)`.
    MeanPlanes,
}

impl BackwardOp for Reduce {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let s = ctx.inputs[0].shape();
        let g = ctx.grad.data();
        let t = match self.kind {
            ReduceKind::Sum => Tensor::full(s, g[0]),
            ReduceKind::Mean => Tensor::full(s, g[0] / s.numel() as f32),
            ReduceKind::SumItems => Tensor::from_fn(s, |n, _, _, _| g[n]),
            ReduceKind::MeanPlanes => {
                let inv = 1.0 / s.plane() as f32;
                Tensor::from_fn(s, |n, c, _, _| g[n * s.c + c] * inv)
            }
        };
        vec![Some(t)]
    }
}

#[derive(Clone, Copy)]
enum Axis {
    H,
    W,
}

/// Forward differences `x[i+1] - x[i]` along one spatial axis.
struct Diff(Axis);

impl BackwardOp for Diff {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let s = ctx.inputs[0].shape();
        let g = ctx.grad;
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let gp = g.plane(n, c);
                let gw = g.shape().w;
                let op = out.plane_mut(n, c);
                for (i, &gv) in gp.iter().enumerate() {
                    let (y, x) = (i / gw, i % gw);
                    let (lo, hi) = match self.0 {
                        Axis::W => (y * s.w + x, y * s.w + x + 1),
                        Axis::H => (y * s.w + x, (y + 1) * s.w + x),
                    };
                    op[hi] += gv;
                    op[lo] -= gv;
                }
            }
        }
        vec![Some(out)]
    }
}

impl<'t> Var<'t> {
    fn binary(&self, other: &Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
        let value = self.value().map_binary(other.value(), op)?;
        Ok(self.tape().record(value, &[self, other], Binary(op)))
    }

    fn pointwise(
        &self,
        f: impl Fn(f32) -> f32,
        d: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var<'t> {
        let value = self.value().map(f);
        self.tape().record(value, &[self], Pointwise(d))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn scale(&self, s: f32) -> Var<'t> {
        self.pointwise(move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f32) -> Var<'t> {
        self.pointwise(move |v| v + s, |_, _| 1.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.pointwise(|v| v * v, |x, _| 2.0 * x)
    }

    /// Natural log; inputs must be positive.
    pub fn ln(&self) -> Var<'t> {
        self.pointwise(f32::ln, |x, _| 1.0 / x)
    }

    /// Square root with a zero subgradient at 0.
    pub fn sqrt(&self) -> Var<'t> {
        self.note_kink(0.0);
        self.pointwise(f32::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    /// Clamp to `[lo, hi]`; the gradient passes inside the closed interval.
    pub fn clamp(&self, lo: f32, hi: f32) -> Var<'t> {
        self.note_kink(lo);
        self.note_kink(hi);
        self.pointwise(
            move |v| v.clamp(lo, hi),
            move |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 },
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.pointwise(
            |v| 1.0 / (1.0 + (-v).exp()),
            |_, y| y * (1.0 - y),
        )
    }

    /// Notes `min |x - at|` on a recording tape.
    fn note_kink(&self, at: f32) {
        if self.requires_grad() {
            let m = self.value().data().iter().fold(f32::INFINITY, |m, &v| m.min((v - at).abs()));
            self.tape().note_kink_margin(m);
        }
    }

    pub fn relu(&self) -> Var<'t> {
        self.note_kink(0.0);
        self.pointwise(|v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f32) -> Var<'t> {
        self.note_kink(0.0);
        self.pointwise(
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// `y` if `y > 0`, else `a[c] * y`, with one learned slope per channel.
    pub fn prelu(&self, slope: &Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        let a = slope.value();
        if a.numel() != s.c {
            return Err(Error::ChannelMismatch {
                op: "prelu",
                expected: s.c,
                actual: a.numel(),
            });
        }
        self.note_kink(0.0);
        let a = a.data();
        let x = self.value();
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for (o, &v) in out.plane_mut(n, c).iter_mut().zip(x.plane(n, c)) {
                    *o = if v > 0.0 { v } else { a[c] * v };
                }
            }
        }
        Ok(self.tape().record(out, &[self, slope], Prelu))
    }

    fn reduce(&self, kind: ReduceKind) -> Var<'t> {
        let x = self.value();
        let s = x.shape();
        let value = match kind {
            ReduceKind::Sum => Tensor::scalar(x.sum_f64() as f32),
            ReduceKind::Mean => Tensor::scalar(x.mean_f64() as f32),
            ReduceKind::SumItems => {
                let sums = (0..s.n)
                    .map(|n| x.batch_item(n).iter().map(|&v| v as f64).sum::<f64>() as f32)
                    .collect();
                Tensor::from_vec(Shape { n: s.n, c: 1, h: 1, w: 1 }, sums).unwrap()
            }
            ReduceKind::MeanPlanes => {
                let means = (0..s.n * s.c)
                    .map(|i| {
                        let p = x.plane(i / s.c, i % s.c);
                        (p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64) as f32
                    })
                    .collect();
                Tensor::from_vec(Shape { n: s.n, c: s.c, h: 1, w: 1 }, means).unwrap()
            }
        };
        self.tape().record(value, &[self], Reduce { kind })
    }

    /// Sum of all elements (f64 accumulation) as a scalar.
    pub fn sum(&self) -> Var<'t> {
        self.reduce(ReduceKind::Sum)
    }

    pub fn mean(&self) -> Var<'t> {
        self.reduce(ReduceKind::Mean)
    }

    /// Per-item sums, shape `(n,1,1,1)`.
    pub fn sum_items(&self) -> Var<'t> {
        self.reduce(ReduceKind::SumItems)
    }

    /// Global average pooling, shape `(n,c,1,1)`.
    pub fn mean_planes(&self) -> Var<'t> {
        self.reduce(ReduceKind::MeanPlanes)
    }

    fn diff(&self, axis: Axis) -> Option<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        let out_shape = match axis {
            Axis::W if s.w > 1 => s.with_hw(s.h, s.w - 1),
            Axis::H if s.h > 1 => s.with_hw(s.h - 1, s.w),
            _ => return None,
        };
        let value = Tensor::from_fn(out_shape, |n, c, y, xx| match axis {
            Axis::W => x.at(n, c, y, xx + 1) - x.at(n, c, y, xx),
            Axis::H => x.at(n, c, y + 1, xx) - x.at(n, c, y, xx),
        });
        Some(self.tape().record(value, &[self], Diff(axis)))
    }

    /// Horizontal forward differences, `(n,c,h,w-1)`; `None` when `w == 1`.
    pub fn diff_w(&self) -> Option<Var<'t>> {
        self.diff(Axis::W)
    }

    /// Vertical forward differences, `(n,c,h-1,w)`; `None` when `h == 1`.
    pub fn diff_h(&self) -> Option<Var<'t>> {
        self.diff(Axis::H)
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::{Shape, Tensor};

    fn row(v: &[f32]) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1, v.len()).unwrap(), v.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0));
        let root = x.mul(&x).unwrap().sum();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_of_add_gives_ones() {
        let tape = Tape::new();
        let x = tape.input(row(&[1.0, -2.0, 0.5]));
        let y = tape.input(row(&[4.0, 0.0, 1.0]));
        let root = x.add(&y).unwrap().sum();
        let g = tape.backward(&root).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 3]);
        assert_eq!(g.wrt(&y).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn relu_and_prelu() {
        let tape = Tape::no_grad();
        let x = tape.constant(row(&[-1.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);

        let x = tape.constant(row(&[-2.0, 3.0]));
        let a = tape.constant(Tensor::scalar(0.25));
        assert_eq!(x.prelu(&a).unwrap().value().data(), &[-0.5, 3.0]);

        let zero = tape.constant(Tensor::scalar(0.0));
        let x = tape.constant(row(&[-3.0, -0.0, 0.0, 1.5, 7.0]));
        assert_eq!(x.prelu(&zero).unwrap().value(), x.relu().value());

        let two = tape.constant(Tensor::zeros(Shape::new(1, 2, 1, 1).unwrap()));
        assert!(x.prelu(&two).is_err());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.input(row(&[1.0, 2.0]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn constants_do_not_record() {
        let tape = Tape::new();
        let x = tape.constant(row(&[1.0, 2.0]));
        let y = x.square().sum();
        assert!(!y.requires_grad());
        assert!(tape.is_empty());
    }

    #[test]
    fn diff_shapes() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::from_fn(Shape::new(1, 1, 2, 3).unwrap(), |_, _, h, w| {
            (h * 10 + w) as f32
        }));
        assert_eq!(x.diff_w().unwrap().value().data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(x.diff_h().unwrap().value().data(), &[10.0, 10.0, 10.0]);
        let col = tape.constant(Tensor::zeros(Shape::new(1, 1, 3, 1).unwrap()));
        assert!(col.diff_w().is_none());
    }
}
