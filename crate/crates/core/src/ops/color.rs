use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rec. 601 luma weights for R, G, B.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Luma of a 3-channel tensor as a plain tensor.
pub fn luma(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.c != 3 {
        return Err(Error::ChannelMismatch {
            op: "grayscale",
            expected: 3,
            actual: s.c,
        });
    }
    let mut out = Tensor::zeros(s.with_c(1));
    for n in 0..s.n {
        let (r, g, b) = (x.plane(n, 0), x.plane(n, 1), x.plane(n, 2));
        for (i, o) in out.plane_mut(n, 0).iter_mut().enumerate() {
            *o = LUMA[0] * r[i] + LUMA[1] * g[i] + LUMA[2] * b[i];
        }
    }
    Ok(out)
}

struct GrayBackward;

impl BackwardOp for GrayBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let s = ctx.inputs[0].shape();
        let g = ctx.grad;
        let out = Tensor::from_fn(s, |n, c, h, w| LUMA[c] * g.at(n, 0, h, w));
        vec![Some(out)]
    }
}

/// `0.299 R + 0.587 G + 0.114 B`, one output channel.
pub fn grayscale<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let out = luma(x.value())?;
    Ok(x.tape().record(out, &[x], GrayBackward))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Shape;

    fn pixel(r: f32, g: f32, b: f32) -> Tensor {
        Tensor::from_vec(Shape::new(1, 3, 1, 1).unwrap(), vec![r, g, b]).unwrap()
    }

    #[test]
    fn reference_colors() {
        let tape = Tape::no_grad();
        let gray = |t| grayscale(&tape.constant(t)).unwrap().item();
        assert!((gray(pixel(1.0, 1.0, 1.0)) - 1.0).abs() < 1e-6);
        assert_eq!(gray(pixel(0.0, 1.0, 0.0)), 0.587);
        for v in [0.0, 0.25, 0.5, 0.9] {
            assert!((gray(pixel(v, v, v)) - v).abs() < 1e-6);
        }
    }

    #[test]
    fn coefficients_sum_to_one() {
        assert!((LUMA.iter().sum::<f32>() - 1.0).abs() <= f32::EPSILON);
    }

    #[test]
    fn requires_three_channels() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 2, 2).unwrap()));
        assert!(grayscale(&x).is_err());
    }
}
