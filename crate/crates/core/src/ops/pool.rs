use crate::autodiff::{BackwardCtx, BackwardOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct MaxPoolBackward {
    /// Flat input index of each output's maximum.
    argmax: Vec<usize>,
}

impl BackwardOp for MaxPoolBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let mut dx = Tensor::zeros(ctx.inputs[0].shape());
        let d = dx.data_mut();
        for (&i, &g) in self.argmax.iter().zip(ctx.grad.data()) {
            d[i] += g;
        }
        vec![Some(dx)]
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
pub fn max_pool2x2<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.h < 2 || s.w < 2 {
        return Err(Error::arg("max_pool2x2", format!("input {s} is smaller than 2x2")));
    }
    let os = s.with_hw(s.h / 2, s.w / 2);
    let xv = x.value();
    let mut out = Tensor::zeros(os);
    let mut argmax = Vec::with_capacity(os.numel());
    // Gap between the largest and second-largest value of each window.
    let mut margin = f32::INFINITY;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..os.h {
                for xx in 0..os.w {
                    let mut best = (f32::NEG_INFINITY, 0);
                    let mut second = f32::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = s.index(n, c, 2 * y + dy, 2 * xx + dx);
                            let v = xv.data()[i];
                            if v > best.0 {
                                second = best.0;
                                best = (v, i);
                            } else if v > second {
                                second = v;
                            }
                        }
                    }
                    margin = margin.min((best.0 - second) / 2.0);
                    out.set(n, c, y, xx, best.0);
                    argmax.push(best.1);
                }
            }
        }
    }
    if x.requires_grad() {
        x.tape().note_kink_margin(margin);
    }
    Ok(x.tape().record(out, &[x], MaxPoolBackward { argmax }))
}
