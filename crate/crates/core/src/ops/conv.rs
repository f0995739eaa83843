//! 2-D convolution and transposed convolution.
//!
//! Two implementations exist. `*_direct` are explicit loop nests kept as the
//! reference. The tape ops use im2col + `matrixmultiply::sgemm`, tiled over
//! output rows so full-HD activations never need a full column buffer.
//!
//! Batch items run in parallel on the current rayon pool. Weight gradients
//! are computed per item and then summed in item order, so results do not
//! depend on the thread count.

use rayon::prelude::*;

use crate::autodiff::{BackwardCtx, BackwardOp, ConvTrace, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Upper bound on im2col buffer size (floats) per tile.
const TILE_FLOATS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Zero padding before each spatial axis.
    pub padding: usize,
    /// Additional zero padding after each spatial axis, for "same" outputs
    /// with even kernels.
    pub extra_padding: usize,
    pub has_bias: bool,
}

impl Conv2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            extra_padding: 0,
            has_bias: true,
        }
    }

    /// Stride 1, shape-preserving: `(k-1)/2` padding before, the rest after.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let total = kernel.saturating_sub(1);
        Conv2dSpec::new(in_channels, out_channels, kernel, 1, total / 2).with_extra_padding(total % 2)
    }

    pub fn with_extra_padding(self, extra_padding: usize) -> Self {
        Conv2dSpec { extra_padding, ..self }
    }

    pub fn without_bias(self) -> Self {
        Conv2dSpec {
            has_bias: false,
            ..self
        }
    }

    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.out_channels,
            c: self.in_channels,
            h: self.kernel,
            w: self.kernel,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let out = |len: usize| {
            let padded = len + 2 * self.padding + self.extra_padding;
            (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
        };
        match (out(h), out(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::arg(
                "conv2d",
                format!(
                    "{h}x{w} input with kernel {} padding {} leaves no output",
                    self.kernel, self.padding
                ),
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::arg("conv2d", format!("degenerate spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Rows and columns cropped from the bottom/right in addition to `padding`.
    pub extra_padding: usize,
    pub has_bias: bool,
}

impl ConvTranspose2dSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvTranspose2dSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            extra_padding: 0,
            has_bias: true,
        }
    }

    pub fn with_extra_padding(self, extra_padding: usize) -> Self {
        ConvTranspose2dSpec { extra_padding, ..self }
    }

    pub fn without_bias(self) -> Self {
        ConvTranspose2dSpec {
            has_bias: false,
            ..self
        }
    }

    /// `(in, out, k, k)`: the same memory as the weight of the adjoint conv.
    pub fn weight_shape(&self) -> Shape {
        Shape {
            n: self.in_channels,
            c: self.out_channels,
            h: self.kernel,
            w: self.kernel,
        }
    }

    /// The strided convolution this operator is the adjoint of.
    pub fn adjoint(&self) -> Conv2dSpec {
        Conv2dSpec {
            in_channels: self.out_channels,
            out_channels: self.in_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
            extra_padding: self.extra_padding,
            has_bias: self.has_bias,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::arg("conv2d_transpose", format!("degenerate spec {self:?}")));
        }
        let out = |len: usize| {
            let full = (len - 1) * self.stride + self.kernel;
            let crop = 2 * self.padding + self.extra_padding;
            (full > crop).then(|| full - crop)
        };
        match (out(h), out(w)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::arg(
                "conv2d_transpose",
                format!("{h}x{w} input leaves no output"),
            )),
        }
    }
}

/// Geometry of one forward convolution `input (cin, ih, iw) -> output (cout, oh, ow)`.
#[derive(Clone, Copy, Debug)]
struct Geom {
    cin: usize,
    cout: usize,
    k: usize,
    s: usize,
    p: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn of(spec: &Conv2dSpec, ih: usize, iw: usize, oh: usize, ow: usize) -> Geom {
        Geom {
            cin: spec.in_channels,
            cout: spec.out_channels,
            k: spec.kernel,
            s: spec.stride,
            p: spec.padding,
            ih,
            iw,
            oh,
            ow,
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn in_len(&self) -> usize {
        self.cin * self.ih * self.iw
    }

    fn out_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    fn tile_rows(&self) -> usize {
        (TILE_FLOATS / (self.patch() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.tile_rows();
        let oh = self.oh;
        (0..oh).step_by(step).map(move |y0| (y0, (y0 + step).min(oh)))
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        // ix = ox*s + kx - p must satisfy 0 <= ix < iw.
        let lo = if kx >= self.p { 0 } else { (self.p - kx).div_ceil(self.s) };
        let lo = lo.min(self.ow);
        let hi = if self.iw + self.p > kx {
            ((self.iw + self.p - kx - 1) / self.s + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn input_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.s + ky) as isize - self.p as isize;
        (iy >= 0 && (iy as usize) < self.ih).then_some(iy as usize)
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!((m - 1) * rsc + (n - 1) * csc < c.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(g: &Geom, x: &[f32], y0: usize, y1: usize, col: &mut [f32]) {
    let t = (y1 - y0) * g.ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut col[row * t..(row + 1) * t];
                let (lo, hi) = g.valid_cols(kx);
                for (r, oy) in (y0..y1).enumerate() {
                    let d = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let Some(iy) = g.input_row(oy, ky) else {
                        d.fill(0.0);
                        continue;
                    };
                    let src = &plane[iy * g.iw..(iy + 1) * g.iw];
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let base = lo * g.s + kx - g.p;
                    if g.s == 1 {
                        d[lo..hi].copy_from_slice(&src[base..base + hi - lo]);
                    } else {
                        for (j, v) in d[lo..hi].iter_mut().enumerate() {
                            *v = src[base + j * g.s];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &Geom, col: &[f32], y0: usize, y1: usize, dx: &mut [f32]) {
    let t = (y1 - y0) * g.ow;
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.ih * g.iw..(ci + 1) * g.ih * g.iw];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &col[row * t..(row + 1) * t];
                let (lo, hi) = g.valid_cols(kx);
                for (r, oy) in (y0..y1).enumerate() {
                    let Some(iy) = g.input_row(oy, ky) else {
                        continue;
                    };
                    if lo == hi {
                        continue;
                    }
                    let s = &src[r * g.ow + lo..r * g.ow + hi];
                    let base = iy * g.iw + lo * g.s + kx - g.p;
                    if g.s == 1 {
                        for (d, &v) in plane[base..base + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, &v) in s.iter().enumerate() {
                            plane[base + j * g.s] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out = W * im2col(x)` for one batch item.
fn forward_item(g: &Geom, x: &[f32], w: &[f32], out: &mut [f32]) {
    let kk = g.patch();
    let plane = g.oh * g.ow;
    let mut col = vec![0.0f32; kk * g.tile_rows() * g.ow];
    for (y0, y1) in g.tiles() {
        let t = (y1 - y0) * g.ow;
        im2col(g, x, y0, y1, &mut col);
        gemm(
            g.cout,
            kk,
            t,
            w,
            kk,
            1,
            &col,
            t,
            1,
            0.0,
            &mut out[y0 * g.ow..],
            plane,
            1,
        );
    }
}

/// `dx += col2im(W^T * dout)` for one batch item.
fn input_grad_item(g: &Geom, dout: &[f32], w: &[f32], dx: &mut [f32]) {
    let kk = g.patch();
    let plane = g.oh * g.ow;
    let mut col = vec![0.0f32; kk * g.tile_rows() * g.ow];
    for (y0, y1) in g.tiles() {
        let t = (y1 - y0) * g.ow;
        gemm(
            kk,
            g.cout,
            t,
            w,
            1,
            kk,
            &dout[y0 * g.ow..],
            plane,
            1,
            0.0,
            &mut col,
            t,
            1,
        );
        col2im_add(g, &col, y0, y1, dx);
    }
}

/// `dW = dout * im2col(x)^T` for one batch item.
fn weight_grad_item(g: &Geom, x: &[f32], dout: &[f32]) -> Vec<f32> {
    let kk = g.patch();
    let plane = g.oh * g.ow;
    let mut dw = vec![0.0f32; g.cout * kk];
    let mut col = vec![0.0f32; kk * g.tile_rows() * g.ow];
    for (y0, y1) in g.tiles() {
        let t = (y1 - y0) * g.ow;
        im2col(g, x, y0, y1, &mut col);
        gemm(
            g.cout,
            t,
            kk,
            &dout[y0 * g.ow..],
            plane,
            1,
            &col,
            1,
            t,
            1.0,
            &mut dw,
            kk,
            1,
        );
    }
    dw
}

/// Per-item weight gradients summed in item order.
fn weight_grad(g: &Geom, n: usize, x: &[f32], dout: &[f32], x_len: usize, d_len: usize) -> Vec<f32> {
    let partials: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            weight_grad_item(
                g,
                &x[i * x_len..(i + 1) * x_len],
                &dout[i * d_len..(i + 1) * d_len],
            )
        })
        .collect();
    let mut iter = partials.into_iter();
    let mut acc = iter.next().expect("empty batch");
    for p in iter {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

fn add_bias(out: &mut Tensor, bias: &[f32]) {
    let s = out.shape();
    for n in 0..s.n {
        for (c, &b) in bias.iter().enumerate() {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v += b);
        }
    }
}

fn bias_grad(dout: &Tensor) -> Tensor {
    let s = dout.shape();
    let sums = (0..s.c)
        .map(|c| {
            (0..s.n)
                .map(|n| dout.plane(n, c).iter().map(|&v| v as f64).sum::<f64>())
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::from_vec(Shape { n: 1, c: s.c, h: 1, w: 1 }, sums).unwrap()
}

fn bias_shape(channels: usize) -> Shape {
    Shape {
        n: 1,
        c: channels,
        h: 1,
        w: 1,
    }
}

fn check_operands(
    op: &'static str,
    x: Shape,
    in_channels: usize,
    weight: Shape,
    expected_weight: Shape,
    bias: Option<Shape>,
    out_channels: usize,
    has_bias: bool,
) -> Result<()> {
    if x.c != in_channels {
        return Err(Error::ChannelMismatch {
            op,
            expected: in_channels,
            actual: x.c,
        });
    }
    if weight != expected_weight {
        return Err(Error::ShapeMismatch {
            op,
            left: expected_weight,
            right: weight,
        });
    }
    match (has_bias, bias) {
        (true, Some(b)) if b == bias_shape(out_channels) => Ok(()),
        (true, Some(b)) => Err(Error::ShapeMismatch {
            op,
            left: bias_shape(out_channels),
            right: b,
        }),
        (true, None) => Err(Error::arg(op, "spec has a bias but none was given")),
        (false, Some(_)) => Err(Error::arg(op, "bias given for a bias-free spec")),
        (false, None) => Ok(()),
    }
}

fn run_forward(g: &Geom, x: &Tensor, w: &Tensor, n: usize) -> Vec<f32> {
    let (il, ol) = (g.in_len(), g.out_len());
    let mut out = vec![0.0f32; n * ol];
    out.par_chunks_mut(ol)
        .zip(x.data().par_chunks(il))
        .for_each(|(o, xi)| forward_item(g, xi, w.data(), o));
    out
}

fn run_input_grad(g: &Geom, dout: &Tensor, w: &Tensor, n: usize) -> Vec<f32> {
    let (il, ol) = (g.in_len(), g.out_len());
    let mut dx = vec![0.0f32; n * il];
    dx.par_chunks_mut(il)
        .zip(dout.data().par_chunks(ol))
        .for_each(|(d, gi)| input_grad_item(g, gi, w.data(), d));
    dx
}

struct ConvBackward {
    geom: Geom,
    has_bias: bool,
    transposed: bool,
}

impl BackwardOp for ConvBackward {
    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Tensor>> {
        let g = &self.geom;
        let x = &ctx.inputs[0];
        let w = &ctx.inputs[1];
        let dout = ctx.grad;
        let n = x.shape().n;
        let (dx, dw) = if !self.transposed {
            let dx = ctx.needs[0].then(|| {
                Tensor::from_vec(x.shape(), run_input_grad(g, dout, w, n)).unwrap()
            });
            let dw = ctx.needs[1].then(|| {
                let v = weight_grad(g, n, x.data(), dout.data(), g.in_len(), g.out_len());
                Tensor::from_vec(w.shape(), v).unwrap()
            });
            (dx, dw)
        } else {
            // Geometry is the adjoint conv: its input is our output.
            let dx = ctx.needs[0].then(|| {
                Tensor::from_vec(x.shape(), run_forward(g, dout, w, n)).unwrap()
            });
            let dw = ctx.needs[1].then(|| {
                let v = weight_grad(g, n, dout.data(), x.data(), g.in_len(), g.out_len());
                Tensor::from_vec(w.shape(), v).unwrap()
            });
            (dx, dw)
        };
        let mut grads = vec![dx, dw];
        if self.has_bias {
            grads.push(ctx.needs[2].then(|| bias_grad(dout)));
        }
        grads
    }
}

/// Cross-correlation with stride and zero padding; weight `(out, in, k, k)`,
/// bias `(1, out, 1, 1)`.
pub fn conv2d<'t>(
    x: &Var<'t>,
    spec: &Conv2dSpec,
    weight: &Var<'t>,
    bias: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    check_operands(
        "conv2d",
        xs,
        spec.in_channels,
        weight.shape(),
        spec.weight_shape(),
        bias.map(Var::shape),
        spec.out_channels,
        spec.has_bias,
    )?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let g = Geom::of(spec, xs.h, xs.w, oh, ow);
    let out_shape = Shape {
        n: xs.n,
        c: spec.out_channels,
        h: oh,
        w: ow,
    };
    let mut out = Tensor::from_vec(out_shape, run_forward(&g, x.value(), weight.value(), xs.n))?;
    if let Some(b) = bias {
        add_bias(&mut out, b.value().data());
    }
    x.tape().trace_conv(ConvTrace {
        transposed: false,
        input: xs,
        output: out_shape,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        extra_padding: spec.extra_padding,
        bias: spec.has_bias,
    });
    let op = ConvBackward {
        geom: g,
        has_bias: spec.has_bias,
        transposed: false,
    };
    Ok(match bias {
        Some(b) => x.tape().record(out, &[x, weight, b], op),
        None => x.tape().record(out, &[x, weight], op),
    })
}

/// Fractionally strided convolution: the linear adjoint of the matching
/// [`conv2d`]. Weight `(in, out, k, k)`.
pub fn conv2d_transpose<'t>(
    x: &Var<'t>,
    spec: &ConvTranspose2dSpec,
    weight: &Var<'t>,
    bias: Option<&Var<'t>>,
) -> Result<Var<'t>> {
    let xs = x.shape();
    check_operands(
        "conv2d_transpose",
        xs,
        spec.in_channels,
        weight.shape(),
        spec.weight_shape(),
        bias.map(Var::shape),
        spec.out_channels,
        spec.has_bias,
    )?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let g = Geom::of(&spec.adjoint(), oh, ow, xs.h, xs.w);
    let out_shape = Shape {
        n: xs.n,
        c: spec.out_channels,
        h: oh,
        w: ow,
    };
    let mut out = Tensor::from_vec(out_shape, run_input_grad(&g, x.value(), weight.value(), xs.n))?;
    if let Some(b) = bias {
        add_bias(&mut out, b.value().data());
    }
    x.tape().trace_conv(ConvTrace {
        transposed: true,
        input: xs,
        output: out_shape,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        extra_padding: spec.extra_padding,
        bias: spec.has_bias,
    });
    let op = ConvBackward {
        geom: g,
        has_bias: spec.has_bias,
        transposed: true,
    };
    Ok(match bias {
        Some(b) => x.tape().record(out, &[x, weight, b], op),
        None => x.tape().record(out, &[x, weight], op),
    })
}

/// Reference convolution by explicit loops.
pub fn conv2d_direct(x: &Tensor, spec: &Conv2dSpec, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let xs = x.shape();
    check_operands(
        "conv2d_direct",
        xs,
        spec.in_channels,
        weight.shape(),
        spec.weight_shape(),
        bias.map(Tensor::shape),
        spec.out_channels,
        spec.has_bias,
    )?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    let out = Tensor::from_fn(xs.with_c(spec.out_channels).with_hw(oh, ow), |n, co, oy, ox| {
        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
        for ci in 0..spec.in_channels {
            for ky in 0..k {
                let iy = oy as isize * s + ky - p;
                if iy < 0 || iy >= xs.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = ox as isize * s + kx - p;
                    if ix < 0 || ix >= xs.w as isize {
                        continue;
                    }
                    acc += weight.at(co, ci, ky as usize, kx as usize)
                        * x.at(n, ci, iy as usize, ix as usize);
                }
            }
        }
        acc
    });
    Ok(out)
}

/// Reference transposed convolution by explicit scatter loops.
pub fn conv2d_transpose_direct(
    x: &Tensor,
    spec: &ConvTranspose2dSpec,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let xs = x.shape();
    check_operands(
        "conv2d_transpose_direct",
        xs,
        spec.in_channels,
        weight.shape(),
        spec.weight_shape(),
        bias.map(Tensor::shape),
        spec.out_channels,
        spec.has_bias,
    )?;
    let (oh, ow) = spec.output_hw(xs.h, xs.w)?;
    let mut out = Tensor::zeros(xs.with_c(spec.out_channels).with_hw(oh, ow));
    let (k, s, p) = (spec.kernel as isize, spec.stride as isize, spec.padding as isize);
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for iy in 0..xs.h as isize {
                for ix in 0..xs.w as isize {
                    let v = x.at(n, ci, iy as usize, ix as usize);
                    for co in 0..spec.out_channels {
                        for ky in 0..k {
                            let oy = iy * s + ky - p;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ox = ix * s + kx - p;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let i = out.shape().index(n, co, oy as usize, ox as usize);
                                out.data_mut()[i] += v * weight.at(ci, co, ky as usize, kx as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.data());
    }
    Ok(out)
}
