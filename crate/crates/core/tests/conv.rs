use enhance_core::ops::conv::{conv2d_direct, conv2d_transpose_direct};
use enhance_core::ops::{conv2d, conv2d_transpose, Conv2dSpec, ConvTranspose2dSpec};
use enhance_core::{Rng, Shape, Tape, Tensor};
use proptest::prelude::*;

fn normal(s: Shape, rng: &mut Rng) -> Tensor {
    Tensor::random_normal(s, 0.0, 1.0, rng).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// `<conv(x), y> == <x, conv_t(y)>` for the fast and reference paths.
    #[test]
    fn transposed_conv_is_adjoint(
        cin in 1usize..4, cout in 1usize..4, k in 1usize..6, stride in 1usize..3,
        pad_frac in 0usize..3, extra in 0usize..2, h in 1usize..7, w in 1usize..7, seed in 0u64..1000,
    ) {
        let pad = pad_frac.min(k - 1);
        let t = ConvTranspose2dSpec::new(cout, cin, k, stride, pad).with_extra_padding(extra).without_bias();
        prop_assume!(t.output_hw(h, w).is_ok());
        let c = t.adjoint();
        let (oh, ow) = t.output_hw(h, w).unwrap();
        let mut rng = Rng::new(seed);
        let x = normal(Shape::new(2, cin, oh, ow).unwrap(), &mut rng);
        let y = normal(Shape::new(2, cout, h, w).unwrap(), &mut rng);
        let wt = normal(t.weight_shape(), &mut rng);
        prop_assert_eq!(c.output_hw(oh, ow).unwrap(), (h, w));

        let lhs = conv2d_direct(&x, &c, &wt, None).unwrap().dot_f64(&y).unwrap();
        let rhs = x.dot_f64(&conv2d_transpose_direct(&y, &t, &wt, None).unwrap()).unwrap();
        prop_assert!(rel(lhs, rhs) < 1e-4, "direct {} vs {}", lhs, rhs);

        let tape = Tape::no_grad();
        let fx = conv2d(&tape.constant(x.clone()), &c, &tape.constant(wt.clone()), None).unwrap().to_tensor();
        let fy = conv2d_transpose(&tape.constant(y.clone()), &t, &tape.constant(wt), None).unwrap().to_tensor();
        let (lhs, rhs) = (fx.dot_f64(&y).unwrap(), x.dot_f64(&fy).unwrap());
        prop_assert!(rel(lhs, rhs) < 1e-4, "fast {} vs {}", lhs, rhs);
    }
}

#[test]
fn identity_kernel_reproduces_input() {
    let spec = Conv2dSpec::same(3, 3, 3).without_bias();
    let mut w = Tensor::zeros(spec.weight_shape());
    for c in 0..3 {
        w.set(c, c, 1, 1, 1.0);
    }
    let x = Tensor::random_uniform(Shape::new(2, 3, 9, 13).unwrap(), -1.0, 1.0, &mut Rng::new(1));
    let tape = Tape::no_grad();
    let y = conv2d(&tape.constant(x.clone()), &spec, &tape.constant(w), None).unwrap();
    assert_eq!(y.value().data(), x.data());
}

/// Interior of a constant-weight transposed conv on a constant input.
fn interior(k: usize) -> Vec<f32> {
    let spec = ConvTranspose2dSpec::new(1, 1, k, 2, 0).without_bias();
    let x = Tensor::full(Shape::new(1, 1, 8, 8).unwrap(), 1.0);
    let w = Tensor::full(spec.weight_shape(), 1.0);
    let y = conv2d_transpose_direct(&x, &spec, &w, None).unwrap();
    let s = y.shape();
    let (lo, hi) = (k, s.h - k);
    let mut v = Vec::new();
    for i in lo..hi {
        for j in lo..hi {
            v.push(y.at(0, 0, i, j));
        }
    }
    v
}

#[test]
fn checkerboard_needs_kernel_divisible_by_stride() {
    let even = interior(4);
    assert!(even.iter().all(|&v| v == even[0]), "k=4 interior not constant: {even:?}");
    let odd = interior(3);
    let (min, max) = odd.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(max > min, "k=3 interior unexpectedly constant");
    // Overlap counts alternate between 1, 2 and 4 taps.
    assert_eq!((min, max), (1.0, 4.0));
}

#[test]
fn even_kernel_same_and_odd_strided_shapes() {
    let same = Conv2dSpec::same(2, 3, 4);
    assert_eq!(same.output_hw(5, 7).unwrap(), (5, 7));
    let down = Conv2dSpec::new(2, 2, 3, 2, 0).with_extra_padding(1);
    assert_eq!(down.output_hw(12, 20).unwrap(), (6, 10));
    let up = ConvTranspose2dSpec::new(2, 2, 3, 2, 0).with_extra_padding(1);
    assert_eq!(up.output_hw(6, 10).unwrap(), (12, 20));
}
