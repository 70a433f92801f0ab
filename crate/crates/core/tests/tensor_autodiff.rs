mod common;

use common::*;
use madf_core::autodiff::{grad_check, Activation, Tape};
use madf_core::tensor::conv::{conv2d_backward, conv2d_forward, conv_transpose2d_forward};
use madf_core::{ConvSpec, Error, Shape4, Tensor4};
use proptest::prelude::*;

#[test]
fn conv2d_scalar_product() {
    let spec = ConvSpec::new(1, 1, 1, 1, 0).unwrap();
    let y = conv2d_forward(&t(1, 1, 1, 1, vec![3.0]), &t(1, 1, 1, 1, vec![2.0]), None, &spec).unwrap();
    assert_eq!(y.data(), &[6.0]);
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let x = randn(Shape4::new(2, 3, 5, 7), 1);
    let spec = ConvSpec::new(3, 3, 3, 1, 1).unwrap();
    let w = Tensor4::from_fn(spec.weight_shape(), |co, ci, kh, kw| f64::from(u8::from(co == ci && kh == 1 && kw == 1)));
    let y = conv2d_forward(&x, &w, None, &spec).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    let x = randn(Shape4::new(1, 2, 5, 5), 2);
    let w = randn(Shape4::new(3, 2, 3, 3), 3);
    let spec = ConvSpec::new(2, 3, 3, 2, 1).unwrap();
    let y = conv2d_forward(&x, &w, None, &spec).unwrap();
    let oracle = naive_conv2d(&x, &w, 2, 1);
    assert_eq!(y.shape(), oracle.shape());
    assert!(y.max_abs_diff(&oracle) <= 1e-12);
}

#[test]
fn conv2d_shape_errors() {
    let spec = ConvSpec::new(2, 3, 3, 1, 1).unwrap();
    let x = randn(Shape4::new(1, 4, 5, 5), 4);
    assert!(matches!(conv2d_forward(&x, &randn(spec.weight_shape(), 5), None, &spec), Err(Error::Config(_))));
    let x = randn(Shape4::new(1, 2, 5, 5), 4);
    assert!(matches!(conv2d_forward(&x, &randn(Shape4::new(3, 2, 5, 5), 5), None, &spec), Err(Error::Config(_))));
    let mut bad = x.clone();
    bad.data_mut()[3] = f64::NAN;
    assert!(matches!(conv2d_forward(&bad, &randn(spec.weight_shape(), 5), None, &spec), Err(Error::Numeric(_))));
}

#[test]
fn transpose_single_pixel_scatters_kernel_taps() {
    let spec = ConvSpec::new(1, 1, 4, 2, 1).unwrap();
    let x = t(1, 1, 1, 1, vec![1.0]);
    let w = Tensor4::from_fn(Shape4::new(1, 1, 4, 4), |_, _, kh, kw| (kh * 4 + kw) as f64 + 1.0);
    let y = conv_transpose2d_forward(&x, &w, None, &spec).unwrap();
    let oracle = naive_conv_transpose2d(&x, &w, 2, 1);
    assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
    assert_eq!(y, oracle);
    // Output (y, x) receives tap (y + pad, x + pad).
    assert_eq!(y.data(), &[6.0, 7.0, 10.0, 11.0]);

    let ones = Tensor4::full(Shape4::new(1, 1, 4, 4), 1.0);
    let y = conv_transpose2d_forward(&x, &ones, None, &spec).unwrap();
    assert_eq!(y.data(), &[1.0; 4]);
}

#[test]
fn transpose_of_zeros_is_zero_and_doubles_size() {
    let spec = ConvSpec::new(3, 2, 4, 2, 1).unwrap();
    let y = conv_transpose2d_forward(&Tensor4::zeros(Shape4::new(2, 3, 4, 5)), &randn(spec.transpose_weight_shape(), 6), None, &spec)
        .unwrap();
    assert_eq!(y.shape(), Shape4::new(2, 2, 8, 10));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn transpose_forward_is_conv_backward_data() {
    let spec = ConvSpec::new(3, 4, 4, 2, 1).unwrap();
    let x = randn(Shape4::new(2, 3, 8, 6), 7);
    let w = randn(spec.weight_shape(), 8);
    let g = randn(Shape4::new(2, 4, 4, 3), 9);
    let back = conv2d_backward(&x, &w, &g, &spec, true, false, false).dx.unwrap();
    // The same weight tensor read as (c_in, c_out) for the adjoint map.
    let tspec = ConvSpec::new(4, 3, 4, 2, 1).unwrap();
    let fwd = conv_transpose2d_forward(&g, &w, None, &tspec).unwrap();
    assert!(fwd.max_abs_diff(&back) <= 1e-12);
    assert!(fwd.max_abs_diff(&naive_conv_transpose2d(&g, &w, 2, 1)) <= 1e-12);
}

fn scalar_act(v: f64, kind: Activation) -> f64 {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(1, 1, 1, 1, vec![v]));
    let y = tape.activation(x, kind);
    tape.value(y).data()[0]
}

#[test]
fn activation_values_and_slope() {
    assert_eq!(scalar_act(-1.5, Activation::Relu), 0.0);
    assert_eq!(scalar_act(-1.0, Activation::LeakyRelu), -0.2);
    assert_eq!(scalar_act(3.0, Activation::LeakyRelu), 3.0);
    assert!((scalar_act(0.0, Activation::Sigmoid) - 0.5).abs() < 1e-15);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(1, 1, 1, 1, vec![2.0]), true);
    let y = tape.leaky_relu(x);
    let g = tape.backward(y).unwrap().wrt(x);
    let h = 1e-5;
    let fd = (scalar_act(2.0 + h, Activation::LeakyRelu) - scalar_act(2.0 - h, Activation::LeakyRelu)) / (2.0 * h);
    assert_eq!(g.data(), &[1.0]);
    assert!((fd - 1.0).abs() < 1e-9);
}

#[test]
fn concat_dims_gradients_and_round_trip() {
    let a = randn(Shape4::new(1, 2, 4, 4), 10);
    let b = randn(Shape4::new(1, 3, 4, 4), 11);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.leaf(a.clone(), true), tape.constant(b.clone()));
    let c = tape.concat_channels(va, vb).unwrap();
    assert_eq!(tape.shape(c), Shape4::new(1, 5, 4, 4));
    assert_eq!(tape.value(c).channel_slice(0, 2).unwrap(), a);
    assert_eq!(tape.value(c).channel_slice(2, 3).unwrap(), b);
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap().wrt(va);
    assert!(g.data().iter().all(|&v| v == 1.0));

    let z = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 4, 5)));
    assert!(matches!(tape.concat_channels(va, z), Err(Error::Config(_))));
}

#[test]
fn upsample_replicates_and_block_sums() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(1, 1, 1, 1, vec![5.0]), true);
    let y = tape.upsample_nearest2x(x);
    assert_eq!(tape.value(y).data(), &[5.0; 4]);
    let s = tape.sum(y);
    assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[4.0]);

    let x0 = randn(Shape4::new(2, 3, 3, 4), 12);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(x0.clone());
    let y = tape.upsample_nearest2x(x);
    let oracle = Tensor4::from_fn(Shape4::new(2, 3, 6, 8), |n, c, yy, xx| x0.at(n, c, yy / 2, xx / 2));
    assert_eq!(tape.value(y), &oracle);
}

#[test]
fn mean_backward_and_reachability() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn(Shape4::new(1, 2, 2, 2), 13), true);
    let other = tape.leaf(randn(Shape4::new(1, 1, 2, 2), 14), true);
    let other_sum = tape.sum(other);
    let loss = tape.mean(x);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.wrt(x).data().iter().all(|&g| g == 1.0 / 8.0));
    assert!(grads.get(other).is_none());
    assert!(grads.get(other_sum).is_none());
    assert!(grads.wrt(other).data().iter().all(|&g| g == 0.0));
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(randn(Shape4::new(1, 1, 2, 2), 15), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn composite_relu_conv_matches_central_differences() {
    let spec = ConvSpec::new(2, 3, 3, 1, 1).unwrap();
    let inputs = [randn(Shape4::new(2, 2, 5, 5), 16), randn(spec.weight_shape(), 17)];
    let r = grad_check(&inputs, 1e-5, |tape, v| {
        let y = tape.conv2d(v[0], v[1], None, spec)?;
        let a = tape.relu(y);
        Ok(tape.sum(a))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn single_threaded_forward_is_bitwise_deterministic() {
    let spec = ConvSpec::new(3, 4, 3, 2, 1).unwrap();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(randn(Shape4::new(2, 3, 9, 9), 18).cast());
        let w = tape.constant(randn(spec.weight_shape(), 19).cast());
        let y = tape.conv2d(x, w, None, spec).unwrap();
        let z = tape.leaky_relu(y);
        tape.value(z).clone()
    };
    assert_eq!(run(), run());
}

fn conv_case() -> impl Strategy<Value = (Shape4, ConvSpec, u64)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..3, 0usize..2, 3usize..8, 3usize..8, any::<u64>()).prop_filter_map(
        "kernel larger than padded input",
        |(n, ci, co, k, s, pad, h, w, seed)| {
            let spec = ConvSpec::new(ci, co, k, s, pad).ok()?;
            (h + 2 * pad >= k && w + 2 * pad >= k).then_some((Shape4::new(n, ci, h, w), spec, seed))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_is_linear((shape, spec, seed) in conv_case(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let (x, y) = (randn(shape, seed), randn(shape, seed ^ 1));
        let w = randn(spec.weight_shape(), seed ^ 2);
        let mix = Tensor4::from_vec(shape, x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = conv2d_forward(&mix, &w, None, &spec).unwrap();
        let (cx, cy) = (conv2d_forward(&x, &w, None, &spec).unwrap(), conv2d_forward(&y, &w, None, &spec).unwrap());
        let rhs = Tensor4::from_vec(lhs.shape(), cx.data().iter().zip(cy.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn conv2d_backward_data_is_adjoint((shape, spec, seed) in conv_case()) {
        let x = randn(shape, seed);
        let w = randn(spec.weight_shape(), seed ^ 3);
        let y = conv2d_forward(&x, &w, None, &spec).unwrap();
        let g = randn(y.shape(), seed ^ 4);
        let dx = conv2d_backward(&x, &w, &g, &spec, true, false, false).dx.unwrap();
        prop_assert!((y.dot(&g) - x.dot(&dx)).abs() <= 1e-10 * (1.0 + y.dot(&g).abs()));
        prop_assert!(y.max_abs_diff(&naive_conv2d(&x, &w, spec.s, spec.pad)) <= 1e-12);
    }

    #[test]
    fn conv_and_transpose_pass_grad_check((shape, spec, seed) in conv_case()) {
        let inputs = [randn(shape, seed), randn(spec.weight_shape(), seed ^ 5), randn(Shape4::new(1, spec.c_out, 1, 1), seed ^ 6)];
        let r = grad_check(&inputs, 1e-4, |tape, v| {
            let y = tape.conv2d(v[0], v[1], Some(v[2]), spec)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);

        let tspec = ConvSpec::new(spec.c_in, spec.c_out, spec.k.max(spec.s), spec.s, 0).unwrap();
        let inputs = [randn(shape, seed ^ 7), randn(tspec.transpose_weight_shape(), seed ^ 8)];
        let r = grad_check(&inputs, 1e-4, |tape, v| {
            let y = tape.conv_transpose2d(v[0], v[1], None, tspec)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.sum(sq))
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }

    #[test]
    fn elementwise_ops_pass_grad_check(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let shape = Shape4::new(n, c, 2 * h, 2 * w);
        let inputs = [randn(shape, seed), randn(shape, seed ^ 9)];
        let r = grad_check(&inputs, 1e-4, |tape, v| {
            let s = tape.activation(v[0], Activation::Sigmoid);
            let cat = tape.concat_channels(s, v[1])?;
            let up = tape.upsample_nearest2x(cat);
            let pooled = tape.avg_pool2x(up)?;
            let prod = tape.mul(pooled, pooled)?;
            Ok(tape.mean(prod))
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-5, "{:?}", r);
    }
}
