mod common;

use common::*;
use madf_core::autodiff::Tape;
use madf_core::checks::run_suite;
use madf_core::layers::{BnState, NORM_EPS};
use madf_core::model::flops::{conv_multiplies, madf_multiplies};
use madf_core::model::{
    count_flops, dump_first_layer_kernels, recovery_block, refine_block, Mode, Model, ModelConfig, RecoveryBlockParams,
    RefineNorm,
};
use madf_core::{ConvSpec, Error, Shape4, Tensor4};
use proptest::prelude::*;

fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn concat(a: &Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    Tensor4::from_fn(Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w), |n, c, y, x| {
        if c < sa.c {
            a.at(n, c, y, x)
        } else {
            b.at(n, c - sa.c, y, x)
        }
    })
}

fn plus_bias(x: Tensor4<f64>, b: &Tensor4<f64>) -> Tensor4<f64> {
    Tensor4::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, xx) + b.data()[c])
}

/// Zero-filled damaged image and its mask.
fn inputs(n: usize, h: usize, w: usize, seed: u64) -> (Tensor4<f64>, Tensor4<f64>) {
    let mask = random_mask(n, h, w, 0.3, seed);
    let img = randn(Shape4::new(n, 3, h, w), seed ^ 1).map(|v| 0.5 + 0.2 * v);
    let damaged = Tensor4::from_fn(img.shape(), |ni, c, y, x| img.at(ni, c, y, x) * mask.at(ni, 0, y, x));
    (damaged, mask)
}

#[test]
fn desk_preset_reaches_four_by_four() {
    let c = ModelConfig::desk();
    assert_eq!((c.levels, c.refinements, c.input_hw), (4, 2, (64, 64)));
    assert_eq!(c.level_hw(64, 64, 4), (4, 4));
    let m = Model::<f32>::build(c, 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::zeros(Shape4::new(1, 3, 64, 64)));
    let mk = tape.constant(Tensor4::full(Shape4::new(1, 1, 64, 64), 1.0));
    let pass = m.forward(&mut tape, x, mk, Mode::Eval).unwrap();
    let deepest = pass.encoder.levels.last().unwrap();
    assert_eq!(tape.shape(deepest.image), Shape4::new(1, 128, 4, 4));
    assert_eq!(tape.shape(deepest.lifted), Shape4::new(1, 512, 4, 4));
}

#[test]
fn full_preset_channel_ladders() {
    let c = ModelConfig::full();
    assert_eq!(c.levels, 7);
    let ladder: Vec<usize> = (1..=7).map(|l| c.image_channels(l)).collect();
    assert_eq!(ladder, [32, 64, 128, 128, 128, 128, 128]);
    assert!((1..=7).all(|l| c.mask_channels_at(l) == 16));
    let dec: Vec<usize> = (1..=7).map(|l| c.decoder_width(l)).collect();
    assert_eq!(dec, [64, 128, 256, 512, 512, 512, 512]);
    assert_eq!(c.kernel(1), 7);
    Model::<f32>::build(c, 0).unwrap();
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::<f32>::build(ModelConfig::desk(), 7).unwrap();
    let b = Model::<f32>::build(ModelConfig::desk(), 7).unwrap();
    let c = Model::<f32>::build(ModelConfig::desk(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn weights_follow_init_distribution() {
    let m = Model::<f64>::build(ModelConfig::desk(), 3).unwrap();
    let w = &m.params().get("rec.3.fuse.w").unwrap().value;
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-3);
    assert!((var.sqrt() - 0.01).abs() < 1e-3);
    assert!(m.params().get("rec.3.fuse.b").unwrap().value.data().iter().all(|&v| v == 0.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = ModelConfig::desk();
    c.levels = 1;
    c.kernels = vec![7];
    assert!(matches!(Model::<f32>::build(c, 0), Err(Error::Config(_))));
    // Seven halvings of a 64x64 input leave nothing for the deepest kernels.
    let mut c = ModelConfig::desk();
    c.levels = 7;
    c.kernels = vec![7, 5, 3, 3, 3, 3, 3];
    assert!(Model::<f32>::build(c, 0).is_err());
}

#[test]
fn all_valid_mask_gives_spatially_constant_kernels() {
    let m = Model::<f64>::build(ModelConfig::desk(), 1).unwrap();
    let fields = m.kernel_fields(&Tensor4::full(Shape4::new(2, 1, 64, 64), 1.0)).unwrap();
    assert_eq!(fields.len(), 4);
    for f in &fields {
        assert_eq!(f.spatial_spread(), 0.0);
    }
    let holed = m.kernel_fields(&random_mask(1, 64, 64, 0.3, 2)).unwrap();
    assert!(holed[0].spatial_spread() > 0.0);
}

#[test]
fn all_hole_mask_gives_zero_image_features() {
    let m = Model::<f64>::build(ModelConfig::desk(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::zeros(Shape4::new(1, 3, 64, 64)));
    let mk = tape.constant(Tensor4::zeros(Shape4::new(1, 1, 64, 64)));
    let pass = m.forward(&mut tape, x, mk, Mode::Eval).unwrap();
    for lvl in &pass.encoder.levels {
        assert!(tape.value(lvl.image).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encoder_dims_follow_levels() {
    let c = ModelConfig::desk();
    let m = Model::<f64>::build(c.clone(), 1).unwrap();
    let (x0, m0) = inputs(2, 32, 48, 3);
    let mut tape = Tape::new();
    let (x, mk) = (tape.constant(x0), tape.constant(m0));
    let pass = m.forward(&mut tape, x, mk, Mode::Eval).unwrap();
    for (l, lvl) in pass.encoder.levels.iter().enumerate() {
        let (h, w) = (32 >> l, 48 >> l);
        assert_eq!(tape.shape(lvl.image), Shape4::new(2, c.image_channels(l), h, w));
        if l > 0 {
            assert_eq!(tape.shape(lvl.mask), Shape4::new(2, 16, h, w));
            let d = c.image_channels(l - 1) * c.kernel(l).pow(2) * c.image_channels(l);
            assert_eq!(tape.shape(lvl.kernels.unwrap()), Shape4::new(2, d, h, w));
        }
    }
}

#[test]
fn non_binary_mask_is_rejected() {
    let m = Model::<f64>::build(ModelConfig::micro(), 1).unwrap();
    let mut mask = Tensor4::full(Shape4::new(1, 1, 8, 8), 1.0);
    mask.data_mut()[5] = 0.5;
    assert!(matches!(m.infer(&Tensor4::zeros(Shape4::new(1, 3, 8, 8)), &mask), Err(Error::Validation(_))));
}

#[test]
fn recovery_block_matches_composed_oracle() {
    let r0 = randn(Shape4::new(2, 6, 3, 4), 10);
    let u0 = randn(Shape4::new(2, 5, 6, 8), 11);
    let (upw, upb) = (randn(Shape4::new(6, 4, 4, 4), 12), randn(Shape4::new(1, 4, 1, 1), 13));
    let (fw, fb) = (randn(Shape4::new(4, 9, 3, 3), 14), randn(Shape4::new(1, 4, 1, 1), 15));
    let mut tape = Tape::new();
    let p = RecoveryBlockParams {
        up_w: tape.constant(upw.clone()),
        up_b: tape.constant(upb.clone()),
        fuse_w: tape.constant(fw.clone()),
        fuse_b: tape.constant(fb.clone()),
    };
    let (r, u) = (tape.constant(r0.clone()), tape.constant(u0.clone()));
    let y = recovery_block(&mut tape, r, u, &p).unwrap();

    let up = plus_bias(naive_conv_transpose2d(&r0, &upw, 2, 1), &upb);
    let oracle = plus_bias(naive_conv2d(&concat(&up, &u0), &fw, 1, 1), &fb).map(lrelu);
    assert_eq!(tape.shape(y), Shape4::new(2, 4, 6, 8));
    assert!(tape.value(y).max_abs_diff(&oracle) <= 1e-12);

    let bad = tape.constant(randn(Shape4::new(2, 5, 5, 8), 16));
    assert!(matches!(recovery_block(&mut tape, r, bad, &p), Err(Error::Config(_))));
}

#[test]
fn recovery_block_desk_shapes_and_zero_inputs() {
    let mut tape = Tape::<f32>::new();
    let p = RecoveryBlockParams {
        up_w: tape.constant(randn(Shape4::new(512, 256, 4, 4), 1).cast()),
        up_b: tape.constant(Tensor4::zeros(Shape4::new(1, 256, 1, 1))),
        fuse_w: tape.constant(randn(Shape4::new(256, 512, 3, 3), 2).cast()),
        fuse_b: tape.constant(Tensor4::zeros(Shape4::new(1, 256, 1, 1))),
    };
    let r = tape.constant(Tensor4::zeros(Shape4::new(1, 512, 4, 4)));
    let u = tape.constant(Tensor4::zeros(Shape4::new(1, 256, 8, 8)));
    let y = recovery_block(&mut tape, r, u, &p).unwrap();
    assert_eq!(tape.shape(y), Shape4::new(1, 256, 8, 8));
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn refine_block_batch_variant_matches_composed_oracle() {
    let f0 = randn(Shape4::new(2, 3, 3, 3), 20);
    let g0 = randn(Shape4::new(2, 4, 6, 6), 21);
    let w0 = randn(Shape4::new(5, 7, 3, 3), 22);
    let (ga, be) = (randn(Shape4::new(1, 5, 1, 1), 23), randn(Shape4::new(1, 5, 1, 1), 24));
    let mut tape = Tape::new();
    let (f, g, w) = (tape.constant(f0.clone()), tape.constant(g0.clone()), tape.constant(w0.clone()));
    let (gamma, beta) = (tape.constant(ga.clone()), tape.constant(be.clone()));
    let mut bn = BnState::new(5);
    let y = refine_block(&mut tape, f, g, w, RefineNorm::Batch { gamma, beta, bn: &mut bn }, true).unwrap();

    let up = Tensor4::from_fn(Shape4::new(2, 3, 6, 6), |n, c, yy, x| f0.at(n, c, yy / 2, x / 2));
    let xhat = naive_batch_norm(&naive_conv2d(&concat(&up, &g0), &w0, 1, 1), NORM_EPS);
    let oracle = Tensor4::from_fn(xhat.shape(), |n, c, yy, x| lrelu(ga.data()[c] * xhat.at(n, c, yy, x) + be.data()[c]));
    assert!(tape.value(y).max_abs_diff(&oracle) <= 1e-12);

    let wrong = tape.constant(randn(Shape4::new(2, 4, 5, 6), 25));
    let (gamma, beta) = (tape.constant(ga), tape.constant(be));
    assert!(matches!(
        refine_block(&mut tape, f, wrong, w, RefineNorm::Batch { gamma, beta, bn: &mut bn }, true),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_yields_k_plus_one_images_of_input_size() {
    for k in [0, 1, 2, 3] {
        let m = Model::<f64>::build(ModelConfig::micro().with_refinements(k), 4).unwrap();
        let (x, mk) = inputs(2, 8, 8, 5);
        let outs = m.infer(&x, &mk).unwrap();
        assert_eq!(outs.len(), k + 1);
        assert!(outs.iter().all(|o| o.shape() == Shape4::new(2, 3, 8, 8)));
    }
}

#[test]
fn baseline_has_no_refinement_or_normalization_parameters() {
    let m = Model::<f32>::build(ModelConfig::desk().with_refinements(0), 0).unwrap();
    assert!(m.params().iter().all(|p| !p.name.starts_with("ref") && !p.name.contains(".pn.") && !p.name.contains(".bn.")));
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::zeros(Shape4::new(2, 3, 64, 64)));
    let mk = tape.constant(Tensor4::full(Shape4::new(2, 1, 64, 64), 1.0));
    let pass = m.forward(&mut tape, x, mk, Mode::Train).unwrap();
    assert!(pass.bn_updates.is_empty());
    assert_eq!(pass.decoders.images.len(), 1);
}

#[test]
fn forward_is_bitwise_deterministic() {
    let m = Model::<f32>::build(ModelConfig::desk(), 9).unwrap();
    let (x, mk) = inputs(2, 64, 64, 6);
    let (x, mk) = (x.cast::<f32>(), mk.cast::<f32>());
    assert_eq!(m.infer(&x, &mk).unwrap(), m.infer(&x, &mk).unwrap());
}

#[test]
fn single_layer_flops_by_formula() {
    let spec = ConvSpec::new(1, 1, 3, 1, 1).unwrap();
    assert_eq!(conv_multiplies(&spec, 4, 4), 144);
    let spec = ConvSpec::new(3, 32, 7, 2, 3).unwrap();
    let d = 3 * 49 * 32;
    assert_eq!(madf_multiplies(&spec, 16, 32, 32), (32 * 32 * 32 * 3 * 49 + 32 * 32 * 16 * d) as u64);
}

#[test]
fn flops_are_additive_and_monotone() {
    for base in [ModelConfig::desk(), ModelConfig::full()] {
        let (h, w) = base.input_hw;
        let k0 = count_flops(&base.clone().with_refinements(0), h, w).unwrap();
        let k2 = count_flops(&base.clone().with_refinements(2), h, w).unwrap();
        assert_eq!(k2.refinements.len(), 2);
        assert_eq!(k2.refinements[0], k2.refinements[1]);
        assert_eq!(k2.total(), k0.total() + 2 * k2.refinements[0]);
        let mut last = 0;
        for k in 0..4 {
            let t = count_flops(&base.clone().with_refinements(k), h, w).unwrap().total();
            assert!(t > last);
            last = t;
        }
        for k in 1..3 {
            let on = count_flops(&base.clone().with_refinements(k).with_pn(true), h, w).unwrap();
            let off = count_flops(&base.clone().with_refinements(k).with_pn(false), h, w).unwrap();
            assert!(on.total() > off.total());
        }
    }
}

#[test]
fn flops_count_matches_tape_multiplies() {
    // Independent count: the tape tallies multiplies of every op it records.
    let c = ModelConfig::micro().with_refinements(0);
    let m = Model::<f64>::build(c.clone(), 1).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor4::zeros(Shape4::new(1, 3, 8, 8)));
    let mk = tape.constant(Tensor4::full(Shape4::new(1, 1, 8, 8), 1.0));
    m.forward(&mut tape, x, mk, Mode::Eval).unwrap();
    assert_eq!(count_flops(&c, 8, 8).unwrap().total(), tape.multiplies());
}

#[test]
fn kernel_dump_has_two_rows_and_is_deterministic() {
    let m = Model::<f32>::build(ModelConfig::desk(), 2).unwrap();
    let mask = Tensor4::from_fn(Shape4::new(1, 1, 64, 64), |_, _, _, x| if x < 32 { 1.0f32 } else { 0.0 });
    let a = dump_first_layer_kernels(&m, &mask).unwrap();
    let b = dump_first_layer_kernels(&Model::<f32>::build(ModelConfig::desk(), 2).unwrap(), &mask).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    assert_eq!(a.rows[0].valid_fraction, 1.0);
    assert_eq!(a.rows[1].valid_fraction, 0.0);
    assert_ne!(a.rows[0].energy, a.rows[1].energy);
    assert!(a.grid.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn micro_model_end_to_end_gradients() {
    for suite in ["micro_model", "micro_model_batch_norm"] {
        let r = run_suite(suite).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked > 100);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outputs_match_input_dims(n in 1usize..3, hq in 1usize..5, wq in 1usize..5, k in 0usize..3, pn in any::<bool>(), seed in any::<u64>()) {
        let (h, w) = (4 * hq + 4, 4 * wq + 4);
        let m = Model::<f64>::build(ModelConfig::micro().with_refinements(k).with_pn(pn), seed).unwrap();
        let (x, mk) = inputs(n, h, w, seed);
        let outs = m.infer(&x, &mk).unwrap();
        prop_assert_eq!(outs.len(), k + 1);
        for o in &outs {
            prop_assert_eq!(o.shape(), Shape4::new(n, 3, h, w));
            prop_assert!(o.is_finite());
        }
    }

    #[test]
    fn kernels_ignore_image_content(seed in any::<u64>()) {
        let m = Model::<f64>::build(ModelConfig::micro(), seed).unwrap();
        let (x1, mk) = inputs(1, 8, 8, seed);
        let x2 = randn(x1.shape(), seed ^ 7);
        let run = |x: &Tensor4<f64>| {
            let mut tape = Tape::new();
            let (xv, mv) = (tape.constant(x.clone()), tape.constant(mk.clone()));
            let pass = m.forward(&mut tape, xv, mv, Mode::Eval).unwrap();
            pass.encoder.levels[1..].iter().map(|l| tape.value(l.kernels.unwrap()).clone()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(&x1), run(&x2));
    }
}
