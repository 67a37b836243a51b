mod common;

use common::{apply_conv, max_abs, rand_tensor, rel, rng, sigmoid};
use proptest::prelude::*;
use smalldetr::aff::{
    adaptive_fuse_levels, attention_map, fuse_pooled, gate_elementwise, AffParams, AttentionMap,
};
use smalldetr::gradcheck::{grad_check_with, GradCheckOptions};
use smalldetr::model::config::AffMode;
use smalldetr::model::{Ctx, Init, ParamStore};
use smalldetr::{Graph, Tensor, Var};

fn params(channels: usize, kernel: usize, seed: u64) -> (ParamStore, AffParams) {
    let mut store = ParamStore::new();
    let p = AffParams::new(&mut Init::new(&mut store, seed), "aff", channels, kernel).unwrap();
    (store, p)
}

fn set(store: &mut ParamStore, p: &AffParams, w: f64, b: f64) {
    let ws = store.get(p.conv.w).shape().to_vec();
    *store.get_mut(p.conv.w) = Tensor::full(&ws, w);
    *store.get_mut(p.conv.b) = Tensor::full(&[1], b);
}

fn map_of(store: &ParamStore, p: &AffParams, x: &Tensor) -> Tensor {
    let mut ctx = Ctx::new(store, false);
    let xv = ctx.g.constant(x.clone());
    let a = attention_map(&mut ctx, xv, p).unwrap();
    ctx.g.value(a.0).clone()
}

/// Runs `fuse_pooled` on a constant map and returns the `(N, C)` result.
fn pooled(x: &Tensor, a: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, av) = (g.constant(x.clone()), g.constant(a.clone()));
    let y = fuse_pooled(&mut g, xv, AttentionMap(av)).unwrap();
    g.value(y.0).clone()
}

fn gated(x: &Tensor, a: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let (xv, av) = (g.constant(x.clone()), g.constant(a.clone()));
    let y = gate_elementwise(&mut g, xv, AttentionMap(av)).unwrap();
    g.value(y).clone()
}

#[test]
fn zero_weights_give_one_half_everywhere() {
    let (mut store, p) = params(3, 3, 0);
    set(&mut store, &p, 0.0, 0.0);
    let x = rand_tensor(&mut rng(1), &[2, 3, 5, 4], -3.0, 3.0);
    let a = map_of(&store, &p, &x);
    assert_eq!(a.shape(), &[2, 1, 5, 4]);
    assert!(a.data().iter().all(|&v| v == 0.5));
}

#[test]
fn pointwise_kernel_example() {
    let (mut store, p) = params(1, 1, 0);
    set(&mut store, &p, 2.0, 0.0);
    let a = map_of(&store, &p, &Tensor::full(&[1, 1, 2, 2], 0.5));
    for &v in a.data() {
        assert!((v - sigmoid(1.0)).abs() < 1e-15);
    }
}

#[test]
fn map_matches_sigmoid_of_reference_conv() {
    for seed in 0..5 {
        let (store, p) = params(4, 3, seed);
        let x = rand_tensor(&mut rng(seed + 100), &[2, 4, 6, 5], -2.0, 2.0);
        let want = common::map(&apply_conv(&store, &p.conv, &x), sigmoid);
        assert!(max_abs(map_of(&store, &p, &x).data(), want.data()) < 1e-14);
    }
}

#[test]
fn even_kernel_rejected() {
    let mut store = ParamStore::new();
    assert!(AffParams::new(&mut Init::new(&mut store, 0), "a", 3, 2).is_err());
}

#[test]
fn channel_mismatch_is_an_error() {
    let (store, p) = params(3, 3, 0);
    let mut ctx = Ctx::new(&store, false);
    let x = ctx.g.constant(Tensor::zeros(&[1, 4, 3, 3]));
    let e = attention_map(&mut ctx, x, &p).unwrap_err().to_string();
    assert!(e.contains("expects 3") && e.contains("has 4"), "{e}");
}

#[test]
fn one_hot_map_selects_a_position() {
    let x = rand_tensor(&mut rng(2), &[1, 3, 4, 5], -1.0, 1.0);
    let (i, j) = (2, 3);
    let a = Tensor::from_fn(&[1, 1, 4, 5], |k| if k == i * 5 + j { 1.0 } else { 0.0 });
    let y = pooled(&x, &a);
    for c in 0..3 {
        assert_eq!(y.data()[c], x.data()[(c * 4 + i) * 5 + j]);
    }
}

#[test]
fn all_ones_map_sums_each_channel() {
    let x = rand_tensor(&mut rng(3), &[2, 3, 4, 5], -1.0, 1.0);
    let y = pooled(&x, &Tensor::full(&[2, 1, 4, 5], 1.0));
    assert_eq!(y.shape(), &[2, 3]);
    for (k, plane) in x.data().chunks(20).enumerate() {
        let s: f64 = plane.iter().sum();
        assert!(rel(y.data()[k], s) < 1e-13);
    }
}

#[test]
fn pooled_matches_double_sum_on_random_instances() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.gen_range(1..=2);
        let c = r.gen_range(1..=8);
        let h = r.gen_range(1..=5);
        let w = r.gen_range(1..=7);
        let x = rand_tensor(&mut r, &[n, c, h, w], -2.0, 2.0);
        let a = rand_tensor(&mut r, &[n, 1, h, w], 0.0, 1.0);
        let y = pooled(&x, &a);
        for (&got, want) in y.data().iter().zip(common::pooled_double_sum(&x, &a)) {
            assert!(got == want || rel(got, want) < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn gate_with_ones_is_identity_and_zeros_annihilate() {
    let x = rand_tensor(&mut rng(5), &[2, 3, 4, 4], -1.0, 1.0);
    assert!(gated(&x, &Tensor::full(&[2, 1, 4, 4], 1.0)).bit_eq(&x));
    assert!(gated(&x, &Tensor::zeros(&[2, 1, 4, 4])).data().iter().all(|&v| v == 0.0));
}

#[test]
fn gate_matches_nested_multiply() {
    let mut r = rng(6);
    let x = rand_tensor(&mut r, &[2, 3, 4, 5], -1.0, 1.0);
    let a = rand_tensor(&mut r, &[2, 1, 4, 5], 0.0, 1.0);
    let y = gated(&x, &a);
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..20 {
                assert_eq!(y.data()[(n * 3 + c) * 20 + p], x.data()[(n * 3 + c) * 20 + p] * a.data()[n * 20 + p]);
            }
        }
    }
}

fn fuse_levels(store: &ParamStore, ps: &[AffParams], xs: &[Tensor], mode: AffMode) -> smalldetr::Result<Tensor> {
    let mut ctx = Ctx::new(store, false);
    let vs: Vec<Var> = xs.iter().map(|x| ctx.g.constant(x.clone())).collect();
    let (y, _) = adaptive_fuse_levels(&mut ctx, &vs, ps, mode)?;
    Ok(ctx.g.value(y).clone())
}

fn three_levels(seed: u64) -> (ParamStore, Vec<AffParams>, Vec<Tensor>) {
    let mut store = ParamStore::new();
    let mut init = Init::new(&mut store, seed);
    let ps: Vec<AffParams> = (0..3).map(|i| AffParams::new(&mut init, &format!("aff{i}"), 2, 3).unwrap()).collect();
    let mut r = rng(seed + 1);
    let xs = (0..3).map(|_| rand_tensor(&mut r, &[1, 2, 4, 4], -1.0, 1.0)).collect();
    (store, ps, xs)
}

fn concat_reference(xs: &[Tensor]) -> Vec<f64> {
    // batch of one: channel blocks are contiguous
    xs.iter().flat_map(|x| x.data().iter().copied()).collect()
}

#[test]
fn off_mode_is_plain_concatenation() {
    let (store, ps, xs) = three_levels(7);
    let y = fuse_levels(&store, &ps, &xs, AffMode::Off).unwrap();
    assert_eq!(y.shape(), &[1, 6, 4, 4]);
    assert_eq!(y.data(), concat_reference(&xs).as_slice());
}

#[test]
fn saturated_gate_reduces_to_concatenation() {
    let (mut store, ps, xs) = three_levels(8);
    for p in &ps {
        set(&mut store, p, 0.0, 100.0);
    }
    let gated = fuse_levels(&store, &ps, &xs, AffMode::ElementwiseGate).unwrap();
    let plain = fuse_levels(&store, &ps, &xs, AffMode::Off).unwrap();
    assert!(gated.bit_eq(&plain));
}

#[test]
fn gated_fusion_matches_composed_reference() {
    let (store, ps, xs) = three_levels(9);
    let y = fuse_levels(&store, &ps, &xs, AffMode::ElementwiseGate).unwrap();
    let mut want = Vec::new();
    for (x, p) in xs.iter().zip(&ps) {
        let a = common::map(&apply_conv(&store, &p.conv, x), sigmoid);
        for c in 0..2 {
            want.extend((0..16).map(|k| x.data()[c * 16 + k] * a.data()[k]));
        }
    }
    assert!(max_abs(y.data(), &want) < 1e-14);
}

#[test]
fn literal_pool_cannot_fuse_levels() {
    let (store, ps, xs) = three_levels(10);
    let e = fuse_levels(&store, &ps, &xs, AffMode::LiteralPool).unwrap_err();
    assert!(matches!(e, smalldetr::Error::Config(_)), "{e}");
}

#[test]
fn mismatched_levels_are_rejected() {
    let (store, ps, mut xs) = three_levels(11);
    assert!(fuse_levels(&store, &ps[..2], &xs, AffMode::ElementwiseGate).is_err());
    xs[1] = Tensor::zeros(&[1, 2, 2, 2]);
    assert!(fuse_levels(&store, &ps, &xs, AffMode::Off).is_err());
    assert!(fuse_levels(&store, &ps, &[], AffMode::Off).is_err());
}

#[test]
fn gradient_check_of_map_then_pool() {
    for seed in 0..5 {
        let (store, p) = params(3, 3, seed);
        let mut inputs = vec![rand_tensor(&mut rng(seed + 50), &[2, 3, 4, 5], -1.0, 1.0)];
        inputs.extend(store.iter().map(|(_, t)| t.clone()));
        let dir = rand_tensor(&mut rng(seed + 60), &[2, 3], -1.0, 1.0);
        let report = grad_check_with(
            |g: &mut Graph, v: &[Var]| {
                let mut ctx = Ctx::with_bindings(std::mem::take(g), &store, &v[1..])?;
                let a = attention_map(&mut ctx, v[0], &p);
                *g = ctx.into_graph();
                let y = fuse_pooled(g, v[0], a?)?;
                g.dot_const(y.0, &dir)
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}

use rand::Rng;

proptest! {
    #[test]
    fn map_entries_lie_strictly_inside_unit_interval(seed in 0u64..1000, scale in 0.1f64..4.0) {
        let (store, p) = params(2, 3, seed);
        let x = rand_tensor(&mut rng(seed), &[1, 2, 3, 3], -scale, scale);
        for &v in map_of(&store, &p, &x).data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn pooling_is_linear_in_the_features(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x1 = rand_tensor(&mut r, &[1, 3, 3, 4], -1.0, 1.0);
        let x2 = rand_tensor(&mut r, &[1, 3, 3, 4], -1.0, 1.0);
        let a = rand_tensor(&mut r, &[1, 1, 3, 4], 0.0, 1.0);
        let mix = Tensor::new(x1.shape(), x1.data().iter().zip(x2.data()).map(|(u, v)| alpha * u + v).collect()).unwrap();
        let (y1, y2, ym) = (pooled(&x1, &a), pooled(&x2, &a), pooled(&mix, &a));
        for k in 0..3 {
            let want = alpha * y1.data()[k] + y2.data()[k];
            prop_assert!((ym.data()[k] - want).abs() < 1e-12);
        }
    }
}
