mod common;

use common::{add, apply_conv, max_abs, rand_tensor, rng, upsample2};
use smalldetr::fgpa::Fgpa;
use smalldetr::gradcheck::{grad_check_with, GradCheckOptions};
use smalldetr::model::{Ctx, FeaturePyramid, Init, Model, ModelConfig, ParamStore};
use smalldetr::{Graph, Tensor, Var};

const CH: [usize; 3] = [3, 5, 6];
const D: usize = 4;

fn block(enabled: bool, seed: u64) -> (ParamStore, Fgpa) {
    let mut store = ParamStore::new();
    let f = Fgpa::new(&mut Init::new(&mut store, seed), CH, D, enabled).unwrap();
    // biases start at zero; give them values so the oracle sees them
    let mut r = rng(seed + 1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") {
            let n = store.get(id).numel();
            *store.get_mut(id) = rand_tensor(&mut r, &[n], -0.5, 0.5);
        }
    }
    (store, f)
}

/// Backbone levels for an `h x w` stride-8 grid.
fn levels(seed: u64, n: usize, h: usize, w: usize) -> [Tensor; 3] {
    let mut r = rng(seed);
    [
        rand_tensor(&mut r, &[n, CH[0], h, w], -1.0, 1.0),
        rand_tensor(&mut r, &[n, CH[1], h / 2, w / 2], -1.0, 1.0),
        rand_tensor(&mut r, &[n, CH[2], h / 4, w / 4], -1.0, 1.0),
    ]
}

fn pyramid(g: &mut Graph, s: &[Tensor; 3]) -> FeaturePyramid {
    FeaturePyramid {
        s3: g.constant(s[0].clone()),
        s4: g.constant(s[1].clone()),
        s5: g.constant(s[2].clone()),
    }
}

#[test]
fn top_down_matches_reference_composition() {
    for seed in 0..4 {
        let (store, f) = block(true, seed);
        let s = levels(seed + 10, 2, 8, 4);
        let mut ctx = Ctx::new(&store, false);
        let fp = pyramid(&mut ctx.g, &s);
        let lat = f.laterals(&mut ctx, &fp).unwrap();
        let [p3, p4, p5] = f.top_down(&mut ctx, lat).unwrap();

        let l: Vec<Tensor> = (0..3).map(|i| apply_conv(&store, &f.lateral[i], &s[i])).collect();
        let w5 = l[2].clone();
        let w4 = add(&l[1], &upsample2(&w5));
        let w3 = add(&l[0], &upsample2(&w4));
        assert!(max_abs(ctx.g.value(p5).data(), w5.data()) < 1e-13);
        assert!(max_abs(ctx.g.value(p4).data(), w4.data()) < 1e-13);
        assert!(max_abs(ctx.g.value(p3).data(), w3.data()) < 1e-13);
    }
}

#[test]
fn bottom_up_matches_reference_composition() {
    for seed in 0..4 {
        let (store, f) = block(true, seed);
        let s = levels(seed + 20, 1, 8, 8);
        let mut ctx = Ctx::new(&store, false);
        let fp = pyramid(&mut ctx.g, &s);
        let aug = f.forward(&mut ctx, &fp).unwrap();
        let [p3, p4, p5] = aug.top_down.unwrap();
        let [n3, n4, n5] = aug.bottom_up.unwrap();
        assert_eq!(n3, p3, "n3 is p3 itself");

        let bu = f.bottom_up.as_ref().unwrap();
        let (p3t, p4t, p5t) = (ctx.g.value(p3), ctx.g.value(p4), ctx.g.value(p5));
        let w4 = add(p4t, &apply_conv(&store, &bu.down[0], p3t));
        let w5 = add(p5t, &apply_conv(&store, &bu.down[1], &w4));
        let enc = apply_conv(&store, &bu.fuse, &w5);
        assert!(max_abs(ctx.g.value(n4).data(), w4.data()) < 1e-12);
        assert!(max_abs(ctx.g.value(n5).data(), w5.data()) < 1e-12);
        assert!(max_abs(ctx.g.value(aug.encoder_input).data(), enc.data()) < 1e-12);
        for (p, n) in [(p3, n3), (p4, n4), (p5, n5)] {
            assert_eq!(ctx.g.shape(p), ctx.g.shape(n));
        }
    }
}

#[test]
fn zero_down_convs_leave_top_down_levels_unchanged() {
    let (mut store, f) = block(true, 1);
    let bu = f.bottom_up.as_ref().unwrap();
    for c in &bu.down {
        let (ws, bs) = (store.get(c.w).shape().to_vec(), store.get(c.b).shape().to_vec());
        *store.get_mut(c.w) = Tensor::zeros(&ws);
        *store.get_mut(c.b) = Tensor::zeros(&bs);
    }
    let s = levels(3, 1, 8, 8);
    let mut ctx = Ctx::new(&store, false);
    let fp = pyramid(&mut ctx.g, &s);
    let aug = f.forward(&mut ctx, &fp).unwrap();
    for (p, n) in aug.top_down.unwrap().into_iter().zip(aug.bottom_up.unwrap()) {
        assert!(ctx.g.value(p).bit_eq(ctx.g.value(n)));
    }
}

#[test]
fn zero_laterals_give_zero_levels() {
    let (mut store, f) = block(true, 2);
    for c in &f.lateral {
        let (ws, bs) = (store.get(c.w).shape().to_vec(), store.get(c.b).shape().to_vec());
        *store.get_mut(c.w) = Tensor::zeros(&ws);
        *store.get_mut(c.b) = Tensor::zeros(&bs);
    }
    let s = levels(4, 1, 8, 8);
    let mut ctx = Ctx::new(&store, false);
    let fp = pyramid(&mut ctx.g, &s);
    let lat = f.laterals(&mut ctx, &fp).unwrap();
    for p in f.top_down(&mut ctx, lat).unwrap() {
        assert!(ctx.g.value(p).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn spatially_constant_levels_stay_constant() {
    let (store, f) = block(true, 3);
    let mut r = rng(5);
    let s: [Tensor; 3] = std::array::from_fn(|i| {
        let (c, side) = (CH[i], 8 >> i);
        let per_channel = rand_tensor(&mut r, &[c], -1.0, 1.0);
        Tensor::from_fn(&[1, c, side, side], |k| per_channel.data()[k / (side * side)])
    });
    let mut ctx = Ctx::new(&store, false);
    let fp = pyramid(&mut ctx.g, &s);
    let lat = f.laterals(&mut ctx, &fp).unwrap();
    for p in f.top_down(&mut ctx, lat).unwrap() {
        let (_, _, h, w) = ctx.g.value(p).dims4("test").unwrap();
        for plane in ctx.g.value(p).data().chunks(h * w) {
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }
}

#[test]
fn disabled_block_passes_only_the_top_lateral() {
    let (store, f) = block(false, 4);
    assert!(!f.enabled());
    let s = levels(6, 2, 8, 8);
    let mut ctx = Ctx::new(&store, false);
    let fp = pyramid(&mut ctx.g, &s);
    let aug = f.forward(&mut ctx, &fp).unwrap();
    assert!(aug.top_down.is_none() && aug.bottom_up.is_none());
    let want = apply_conv(&store, &f.lateral[2], &s[2]);
    assert!(ctx.g.value(aug.encoder_input).bit_eq(&want));
    assert!(f.bottom_up(&mut ctx, aug.laterals).is_err());
}

#[test]
fn odd_extents_cannot_be_halved() {
    let (store, f) = block(true, 5);
    let mut ctx = Ctx::new(&store, false);
    let mk = |g: &mut Graph, h: usize| g.constant(Tensor::zeros(&[1, D, h, h]));
    let p = [mk(&mut ctx.g, 6), mk(&mut ctx.g, 3), mk(&mut ctx.g, 2)];
    let e = f.bottom_up(&mut ctx, p).unwrap_err().to_string();
    assert!(e.contains("cannot be halved"), "{e}");
}

fn encoder_input_energy_grad_wrt_s3(enabled: bool) -> Tensor {
    let (store, f) = block(enabled, 6);
    let s = levels(7, 1, 8, 8);
    let mut ctx = Ctx::new(&store, false);
    let fp = FeaturePyramid {
        s3: ctx.g.param(s[0].clone()),
        s4: ctx.g.constant(s[1].clone()),
        s5: ctx.g.constant(s[2].clone()),
    };
    let aug = f.forward(&mut ctx, &fp).unwrap();
    let e = ctx.g.sum_squares(aug.encoder_input);
    ctx.g.backward(e).unwrap();
    ctx.g.grad_tensor(fp.s3)
}

#[test]
fn shallow_detail_reaches_the_encoder_only_when_enabled() {
    assert!(encoder_input_energy_grad_wrt_s3(true).data().iter().any(|&v| v != 0.0));
    assert!(encoder_input_energy_grad_wrt_s3(false).data().iter().all(|&v| v == 0.0));
}

/// Encoder input and memory of a full model for hand-made backbone levels.
fn memory_for(m: &Model, s: &[Tensor; 3]) -> (Tensor, Tensor) {
    let mut ctx = Ctx::new(&m.params, false);
    let fp = pyramid(&mut ctx.g, s);
    let aug = m.fgpa.forward(&mut ctx, &fp).unwrap();
    let mem = m.encoder.forward(&mut ctx, aug.encoder_input).unwrap();
    (ctx.g.value(aug.encoder_input).clone(), ctx.g.value(mem).clone())
}

#[test]
fn perturbing_shallow_levels_only_matters_with_augmentation() {
    let cfg = |on| ModelConfig {
        stem_channels: 4,
        stage_channels: [4, CH[0], CH[1], CH[2]],
        hidden_dim: 8,
        heads: 2,
        ffn_dim: 16,
        fgpa_enabled: on,
        ..Default::default()
    };
    let s = levels(8, 1, 8, 8);
    let mut r = rng(9);
    let bumped = [
        add(&s[0], &rand_tensor(&mut r, s[0].shape(), -0.5, 0.5)),
        add(&s[1], &rand_tensor(&mut r, s[1].shape(), -0.5, 0.5)),
        s[2].clone(),
    ];
    let off = Model::new(cfg(false)).unwrap();
    let (a, ma) = memory_for(&off, &s);
    let (b, mb) = memory_for(&off, &bumped);
    assert!(a.bit_eq(&b) && ma.bit_eq(&mb));

    let on = Model::new(cfg(true)).unwrap();
    let (a, _) = memory_for(&on, &s);
    let only_s3 = [bumped[0].clone(), s[1].clone(), s[2].clone()];
    let (b, _) = memory_for(&on, &only_s3);
    assert!(!a.bit_eq(&b));
}

#[test]
fn encoder_input_shape_from_a_64_pixel_image() {
    for on in [false, true] {
        let m = Model::new(ModelConfig {
            fgpa_enabled: on,
            ..Default::default()
        })
        .unwrap();
        let mut ctx = Ctx::new(&m.params, false);
        let x = ctx.g.constant(Tensor::zeros(&[2, 3, 64, 64]));
        let out = m.forward(&mut ctx, x, 1).unwrap();
        assert_eq!(ctx.g.shape(out.augmented.encoder_input), &[2, 64, 2, 2]);
    }
}

#[test]
fn gradient_check_through_the_whole_block() {
    let (store, f) = block(true, 10);
    let mut inputs: Vec<Tensor> = levels(11, 1, 8, 8).into();
    let data = inputs.len();
    inputs.extend(store.iter().map(|(_, t)| t.clone()));
    let dir = rand_tensor(&mut rng(12), &[1, D, 2, 2], -1.0, 1.0);
    let report = grad_check_with(
        |g: &mut Graph, v: &[Var]| {
            let mut ctx = Ctx::with_bindings(std::mem::take(g), &store, &v[data..])?;
            let fp = FeaturePyramid {
                s3: v[0],
                s4: v[1],
                s5: v[2],
            };
            let aug = f.forward(&mut ctx, &fp);
            *g = ctx.into_graph();
            g.dot_const(aug?.encoder_input, &dir)
        },
        &inputs,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}
