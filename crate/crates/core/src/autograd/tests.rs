use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::params::ParamStore;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let d = Normal::new(0.0f32, std).unwrap();
    Tensor::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

/// Projects `y` onto a fixed random tensor so any output becomes a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = randn(&mut rng, tape.shape(y), 1.0);
    let v = (tape.value(y) * &r).sum();
    tape.custom_scalar(v, vec![(y, r)])
}

/// Directional finite-difference check of all parameter gradients.
fn check<F>(store: &ParamStore, build: F)
where
    F: Fn(&mut Tape) -> Var,
{
    let mut tape = Tape::new(store);
    let root = build(&mut tape);
    let grads = tape.backward(root);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let dirs: Vec<Tensor> = store.iter().map(|(_, _, v)| randn(&mut rng, v.shape(), 1.0)).collect();
    let analytic: f64 = store
        .ids()
        .zip(&dirs)
        .map(|(id, d)| {
            grads
                .get(id)
                .map(|g| g.iter().zip(d.iter()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>())
                .unwrap_or(0.0)
        })
        .sum();
    let eval = |eps: f32| {
        let mut shifted = store.clone();
        for (id, d) in store.ids().zip(&dirs) {
            shifted.get_mut(id).scaled_add(eps, d);
        }
        let mut t = Tape::new(&shifted);
        let r = build(&mut t);
        t.scalar(r) as f64
    };
    // Small enough that few activations cross the LeakyReLU kink.
    let h = 1e-4f32;
    let numeric = (eval(h) - eval(-h)) / (2.0 * h as f64);
    let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
    assert!(rel < 2e-2, "analytic {analytic} numeric {numeric}");
}

#[test]
fn conv_norm_activation_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", randn(&mut rng, &[3, 2, 3, 3, 3], 0.3));
    let b1 = store.add("b1", randn(&mut rng, &[3], 0.1));
    let g = store.add("g", randn(&mut rng, &[3], 1.0));
    let be = store.add("be", randn(&mut rng, &[3], 0.1));
    let w2 = store.add("w2", randn(&mut rng, &[2, 3, 1, 1, 1], 0.5));
    let b2 = store.add("b2", randn(&mut rng, &[2], 0.1));
    let x = randn(&mut rng, &[2, 2, 4, 4, 4], 1.0);
    check(&store, |t| {
        let xi = t.input(x.clone());
        let (w1, b1, g, be, w2, b2) = (t.param(w1), t.param(b1), t.param(g), t.param(be), t.param(w2), t.param(b2));
        let h = t.conv3d(xi, w1, b1, 2);
        let h = t.instance_norm(h, g, be);
        let h = t.leaky_relu(h, 0.01);
        let h = t.upsample2x(h);
        let h = t.conv3d(h, w2, b2, 1);
        let h = t.tanh(h);
        project(t, h, 5)
    });
}

#[test]
fn pooling_linear_film_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&mut rng, &[4, 3], 0.5));
    let b = store.add("b", randn(&mut rng, &[4], 0.1));
    let ws = store.add("ws", randn(&mut rng, &[3, 4], 0.5));
    let bs = store.add("bs", randn(&mut rng, &[3], 0.1));
    let x = randn(&mut rng, &[2, 3, 2, 2, 2], 1.0);
    check(&store, |t| {
        let xi = t.input(x.clone());
        let (w, b, ws, bs) = (t.param(w), t.param(b), t.param(ws), t.param(bs));
        let p = t.global_avg_pool(xi);
        let m = t.linear(p, w, b);
        let m = t.tanh(m);
        let scale = t.linear(m, ws, bs);
        let shift = t.linear(m, ws, bs);
        let y = t.film(xi, scale, shift);
        let a = project(t, y, 6);
        let c = project(t, m, 7);
        t.combine(&[(a, 1.0), (c, 0.5)])
    });
}

#[test]
fn fusion_and_concat_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let w = store.add("w", randn(&mut rng, &[2, 2, 1, 1, 1], 0.7));
    let b = store.add("b", randn(&mut rng, &[2], 0.1));
    let gw = store.add("gw", randn(&mut rng, &[3, 2], 0.7));
    let gb = store.add("gb", randn(&mut rng, &[3], 0.3));
    let xs: Vec<Tensor> = (0..3).map(|_| randn(&mut rng, &[2, 2, 2, 2, 2], 1.0)).collect();
    let masks = vec![vec![true, false, true], vec![true, true, true]];
    check(&store, |t| {
        let (w, b, gw, gb) = (t.param(w), t.param(b), t.param(gw), t.param(gb));
        let anat: Vec<Var> = xs
            .iter()
            .map(|x| {
                let xi = t.input(x.clone());
                t.conv3d(xi, w, b, 1)
            })
            .collect();
        let fused = t.masked_fusion(&anat, gw, gb, &masks);
        let cat = t.concat_batch(&anat);
        let a = project(t, fused, 8);
        let c = project(t, cat, 9);
        t.combine(&[(a, 1.0), (c, 1.0)])
    });
}

#[test]
fn singleton_mask_passes_map_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let gw = store.add("gw", randn(&mut rng, &[2, 2], 1.0));
    let gb = store.add("gb", randn(&mut rng, &[2], 1.0));
    let a = randn(&mut rng, &[1, 2, 2, 2, 2], 1.0);
    let mut tape = Tape::new(&store);
    let ai = tape.input(a.clone());
    let bad = tape.input(Tensor::from_elem(IxDyn(&[1, 2, 2, 2, 2]), f32::NAN));
    let (gw, gb) = (tape.param(gw), tape.param(gb));
    let y = tape.masked_fusion(&[bad, ai], gw, gb, &[vec![false, true]]);
    assert_eq!(tape.value(y), &a);
}

#[test]
fn param_nodes_are_shared_and_unused_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::ones(IxDyn(&[1, 1])));
    let b = store.add("b", Tensor::zeros(IxDyn(&[1])));
    let unused = store.add("unused", Tensor::zeros(IxDyn(&[1])));
    let mut tape = Tape::new(&store);
    assert_eq!(tape.param(w), tape.param(w));
    let x = tape.input(Tensor::from_elem(IxDyn(&[1, 1]), 3.0));
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.linear(x, wv, bv);
    let y2 = tape.linear(y, wv, bv);
    let s = tape.custom_scalar(tape.value(y2)[[0, 0]], vec![(y2, Tensor::ones(IxDyn(&[1, 1])))]);
    let g = tape.backward(s);
    // y2 = w (w x + b) + b, so d/dw = 2 w x + b = 6
    assert_eq!(g.get(w).unwrap()[[0, 0]], 6.0);
    assert!(g.get(unused).is_none());
}

