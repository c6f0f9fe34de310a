//! Finite-difference gradient audits: individual ops and the assembled model
//! for every variant, with kink-avoiding resampling.

mod common;

use common::*;
use din_core::gradcheck::finite_diff_check;
use din_core::model::Variant;
use din_core::tensor::{Tape, Tensor};

fn all_variants() -> Vec<Variant> {
    vec![
        Variant::Edp,
        Variant::Arg,
        Variant::Dr,
        Variant::Dw,
        Variant::DrDw,
        Variant::DrDwStar,
        Variant::StFactorised,
        Variant::Lite(Box::new(Variant::DrDw)),
    ]
}

#[test]
fn matmul_chain_gradient_matches_finite_differences() {
    let mut r = rng(3);
    let a0 = rand_vec(&mut r, 3 * 4, 1.0);
    let b0 = rand_vec(&mut r, 4 * 2, 1.0);
    let point = vec![a0, b0];
    let f = |vecs: &[Vec<f64>]| {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![3, 4], vecs[0].clone()).unwrap());
        let b = tape.constant(Tensor::new(vec![4, 2], vecs[1].clone()).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_axis(c, 1).unwrap();
        let l = tape.sum(s);
        tape.value(l).values()[0] * 3.7 + {
            let m = tape.mul(c, c).unwrap();
            let s2 = tape.sum(m);
            tape.value(s2).values()[0]
        }
    };
    let analytic = {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3, 4], point[0].clone()).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![4, 2], point[1].clone()).unwrap(), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_axis(c, 1).unwrap();
        let l = tape.sum(s);
        let l_scaled = tape.scale(l, 3.7);
        let m = tape.mul(c, c).unwrap();
        let s2 = tape.sum(m);
        let total = tape.add(l_scaled, s2).unwrap();
        tape.backward(total).unwrap();
        vec![
            tape.grad(a).unwrap().to_vec(),
            tape.grad(b).unwrap().to_vec(),
        ]
    };
    let err = finite_diff_check(f, &point, &analytic, 1e-5);
    assert!(err < 1e-4, "matmul chain rel err {err}");
}

#[test]
fn per_op_gradients_match_finite_differences() {
    // one composite touching conv, gather, sampling, softmax, pooling
    let mut r = rng(5);
    let (t, n, d, k) = (3, 4, 3, 9);
    let grid0 = rand_vec(&mut r, t * n * d, 1.0);
    let kernel0 = rand_vec(&mut r, 2 * k * 3 * 3 * d, 0.2);
    let bias0 = rand_vec(&mut r, 2 * k, 0.3);
    let w0 = rand_vec(&mut r, d * d, 0.5);
    let point = vec![grid0, kernel0, bias0, w0];

    let build = |vecs: &[Vec<f64>], want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::new(vec![t, n, d], vecs[0].clone()).unwrap(), want_grads);
        let kr = tape.leaf(
            Tensor::new(vec![2 * k, 3, 3, d], vecs[1].clone()).unwrap(),
            want_grads,
        );
        let b = tape.leaf(Tensor::new(vec![2 * k], vecs[2].clone()).unwrap(), want_grads);
        let w = tape.leaf(Tensor::new(vec![d, d], vecs[3].clone()).unwrap(), want_grads);
        let raw = tape.grid_conv(g, kr, b).unwrap();
        let off = tape.reshape(raw, vec![t, n, k, 2]).unwrap();
        let feats = tape.bilinear_gather(g, off, 3, 3).unwrap();
        let rel_logits = tape.edp_logits_field(g, g, 3, 3, 0.7).unwrap();
        let rel = tape.softmax_axis(rel_logits, 2).unwrap();
        let agg = tape.weighted_sum_k(feats, rel).unwrap();
        let agg2 = tape.reshape(agg, vec![t * n, d]).unwrap();
        let h = tape.matmul(agg2, w).unwrap();
        let rl = tape.relu(h);
        let x3 = tape.reshape(rl, vec![t, n, d]).unwrap();
        let mx = tape.reduce_max_axis(x3, 1, None).unwrap();
        let mean = tape.reduce_mean_axis(mx, 0).unwrap();
        let loss = tape.cross_entropy(mean, 1).unwrap();
        let value = tape.value(loss).values()[0];
        if !want_grads {
            return (value, None);
        }
        assert!(tape.kink_margin() > 1e-4, "kink margin too small for audit");
        tape.backward(loss).unwrap();
        let grads = vec![
            tape.grad(g).unwrap().to_vec(),
            tape.grad(kr).unwrap().to_vec(),
            tape.grad(b).unwrap().to_vec(),
            tape.grad(w).unwrap().to_vec(),
        ];
        (value, Some(grads))
    };

    let (_, analytic) = build(&point, true);
    let err = finite_diff_check(
        |vecs| build(vecs, false).0,
        &point,
        &analytic.unwrap(),
        1e-5,
    );
    assert!(err < 1e-4, "composite op rel err {err}");
}

#[test]
fn full_model_gradients_pass_audit_for_every_variant() {
    // 20 seeds per variant with kink-avoiding resampling
    for variant in all_variants() {
        let mut worst = 0.0f64;
        for seed in 0..20u64 {
            let err = audit_variant(variant.clone(), seed);
            worst = worst.max(err);
            assert!(
                err < 1e-4,
                "variant {variant} seed {seed}: rel err {err}"
            );
        }
        println!("gradient audit {variant}: worst rel err {worst:.3e}");
    }
}
