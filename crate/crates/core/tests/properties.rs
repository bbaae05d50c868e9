mod common;

use common::*;
use dresplit::adaptive::{pi_update, ControllerParams};
use dresplit::expaction::ExpActionOptions;
use dresplit::lowrank::{combine, compress, frob_norm, CompressionOptions};
use dresplit::schemes::{additive_coeffs, additive_coeffs_exact, order_condition_residual};
use dresplit::subflows::{
    init_quadrature, quad_weights, update_quadrature, FlowOptions, NodePolicy, QuadratureState,
};
use num::ToPrimitive;
use proptest::prelude::*;

fn moment_residual(st: &QuadratureState) -> f64 {
    let h = st.h();
    (0..=st.degree())
        .map(|j| {
            let q: f64 = st
                .nodes()
                .iter()
                .zip(st.weights())
                .map(|(s, w)| w / h * (s / h).powi(j as i32))
                .sum();
            (q - 1.0 / (j as f64 + 1.0)).abs()
        })
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn compression_respects_tolerance(seed in any::<u64>(), n in 1usize..=64, r in 1usize..=20, exp in 2i32..=12) {
        let mut rng = rng(seed);
        let f = indefinite_factor(&mut rng, n, r);
        let tol = 10f64.powi(-exp);
        let c = compress(&f, &CompressionOptions::with_tol(tol));
        let full = dense(&f);
        let err = (dense(&c) - &full).norm();
        prop_assert!(err <= tol * full.norm() * (1.0 + 1e-10) + 1e-13 * full.norm());
        prop_assert!(c.rank() <= f.rank());
        prop_assert!(c.rank() <= n);
    }

    #[test]
    fn frob_norm_matches_dense(seed in any::<u64>(), n in 1usize..=40, r in 1usize..=12) {
        let mut rng = rng(seed);
        let f = indefinite_factor(&mut rng, n, r);
        let want = dense(&f).norm();
        // cancellation between columns limits any method to the size of the terms
        let terms = (f.l().abs() * f.d().abs() * f.l().abs().transpose()).norm();
        prop_assert!((frob_norm(&f) - want).abs() <= 1e-12 * terms);
    }

    #[test]
    fn combine_matches_dense_sum(seed in any::<u64>(), w1 in -3.0f64..3.0, w2 in -3.0f64..3.0) {
        let mut rng = rng(seed);
        let a = indefinite_factor(&mut rng, 8, 3);
        let b = indefinite_factor(&mut rng, 8, 4);
        let c = combine(&[(w1, &a), (w2, &b)], &CompressionOptions::with_tol(1e-14)).unwrap();
        let want = dense(&a) * w1 + dense(&b) * w2;
        let scale = (dense(&a) * w1).norm() + (dense(&b) * w2).norm();
        prop_assert!((dense(&c) - want).norm() <= 1e-12 * scale.max(1e-300));
    }

    #[test]
    // interior nodes jittered by up to 40% of the spacing; end points fixed
    fn quadrature_weights_reproduce_moments(jitter in proptest::collection::vec(-0.4f64..0.4, 2..=10), h in 0.01f64..10.0) {
        let m = jitter.len() - 1;
        let s: Vec<f64> = (0..=m)
            .map(|k| {
                let j = if k == 0 || k == m { 0.0 } else { jitter[k] };
                (k as f64 + j) / m as f64 * h
            })
            .collect();
        let w = quad_weights(&s, h).unwrap();
        for j in 0..s.len() {
            let q: f64 = s.iter().zip(&w).map(|(s, w)| w / h * (s / h).powi(j as i32)).sum();
            prop_assert!((q - 1.0 / (j as f64 + 1.0)).abs() < 1e-9, "j={} q={}", j, q);
        }
    }

    #[test]
    fn pi_update_is_scale_invariant(e_prev in 1e-8f64..1.0, e_new in 1e-8f64..1.0, c in 1e-3f64..1e3, p in 1usize..8) {
        let params = ControllerParams::new(1e-4);
        let mut scaled = params;
        scaled.tol *= c;
        let a = pi_update(e_prev, e_new, 0.1, &params, p);
        let b = pi_update(e_prev * c, e_new * c, 0.1, &scaled, p);
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn incremental_nodes_stay_exact(seed in any::<u64>(), ratios in proptest::collection::vec(0.8f64..1.25, 1..12), degree in 1usize..=9) {
        let mut r = rng(seed);
        let p = random_problem(&mut r, 4, 2, 1.0);
        let opts = FlowOptions { exp: ExpActionOptions::with_tol(1e-10), ..FlowOptions::default() };
        let mut st = init_quadrature(&p, 0.1, degree, NodePolicy::Incremental, &opts).unwrap();
        for q in ratios {
            let q = q.clamp(0.8 + 1e-9, 1.25 - 1e-9);
            st = update_quadrature(&st, st.h() * q, &p, &opts).unwrap();
            prop_assert!(st.fresh_blocks() <= degree + 1);
            prop_assert_eq!(st.nodes().len(), degree + 1);
            prop_assert!(st.nodes().windows(2).all(|w| w[0] < w[1]));
            prop_assert!(st.nodes().iter().all(|&s| (0.0..=st.h()).contains(&s)));
            prop_assert!(moment_residual(&st) <= 1e-12, "residual {}", moment_residual(&st));
        }
    }
}

#[test]
fn quad_weights_moment_residual_up_to_degree_nine() {
    for d in 1..=9 {
        let h = 0.37;
        let s: Vec<f64> = (0..=d).map(|k| h * k as f64 / d as f64).collect();
        let w = quad_weights(&s, h).unwrap();
        for j in 0..=d {
            let q: f64 = s.iter().zip(&w).map(|(s, w)| w / h * (s / h).powi(j as i32)).sum();
            assert!((q - 1.0 / (j as f64 + 1.0)).abs() <= 1e-12, "d={d} j={j}");
        }
    }
}

#[test]
fn additive_weights_satisfy_order_conditions() {
    for s in 1..=8 {
        for sym in [false, true] {
            let g = additive_coeffs(s, sym).unwrap();
            assert!(order_condition_residual(&g.values, sym) <= 1e-12, "s={s} sym={sym}");
        }
    }
}

#[test]
fn asymmetric_weights_closed_form() {
    let fact = |k: u64| (1..=k).product::<u64>() as f64;
    for s in 1..=8u64 {
        let g = additive_coeffs_exact(s as usize, false).unwrap();
        for k in 1..=s {
            let sign = if (s - k) % 2 == 0 { 1.0 } else { -1.0 };
            let want = sign * (k as f64).powi(s as i32) / (fact(k) * fact(s - k));
            let got = g[k as usize - 1].to_f64().unwrap();
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "s={s} k={k}");
        }
    }
}
