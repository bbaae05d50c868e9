mod common;

use common::*;
use dresplit::expaction::ExpActionOptions;
use dresplit::lowrank::CompressionOptions;
use dresplit::oracle::{dense_subflow, relative_error, DenseProblem, Subflow};
use dresplit::subflows::{init_quadrature, solve_f, solve_g, FlowOptions, NodePolicy};

fn accurate() -> FlowOptions {
    FlowOptions {
        exp: ExpActionOptions::with_tol(1e-12),
        compression: CompressionOptions::default(),
    }
}

#[test]
fn factored_subflows_match_dense_evaluation() {
    let mut rng = rng(7);
    let opts = accurate();
    let mut worst = (0.0f64, 0.0f64);
    for inst in 0..100 {
        let n = 2 + inst % 19;
        let rank = 1 + inst % 5;
        let p = random_problem(&mut rng, n, rank.min(n), 1.0);
        let dp = DenseProblem::from_problem(&p).unwrap();
        let f = psd_factor(&mut rng, n, (rank + 1).min(n));
        let h = 0.05 + 0.1 * (inst % 4) as f64;

        let g = solve_g(&f, h, &p.s).unwrap();
        let g_ref = dense_subflow(Subflow::Quadratic, &dense(&f), h, &dp).unwrap();
        let eg = relative_error(&dense(&g), &g_ref).unwrap();

        let st = init_quadrature(&p, h, 9, NodePolicy::Incremental, &opts).unwrap();
        let fl = solve_f(&f, h, &p, &st, &opts).unwrap();
        let f_ref = dense_subflow(Subflow::Affine, &dense(&f), h, &dp).unwrap();
        let ef = relative_error(&dense(&fl), &f_ref).unwrap();

        worst = (worst.0.max(eg), worst.1.max(ef));
        assert!(eg <= 1e-10, "instance {inst}: G error {eg:e}");
        assert!(ef <= 1e-10, "instance {inst}: F error {ef:e}");
    }
    println!("worst G {:e}, worst F {:e}", worst.0, worst.1);
}

#[test]
fn affine_flow_matches_congruence_plus_integral() {
    let mut rng = rng(11);
    let p = random_problem(&mut rng, 8, 3, 1.0);
    let dp = DenseProblem::from_problem(&p).unwrap();
    let h = 0.3;
    let e = (&dp.a * h).exp();
    // fine trapezoid for the integral term
    let m = 20_000;
    let mut integral = (&dp.q + e.tr_mul(&dp.q) * &e) * 0.5;
    for k in 1..m {
        let ek = (&dp.a * (h * k as f64 / m as f64)).exp();
        integral += ek.tr_mul(&dp.q) * ek;
    }
    integral *= h / m as f64;
    let want = e.tr_mul(&dp.p0) * &e + integral;
    let opts = accurate();
    let st = init_quadrature(&p, h, 6, NodePolicy::Incremental, &opts).unwrap();
    let got = solve_f(&p.p0, h, &p, &st, &opts).unwrap();
    assert!(relative_error(&dense(&got), &want).unwrap() < 1e-8);
}
