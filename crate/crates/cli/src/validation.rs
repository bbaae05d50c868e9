//! Oracle comparisons behind `dresplit validate`.
//!
//! Each `measure_*` function returns raw metrics; [`run_checks`] compares
//! them with the thresholds below.

use dresplit::adaptive::{integrate_fixed, SolverOptions};
use dresplit::expaction::{ExpActionOptions, StiffOperator};
use dresplit::lowrank::{compress, frob_norm, to_dense, CompressionOptions, LdltFactor};
use dresplit::oracle::{dense_dre_reference, dense_subflow, relative_error, DenseProblem, Subflow};
use dresplit::schemes::{additive_coeffs, additive_coeffs_exact, order_condition_residual, SchemeSpec};
use dresplit::subflows::{
    gauss_legendre, init_quadrature, quad_weights, solve_f, solve_g, update_quadrature, FlowOptions, NodePolicy,
    ProblemData, QuadratureState, QuadraticOperator,
};
use nalgebra::DMatrix;
use num::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::problem::{generate_problem, GeneratorConfig};

pub const SUBFLOW_TOL: f64 = 1e-10;
pub const MOMENT_TOL: f64 = 1e-12;
pub const COEFF_TOL: f64 = 1e-12;
pub const ESTIMATE_SLOPE_SLACK: f64 = 0.3;
pub const TANH_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn accurate_flow() -> FlowOptions {
    FlowOptions {
        exp: ExpActionOptions::with_tol(1e-12),
        compression: CompressionOptions::default(),
    }
}

fn dense(f: &LdltFactor) -> DMatrix<f64> {
    f.l() * f.d() * f.l().transpose()
}

/// Worst relative errors `(G, F)` of the factored subflows against dense
/// evaluation over random instances with `N ≤ 20`.
pub fn measure_subflow_agreement(instances: usize, seed: u64) -> dresplit::Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = accurate_flow();
    let (mut wg, mut wf) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let n = 2 + i % 19;
        let rank = (1 + i % 5).min(n);
        let cfg = GeneratorConfig {
            n,
            rank,
            seed: rng.random(),
            ..GeneratorConfig::default()
        };
        let g = generate_problem(&cfg)?;
        let dp = g.dense.expect("small problem has a dense mirror");
        let scale = 1.0 / (n as f64).sqrt();
        let l = DMatrix::from_fn(n, rank + 1, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        let f = LdltFactor::from_basis(l);
        let h = 0.05 + 0.1 * (i % 4) as f64;

        let out = solve_g(&f, h, &g.problem.s)?;
        let want = dense_subflow(Subflow::Quadratic, &dense(&f), h, &dp)?;
        wg = wg.max(relative_error(&dense(&out), &want)?);

        let st = init_quadrature(&g.problem, h, 9, NodePolicy::Incremental, &opts)?;
        let out = solve_f(&f, h, &g.problem, &st, &opts)?;
        let want = dense_subflow(Subflow::Affine, &dense(&f), h, &dp)?;
        wf = wf.max(relative_error(&dense(&out), &want)?);
    }
    Ok((wg, wf))
}

/// `max_j |Σ wₖ (sₖ/h)ʲ / h - 1/(j+1)|` for `j ≤ degree`.
pub fn moment_residual(nodes: &[f64], weights: &[f64], h: f64, degree: usize) -> f64 {
    (0..=degree)
        .map(|j| {
            let q: f64 = nodes
                .iter()
                .zip(weights)
                .map(|(s, w)| w / h * (s / h).powi(j as i32))
                .sum();
            (q - 1.0 / (j as f64 + 1.0)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn state_moment_residual(st: &QuadratureState) -> f64 {
    moment_residual(st.nodes(), st.weights(), st.h(), st.degree())
}

/// Worst moment residual of equidistant, Gauss-Legendre and perturbed node
/// sets for degrees `1..=max_degree`.
pub fn measure_moment_residuals(max_degree: usize, seed: u64) -> dresplit::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for d in 1..=max_degree {
        for h in [0.01, 0.37, 5.0] {
            let equi: Vec<f64> = (0..=d).map(|k| h * k as f64 / d as f64).collect();
            worst = worst.max(moment_residual(&equi, &quad_weights(&equi, h)?, h, d));

            let (x, _) = gauss_legendre(d / 2 + 1);
            let gl: Vec<f64> = x.iter().map(|x| x * h).collect();
            let w = quad_weights(&gl, h)?;
            worst = worst.max(moment_residual(&gl, &w, h, gl.len() - 1));

            let jitter: Vec<f64> = (0..=d)
                .map(|k| h * (k as f64 + 0.3 * (rng.random::<f64>() - 0.5) * (k > 0 && k < d) as u8 as f64) / d as f64)
                .collect();
            worst = worst.max(moment_residual(&jitter, &quad_weights(&jitter, h)?, h, d));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct CoefficientReport {
    pub max_order_residual: f64,
    pub asym2_exact: bool,
    pub max_closed_form_deviation: f64,
}

pub fn measure_coefficients(max_stages: usize) -> dresplit::Result<CoefficientReport> {
    let mut max_order_residual = 0.0f64;
    let mut max_closed_form_deviation = 0.0f64;
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    for s in 1..=max_stages {
        for sym in [false, true] {
            let g = additive_coeffs(s, sym)?;
            max_order_residual = max_order_residual.max(order_condition_residual(&g.values, sym));
        }
        let exact = additive_coeffs_exact(s, false)?;
        for k in 1..=s {
            let sign = if (s - k) % 2 == 0 { 1.0 } else { -1.0 };
            let want = sign * (k as f64).powi(s as i32) / (fact(k) * fact(s - k));
            let got = exact[k - 1].to_f64().unwrap_or(f64::NAN);
            max_closed_form_deviation = max_closed_form_deviation.max((got - want).abs() / want.abs().max(1.0));
        }
    }
    let asym2 = additive_coeffs(2, false)?.values;
    Ok(CoefficientReport {
        max_order_residual,
        asym2_exact: asym2 == vec![-1.0, 2.0],
        max_closed_form_deviation,
    })
}

/// Scalar `ṗ = 1 - p²`, `p(0) = 0`, solved by `tanh`.
pub fn tanh_problem() -> ProblemData {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    ProblemData::new(
        StiffOperator::dense(one(0.0)).expect("1x1 operator"),
        LdltFactor::from_basis(one(1.0)),
        QuadraticOperator::Dense(one(1.0)),
        LdltFactor::zero(1),
        1.0,
    )
    .expect("valid scalar problem")
}

/// Observed orders `(label, solution slope, estimate slope, expected estimate order)`
/// on the tanh problem. The estimate is accumulated over all steps.
pub fn measure_estimate_orders(ladder: &[usize]) -> dresplit::Result<Vec<(String, f64, f64, usize)>> {
    let p = tanh_problem();
    let mut opts = SolverOptions::default();
    opts.flow = accurate_flow();
    let specs = [
        SchemeSpec::asymmetric(2),
        SchemeSpec::asymmetric(3),
        SchemeSpec::symmetric(2),
        SchemeSpec::symmetric(3),
    ];
    let mut out = Vec::new();
    for spec in specs {
        let mut err = Vec::new();
        let mut est = Vec::new();
        for &n in ladder {
            let tr = integrate_fixed(&p, &spec, n, &opts)?;
            let h = 1.0 / n as f64;
            let value = to_dense(&tr.final_factor)?[(0, 0)];
            err.push((h, (value - 1f64.tanh()).abs()));
            est.push((h, tr.steps.iter().filter_map(|s| s.err_est).sum::<f64>()));
        }
        let (se, _) = crate::study::fit_slope(&err, (1e-13, 1.0));
        let (sest, _) = crate::study::fit_slope(&est, (0.0, f64::INFINITY));
        out.push((
            spec.label(),
            se.unwrap_or(f64::NAN),
            sest.unwrap_or(f64::NAN),
            spec.estimate_order().expect("additive with two or more stages"),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CompressionReport {
    pub cases: usize,
    /// Largest `‖ΔP‖_F / (rel_tol ‖P‖_F)`; at most 1 when the contract holds.
    pub worst_ratio: f64,
    pub rank_increased: bool,
    pub worst_norm_deviation: f64,
}

pub fn measure_compression(cases: usize, seed: u64) -> CompressionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = CompressionReport {
        cases,
        worst_ratio: 0.0,
        rank_increased: false,
        worst_norm_deviation: 0.0,
    };
    for _ in 0..cases {
        let n = rng.random_range(1..=64);
        let r = rng.random_range(1..=20);
        let l = DMatrix::from_fn(n, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        // low-rank structure plus a decaying tail so truncation has work to do
        let decay: Vec<f64> = (0..r).map(|k| 10f64.powf(-(k as f64) * rng.random_range(0.0..1.5))).collect();
        let d = DMatrix::from_fn(r, r, |i, j| {
            let v: f64 = rng.sample(StandardNormal);
            v * (decay[i] * decay[j]).sqrt()
        });
        let f = LdltFactor::new(l, (&d + d.transpose()) * 0.5).expect("consistent shapes");
        let tol = 10f64.powi(-rng.random_range(2..=12));
        let c = compress(&f, &CompressionOptions::with_tol(tol));
        let full = dense(&f);
        let norm = full.norm();
        if norm > 0.0 {
            rep.worst_ratio = rep.worst_ratio.max((dense(&c) - &full).norm() / (tol * norm));
            rep.worst_norm_deviation = rep.worst_norm_deviation.max((frob_norm(&f) - norm).abs() / norm);
        }
        rep.rank_increased |= c.rank() > f.rank();
    }
    rep
}

#[derive(Debug, Clone)]
pub struct EconomyReport {
    pub updates: usize,
    /// Largest number of fresh blocks of any in-band update.
    pub max_fresh_in_band: usize,
    /// Histogram of fresh blocks per in-band update (index = count).
    pub histogram: Vec<usize>,
    pub fresh_at_large_ratio: usize,
    pub expected_at_large_ratio: usize,
    pub worst_moment_residual: f64,
}

/// Step-size ratios resembling a PI controller: the log ratio follows an
/// AR(1) process, clamped strictly inside `(0.8, 1.25)`.
pub fn pi_like_ratios(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (0.8f64.ln() + 1e-4, 1.25f64.ln() - 1e-4);
    let mut x = 0.0f64;
    (0..len)
        .map(|_| {
            let noise: f64 = rng.sample(StandardNormal);
            x = (0.6 * x + 0.06 * noise).clamp(lo, hi);
            x.exp()
        })
        .collect()
}

/// Drives the incremental quadrature through `ratios`, then applies one
/// ratio of 1.5.
pub fn measure_quadrature_economy(degree: usize, ratios: &[f64], seed: u64) -> dresplit::Result<EconomyReport> {
    let g = generate_problem(&GeneratorConfig {
        n: 6,
        rank: 2,
        seed,
        ..GeneratorConfig::default()
    })?;
    let p = g.problem;
    let opts = FlowOptions {
        exp: ExpActionOptions::with_tol(1e-10),
        ..FlowOptions::default()
    };
    let mut st = init_quadrature(&p, 0.05, degree, NodePolicy::Incremental, &opts)?;
    let mut rep = EconomyReport {
        updates: ratios.len(),
        max_fresh_in_band: 0,
        histogram: vec![0; degree + 2],
        fresh_at_large_ratio: 0,
        expected_at_large_ratio: degree + 1,
        worst_moment_residual: state_moment_residual(&st),
    };
    for &ratio in ratios {
        st = update_quadrature(&st, st.h() * ratio, &p, &opts)?;
        rep.max_fresh_in_band = rep.max_fresh_in_band.max(st.fresh_blocks());
        rep.histogram[st.fresh_blocks().min(degree + 1)] += 1;
        rep.worst_moment_residual = rep.worst_moment_residual.max(state_moment_residual(&st));
    }
    st = update_quadrature(&st, st.h() * 1.5, &p, &opts)?;
    rep.fresh_at_large_ratio = st.fresh_blocks();
    rep.worst_moment_residual = rep.worst_moment_residual.max(state_moment_residual(&st));
    Ok(rep)
}

pub fn measure_tanh_reference() -> dresplit::Result<f64> {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let p = DenseProblem::new(m(0.0), m(1.0), m(1.0), m(0.0), 1.0)?;
    let r = dense_dre_reference(&p, 2000)?;
    Ok((r[(0, 0)] - 1f64.tanh()).abs())
}

fn check(name: &'static str, result: dresplit::Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_checks(seed: u64) -> Vec<Check> {
    vec![
        check(
            "dense reference reproduces tanh",
            measure_tanh_reference().map(|e| (e <= TANH_TOL, format!("error {e:.2e}"))),
        ),
        check(
            "factored subflows match dense evaluation",
            measure_subflow_agreement(100, seed).map(|(g, f)| {
                (
                    g <= SUBFLOW_TOL && f <= SUBFLOW_TOL,
                    format!("worst G {g:.2e}, worst F {f:.2e}"),
                )
            }),
        ),
        check(
            "quadrature weights reproduce moments",
            measure_moment_residuals(9, seed).map(|r| (r <= MOMENT_TOL, format!("worst residual {r:.2e}"))),
        ),
        check(
            "combination weights satisfy order conditions",
            measure_coefficients(8).map(|c| {
                (
                    c.max_order_residual <= COEFF_TOL && c.asym2_exact && c.max_closed_form_deviation <= COEFF_TOL,
                    format!(
                        "residual {:.2e}, closed-form deviation {:.2e}, asym2 exact: {}",
                        c.max_order_residual, c.max_closed_form_deviation, c.asym2_exact
                    ),
                )
            }),
        ),
        check(
            "embedded estimates have the expected order",
            measure_estimate_orders(&[16, 32, 64, 128]).map(|rows| {
                let ok = rows
                    .iter()
                    .all(|(_, _, s, p)| (s - *p as f64).abs() <= ESTIMATE_SLOPE_SLACK);
                let detail = rows
                    .iter()
                    .map(|(l, _, s, p)| format!("{l} {s:.2} (want {p})"))
                    .collect::<Vec<_>>()
                    .join(", ");
                (ok, detail)
            }),
        ),
        check(
            "compression honours its tolerance",
            Ok({
                let c = measure_compression(200, seed);
                (
                    c.worst_ratio <= 1.0 + 1e-8 && !c.rank_increased && c.worst_norm_deviation <= 1e-12,
                    format!(
                        "worst error/tol {:.3}, norm deviation {:.2e}",
                        c.worst_ratio, c.worst_norm_deviation
                    ),
                )
            }),
        ),
    ]
}
