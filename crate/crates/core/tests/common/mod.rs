#![allow(dead_code)]

use dresplit::expaction::StiffOperator;
use dresplit::lowrank::LdltFactor;
use dresplit::subflows::{ProblemData, QuadraticOperator};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `L Lᵀ` with Gaussian `L` of `rank` columns, entries of variance `1/n`.
pub fn psd_factor(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> LdltFactor {
    LdltFactor::from_basis(gaussian(rng, n, rank, 1.0 / (n as f64).sqrt()))
}

/// Gaussian basis with a symmetric core of mixed sign.
pub fn indefinite_factor(rng: &mut ChaCha8Rng, n: usize, rank: usize) -> LdltFactor {
    let l = gaussian(rng, n, rank, 1.0);
    let d = gaussian(rng, rank, rank, 1.0);
    LdltFactor::new(l, (&d + d.transpose()) * 0.5).unwrap()
}

pub fn random_problem(rng: &mut ChaCha8Rng, n: usize, rank: usize, t_final: f64) -> ProblemData {
    let a = gaussian(rng, n, n, 1.0 / (n as f64).sqrt());
    let q = psd_factor(rng, n, rank);
    let b = gaussian(rng, n, rank, 1.0 / (n as f64).sqrt());
    let p0 = psd_factor(rng, n, rank);
    ProblemData::new(
        StiffOperator::dense(a).unwrap(),
        q,
        QuadraticOperator::LowRank {
            b,
            r_inv: DMatrix::identity(rank, rank),
        },
        p0,
        t_final,
    )
    .unwrap()
}

pub fn scalar_problem(a: f64, q: f64, s: f64, p0: f64, t_final: f64) -> ProblemData {
    let one = |v: f64| DMatrix::from_element(1, 1, v);
    let factor = |v: f64| LdltFactor::new(one(1.0), one(v)).unwrap();
    ProblemData::new(
        StiffOperator::dense(one(a)).unwrap(),
        factor(q),
        QuadraticOperator::Dense(one(s)),
        factor(p0),
        t_final,
    )
    .unwrap()
}

pub fn dense(f: &LdltFactor) -> DMatrix<f64> {
    f.l() * f.d() * f.l().transpose()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}
