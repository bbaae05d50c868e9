//! Action of the matrix exponential `V ↦ exp(t Aᵀ) V` on tall blocks.
//!
//! The linear ODE `Ẏ = Aᵀ Y` is integrated with the 3-stage, 5th-order
//! Radau IA scheme. The stage system `(I - τ A_rk ⊗ Aᵀ)` is decoupled by
//! diagonalizing the Butcher matrix, which leaves one real and one complex
//! `N x N` shifted system per substep size. Accuracy is controlled by
//! comparing `n` and `2n` substeps and doubling until the relative Frobenius
//! difference drops below the requested tolerance.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{Complex, DMatrix, Matrix3, Vector3, LU};
use nalgebra_sparse::CsrMatrix;

use crate::error::{Error, Result};

type C64 = Complex<f64>;

const CACHE_LIMIT: usize = 256;

#[derive(Debug, Clone)]
pub enum OperatorStorage {
    Dense(DMatrix<f64>),
    Sparse {
        a: CsrMatrix<f64>,
        at: CsrMatrix<f64>,
    },
}

/// The state operator `A` of the Riccati equation.
///
/// Holds a cache of factorized shifted systems keyed by substep size. The
/// cache only saves work; results do not depend on its contents.
pub struct StiffOperator {
    storage: OperatorStorage,
    cache: Mutex<HashMap<u64, Arc<ShiftedSystems>>>,
}

impl std::fmt::Debug for StiffOperator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StiffOperator")
            .field("dim", &self.dim())
            .field("sparse", &self.is_sparse())
            .finish()
    }
}

impl Clone for StiffOperator {
    fn clone(&self) -> Self {
        Self::from_storage(self.storage.clone())
    }
}

impl StiffOperator {
    pub fn dense(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "operator must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        Ok(Self::from_storage(OperatorStorage::Dense(a)))
    }

    pub fn sparse(a: CsrMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidInput(format!(
                "operator must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let at = a.transpose();
        Ok(Self::from_storage(OperatorStorage::Sparse { a, at }))
    }

    fn from_storage(storage: OperatorStorage) -> Self {
        Self {
            storage,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn storage(&self) -> &OperatorStorage {
        &self.storage
    }

    pub fn dim(&self) -> usize {
        match &self.storage {
            OperatorStorage::Dense(a) => a.nrows(),
            OperatorStorage::Sparse { a, .. } => a.nrows(),
        }
    }

    pub fn is_sparse(&self) -> bool {
        matches!(self.storage, OperatorStorage::Sparse { .. })
    }

    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            OperatorStorage::Dense(a) => a * v,
            OperatorStorage::Sparse { a, .. } => a * v,
        }
    }

    /// `Aᵀ V`.
    pub fn apply_transpose(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            OperatorStorage::Dense(a) => a.tr_mul(v),
            OperatorStorage::Sparse { at, .. } => at * v,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            OperatorStorage::Dense(a) => a.clone(),
            OperatorStorage::Sparse { a, .. } => {
                let mut out = DMatrix::zeros(a.nrows(), a.ncols());
                for (i, j, v) in a.triplet_iter() {
                    out[(i, j)] += *v;
                }
                out
            }
        }
    }

    fn transpose_dense(&self) -> DMatrix<f64> {
        match &self.storage {
            OperatorStorage::Dense(a) => a.transpose(),
            OperatorStorage::Sparse { .. } => self.to_dense().transpose(),
        }
    }

    fn shifted(&self, tau: f64) -> Option<Arc<ShiftedSystems>> {
        let key = tau.to_bits();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Some(hit.clone());
        }
        let built = Arc::new(ShiftedSystems::build(&self.transpose_dense(), tau)?);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, built.clone());
        Some(built)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpActionOptions {
    pub rel_tol: f64,
    pub initial_substeps: usize,
    pub max_doublings: usize,
}

impl Default for ExpActionOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            initial_substeps: 1,
            max_doublings: 30,
        }
    }
}

impl ExpActionOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidInput(format!(
                "exponential-action rel_tol must be positive, got {}",
                self.rel_tol
            )));
        }
        if self.initial_substeps == 0 || self.max_doublings == 0 {
            return Err(Error::InvalidInput(
                "initial_substeps and max_doublings must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of an exponential action with its diagnostics.
#[derive(Debug, Clone)]
pub struct ExpActionResult {
    pub value: DMatrix<f64>,
    /// Relative difference between the last two refinement levels.
    pub estimate: f64,
    pub substeps: usize,
    /// Estimates of every refinement level, coarsest first.
    pub history: Vec<f64>,
}

/// Below this estimate a doubling that fails to halve the difference means
/// roundoff dominates and further refinement is pointless.
const STALL_REGIME: f64 = 1e-6;

/// `exp(t Aᵀ) V` to relative Frobenius tolerance `opts.rel_tol`.
pub fn exp_action(
    a: &StiffOperator,
    t: f64,
    v: &DMatrix<f64>,
    opts: &ExpActionOptions,
) -> Result<DMatrix<f64>> {
    exp_action_detailed(a, t, v, opts).map(|r| r.value)
}

pub fn exp_action_detailed(
    a: &StiffOperator,
    t: f64,
    v: &DMatrix<f64>,
    opts: &ExpActionOptions,
) -> Result<ExpActionResult> {
    opts.validate()?;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::InvalidInput(format!(
            "exponential action needs finite t >= 0, got {t}"
        )));
    }
    if v.nrows() != a.dim() {
        return Err(Error::InvalidInput(format!(
            "block has {} rows, operator dimension is {}",
            v.nrows(),
            a.dim()
        )));
    }
    if t == 0.0 || v.ncols() == 0 {
        return Ok(ExpActionResult {
            value: v.clone(),
            estimate: 0.0,
            substeps: 0,
            history: Vec::new(),
        });
    }

    let mut n = opts.initial_substeps;
    let mut prev = integrate(a, t, n, v);
    let mut history = Vec::new();
    let mut last = None;
    for _ in 0..opts.max_doublings {
        n *= 2;
        let cur = integrate(a, t, n, v);
        let est = match (&prev, &cur) {
            (Some(p), Some(c)) => relative_difference(c, p),
            _ => f64::INFINITY,
        };
        history.push(est);
        if est <= opts.rel_tol {
            return Ok(ExpActionResult {
                value: cur.expect("finite estimate implies a solution"),
                estimate: est,
                substeps: n,
                history,
            });
        }
        let stalled = match &last {
            Some((_, e)) => est < STALL_REGIME && est > 0.5 * e,
            None => false,
        };
        if let Some(c) = &cur {
            if last.as_ref().is_none_or(|(_, e)| est <= *e) {
                last = Some((c.clone(), est));
            }
        }
        if stalled {
            break;
        }
        prev = cur;
    }
    let (best, estimate) = last.unwrap_or_else(|| (v.clone(), f64::INFINITY));
    Err(Error::ToleranceNotMet {
        best: Box::new(best),
        estimate,
        rel_tol: opts.rel_tol,
    })
}

fn relative_difference(fine: &DMatrix<f64>, coarse: &DMatrix<f64>) -> f64 {
    let diff = (fine - coarse).norm();
    let scale = fine.norm();
    if !diff.is_finite() || !scale.is_finite() {
        return f64::INFINITY;
    }
    if scale == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / scale
    }
}

/// `n` Radau IA substeps of size `t / n`; `None` if a shifted system is singular.
fn integrate(a: &StiffOperator, t: f64, n: usize, v: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let tau = t / n as f64;
    let sys = a.shifted(tau)?;
    let mut y = v.clone();
    for _ in 0..n {
        y = sys.step(a, &y);
    }
    y.iter().all(|x| x.is_finite()).then_some(y)
}

/// Decoupled Radau IA stage system for linear problems:
/// `y ← y + g₁ (U₁ - y) + 2 Re(g₂ (U₂ - y))` with `Uᵢ = (I - τλᵢ Aᵀ)⁻¹ y`.
#[derive(Debug, Clone, Copy)]
pub struct RadauSplit {
    pub lambda_real: f64,
    pub weight_real: f64,
    pub lambda_complex: C64,
    pub weight_complex: C64,
}

/// Butcher tableau of the 3-stage Radau IA method.
pub fn radau_ia_tableau() -> (Matrix3<f64>, Vector3<f64>) {
    let s6 = 6f64.sqrt();
    let a = Matrix3::new(
        1.0 / 9.0,
        (-1.0 - s6) / 18.0,
        (-1.0 + s6) / 18.0,
        1.0 / 9.0,
        (88.0 + 7.0 * s6) / 360.0,
        (88.0 - 43.0 * s6) / 360.0,
        1.0 / 9.0,
        (88.0 + 43.0 * s6) / 360.0,
        (88.0 - 7.0 * s6) / 360.0,
    );
    let b = Vector3::new(1.0 / 9.0, (16.0 + s6) / 36.0, (16.0 - s6) / 36.0);
    (a, b)
}

pub fn radau_split() -> &'static RadauSplit {
    static SPLIT: OnceLock<RadauSplit> = OnceLock::new();
    SPLIT.get_or_init(|| {
        let (a, b) = radau_ia_tableau();
        let eigs = a.complex_eigenvalues();
        let mut real = None;
        let mut cplx = None;
        for l in eigs.iter() {
            if l.im.abs() < 1e-12 {
                real = Some(Complex::new(l.re, 0.0));
            } else if l.im > 0.0 {
                cplx = Some(*l);
            }
        }
        let l1 = real.expect("Radau IA has one real eigenvalue");
        let l2 = cplx.expect("Radau IA has a complex pair");
        let ac = a.map(|x| Complex::new(x, 0.0));
        let t = nalgebra::Matrix3::from_columns(&[
            eigenvector(&ac, l1),
            eigenvector(&ac, l2),
            eigenvector(&ac, l2.conj()),
        ]);
        let tinv = t.try_inverse().expect("Radau IA matrix is diagonalizable");
        let c = tinv * Vector3::from_element(Complex::new(1.0, 0.0));
        let d = b.map(|x| Complex::new(x, 0.0)).transpose() * t;
        RadauSplit {
            lambda_real: l1.re,
            weight_real: (d[0] * c[0] / l1).re,
            lambda_complex: l2,
            weight_complex: d[1] * c[1] / l2,
        }
    })
}

/// Null vector of `A - λI` as the cross product of two of its rows.
fn eigenvector(a: &Matrix3<C64>, lambda: C64) -> Vector3<C64> {
    let m = a - Matrix3::identity() * lambda;
    let cross = |u: Vector3<C64>, v: Vector3<C64>| {
        Vector3::new(
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        )
    };
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    [(0, 1), (0, 2), (1, 2)]
        .iter()
        .map(|&(i, j)| cross(rows[i], rows[j]))
        .max_by(|u, v| u.norm().total_cmp(&v.norm()))
        .unwrap()
}

struct ShiftedSystems {
    tau: f64,
    real: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    complex: LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl ShiftedSystems {
    fn build(mt: &DMatrix<f64>, tau: f64) -> Option<Self> {
        let split = radau_split();
        let n = mt.nrows();
        let real = DMatrix::identity(n, n) - mt * (tau * split.lambda_real);
        let shift = split.lambda_complex * tau;
        let complex = DMatrix::from_fn(n, n, |i, j| {
            let id = if i == j { 1.0 } else { 0.0 };
            Complex::new(id, 0.0) - shift * mt[(i, j)]
        });
        let real = real.lu();
        let complex = complex.lu();
        if !real.is_invertible() || !complex.is_invertible() {
            return None;
        }
        Some(Self {
            tau,
            real,
            complex,
        })
    }

    fn step(&self, op: &StiffOperator, y: &DMatrix<f64>) -> DMatrix<f64> {
        let split = radau_split();
        let mut u1 = self.real.solve(y).expect("invertible");
        let yc = y.map(|x| Complex::new(x, 0.0));
        let mut u2 = self.complex.solve(&yc).expect("invertible");
        if op.is_sparse() {
            // one step of iterative refinement against the sparse operator
            let lam1 = self.tau * split.lambda_real;
            let r1 = y - (&u1 - op.apply_transpose(&u1) * lam1);
            u1 += self.real.solve(&r1).expect("invertible");

            let lam2 = split.lambda_complex * self.tau;
            let re = u2.map(|z| z.re);
            let im = u2.map(|z| z.im);
            let (are, aim) = (op.apply_transpose(&re), op.apply_transpose(&im));
            let r2 = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
                let az = Complex::new(are[(i, j)], aim[(i, j)]);
                yc[(i, j)] - (u2[(i, j)] - lam2 * az)
            });
            u2 += self.complex.solve(&r2).expect("invertible");
        }
        let g1 = split.weight_real;
        let g2 = split.weight_complex;
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| {
            let yv = y[(i, j)];
            let z = u2[(i, j)] - yv;
            yv + g1 * (u1[(i, j)] - yv) + 2.0 * (g2.re * z.re - g2.im * z.im)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    /// Stability function of Radau IA(3): the (2,3) subdiagonal Padé approximant.
    fn pade23(z: f64) -> f64 {
        (1.0 + 2.0 * z / 5.0 + z * z / 20.0) / (1.0 - 3.0 * z / 5.0 + 3.0 * z * z / 20.0 - z * z * z / 60.0)
    }

    #[test]
    fn tableau_row_sums_and_weights() {
        let (a, b) = radau_ia_tableau();
        let s6 = 6f64.sqrt();
        let c = [0.0, (6.0 - s6) / 10.0, (6.0 + s6) / 10.0];
        for i in 0..3 {
            assert!((a.row(i).sum() - c[i]).abs() < 1e-15);
        }
        assert!((b.sum() - 1.0).abs() < 1e-15);
        // quadrature order 5: Σ bᵢ cᵢ^k = 1/(k+1)
        for k in 0..5 {
            let q: f64 = (0..3).map(|i| b[i] * c[i].powi(k)).sum();
            assert!((q - 1.0 / (k as f64 + 1.0)).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn split_reproduces_stability_function() {
        let s = radau_split();
        for &z in &[-50.0, -3.0, -0.7, 0.0, 0.2, 1.1] {
            let u1 = 1.0 / (1.0 - z * s.lambda_real);
            let u2 = Complex::new(1.0, 0.0) / (Complex::new(1.0, 0.0) - s.lambda_complex * z);
            let r = 1.0 + s.weight_real * (u1 - 1.0) + 2.0 * (s.weight_complex * (u2 - 1.0)).re;
            assert!((r - pade23(z)).abs() < 1e-13 * pade23(z).abs().max(1.0), "z={z}");
        }
    }

    #[test]
    fn zero_operator_is_identity() {
        let a = StiffOperator::dense(DMatrix::zeros(3, 3)).unwrap();
        let v = dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0];
        let w = exp_action(&a, 2.5, &v, &ExpActionOptions::default()).unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn nilpotent_operator() {
        // Aᵀ = [[0,1],[0,0]]
        let a = StiffOperator::dense(dmatrix![0.0, 0.0; 1.0, 0.0]).unwrap();
        let w = exp_action(&a, 1.0, &dmatrix![0.0; 1.0], &ExpActionOptions::default()).unwrap();
        assert!((w[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((w[(1, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn t_zero_and_empty_blocks_short_circuit() {
        let a = StiffOperator::dense(dmatrix![1.0, 2.0; 3.0, 4.0]).unwrap();
        let v = dmatrix![1.0; -1.0];
        assert_eq!(exp_action(&a, 0.0, &v, &ExpActionOptions::default()).unwrap(), v);
        let empty = DMatrix::zeros(2, 0);
        assert_eq!(exp_action(&a, 1.0, &empty, &ExpActionOptions::default()).unwrap().ncols(), 0);
        assert!(exp_action(&a, -1.0, &v, &ExpActionOptions::default()).is_err());
    }

    #[test]
    fn diagonal_operator_matches_scalar_exponentials() {
        let diag = nalgebra::dvector![-3.0, -0.5, 0.0, 0.8];
        let a = StiffOperator::dense(DMatrix::from_diagonal(&diag)).unwrap();
        let v = DMatrix::from_fn(4, 2, |i, j| 1.0 + i as f64 - j as f64 * 0.5);
        let t = 0.7;
        let w = exp_action(&a, t, &v, &ExpActionOptions::with_tol(1e-12)).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let e = (t * diag[i]).exp() * v[(i, j)];
                assert!((w[(i, j)] - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    #[test]
    fn sparse_and_dense_storage_agree() {
        let dense = dmatrix![-2.0, 1.0, 0.0; 1.0, -2.0, 1.0; 0.0, 1.0, -2.0] * 4.0;
        let coo = nalgebra_sparse::CooMatrix::from(&dense);
        let sp = StiffOperator::sparse(CsrMatrix::from(&coo)).unwrap();
        let de = StiffOperator::dense(dense).unwrap();
        let v = dmatrix![1.0; 0.0; -1.0];
        let opts = ExpActionOptions::with_tol(1e-12);
        let a = exp_action(&sp, 0.4, &v, &opts).unwrap();
        let b = exp_action(&de, 0.4, &v, &opts).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn unreachable_tolerance_reports_best_iterate() {
        let a = StiffOperator::dense(dmatrix![-1.0, 5.0; 0.0, -3.0]).unwrap();
        let opts = ExpActionOptions {
            rel_tol: 1e-300,
            initial_substeps: 1,
            max_doublings: 2,
        };
        match exp_action(&a, 1.0, &dmatrix![1.0; 1.0], &opts) {
            Err(Error::ToleranceNotMet { best, estimate, .. }) => {
                assert_eq!(best.nrows(), 2);
                assert!(estimate > 1e-300);
            }
            other => panic!("expected ToleranceNotMet, got {other:?}"),
        }
    }
}
