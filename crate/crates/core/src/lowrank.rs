//! Symmetric low-rank factors `P = L D Lᵀ` with a tall basis `L` and a small,
//! possibly indefinite core `D`.
//!
//! Every product in the solver (subflow outputs, quadrature sums, additive
//! combinations) is carried in this form. Column compression keeps the
//! number of columns close to the numerical rank of the represented matrix.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest state dimension `to_dense` will materialize by default.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct LdltFactor {
    l: DMatrix<f64>,
    d: DMatrix<f64>,
}

/// Truncation settings for [`compress`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionOptions {
    /// Relative truncation threshold on the core spectrum. `None` means
    /// `N * f64::EPSILON` for a factor of dimension `N`.
    pub rel_tol: Option<f64>,
    pub max_rank: Option<usize>,
}

impl Default for CompressionOptions {
    fn default() -> Self {
        Self {
            rel_tol: None,
            max_rank: None,
        }
    }
}

impl CompressionOptions {
    pub fn with_tol(rel_tol: f64) -> Self {
        Self {
            rel_tol: Some(rel_tol),
            max_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.rel_tol {
            if !(t >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "compression rel_tol must be nonnegative, got {t}"
                )));
            }
        }
        if self.max_rank == Some(0) {
            return Err(Error::InvalidInput("max_rank must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_tol(&self, n: usize) -> f64 {
        self.rel_tol.unwrap_or(n.max(1) as f64 * f64::EPSILON)
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

impl LdltFactor {
    /// Builds a factor, symmetrizing the core.
    pub fn new(l: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() {
            return Err(Error::InvalidInput(format!(
                "core must be square, got {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        if l.ncols() != d.nrows() {
            return Err(Error::InvalidInput(format!(
                "basis has {} columns but core is {}x{}",
                l.ncols(),
                d.nrows(),
                d.ncols()
            )));
        }
        Ok(Self {
            l,
            d: symmetrize(&d),
        })
    }

    /// `L` with identity core, i.e. `P = L Lᵀ`.
    pub fn from_basis(l: DMatrix<f64>) -> Self {
        let r = l.ncols();
        Self {
            l,
            d: DMatrix::identity(r, r),
        }
    }

    /// The rank-0 representation of the `n x n` zero matrix.
    pub fn zero(n: usize) -> Self {
        Self {
            l: DMatrix::zeros(n, 0),
            d: DMatrix::zeros(0, 0),
        }
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.l, self.d)
    }

    /// Same factor with the core multiplied by `w`.
    pub fn scaled(&self, w: f64) -> Self {
        Self {
            l: self.l.clone(),
            d: &self.d * w,
        }
    }

    /// Smallest eigenvalue of the core. For a compressed factor (orthonormal
    /// basis, diagonal core) this is the smallest eigenvalue of the product.
    pub fn min_core_eigenvalue(&self) -> Option<f64> {
        if self.rank() == 0 {
            return None;
        }
        let eig = SymmetricEigen::new(self.d.clone());
        eig.eigenvalues.iter().copied().reduce(f64::min)
    }
}

/// Weighted sum `Σ wᵢ Lᵢ Dᵢ Lᵢᵀ` without compression. Columns are concatenated
/// in the given order.
pub fn concat(terms: &[(f64, &LdltFactor)]) -> Result<LdltFactor> {
    let first = terms
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot combine an empty sequence".into()))?;
    let n = first.1.dim();
    if let Some((_, bad)) = terms.iter().find(|(_, f)| f.dim() != n) {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch in combination: {} vs {}",
            n,
            bad.dim()
        )));
    }
    let total: usize = terms.iter().map(|(_, f)| f.rank()).sum();
    let mut l = DMatrix::zeros(n, total);
    let mut d = DMatrix::zeros(total, total);
    let mut off = 0;
    for (w, f) in terms {
        let r = f.rank();
        if r == 0 {
            continue;
        }
        l.view_mut((0, off), (n, r)).copy_from(&f.l);
        d.view_mut((off, off), (r, r)).copy_from(&(&f.d * *w));
        off += r;
    }
    Ok(LdltFactor { l, d })
}

/// Weighted sum of factors followed by column compression.
///
/// Eigenvalues of the combined core below the rounding level of the inputs
/// (`max(N, r) * eps * Σ|wᵢ| ‖Pᵢ‖_F`) are discarded as well, so exact
/// cancellations come out as rank 0.
pub fn combine(terms: &[(f64, &LdltFactor)], opts: &CompressionOptions) -> Result<LdltFactor> {
    let cat = concat(terms)?;
    let scale: f64 = terms.iter().map(|(w, f)| w.abs() * frob_norm(f)).sum();
    let floor = cat.dim().max(cat.rank()) as f64 * f64::EPSILON * scale;
    Ok(compress_above(&cat, opts, floor))
}

/// Column compression: thin QR of `L`, eigendecomposition of `R D Rᵀ`, and
/// truncation of the small eigenvalues.
///
/// An eigenpair is a truncation candidate when `|λ| < tol * max|λ|`. The
/// candidates are dropped smallest first, and only while the Frobenius norm
/// of everything dropped stays within `tol * ‖P‖_F`. The result has an
/// orthonormal basis and a diagonal core ordered by decreasing `|λ|`.
pub fn compress(f: &LdltFactor, opts: &CompressionOptions) -> LdltFactor {
    compress_above(f, opts, 0.0)
}

/// [`compress`] that additionally drops every eigenvalue with `|λ| <= floor`.
fn compress_above(f: &LdltFactor, opts: &CompressionOptions, floor: f64) -> LdltFactor {
    let n = f.dim();
    if f.rank() == 0 {
        return LdltFactor::zero(n);
    }
    let tol = opts.effective_tol(n);

    let qr = f.l.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let core = symmetrize(&(&r * &f.d * r.transpose()));
    let eig = SymmetricEigen::new(core);

    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .abs()
            .total_cmp(&eig.eigenvalues[a].abs())
            .then(a.cmp(&b))
    });

    let lam = |i: usize| eig.eigenvalues[order[i]];
    let max_abs = lam(0).abs();
    if max_abs <= floor {
        return LdltFactor::zero(n);
    }
    let total_sq: f64 = eig.eigenvalues.iter().map(|x| x * x).sum();
    let budget_sq = (tol * tol) * total_sq;

    let mut keep = order.len();
    while keep > 0 && lam(keep - 1).abs() <= floor {
        keep -= 1;
    }
    let mut dropped_sq = 0.0;
    while keep > 0 {
        let v = lam(keep - 1);
        let candidate = v == 0.0 || v.abs() < tol * max_abs;
        if !candidate || dropped_sq + v * v > budget_sq {
            break;
        }
        dropped_sq += v * v;
        keep -= 1;
    }
    if let Some(cap) = opts.max_rank {
        keep = keep.min(cap);
    }
    if keep == 0 {
        return LdltFactor::zero(n);
    }

    let mut l = DMatrix::zeros(n, keep);
    let mut d = DMatrix::zeros(keep, keep);
    for (j, &idx) in order.iter().take(keep).enumerate() {
        let v = &q * eig.eigenvectors.column(idx);
        l.set_column(j, &v);
        d[(j, j)] = eig.eigenvalues[idx];
    }
    LdltFactor { l, d }
}

/// `‖L D Lᵀ‖_F`, without forming the `N x N` product.
pub fn frob_norm(f: &LdltFactor) -> f64 {
    if f.rank() == 0 {
        return 0.0;
    }
    // ‖L D Lᵀ‖ = ‖R D Rᵀ‖ for L = QR; the Gram-trace form squares any cancellation
    let r = f.l.clone().qr().r();
    (&r * &f.d * r.transpose()).norm()
}

/// Factor of `alpha * P1 + (1 - alpha) * P2`.
pub fn interpolate(
    f1: &LdltFactor,
    f2: &LdltFactor,
    alpha: f64,
    opts: &CompressionOptions,
) -> Result<LdltFactor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!(
            "interpolation weight must lie in [0, 1], got {alpha}"
        )));
    }
    combine(&[(alpha, f1), (1.0 - alpha, f2)], opts)
}

pub fn to_dense(f: &LdltFactor) -> Result<DMatrix<f64>> {
    to_dense_limited(f, DEFAULT_DENSE_LIMIT)
}

/// `L D Lᵀ` as an exactly symmetric dense matrix, refusing `N > limit`.
pub fn to_dense_limited(f: &LdltFactor, limit: usize) -> Result<DMatrix<f64>> {
    let n = f.dim();
    if n > limit {
        return Err(Error::RefusedDense { n, limit });
    }
    if f.rank() == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let p = &f.l * &f.d * f.l.transpose();
    Ok(symmetrize(&p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    /// Deterministic pseudo-random matrix, good enough for unit tests.
    fn pseudo(nr: usize, nc: usize, seed: u64) -> DMatrix<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(nr, nc, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn exact_cancellation_gives_rank_zero() {
        let f = LdltFactor::new(pseudo(5, 3, 1), pseudo(3, 3, 2)).unwrap();
        let out = combine(&[(1.0, &f), (-1.0, &f)], &CompressionOptions::default()).unwrap();
        assert_eq!(out.rank(), 0);
        assert_eq!(to_dense(&out).unwrap(), DMatrix::zeros(5, 5));
    }

    #[test]
    fn doubling_a_rank_one_factor() {
        let f = LdltFactor::new(dmatrix![1.0; 1.0], dmatrix![1.0]).unwrap();
        let out = combine(&[(2.0, &f)], &CompressionOptions::default()).unwrap();
        let p = to_dense(&out).unwrap();
        assert!(rel_diff(&p, &DMatrix::from_element(2, 2, 2.0)) < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = LdltFactor::from_basis(pseudo(4, 2, 3));
        let b = LdltFactor::from_basis(pseudo(5, 2, 3));
        assert!(matches!(
            combine(&[(1.0, &a), (1.0, &b)], &CompressionOptions::default()),
            Err(Error::InvalidInput(_))
        ));
        assert!(combine(&[], &CompressionOptions::default()).is_err());
    }

    #[test]
    fn duplicated_columns_collapse() {
        let v = pseudo(6, 1, 9);
        let mut l = DMatrix::zeros(6, 2);
        l.set_column(0, &v.column(0));
        l.set_column(1, &v.column(0));
        let f = LdltFactor::from_basis(l);
        let out = compress(&f, &CompressionOptions::default());
        assert_eq!(out.rank(), 1);
        let expect = &v * v.transpose() * 2.0;
        assert!(rel_diff(&to_dense(&out).unwrap(), &expect) < 1e-14);
        assert!(out.d()[(0, 0)] > 0.0);
    }

    #[test]
    fn orthonormal_diagonal_factor_is_a_no_op() {
        let q = pseudo(7, 3, 4).qr().q();
        let d = DMatrix::from_diagonal(&nalgebra::dvector![3.0, -2.0, 0.5]);
        let f = LdltFactor::new(q, d).unwrap();
        let out = compress(&f, &CompressionOptions::with_tol(0.1));
        assert_eq!(out.rank(), 3);
        assert!(rel_diff(&to_dense(&out).unwrap(), &to_dense(&f).unwrap()) < 1e-14);
    }

    #[test]
    fn compress_with_zero_tol_round_trips() {
        let f = LdltFactor::new(pseudo(9, 5, 11), pseudo(5, 5, 12)).unwrap();
        let out = compress(&f, &CompressionOptions::with_tol(0.0));
        assert!(rel_diff(&to_dense(&out).unwrap(), &to_dense(&f).unwrap()) < 1e-13);
    }

    #[test]
    fn compress_meets_bound_against_dense_eigensolver() {
        // Oracle: dense eigendecomposition of P, error of the best rank-k truncation
        // with the same number of retained terms.
        let f = LdltFactor::new(pseudo(10, 6, 21), pseudo(6, 6, 22)).unwrap();
        let p = to_dense(&f).unwrap();
        let tol = 1e-8;
        let out = compress(&f, &CompressionOptions::with_tol(tol));
        assert!(out.rank() <= f.rank());
        let err = (to_dense(&out).unwrap() - &p).norm();
        assert!(err <= tol * p.norm());

        let mut ev: Vec<f64> = SymmetricEigen::new(p.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
        let tail: f64 = ev[out.rank()..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-12 * p.norm());
    }

    #[test]
    fn max_rank_caps_output() {
        let f = LdltFactor::from_basis(pseudo(8, 5, 5));
        let out = compress(
            &f,
            &CompressionOptions {
                rel_tol: Some(0.0),
                max_rank: Some(2),
            },
        );
        assert_eq!(out.rank(), 2);
    }

    #[test]
    fn frob_norm_small_cases() {
        let f = LdltFactor::new(DMatrix::identity(2, 2), dmatrix![3.0, 0.0; 0.0, 4.0]).unwrap();
        assert!((frob_norm(&f) - 5.0).abs() < 1e-15);
        let g = LdltFactor::new(dmatrix![1.0; 1.0], dmatrix![2.0]).unwrap();
        assert!((frob_norm(&g) - 4.0).abs() < 1e-15);
        assert_eq!(frob_norm(&LdltFactor::zero(3)), 0.0);
    }

    #[test]
    fn frob_norm_matches_dense() {
        let f = LdltFactor::new(pseudo(12, 5, 31), pseudo(5, 5, 32)).unwrap();
        let dense = to_dense(&f).unwrap().norm();
        assert!((frob_norm(&f) - dense).abs() <= 1e-12 * dense);
    }

    #[test]
    fn interpolation_endpoints() {
        let opts = CompressionOptions::default();
        let f1 = LdltFactor::new(pseudo(6, 2, 41), pseudo(2, 2, 42)).unwrap();
        let f2 = LdltFactor::new(pseudo(6, 3, 43), pseudo(3, 3, 44)).unwrap();
        let p1 = to_dense(&f1).unwrap();
        let p2 = to_dense(&f2).unwrap();
        let a1 = to_dense(&interpolate(&f1, &f2, 1.0, &opts).unwrap()).unwrap();
        let a0 = to_dense(&interpolate(&f1, &f2, 0.0, &opts).unwrap()).unwrap();
        assert!(rel_diff(&a1, &p1) < 1e-14);
        assert!(rel_diff(&a0, &p2) < 1e-14);
        let mid = to_dense(&interpolate(&f1, &f1, 0.5, &opts).unwrap()).unwrap();
        assert!(rel_diff(&mid, &p1) < 1e-14);
        assert!(interpolate(&f1, &f2, 1.5, &opts).is_err());
    }

    #[test]
    fn dense_conversion() {
        assert_eq!(to_dense(&LdltFactor::zero(3)).unwrap(), DMatrix::zeros(3, 3));
        let d = DMatrix::from_diagonal(&nalgebra::dvector![1.0, -2.0, 3.0]);
        let f = LdltFactor::new(DMatrix::identity(3, 3), d.clone()).unwrap();
        assert_eq!(to_dense(&f).unwrap(), d);
        let big = LdltFactor::zero(10);
        assert!(matches!(
            to_dense_limited(&big, 5),
            Err(Error::RefusedDense { n: 10, limit: 5 })
        ));
    }

    #[test]
    fn core_is_symmetrized_on_construction() {
        let f = LdltFactor::new(DMatrix::identity(2, 2), dmatrix![1.0, 2.0; 0.0, 1.0]).unwrap();
        assert_eq!(f.d(), &dmatrix![1.0, 1.0; 1.0, 1.0]);
    }
}
