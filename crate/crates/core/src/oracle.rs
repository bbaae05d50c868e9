//! Dense reference solutions for small problems.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::subflows::{check_psd, gauss_legendre, ProblemData};

/// Largest dimension the dense oracle accepts.
pub const MAX_DENSE_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseProblem {
    pub a: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub t_final: f64,
}

impl DenseProblem {
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        s: DMatrix<f64>,
        p0: DMatrix<f64>,
        t_final: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if n > MAX_DENSE_DIM {
            return Err(Error::RefusedDense {
                n,
                limit: MAX_DENSE_DIM,
            });
        }
        for (name, m) in [("A", &a), ("Q", &q), ("S", &s), ("P0", &p0)] {
            if m.shape() != (n, n) {
                return Err(Error::InvalidInput(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        check_psd(&q, "Q")?;
        check_psd(&s, "S")?;
        check_psd(&p0, "P0")?;
        Ok(Self {
            a,
            q,
            s,
            p0,
            t_final,
        })
    }

    pub fn from_problem(p: &ProblemData) -> Result<Self> {
        let n = p.dim();
        if n > MAX_DENSE_DIM {
            return Err(Error::RefusedDense {
                n,
                limit: MAX_DENSE_DIM,
            });
        }
        let dense = |f: &crate::lowrank::LdltFactor| f.l() * f.d() * f.l().transpose();
        Self::new(
            p.a.to_dense(),
            dense(&p.q),
            p.s.to_dense(),
            dense(&p.p0),
            p.t_final,
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Right-hand side `AᵀP + PA + Q - PSP`.
    pub fn rhs(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let ps = p * &self.s;
        self.a.tr_mul(p) + p * &self.a + &self.q - ps * p
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// `P(T)` by classical RK4 with `n_fine` steps, symmetrizing after each step.
pub fn dense_dre_reference(p: &DenseProblem, n_fine: usize) -> Result<DMatrix<f64>> {
    if n_fine == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    let h = p.t_final / n_fine as f64;
    let mut cur = p.p0.clone();
    for step in 0..n_fine {
        let k1 = p.rhs(&cur);
        let k2 = p.rhs(&(&cur + &k1 * (h / 2.0)));
        let k3 = p.rhs(&(&cur + &k2 * (h / 2.0)));
        let k4 = p.rhs(&(&cur + &k3 * h));
        cur += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        symmetrize(&mut cur);
        if !cur.iter().all(|v| v.is_finite()) {
            return Err(Error::OracleDiverged { step });
        }
    }
    Ok(cur)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subflow {
    /// Affine part `AᵀP + PA + Q`.
    Affine,
    /// Quadratic part `-PSP`.
    Quadratic,
}

/// Gauss-Legendre points per panel of the integral term.
const PANEL_NODES: usize = 8;

/// Exact dense evaluation of one subflow over a step of size `h`.
pub fn dense_subflow(
    kind: Subflow,
    pm: &DMatrix<f64>,
    h: f64,
    p: &DenseProblem,
) -> Result<DMatrix<f64>> {
    let n = p.dim();
    match kind {
        Subflow::Quadratic => {
            let m = DMatrix::identity(n, n) + pm * &p.s * h;
            let lu = m.clone().lu();
            let singular = || Error::StepTooLarge {
                h,
                condition: f64::INFINITY,
            };
            let inv = lu.try_inverse().ok_or_else(singular)?;
            let cond = one_norm(&m) * one_norm(&inv);
            if !cond.is_finite() || cond > 1.0 / f64::EPSILON {
                return Err(Error::StepTooLarge { h, condition: cond });
            }
            let mut out = inv * pm;
            symmetrize(&mut out);
            Ok(out)
        }
        Subflow::Affine => {
            let e = (&p.a * h).exp();
            let mut out = e.tr_mul(pm) * &e + affine_integral(p, h);
            symmetrize(&mut out);
            Ok(out)
        }
    }
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `∫₀ʰ exp(sAᵀ) Q exp(sA) ds` by composite Gauss-Legendre, doubling the
/// panel count until successive values agree to 1e-12 relative.
fn affine_integral(p: &DenseProblem, h: f64) -> DMatrix<f64> {
    let (nodes, weights) = gauss_legendre(PANEL_NODES);
    let eval = |panels: usize| {
        let w = h / panels as f64;
        let mut acc = DMatrix::zeros(p.dim(), p.dim());
        for j in 0..panels {
            for (x, wt) in nodes.iter().zip(&weights) {
                let s = (j as f64 + x) * w;
                let e = (&p.a * s).exp();
                acc += e.tr_mul(&p.q) * e * (wt * w);
            }
        }
        acc
    };
    let mut panels = 1;
    let mut prev = eval(panels);
    for _ in 0..12 {
        panels *= 2;
        let next = eval(panels);
        let scale = next.norm().max(f64::MIN_POSITIVE);
        if (&next - &prev).norm() <= 1e-12 * scale {
            return next;
        }
        prev = next;
    }
    prev
}

/// `‖approx - reference‖_F / ‖reference‖_F`.
pub fn relative_error(approx: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<f64> {
    if approx.shape() != reference.shape() {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: {:?} vs {:?}",
            approx.shape(),
            reference.shape()
        )));
    }
    let r = reference.norm();
    if r == 0.0 {
        return Err(Error::InvalidReference);
    }
    Ok((approx - reference).norm() / r)
}
