//! Time-stepping operators built from the two subflows.
//!
//! Lie and Strang are the classical multiplicative compositions. The additive
//! schemes combine `s` Lie chains at substeps `h/k`, `k = 1..s`, with real
//! weights `γₖ`:
//!
//! ```text
//! asymmetric (order s):   Σₖ γₖ (T_F(h/k) T_G(h/k))ᵏ
//! symmetric  (order 2s):  Σₖ γₖ [(T_F(h/k) T_G(h/k))ᵏ + (T_G(h/k) T_F(h/k))ᵏ]
//! ```
//!
//! Dropping the last chain and reweighting the rest gives an embedded method
//! of lower order at no extra flow cost; the difference of the two is the
//! local error estimate.

use num::{BigInt, BigRational, One, Signed, ToPrimitive, Zero};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lowrank::{combine, concat, frob_norm, LdltFactor};
use crate::subflows::{
    init_quadrature, recompute_quadrature, solve_f, solve_g, update_quadrature, FlowOptions,
    NodePolicy, ProblemData, QuadratureState,
};

/// Largest stage count for which coefficients are considered well conditioned.
pub const MAX_WELL_CONDITIONED_STAGES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeKind {
    Lie,
    Strang,
    AsymmetricAdditive,
    SymmetricAdditive,
}

/// Which subflow acts last. `FG` means `T_F ∘ T_G`: `G` first, then `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OperatorOrder {
    #[default]
    FG,
    GF,
}

impl OperatorOrder {
    pub fn flipped(self) -> Self {
        match self {
            Self::FG => Self::GF,
            Self::GF => Self::FG,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub stages: usize,
    pub operator_order: OperatorOrder,
}

impl SchemeSpec {
    pub fn lie() -> Self {
        Self {
            kind: SchemeKind::Lie,
            stages: 1,
            operator_order: OperatorOrder::FG,
        }
    }

    pub fn strang() -> Self {
        Self {
            kind: SchemeKind::Strang,
            stages: 1,
            operator_order: OperatorOrder::FG,
        }
    }

    pub fn asymmetric(stages: usize) -> Self {
        Self {
            kind: SchemeKind::AsymmetricAdditive,
            stages,
            operator_order: OperatorOrder::FG,
        }
    }

    pub fn symmetric(stages: usize) -> Self {
        Self {
            kind: SchemeKind::SymmetricAdditive,
            stages,
            operator_order: OperatorOrder::FG,
        }
    }

    pub fn with_order(mut self, order: OperatorOrder) -> Self {
        self.operator_order = order;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidInput("schemes need at least one stage".into()));
        }
        Ok(())
    }

    /// Convergence order.
    pub fn order(&self) -> usize {
        match self.kind {
            SchemeKind::Lie => 1,
            SchemeKind::Strang => 2,
            SchemeKind::AsymmetricAdditive => self.stages,
            SchemeKind::SymmetricAdditive => 2 * self.stages,
        }
    }

    /// Order of the embedded method's local error estimate, if there is one.
    pub fn estimate_order(&self) -> Option<usize> {
        match self.kind {
            SchemeKind::AsymmetricAdditive if self.stages >= 2 => Some(self.stages - 1),
            SchemeKind::SymmetricAdditive if self.stages >= 2 => Some(2 * self.stages - 2),
            _ => None,
        }
    }

    pub fn is_additive(&self) -> bool {
        matches!(
            self.kind,
            SchemeKind::AsymmetricAdditive | SchemeKind::SymmetricAdditive
        )
    }

    /// Divisors `k` of the substeps `h/k` at which the affine flow is evaluated.
    pub fn substep_divisors(&self) -> Vec<usize> {
        match (self.kind, self.operator_order) {
            (SchemeKind::Lie, _) | (SchemeKind::Strang, OperatorOrder::FG) => vec![1],
            (SchemeKind::Strang, OperatorOrder::GF) => vec![2],
            _ => (1..=self.stages).collect(),
        }
    }

    /// Default quadrature exactness degree: scheme order plus one.
    pub fn default_quad_degree(&self) -> usize {
        self.order() + 1
    }

    pub fn label(&self) -> String {
        let base = match self.kind {
            SchemeKind::Lie => "lie".to_string(),
            SchemeKind::Strang => "strang".to_string(),
            SchemeKind::AsymmetricAdditive => format!("asym{}", self.stages),
            SchemeKind::SymmetricAdditive => format!("sym{}", self.stages),
        };
        match self.operator_order {
            OperatorOrder::FG => base,
            OperatorOrder::GF => format!("{base}-gf"),
        }
    }
}

/// Stage weights `γ` and whether they were flagged as ill-conditioned.
#[derive(Debug, Clone, PartialEq)]
pub struct StageWeights {
    pub values: Vec<f64>,
    /// Set for more than [`MAX_WELL_CONDITIONED_STAGES`] stages, where the
    /// weights grow large and alternate in sign.
    pub conditioning_warning: bool,
}

/// Exact rational solution of the order conditions.
///
/// Asymmetric: `Σ γₖ = 1`, `Σ γₖ k⁻ʲ = 0` (`j = 1..s-1`).
/// Symmetric: `2 Σ γₖ = 1`, `Σ γₖ k⁻²ʲ = 0` (`j = 1..s-1`).
pub fn additive_coeffs_exact(s: usize, symmetric: bool) -> Result<Vec<BigRational>> {
    if s == 0 {
        return Err(Error::InvalidInput("stage count must be at least 1".into()));
    }
    let step = if symmetric { 2 } else { 1 };
    let mut m: Vec<Vec<BigRational>> = (0..s)
        .map(|j| {
            let mut row: Vec<BigRational> = (1..=s)
                .map(|k| {
                    let den = BigInt::from(k as u64).pow((step * j) as u32);
                    BigRational::new(BigInt::one(), den)
                })
                .collect();
            let rhs = if j == 0 {
                if symmetric {
                    BigRational::new(BigInt::one(), BigInt::from(2))
                } else {
                    BigRational::one()
                }
            } else {
                BigRational::zero()
            };
            row.push(rhs);
            row
        })
        .collect();
    solve_rational(&mut m);
    Ok(m.into_iter().map(|row| row[s].clone()).collect())
}

/// Gauss-Jordan elimination on an augmented `s x (s+1)` system in place.
fn solve_rational(m: &mut [Vec<BigRational>]) {
    let n = m.len();
    for col in 0..n {
        let piv = (col..n)
            .find(|&r| !m[r][col].is_zero())
            .expect("order-condition matrix is nonsingular");
        m.swap(col, piv);
        let p = m[col][col].clone();
        for x in m[col].iter_mut() {
            *x = &*x / &p;
        }
        for r in 0..n {
            if r != col && !m[r][col].is_zero() {
                let f = m[r][col].clone();
                let pivot_row = m[col].clone();
                for (x, y) in m[r].iter_mut().zip(pivot_row.iter()) {
                    *x = &*x - &f * y;
                }
            }
        }
    }
}

fn to_f64(q: &BigRational) -> f64 {
    q.to_f64().unwrap_or_else(|| {
        // numerator/denominator too large for a direct conversion
        let sign = if q.is_negative() { -1.0 } else { 1.0 };
        let n = q.numer().abs().to_f64().unwrap_or(f64::INFINITY);
        let d = q.denom().to_f64().unwrap_or(f64::INFINITY);
        sign * n / d
    })
}

/// Order-condition residuals of floating-point weights (largest absolute value).
pub fn order_condition_residual(gamma: &[f64], symmetric: bool) -> f64 {
    let s = gamma.len();
    let step = if symmetric { 2 } else { 1 };
    (0..s)
        .map(|j| {
            let lhs: f64 = gamma
                .iter()
                .enumerate()
                .map(|(i, g)| g * ((i + 1) as f64).powi(-((step * j) as i32)))
                .sum();
            let rhs = if j > 0 {
                0.0
            } else if symmetric {
                0.5
            } else {
                1.0
            };
            (lhs - rhs).abs()
        })
        .fold(0.0, f64::max)
}

pub fn additive_coeffs(s: usize, symmetric: bool) -> Result<StageWeights> {
    let exact = additive_coeffs_exact(s, symmetric)?;
    let values: Vec<f64> = exact.iter().map(to_f64).collect();
    let conditioning_warning = s > MAX_WELL_CONDITIONED_STAGES;
    if conditioning_warning {
        log::warn!("{s}-stage additive weights are poorly conditioned");
    } else {
        let resid = order_condition_residual(&values, symmetric);
        debug_assert!(resid <= 1e-12, "order conditions violated: {resid:e}");
    }
    Ok(StageWeights {
        values,
        conditioning_warning,
    })
}

/// Weights of the embedded method: the `(s-1)`-stage weights padded with `0`.
pub fn embedded_coeffs(s: usize, symmetric: bool) -> Result<Vec<f64>> {
    if s < 2 {
        return Err(Error::NoEmbeddedMethod { stages: s });
    }
    let mut beta = additive_coeffs(s - 1, symmetric)?.values;
    beta.push(0.0);
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemeCoefficients {
    pub gamma: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    /// `αₖ = γₖ - βₖ` (`α_s = γ_s`), the weights of the error estimate.
    pub alpha: Option<Vec<f64>>,
}

impl SchemeCoefficients {
    pub fn for_scheme(spec: &SchemeSpec) -> Result<Self> {
        spec.validate()?;
        let symmetric = match spec.kind {
            SchemeKind::AsymmetricAdditive => false,
            SchemeKind::SymmetricAdditive => true,
            _ => {
                return Ok(Self {
                    gamma: vec![1.0],
                    beta: None,
                    alpha: None,
                })
            }
        };
        let gamma = additive_coeffs(spec.stages, symmetric)?.values;
        let beta = embedded_coeffs(spec.stages, symmetric).ok();
        let alpha = beta
            .as_ref()
            .map(|b| gamma.iter().zip(b).map(|(g, b)| g - b).collect());
        Ok(Self { gamma, beta, alpha })
    }
}

/// Quadrature states for every substep size a scheme needs within one step.
#[derive(Debug, Clone)]
pub struct QuadratureSet {
    h: f64,
    states: Vec<(usize, QuadratureState)>,
}

impl QuadratureSet {
    pub fn new(
        problem: &ProblemData,
        h: f64,
        divisors: &[usize],
        degree: usize,
        policy: NodePolicy,
        opts: &FlowOptions,
    ) -> Result<Self> {
        let states = divisors
            .par_iter()
            .map(|&k| Ok((k, init_quadrature(problem, h / k as f64, degree, policy, opts)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h, states })
    }

    pub fn for_scheme(
        problem: &ProblemData,
        spec: &SchemeSpec,
        h: f64,
        degree: usize,
        policy: NodePolicy,
        opts: &FlowOptions,
    ) -> Result<Self> {
        Self::new(problem, h, &spec.substep_divisors(), degree, policy, opts)
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn get(&self, k: usize) -> Result<&QuadratureState> {
        self.states
            .iter()
            .find(|(d, _)| *d == k)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::InvalidInput(format!("no quadrature prepared for substep h/{k}")))
    }

    pub fn states(&self) -> impl Iterator<Item = (usize, &QuadratureState)> {
        self.states.iter().map(|(k, s)| (*k, s))
    }

    /// Fresh node blocks computed by the transition that produced this set.
    pub fn fresh_blocks(&self) -> usize {
        self.states.iter().map(|(_, s)| s.fresh_blocks()).sum()
    }

    pub fn update(&self, h_new: f64, problem: &ProblemData, opts: &FlowOptions) -> Result<Self> {
        let states = self
            .states
            .par_iter()
            .map(|(k, s)| Ok((*k, update_quadrature(s, h_new / *k as f64, problem, opts)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h: h_new, states })
    }

    pub fn recompute(&self, problem: &ProblemData, opts: &FlowOptions) -> Result<Self> {
        let states = self
            .states
            .par_iter()
            .map(|(k, s)| Ok((*k, recompute_quadrature(s, problem, opts)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { h: self.h, states })
    }
}

/// `k` repetitions of the Lie step at substep `h/k`.
pub fn chain(
    f: &LdltFactor,
    h: f64,
    k: usize,
    direction: OperatorOrder,
    problem: &ProblemData,
    state: &QuadratureState,
    opts: &FlowOptions,
) -> Result<LdltFactor> {
    if k == 0 {
        return Err(Error::InvalidInput("chain length must be at least 1".into()));
    }
    let sub = h / k as f64;
    let mut cur = f.clone();
    for _ in 0..k {
        cur = match direction {
            OperatorOrder::FG => {
                let g = solve_g(&cur, sub, &problem.s)?;
                solve_f(&g, sub, problem, state, opts)?
            }
            OperatorOrder::GF => {
                let g = solve_f(&cur, sub, problem, state, opts)?;
                solve_g(&g, sub, &problem.s)?
            }
        };
    }
    Ok(cur)
}

/// One Lie (`T_F(h) T_G(h)`) or Strang (`T_G(h/2) T_F(h) T_G(h/2)`) step.
pub fn multiplicative_step(
    f: &LdltFactor,
    h: f64,
    spec: &SchemeSpec,
    problem: &ProblemData,
    states: &QuadratureSet,
    opts: &FlowOptions,
) -> Result<LdltFactor> {
    match spec.kind {
        SchemeKind::Lie => chain(f, h, 1, spec.operator_order, problem, states.get(1)?, opts),
        SchemeKind::Strang => match spec.operator_order {
            OperatorOrder::FG => {
                let a = solve_g(f, h / 2.0, &problem.s)?;
                let b = solve_f(&a, h, problem, states.get(1)?, opts)?;
                solve_g(&b, h / 2.0, &problem.s)
            }
            OperatorOrder::GF => {
                let st = states.get(2)?;
                let a = solve_f(f, h / 2.0, problem, st, opts)?;
                let b = solve_g(&a, h, &problem.s)?;
                solve_f(&b, h / 2.0, problem, st, opts)
            }
        },
        _ => Err(Error::InvalidInput(format!(
            "{} is not a multiplicative scheme",
            spec.label()
        ))),
    }
}

/// Result of one additive step.
#[derive(Debug, Clone)]
pub struct AdditiveStep {
    pub next: LdltFactor,
    /// Frobenius norm of the α-weighted combination, if an embedded method exists.
    pub error_estimate: Option<f64>,
    /// The chains in evaluation order `(k, direction)`.
    pub chains: Vec<(usize, OperatorOrder, LdltFactor)>,
}

/// One additive step together with its embedded error estimate.
///
/// The chains are independent and run on the ambient rayon pool; they are
/// combined in fixed `(k, direction)` order, so the result does not depend on
/// scheduling.
pub fn additive_step(
    f: &LdltFactor,
    h: f64,
    spec: &SchemeSpec,
    coeffs: &SchemeCoefficients,
    problem: &ProblemData,
    states: &QuadratureSet,
    opts: &FlowOptions,
) -> Result<AdditiveStep> {
    if !spec.is_additive() {
        return Err(Error::InvalidInput(format!(
            "{} is not an additive scheme",
            spec.label()
        )));
    }
    let s = spec.stages;
    let mut jobs = Vec::with_capacity(2 * s);
    for k in 1..=s {
        jobs.push((k, spec.operator_order));
        if spec.kind == SchemeKind::SymmetricAdditive {
            jobs.push((k, spec.operator_order.flipped()));
        }
    }
    let results: Vec<LdltFactor> = jobs
        .par_iter()
        .map(|&(k, dir)| chain(f, h, k, dir, problem, states.get(k)?, opts))
        .collect::<Result<_>>()?;
    let chains: Vec<(usize, OperatorOrder, LdltFactor)> = jobs
        .into_iter()
        .zip(results)
        .map(|((k, d), c)| (k, d, c))
        .collect();

    let weighted = |w: &[f64]| -> Vec<(f64, &LdltFactor)> {
        chains.iter().map(|(k, _, c)| (w[k - 1], c)).collect()
    };
    let next = combine(&weighted(&coeffs.gamma), &opts.compression)?;
    let error_estimate = match &coeffs.alpha {
        Some(alpha) => Some(frob_norm(&combine(&weighted(alpha), &opts.compression)?)),
        None => None,
    };
    Ok(AdditiveStep {
        next,
        error_estimate,
        chains,
    })
}

/// Weighted chain sum without compression (for identity checks).
pub fn raw_combination(
    chains: &[(usize, OperatorOrder, LdltFactor)],
    weights: &[f64],
) -> Result<LdltFactor> {
    let terms: Vec<(f64, &LdltFactor)> = chains.iter().map(|(k, _, c)| (weights[k - 1], c)).collect();
    concat(&terms)
}

/// One step of any scheme. Returns the new factor and the error estimate
/// (additive schemes with at least two stages only).
pub fn scheme_step(
    f: &LdltFactor,
    h: f64,
    spec: &SchemeSpec,
    coeffs: &SchemeCoefficients,
    problem: &ProblemData,
    states: &QuadratureSet,
    opts: &FlowOptions,
) -> Result<(LdltFactor, Option<f64>)> {
    if spec.is_additive() {
        let st = additive_step(f, h, spec, coeffs, problem, states, opts)?;
        Ok((st.next, st.error_estimate))
    } else {
        Ok((multiplicative_step(f, h, spec, problem, states, opts)?, None))
    }
}
