//! Exact flows of the two split subproblems in factored form.
//!
//! * `Ṗ = -PSP` has the closed form `(I + hPS)⁻¹P`, which for `P = LDLᵀ`
//!   only changes the core: `D ↦ (I + hDLᵀSL)⁻¹D`.
//! * `Ṗ = AᵀP + PA + Q` is `exp(hAᵀ)P exp(hA) + I_Q(h)` where the integral
//!   term `I_Q(h) = ∫₀ʰ exp(sAᵀ)Q exp(sA) ds` is replaced by an interpolatory
//!   quadrature whose per-node blocks `exp(sₖAᵀ)L_Q` are cached in a
//!   [`QuadratureState`] and reused across step-size changes.

use nalgebra::{DMatrix, SymmetricEigen};
use nalgebra_sparse::CsrMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expaction::{exp_action, ExpActionOptions, StiffOperator};
use crate::lowrank::{combine, concat, compress, CompressionOptions, LdltFactor};

/// Assumption tolerance for positive semi-definiteness checks.
pub const PSD_TOL: f64 = 1e-12;

/// Lower bound on the spacing of quadrature nodes, relative to `h`.
const NODE_GAP_TOL: f64 = 1e-12;

/// The matrix `S` of the quadratic term.
#[derive(Debug, Clone)]
pub enum QuadraticOperator {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix<f64>),
    /// `S = B R⁻¹ Bᵀ`, storing `B` and `R⁻¹`.
    LowRank { b: DMatrix<f64>, r_inv: DMatrix<f64> },
}

impl QuadraticOperator {
    pub fn dim(&self) -> usize {
        match self {
            Self::Dense(s) => s.nrows(),
            Self::Sparse(s) => s.nrows(),
            Self::LowRank { b, .. } => b.nrows(),
        }
    }

    pub fn apply(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Dense(s) => s * v,
            Self::Sparse(s) => s * v,
            Self::LowRank { b, r_inv } => b * (r_inv * b.tr_mul(v)),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Self::Dense(s) => s.clone(),
            Self::Sparse(s) => {
                let mut out = DMatrix::zeros(s.nrows(), s.ncols());
                for (i, j, v) in s.triplet_iter() {
                    out[(i, j)] += *v;
                }
                out
            }
            Self::LowRank { b, r_inv } => b * r_inv * b.transpose(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Self::Dense(s) => {
                if s.nrows() != s.ncols() {
                    return Err(Error::InvalidInput("S must be square".into()));
                }
                check_psd(s, "S")
            }
            Self::Sparse(s) => {
                if s.nrows() != s.ncols() {
                    return Err(Error::InvalidInput("S must be square".into()));
                }
                let t = s.transpose();
                let asym = (s - &t)
                    .values()
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs()));
                let scale = s.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if asym > PSD_TOL * scale.max(1.0) {
                    return Err(Error::InvalidInput("S must be symmetric".into()));
                }
                Ok(())
            }
            Self::LowRank { b, r_inv } => {
                if r_inv.nrows() != b.ncols() || r_inv.ncols() != b.ncols() {
                    return Err(Error::InvalidInput(format!(
                        "R⁻¹ must be {0}x{0} to match B",
                        b.ncols()
                    )));
                }
                check_psd(r_inv, "R⁻¹")
            }
        }
    }
}

/// Symmetric with eigenvalues ≥ `-PSD_TOL * max(1, max|λ|)`.
pub fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() == 0 {
        return Ok(());
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > PSD_TOL * scale {
        return Err(Error::InvalidInput(format!(
            "{name} is not symmetric (max asymmetry {asym:e})"
        )));
    }
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let top = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * top {
        return Err(Error::InvalidInput(format!(
            "{name} is not positive semi-definite (smallest eigenvalue {min:e})"
        )));
    }
    Ok(())
}

/// Data of `Ṗ = AᵀP + PA + Q - PSP`, `P(0) = P₀` on `[0, T]`.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub a: StiffOperator,
    /// `Q = L_Q D_Q L_Qᵀ`.
    pub q: LdltFactor,
    pub s: QuadraticOperator,
    pub p0: LdltFactor,
    pub t_final: f64,
}

impl ProblemData {
    pub fn new(
        a: StiffOperator,
        q: LdltFactor,
        s: QuadraticOperator,
        p0: LdltFactor,
        t_final: f64,
    ) -> Result<Self> {
        let n = a.dim();
        for (name, dim) in [("Q", q.dim()), ("S", s.dim()), ("P0", p0.dim())] {
            if dim != n {
                return Err(Error::InvalidInput(format!(
                    "{name} has dimension {dim}, A has {n}"
                )));
            }
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidInput(format!(
                "final time must be positive, got {t_final}"
            )));
        }
        check_psd(q.d(), "D_Q")?;
        check_psd(p0.d(), "D_0")?;
        s.validate()?;
        Ok(Self {
            a,
            q,
            s,
            p0,
            t_final,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.dim()
    }
}

/// Options shared by the subflow evaluations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FlowOptions {
    pub exp: ExpActionOptions,
    pub compression: CompressionOptions,
}

/// Nonlinear subflow `(I + hPS)⁻¹P` in factored form.
pub fn solve_g(f: &LdltFactor, h: f64, s: &QuadraticOperator) -> Result<LdltFactor> {
    if !(h >= 0.0) {
        return Err(Error::InvalidInput(format!("step must be >= 0, got {h}")));
    }
    if f.rank() == 0 || h == 0.0 {
        return Ok(f.clone());
    }
    let sl = s.apply(f.l());
    let k = f.l().tr_mul(&sl);
    let r = f.rank();
    let m = DMatrix::identity(r, r) + f.d() * &k * h;
    let lu = m.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::StepTooLarge {
        h,
        condition: f64::INFINITY,
    })?;
    let condition = norm1(&m) * norm1(&inv);
    if !condition.is_finite() || condition > 1.0 / f64::EPSILON {
        return Err(Error::StepTooLarge { h, condition });
    }
    let d = &inv * f.d();
    LdltFactor::new(f.l().clone(), d)
}

fn norm1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Weights of the interpolatory rule on `nodes` over `[0, h]`:
/// `Σₖ wₖ sₖʲ = hʲ⁺¹/(j+1)` for `j = 0..nodes.len()-1`.
pub fn quad_weights(nodes: &[f64], h: f64) -> Result<Vec<f64>> {
    let m = nodes.len();
    if m == 0 {
        return Err(Error::InvalidNodes("no nodes".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("interval length must be positive, got {h}")));
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_by(f64::total_cmp);
    if let Some(w) = sorted.windows(2).find(|w| w[1] - w[0] <= NODE_GAP_TOL * h) {
        return Err(Error::InvalidNodes(format!(
            "nodes {} and {} coincide",
            w[0], w[1]
        )));
    }
    // scaled to [0, 1]: Σ w̃ₖ xₖʲ = 1/(j+1), w = h w̃
    let x: Vec<f64> = nodes.iter().map(|s| s / h).collect();
    let v = DMatrix::from_fn(m, m, |j, k| x[k].powi(j as i32));
    let rhs = DMatrix::from_fn(m, 1, |j, _| 1.0 / (j as f64 + 1.0));
    let lu = v.clone().lu();
    let mut w = lu
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidNodes("singular moment system".into()))?;
    let resid = &rhs - &v * &w;
    w += lu.solve(&resid).expect("factorization already succeeded");
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidNodes("moment system is numerically singular".into()));
    }
    Ok(w.iter().map(|wi| wi * h).collect())
}

/// Gauss-Legendre nodes and weights on `[0, 1]` (Golub-Welsch).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let kf = k as f64;
        let b = kf / (4.0 * kf * kf - 1.0).sqrt();
        j[(k - 1, k)] = b;
        j[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let x = eig.eigenvalues[i];
            let v0 = eig.eigenvectors[(0, i)];
            ((x + 1.0) / 2.0, v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// How quadrature nodes follow step-size changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodePolicy {
    /// Keep most nodes and their cached blocks; move only what must move.
    #[default]
    Incremental,
    /// Equidistant nodes, all recomputed whenever `h` changes.
    Recompute,
    /// Gauss-Legendre nodes (about half as many), all recomputed when `h` changes.
    GaussLegendre,
}

/// Quadrature approximation of `I_Q(h)` with its cached node blocks.
#[derive(Debug, Clone)]
pub struct QuadratureState {
    degree: usize,
    policy: NodePolicy,
    h: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
    assembled: LdltFactor,
    fresh_blocks: usize,
}

impl QuadratureState {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn policy(&self) -> NodePolicy {
        self.policy
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    /// Number of node blocks computed by the transition that produced this state.
    pub fn fresh_blocks(&self) -> usize {
        self.fresh_blocks
    }
}

/// `exp(s Aᵀ) L_Q`, exact for `s = 0`.
fn node_block(problem: &ProblemData, s: f64, opts: &FlowOptions) -> Result<DMatrix<f64>> {
    if s == 0.0 {
        return Ok(problem.q.l().clone());
    }
    exp_action(&problem.a, s, problem.q.l(), &opts.exp)
}

fn node_blocks(problem: &ProblemData, nodes: &[f64], opts: &FlowOptions) -> Result<Vec<DMatrix<f64>>> {
    nodes
        .par_iter()
        .map(|&s| node_block(problem, s, opts))
        .collect()
}

fn initial_nodes(policy: NodePolicy, degree: usize, h: f64) -> Vec<f64> {
    match policy {
        NodePolicy::Incremental | NodePolicy::Recompute => {
            (0..=degree).map(|k| k as f64 * h / degree as f64).collect()
        }
        NodePolicy::GaussLegendre => {
            let n = degree / 2 + 1;
            gauss_legendre(n).0.into_iter().map(|x| x * h).collect()
        }
    }
}

fn assemble(
    problem: &ProblemData,
    weights: &[f64],
    blocks: &[DMatrix<f64>],
    opts: &FlowOptions,
) -> Result<LdltFactor> {
    let n = problem.dim();
    if problem.q.rank() == 0 {
        return Ok(LdltFactor::zero(n));
    }
    let parts: Vec<LdltFactor> = blocks
        .iter()
        .map(|b| LdltFactor::new(b.clone(), problem.q.d().clone()))
        .collect::<Result<_>>()?;
    let terms: Vec<(f64, &LdltFactor)> = weights.iter().copied().zip(parts.iter()).collect();
    // weights of an interpolatory rule do not cancel; plain compression suffices
    Ok(compress(&concat(&terms)?, &opts.compression))
}

fn build_state(
    problem: &ProblemData,
    degree: usize,
    policy: NodePolicy,
    h: f64,
    nodes: Vec<f64>,
    blocks: Vec<DMatrix<f64>>,
    fresh_blocks: usize,
    opts: &FlowOptions,
) -> Result<QuadratureState> {
    let weights = match policy {
        NodePolicy::GaussLegendre => {
            let (_, w) = gauss_legendre(nodes.len());
            w.into_iter().map(|w| w * h).collect()
        }
        _ => quad_weights(&nodes, h)?,
    };
    let assembled = assemble(problem, &weights, &blocks, opts)?;
    Ok(QuadratureState {
        degree,
        policy,
        h,
        nodes,
        weights,
        blocks,
        assembled,
        fresh_blocks,
    })
}

/// Fresh quadrature on `[0, h]` exact for polynomials of degree `degree`.
pub fn init_quadrature(
    problem: &ProblemData,
    h: f64,
    degree: usize,
    policy: NodePolicy,
    opts: &FlowOptions,
) -> Result<QuadratureState> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("quadrature needs h > 0, got {h}")));
    }
    if degree == 0 {
        return Err(Error::InvalidInput("quadrature degree must be at least 1".into()));
    }
    let nodes = initial_nodes(policy, degree, h);
    let blocks = node_blocks(problem, &nodes, opts)?;
    let fresh = nodes.len();
    build_state(problem, degree, policy, h, nodes, blocks, fresh, opts)
}

/// Recompute every node for the state's current `h`.
pub fn recompute_quadrature(
    state: &QuadratureState,
    problem: &ProblemData,
    opts: &FlowOptions,
) -> Result<QuadratureState> {
    init_quadrature(problem, state.h, state.degree, state.policy, opts)
}

/// Moves the quadrature to `[0, h_new]`.
///
/// With [`NodePolicy::Incremental`]: a change of 25% or more (`h_new ≥ 1.25 h`
/// or `h_new ≤ 0.8 h`) resets all nodes. A smaller increase appends `h_new`
/// and drops the node whose removal leaves the most even spacing. A smaller
/// decrease relocates the nodes beyond `h_new`, one at a time, to the midpoint
/// of the currently largest gap.
pub fn update_quadrature(
    state: &QuadratureState,
    h_new: f64,
    problem: &ProblemData,
    opts: &FlowOptions,
) -> Result<QuadratureState> {
    if !(h_new > 0.0) || !h_new.is_finite() {
        return Err(Error::InvalidInput(format!("quadrature needs h > 0, got {h_new}")));
    }
    let h_old = state.h;
    if h_new == h_old {
        let mut same = state.clone();
        same.fresh_blocks = 0;
        return Ok(same);
    }
    if state.policy != NodePolicy::Incremental || h_new <= 0.8 * h_old || h_new >= 1.25 * h_old {
        return init_quadrature(problem, h_new, state.degree, state.policy, opts);
    }
    let (nodes, blocks, fresh) = if h_new > h_old {
        grow_nodes(state, h_new, problem, opts)?
    } else {
        match shrink_nodes(state, h_new, problem, opts)? {
            Some(v) => v,
            None => return init_quadrature(problem, h_new, state.degree, state.policy, opts),
        }
    };
    build_state(problem, state.degree, state.policy, h_new, nodes, blocks, fresh, opts)
}

type NodeSet = (Vec<f64>, Vec<DMatrix<f64>>, usize);

fn grow_nodes(
    state: &QuadratureState,
    h_new: f64,
    problem: &ProblemData,
    opts: &FlowOptions,
) -> Result<NodeSet> {
    let mut s = state.nodes.clone();
    s.push(h_new);
    let last = s.len() - 1;
    // d₀ = ŝ₁, d_last = h - ŝ_{last-1}, dₖ = ŝₖ₊₁ - ŝₖ₋₁
    let gap = |k: usize| -> f64 {
        if k == 0 {
            s[1]
        } else if k == last {
            h_new - s[last - 1]
        } else {
            s[k + 1] - s[k - 1]
        }
    };
    let quantum = NODE_GAP_TOL * h_new;
    let mut remove = 0;
    for k in 1..=last {
        if gap(k) < gap(remove) - quantum {
            remove = k;
        }
    }
    let mut blocks = state.blocks.clone();
    let mut fresh = 0;
    if remove != last {
        blocks.push(node_block(problem, h_new, opts)?);
        fresh = 1;
    } else {
        blocks.push(DMatrix::zeros(0, 0));
    }
    s.remove(remove);
    blocks.remove(remove);
    Ok((s, blocks, fresh))
}

fn shrink_nodes(
    state: &QuadratureState,
    h_new: f64,
    problem: &ProblemData,
    opts: &FlowOptions,
) -> Result<Option<NodeSet>> {
    let Some(j) = state.nodes.iter().rposition(|&s| s <= h_new) else {
        return Ok(None);
    };
    let p = state.nodes.len() - 1;
    let relocate = p - j;
    let mut s: Vec<f64> = state.nodes[..=j].to_vec();
    let mut blocks: Vec<DMatrix<f64>> = state.blocks[..=j].to_vec();
    for _ in 0..relocate {
        let node = relocated_node(&s, h_new)?;
        let block = node_block(problem, node, opts)?;
        let pos = s.partition_point(|&x| x < node);
        s.insert(pos, node);
        blocks.insert(pos, block);
    }
    Ok(Some((s, blocks, relocate)))
}

/// Midpoint of the largest gap among `0, s₀, …, s_last, h`, skipping gaps whose
/// midpoint would collide with an existing node.
fn relocated_node(s: &[f64], h: f64) -> Result<f64> {
    let m = s.len();
    // d₀ = ŝ₀, d_m = h - ŝ_{m-1}, dₖ = ŝₖ - ŝₖ₋₁
    let mut gaps: Vec<(usize, f64)> = (0..=m)
        .map(|k| {
            let d = if k == 0 {
                s[0]
            } else if k == m {
                h - s[m - 1]
            } else {
                s[k] - s[k - 1]
            };
            (k, d)
        })
        .collect();
    // gaps equal up to rounding count as ties, and ties go to the first index
    let quantum = NODE_GAP_TOL * h;
    while !gaps.is_empty() {
        let top = gaps.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
        let pick = gaps.iter().position(|g| g.1 >= top - quantum).expect("non-empty");
        let (i, _) = gaps.remove(pick);
        let node = if i == 0 {
            s[0] / 2.0
        } else if i == m {
            (h + s[m - 1]) / 2.0
        } else {
            (s[i] + s[i - 1]) / 2.0
        };
        let clash = s.iter().any(|&x| (x - node).abs() <= quantum);
        if !clash {
            return Ok(node);
        }
    }
    Err(Error::InvalidNodes(format!(
        "no room for another node in [0, {h}]"
    )))
}

/// Factor of the quadrature approximation of `I_Q(h)`.
pub fn integral_factor(state: &QuadratureState) -> &LdltFactor {
    &state.assembled
}

/// Affine subflow `exp(hAᵀ)P exp(hA) + I_Q(h)` in factored form.
pub fn solve_f(
    f: &LdltFactor,
    h: f64,
    problem: &ProblemData,
    state: &QuadratureState,
    opts: &FlowOptions,
) -> Result<LdltFactor> {
    if (state.h - h).abs() > 1e-14 * h.abs().max(state.h) {
        return Err(Error::InvalidInput(format!(
            "quadrature prepared for h = {}, flow requested with h = {h}",
            state.h
        )));
    }
    let moved = if f.rank() == 0 {
        f.clone()
    } else {
        LdltFactor::new(exp_action(&problem.a, h, f.l(), &opts.exp)?, f.d().clone())?
    };
    combine(&[(1.0, &moved), (1.0, &state.assembled)], &opts.compression)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::to_dense;
    use nalgebra::dmatrix;

    fn scalar_problem(a: f64, q: f64, s: f64, p0: f64) -> ProblemData {
        ProblemData::new(
            StiffOperator::dense(dmatrix![a]).unwrap(),
            LdltFactor::new(dmatrix![1.0], dmatrix![q]).unwrap(),
            QuadraticOperator::Dense(dmatrix![s]),
            LdltFactor::new(dmatrix![1.0], dmatrix![p0]).unwrap(),
            1.0,
        )
        .unwrap()
    }

    fn tight() -> FlowOptions {
        FlowOptions {
            exp: ExpActionOptions::with_tol(1e-12),
            compression: CompressionOptions::default(),
        }
    }

    #[test]
    fn solve_g_scalar_cases() {
        let f = LdltFactor::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let out = solve_g(&f, 1.0, &QuadraticOperator::Dense(dmatrix![1.0])).unwrap();
        assert!((out.d()[(0, 0)] - 0.5).abs() < 1e-15);

        let f = LdltFactor::new(dmatrix![1.0], dmatrix![2.0]).unwrap();
        let out = solve_g(&f, 1.0, &QuadraticOperator::Dense(dmatrix![3.0])).unwrap();
        assert!((out.d()[(0, 0)] - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn solve_g_with_zero_s_keeps_core() {
        let f = LdltFactor::new(dmatrix![1.0, 0.0; 2.0, 1.0; 0.0, 3.0], dmatrix![1.0, 0.2; 0.2, 2.0]).unwrap();
        let out = solve_g(&f, 0.7, &QuadraticOperator::Dense(DMatrix::zeros(3, 3))).unwrap();
        assert_eq!(out.d(), f.d());
        assert_eq!(out.l(), f.l());
    }

    #[test]
    fn solve_g_detects_singular_system() {
        // D = -1, S = 1, h = 1: I + hDLᵀSL = 0
        let f = LdltFactor::new(dmatrix![1.0], dmatrix![-1.0]).unwrap();
        let err = solve_g(&f, 1.0, &QuadraticOperator::Dense(dmatrix![1.0])).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
    }

    #[test]
    fn weights_of_classical_rules() {
        let w = quad_weights(&[0.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        let h = 3.0;
        let w = quad_weights(&[0.0, h / 2.0, h], h).unwrap();
        for (got, want) in w.iter().zip([h / 6.0, 2.0 * h / 3.0, h / 6.0]) {
            assert!((got - want).abs() < 1e-14);
        }
        let w = quad_weights(&[0.0, 1.0, 2.0], 2.0).unwrap();
        for (got, want) in w.iter().zip([1.0 / 3.0, 4.0 / 3.0, 1.0 / 3.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicate_nodes_are_rejected() {
        assert!(matches!(
            quad_weights(&[0.0, 0.5, 0.5], 1.0),
            Err(Error::InvalidNodes(_))
        ));
    }

    #[test]
    fn gauss_legendre_integrates_to_degree() {
        let (x, w) = gauss_legendre(4);
        for j in 0..8 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(j)).sum();
            assert!((q - 1.0 / (j as f64 + 1.0)).abs() < 1e-14, "j={j}");
        }
    }

    #[test]
    fn init_produces_newton_cotes() {
        let p = scalar_problem(-0.3, 1.0, 1.0, 0.0);
        let st = init_quadrature(&p, 1.0, 1, NodePolicy::Incremental, &tight()).unwrap();
        assert_eq!(st.nodes(), &[0.0, 1.0]);
        assert!((st.weights()[0] - 0.5).abs() < 1e-15);
        let st = init_quadrature(&p, 2.0, 2, NodePolicy::Incremental, &tight()).unwrap();
        assert_eq!(st.nodes(), &[0.0, 1.0, 2.0]);
        assert!((st.weights()[1] - 4.0 / 3.0).abs() < 1e-14);
        assert_eq!(st.fresh_blocks(), 3);
    }

    #[test]
    fn zero_q_gives_rank_zero_integral() {
        let p = ProblemData::new(
            StiffOperator::dense(dmatrix![-1.0, 0.5; 0.0, -2.0]).unwrap(),
            LdltFactor::zero(2),
            QuadraticOperator::Dense(DMatrix::identity(2, 2)),
            LdltFactor::zero(2),
            1.0,
        )
        .unwrap();
        let st = init_quadrature(&p, 0.5, 3, NodePolicy::Incremental, &tight()).unwrap();
        assert_eq!(integral_factor(&st).rank(), 0);
    }

    #[test]
    fn integral_with_zero_a_is_h_q() {
        let lq = dmatrix![1.0, 0.0; 2.0, 1.0; -1.0, 1.0];
        let dq = dmatrix![2.0, 0.0; 0.0, 0.5];
        let p = ProblemData::new(
            StiffOperator::dense(DMatrix::zeros(3, 3)).unwrap(),
            LdltFactor::new(lq.clone(), dq.clone()).unwrap(),
            QuadraticOperator::Dense(DMatrix::zeros(3, 3)),
            LdltFactor::zero(3),
            1.0,
        )
        .unwrap();
        let h = 0.37;
        let st = init_quadrature(&p, h, 4, NodePolicy::Incremental, &tight()).unwrap();
        let got = to_dense(integral_factor(&st)).unwrap();
        let want = &lq * &dq * lq.transpose() * h;
        assert!((got - &want).norm() <= 1e-10 * want.norm());
    }

    #[test]
    fn scalar_integral_matches_closed_form() {
        let (a, q, h) = (-0.8, 1.5, 0.4);
        let p = scalar_problem(a, q, 0.0, 0.0);
        let st = init_quadrature(&p, h, 6, NodePolicy::Incremental, &tight()).unwrap();
        let got = to_dense(integral_factor(&st)).unwrap()[(0, 0)];
        let want = q * ((2.0 * a * h).exp() - 1.0) / (2.0 * a);
        // 7-point Newton-Cotes: error (9/1400) (h/6)⁹ max|f⁽⁸⁾| ≈ 1.1e-11
        assert!((got - want).abs() < 2e-11, "{}", (got - want).abs());
    }

    #[test]
    fn unchanged_step_computes_nothing() {
        let p = scalar_problem(-0.5, 1.0, 1.0, 0.0);
        let st = init_quadrature(&p, 0.1, 5, NodePolicy::Incremental, &tight()).unwrap();
        let same = update_quadrature(&st, 0.1, &p, &tight()).unwrap();
        assert_eq!(same.fresh_blocks(), 0);
        assert_eq!(same.nodes(), st.nodes());
    }

    #[test]
    fn small_growth_adds_at_most_one_block() {
        let p = scalar_problem(-0.5, 1.0, 1.0, 0.0);
        let st = init_quadrature(&p, 0.1, 5, NodePolicy::Incremental, &tight()).unwrap();
        let up = update_quadrature(&st, 0.11, &p, &tight()).unwrap();
        assert!(up.fresh_blocks() <= 1);
        assert_eq!(up.nodes().len(), 6);
        let big = update_quadrature(&st, 0.15, &p, &tight()).unwrap();
        assert_eq!(big.fresh_blocks(), 6);
    }

    #[test]
    fn shrink_relocates_outside_nodes() {
        let p = scalar_problem(-0.5, 1.0, 1.0, 0.0);
        let st = init_quadrature(&p, 1.0, 5, NodePolicy::Incremental, &tight()).unwrap();
        let down = update_quadrature(&st, 0.9, &p, &tight()).unwrap();
        // only 1.0 lies beyond 0.9; the interior gaps tie at 0.2 and the first wins
        assert_eq!(down.fresh_blocks(), 1);
        assert!(down.nodes().iter().all(|&s| s <= 0.9));
        assert!(down.nodes().windows(2).all(|w| w[0] < w[1]));
        assert!((down.nodes()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn solve_f_scalar_without_source() {
        let (a, h, p0) = (-0.6, 0.25, 2.0);
        let p = scalar_problem(a, 0.0, 0.0, p0);
        let st = init_quadrature(&p, h, 3, NodePolicy::Incremental, &tight()).unwrap();
        let out = solve_f(&p.p0, h, &p, &st, &tight()).unwrap();
        let got = to_dense(&out).unwrap()[(0, 0)];
        assert!((got - (2.0 * a * h).exp() * p0).abs() < 1e-12);
    }

    #[test]
    fn solve_f_requires_matching_state() {
        let p = scalar_problem(-0.6, 1.0, 0.0, 1.0);
        let st = init_quadrature(&p, 0.2, 3, NodePolicy::Incremental, &tight()).unwrap();
        assert!(solve_f(&p.p0, 0.3, &p, &st, &tight()).is_err());
    }

    #[test]
    fn ingestion_rejects_indefinite_data() {
        let bad = ProblemData::new(
            StiffOperator::dense(dmatrix![0.0]).unwrap(),
            LdltFactor::new(dmatrix![1.0], dmatrix![-1.0]).unwrap(),
            QuadraticOperator::Dense(dmatrix![1.0]),
            LdltFactor::zero(1),
            1.0,
        );
        assert!(bad.is_err());
    }
}
