//! Fixed-step and adaptive drivers.
//!
//! The adaptive driver uses the embedded estimate of the additive schemes with
//! a PI step-size controller. A rejected step is first retried at the same
//! size with every quadrature node recomputed; only a second rejection
//! shrinks the step.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lowrank::{compress, CompressionOptions, LdltFactor};
use crate::schemes::{scheme_step, QuadratureSet, SchemeCoefficients, SchemeSpec};
use crate::subflows::{FlowOptions, NodePolicy, ProblemData};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub tol: f64,
    /// Safety factor `ε` in `(0, 1)`.
    pub safety: f64,
    /// Integral gain; `None` means `0.2 / p` with `p` the estimate order.
    pub k_i: Option<f64>,
    /// Proportional gain; `None` means `0.2 / p`.
    pub k_p: Option<f64>,
    /// Error per unit step: divide estimates by `h` before control.
    pub epus: bool,
    /// Upper bound on `h_{n+1} / h_n`.
    pub growth_cap: f64,
    /// Smallest admissible step; `None` means `1e-12 T`.
    pub h_min: Option<f64>,
}

impl ControllerParams {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            safety: 0.9,
            k_i: None,
            k_p: None,
            epus: false,
            growth_cap: 5.0,
            h_min: None,
        }
    }

    pub fn epus(mut self, on: bool) -> Self {
        self.epus = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(Error::InvalidInput(format!(
                "safety factor must lie in (0, 1), got {}",
                self.safety
            )));
        }
        if !(self.growth_cap >= 1.0) {
            return Err(Error::InvalidInput("growth cap must be at least 1".into()));
        }
        Ok(())
    }

    fn gains(&self, p_est: usize) -> (f64, f64) {
        let default = 0.2 / p_est.max(1) as f64;
        (self.k_i.unwrap_or(default), self.k_p.unwrap_or(default))
    }

    /// Estimates at or below this are clamped before entering the controller.
    pub fn error_floor(&self) -> f64 {
        1e-4 * self.safety * self.tol
    }
}

/// PI step-size update
/// `h_{n+1} = (ε TOL / e_{n+1})^{k_I} (e_n / e_{n+1})^{k_P} h_n`, capped at
/// `growth_cap * h_n`.
pub fn pi_update(e_prev: f64, e_new: f64, h: f64, params: &ControllerParams, p_est: usize) -> f64 {
    let floor = params.error_floor();
    let e_new = e_new.max(floor);
    let e_prev = e_prev.max(floor);
    let (k_i, k_p) = params.gains(p_est);
    let factor = (params.safety * params.tol / e_new).powf(k_i) * (e_prev / e_new).powf(k_p);
    h * factor.min(params.growth_cap)
}

/// Step size for the retry after a rejection: `(ε TOL / e)^{1/p} h`.
pub fn reject_resize(e_new: f64, h: f64, params: &ControllerParams, est_order: usize) -> f64 {
    h * (params.safety * params.tol / e_new).powf(1.0 / est_order.max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StoreFactors {
    #[default]
    FinalOnly,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub flow: FlowOptions,
    /// Quadrature exactness degree; `None` means scheme order + 1.
    pub quad_degree: Option<usize>,
    pub node_policy: NodePolicy,
    /// Worker threads for the chains of one step; `0` uses the global pool.
    pub threads: usize,
    pub store: StoreFactors,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            flow: FlowOptions::default(),
            quad_degree: None,
            node_policy: NodePolicy::Incremental,
            threads: 1,
            store: StoreFactors::FinalOnly,
        }
    }
}

impl SolverOptions {
    pub fn quad_degree_for(&self, spec: &SchemeSpec) -> usize {
        self.quad_degree.unwrap_or_else(|| spec.default_quad_degree())
    }

    fn validate(&self) -> Result<()> {
        self.flow.exp.validate()?;
        self.flow.compression.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    /// Time at the end of the step.
    pub t: f64,
    pub h: f64,
    /// Error estimate as compared against the tolerance (per unit step under EPUS).
    pub err_est: Option<f64>,
    pub accepted: bool,
    /// Rejections before this attempt within the same step.
    pub rejections: usize,
    pub rank: usize,
    pub fresh_quad_blocks: usize,
    /// Final step shortened to land on `T`.
    pub clamped: bool,
    pub min_eigenvalue: Option<f64>,
}

/// Receives step records as the driver produces them.
pub trait StepSink {
    fn record(&mut self, record: &StepRecord);
}

impl StepSink for Vec<StepRecord> {
    fn record(&mut self, record: &StepRecord) {
        self.push(record.clone());
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Accepted steps in time order.
    pub steps: Vec<StepRecord>,
    /// Rejected attempts in the order they happened.
    pub rejected: Vec<StepRecord>,
    /// `(t, P(t))`, including `t = 0` when all factors are stored.
    pub factors: Vec<(f64, LdltFactor)>,
    pub final_factor: LdltFactor,
}

impl Trajectory {
    fn start(p0: &LdltFactor, store: StoreFactors) -> Self {
        Self {
            steps: Vec::new(),
            rejected: Vec::new(),
            factors: match store {
                StoreFactors::All => vec![(0.0, p0.clone())],
                StoreFactors::FinalOnly => Vec::new(),
            },
            final_factor: p0.clone(),
        }
    }

    fn push(&mut self, record: StepRecord, factor: LdltFactor, store: StoreFactors) {
        if store == StoreFactors::All {
            self.factors.push((record.t, factor.clone()));
        }
        self.steps.push(record);
        self.final_factor = factor;
    }

    pub fn max_rank(&self) -> usize {
        self.steps.iter().map(|s| s.rank).max().unwrap_or(0)
    }

    pub fn total_fresh_blocks(&self) -> usize {
        self.steps
            .iter()
            .chain(&self.rejected)
            .map(|s| s.fresh_quad_blocks)
            .sum()
    }

    pub fn final_time(&self) -> f64 {
        self.steps.last().map(|s| s.t).unwrap_or(0.0)
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build thread pool: {e}")))?;
    pool.install(f)
}

/// `n_steps` equal steps of `spec` on `[0, T]`.
pub fn integrate_fixed(
    problem: &ProblemData,
    spec: &SchemeSpec,
    n_steps: usize,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    integrate_fixed_with_sink(problem, spec, n_steps, opts, None)
}

pub fn integrate_fixed_with_sink(
    problem: &ProblemData,
    spec: &SchemeSpec,
    n_steps: usize,
    opts: &SolverOptions,
    mut sink: Option<&mut (dyn StepSink + Send)>,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::InvalidInput("need at least one step".into()));
    }
    opts.validate()?;
    let coeffs = SchemeCoefficients::for_scheme(spec)?;
    let t_final = problem.t_final;
    let h = t_final / n_steps as f64;
    let degree = opts.quad_degree_for(spec);
    with_threads(opts.threads, move || {
        let states = QuadratureSet::for_scheme(problem, spec, h, degree, opts.node_policy, &opts.flow)?;
        let mut traj = Trajectory::start(&problem.p0, opts.store);
        let mut cur = problem.p0.clone();
        for i in 0..n_steps {
            let (next, est) = scheme_step(&cur, h, spec, &coeffs, problem, &states, &opts.flow)
                .map_err(|e| e.at_step(i))?;
            let record = StepRecord {
                index: i,
                t: if i + 1 == n_steps {
                    t_final
                } else {
                    (i + 1) as f64 * h
                },
                h,
                err_est: est,
                accepted: true,
                rejections: 0,
                rank: next.rank(),
                fresh_quad_blocks: if i == 0 { states.fresh_blocks() } else { 0 },
                clamped: false,
                min_eigenvalue: next.min_core_eigenvalue(),
            };
            if let Some(s) = sink.as_deref_mut() {
                s.record(&record);
            }
            traj.push(record, next.clone(), opts.store);
            cur = next;
        }
        Ok(traj)
    })
}

/// Adaptive integration on `[0, T]` starting from step `h1`.
pub fn integrate_adaptive(
    problem: &ProblemData,
    spec: &SchemeSpec,
    h1: f64,
    params: &ControllerParams,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    integrate_adaptive_with_sink(problem, spec, h1, params, opts, None)
}

pub fn integrate_adaptive_with_sink(
    problem: &ProblemData,
    spec: &SchemeSpec,
    h1: f64,
    params: &ControllerParams,
    opts: &SolverOptions,
    mut sink: Option<&mut (dyn StepSink + Send)>,
) -> Result<Trajectory> {
    params.validate()?;
    opts.validate()?;
    let p_est = spec
        .estimate_order()
        .ok_or(Error::NoEmbeddedMethod { stages: spec.stages })?;
    if !(h1 > 0.0) {
        return Err(Error::InvalidInput(format!("initial step must be positive, got {h1}")));
    }
    let coeffs = SchemeCoefficients::for_scheme(spec)?;
    let t_final = problem.t_final;
    let h_min = params.h_min.unwrap_or(1e-12 * t_final);
    let degree = opts.quad_degree_for(spec);

    with_threads(opts.threads, move || {
        let mut traj = Trajectory::start(&problem.p0, opts.store);
        let mut cur = problem.p0.clone();
        let mut t = 0.0;
        let mut clamped = h1 >= t_final;
        let mut h = if clamped { t_final } else { h1 };
        let mut e_prev = params.safety * params.tol;
        let mut states =
            QuadratureSet::for_scheme(problem, spec, h, degree, opts.node_policy, &opts.flow)?;
        let mut fresh = states.fresh_blocks();
        let mut rejections = 0;
        let mut index = 0;

        loop {
            let (next, est) = scheme_step(&cur, h, spec, &coeffs, problem, &states, &opts.flow)
                .map_err(|e| e.at_step(index))?;
            let raw = est.expect("additive schemes with two or more stages have an estimate");
            let e = if params.epus { raw / h } else { raw };
            let mut record = StepRecord {
                index,
                t: if clamped { t_final } else { t + h },
                h,
                err_est: Some(e),
                accepted: e <= params.tol,
                rejections,
                rank: next.rank(),
                fresh_quad_blocks: fresh,
                clamped,
                min_eigenvalue: next.min_core_eigenvalue(),
            };
            if let Some(s) = sink.as_deref_mut() {
                s.record(&record);
            }

            if !record.accepted {
                rejections += 1;
                if rejections == 1 {
                    states = states.recompute(problem, &opts.flow)?;
                } else {
                    h = reject_resize(e, h, params, p_est);
                    clamped = false;
                    if h < h_min {
                        record.accepted = false;
                        traj.rejected.push(record);
                        return Err(Error::StepSizeCollapse {
                            t,
                            h,
                            partial: Box::new(traj),
                        });
                    }
                    states = states.update(h, problem, &opts.flow)?;
                }
                fresh = states.fresh_blocks();
                traj.rejected.push(record);
                continue;
            }

            if let Some(m) = record.min_eigenvalue {
                if m < -crate::subflows::PSD_TOL {
                    log::warn!("t = {:.6e}: negative core eigenvalue {m:e}", record.t);
                } else {
                    log::debug!("t = {:.6e}: smallest eigenvalue {m:e}", record.t);
                }
            }
            t = record.t;
            let done = clamped;
            traj.push(record, next.clone(), opts.store);
            cur = next;
            index += 1;
            rejections = 0;
            if done {
                break;
            }

            let mut h_next = pi_update(e_prev, e, h, params, p_est);
            e_prev = e.max(params.error_floor());
            if t + h_next >= t_final || t_final - (t + h_next) < h_min {
                h_next = t_final - t;
                clamped = true;
            }
            states = states.update(h_next, problem, &opts.flow)?;
            fresh = states.fresh_blocks();
            h = h_next;
        }
        Ok(traj)
    })
}

/// Factored estimates of `Ṗ` and `P̈` at `P = LDLᵀ`:
///
/// ```text
/// Ṗ = AᵀP + PA + Q - PSP          with basis [AᵀL, L, L_Q]
/// P̈ = AᵀṖ + ṖA - ṖSP - PSṖ      with basis [AᵀL̃, L̃, L]   (Ṗ = L̃D̃L̃ᵀ)
/// ```
pub fn estimate_derivatives(
    f: &LdltFactor,
    problem: &ProblemData,
    opts: &CompressionOptions,
) -> Result<(LdltFactor, LdltFactor)> {
    let n = problem.dim();
    if f.dim() != n {
        return Err(Error::InvalidInput(format!(
            "factor dimension {} does not match problem dimension {n}",
            f.dim()
        )));
    }
    let (l, d) = (f.l(), f.d());
    let r = f.rank();
    let (lq, dq) = (problem.q.l(), problem.q.d());
    let rq = problem.q.rank();

    // Ṗ
    let atl = problem.a.apply_transpose(l);
    let k = l.tr_mul(&problem.s.apply(l));
    let basis = hcat(&[&atl, l, lq]);
    let mut core = DMatrix::zeros(2 * r + rq, 2 * r + rq);
    core.view_mut((0, r), (r, r)).copy_from(d);
    core.view_mut((r, 0), (r, r)).copy_from(d);
    core.view_mut((r, r), (r, r)).copy_from(&(-(d * &k * d)));
    core.view_mut((2 * r, 2 * r), (rq, rq)).copy_from(dq);
    let pdot = compress(&LdltFactor::new(basis, core)?, opts);

    // P̈
    let (l1, d1) = (pdot.l(), pdot.d());
    let r1 = pdot.rank();
    let atl1 = problem.a.apply_transpose(l1);
    let cross = -(d1 * l1.tr_mul(&problem.s.apply(l)) * d);
    let basis = hcat(&[&atl1, l1, l]);
    let mut core = DMatrix::zeros(2 * r1 + r, 2 * r1 + r);
    core.view_mut((0, r1), (r1, r1)).copy_from(d1);
    core.view_mut((r1, 0), (r1, r1)).copy_from(d1);
    core.view_mut((r1, 2 * r1), (r1, r)).copy_from(&cross);
    core.view_mut((2 * r1, r1), (r, r1)).copy_from(&cross.transpose());
    let pddot = compress(&LdltFactor::new(basis, core)?, opts);
    Ok((pdot, pddot))
}

fn hcat(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (n, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    out
}

/// Bound on the linear interpolation error over a step of size `h`:
/// `tol + h² ‖P̈‖_F / 8`.
pub fn interpolation_error_bound(tol: f64, h: f64, pddot_norm: f64) -> f64 {
    tol + h * h * pddot_norm / 8.0
}
