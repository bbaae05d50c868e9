//! Order, efficiency and adaptivity studies.
//!
//! Every study writes `runs.csv` (one row per run), `summary.txt` and, for
//! adaptivity studies, `steps.csv` (one row per accepted step).
//!
//! `runs.csv` columns: `scheme, n, tol, h, steps, rejected, rel_error,
//! wallclock_s, max_rank, fresh_quad_blocks, status`. For fixed-step runs `h`
//! is `T/n`; for adaptive runs it is the mean accepted step. Empty cells mean
//! "not applicable". `status` is `ok` or the error that stopped the run.
//!
//! `steps.csv` columns: `scheme, tol, index, t, h, err_est, err_actual, rank,
//! fresh_quad_blocks, clamped`. `err_actual` compares the step with ten equal
//! substeps of the same scheme from the same starting value; under EPUS both
//! error columns are divided by `h`.

use std::fmt::Write as _;
use std::path::Path;

use dresplit::adaptive::{integrate_fixed, StoreFactors};
use dresplit::lowrank::{combine, frob_norm, to_dense, CompressionOptions, LdltFactor};
use dresplit::oracle::{dense_dre_reference, relative_error, DenseProblem};
use dresplit::subflows::ProblemData;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{run, RunConfig, SchemeChoice, Stepping};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Order,
    Efficiency,
    Adaptivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// Dense RK4 with `n_fine` steps, checked against `2 n_fine` steps.
    Oracle { n_fine: usize },
    /// Highest-order scheme of the study at half the smallest step.
    FinestScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub kind: StudyKind,
    pub schemes: Vec<SchemeChoice>,
    /// Step counts of the fixed-step runs.
    pub ladder: Vec<usize>,
    /// Tolerances of the adaptive runs.
    pub tolerances: Vec<f64>,
    pub h1: f64,
    pub epus: bool,
    pub reference: ReferencePolicy,
    /// Errors inside `[lo, hi]` enter the slope fit.
    pub fit_window: (f64, f64),
}

impl StudySpec {
    /// Doubling ladder `10, 20, …, 1280`.
    pub fn order(schemes: Vec<SchemeChoice>) -> Self {
        Self {
            kind: StudyKind::Order,
            schemes,
            ladder: (0..8).map(|k| 10 << k).collect(),
            tolerances: Vec::new(),
            h1: 0.01,
            epus: true,
            reference: ReferencePolicy::Oracle { n_fine: 4000 },
            fit_window: (1e-10, 1e-3),
        }
    }

    pub fn adaptivity(schemes: Vec<SchemeChoice>, tolerances: Vec<f64>) -> Self {
        Self {
            kind: StudyKind::Adaptivity,
            tolerances,
            ..Self::order(schemes)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.schemes.is_empty() {
            return Err("study needs at least one scheme".into());
        }
        match self.kind {
            StudyKind::Order | StudyKind::Efficiency => {
                if self.ladder.len() < 3 {
                    return Err("slope fitting needs a ladder of at least 3 step counts".into());
                }
                if self.ladder.contains(&0) {
                    return Err("step counts must be positive".into());
                }
            }
            StudyKind::Adaptivity => {
                if self.tolerances.is_empty() || self.tolerances.iter().any(|t| !(*t > 0.0)) {
                    return Err("adaptivity study needs positive tolerances".into());
                }
                if !(self.h1 > 0.0) {
                    return Err("initial step must be positive".into());
                }
            }
        }
        if let ReferencePolicy::Oracle { n_fine: 0 } = self.reference {
            return Err("n_fine must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub scheme: String,
    pub n: Option<usize>,
    pub tol: Option<f64>,
    pub h: f64,
    pub steps: usize,
    pub rejected: usize,
    pub rel_error: Option<f64>,
    pub wallclock_s: f64,
    pub max_rank: usize,
    pub fresh_quad_blocks: usize,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub scheme: String,
    pub tol: f64,
    pub index: usize,
    pub t: f64,
    pub h: f64,
    pub err_est: f64,
    pub err_actual: f64,
    pub rank: usize,
    pub fresh_quad_blocks: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub scheme: String,
    pub slope: Option<f64>,
    pub points: usize,
}

pub enum Reference {
    Dense(DMatrix<f64>),
    Factor(LdltFactor),
}

impl Reference {
    pub fn error(&self, approx: &LdltFactor) -> dresplit::Result<f64> {
        match self {
            Self::Dense(r) => relative_error(&to_dense(approx)?, r),
            Self::Factor(r) => {
                let norm = frob_norm(r);
                if norm == 0.0 {
                    return Err(dresplit::Error::InvalidReference);
                }
                let opts = CompressionOptions::default();
                Ok(frob_norm(&combine(&[(1.0, approx), (-1.0, r)], &opts)?) / norm)
            }
        }
    }
}

pub struct StudyReport {
    pub spec: StudySpec,
    pub reference: String,
    /// Relative difference between the reference and its verification run.
    pub reference_check: Option<f64>,
    pub runs: Vec<RunRow>,
    pub slopes: Vec<SlopeFit>,
    pub steps: Vec<StepRow>,
    pub failures: Vec<String>,
}

/// Least-squares slope of `log err` against `log h` over the points with
/// errors inside `window`. Needs at least two points.
pub fn fit_slope(points: &[(f64, f64)], window: (f64, f64)) -> (Option<f64>, usize) {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, e)| *e >= window.0 && *e <= window.1)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let m = pts.len();
    if m < 2 {
        return (None, m);
    }
    let mf = m as f64;
    let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (sx / mf, sy / mf);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    (Some(sxy / sxx), m)
}

pub fn compute_reference(
    problem: &ProblemData,
    study: &StudySpec,
    base: &RunConfig,
) -> dresplit::Result<(Reference, String, Option<f64>)> {
    let mut problem = problem.clone();
    problem.t_final = base.t_final;
    match study.reference {
        ReferencePolicy::Oracle { n_fine } => {
            let dense = DenseProblem::from_problem(&problem)?;
            let coarse = dense_dre_reference(&dense, n_fine)?;
            let fine = dense_dre_reference(&dense, 2 * n_fine)?;
            let check = relative_error(&coarse, &fine)?;
            Ok((
                Reference::Dense(fine),
                format!("dense RK4, {} steps", 2 * n_fine),
                Some(check),
            ))
        }
        ReferencePolicy::FinestScheme => {
            let best = study
                .schemes
                .iter()
                .max_by_key(|s| s.spec().order())
                .expect("validated non-empty");
            let n = 2 * study.ladder.iter().copied().max().unwrap_or(1000);
            let opts = base.solver_options(StoreFactors::FinalOnly);
            let tr = integrate_fixed(&problem, &best.spec(), n, &opts)?;
            Ok((
                Reference::Factor(tr.final_factor),
                format!("{} with {n} steps", best.spec().label()),
                None,
            ))
        }
    }
}

pub fn run_study(problem: &ProblemData, study: &StudySpec, base: &RunConfig) -> Result<StudyReport, String> {
    study.validate()?;
    base.validate()?;
    let (reference, desc, check) = compute_reference(problem, study, base).map_err(|e| format!("reference: {e}"))?;
    let mut report = StudyReport {
        spec: study.clone(),
        reference: desc,
        reference_check: check,
        runs: Vec::new(),
        slopes: Vec::new(),
        steps: Vec::new(),
        failures: Vec::new(),
    };
    match study.kind {
        StudyKind::Order | StudyKind::Efficiency => fixed_ladder(problem, study, base, &reference, &mut report),
        StudyKind::Adaptivity => tolerance_sweep(problem, study, base, &reference, &mut report),
    }
    Ok(report)
}

fn fixed_ladder(
    problem: &ProblemData,
    study: &StudySpec,
    base: &RunConfig,
    reference: &Reference,
    report: &mut StudyReport,
) {
    for scheme in &study.schemes {
        let label = scheme.spec().label();
        let mut points = Vec::new();
        for &n in &study.ladder {
            let cfg = RunConfig {
                scheme: *scheme,
                stepping: Stepping::Fixed { n_steps: n },
                ..base.clone()
            };
            let mut row = RunRow {
                scheme: label.clone(),
                n: Some(n),
                tol: None,
                h: base.t_final / n as f64,
                steps: 0,
                rejected: 0,
                rel_error: None,
                wallclock_s: 0.0,
                max_rank: 0,
                fresh_quad_blocks: 0,
                status: "ok".into(),
            };
            match run(problem, &cfg, StoreFactors::FinalOnly)
                .and_then(|out| reference.error(&out.trajectory.final_factor).map(|e| (out, e)))
            {
                Ok((out, err)) => {
                    row.steps = out.trajectory.steps.len();
                    row.rel_error = Some(err);
                    row.wallclock_s = out.wallclock.as_secs_f64();
                    row.max_rank = out.trajectory.max_rank();
                    row.fresh_quad_blocks = out.trajectory.total_fresh_blocks();
                    points.push((row.h, err));
                }
                Err(e) => {
                    log::warn!("{label}, n = {n}: {e}");
                    report.failures.push(format!("{label}, n = {n}: {e}"));
                    row.status = e.to_string();
                }
            }
            report.runs.push(row);
        }
        let (slope, used) = fit_slope(&points, study.fit_window);
        report.slopes.push(SlopeFit {
            scheme: label,
            slope,
            points: used,
        });
    }
}

fn tolerance_sweep(
    problem: &ProblemData,
    study: &StudySpec,
    base: &RunConfig,
    reference: &Reference,
    report: &mut StudyReport,
) {
    for scheme in &study.schemes {
        let label = scheme.spec().label();
        for &tol in &study.tolerances {
            let cfg = RunConfig {
                scheme: *scheme,
                stepping: Stepping::Adaptive {
                    tol,
                    h1: study.h1,
                    epus: study.epus,
                },
                ..base.clone()
            };
            let mut row = RunRow {
                scheme: label.clone(),
                n: None,
                tol: Some(tol),
                h: 0.0,
                steps: 0,
                rejected: 0,
                rel_error: None,
                wallclock_s: 0.0,
                max_rank: 0,
                fresh_quad_blocks: 0,
                status: "ok".into(),
            };
            let outcome = run(problem, &cfg, StoreFactors::All).and_then(|out| {
                let err = reference.error(&out.trajectory.final_factor)?;
                let steps = actual_step_errors(problem, &cfg, &out.trajectory, study.epus)?;
                Ok((out, err, steps))
            });
            match outcome {
                Ok((out, err, actual)) => {
                    let tr = &out.trajectory;
                    row.steps = tr.steps.len();
                    row.rejected = tr.rejected.len();
                    row.h = base.t_final / tr.steps.len() as f64;
                    row.rel_error = Some(err);
                    row.wallclock_s = out.wallclock.as_secs_f64();
                    row.max_rank = tr.max_rank();
                    row.fresh_quad_blocks = tr.total_fresh_blocks();
                    for (s, e) in tr.steps.iter().zip(actual) {
                        report.steps.push(StepRow {
                            scheme: label.clone(),
                            tol,
                            index: s.index,
                            t: s.t,
                            h: s.h,
                            err_est: s.err_est.unwrap_or(f64::NAN),
                            err_actual: e,
                            rank: s.rank,
                            fresh_quad_blocks: s.fresh_quad_blocks,
                            clamped: s.clamped,
                        });
                    }
                }
                Err(e) => {
                    log::warn!("{label}, tol = {tol:e}: {e}");
                    report.failures.push(format!("{label}, tol = {tol:e}: {e}"));
                    row.status = e.to_string();
                }
            }
            report.runs.push(row);
        }
    }
}

/// Difference between each accepted step and ten equal substeps of the same
/// scheme started from the same value.
pub fn actual_step_errors(
    problem: &ProblemData,
    cfg: &RunConfig,
    tr: &dresplit::adaptive::Trajectory,
    epus: bool,
) -> dresplit::Result<Vec<f64>> {
    let spec = cfg.scheme.spec();
    let opts = cfg.solver_options(StoreFactors::FinalOnly);
    tr.steps
        .iter()
        .enumerate()
        .map(|(i, s)| {
            // starting values come from the solver, so skip the PSD re-check
            let sub = ProblemData {
                p0: tr.factors[i].1.clone(),
                t_final: s.h,
                ..problem.clone()
            };
            let fine = integrate_fixed(&sub, &spec, 10, &opts)?;
            let diff = combine(
                &[(1.0, &tr.factors[i + 1].1), (-1.0, &fine.final_factor)],
                &opts.flow.compression,
            )?;
            let e = frob_norm(&diff);
            Ok(if epus { e / s.h } else { e })
        })
        .collect()
}

fn opt_num<T: std::fmt::LowerExp>(v: Option<T>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl StudyReport {
    pub const RUN_COLUMNS: [&'static str; 11] = [
        "scheme",
        "n",
        "tol",
        "h",
        "steps",
        "rejected",
        "rel_error",
        "wallclock_s",
        "max_rank",
        "fresh_quad_blocks",
        "status",
    ];

    pub const STEP_COLUMNS: [&'static str; 10] = [
        "scheme",
        "tol",
        "index",
        "t",
        "h",
        "err_est",
        "err_actual",
        "rank",
        "fresh_quad_blocks",
        "clamped",
    ];

    pub fn runs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::RUN_COLUMNS).unwrap();
        for r in &self.runs {
            w.write_record([
                r.scheme.clone(),
                r.n.map(|n| n.to_string()).unwrap_or_default(),
                opt_num(r.tol),
                format!("{:e}", r.h),
                r.steps.to_string(),
                r.rejected.to_string(),
                opt_num(r.rel_error),
                format!("{:.6}", r.wallclock_s),
                r.max_rank.to_string(),
                r.fresh_quad_blocks.to_string(),
                r.status.clone(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn steps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::STEP_COLUMNS).unwrap();
        for s in &self.steps {
            w.write_record([
                s.scheme.clone(),
                format!("{:e}", s.tol),
                s.index.to_string(),
                format!("{:e}", s.t),
                format!("{:e}", s.h),
                format!("{:e}", s.err_est),
                format!("{:e}", s.err_actual),
                s.rank.to_string(),
                s.fresh_quad_blocks.to_string(),
                s.clamped.to_string(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(out, "study: {:?}", self.spec.kind).unwrap();
        writeln!(out, "reference: {}", self.reference).unwrap();
        if let Some(c) = self.reference_check {
            writeln!(out, "reference self-check: {c:.3e}").unwrap();
        }
        if !self.slopes.is_empty() {
            writeln!(
                out,
                "\nfitted orders (errors in [{:e}, {:e}]):",
                self.spec.fit_window.0, self.spec.fit_window.1
            )
            .unwrap();
            for s in &self.slopes {
                match s.slope {
                    Some(v) => writeln!(out, "  {:<10} {v:6.2}  ({} points)", s.scheme, s.points).unwrap(),
                    None => writeln!(out, "  {:<10}    n/a  ({} points)", s.scheme, s.points).unwrap(),
                }
            }
        }
        if self.spec.kind == StudyKind::Efficiency {
            writeln!(out, "\nerror against wallclock (log-log slope):").unwrap();
            for s in &self.spec.schemes {
                let label = s.spec().label();
                let pts: Vec<(f64, f64)> = self
                    .runs
                    .iter()
                    .filter(|r| r.scheme == label && r.wallclock_s > 0.0)
                    .filter_map(|r| r.rel_error.map(|e| (r.wallclock_s, e)))
                    .collect();
                let (slope, m) = fit_slope(&pts, self.spec.fit_window);
                writeln!(out, "  {label:<10} {}  ({m} points)", opt_num(slope)).unwrap();
            }
        }
        if !self.steps.is_empty() {
            writeln!(out, "\nadaptive runs:").unwrap();
            for r in self.runs.iter().filter(|r| r.tol.is_some()) {
                let tol = r.tol.unwrap();
                let mine: Vec<&StepRow> = self
                    .steps
                    .iter()
                    .filter(|s| s.scheme == r.scheme && s.tol == tol)
                    .collect();
                let covered = mine.iter().filter(|s| s.err_actual <= s.err_est).count();
                writeln!(
                    out,
                    "  {:<10} tol {tol:.1e}: {} steps, {} rejected, actual <= estimate on {}/{}",
                    r.scheme,
                    r.steps,
                    r.rejected,
                    covered,
                    mine.len()
                )
                .unwrap();
            }
        }
        if !self.failures.is_empty() {
            writeln!(out, "\nfailed runs:").unwrap();
            for f in &self.failures {
                writeln!(out, "  {f}").unwrap();
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("runs.csv"), self.runs_csv())?;
        if self.spec.kind == StudyKind::Adaptivity {
            std::fs::write(dir.join("steps.csv"), self.steps_csv())?;
        }
        std::fs::write(dir.join("summary.txt"), self.summary())
    }
}
