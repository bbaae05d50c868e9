//! Run configuration and the single-run pipeline behind `solve`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dresplit::adaptive::{
    integrate_adaptive_with_sink, integrate_fixed_with_sink, ControllerParams, SolverOptions, StepRecord,
    StoreFactors, Trajectory,
};
use dresplit::expaction::ExpActionOptions;
use dresplit::lowrank::CompressionOptions;
use dresplit::schemes::{OperatorOrder, SchemeKind, SchemeSpec};
use dresplit::subflows::{FlowOptions, NodePolicy, ProblemData};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    Lie,
    Strang,
    Asym,
    Sym,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    #[default]
    Fg,
    Gf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeChoice {
    pub name: SchemeName,
    #[serde(default = "one")]
    pub stages: usize,
    #[serde(default)]
    pub order: Order,
}

fn one() -> usize {
    1
}

impl SchemeChoice {
    pub fn spec(&self) -> SchemeSpec {
        let spec = match self.name {
            SchemeName::Lie => SchemeSpec::lie(),
            SchemeName::Strang => SchemeSpec::strang(),
            SchemeName::Asym => SchemeSpec::asymmetric(self.stages),
            SchemeName::Sym => SchemeSpec::symmetric(self.stages),
        };
        spec.with_order(match self.order {
            Order::Fg => OperatorOrder::FG,
            Order::Gf => OperatorOrder::GF,
        })
    }

    /// Parses `lie`, `strang`, `asymN`, `symN`, optionally suffixed `-gf`.
    pub fn parse(label: &str) -> Result<Self, String> {
        let (base, order) = match label.strip_suffix("-gf") {
            Some(b) => (b, Order::Gf),
            None => (label, Order::Fg),
        };
        let (name, digits) = if let Some(d) = base.strip_prefix("asym") {
            (SchemeName::Asym, d)
        } else if let Some(d) = base.strip_prefix("sym") {
            (SchemeName::Sym, d)
        } else if base == "lie" {
            (SchemeName::Lie, "")
        } else if base == "strang" {
            (SchemeName::Strang, "")
        } else {
            return Err(format!("unknown scheme '{label}'"));
        };
        let stages = if digits.is_empty() {
            1
        } else {
            digits
                .parse()
                .map_err(|_| format!("bad stage count in '{label}'"))?
        };
        Ok(Self { name, stages, order })
    }

    pub fn from_spec(spec: &SchemeSpec) -> Self {
        let name = match spec.kind {
            SchemeKind::Lie => SchemeName::Lie,
            SchemeKind::Strang => SchemeName::Strang,
            SchemeKind::AsymmetricAdditive => SchemeName::Asym,
            SchemeKind::SymmetricAdditive => SchemeName::Sym,
        };
        let order = match spec.operator_order {
            OperatorOrder::FG => Order::Fg,
            OperatorOrder::GF => Order::Gf,
        };
        Self {
            name,
            stages: spec.stages,
            order,
        }
    }
}

/// Default quadrature degree when none is given: scheme order plus one, or
/// stage count plus one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadRule {
    #[default]
    Order,
    Stages,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepping {
    Fixed { n_steps: usize },
    Adaptive { tol: f64, h1: f64, epus: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scheme: SchemeChoice,
    pub t_final: f64,
    pub stepping: Stepping,
    #[serde(default = "default_exp_tol")]
    pub exp_tol: f64,
    /// `None` keeps everything above roundoff.
    #[serde(default)]
    pub comp_tol: Option<f64>,
    #[serde(default)]
    pub quad_degree: Option<usize>,
    #[serde(default)]
    pub quad_rule: QuadRule,
    #[serde(default = "one")]
    pub threads: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_exp_tol() -> f64 {
    1e-10
}

fn default_seed() -> u64 {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scheme: SchemeChoice {
                name: SchemeName::Sym,
                stages: 2,
                order: Order::Fg,
            },
            t_final: 1.0,
            stepping: Stepping::Fixed { n_steps: 20 },
            exp_tol: default_exp_tol(),
            comp_tol: None,
            quad_degree: None,
            quad_rule: QuadRule::Order,
            threads: 1,
            out: None,
            seed: default_seed(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive, got {v}"))
            }
        };
        positive("t_final", self.t_final)?;
        positive("exp_tol", self.exp_tol)?;
        if let Some(c) = self.comp_tol {
            positive("comp_tol", c)?;
        }
        match self.stepping {
            Stepping::Fixed { n_steps } if n_steps == 0 => return Err("n_steps must be positive".into()),
            Stepping::Adaptive { tol, h1, .. } => {
                positive("tol", tol)?;
                positive("h1", h1)?;
            }
            _ => {}
        }
        self.scheme.spec().validate().map_err(|e| e.to_string())
    }

    pub fn solver_options(&self, store: StoreFactors) -> SolverOptions {
        SolverOptions {
            flow: FlowOptions {
                exp: ExpActionOptions::with_tol(self.exp_tol),
                compression: CompressionOptions {
                    rel_tol: self.comp_tol,
                    max_rank: None,
                },
            },
            quad_degree: self.quad_degree.or(match self.quad_rule {
                QuadRule::Order => None,
                QuadRule::Stages => Some(self.scheme.spec().stages + 1),
            }),
            node_policy: NodePolicy::Incremental,
            threads: self.threads,
            store,
        }
    }
}

pub struct RunOutcome {
    pub trajectory: Trajectory,
    /// Every attempt in the order the driver made it, rejected ones included.
    pub attempts: Vec<StepRecord>,
    pub wallclock: Duration,
}

/// Runs one configuration. The horizon of `problem` is replaced by
/// `cfg.t_final`.
pub fn run(problem: &ProblemData, cfg: &RunConfig, store: StoreFactors) -> dresplit::Result<RunOutcome> {
    let mut problem = problem.clone();
    problem.t_final = cfg.t_final;
    let spec = cfg.scheme.spec();
    let opts = cfg.solver_options(store);
    let mut attempts: Vec<StepRecord> = Vec::new();
    let start = Instant::now();
    let trajectory = match cfg.stepping {
        Stepping::Fixed { n_steps } => {
            integrate_fixed_with_sink(&problem, &spec, n_steps, &opts, Some(&mut attempts))?
        }
        Stepping::Adaptive { tol, h1, epus } => {
            let params = ControllerParams::new(tol).epus(epus);
            integrate_adaptive_with_sink(&problem, &spec, h1, &params, &opts, Some(&mut attempts))?
        }
    };
    Ok(RunOutcome {
        trajectory,
        attempts,
        wallclock: start.elapsed(),
    })
}

pub const STEP_COLUMNS: [&str; 10] = [
    "index",
    "t",
    "h",
    "err_est",
    "accepted",
    "rejections",
    "rank",
    "fresh_quad_blocks",
    "clamped",
    "min_eigenvalue",
];

pub fn step_row(r: &StepRecord) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    vec![
        r.index.to_string(),
        format!("{:e}", r.t),
        format!("{:e}", r.h),
        opt(r.err_est),
        r.accepted.to_string(),
        r.rejections.to_string(),
        r.rank.to_string(),
        r.fresh_quad_blocks.to_string(),
        r.clamped.to_string(),
        opt(r.min_eigenvalue),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_labels_round_trip() {
        for label in ["lie", "strang", "asym3", "sym2", "sym4-gf", "strang-gf"] {
            let c = SchemeChoice::parse(label).unwrap();
            assert_eq!(c.spec().label(), label);
            assert_eq!(SchemeChoice::from_spec(&c.spec()), c);
        }
        assert!(SchemeChoice::parse("rk4").is_err());
        assert!(SchemeChoice::parse("symx").is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.stepping = Stepping::Adaptive {
            tol: 1e-3,
            h1: 0.01,
            epus: true,
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn exactly_one_stepping_mode() {
        let both = r#"{"scheme":{"name":"sym","stages":2},"t_final":1,
            "stepping":{"fixed":{"n_steps":3},"adaptive":{"tol":1e-3,"h1":0.1,"epus":false}}}"#;
        assert!(serde_json::from_str::<RunConfig>(both).is_err());
        let none = r#"{"scheme":{"name":"sym","stages":2},"t_final":1}"#;
        assert!(serde_json::from_str::<RunConfig>(none).is_err());
    }

    #[test]
    fn stage_rule_sets_degree() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.solver_options(StoreFactors::FinalOnly).quad_degree, None);
        cfg.quad_rule = QuadRule::Stages;
        assert_eq!(cfg.solver_options(StoreFactors::FinalOnly).quad_degree, Some(3));
        cfg.quad_degree = Some(7);
        assert_eq!(cfg.solver_options(StoreFactors::FinalOnly).quad_degree, Some(7));
    }

    #[test]
    fn non_positive_tolerances_rejected() {
        let mut cfg = RunConfig::default();
        cfg.exp_tol = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.stepping = Stepping::Adaptive {
            tol: -1.0,
            h1: 0.1,
            epus: false,
        };
        assert!(cfg.validate().is_err());
    }
}
