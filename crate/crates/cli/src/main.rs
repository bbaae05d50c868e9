use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dresplit::adaptive::StoreFactors;
use dresplit::subflows::ProblemData;
use dresplit_cli::config::{run, step_row, Order, QuadRule, RunConfig, SchemeChoice, SchemeName, Stepping, STEP_COLUMNS};
use dresplit_cli::matrixmarket;
use dresplit_cli::problem::{export_problem, generate_problem, ingest_problem, GeneratorConfig, ProblemKind};
use dresplit_cli::study::{run_study, ReferencePolicy, StudyKind, StudySpec};
use dresplit_cli::validation::run_checks;

const EXIT_INGEST: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_VALIDATE: u8 = 4;

#[derive(Parser)]
#[command(name = "dresplit", version, about = "Low-rank splitting solvers for differential Riccati equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic problem as MatrixMarket files.
    Generate {
        #[command(flatten)]
        gen: GenArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate one problem.
    Solve {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run a convergence, efficiency or adaptivity study.
    Study {
        #[arg(value_enum, value_name = "KIND")]
        study_kind: StudyKind,
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated labels such as `lie,strang,asym3,sym2`.
        #[arg(long, value_delimiter = ',', default_value = "lie,strang,asym3,sym2,sym3")]
        schemes: Vec<String>,
        /// Step counts of the fixed-step runs.
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<usize>>,
        /// Tolerances of the adaptive runs.
        #[arg(long, value_delimiter = ',', default_value = "1e-1,1e-2,1e-3")]
        tols: Vec<f64>,
        /// Fine steps of the dense reference; 0 uses the finest scheme run instead.
        #[arg(long, default_value_t = 4000)]
        n_fine: usize,
    },
    /// Compare the factored building blocks with dense evaluation.
    Validate {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "random-lowrank")]
    kind: ProblemKind,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    t_final: f64,
}

#[derive(Args, Clone)]
struct SourceArgs {
    /// Directory with A.mtx, B.mtx, C.mtx and optional Rx, Ru, L0, D0.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<ProblemKind>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeName>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long, value_enum)]
    order: Option<Order>,
    #[arg(long, conflicts_with_all = ["tol", "h1", "epus"])]
    steps: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    h1: Option<f64>,
    /// Error per unit step.
    #[arg(long)]
    epus: bool,
    #[arg(long)]
    t_final: Option<f64>,
    #[arg(long)]
    exp_tol: Option<f64>,
    #[arg(long)]
    comp_tol: Option<f64>,
    #[arg(long)]
    quad_degree: Option<usize>,
    /// Default degree when `--quad-degree` is absent.
    #[arg(long, value_enum)]
    quad_rule: Option<QuadRule>,
    /// 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(name) = self.scheme {
            cfg.scheme.name = name;
            if matches!(name, SchemeName::Lie | SchemeName::Strang) {
                cfg.scheme.stages = 1;
            }
        }
        if let Some(s) = self.stages {
            cfg.scheme.stages = s;
        }
        if let Some(o) = self.order {
            cfg.scheme.order = o;
        }
        if let Some(n) = self.steps {
            cfg.stepping = Stepping::Fixed { n_steps: n };
        } else if self.tol.is_some() || self.h1.is_some() || self.epus {
            let (t0, h0, e0) = match cfg.stepping {
                Stepping::Adaptive { tol, h1, epus } => (tol, h1, epus),
                Stepping::Fixed { .. } => (1e-3, 1e-2, false),
            };
            cfg.stepping = Stepping::Adaptive {
                tol: self.tol.unwrap_or(t0),
                h1: self.h1.unwrap_or(h0),
                epus: self.epus || e0,
            };
        }
        if let Some(t) = self.t_final {
            cfg.t_final = t;
        }
        if let Some(v) = self.exp_tol {
            cfg.exp_tol = v;
        }
        if self.comp_tol.is_some() {
            cfg.comp_tol = self.comp_tol;
        }
        if self.quad_degree.is_some() {
            cfg.quad_degree = self.quad_degree;
        }
        if let Some(r) = self.quad_rule {
            cfg.quad_rule = r;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.out.is_some() {
            cfg.out = self.out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

enum Failure {
    Ingest(String),
    Solver(String),
    Validate,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Ingest(_) => EXIT_INGEST,
            Self::Solver(_) => EXIT_SOLVER,
            Self::Validate => EXIT_VALIDATE,
        }
    }
}

fn load_problem(source: &SourceArgs, cfg: &RunConfig) -> Result<ProblemData, Failure> {
    match &source.problem {
        Some(dir) => ingest_problem(dir, cfg.t_final).map_err(|e| Failure::Ingest(e.to_string())),
        None => {
            let mut gen = GeneratorConfig {
                seed: cfg.seed,
                t_final: cfg.t_final,
                ..GeneratorConfig::default()
            };
            if let Some(k) = source.kind {
                gen.kind = k;
            }
            if let Some(n) = source.n {
                gen.n = n;
            }
            if let Some(r) = source.rank {
                gen.rank = r;
            }
            generate_problem(&gen)
                .map(|g| g.problem)
                .map_err(|e| Failure::Ingest(e.to_string()))
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| Failure::Solver(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Solver(format!("{}: {e}", path.display()))
}

fn solve(source: &SourceArgs, args: &RunArgs) -> Result<(), Failure> {
    let cfg = args.resolve().map_err(Failure::Ingest)?;
    let problem = load_problem(source, &cfg)?;
    let dir = out_dir(&cfg)?;
    let outcome = run(&problem, &cfg, StoreFactors::FinalOnly).map_err(|e| Failure::Solver(e.to_string()))?;

    let path = dir.join("steps.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
    w.write_record(STEP_COLUMNS).map_err(|e| io_err(&path, e))?;
    for r in &outcome.attempts {
        w.write_record(step_row(r)).map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;

    let f = &outcome.trajectory.final_factor;
    let lp = dir.join("L.mtx");
    matrixmarket::write_dense(&lp, f.l()).map_err(|e| Failure::Solver(e.to_string()))?;
    let dp = dir.join("D.mtx");
    matrixmarket::write_dense(&dp, f.d()).map_err(|e| Failure::Solver(e.to_string()))?;

    let tr = &outcome.trajectory;
    let summary = format!(
        "scheme {}\nT {}\naccepted steps {}\nrejected attempts {}\nfinal rank {}\nmax rank {}\nfresh quadrature blocks {}\nwallclock {:.6} s\n",
        cfg.scheme.spec().label(),
        tr.final_time(),
        tr.steps.len(),
        tr.rejected.len(),
        f.rank(),
        tr.max_rank(),
        tr.total_fresh_blocks(),
        outcome.wallclock.as_secs_f64(),
    );
    let sp = dir.join("summary.txt");
    fs::write(&sp, &summary).map_err(|e| io_err(&sp, e))?;
    print!("{summary}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn study(
    kind: StudyKind,
    source: &SourceArgs,
    args: &RunArgs,
    schemes: &[String],
    ladder: Option<Vec<usize>>,
    tols: Vec<f64>,
    n_fine: usize,
) -> Result<(), Failure> {
    let cfg = args.resolve().map_err(Failure::Ingest)?;
    let problem = load_problem(source, &cfg)?;
    let schemes = schemes
        .iter()
        .map(|s| SchemeChoice::parse(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::Ingest)?;
    let mut spec = match kind {
        StudyKind::Adaptivity => StudySpec::adaptivity(schemes, tols),
        _ => StudySpec { kind, ..StudySpec::order(schemes) },
    };
    if let Some(l) = ladder {
        spec.ladder = l;
    }
    if let Stepping::Adaptive { h1, epus, .. } = cfg.stepping {
        spec.h1 = h1;
        spec.epus = epus;
    }
    spec.reference = if n_fine == 0 {
        ReferencePolicy::FinestScheme
    } else {
        ReferencePolicy::Oracle { n_fine }
    };
    spec.validate().map_err(Failure::Ingest)?;
    let dir = out_dir(&cfg)?;
    let report = run_study(&problem, &spec, &cfg).map_err(Failure::Solver)?;
    report.write(&dir).map_err(|e| io_err(&dir, e))?;
    print!("{}", report.summary());
    Ok(())
}

fn validate(seed: u64) -> Result<(), Failure> {
    let checks = run_checks(seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        Ok(())
    } else {
        Err(Failure::Validate)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { gen, out } => {
            let cfg = GeneratorConfig {
                kind: gen.kind,
                n: gen.n,
                rank: gen.rank,
                seed: gen.seed,
                t_final: gen.t_final,
            };
            generate_problem(&cfg)
                .map_err(|e| Failure::Ingest(e.to_string()))
                .and_then(|g| {
                    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
                    export_problem(&out, &g.problem).map_err(|e| Failure::Solver(e.to_string()))
                })
        }
        Command::Solve { source, run } => solve(&source, &run),
        Command::Study {
            study_kind,
            source,
            run,
            schemes,
            ladder,
            tols,
            n_fine,
        } => study(study_kind, &source, &run, &schemes, ladder, tols, n_fine),
        Command::Validate { seed } => validate(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Ingest(m) | Failure::Solver(m) => eprintln!("error: {m}"),
                Failure::Validate => eprintln!("error: validation failed"),
            }
            ExitCode::from(f.code())
        }
    }
}
