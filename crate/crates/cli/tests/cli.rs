use std::fs;
use std::path::Path;
use std::process::Command;

use dresplit::adaptive::{integrate_fixed, SolverOptions};
use dresplit::lowrank::to_dense;
use dresplit::oracle::{dense_dre_reference, relative_error, DenseProblem};
use dresplit::schemes::SchemeSpec;
use dresplit::subflows::QuadraticOperator;
use dresplit_cli::problem::{export_problem, generate_problem, ingest_problem, GeneratorConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dresplit"))
}

/// 1-D Laplacian, input at the left end, output at the right end.
fn write_laplacian(dir: &Path, n: usize) {
    let scale = 0.1 * ((n + 1) * (n + 1)) as f64 / 100.0;
    let mut a = format!("%%MatrixMarket matrix coordinate real general\n{n} {n} {}\n", 3 * n - 2);
    for i in 1..=n {
        a += &format!("{i} {i} {:e}\n", -2.0 * scale);
        if i > 1 {
            a += &format!("{i} {} {scale:e}\n{} {i} {scale:e}\n", i - 1, i - 1);
        }
    }
    fs::write(dir.join("A.mtx"), a).unwrap();
    let e = |k: usize| (1..=n).map(|i| if i == k { "1\n" } else { "0\n" }).collect::<String>();
    fs::write(dir.join("B.mtx"), format!("%%MatrixMarket matrix array real general\n{n} 1\n{}", e(1))).unwrap();
    fs::write(dir.join("C.mtx"), format!("%%MatrixMarket matrix array real general\n1 {n}\n{}", e(n))).unwrap();
}

#[test]
fn ingested_laplacian_matches_dense_reference() {
    let dir = tempfile::tempdir().unwrap();
    write_laplacian(dir.path(), 12);
    let p = ingest_problem(dir.path(), 1.0).unwrap();
    assert!(p.a.is_sparse());
    assert_eq!(p.q.rank(), 1);
    let tr = integrate_fixed(&p, &SchemeSpec::symmetric(2), 20, &SolverOptions::default()).unwrap();
    let reference = dense_dre_reference(&DenseProblem::from_problem(&p).unwrap(), 4000).unwrap();
    let err = relative_error(&to_dense(&tr.final_factor).unwrap(), &reference).unwrap();
    assert!(err < 1e-6, "relative error {err:e}");
}

#[test]
fn export_then_ingest_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_problem(&GeneratorConfig {
        n: 7,
        rank: 3,
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap();
    export_problem(dir.path(), &g.problem).unwrap();
    let back = ingest_problem(dir.path(), g.problem.t_final).unwrap();
    assert_eq!(back.a.to_dense(), g.problem.a.to_dense());
    assert_eq!(back.q.l(), g.problem.q.l());
    assert_eq!(back.q.d(), g.problem.q.d());
    assert_eq!(back.p0.l(), g.problem.p0.l());
    let (QuadraticOperator::LowRank { b: b1, .. }, QuadraticOperator::LowRank { b: b2, .. }) =
        (&back.s, &g.problem.s)
    else {
        panic!("expected low-rank S");
    };
    assert_eq!(b1, b2);
}

#[test]
fn generate_then_solve_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("prob");
    let out = dir.path().join("out");
    let st = bin()
        .args(["generate", "--kind", "laplacian1d", "--n", "20", "--rank", "2", "--out"])
        .arg(&prob)
        .status()
        .unwrap();
    assert!(st.success());
    let st = bin()
        .args(["solve", "--scheme", "sym", "--stages", "2", "--tol", "1e-4", "--h1", "0.01", "--epus", "--problem"])
        .arg(&prob)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    for f in ["steps.csv", "L.mtx", "D.mtx", "summary.txt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    assert!(steps.starts_with("index,t,h,err_est,accepted"));
    let last = steps.lines().last().unwrap();
    assert!(last.contains(",true,") && last.split(',').nth(1) == Some("1e0"), "{last}");
}

#[test]
fn config_file_drives_a_fixed_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"scheme":{"name":"strang"},"t_final":0.5,"stepping":{"fixed":{"n_steps":5}}}"#,
    )
    .unwrap();
    let out = bin()
        .arg("solve")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("scheme strang") && summary.contains("accepted steps 5"), "{summary}");
}

#[test]
fn ingestion_errors_exit_with_code_2_and_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    write_laplacian(dir.path(), 4);
    fs::write(
        dir.path().join("B.mtx"),
        "%%MatrixMarket matrix array real general\n4 1\n1\nx\n0\n0\n",
    )
    .unwrap();
    let out = bin().arg("solve").arg("--problem").arg(dir.path()).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("B.mtx:4:"), "{err}");

    let missing = bin().args(["solve", "--problem", "/nonexistent/dir"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn validate_passes() {
    let out = bin().arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn order_study_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["study", "order", "--schemes", "strang,sym2", "--ladder", "4,8,16,32", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let runs = fs::read_to_string(dir.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 2 * 4);
    assert!(dir.path().join("summary.txt").exists());
}
