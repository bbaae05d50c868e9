//! Problem files and generated test problems.
//!
//! A problem directory holds MatrixMarket files
//!
//! | file     | shape | meaning                                   |
//! |----------|-------|-------------------------------------------|
//! | `A.mtx`  | N×N   | system matrix (coordinate or array)       |
//! | `B.mtx`  | N×m   | input matrix, `S = B Ru⁻¹ Bᵀ`             |
//! | `C.mtx`  | p×N   | output matrix, `Q = Cᵀ Rx C`              |
//! | `Rx.mtx` | p×p   | optional output weight, default identity  |
//! | `Ru.mtx` | m×m   | optional input weight, default identity   |
//! | `L0.mtx` | N×r   | optional initial factor, default `P₀ = 0` |
//! | `D0.mtx` | r×r   | optional initial core, default identity   |

use std::path::{Path, PathBuf};

use dresplit::expaction::StiffOperator;
use dresplit::lowrank::LdltFactor;
use dresplit::oracle::{DenseProblem, MAX_DENSE_DIM};
use dresplit::subflows::{ProblemData, QuadraticOperator};
use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrixmarket::{self, MmError, MmMatrix};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error(transparent)]
    File(#[from] MmError),
    #[error("{path}: {message}")]
    Shape { path: PathBuf, message: String },
    #[error("invalid problem: {0}")]
    Problem(#[from] dresplit::Error),
}

fn shape_error(path: &Path, message: String) -> IngestError {
    IngestError::Shape {
        path: path.to_path_buf(),
        message,
    }
}

fn read_optional(path: &Path) -> Result<Option<MmMatrix>, IngestError> {
    if path.exists() {
        Ok(Some(matrixmarket::read(path)?))
    } else {
        Ok(None)
    }
}

fn expect_shape(path: &Path, got: (usize, usize), want: (usize, usize)) -> Result<(), IngestError> {
    if got != want {
        return Err(shape_error(
            path,
            format!("is {}x{}, expected {}x{}", got.0, got.1, want.0, want.1),
        ));
    }
    Ok(())
}

/// Reads a problem directory (see the module docs for the layout).
pub fn ingest_problem(dir: &Path, t_final: f64) -> Result<ProblemData, IngestError> {
    let path = |name: &str| dir.join(name);

    let a_path = path("A.mtx");
    let a = matrixmarket::read(&a_path)?;
    let (n, nc) = a.shape();
    if n != nc {
        return Err(shape_error(&a_path, format!("must be square, is {n}x{nc}")));
    }
    let a = match a {
        MmMatrix::Sparse(m) => StiffOperator::sparse(m)?,
        MmMatrix::Dense(m) => StiffOperator::dense(m)?,
    };

    let b_path = path("B.mtx");
    let b = matrixmarket::read(&b_path)?.into_dense();
    if b.nrows() != n {
        return Err(shape_error(&b_path, format!("has {} rows, A has {n}", b.nrows())));
    }
    let c_path = path("C.mtx");
    let c = matrixmarket::read(&c_path)?.into_dense();
    if c.ncols() != n {
        return Err(shape_error(&c_path, format!("has {} columns, A has {n}", c.ncols())));
    }

    let rx_path = path("Rx.mtx");
    let rx = match read_optional(&rx_path)? {
        Some(m) => {
            let m = m.into_dense();
            expect_shape(&rx_path, m.shape(), (c.nrows(), c.nrows()))?;
            m
        }
        None => DMatrix::identity(c.nrows(), c.nrows()),
    };
    let ru_path = path("Ru.mtx");
    let r_inv = match read_optional(&ru_path)? {
        Some(m) => {
            let m = m.into_dense();
            expect_shape(&ru_path, m.shape(), (b.ncols(), b.ncols()))?;
            m.try_inverse()
                .ok_or_else(|| shape_error(&ru_path, "is singular".into()))?
        }
        None => DMatrix::identity(b.ncols(), b.ncols()),
    };

    let l0_path = path("L0.mtx");
    let p0 = match read_optional(&l0_path)? {
        Some(l0) => {
            let l0 = l0.into_dense();
            if l0.nrows() != n {
                return Err(shape_error(&l0_path, format!("has {} rows, A has {n}", l0.nrows())));
            }
            let d0_path = path("D0.mtx");
            let d0 = match read_optional(&d0_path)? {
                Some(d) => {
                    let d = d.into_dense();
                    expect_shape(&d0_path, d.shape(), (l0.ncols(), l0.ncols()))?;
                    d
                }
                None => DMatrix::identity(l0.ncols(), l0.ncols()),
            };
            LdltFactor::new(l0, d0)?
        }
        None => LdltFactor::zero(n),
    };

    let q = LdltFactor::new(c.transpose(), rx)?;
    let s = QuadraticOperator::LowRank { b, r_inv };
    Ok(ProblemData::new(a, q, s, p0, t_final)?)
}

/// Writes a problem in the layout [`ingest_problem`] reads. `S` must be
/// given as `B Ru⁻¹ Bᵀ`.
pub fn export_problem(dir: &Path, problem: &ProblemData) -> Result<(), IngestError> {
    std::fs::create_dir_all(dir).map_err(|source| MmError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = |name: &str| dir.join(name);
    match problem.a.storage() {
        dresplit::expaction::OperatorStorage::Sparse { a, .. } => matrixmarket::write_sparse(&path("A.mtx"), a)?,
        dresplit::expaction::OperatorStorage::Dense(a) => matrixmarket::write_dense(&path("A.mtx"), a)?,
    }
    let QuadraticOperator::LowRank { b, r_inv } = &problem.s else {
        return Err(shape_error(dir, "only S = B Ru⁻¹ Bᵀ can be exported".into()));
    };
    matrixmarket::write_dense(&path("B.mtx"), b)?;
    if r_inv != &DMatrix::identity(b.ncols(), b.ncols()) {
        let ru = r_inv
            .clone()
            .try_inverse()
            .ok_or_else(|| shape_error(dir, "Ru⁻¹ is singular".into()))?;
        matrixmarket::write_dense(&path("Ru.mtx"), &ru)?;
    }
    matrixmarket::write_dense(&path("C.mtx"), &problem.q.l().transpose())?;
    matrixmarket::write_dense(&path("Rx.mtx"), problem.q.d())?;
    if problem.p0.rank() > 0 {
        matrixmarket::write_dense(&path("L0.mtx"), problem.p0.l())?;
        matrixmarket::write_dense(&path("D0.mtx"), problem.p0.d())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    /// Dense Gaussian `A`, Gaussian rank-r factors of `Q`, `S` and `P₀`.
    RandomLowrank,
    /// Heat equation on the unit interval with `ranks` inputs and outputs.
    Laplacian1d,
    /// Heat equation on the unit square (`n` is the grid width).
    Laplacian2d,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    pub kind: ProblemKind,
    pub n: usize,
    pub rank: usize,
    pub seed: u64,
    pub t_final: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: ProblemKind::RandomLowrank,
            n: 10,
            rank: 4,
            seed: 1,
            t_final: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedProblem {
    pub problem: ProblemData,
    /// Dense copy for the reference solver, when the dimension allows it.
    pub dense: Option<DenseProblem>,
}

/// Diffusion coefficient of the Laplacian problems.
const DIFFUSION: f64 = 0.01;

pub fn generate_problem(cfg: &GeneratorConfig) -> Result<GeneratedProblem, dresplit::Error> {
    if cfg.n == 0 || cfg.rank == 0 {
        return Err(dresplit::Error::InvalidInput("n and rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let problem = match cfg.kind {
        ProblemKind::RandomLowrank => {
            let n = cfg.n;
            let scale = 1.0 / (n as f64).sqrt();
            let a = gaussian(&mut rng, n, n, scale);
            let lq = gaussian(&mut rng, n, cfg.rank, scale);
            let b = gaussian(&mut rng, n, cfg.rank, scale);
            let l0 = gaussian(&mut rng, n, cfg.rank, scale);
            ProblemData::new(
                StiffOperator::dense(a)?,
                LdltFactor::from_basis(lq),
                QuadraticOperator::LowRank {
                    b,
                    r_inv: DMatrix::identity(cfg.rank, cfg.rank),
                },
                LdltFactor::from_basis(l0),
                cfg.t_final,
            )?
        }
        ProblemKind::Laplacian1d | ProblemKind::Laplacian2d => {
            let a = if cfg.kind == ProblemKind::Laplacian1d {
                laplacian_1d(cfg.n)
            } else {
                laplacian_2d(cfg.n)
            };
            let n = a.nrows();
            let scale = 1.0 / (n as f64).sqrt();
            let b = gaussian(&mut rng, n, cfg.rank, scale);
            let c = gaussian(&mut rng, cfg.rank, n, scale);
            ProblemData::new(
                StiffOperator::sparse(a)?,
                LdltFactor::from_basis(c.transpose()),
                QuadraticOperator::LowRank {
                    b,
                    r_inv: DMatrix::identity(cfg.rank, cfg.rank),
                },
                LdltFactor::zero(n),
                cfg.t_final,
            )?
        }
    };
    let dense = if problem.dim() <= MAX_DENSE_DIM {
        Some(DenseProblem::from_problem(&problem)?)
    } else {
        None
    };
    Ok(GeneratedProblem { problem, dense })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    // filled row by row so the draw order does not depend on storage order
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// `DIFFUSION · Δ_h` with Dirichlet boundaries on `m` interior points.
fn laplacian_1d(m: usize) -> CsrMatrix<f64> {
    let w = DIFFUSION * ((m + 1) as f64).powi(2);
    let mut coo = CooMatrix::new(m, m);
    for i in 0..m {
        coo.push(i, i, -2.0 * w);
        if i > 0 {
            coo.push(i, i - 1, w);
        }
        if i + 1 < m {
            coo.push(i, i + 1, w);
        }
    }
    CsrMatrix::from(&coo)
}

/// Five-point stencil on an `m × m` interior grid, row-major numbering.
fn laplacian_2d(m: usize) -> CsrMatrix<f64> {
    let w = DIFFUSION * ((m + 1) as f64).powi(2);
    let n = m * m;
    let idx = |i: usize, j: usize| i * m + j;
    let mut coo = CooMatrix::new(n, n);
    for i in 0..m {
        for j in 0..m {
            let k = idx(i, j);
            coo.push(k, k, -4.0 * w);
            if i > 0 {
                coo.push(k, idx(i - 1, j), w);
            }
            if i + 1 < m {
                coo.push(k, idx(i + 1, j), w);
            }
            if j > 0 {
                coo.push(k, idx(i, j - 1), w);
            }
            if j + 1 < m {
                coo.push(k, idx(i, j + 1), w);
            }
        }
    }
    CsrMatrix::from(&coo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;

    #[test]
    fn generation_is_reproducible() {
        let cfg = GeneratorConfig::default();
        let a = generate_problem(&cfg).unwrap();
        let b = generate_problem(&cfg).unwrap();
        assert_eq!(a.dense, b.dense);
        let other = generate_problem(&GeneratorConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.dense, other.dense);
    }

    #[test]
    fn generated_data_is_psd() {
        for kind in [ProblemKind::RandomLowrank, ProblemKind::Laplacian1d, ProblemKind::Laplacian2d] {
            let g = generate_problem(&GeneratorConfig {
                kind,
                n: 6,
                rank: 2,
                ..GeneratorConfig::default()
            })
            .unwrap();
            let d = g.dense.unwrap();
            for m in [&d.q, &d.s, &d.p0] {
                let min = SymmetricEigen::new(m.clone()).eigenvalues.min();
                assert!(min >= -1e-12, "{kind:?}: {min}");
            }
        }
    }

    #[test]
    fn random_problem_mirrors_requested_shape() {
        let g = generate_problem(&GeneratorConfig::default()).unwrap();
        assert_eq!(g.problem.dim(), 10);
        assert_eq!(g.problem.q.rank(), 4);
        assert_eq!(g.problem.p0.rank(), 4);
    }

    #[test]
    fn laplacian_2d_dimension() {
        let g = generate_problem(&GeneratorConfig {
            kind: ProblemKind::Laplacian2d,
            n: 4,
            rank: 1,
            ..GeneratorConfig::default()
        })
        .unwrap();
        assert_eq!(g.problem.dim(), 16);
        assert!(g.problem.a.is_sparse());
    }
}
