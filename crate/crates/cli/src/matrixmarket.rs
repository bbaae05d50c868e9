//! MatrixMarket `coordinate` and `array` files (real or integer fields,
//! general or symmetric).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

#[derive(Debug, thiserror::Error)]
pub enum MmError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Coordinate,
    Array,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
}

/// Contents of a MatrixMarket file.
#[derive(Debug, Clone, PartialEq)]
pub enum MmMatrix {
    Sparse(CsrMatrix<f64>),
    Dense(DMatrix<f64>),
}

impl MmMatrix {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Sparse(m) => (m.nrows(), m.ncols()),
            Self::Dense(m) => m.shape(),
        }
    }

    pub fn into_dense(self) -> DMatrix<f64> {
        match self {
            Self::Dense(m) => m,
            Self::Sparse(m) => {
                let mut out = DMatrix::zeros(m.nrows(), m.ncols());
                for (i, j, v) in m.triplet_iter() {
                    out[(i, j)] += *v;
                }
                out
            }
        }
    }
}

pub fn read(path: &Path) -> Result<MmMatrix, MmError> {
    let text = fs::read_to_string(path).map_err(|source| MmError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text, path)
}

pub fn parse(text: &str, path: &Path) -> Result<MmMatrix, MmError> {
    let err = |line: usize, message: String| MmError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let words: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
    if words.len() != 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(err(
            hline,
            format!("expected '%%MatrixMarket matrix <layout> <field> <symmetry>', found '{header}'"),
        ));
    }
    let layout = match words[2].as_str() {
        "coordinate" => Layout::Coordinate,
        "array" => Layout::Array,
        other => return Err(err(hline, format!("unsupported layout '{other}'"))),
    };
    match words[3].as_str() {
        "real" | "integer" | "double" => {}
        other => return Err(err(hline, format!("unsupported field '{other}'"))),
    }
    let symmetry = match words[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        other => return Err(err(hline, format!("unsupported symmetry '{other}'"))),
    };

    let mut data = lines.filter(|(_, l)| {
        let t = l.trim();
        !t.is_empty() && !t.starts_with('%')
    });
    let (sline, size) = data
        .next()
        .ok_or_else(|| err(hline + 1, "missing size line".into()))?;
    let dims = parse_usizes(size).map_err(|m| err(sline, m))?;

    match layout {
        Layout::Coordinate => {
            let [rows, cols, nnz] = dims[..] else {
                return Err(err(sline, format!("expected 'rows cols nnz', found '{size}'")));
            };
            if symmetry == Symmetry::Symmetric && rows != cols {
                return Err(err(sline, "symmetric matrix must be square".into()));
            }
            let mut coo = CooMatrix::new(rows, cols);
            let mut count = 0;
            for (ln, l) in data {
                let f: Vec<&str> = l.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(err(ln, format!("expected 'row col value', found '{}'", l.trim())));
                }
                let i = parse_index(f[0], rows).map_err(|m| err(ln, m))?;
                let j = parse_index(f[1], cols).map_err(|m| err(ln, m))?;
                let v = parse_value(f[2]).map_err(|m| err(ln, m))?;
                if symmetry == Symmetry::Symmetric && j > i {
                    return Err(err(ln, "symmetric storage expects the lower triangle".into()));
                }
                coo.push(i, j, v);
                if symmetry == Symmetry::Symmetric && i != j {
                    coo.push(j, i, v);
                }
                count += 1;
                if count > nnz {
                    return Err(err(ln, format!("more entries than the declared {nnz}")));
                }
            }
            if count != nnz {
                return Err(err(
                    text.lines().count(),
                    format!("declared {nnz} entries, found {count}"),
                ));
            }
            Ok(MmMatrix::Sparse(CsrMatrix::from(&coo)))
        }
        Layout::Array => {
            let [rows, cols] = dims[..] else {
                return Err(err(sline, format!("expected 'rows cols', found '{size}'")));
            };
            if symmetry == Symmetry::Symmetric && rows != cols {
                return Err(err(sline, "symmetric matrix must be square".into()));
            }
            // column-major; symmetric stores the lower triangle only
            let slots: Vec<(usize, usize)> = match symmetry {
                Symmetry::General => (0..cols).flat_map(|j| (0..rows).map(move |i| (i, j))).collect(),
                Symmetry::Symmetric => (0..cols).flat_map(|j| (j..rows).map(move |i| (i, j))).collect(),
            };
            let mut m = DMatrix::zeros(rows, cols);
            let mut k = 0;
            for (ln, l) in data {
                for tok in l.split_whitespace() {
                    let v = parse_value(tok).map_err(|msg| err(ln, msg))?;
                    let Some(&(i, j)) = slots.get(k) else {
                        return Err(err(ln, format!("more than the expected {} values", slots.len())));
                    };
                    m[(i, j)] = v;
                    if symmetry == Symmetry::Symmetric {
                        m[(j, i)] = v;
                    }
                    k += 1;
                }
            }
            if k != slots.len() {
                return Err(err(
                    text.lines().count(),
                    format!("expected {} values, found {k}", slots.len()),
                ));
            }
            Ok(MmMatrix::Dense(m))
        }
    }
}

fn parse_usizes(s: &str) -> Result<Vec<usize>, String> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("'{t}' is not a non-negative integer")))
        .collect()
}

fn parse_index(s: &str, bound: usize) -> Result<usize, String> {
    let k: usize = s.parse().map_err(|_| format!("'{s}' is not an index"))?;
    if k == 0 || k > bound {
        return Err(format!("index {k} outside 1..={bound}"));
    }
    Ok(k - 1)
}

fn parse_value(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value '{s}'"));
    }
    Ok(v)
}

/// Shortest representation that parses back to the same bits.
fn fmt_value(v: f64) -> String {
    format!("{v:e}")
}

pub fn format_dense(m: &DMatrix<f64>) -> String {
    let mut out = String::from("%%MatrixMarket matrix array real general\n");
    writeln!(out, "{} {}", m.nrows(), m.ncols()).unwrap();
    for v in m.iter() {
        out.push_str(&fmt_value(*v));
        out.push('\n');
    }
    out
}

pub fn format_sparse(m: &CsrMatrix<f64>) -> String {
    let mut out = String::from("%%MatrixMarket matrix coordinate real general\n");
    writeln!(out, "{} {} {}", m.nrows(), m.ncols(), m.nnz()).unwrap();
    for (i, j, v) in m.triplet_iter() {
        writeln!(out, "{} {} {}", i + 1, j + 1, fmt_value(*v)).unwrap();
    }
    out
}

pub fn write_dense(path: &Path, m: &DMatrix<f64>) -> Result<(), MmError> {
    write_text(path, &format_dense(m))
}

pub fn write_sparse(path: &Path, m: &CsrMatrix<f64>) -> Result<(), MmError> {
    write_text(path, &format_sparse(m))
}

fn write_text(path: &Path, text: &str) -> Result<(), MmError> {
    fs::write(path, text).map_err(|source| MmError::Io {
        path: path.to_path_buf(),
        source,
    })
}
