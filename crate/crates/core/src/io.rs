//! Plain-text dense matrix format.
//!
//! ```text
//! rows cols
//! a11 a12 ... a1c
//! ...
//! ```
//!
//! Values are whitespace separated. The writer emits 17 significant digits so
//! that every `f64` survives a round trip bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub fn parse_matrix(text: &str) -> Result<Matrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing 'rows cols' header".into(),
    })?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::Parse {
            line: hline,
            message: format!("expected 'rows cols', found '{header}'"),
        });
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: hline,
            message: format!("invalid dimension '{s}'"),
        })
    };
    let rows = parse_dim(dims[0])?;
    let cols = parse_dim(dims[1])?;

    let mut m = Matrix::zeros(rows, cols);
    let mut last_line = hline;
    for i in 0..rows {
        let (lineno, line) = lines.next().ok_or(Error::Parse {
            line: last_line + 1,
            message: format!("expected {rows} rows, found {i}"),
        })?;
        last_line = lineno;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != cols {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {cols} values, found {}", fields.len()),
            });
        }
        for (j, f) in fields.iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("invalid number '{f}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("non-finite entry '{f}'"),
                });
            }
            m[(i, j)] = v;
        }
    }
    if let Some((lineno, _)) = lines.next() {
        return Err(Error::Parse {
            line: lineno,
            message: format!("unexpected data after {rows} rows"),
        });
    }
    Ok(m)
}

pub fn format_matrix(m: &Matrix) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_f64(m[(i, j)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_matrix(&text)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}
