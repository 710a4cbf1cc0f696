//! Minimal Matrix Market coordinate/array IO for debugging and golden tests.

use super::CsrMatrix;
use crate::{Error, Result};
use std::io::{BufRead, Write};

pub fn write_matrix_market<W: Write>(out: &mut W, matrix: &CsrMatrix) -> Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", matrix.n(), matrix.n(), matrix.nnz())?;
    for (i, j, v) in matrix.triplets() {
        writeln!(out, "{} {} {:.17e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn write_vector_market<W: Write>(out: &mut W, vector: &[f64]) -> Result<()> {
    writeln!(out, "%%MatrixMarket matrix array real general")?;
    writeln!(out, "{} 1", vector.len())?;
    for v in vector {
        writeln!(out, "{v:.17e}")?;
    }
    Ok(())
}

pub fn read_matrix_market<R: BufRead>(input: R) -> Result<CsrMatrix> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidParameter("empty matrix market stream".into()))??;
    if !header.starts_with("%%MatrixMarket matrix coordinate real") {
        return Err(Error::InvalidParameter(format!(
            "unsupported matrix market header: {header}"
        )));
    }
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::new();
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match dims {
            None => {
                if fields.len() != 3 {
                    return Err(Error::InvalidParameter(format!(
                        "bad size line: {line}"
                    )));
                }
                let parse = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|e| Error::InvalidParameter(format!("bad size '{s}': {e}")))
                };
                let (m, n, nnz) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
                if m != n {
                    return Err(Error::InvalidParameter(format!(
                        "only square matrices supported, got {m}x{n}"
                    )));
                }
                rows = vec![Vec::new(); n];
                dims = Some((m, n, nnz));
            }
            Some(_) => {
                if fields.len() != 3 {
                    return Err(Error::InvalidParameter(format!("bad entry: {line}")));
                }
                let i: usize = fields[0]
                    .parse()
                    .map_err(|e| Error::InvalidParameter(format!("bad row '{}': {e}", fields[0])))?;
                let j: usize = fields[1]
                    .parse()
                    .map_err(|e| Error::InvalidParameter(format!("bad col '{}': {e}", fields[1])))?;
                let v: f64 = fields[2]
                    .parse()
                    .map_err(|e| Error::InvalidParameter(format!("bad value '{}': {e}", fields[2])))?;
                rows[i - 1].push(((j - 1) as u32, v));
            }
        }
    }
    match dims {
        Some((_, n, _)) => Ok(CsrMatrix::from_rows(n, rows)),
        None => Err(Error::InvalidParameter("missing size line".into())),
    }
}
