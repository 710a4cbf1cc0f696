//! Sparse linear algebra kernels and Krylov solvers.
//!
//! Everything here is deterministic independent of the worker thread count:
//! SpMV accumulates each row sequentially and reductions use a fixed blocked
//! tree, so solver iteration counts are reproducible run-to-run and across
//! `--threads` settings.

mod eigs;
mod mm;
mod solvers;

pub use eigs::{extremal_generalized_eigs, EigOptions, EigEstimate};
pub use mm::{read_matrix_market, write_matrix_market, write_vector_market};
pub use solvers::{minres, pcg};

use crate::{Error, Result};
use rayon::prelude::*;

/// Block length of the fixed reduction tree used by [`dot`].
const DOT_BLOCK: usize = 4096;
/// Rows per parallel work item in SpMV and element-wise kernels.
const ROW_BLOCK: usize = 2048;

/// Symmetric sparse matrix in CSR format with sorted column indices.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a square CSR matrix from per-row `(column, value)` lists.
    /// Rows are sorted and duplicate columns merged.
    pub fn from_rows(n: usize, rows: Vec<Vec<(u32, f64)>>) -> CsrMatrix {
        assert_eq!(rows.len(), n, "row count");
        let mut row_offsets = Vec::with_capacity(n + 1);
        let nnz_upper: usize = rows.iter().map(|r| r.len()).sum();
        let mut col_indices = Vec::with_capacity(nnz_upper);
        let mut values = Vec::with_capacity(nnz_upper);
        row_offsets.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut last: Option<u32> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            row_offsets.push(col_indices.len());
        }
        CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn from_raw(
        n: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f64>,
    ) -> CsrMatrix {
        assert_eq!(row_offsets.len(), n + 1);
        assert_eq!(col_indices.len(), values.len());
        CsrMatrix {
            n,
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_offsets[i]..self.row_offsets[i + 1];
        (&self.col_indices[r.clone()], &self.values[r])
    }

    /// Iterates over stored entries as `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&c, &v)| (i, c as usize, v))
        })
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            if let Ok(k) = cols.binary_search(&(i as u32)) {
                d[i] = vals[k];
            }
        }
        d
    }

    /// Row sums; the lumped-mass construction.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).1.iter().sum())
            .collect()
    }

    /// `ca * self + cb * other` on the structural union of both patterns.
    pub fn add_scaled(&self, ca: f64, other: &CsrMatrix, cb: f64) -> CsrMatrix {
        assert_eq!(self.n, other.n, "matrix dimensions");
        let rows: Vec<Vec<(u32, f64)>> = (0..self.n)
            .map(|i| {
                let (c1, v1) = self.row(i);
                let (c2, v2) = other.row(i);
                let mut row: Vec<(u32, f64)> = Vec::with_capacity(c1.len() + c2.len());
                row.extend(c1.iter().zip(v1).map(|(&c, &v)| (c, ca * v)));
                row.extend(c2.iter().zip(v2).map(|(&c, &v)| (c, cb * v)));
                row
            })
            .collect();
        CsrMatrix::from_rows(self.n, rows)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest symmetry defect `|a_ij - a_ji|` over the stored pattern.
    pub fn symmetry_defect(&self) -> f64 {
        let mut defect = 0.0f64;
        for (i, j, v) in self.triplets() {
            if j < i {
                continue;
            }
            let (cols, vals) = self.row(j);
            let vt = match cols.binary_search(&(i as u32)) {
                Ok(k) => vals[k],
                Err(_) => 0.0,
            };
            defect = defect.max((v - vt).abs());
        }
        defect
    }
}

/// SPD diagonal operator (Jacobi/lumped-mass preconditioners).
#[derive(Debug, Clone)]
pub struct DiagonalMatrix {
    entries: Vec<f64>,
}

impl DiagonalMatrix {
    pub fn new(entries: Vec<f64>) -> Result<DiagonalMatrix> {
        if let Some(bad) = entries.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "diagonal operator requires positive entries, got {bad:.3e}"
            )));
        }
        Ok(DiagonalMatrix { entries })
    }

    /// Concatenates the blocks of a block-diagonal preconditioner.
    pub fn concat(blocks: &[&DiagonalMatrix]) -> DiagonalMatrix {
        let entries = blocks
            .iter()
            .flat_map(|b| b.entries.iter().copied())
            .collect();
        DiagonalMatrix { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn apply_into(&self, x: &[f64], y: &mut [f64]) {
        for ((y, x), d) in y.iter_mut().zip(x).zip(&self.entries) {
            *y = x * d;
        }
    }

    pub fn apply_inverse_into(&self, x: &[f64], y: &mut [f64]) {
        par_zip_map(y, x, &self.entries, |x, d| x / d);
    }

    pub fn inverse_sqrt_entries(&self) -> Vec<f64> {
        self.entries.iter().map(|d| 1.0 / d.sqrt()).collect()
    }
}

/// Symmetric linear operator, dense enough to multiply a vector.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()>;
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.n
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n || y.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        y.par_chunks_mut(ROW_BLOCK).enumerate().for_each(|(blk, out)| {
            let base = blk * ROW_BLOCK;
            for (k, out) in out.iter_mut().enumerate() {
                let i = base + k;
                let mut acc = 0.0;
                for idx in self.row_offsets[i]..self.row_offsets[i + 1] {
                    acc += self.values[idx] * x[self.col_indices[idx] as usize];
                }
                *out = acc;
            }
        });
        Ok(())
    }
}

impl LinearOperator for DiagonalMatrix {
    fn dim(&self) -> usize {
        self.entries.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.entries.len() {
            return Err(Error::DimensionMismatch {
                expected: self.entries.len(),
                got: x.len(),
            });
        }
        self.apply_into(x, y);
        Ok(())
    }
}

/// Densifies an operator column by column; dense eigen-oracles and small
/// verification problems only.
pub fn operator_to_dense(op: &dyn LinearOperator) -> Result<nalgebra::DMatrix<f64>> {
    let n = op.dim();
    let mut dense = nalgebra::DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col)?;
        e[j] = 0.0;
        for i in 0..n {
            dense[(i, j)] = col[i];
        }
    }
    Ok(dense)
}

/// Convergence data of one Krylov solve.
#[derive(Debug, Clone)]
pub struct KrylovReport {
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    /// Preconditioned residual norms, one entry per iteration plus the start.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub wall_time: f64,
}

/// Dot product with a fixed blocked reduction tree: block partial sums are
/// accumulated sequentially within each block and combined in block order,
/// so the result does not depend on the number of worker threads.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot length");
    let seq = |x: &[f64], y: &[f64]| -> f64 {
        let mut acc = 0.0;
        for (x, y) in x.iter().zip(y) {
            acc += x * y;
        }
        acc
    };
    if a.len() <= DOT_BLOCK {
        return seq(a, b);
    }
    let partials: Vec<f64> = a
        .par_chunks(DOT_BLOCK)
        .zip(b.par_chunks(DOT_BLOCK))
        .map(|(x, y)| seq(x, y))
        .collect();
    partials.iter().sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Sum with the same fixed blocked tree as [`dot`].
pub fn block_sum(a: &[f64]) -> f64 {
    let seq = |x: &[f64]| -> f64 {
        let mut acc = 0.0;
        for x in x {
            acc += x;
        }
        acc
    };
    if a.len() <= DOT_BLOCK {
        return seq(a);
    }
    let partials: Vec<f64> = a.par_chunks(DOT_BLOCK).map(seq).collect();
    partials.iter().sum()
}

/// `y += alpha * x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    y.par_chunks_mut(ROW_BLOCK)
        .zip(x.par_chunks(ROW_BLOCK))
        .for_each(|(y, x)| {
            for (y, x) in y.iter_mut().zip(x) {
                *y += alpha * x;
            }
        });
}

/// `y = x + beta * y`
pub fn xpby(y: &mut [f64], x: &[f64], beta: f64) {
    y.par_chunks_mut(ROW_BLOCK)
        .zip(x.par_chunks(ROW_BLOCK))
        .for_each(|(y, x)| {
            for (y, x) in y.iter_mut().zip(x) {
                *y = x + beta * *y;
            }
        });
}

fn par_zip_map(out: &mut [f64], a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) {
    out.par_chunks_mut(ROW_BLOCK)
        .zip(a.par_chunks(ROW_BLOCK))
        .zip(b.par_chunks(ROW_BLOCK))
        .for_each(|((out, a), b)| {
            for ((o, &a), &b) in out.iter_mut().zip(a).zip(b) {
                *o = f(a, b);
            }
        });
}
