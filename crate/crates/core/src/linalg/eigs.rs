//! Extremal generalized eigenvalue estimation for spectral-equivalence checks.

use super::{dot, norm, DiagonalMatrix, LinearOperator};
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct EigOptions {
    /// Problems up to this size are solved by a dense symmetric eigensolver.
    pub n_small_threshold: usize,
    /// Lanczos steps (with full reorthogonalization) above the threshold.
    pub lanczos_iters: usize,
    pub seed: u64,
}

impl Default for EigOptions {
    fn default() -> Self {
        EigOptions {
            n_small_threshold: 600,
            lanczos_iters: 200,
            seed: 0x5eed,
        }
    }
}

/// Extremal eigenvalues of `A x = lambda P x`.
#[derive(Debug, Clone, Copy)]
pub struct EigEstimate {
    pub lambda_min: f64,
    pub lambda_max: f64,
    /// False when the Lanczos residual bound could not certify three
    /// significant digits (stagnation).
    pub certified: bool,
}

/// Computes the extremal eigenvalues of the pencil `(A, P)` with `P` SPD
/// diagonal, via the symmetric transform `B = P^-1/2 A P^-1/2`.
pub fn extremal_generalized_eigs(
    op: &dyn LinearOperator,
    p: &DiagonalMatrix,
    opts: &EigOptions,
) -> Result<EigEstimate> {
    let n = op.dim();
    if p.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: p.len(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidParameter("empty operator".into()));
    }
    let inv_sqrt = p.inverse_sqrt_entries();
    if n <= opts.n_small_threshold {
        dense_path(op, &inv_sqrt)
    } else {
        lanczos_path(op, &inv_sqrt, opts)
    }
}

fn apply_transformed(
    op: &dyn LinearOperator,
    inv_sqrt: &[f64],
    x: &[f64],
    scratch: &mut Vec<f64>,
    y: &mut [f64],
) -> Result<()> {
    scratch.clear();
    scratch.extend(x.iter().zip(inv_sqrt).map(|(x, s)| x * s));
    op.apply(scratch, y)?;
    for (y, s) in y.iter_mut().zip(inv_sqrt) {
        *y *= s;
    }
    Ok(())
}

fn dense_path(op: &dyn LinearOperator, inv_sqrt: &[f64]) -> Result<EigEstimate> {
    let n = op.dim();
    let mut dense = nalgebra::DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    for j in 0..n {
        e[j] = 1.0;
        apply_transformed(op, inv_sqrt, &e, &mut scratch, &mut col)?;
        e[j] = 0.0;
        for i in 0..n {
            dense[(i, j)] = col[i];
        }
    }
    // matrix-free operators (inner solves) leave a tiny asymmetry
    let sym = (&dense + dense.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    let lambda_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = eigs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(EigEstimate {
        lambda_min,
        lambda_max,
        certified: true,
    })
}

fn lanczos_path(op: &dyn LinearOperator, inv_sqrt: &[f64], opts: &EigOptions) -> Result<EigEstimate> {
    let n = op.dim();
    let m = opts.lanczos_iters.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }
    let mut alphas = Vec::with_capacity(m);
    let mut betas = Vec::with_capacity(m);
    let mut w = vec![0.0; n];
    let mut scratch = Vec::with_capacity(n);
    let mut exact_subspace = false;

    for _ in 0..m {
        apply_transformed(op, inv_sqrt, &v, &mut scratch, &mut w)?;
        let alpha = dot(&w, &v);
        alphas.push(alpha);
        basis.push(v.clone());
        // full reorthogonalization, two passes
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(&w, q);
                for (w, q) in w.iter_mut().zip(q) {
                    *w -= proj * q;
                }
            }
        }
        let beta = norm(&w);
        if beta <= 1e-12 * alpha.abs().max(1.0) {
            exact_subspace = true;
            break;
        }
        betas.push(beta);
        v = w.iter().map(|x| x / beta).collect();
    }

    let k = alphas.len();
    let mut t = nalgebra::DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alphas[i];
        if i + 1 < k {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(t);
    let mut min_idx = 0;
    let mut max_idx = 0;
    for i in 0..k {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[max_idx] {
            max_idx = i;
        }
    }
    let lambda_min = eig.eigenvalues[min_idx];
    let lambda_max = eig.eigenvalues[max_idx];

    // Ritz residual bound |beta_k * y_k|: three significant digits required
    let certified = if exact_subspace || k == n {
        true
    } else {
        let beta_last = *betas.last().unwrap_or(&0.0);
        let res_min = (beta_last * eig.eigenvectors[(k - 1, min_idx)]).abs();
        let res_max = (beta_last * eig.eigenvectors[(k - 1, max_idx)]).abs();
        res_min <= 1e-3 * lambda_min.abs().max(1e-300)
            && res_max <= 1e-3 * lambda_max.abs().max(1e-300)
    };

    Ok(EigEstimate {
        lambda_min,
        lambda_max,
        certified,
    })
}
