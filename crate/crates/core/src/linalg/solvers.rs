//! Preconditioned CG and MINRES.

use super::{axpy, dot, xpby, DiagonalMatrix, KrylovReport, LinearOperator};
use crate::{Error, Result};
use std::time::Instant;

/// How often PCG recomputes the residual from scratch to bound drift over
/// long 1e-6 reductions.
const RESIDUAL_REFRESH: usize = 50;

/// Preconditioned conjugate gradients for SPD operators.
///
/// Stops once the preconditioned residual norm `sqrt(r' P^-1 r)` has dropped
/// below `rel_tol` times its initial value. Returns the iterate together with
/// the convergence report; running out of iterations is reported via
/// `converged = false`, an indefinite direction (`p'Ap <= 0`) is a hard error.
pub fn pcg<A: LinearOperator + ?Sized>(
    op: &A,
    precond: &DiagonalMatrix,
    b: &[f64],
    x0: &[f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, KrylovReport)> {
    let n = op.dim();
    if b.len() != n || x0.len() != n || precond.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "PCG relative tolerance must lie in (0,1), got {rel_tol}"
        )));
    }

    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    op.apply(&x, &mut r)?;
    for (r, b) in r.iter_mut().zip(b) {
        *r = b - *r;
    }
    let mut z = vec![0.0; n];
    precond.apply_inverse_into(&r, &mut z);
    let mut rho = dot(&r, &z);
    if rho < 0.0 {
        return Err(Error::Numerical(format!(
            "preconditioned residual product negative ({rho:.3e}); preconditioner not SPD"
        )));
    }
    let norm0 = rho.sqrt();
    let mut history = vec![norm0];
    if norm0 == 0.0 {
        return Ok((
            x,
            KrylovReport {
                iterations: 0,
                initial_residual: 0.0,
                final_residual: 0.0,
                residual_history: history,
                converged: true,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ));
    }
    let target = rel_tol * norm0;

    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut res_norm = norm0;

    for iter in 1..=max_iters {
        op.apply(&p, &mut q)?;
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(Error::IndefiniteOperator(pq));
        }
        let alpha = rho / pq;
        axpy(&mut x, alpha, &p);
        if iter % RESIDUAL_REFRESH == 0 {
            op.apply(&x, &mut r)?;
            for (r, b) in r.iter_mut().zip(b) {
                *r = b - *r;
            }
        } else {
            axpy(&mut r, -alpha, &q);
        }
        precond.apply_inverse_into(&r, &mut z);
        let rho_new = dot(&r, &z).max(0.0);
        res_norm = rho_new.sqrt();
        history.push(res_norm);
        iterations = iter;
        if res_norm <= target {
            converged = true;
            break;
        }
        xpby(&mut p, &z, rho_new / rho);
        rho = rho_new;
    }

    Ok((
        x,
        KrylovReport {
            iterations,
            initial_residual: norm0,
            final_residual: res_norm,
            residual_history: history,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Preconditioned MINRES for symmetric (possibly indefinite) operators with
/// an SPD diagonal preconditioner.
///
/// The recurrence follows the standard Lanczos/Givens formulation; `|eta|`
/// tracks the preconditioned residual norm and is monotonically
/// non-increasing. Breakdown (zero Lanczos continuation with a residual
/// above the target) is a hard error.
pub fn minres<A: LinearOperator + ?Sized>(
    op: &A,
    precond: &DiagonalMatrix,
    b: &[f64],
    x0: &[f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, KrylovReport)> {
    let n = op.dim();
    if b.len() != n || x0.len() != n || precond.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "MINRES relative tolerance must lie in (0,1), got {rel_tol}"
        )));
    }

    let start = Instant::now();
    let mut x = x0.to_vec();

    let mut v = vec![0.0; n];
    op.apply(&x, &mut v)?;
    for (v, b) in v.iter_mut().zip(b) {
        *v = b - *v;
    }
    let mut v_old = vec![0.0; n];
    let mut z = vec![0.0; n];
    precond.apply_inverse_into(&v, &mut z);
    let zv = dot(&z, &v);
    if zv < 0.0 {
        return Err(Error::Numerical(
            "MINRES preconditioner is not positive definite".into(),
        ));
    }
    let mut gamma = zv.sqrt();
    let norm0 = gamma;
    let mut history = vec![norm0];
    if norm0 == 0.0 {
        return Ok((
            x,
            KrylovReport {
                iterations: 0,
                initial_residual: 0.0,
                final_residual: 0.0,
                residual_history: history,
                converged: true,
                wall_time: start.elapsed().as_secs_f64(),
            },
        ));
    }
    let target = rel_tol * norm0;

    let mut gamma_old = 1.0;
    let mut eta = gamma;
    let (mut s_old, mut s) = (0.0, 0.0);
    let (mut c_old, mut c) = (1.0, 1.0);
    let mut w = vec![0.0; n];
    let mut w_old = vec![0.0; n];
    let mut az = vec![0.0; n];

    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=max_iters {
        // Lanczos step on the preconditioned operator
        let inv_gamma = 1.0 / gamma;
        for z in z.iter_mut() {
            *z *= inv_gamma;
        }
        op.apply(&z, &mut az)?;
        let delta = dot(&az, &z);
        let ratio = gamma / gamma_old;
        let mut v_new = az.clone();
        axpy(&mut v_new, -delta * inv_gamma, &v);
        axpy(&mut v_new, -ratio, &v_old);
        let mut z_new = vec![0.0; n];
        precond.apply_inverse_into(&v_new, &mut z_new);
        let zv = dot(&z_new, &v_new);
        if zv < 0.0 {
            return Err(Error::Numerical(
                "MINRES preconditioner is not positive definite".into(),
            ));
        }
        let gamma_new = zv.sqrt();

        // Givens rotation applied to the tridiagonal column
        let a0 = c * delta - c_old * s * gamma;
        let a1 = (a0 * a0 + gamma_new * gamma_new).sqrt();
        let a2 = s * delta + c_old * c * gamma;
        let a3 = s_old * gamma;
        if a1 == 0.0 {
            return Err(Error::Breakdown(format!(
                "MINRES stalled at iteration {iter} with residual {:.3e}",
                eta.abs()
            )));
        }
        let c_new = a0 / a1;
        let s_new = gamma_new / a1;

        // w_new = (z - a3 w_old - a2 w) / a1
        let mut w_new = z.clone();
        axpy(&mut w_new, -a3, &w_old);
        axpy(&mut w_new, -a2, &w);
        for w in w_new.iter_mut() {
            *w /= a1;
        }
        axpy(&mut x, c_new * eta, &w_new);
        eta = -s_new * eta;

        iterations = iter;
        history.push(eta.abs());
        if eta.abs() <= target {
            converged = true;
            break;
        }
        if gamma_new == 0.0 {
            return Err(Error::Breakdown(format!(
                "Lanczos continuation vanished at iteration {iter} with residual {:.3e}",
                eta.abs()
            )));
        }

        std::mem::swap(&mut v_old, &mut v);
        std::mem::swap(&mut v, &mut v_new);
        std::mem::swap(&mut z, &mut z_new);
        std::mem::swap(&mut w_old, &mut w);
        std::mem::swap(&mut w, &mut w_new);
        gamma_old = gamma;
        gamma = gamma_new;
        c_old = c;
        c = c_new;
        s_old = s;
        s = s_new;
    }

    let final_residual = eta.abs();
    Ok((
        x,
        KrylovReport {
            iterations,
            initial_residual: norm0,
            final_residual,
            residual_history: history,
            converged,
            wall_time: start.elapsed().as_secs_f64(),
        },
    ))
}
