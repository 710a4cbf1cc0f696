//! Solvers for tracking-type elliptic optimal control problems with
//! diffusion (energy) and L2 regularization.
//!
//! The library discretizes the model problem
//!
//! ```text
//! min 1/2 ||y - y_d||^2 + rho/2 ||u||^2   s.t.  -Δy = u,  y = 0 on ∂Ω
//! ```
//!
//! with P1 finite elements on simplicial meshes of the unit cube and offers
//! three algebraically equivalent routes to the discrete state:
//!
//! * the diffusion-regularized primal system `(K_rho + M) y = y_d`,
//! * the Schur complement `(B^T A^{-1} B + M) y = y_d` (matrix-free), and
//! * the full saddle-point system in `(p, y)` solved by MINRES.
//!
//! All SPD systems are solved by PCG with a diagonal mass preconditioner,
//! which is spectrally equivalent to the Schur complement once the
//! regularization is balanced with the mesh size (`rho = h^2` for energy,
//! `rho = h^4` for L2 regularization). The [`driver`] module runs uniform and
//! adaptive multilevel studies, nested iteration, and thread-scaling
//! benchmarks on top of these kernels.

pub mod driver;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod ocp;

use thiserror::Error;

/// Errors shared across the solver stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is out of range or inconsistent.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The operator handed to PCG is not positive definite.
    #[error("operator not positive definite: p'Ap = {0:.3e}")]
    IndefiniteOperator(f64),

    /// Lanczos/MINRES breakdown (zero continuation with nonzero residual).
    #[error("Krylov breakdown: {0}")]
    Breakdown(String),

    /// An inner solve did not reach its tolerance; outer operators treat
    /// this as a hard error because the outer Krylov method would silently
    /// see a perturbed operator.
    #[error("inner solve failed: residual reduction {achieved:.3e} after {iterations} iterations (target {target:.3e})")]
    InnerSolveFailed {
        achieved: f64,
        target: f64,
        iterations: usize,
    },

    /// A numerical invariant was violated (negative lumped mass, NaN, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
