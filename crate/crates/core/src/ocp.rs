//! Discrete forms of the tracking-type optimal control problem.
//!
//! Three algebraically related systems produce the state `y`:
//!
//! * `DiffusionPrimal`: the SPD system `(K_rho + M) y = y_d`, available for
//!   energy regularization. With constant `rho` it coincides with the Schur
//!   complement; with element-wise `rho_tau = h_tau^2` it is the
//!   diffusion-regularized problem used in the adaptive studies.
//! * `SchurComplement`: `(B' A_{1/rho}^{-1} B + M) y = y_d`, matrix-free.
//!   For L2 regularization `A_{1/rho}` is the inverse-weighted lumped mass
//!   (diagonal, inverted exactly); for energy regularization it is the
//!   scaled stiffness `K_{1/rho}`, inverted by an inner PCG.
//! * `SaddlePoint`: the full symmetric indefinite system in `(p, y)`.
//!
//! `verify_schur_identity` and `verify_spectral_equivalence` check the
//! structural identities that make the diagonally preconditioned solvers
//! optimal: `S = rho K + M` for constant `rho`, and
//! `(d+2)^{-1} D <= M <= S <= (c_inv^r + 1) D` under balanced regularization.

use crate::fem::{self, BoxTarget, Coeff, DofMap};
use crate::linalg::{
    self, extremal_generalized_eigs, CsrMatrix, DiagonalMatrix, EigOptions, LinearOperator,
};
use crate::mesh::Mesh;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Relative tolerance of the inner PCG inverting `K_{1/rho}` inside the
/// energy-regularized Schur complement; well below the outer tolerances so
/// the outer Krylov method sees an effectively exact operator.
pub const INNER_SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKind {
    /// H^-1 (energy) regularization: the control cost is a dual norm and the
    /// discrete regularization operator is the scaled stiffness matrix.
    Energy,
    /// Standard L2 regularization with the lumped-mass variant of the
    /// regularization operator.
    L2,
}

impl RegKind {
    /// Exponent of the balanced coupling `rho = h^r`.
    pub fn exponent(self) -> i32 {
        match self {
            RegKind::Energy => 2,
            RegKind::L2 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// One value for the whole mesh.
    Constant(f64),
    /// `rho_tau = h_tau^r` with the element diameter `h_tau` and the
    /// exponent of the regularization kind.
    MeshAdapted,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Regularization {
    pub kind: RegKind,
    pub rho: RhoMode,
}

impl Regularization {
    pub fn new(kind: RegKind, rho: RhoMode) -> Regularization {
        Regularization { kind, rho }
    }

    pub fn energy_constant(value: f64) -> Regularization {
        Regularization::new(RegKind::Energy, RhoMode::Constant(value))
    }

    pub fn energy_adapted() -> Regularization {
        Regularization::new(RegKind::Energy, RhoMode::MeshAdapted)
    }

    pub fn l2_constant(value: f64) -> Regularization {
        Regularization::new(RegKind::L2, RhoMode::Constant(value))
    }

    pub fn l2_adapted() -> Regularization {
        Regularization::new(RegKind::L2, RhoMode::MeshAdapted)
    }

    /// Element-wise regularization values on the given mesh.
    pub fn rho_per_element(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        match self.rho {
            RhoMode::Constant(v) => {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "regularization parameter must be positive, got {v}"
                    )));
                }
                Ok(vec![v; mesh.n_elements()])
            }
            RhoMode::MeshAdapted => {
                let r = self.kind.exponent();
                Ok(mesh.element_sizes().iter().map(|h| h.powi(r)).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemForm {
    DiffusionPrimal,
    SchurComplement,
    SaddlePoint,
}

/// The regularization operator `A_{1/rho}` and its inverse.
enum RegOperator {
    /// Diagonal (L2 with lumped mass): inverted exactly.
    Diagonal(DiagonalMatrix),
    /// SPD matrix (energy: `K_{1/rho}`): inverted by inner PCG.
    Spd {
        matrix: CsrMatrix,
        precond: DiagonalMatrix,
        max_iters: usize,
    },
}

impl RegOperator {
    fn build(mesh: &Mesh, dofmap: &DofMap, reg: &Regularization) -> Result<RegOperator> {
        let rho = reg.rho_per_element(mesh)?;
        let inv_rho: Vec<f64> = rho.iter().map(|r| 1.0 / r).collect();
        match reg.kind {
            RegKind::L2 => Ok(RegOperator::Diagonal(fem::weighted_lumped_mass_diagonal(
                mesh,
                dofmap,
                Coeff::PerElement(&inv_rho),
            )?)),
            RegKind::Energy => {
                let matrix = fem::assemble_stiffness(mesh, dofmap, Coeff::PerElement(&inv_rho))?;
                let precond = DiagonalMatrix::new(matrix.diagonal())?;
                let max_iters = matrix.n().max(2_000);
                Ok(RegOperator::Spd {
                    matrix,
                    precond,
                    max_iters,
                })
            }
        }
    }

    fn dim(&self) -> usize {
        match self {
            RegOperator::Diagonal(d) => d.len(),
            RegOperator::Spd { matrix, .. } => matrix.n(),
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        match self {
            RegOperator::Diagonal(d) => d.apply(x, y),
            RegOperator::Spd { matrix, .. } => matrix.apply(x, y),
        }
    }

    /// `y = A^{-1} x`, exact for the diagonal variant, inner PCG otherwise.
    /// Returns the inner iteration count.
    fn apply_inverse(&self, x: &[f64], y: &mut [f64]) -> Result<usize> {
        match self {
            RegOperator::Diagonal(d) => {
                d.apply_inverse_into(x, y);
                Ok(0)
            }
            RegOperator::Spd {
                matrix,
                precond,
                max_iters,
            } => {
                let x0 = vec![0.0; matrix.n()];
                let (sol, report) =
                    linalg::pcg(matrix, precond, x, &x0, INNER_SOLVE_TOL, *max_iters)?;
                if !report.converged {
                    return Err(Error::InnerSolveFailed {
                        achieved: report.final_residual
                            / report.initial_residual.max(f64::MIN_POSITIVE),
                        target: INNER_SOLVE_TOL,
                        iterations: report.iterations,
                    });
                }
                y.copy_from_slice(&sol);
                Ok(report.iterations)
            }
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        match self {
            RegOperator::Diagonal(d) => d.entries().to_vec(),
            RegOperator::Spd { matrix, .. } => matrix.diagonal(),
        }
    }
}

/// Matrix-free Schur complement `v -> B' A^{-1} B v + M v`.
pub struct SchurOperator {
    b: CsrMatrix,
    mass: CsrMatrix,
    reg_op: RegOperator,
    inner_iterations: AtomicUsize,
}

impl SchurOperator {
    /// Total inner PCG iterations spent inverting the regularization
    /// operator so far (zero for the diagonal L2 variant).
    pub fn inner_iterations(&self) -> usize {
        self.inner_iterations.load(Ordering::Relaxed)
    }

    pub fn mass(&self) -> &CsrMatrix {
        &self.mass
    }
}

impl LinearOperator for SchurOperator {
    fn dim(&self) -> usize {
        self.b.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.b.n();
        if x.len() != n || y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: x.len(),
            });
        }
        let mut t = vec![0.0; n];
        self.b.apply(x, &mut t)?;
        let mut w = vec![0.0; n];
        let inner = self.reg_op.apply_inverse(&t, &mut w)?;
        self.inner_iterations.fetch_add(inner, Ordering::Relaxed);
        self.b.apply(&w, y)?;
        self.mass.apply(x, &mut t)?;
        for (y, t) in y.iter_mut().zip(&t) {
            *y += t;
        }
        Ok(())
    }
}

/// The 2x2 block operator `[[A_{1/rho}, B], [B', -M]]` acting on `(p, y)`.
pub struct SaddleOperator {
    reg_op: RegOperator,
    b: CsrMatrix,
    mass: CsrMatrix,
}

/// Adjoint and state blocks of a saddle-point solve.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub p: Vec<f64>,
    pub y: Vec<f64>,
}

impl SaddleOperator {
    pub fn n_blocks(&self) -> usize {
        self.b.n()
    }

    /// Splits a stacked solution vector into `(p, y)`.
    pub fn split<'a>(&self, x: &'a [f64]) -> (&'a [f64], &'a [f64]) {
        let n = self.b.n();
        (&x[..n], &x[n..])
    }

    pub fn split_solution(&self, x: &[f64]) -> SaddleSolution {
        let (p, y) = self.split(x);
        SaddleSolution {
            p: p.to_vec(),
            y: y.to_vec(),
        }
    }

    /// Block-diagonal preconditioner: the diagonals of `A_{1/rho}` and `M`.
    pub fn block_preconditioner(&self) -> Result<DiagonalMatrix> {
        let mut entries = self.reg_op.diagonal();
        entries.extend(self.mass.diagonal());
        DiagonalMatrix::new(entries)
    }

    /// Eliminated control `u = -A_{1/rho} p`.
    pub fn recover_control(&self, p: &[f64]) -> Result<Vec<f64>> {
        let mut u = vec![0.0; p.len()];
        self.reg_op.apply(p, &mut u)?;
        for u in u.iter_mut() {
            *u = -*u;
        }
        Ok(u)
    }
}

impl LinearOperator for SaddleOperator {
    fn dim(&self) -> usize {
        2 * self.b.n()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        let n = self.b.n();
        if x.len() != 2 * n || y.len() != 2 * n {
            return Err(Error::DimensionMismatch {
                expected: 2 * n,
                got: x.len(),
            });
        }
        let (p, state) = x.split_at(n);
        let (top, bottom) = y.split_at_mut(n);
        let mut t = vec![0.0; n];
        // top row: A p + B y
        self.reg_op.apply(p, top)?;
        self.b.apply(state, &mut t)?;
        for (y, t) in top.iter_mut().zip(&t) {
            *y += t;
        }
        // bottom row: B' p - M y
        self.b.apply(p, bottom)?;
        self.mass.apply(state, &mut t)?;
        for (y, t) in bottom.iter_mut().zip(&t) {
            *y -= t;
        }
        Ok(())
    }
}

/// One of the three assembled systems, with its right-hand side.
pub enum DiscreteSystem {
    Primal { matrix: CsrMatrix, rhs: Vec<f64> },
    Schur { op: SchurOperator, rhs: Vec<f64> },
    Saddle { op: SaddleOperator, rhs: Vec<f64> },
}

impl DiscreteSystem {
    pub fn form(&self) -> SystemForm {
        match self {
            DiscreteSystem::Primal { .. } => SystemForm::DiffusionPrimal,
            DiscreteSystem::Schur { .. } => SystemForm::SchurComplement,
            DiscreteSystem::Saddle { .. } => SystemForm::SaddlePoint,
        }
    }

    pub fn rhs(&self) -> &[f64] {
        match self {
            DiscreteSystem::Primal { rhs, .. } => rhs,
            DiscreteSystem::Schur { rhs, .. } => rhs,
            DiscreteSystem::Saddle { rhs, .. } => rhs,
        }
    }

    pub fn operator(&self) -> &dyn LinearOperator {
        match self {
            DiscreteSystem::Primal { matrix, .. } => matrix,
            DiscreteSystem::Schur { op, .. } => op,
            DiscreteSystem::Saddle { op, .. } => op,
        }
    }
}

/// The diffusion-regularized primal system `(K_rho + M) y = y_d`.
/// Energy regularization only: the L2 kind has no primal reformulation.
pub fn build_primal_system(
    mesh: &Mesh,
    dofmap: &DofMap,
    reg: &Regularization,
    target: &BoxTarget,
) -> Result<DiscreteSystem> {
    if reg.kind != RegKind::Energy {
        return Err(Error::InvalidParameter(
            "the diffusion primal form requires energy regularization".into(),
        ));
    }
    let rho = reg.rho_per_element(mesh)?;
    let matrix = fem::assemble_operator(mesh, dofmap, Coeff::PerElement(&rho))?;
    let rhs = fem::assemble_load_box_target(mesh, dofmap, target)?;
    Ok(DiscreteSystem::Primal { matrix, rhs })
}

/// The Schur complement system `(B' A_{1/rho}^{-1} B + M) y = y_d` as a
/// matrix-free SPD operator.
pub fn build_schur_system(
    mesh: &Mesh,
    dofmap: &DofMap,
    reg: &Regularization,
    target: &BoxTarget,
) -> Result<DiscreteSystem> {
    let b = fem::assemble_stiffness(mesh, dofmap, Coeff::Constant(1.0))?;
    let mass = fem::assemble_mass(mesh, dofmap);
    let reg_op = RegOperator::build(mesh, dofmap, reg)?;
    let rhs = fem::assemble_load_box_target(mesh, dofmap, target)?;
    Ok(DiscreteSystem::Schur {
        op: SchurOperator {
            b,
            mass,
            reg_op,
            inner_iterations: AtomicUsize::new(0),
        },
        rhs,
    })
}

/// The symmetric indefinite saddle-point system in `(p, y)` with right-hand
/// side `(0, -y_d)`.
pub fn build_saddle_system(
    mesh: &Mesh,
    dofmap: &DofMap,
    reg: &Regularization,
    target: &BoxTarget,
) -> Result<DiscreteSystem> {
    let b = fem::assemble_stiffness(mesh, dofmap, Coeff::Constant(1.0))?;
    let mass = fem::assemble_mass(mesh, dofmap);
    let reg_op = RegOperator::build(mesh, dofmap, reg)?;
    let load = fem::assemble_load_box_target(mesh, dofmap, target)?;
    let n = dofmap.n_free();
    let mut rhs = vec![0.0; 2 * n];
    for (r, l) in rhs[n..].iter_mut().zip(&load) {
        *r = -l;
    }
    Ok(DiscreteSystem::Saddle {
        op: SaddleOperator { reg_op, b, mass },
        rhs,
    })
}

/// Eliminated control `u = -A_{1/rho} p` in coefficient space.
pub fn recover_control(
    mesh: &Mesh,
    dofmap: &DofMap,
    reg: &Regularization,
    p: &[f64],
) -> Result<Vec<f64>> {
    let reg_op = RegOperator::build(mesh, dofmap, reg)?;
    if p.len() != reg_op.dim() {
        return Err(Error::DimensionMismatch {
            expected: reg_op.dim(),
            got: p.len(),
        });
    }
    let mut u = vec![0.0; p.len()];
    reg_op.apply(p, &mut u)?;
    for u in u.iter_mut() {
        *u = -*u;
    }
    Ok(u)
}

/// Checks `S_h = B' K_{1/rho}^{-1} B + M = rho K + M` for constant `rho` by
/// applying both operators to random unit vectors. Returns the maximum
/// relative deviation; the inner solve tolerance bounds the attainable value.
pub fn verify_schur_identity(
    mesh: &Mesh,
    dofmap: &DofMap,
    rho_const: f64,
    n_vectors: usize,
    seed: u64,
) -> Result<f64> {
    let reg = Regularization::energy_constant(rho_const);
    let target = BoxTarget::centered_box(mesh.dim());
    let schur = build_schur_system(mesh, dofmap, &reg, &target)?;
    let op = match &schur {
        DiscreteSystem::Schur { op, .. } => op,
        _ => unreachable!(),
    };
    let primal = fem::assemble_operator(mesh, dofmap, Coeff::Constant(rho_const))?;

    let n = dofmap.n_free();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s_v = vec![0.0; n];
    let mut p_v = vec![0.0; n];
    let mut max_dev = 0.0f64;
    for _ in 0..n_vectors {
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let nv = linalg::norm(&v);
        for x in v.iter_mut() {
            *x /= nv;
        }
        op.apply(&v, &mut s_v)?;
        primal.apply(&v, &mut p_v)?;
        let mut diff2 = 0.0;
        for (s, p) in s_v.iter().zip(&p_v) {
            diff2 += (s - p) * (s - p);
        }
        let dev = diff2.sqrt() / linalg::norm(&p_v);
        max_dev = max_dev.max(dev);
    }
    Ok(max_dev)
}

/// Spectral-equivalence data for the pencil `(S_h, D_h)`, plus the mass
/// pencil `(M_h, D_h)` and the inverse-inequality estimate of `c_inv`.
#[derive(Debug, Clone, Copy)]
pub struct SpectralReport {
    pub dim: usize,
    pub exponent: i32,
    /// Extremal eigenvalues of `D^{-1} M`.
    pub mass_lambda_min: f64,
    pub mass_lambda_max: f64,
    /// Extremal eigenvalues of `D^{-1} S`.
    pub s_lambda_min: f64,
    pub s_lambda_max: f64,
    /// `1/(d+2)`, the proven lower bound.
    pub lower_bound: f64,
    /// `c_inv` estimated from `sqrt(h^2 lambda_max(D^{-1} K))`.
    pub c_inv_estimate: f64,
    /// `c_inv^r + 1`, the proven upper bound.
    pub upper_bound: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
    /// False if a Lanczos estimate could not be certified.
    pub certified: bool,
}

/// Computes the extremal generalized eigenvalues behind the spectral
/// equivalence inequalities for a balanced regularization (`rho = h^r`).
pub fn verify_spectral_equivalence(
    mesh: &Mesh,
    dofmap: &DofMap,
    reg: &Regularization,
    opts: &EigOptions,
) -> Result<SpectralReport> {
    let mass = fem::assemble_mass(mesh, dofmap);
    let lumped = fem::lump_mass(&mass)?;
    let mass_eigs = extremal_generalized_eigs(&mass, &lumped, opts)?;

    let target = BoxTarget::centered_box(mesh.dim());
    let schur = build_schur_system(mesh, dofmap, reg, &target)?;
    let s_eigs = extremal_generalized_eigs(schur.operator(), &lumped, opts)?;

    let stiffness = fem::assemble_stiffness(mesh, dofmap, Coeff::Constant(1.0))?;
    let k_eigs = extremal_generalized_eigs(&stiffness, &lumped, opts)?;
    let h_max = mesh
        .element_sizes()
        .iter()
        .fold(0.0f64, |acc, &h| acc.max(h));
    let c_inv = (h_max * h_max * k_eigs.lambda_max).sqrt();

    let exponent = reg.kind.exponent();
    let lower_bound = 1.0 / (mesh.dim() + 2) as f64;
    let upper_bound = c_inv.powi(exponent) + 1.0;
    Ok(SpectralReport {
        dim: mesh.dim(),
        exponent,
        mass_lambda_min: mass_eigs.lambda_min,
        mass_lambda_max: mass_eigs.lambda_max,
        s_lambda_min: s_eigs.lambda_min,
        s_lambda_max: s_eigs.lambda_max,
        lower_bound,
        c_inv_estimate: c_inv,
        upper_bound,
        lower_ok: mass_eigs.lambda_min >= lower_bound - 1e-10
            && s_eigs.lambda_min >= lower_bound - 1e-10,
        upper_ok: s_eigs.lambda_max <= upper_bound + 1e-8,
        certified: mass_eigs.certified && s_eigs.certified && k_eigs.certified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nv = linalg::norm(&v);
                v.iter_mut().for_each(|x| *x /= nv);
                v
            })
            .collect()
    }

    #[test]
    fn primal_operator_equals_scaled_stiffness_plus_mass() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let rho = 0.37;
        let fused = fem::assemble_operator(&mesh, &dofmap, Coeff::Constant(rho)).unwrap();
        let k = fem::assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        let m = fem::assemble_mass(&mesh, &dofmap);
        let sum = k.add_scaled(rho, &m, 1.0);
        assert_eq!(fused.nnz(), sum.nnz());
        for ((i1, j1, a), (i2, j2, b)) in fused.triplets().zip(sum.triplets()) {
            assert_eq!((i1, j1), (i2, j2));
            assert_relative_eq!(a, b, max_relative = 1e-14);
        }
    }

    #[test]
    fn primal_rejects_l2_regularization() {
        let mesh = Mesh::unit_cube(2, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let err = build_primal_system(
            &mesh,
            &dofmap,
            &Regularization::l2_adapted(),
            &BoxTarget::centered_box(2),
        );
        assert!(err.is_err());
    }

    #[test]
    fn vanishing_rho_recovers_the_l2_projection() {
        let mesh = Mesh::unit_cube(6, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let target = BoxTarget::centered_box(2);
        let system = build_primal_system(
            &mesh,
            &dofmap,
            &Regularization::energy_constant(1e-13),
            &target,
        )
        .unwrap();
        let (matrix, rhs) = match &system {
            DiscreteSystem::Primal { matrix, rhs } => (matrix, rhs),
            _ => unreachable!(),
        };
        let precond = DiagonalMatrix::new(matrix.diagonal()).unwrap();
        let x0 = vec![0.0; dofmap.n_free()];
        let (y, _) = linalg::pcg(matrix, &precond, rhs, &x0, 1e-12, 10_000).unwrap();

        let m = fem::assemble_mass(&mesh, &dofmap);
        let pm = DiagonalMatrix::new(m.diagonal()).unwrap();
        let (proj, _) = linalg::pcg(&m, &pm, rhs, &x0, 1e-12, 10_000).unwrap();
        let diff: f64 = y
            .iter()
            .zip(&proj)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(
            diff / linalg::norm(&proj) < 1e-5,
            "rho -> 0 limit broken: {diff:.3e}"
        );
    }

    #[test]
    fn l2_schur_operator_matches_explicit_triple_product() {
        let mesh = Mesh::unit_cube(3, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let rho = 0.05;
        let system = build_schur_system(
            &mesh,
            &dofmap,
            &Regularization::l2_constant(rho),
            &BoxTarget::centered_box(2),
        )
        .unwrap();
        let op = system.operator();

        let k = fem::assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        let m = fem::assemble_mass(&mesh, &dofmap);
        let d = fem::lumped_mass_diagonal(&mesh, &dofmap);
        let n = dofmap.n_free();
        for v in unit_vectors(n, 5, 3) {
            let mut got = vec![0.0; n];
            op.apply(&v, &mut got).unwrap();
            // rho * K D^{-1} K v + M v
            let mut t = vec![0.0; n];
            k.apply(&v, &mut t).unwrap();
            let mut w = vec![0.0; n];
            d.apply_inverse_into(&t, &mut w);
            let mut expect = vec![0.0; n];
            k.apply(&w, &mut expect).unwrap();
            let mut mv = vec![0.0; n];
            m.apply(&v, &mut mv).unwrap();
            for i in 0..n {
                expect[i] = rho * expect[i] + mv[i];
            }
            let diff: f64 = got
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff / linalg::norm(&expect) <= 1e-12);
        }
    }

    #[test]
    fn energy_schur_identity_with_constant_rho() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let dev = verify_schur_identity(&mesh, &dofmap, 0.1, 5, 7).unwrap();
        assert!(dev <= 1e-9, "identity deviation {dev:.3e}");
    }

    #[test]
    fn schur_identity_discriminates_wrong_rho() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let reg = Regularization::energy_constant(0.1);
        let target = BoxTarget::centered_box(2);
        let schur = build_schur_system(&mesh, &dofmap, &reg, &target).unwrap();
        let op = schur.operator();
        // compare against the primal operator with 2 rho: deviation is O(1)
        let wrong = fem::assemble_operator(&mesh, &dofmap, Coeff::Constant(0.2)).unwrap();
        let n = dofmap.n_free();
        let mut max_dev = 0.0f64;
        for v in unit_vectors(n, 5, 11) {
            let mut a = vec![0.0; n];
            let mut b = vec![0.0; n];
            op.apply(&v, &mut a).unwrap();
            wrong.apply(&v, &mut b).unwrap();
            let diff: f64 = a
                .iter()
                .zip(&b)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            max_dev = max_dev.max(diff / linalg::norm(&b));
        }
        assert!(max_dev > 0.05, "wrong rho must be detected, got {max_dev:.3e}");
    }

    #[test]
    fn schur_of_zero_is_zero() {
        let mesh = Mesh::unit_cube(3, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let system = build_schur_system(
            &mesh,
            &dofmap,
            &Regularization::energy_adapted(),
            &BoxTarget::centered_box(2),
        )
        .unwrap();
        let n = dofmap.n_free();
        let mut y = vec![1.0; n];
        system.operator().apply(&vec![0.0; n], &mut y).unwrap();
        assert!(y.iter().all(|&v| v.abs() <= 1e-30));
    }

    #[test]
    fn saddle_operator_is_block_symmetric() {
        let mesh = Mesh::unit_cube(3, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        for reg in [Regularization::energy_adapted(), Regularization::l2_adapted()] {
            let system =
                build_saddle_system(&mesh, &dofmap, &reg, &BoxTarget::centered_box(2)).unwrap();
            let op = system.operator();
            let n2 = op.dim();
            let vs = unit_vectors(n2, 4, 23);
            for pair in vs.chunks(2) {
                let (x, z) = (&pair[0], &pair[1]);
                let mut sx = vec![0.0; n2];
                let mut sz = vec![0.0; n2];
                op.apply(x, &mut sx).unwrap();
                op.apply(z, &mut sz).unwrap();
                let lhs = linalg::dot(&sx, z);
                let rhs = linalg::dot(x, &sz);
                assert!(
                    (lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0),
                    "block symmetry violated: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn block_elimination_reproduces_schur_operator() {
        let mesh = Mesh::unit_cube(3, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let reg = Regularization::energy_constant(0.2);
        let target = BoxTarget::centered_box(2);
        let schur = build_schur_system(&mesh, &dofmap, &reg, &target).unwrap();
        let n = dofmap.n_free();

        // dense A^{-1} through nalgebra as an independent elimination route
        let inv_rho = vec![1.0 / 0.2; mesh.n_elements()];
        let a = fem::assemble_stiffness(&mesh, &dofmap, Coeff::PerElement(&inv_rho)).unwrap();
        let ad = linalg::operator_to_dense(&a).unwrap();
        let k = fem::assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        let m = fem::assemble_mass(&mesh, &dofmap);

        for v in unit_vectors(n, 5, 31) {
            let mut sv = vec![0.0; n];
            schur.operator().apply(&v, &mut sv).unwrap();

            let mut bv = vec![0.0; n];
            k.apply(&v, &mut bv).unwrap();
            let p = ad
                .clone()
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(&bv))
                .unwrap();
            let mut btp = vec![0.0; n];
            k.apply(p.as_slice(), &mut btp).unwrap();
            let mut mv = vec![0.0; n];
            m.apply(&v, &mut mv).unwrap();
            let expect: Vec<f64> = btp.iter().zip(&mv).map(|(a, b)| a + b).collect();

            let diff: f64 = sv
                .iter()
                .zip(&expect)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(
                diff / linalg::norm(&expect) <= 1e-9,
                "elimination mismatch {:.3e}",
                diff / linalg::norm(&expect)
            );
        }
    }

    #[test]
    fn saddle_solve_matches_primal_state() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let h = 0.25;
        let reg = Regularization::energy_constant(h * h);
        let target = BoxTarget::centered_box(2);

        let primal = build_primal_system(&mesh, &dofmap, &reg, &target).unwrap();
        let (pm, prhs) = match &primal {
            DiscreteSystem::Primal { matrix, rhs } => (matrix, rhs),
            _ => unreachable!(),
        };
        let precond = DiagonalMatrix::new(pm.diagonal()).unwrap();
        let x0 = vec![0.0; dofmap.n_free()];
        let (y_primal, _) = linalg::pcg(pm, &precond, prhs, &x0, 1e-12, 10_000).unwrap();

        let saddle = build_saddle_system(&mesh, &dofmap, &reg, &target).unwrap();
        let (op, rhs) = match &saddle {
            DiscreteSystem::Saddle { op, rhs } => (op, rhs),
            _ => unreachable!(),
        };
        let bp = op.block_preconditioner().unwrap();
        let z0 = vec![0.0; op.dim()];
        let (sol, rep) = linalg::minres(op, &bp, rhs, &z0, 1e-10, 20_000).unwrap();
        assert!(rep.converged, "MINRES must converge on the saddle system");
        let (_, y_saddle) = op.split(&sol);

        // compare in the M-norm
        let m = fem::assemble_mass(&mesh, &dofmap);
        let diff: Vec<f64> = y_primal.iter().zip(y_saddle).map(|(a, b)| a - b).collect();
        let mut md = vec![0.0; diff.len()];
        m.apply(&diff, &mut md).unwrap();
        let m_err = linalg::dot(&diff, &md).max(0.0).sqrt();
        assert!(m_err <= 1e-7, "saddle vs primal state M-norm error {m_err:.3e}");
    }

    #[test]
    fn control_recovery_identities() {
        let mesh = Mesh::unit_cube(3, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let n = dofmap.n_free();
        let rho = 0.3;
        let reg = Regularization::energy_constant(rho);

        let zero = recover_control(&mesh, &dofmap, &reg, &vec![0.0; n]).unwrap();
        assert!(zero.iter().all(|&u| u == 0.0));

        let p = unit_vectors(n, 1, 5).pop().unwrap();
        let u = recover_control(&mesh, &dofmap, &reg, &p).unwrap();
        // u = -(1/rho) K p
        let k = fem::assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        let mut kp = vec![0.0; n];
        k.apply(&p, &mut kp).unwrap();
        for (u, kp) in u.iter().zip(&kp) {
            assert_relative_eq!(*u, -kp / rho, max_relative = 1e-12);
        }

        // <u, A^{-1} u> = <p, A p> under u = -A p
        let inv_rho = vec![1.0 / rho; mesh.n_elements()];
        let a = fem::assemble_stiffness(&mesh, &dofmap, Coeff::PerElement(&inv_rho)).unwrap();
        let ad = linalg::operator_to_dense(&a).unwrap();
        let ainv_u = ad
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&u))
            .unwrap();
        let lhs = linalg::dot(&u, ainv_u.as_slice());
        let mut ap = vec![0.0; n];
        a.apply(&p, &mut ap).unwrap();
        let rhs = linalg::dot(&p, &ap);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-9);
    }

    #[test]
    fn constant_rho_regularization_matrix_is_scaled_stiffness() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let rho = 0.37;
        let inv_rho = vec![1.0 / rho; mesh.n_elements()];
        let k_inv_rho =
            fem::assemble_stiffness(&mesh, &dofmap, Coeff::PerElement(&inv_rho)).unwrap();
        let k = fem::assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        assert_eq!(k_inv_rho.nnz(), k.nnz());
        for ((i1, j1, a), (i2, j2, b)) in k_inv_rho.triplets().zip(k.triplets()) {
            assert_eq!((i1, j1), (i2, j2));
            assert_relative_eq!(a, b / rho, max_relative = 1e-14);
        }
    }

    #[test]
    fn l2_schur_operator_is_positive_definite() {
        let mesh = Mesh::unit_cube(4, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let system = build_schur_system(
            &mesh,
            &dofmap,
            &Regularization::l2_adapted(),
            &BoxTarget::centered_box(2),
        )
        .unwrap();
        let op = system.operator();
        let n = dofmap.n_free();
        let mut sx = vec![0.0; n];
        for x in unit_vectors(n, 100, 77) {
            op.apply(&x, &mut sx).unwrap();
            let xsx = linalg::dot(&x, &sx);
            assert!(xsx > 0.0, "x'Sx = {xsx:.3e} must be positive");
        }
    }

    #[test]
    fn saddle_solution_splits_blocks() {
        let mesh = Mesh::unit_cube(2, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let system = build_saddle_system(
            &mesh,
            &dofmap,
            &Regularization::energy_adapted(),
            &BoxTarget::centered_box(2),
        )
        .unwrap();
        let op = match &system {
            DiscreteSystem::Saddle { op, .. } => op,
            _ => unreachable!(),
        };
        let n = dofmap.n_free();
        let stacked: Vec<f64> = (0..2 * n).map(|i| i as f64).collect();
        let sol = op.split_solution(&stacked);
        assert_eq!(sol.p.len(), n);
        assert_eq!(sol.y.len(), n);
        assert_eq!(sol.p[0], 0.0);
        assert_eq!(sol.y[0], n as f64);
    }

    #[test]
    fn spectral_equivalence_small_meshes() {
        for (n, d) in [(8, 1), (4, 2), (2, 3)] {
            let mesh = Mesh::unit_cube(n, d).unwrap();
            let dofmap = DofMap::with_dirichlet(&mesh);
            if dofmap.n_free() == 0 {
                continue;
            }
            for reg in [Regularization::energy_adapted(), Regularization::l2_adapted()] {
                let report =
                    verify_spectral_equivalence(&mesh, &dofmap, &reg, &EigOptions::default())
                        .unwrap();
                assert!(report.certified);
                assert!(
                    report.lower_ok,
                    "d={d}: lambda_min {:.6} below 1/(d+2) = {:.6}",
                    report.mass_lambda_min, report.lower_bound
                );
                assert!(
                    report.upper_ok,
                    "d={d} r={}: lambda_max {:.6} above bound {:.6}",
                    report.exponent, report.s_lambda_max, report.upper_bound
                );
                assert!(report.mass_lambda_max <= 1.0 + 1e-12, "M <= D violated");
            }
        }
    }

    /// 1d mesh with two interior dofs: all spectral quantities by hand.
    #[test]
    fn spectral_quantities_match_hand_computation_1d() {
        let mesh = Mesh::unit_cube(3, 1).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        assert_eq!(dofmap.n_free(), 2);
        let report = verify_spectral_equivalence(
            &mesh,
            &dofmap,
            &Regularization::energy_adapted(),
            &EigOptions::default(),
        )
        .unwrap();
        // M = h/6 [[4,1],[1,4]], D = 5h/6 I: eigenvalues {3/5, 1}
        assert_relative_eq!(report.mass_lambda_min, 0.6, epsilon = 1e-12);
        assert_relative_eq!(report.mass_lambda_max, 1.0, epsilon = 1e-12);
        // K = 1/h [[2,-1],[-1,2]]: lambda_max(D^{-1}K) = 18/(5h^2) -> c_inv^2 = 18/5
        assert_relative_eq!(
            report.c_inv_estimate,
            (18.0f64 / 5.0).sqrt(),
            epsilon = 1e-10
        );
        assert!(report.lower_ok && report.upper_ok);
    }

    #[test]
    fn tracking_error_increases_with_rho() {
        let mesh = Mesh::unit_cube(8, 2).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let target = BoxTarget::centered_box(2);
        let x0 = vec![0.0; dofmap.n_free()];
        let mut last_err = 0.0;
        for rho in [1e-4, 1e-3, 1e-2, 1e-1] {
            let system = build_primal_system(
                &mesh,
                &dofmap,
                &Regularization::energy_constant(rho),
                &target,
            )
            .unwrap();
            let (matrix, rhs) = match &system {
                DiscreteSystem::Primal { matrix, rhs } => (matrix, rhs),
                _ => unreachable!(),
            };
            let precond = DiagonalMatrix::new(matrix.diagonal()).unwrap();
            let (y, _) = linalg::pcg(matrix, &precond, rhs, &x0, 1e-12, 10_000).unwrap();
            let err = fem::l2_error_box_target(&mesh, &dofmap, &y, &target);
            assert!(
                err + 1e-12 >= last_err,
                "tracking error must be monotone in rho: {err} after {last_err}"
            );
            last_err = err;
        }
    }
}
