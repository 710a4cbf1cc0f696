//! Multilevel study orchestration: uniform and adaptive refinement runs,
//! nested iteration with the adaptive tolerance schedule, experimental
//! orders of convergence, and thread-scaling benchmarks.

use crate::fem::{self, BoxTarget, DofMap};
use crate::linalg::{self, DiagonalMatrix, KrylovReport};
use crate::mesh::{mark_doerfler, Mesh, Prolongation};
use crate::ocp::{self, DiscreteSystem, RegKind, Regularization, RhoMode, SystemForm};
use crate::{Error, Result};
use serde::Serialize;
use std::io::Write;
use std::time::Instant;

/// Stopping rule of the nested iteration: level 1 solves to `base_tol`,
/// level `l >= 2` to `alpha * (n_l / n_{l-1})^(-beta/3)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ToleranceSchedule {
    pub alpha: f64,
    pub beta: f64,
    pub base_tol: f64,
}

impl ToleranceSchedule {
    pub fn new(alpha: f64, beta: f64, base_tol: f64) -> Result<ToleranceSchedule> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule scaling factor must lie in (0,1], got {alpha}"
            )));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "schedule rate parameter must be positive, got {beta}"
            )));
        }
        Ok(ToleranceSchedule {
            alpha,
            beta,
            base_tol,
        })
    }

    /// Defaults tied to the observed convergence rates: (0.5, 0.5) for
    /// uniform and (0.25, 0.75) for adaptive refinement.
    pub fn for_mode(mode: RefineMode) -> ToleranceSchedule {
        match mode {
            RefineMode::Uniform => ToleranceSchedule {
                alpha: 0.5,
                beta: 0.5,
                base_tol: 1e-6,
            },
            RefineMode::Adaptive => ToleranceSchedule {
                alpha: 0.25,
                beta: 0.75,
                base_tol: 1e-6,
            },
        }
    }
}

/// `alpha * (n_l / n_prev)^(-beta/3)`; level 1 uses `base_tol`.
pub fn tolerance_for_level(schedule: &ToleranceSchedule, n_l: usize, n_prev: usize) -> f64 {
    debug_assert!(n_l >= n_prev && n_prev >= 1);
    schedule.alpha * (n_l as f64 / n_prev as f64).powf(-schedule.beta / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Uniform,
    Adaptive,
}

/// How the regularization parameter is assigned per level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoAssignment {
    /// Balanced with the mesh: `rho = h_l^r` on uniform hierarchies (with
    /// the lattice spacing `h_l`), `rho_tau = h_tau^r` element-wise on
    /// adaptive ones.
    Balanced,
    /// One fixed value on every level.
    Constant(f64),
}

/// Which diagonal the PCG preconditioner uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondKind {
    DiagMass,
    LumpedMass,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyConfig {
    pub dim: usize,
    pub initial_cells: usize,
    pub levels: usize,
    pub refine: RefineMode,
    pub form: SystemForm,
    pub reg_kind: RegKind,
    pub rho: RhoAssignment,
    pub nested: bool,
    pub schedule: ToleranceSchedule,
    /// Doerfler bulk fraction for adaptive runs.
    pub theta: f64,
    pub max_iters: usize,
    pub precond: PrecondKind,
    /// Stop an adaptive run early once the error drops below this value.
    pub stop_error: Option<f64>,
}

impl StudyConfig {
    /// The reference 3d benchmark: 16^3 coarse lattice, primal form, energy
    /// regularization balanced with the mesh, PCG tolerance 1e-6.
    pub fn benchmark_default(dim: usize) -> StudyConfig {
        StudyConfig {
            dim,
            initial_cells: 16,
            levels: 3,
            refine: RefineMode::Uniform,
            form: SystemForm::DiffusionPrimal,
            reg_kind: RegKind::Energy,
            rho: RhoAssignment::Balanced,
            nested: false,
            schedule: ToleranceSchedule::for_mode(RefineMode::Uniform),
            theta: 0.5,
            max_iters: 100_000,
            precond: PrecondKind::DiagMass,
            stop_error: None,
        }
    }

    fn regularization_for_level(&self, level: usize) -> Regularization {
        let rho_mode = match (self.rho, self.refine) {
            (RhoAssignment::Constant(v), _) => RhoMode::Constant(v),
            (RhoAssignment::Balanced, RefineMode::Uniform) => {
                // lattice spacing of the level-l uniformly refined mesh
                let h = 1.0 / (self.initial_cells as f64 * 2f64.powi(level as i32 - 1));
                RhoMode::Constant(h.powi(self.reg_kind.exponent()))
            }
            (RhoAssignment::Balanced, RefineMode::Adaptive) => RhoMode::MeshAdapted,
        };
        Regularization::new(self.reg_kind, rho_mode)
    }
}

/// Per-level results mirroring the study tables: dofs are total vertex
/// counts, the error is `||y_l - y_d||_{L2}`, time is the Krylov solve only.
#[derive(Debug, Clone, Serialize)]
pub struct LevelRecord {
    pub level: usize,
    pub dofs: usize,
    pub error: f64,
    pub eoc: Option<f64>,
    pub iterations: usize,
    pub tol: f64,
    pub solve_time: f64,
    pub assembly_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub records: Vec<LevelRecord>,
    /// Set when a solver failure aborted the study; records hold the levels
    /// completed before the failure.
    pub aborted: Option<String>,
}

impl StudyReport {
    /// CSV with the pinned schema `level,dofs,error,eoc,its,tol,time_s`.
    /// `include_time = false` zeroes the time column for golden files.
    pub fn write_csv<W: Write>(&self, out: &mut W, include_time: bool) -> Result<()> {
        writeln!(out, "level,dofs,error,eoc,its,tol,time_s")?;
        for r in &self.records {
            let eoc = r.eoc.map(|e| format!("{e:.4}")).unwrap_or_default();
            let time = if include_time { r.solve_time } else { 0.0 };
            writeln!(
                out,
                "{},{},{:.6e},{},{},{:.3e},{:.3e}",
                r.level, r.dofs, r.error, eoc, r.iterations, r.tol, time
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Outcome of one level solve, including the data needed for nesting.
struct LevelState {
    mesh: Mesh,
    dofmap: DofMap,
    /// Solution in stacked form: `y` for SPD forms, `(p, y)` for the saddle.
    solution: Vec<f64>,
}

fn build_system(
    mesh: &Mesh,
    dofmap: &DofMap,
    cfg: &StudyConfig,
    reg: &Regularization,
    target: &BoxTarget,
) -> Result<DiscreteSystem> {
    match cfg.form {
        SystemForm::DiffusionPrimal => ocp::build_primal_system(mesh, dofmap, reg, target),
        SystemForm::SchurComplement => ocp::build_schur_system(mesh, dofmap, reg, target),
        SystemForm::SaddlePoint => ocp::build_saddle_system(mesh, dofmap, reg, target),
    }
}

fn build_preconditioner(
    mesh: &Mesh,
    dofmap: &DofMap,
    cfg: &StudyConfig,
    system: &DiscreteSystem,
) -> Result<DiagonalMatrix> {
    match system {
        DiscreteSystem::Saddle { op, .. } => op.block_preconditioner(),
        _ => Ok(match cfg.precond {
            PrecondKind::DiagMass => fem::mass_diagonal(mesh, dofmap),
            PrecondKind::LumpedMass => fem::lumped_mass_diagonal(mesh, dofmap),
        }),
    }
}

fn solve_system(
    system: &DiscreteSystem,
    precond: &DiagonalMatrix,
    x0: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, KrylovReport)> {
    match system {
        DiscreteSystem::Saddle { op, rhs } => linalg::minres(op, precond, rhs, x0, tol, max_iters),
        _ => linalg::pcg(system.operator(), precond, system.rhs(), x0, tol, max_iters),
    }
}

/// Interpolates the previous solution (stacked for the saddle form) to the
/// current level as the nested initial guess.
fn nested_guess(
    prev: &LevelState,
    prolongation: &Prolongation,
    fine_map: &DofMap,
    form: SystemForm,
) -> Vec<f64> {
    match form {
        SystemForm::SaddlePoint => {
            let n_prev = prev.dofmap.n_free();
            let (p, y) = prev.solution.split_at(n_prev);
            let mut guess = fem::prolongate(prolongation, &prev.dofmap, fine_map, p);
            guess.extend(fem::prolongate(prolongation, &prev.dofmap, fine_map, y));
            guess
        }
        _ => fem::prolongate(prolongation, &prev.dofmap, fine_map, &prev.solution),
    }
}

fn state_of(system: &DiscreteSystem, solution: &[f64]) -> Vec<f64> {
    match system {
        DiscreteSystem::Saddle { op, .. } => op.split(solution).1.to_vec(),
        _ => solution.to_vec(),
    }
}

fn run_level(
    cfg: &StudyConfig,
    level: usize,
    mesh: Mesh,
    target: &BoxTarget,
    incoming: Option<(&LevelState, &Prolongation)>,
    records: &mut Vec<LevelRecord>,
) -> Result<std::result::Result<LevelState, String>> {
    let dofmap = DofMap::with_dirichlet(&mesh);
    let reg = cfg.regularization_for_level(level);

    let assembly_start = Instant::now();
    let system = build_system(&mesh, &dofmap, cfg, &reg, target)?;
    let precond = build_preconditioner(&mesh, &dofmap, cfg, &system)?;
    let assembly_time = assembly_start.elapsed().as_secs_f64();

    let n_unknowns = system.operator().dim();
    let (x0, tol) = match incoming {
        Some((prev, prolongation)) if cfg.nested => (
            nested_guess(prev, prolongation, &dofmap, cfg.form),
            tolerance_for_level(&cfg.schedule, mesh.n_vertices(), prev.mesh.n_vertices()),
        ),
        _ => (vec![0.0; n_unknowns], cfg.schedule.base_tol),
    };

    let (solution, report) = solve_system(&system, &precond, &x0, tol, cfg.max_iters)?;
    let y = state_of(&system, &solution);
    let error = fem::l2_error_box_target(&mesh, &dofmap, &y, target);

    records.push(LevelRecord {
        level,
        dofs: mesh.n_vertices(),
        error,
        eoc: None,
        iterations: report.iterations,
        tol,
        solve_time: report.wall_time,
        assembly_time,
    });

    if !report.converged {
        return Ok(Err(format!(
            "solver stalled on level {level}: residual reduction {:.3e} after {} iterations (target {tol:.3e})",
            report.final_residual / report.initial_residual.max(f64::MIN_POSITIVE),
            report.iterations,
        )));
    }
    Ok(Ok(LevelState {
        mesh,
        dofmap,
        solution,
    }))
}

/// Uniform refinement study over `cfg.levels` levels.
pub fn run_uniform_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.levels == 0 {
        return Err(Error::InvalidParameter("levels must be >= 1".into()));
    }
    let target = BoxTarget::centered_box(cfg.dim);
    let mut records = Vec::with_capacity(cfg.levels);
    let mut aborted = None;

    let mut mesh = Some(Mesh::unit_cube(cfg.initial_cells, cfg.dim)?);
    let mut prev: Option<LevelState> = None;
    for level in 1..=cfg.levels {
        let (current, prolongation) = match prev.as_ref() {
            None => (mesh.take().expect("initial mesh"), None),
            Some(state) => {
                let (fine, p) = state.mesh.refine_uniform();
                (fine, Some(p))
            }
        };
        let incoming = match (prev.as_ref(), prolongation.as_ref()) {
            (Some(state), Some(p)) => Some((state, p)),
            _ => None,
        };
        match run_level(cfg, level, current, &target, incoming, &mut records)? {
            Ok(state) => prev = Some(state),
            Err(reason) => {
                aborted = Some(reason);
                break;
            }
        }
    }

    compute_eoc(&mut records, RefineMode::Uniform, cfg.dim);
    Ok(StudyReport {
        config: cfg.clone(),
        records,
        aborted,
    })
}

/// Adaptive study: solve, localize the error, Doerfler-mark, bisect.
pub fn run_adaptive_study(cfg: &StudyConfig) -> Result<StudyReport> {
    if cfg.levels == 0 {
        return Err(Error::InvalidParameter("levels must be >= 1".into()));
    }
    if !(cfg.theta > 0.0 && cfg.theta <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Doerfler fraction must lie in (0,1], got {}",
            cfg.theta
        )));
    }
    let target = BoxTarget::centered_box(cfg.dim);
    let mut records = Vec::with_capacity(cfg.levels);
    let mut aborted = None;

    let mut mesh = Some(Mesh::unit_cube(cfg.initial_cells, cfg.dim)?);
    let mut prev: Option<LevelState> = None;
    let mut prolongation: Option<Prolongation> = None;

    for level in 1..=cfg.levels {
        let current = match mesh.take() {
            Some(m) => m,
            None => break,
        };
        let incoming = match (prev.as_ref(), prolongation.as_ref()) {
            (Some(state), Some(p)) => Some((state, p)),
            _ => None,
        };
        match run_level(cfg, level, current, &target, incoming, &mut records)? {
            Ok(state) => {
                let error = records.last().expect("record just pushed").error;
                if cfg.stop_error.is_some_and(|stop| error <= stop) {
                    break;
                }
                if level < cfg.levels {
                    let y = state_of_state(&state);
                    let indicators = fem::element_error_indicators(
                        &state.mesh,
                        &state.dofmap,
                        &y,
                        &target,
                    );
                    let marked = mark_doerfler(&indicators, cfg.theta)?;
                    let (fine, p) = state.mesh.refine_adaptive(&marked)?;
                    mesh = Some(fine);
                    prolongation = Some(p);
                }
                prev = Some(state);
            }
            Err(reason) => {
                aborted = Some(reason);
                break;
            }
        }
    }

    compute_eoc(&mut records, RefineMode::Adaptive, cfg.dim);
    Ok(StudyReport {
        config: cfg.clone(),
        records,
        aborted,
    })
}

fn state_of_state(state: &LevelState) -> Vec<f64> {
    let n = state.dofmap.n_free();
    if state.solution.len() == 2 * n {
        state.solution[n..].to_vec()
    } else {
        state.solution.clone()
    }
}

/// Fills the eoc column: `log2(e_{l-1}/e_l)` on uniform hierarchies (the
/// mesh size halves), the dof-based rate `d ln(e_{l-1}/e_l) / ln(n_l/n_{l-1})`
/// on adaptive ones.
pub fn compute_eoc(records: &mut [LevelRecord], mode: RefineMode, dim: usize) {
    for i in 1..records.len() {
        let e_prev = records[i - 1].error;
        let e = records[i].error;
        if !(e_prev > 0.0) || !(e > 0.0) {
            records[i].eoc = None;
            continue;
        }
        records[i].eoc = match mode {
            RefineMode::Uniform => Some((e_prev / e).log2()),
            RefineMode::Adaptive => {
                let n_prev = records[i - 1].dofs as f64;
                let n = records[i].dofs as f64;
                if n > n_prev {
                    Some(dim as f64 * (e_prev / e).ln() / (n / n_prev).ln())
                } else {
                    None
                }
            }
        };
    }
    if let Some(first) = records.first_mut() {
        first.eoc = None;
    }
}

/// One row of the thread-scaling benchmark.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub threads: usize,
    pub iterations: usize,
    /// Best of the repetitions, seconds.
    pub min_time: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub level: usize,
    pub dofs: usize,
    pub repetitions: usize,
    pub rows: Vec<ScalingRow>,
}

/// Repeats the level-`level` solve at each thread count; iteration counts
/// must not depend on the thread count (the kernels use fixed reduction
/// trees), wall time is the minimum over the repetitions.
pub fn run_scaling_bench(
    cfg: &StudyConfig,
    level: usize,
    thread_counts: &[usize],
    repetitions: usize,
) -> Result<ScalingReport> {
    if level == 0 || thread_counts.is_empty() || repetitions == 0 {
        return Err(Error::InvalidParameter(
            "scaling bench needs a level, thread counts and repetitions".into(),
        ));
    }
    let target = BoxTarget::centered_box(cfg.dim);
    let mut mesh = Mesh::unit_cube(cfg.initial_cells, cfg.dim)?;
    for _ in 1..level {
        mesh = mesh.refine_uniform().0;
    }
    let dofmap = DofMap::with_dirichlet(&mesh);
    let reg = cfg.regularization_for_level(level);
    let system = build_system(&mesh, &dofmap, cfg, &reg, &target)?;
    let precond = build_preconditioner(&mesh, &dofmap, cfg, &system)?;
    let n = system.operator().dim();
    let x0 = vec![0.0; n];

    let mut rows = Vec::with_capacity(thread_counts.len());
    for &threads in thread_counts {
        if threads == 0 {
            return Err(Error::InvalidParameter("thread count must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
        let mut iterations = 0;
        let mut min_time = f64::INFINITY;
        for _ in 0..repetitions {
            let (_, report) = pool.install(|| {
                solve_system(&system, &precond, &x0, cfg.schedule.base_tol, cfg.max_iters)
            })?;
            if !report.converged {
                return Err(Error::Numerical(format!(
                    "benchmark solve stalled after {} iterations",
                    report.iterations
                )));
            }
            iterations = report.iterations;
            min_time = min_time.min(report.wall_time);
        }
        rows.push(ScalingRow {
            threads,
            iterations,
            min_time,
        });
    }
    Ok(ScalingReport {
        level,
        dofs: mesh.n_vertices(),
        repetitions,
        rows,
    })
}

/// Runs `f` inside a rayon pool with the requested worker count; `None`
/// keeps the global default.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(t) => {
            if t == 0 {
                return Err(Error::InvalidParameter("thread count must be >= 1".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
