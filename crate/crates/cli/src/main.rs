//! Command-line front end for the solver suite: convergence studies,
//! structural verifications and thread-scaling benchmarks.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use trackfem_core::driver::{
    self, PrecondKind, RefineMode, RhoAssignment, StudyConfig, StudyReport, ToleranceSchedule,
};
use trackfem_core::fem::{self, DofMap};
use trackfem_core::linalg::{self, EigOptions, LinearOperator};
use trackfem_core::mesh::Mesh;
use trackfem_core::ocp::{self, DiscreteSystem, RegKind, Regularization, SystemForm};

#[derive(Parser)]
#[command(
    name = "trackfem",
    version,
    about = "Finite element solvers for tracking-type elliptic optimal control problems",
    long_about = "Solves the diffusion-regularized primal, Schur-complement and saddle-point\n\
                  forms of the tracking-type optimal control problem on simplicial meshes\n\
                  of the unit cube, with diagonally preconditioned Krylov solvers, nested\n\
                  iteration and adaptive refinement."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a single refinement level and print its record
    Solve(SolveArgs),
    /// Run a multilevel convergence study (uniform or adaptive)
    Study(StudyArgs),
    /// Check structural identities (Schur identity, spectral equivalence,
    /// cross-form consistency)
    Verify(VerifyArgs),
    /// Repeat one solve over several thread counts and report timings
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Primal,
    Schur,
    Saddle,
}

impl From<FormArg> for SystemForm {
    fn from(f: FormArg) -> SystemForm {
        match f {
            FormArg::Primal => SystemForm::DiffusionPrimal,
            FormArg::Schur => SystemForm::SchurComplement,
            FormArg::Saddle => SystemForm::SaddlePoint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegArg {
    Energy,
    L2,
}

impl From<RegArg> for RegKind {
    fn from(r: RegArg) -> RegKind {
        match r {
            RegArg::Energy => RegKind::Energy,
            RegArg::L2 => RegKind::L2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RefineArg {
    Uniform,
    Adaptive,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecondArg {
    /// diag(M)
    DiagMass,
    /// lump(M)
    LumpedMass,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ProblemArgs {
    /// Spatial dimension of the unit cube domain
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
    dim: u8,

    /// Cells per axis of the coarsest lattice mesh
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    cells: u32,

    /// Discrete form to solve
    #[arg(long, value_enum, default_value_t = FormArg::Primal)]
    form: FormArg,

    /// Regularization kind (rho = h^2 energy, rho = h^4 L2 when adapted)
    #[arg(long, value_enum, default_value_t = RegArg::Energy)]
    reg: RegArg,

    /// Regularization parameter: "adapted" (balanced with the mesh) or
    /// "constant:<value>"
    #[arg(long, default_value = "adapted")]
    rho: String,

    /// Diagonal preconditioner
    #[arg(long, value_enum, default_value_t = PrecondArg::DiagMass)]
    precond: PrecondArg,

    /// Relative residual reduction of the (coarsest-level) solve
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,

    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,

    /// Worker threads for assembly and solver kernels (default: all cores)
    #[arg(long)]
    threads: Option<usize>,

    /// Seed for randomized verification vectors
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
}

impl ProblemArgs {
    fn rho_assignment(&self) -> Result<RhoAssignment, String> {
        let spec = self.rho.trim();
        if spec == "adapted" {
            return Ok(RhoAssignment::Balanced);
        }
        if let Some(value) = spec.strip_prefix("constant:") {
            let v: f64 = value
                .parse()
                .map_err(|e| format!("invalid --rho constant '{value}': {e}"))?;
            if !(v > 0.0) || !v.is_finite() {
                return Err(format!("--rho constant must be positive, got {v}"));
            }
            return Ok(RhoAssignment::Constant(v));
        }
        Err(format!(
            "invalid --rho '{spec}': expected 'adapted' or 'constant:<value>'"
        ))
    }

    fn study_config(
        &self,
        levels: usize,
        refine: RefineMode,
        nested: bool,
        alpha: Option<f64>,
        beta: Option<f64>,
        theta: f64,
    ) -> Result<StudyConfig, String> {
        let form: SystemForm = self.form.into();
        let reg_kind: RegKind = self.reg.into();
        if form == SystemForm::DiffusionPrimal && reg_kind != RegKind::Energy {
            return Err("--form primal requires --reg energy".into());
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(format!("--tol must lie in (0,1), got {}", self.tol));
        }
        let defaults = ToleranceSchedule::for_mode(refine);
        let schedule = ToleranceSchedule::new(
            alpha.unwrap_or(defaults.alpha),
            beta.unwrap_or(defaults.beta),
            self.tol,
        )
        .map_err(|e| e.to_string())?;
        Ok(StudyConfig {
            dim: self.dim as usize,
            initial_cells: self.cells as usize,
            levels,
            refine,
            form,
            reg_kind,
            rho: self.rho_assignment()?,
            nested,
            schedule,
            theta,
            max_iters: self.max_iters,
            precond: match self.precond {
                PrecondArg::DiagMass => PrecondKind::DiagMass,
                PrecondArg::LumpedMass => PrecondKind::LumpedMass,
            },
            stop_error: None,
        })
    }
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    problem: ProblemArgs,

    /// Number of refinement levels
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    levels: u32,

    #[arg(long, value_enum, default_value_t = RefineArg::Uniform)]
    refine: RefineArg,

    /// Nested iteration: start each level from the interpolated coarse
    /// solution with the adaptive tolerance schedule
    #[arg(long)]
    nested: bool,

    /// Schedule scaling factor (default 0.5 uniform, 0.25 adaptive)
    #[arg(long)]
    alpha: Option<f64>,

    /// Schedule rate parameter (default 0.5 uniform, 0.75 adaptive)
    #[arg(long)]
    beta: Option<f64>,

    /// Doerfler bulk fraction for adaptive marking
    #[arg(long, default_value_t = 0.5)]
    theta: f64,

    /// Write the report here instead of stdout
    #[arg(long)]
    output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,

    /// Zero the time column (reproducible golden files)
    #[arg(long)]
    no_time: bool,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,

    /// Refinement level to solve (level 1 is the coarsest mesh)
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    level: u32,

    /// Reach the level by nested iteration instead of a cold start
    #[arg(long)]
    nested: bool,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    problem: ProblemArgs,

    /// Which identity to check
    #[arg(long, value_enum)]
    check: CheckArg,

    /// Uniform refinements applied before the check (1 = coarse mesh)
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    levels: u32,
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckArg {
    /// max relative deviation of S_h against rho K + M (constant rho)
    SchurIdentity,
    /// extremal eigenvalues of (M, D) and (S, D) against the proven bounds
    Spectral,
    /// primal / Schur / saddle states of the same problem agree
    CrossForm,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    problem: ProblemArgs,

    /// Refinement level to benchmark
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..))]
    level: u32,

    /// Comma-separated thread counts, e.g. 1,2,4,8
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    thread_counts: Vec<usize>,

    /// Repetitions per thread count (best time is kept)
    #[arg(long, default_value_t = 3)]
    reps: usize,

    #[arg(long)]
    output: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    format: FormatArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(args) => run_solve(args),
        Command::Study(args) => run_study(args),
        Command::Verify(args) => run_verify(args),
        Command::Bench(args) => run_bench(args),
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

enum CliError {
    /// Invalid flag combination or value: exit code 2.
    Config(String),
    /// Solver or IO failure at run time: exit code 1.
    Run(String),
}

impl From<trackfem_core::Error> for CliError {
    fn from(e: trackfem_core::Error) -> CliError {
        match e {
            trackfem_core::Error::InvalidParameter(_) => CliError::Config(e.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

fn write_or_print(path: &Option<PathBuf>, content: &str) -> Result<(), CliError> {
    match path {
        Some(path) => std::fs::write(path, content)
            .map_err(|e| CliError::Run(format!("writing {}: {e}", path.display()))),
        None => {
            print!("{content}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn render_study(report: &StudyReport, format: FormatArg, include_time: bool) -> String {
    match format {
        FormatArg::Json => report.to_json() + "\n",
        FormatArg::Csv => {
            let mut buf = Vec::new();
            report
                .write_csv(&mut buf, include_time)
                .expect("in-memory write");
            String::from_utf8(buf).expect("csv is utf-8")
        }
    }
}

fn run_study(args: StudyArgs) -> Result<ExitCode, CliError> {
    let refine = match args.refine {
        RefineArg::Uniform => RefineMode::Uniform,
        RefineArg::Adaptive => RefineMode::Adaptive,
    };
    let cfg = args
        .problem
        .study_config(
            args.levels as usize,
            refine,
            args.nested,
            args.alpha,
            args.beta,
            args.theta,
        )
        .map_err(CliError::Config)?;
    let report = driver::with_threads(args.problem.threads, move || match refine {
        RefineMode::Uniform => driver::run_uniform_study(&cfg),
        RefineMode::Adaptive => driver::run_adaptive_study(&cfg),
    })??;

    let rendered = render_study(&report, args.format, !args.no_time);
    write_or_print(&args.output, &rendered)?;
    match report.aborted {
        Some(reason) => Err(CliError::Run(format!("study aborted: {reason}"))),
        None => Ok(ExitCode::SUCCESS),
    }
}

fn run_solve(args: SolveArgs) -> Result<ExitCode, CliError> {
    let cfg = args
        .problem
        .study_config(
            args.level as usize,
            RefineMode::Uniform,
            args.nested,
            None,
            None,
            0.5,
        )
        .map_err(CliError::Config)?;
    let report =
        driver::with_threads(args.problem.threads, move || driver::run_uniform_study(&cfg))??;
    if let Some(reason) = report.aborted {
        return Err(CliError::Run(format!("solve failed: {reason}")));
    }
    let r = report.records.last().expect("at least one level");
    println!(
        "level {}  dofs {}  error {:.6e}  its {}  tol {:.3e}  solve {:.3e}s  assembly {:.3e}s",
        r.level, r.dofs, r.error, r.iterations, r.tol, r.solve_time, r.assembly_time
    );
    Ok(ExitCode::SUCCESS)
}

fn build_level_mesh(args: &ProblemArgs, levels: u32) -> Result<Mesh, CliError> {
    let mut mesh = Mesh::unit_cube(args.cells as usize, args.dim as usize)?;
    for _ in 1..levels {
        mesh = mesh.refine_uniform().0;
    }
    Ok(mesh)
}

fn run_verify(args: VerifyArgs) -> Result<ExitCode, CliError> {
    let threads = args.problem.threads;
    driver::with_threads(threads, move || verify_inner(args))?
}

fn verify_inner(args: VerifyArgs) -> Result<ExitCode, CliError> {
    let mesh = build_level_mesh(&args.problem, args.levels)?;
    let dofmap = DofMap::with_dirichlet(&mesh);
    if dofmap.n_free() == 0 {
        return Err(CliError::Config(
            "mesh has no interior vertices; increase --cells".into(),
        ));
    }
    let rho_assignment = args.problem.rho_assignment().map_err(CliError::Config)?;
    let balanced_rho = || {
        let h = 1.0 / (args.problem.cells as f64 * 2f64.powi(args.levels as i32 - 1));
        h * h
    };
    match args.check {
        CheckArg::SchurIdentity => {
            let rho = match rho_assignment {
                RhoAssignment::Constant(v) => v,
                RhoAssignment::Balanced => balanced_rho(),
            };
            let dev = ocp::verify_schur_identity(&mesh, &dofmap, rho, 20, args.problem.seed)?;
            println!(
                "schur-identity: dim {} dofs {} rho {:.6e} max relative deviation {:.3e}",
                mesh.dim(),
                dofmap.n_free(),
                rho,
                dev
            );
            if dev <= 1e-9 {
                println!("PASS (<= 1e-9)");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL (> 1e-9)");
                Err(CliError::Run(format!("Schur identity deviation {dev:.3e}")))
            }
        }
        CheckArg::Spectral => {
            let reg = Regularization::new(
                args.problem.reg.into(),
                match rho_assignment {
                    RhoAssignment::Constant(v) => ocp::RhoMode::Constant(v),
                    RhoAssignment::Balanced => ocp::RhoMode::MeshAdapted,
                },
            );
            let opts = EigOptions {
                seed: args.problem.seed,
                ..EigOptions::default()
            };
            let report = ocp::verify_spectral_equivalence(&mesh, &dofmap, &reg, &opts)?;
            println!(
                "spectral: dim {} r {} dofs {}",
                report.dim,
                report.exponent,
                dofmap.n_free()
            );
            println!(
                "  lambda(D^-1 M) in [{:.6}, {:.6}], lower bound 1/(d+2) = {:.6}",
                report.mass_lambda_min, report.mass_lambda_max, report.lower_bound
            );
            println!(
                "  lambda(D^-1 S) in [{:.6}, {:.6}], upper bound c_inv^r + 1 = {:.6} (c_inv = {:.4})",
                report.s_lambda_min, report.s_lambda_max, report.upper_bound, report.c_inv_estimate
            );
            if report.lower_ok && report.upper_ok {
                println!("PASS");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL");
                Err(CliError::Run("spectral equivalence bounds violated".into()))
            }
        }
        CheckArg::CrossForm => {
            let rho = match rho_assignment {
                RhoAssignment::Constant(v) => v,
                RhoAssignment::Balanced => balanced_rho(),
            };
            let dev = cross_form_deviation(&mesh, &dofmap, rho, args.problem.max_iters)?;
            println!(
                "cross-form: dim {} dofs {} rho {:.6e} max pairwise L2 deviation {:.3e}",
                mesh.dim(),
                dofmap.n_free(),
                rho,
                dev
            );
            if dev <= 1e-6 {
                println!("PASS (<= 1e-6)");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("FAIL (> 1e-6)");
                Err(CliError::Run(format!("cross-form deviation {dev:.3e}")))
            }
        }
    }
}

/// Solves the same constant-rho problem through all three forms and returns
/// the largest pairwise L2 distance between the states.
fn cross_form_deviation(
    mesh: &Mesh,
    dofmap: &DofMap,
    rho: f64,
    max_iters: usize,
) -> Result<f64, CliError> {
    let reg = Regularization::energy_constant(rho);
    let target = fem::BoxTarget::centered_box(mesh.dim());
    let mass = fem::assemble_mass(mesh, dofmap);
    let n = dofmap.n_free();
    let mut states: Vec<Vec<f64>> = Vec::with_capacity(3);

    for form in [
        SystemForm::DiffusionPrimal,
        SystemForm::SchurComplement,
        SystemForm::SaddlePoint,
    ] {
        let system = match form {
            SystemForm::DiffusionPrimal => ocp::build_primal_system(mesh, dofmap, &reg, &target)?,
            SystemForm::SchurComplement => ocp::build_schur_system(mesh, dofmap, &reg, &target)?,
            SystemForm::SaddlePoint => ocp::build_saddle_system(mesh, dofmap, &reg, &target)?,
        };
        let state = match &system {
            DiscreteSystem::Saddle { op, rhs } => {
                let precond = op.block_preconditioner()?;
                let x0 = vec![0.0; op.dim()];
                let (sol, rep) = linalg::minres(op, &precond, rhs, &x0, 1e-10, max_iters)?;
                if !rep.converged {
                    return Err(CliError::Run("saddle solve did not converge".into()));
                }
                op.split(&sol).1.to_vec()
            }
            _ => {
                let precond = fem::mass_diagonal(mesh, dofmap);
                let x0 = vec![0.0; n];
                let (sol, rep) =
                    linalg::pcg(system.operator(), &precond, system.rhs(), &x0, 1e-10, max_iters)?;
                if !rep.converged {
                    return Err(CliError::Run("SPD solve did not converge".into()));
                }
                sol
            }
        };
        states.push(state);
    }

    let l2 = |a: &[f64], b: &[f64]| -> Result<f64, CliError> {
        let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        let mut md = vec![0.0; diff.len()];
        linalg::LinearOperator::apply(&mass, &diff, &mut md)?;
        Ok(linalg::dot(&diff, &md).max(0.0).sqrt())
    };
    let mut max_dev = 0.0f64;
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            max_dev = max_dev.max(l2(&states[i], &states[j])?);
        }
    }
    Ok(max_dev)
}

fn run_bench(args: BenchArgs) -> Result<ExitCode, CliError> {
    let cfg = args
        .problem
        .study_config(
            args.level as usize,
            RefineMode::Uniform,
            false,
            None,
            None,
            0.5,
        )
        .map_err(CliError::Config)?;
    if args.thread_counts.is_empty() || args.thread_counts.iter().any(|&t| t == 0) {
        return Err(CliError::Config(
            "--thread-counts needs positive values".into(),
        ));
    }
    if args.reps == 0 {
        return Err(CliError::Config("--reps must be >= 1".into()));
    }
    let report =
        driver::run_scaling_bench(&cfg, args.level as usize, &args.thread_counts, args.reps)?;

    let rendered = match args.format {
        FormatArg::Json => serde_json::to_string_pretty(&report).expect("serialize") + "\n",
        FormatArg::Csv => {
            let mut out = String::from("threads,its,time_s\n");
            for row in &report.rows {
                out.push_str(&format!(
                    "{},{},{:.6e}\n",
                    row.threads, row.iterations, row.min_time
                ));
            }
            out
        }
    };
    write_or_print(&args.output, &rendered)?;
    Ok(ExitCode::SUCCESS)
}
