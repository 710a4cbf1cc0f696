//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Reference values come from the uniform/nested convergence tables and the
//! spectral-equivalence bounds; tolerances are pinned in the assertions.
//! Criterion 1's level-4 extension is expensive and therefore `#[ignore]`d;
//! run `cargo test --workspace -- --ignored` to include it.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use trackfem_core::driver::{
    run_adaptive_study, run_scaling_bench, run_uniform_study, RefineMode, RhoAssignment,
    StudyConfig, ToleranceSchedule,
};
use trackfem_core::fem::{
    self, assemble_load_box_target, assemble_mass, assemble_stiffness, BoxTarget, Coeff, DofMap,
    QuadratureRule,
};
use trackfem_core::linalg::{
    dot, minres, pcg, CsrMatrix, DiagonalMatrix, EigOptions, LinearOperator,
};
use trackfem_core::mesh::Mesh;
use trackfem_core::ocp::{
    self, verify_schur_identity, verify_spectral_equivalence, DiscreteSystem, RegKind,
    Regularization, SystemForm,
};

/// Collects sub-checks of one criterion and reports a single pass/fail line.
struct Criterion {
    name: &'static str,
    failures: Vec<String>,
}

impl Criterion {
    fn new(name: &'static str) -> Criterion {
        Criterion {
            name,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, label: &str, ok: bool, detail: String) {
        println!("  [{}] {label}: {detail}", if ok { "ok" } else { "FAIL" });
        if !ok {
            self.failures.push(format!("{label}: {detail}"));
        }
    }

    fn finish(self) {
        if self.failures.is_empty() {
            println!("{}: PASS", self.name);
        } else {
            println!("{}: FAIL", self.name);
            panic!(
                "{} failed sub-checks:\n  {}",
                self.name,
                self.failures.join("\n  ")
            );
        }
    }
}

fn rel_dev(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference
}

fn benchmark_uniform_cfg() -> StudyConfig {
    StudyConfig::benchmark_default(3)
}

/// Criterion 1: uniform 3d convergence against the reference table,
/// levels 1-3, primal form, energy rho = h^2, non-nested PCG with diag(M).
#[test]
fn criterion_1_uniform_convergence() {
    let mut c = Criterion::new("criterion 1 (uniform 3d convergence)");
    let cfg = benchmark_uniform_cfg();
    let report = run_uniform_study(&cfg).expect("study runs");
    assert!(report.aborted.is_none(), "study aborted: {:?}", report.aborted);

    let expected_dofs = [4_913usize, 35_937, 274_625];
    let expected_err = [1.61e-1, 1.17e-1, 8.26e-2];
    let expected_eoc = [0.46, 0.51];
    let expected_its = [20usize, 23, 23];

    for (i, r) in report.records.iter().enumerate() {
        c.check(
            &format!("level {} dofs", i + 1),
            r.dofs == expected_dofs[i],
            format!("{} vs {}", r.dofs, expected_dofs[i]),
        );
        let dev = rel_dev(r.error, expected_err[i]);
        c.check(
            &format!("level {} error within 3%", i + 1),
            dev <= 0.03,
            format!("{:.4e} vs {:.2e} (dev {:.2}%)", r.error, expected_err[i], 100.0 * dev),
        );
        let its_dev = r.iterations.abs_diff(expected_its[i]);
        c.check(
            &format!("level {} iterations within +-4", i + 1),
            its_dev <= 4,
            format!("{} vs {}", r.iterations, expected_its[i]),
        );
        if i >= 1 {
            let eoc = r.eoc.expect("eoc on refined levels");
            c.check(
                &format!("level {} eoc within +-0.05", i + 1),
                (eoc - expected_eoc[i - 1]).abs() <= 0.05,
                format!("{eoc:.4} vs {}", expected_eoc[i - 1]),
            );
        }
    }
    c.finish();
}

/// Criterion 1, optional level-4 extension (the `--big` run).
#[test]
#[ignore = "level 4 (2.1M dofs) takes minutes; run with -- --ignored"]
fn criterion_1_level4_big() {
    let mut c = Criterion::new("criterion 1 big (uniform 3d level 4)");
    let mut cfg = benchmark_uniform_cfg();
    cfg.levels = 4;
    let report = run_uniform_study(&cfg).expect("study runs");
    let r = report.records.last().expect("level 4 record");
    c.check("level 4 dofs", r.dofs == 2_146_689, format!("{}", r.dofs));
    let dev = rel_dev(r.error, 5.79e-2);
    c.check(
        "level 4 error within 3%",
        dev <= 0.03,
        format!("{:.4e} vs 5.79e-2 (dev {:.2}%)", r.error, 100.0 * dev),
    );
    c.check(
        "level 4 iterations within +-4",
        r.iterations.abs_diff(22) <= 4,
        format!("{} vs 22", r.iterations),
    );
    c.finish();
}

/// Criterion 2: nested iteration on the same hierarchy with alpha = 0.5,
/// beta = 0.5 reaches the reference accuracy in <= 5 iterations per level.
#[test]
fn criterion_2_nested_iteration() {
    let mut c = Criterion::new("criterion 2 (nested iteration)");
    let cfg = benchmark_uniform_cfg();
    let plain = run_uniform_study(&cfg).expect("non-nested study");

    let mut nested_cfg = benchmark_uniform_cfg();
    nested_cfg.nested = true;
    nested_cfg.schedule = ToleranceSchedule::new(0.5, 0.5, 1e-6).unwrap();
    let nested = run_uniform_study(&nested_cfg).expect("nested study");

    let expected_err = [1.18e-1, 8.22e-2];
    for (i, r) in nested.records.iter().enumerate().skip(1) {
        c.check(
            &format!("level {} nested iterations <= 5", i + 1),
            r.iterations <= 5,
            format!("{} iterations (tol {:.4e})", r.iterations, r.tol),
        );
        let dev = rel_dev(r.error, expected_err[i - 1]);
        c.check(
            &format!("level {} nested error within 3%", i + 1),
            dev <= 0.03,
            format!(
                "{:.4e} vs {:.2e} (dev {:.2}%)",
                r.error,
                expected_err[i - 1],
                100.0 * dev
            ),
        );
        let against_plain = rel_dev(r.error, plain.records[i].error);
        c.check(
            &format!("level {} nested vs non-nested <= 2%", i + 1),
            against_plain <= 0.02,
            format!(
                "nested {:.4e} vs non-nested {:.4e} (dev {:.2}%)",
                r.error,
                plain.records[i].error,
                100.0 * against_plain
            ),
        );
    }
    c.finish();
}

/// Criterion 3: the Schur complement with constant rho equals rho K + M up
/// to the inner solve tolerance, on 2d and 3d meshes up to 50k dofs.
#[test]
fn criterion_3_schur_identity() {
    let mut c = Criterion::new("criterion 3 (Schur identity)");

    let mesh2 = Mesh::unit_cube(128, 2).unwrap();
    let mesh3 = Mesh::unit_cube(16, 3).unwrap().refine_uniform().0;
    for (mesh, h) in [(&mesh2, 1.0 / 128.0), (&mesh3, 1.0 / 32.0)] {
        let dofmap = DofMap::with_dirichlet(mesh);
        assert!(mesh.n_vertices() <= 50_000);
        for rho in [h * h, 0.1, 1.0] {
            let dev = verify_schur_identity(mesh, &dofmap, rho, 20, 0xACCE97).unwrap();
            c.check(
                &format!("dim {} rho {:.3e}", mesh.dim(), rho),
                dev <= 1e-9,
                format!("max relative deviation {dev:.3e} over 20 vectors"),
            );
        }
    }
    c.finish();
}

/// Criterion 4: spectral equivalence bounds by dense generalized
/// eigensolves on meshes below 600 free dofs, r = 2 and r = 4.
#[test]
fn criterion_4_spectral_equivalence() {
    let mut c = Criterion::new("criterion 4 (spectral equivalence)");
    let meshes = [
        Mesh::unit_cube(64, 1).unwrap(),
        Mesh::unit_cube(20, 2).unwrap(),
        Mesh::unit_cube(7, 3).unwrap(),
    ];
    for mesh in &meshes {
        let dofmap = DofMap::with_dirichlet(mesh);
        assert!(dofmap.n_free() <= 600, "dense eigensolve domain");
        let d = mesh.dim();
        for reg in [Regularization::energy_adapted(), Regularization::l2_adapted()] {
            let report =
                verify_spectral_equivalence(mesh, &dofmap, &reg, &EigOptions::default()).unwrap();
            c.check(
                &format!("d={d} r={} lambda_min(D^-1 M) >= 1/(d+2)", report.exponent),
                report.mass_lambda_min >= report.lower_bound - 1e-10,
                format!("{:.8} vs {:.8}", report.mass_lambda_min, report.lower_bound),
            );
            c.check(
                &format!("d={d} r={} lambda_max(D^-1 S) <= c_inv^r + 1", report.exponent),
                report.s_lambda_max <= report.upper_bound + 1e-8,
                format!(
                    "{:.6} vs {:.6} (c_inv = {:.4})",
                    report.s_lambda_max, report.upper_bound, report.c_inv_estimate
                ),
            );
        }
    }
    c.finish();
}

/// Criterion 5: primal, Schur and saddle solves of the same level-2 2d
/// problem agree in the state to 1e-6 in the L2 norm.
#[test]
fn criterion_5_cross_form_consistency() {
    let mut c = Criterion::new("criterion 5 (cross-form consistency)");
    let mesh = Mesh::unit_cube(16, 2).unwrap().refine_uniform().0;
    let dofmap = DofMap::with_dirichlet(&mesh);
    let h = 1.0 / 32.0;
    let reg = Regularization::energy_constant(h * h);
    let target = BoxTarget::centered_box(2);
    let mass = assemble_mass(&mesh, &dofmap);
    let n = dofmap.n_free();

    let mut states: Vec<(&str, Vec<f64>)> = Vec::new();
    for form in [
        SystemForm::DiffusionPrimal,
        SystemForm::SchurComplement,
        SystemForm::SaddlePoint,
    ] {
        let system = match form {
            SystemForm::DiffusionPrimal => {
                ocp::build_primal_system(&mesh, &dofmap, &reg, &target).unwrap()
            }
            SystemForm::SchurComplement => {
                ocp::build_schur_system(&mesh, &dofmap, &reg, &target).unwrap()
            }
            SystemForm::SaddlePoint => {
                ocp::build_saddle_system(&mesh, &dofmap, &reg, &target).unwrap()
            }
        };
        let (label, y) = match &system {
            DiscreteSystem::Saddle { op, rhs } => {
                let precond = op.block_preconditioner().unwrap();
                let x0 = vec![0.0; op.dim()];
                let (sol, rep) = minres(op, &precond, rhs, &x0, 1e-10, 200_000).unwrap();
                assert!(rep.converged, "saddle MINRES converged");
                ("saddle", op.split(&sol).1.to_vec())
            }
            other => {
                let precond = fem::mass_diagonal(&mesh, &dofmap);
                let x0 = vec![0.0; n];
                let (sol, rep) =
                    pcg(other.operator(), &precond, other.rhs(), &x0, 1e-10, 100_000).unwrap();
                assert!(rep.converged, "SPD solve converged");
                (
                    match form {
                        SystemForm::DiffusionPrimal => "primal",
                        _ => "schur",
                    },
                    sol,
                )
            }
        };
        states.push((label, y));
    }

    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let diff: Vec<f64> = states[i]
                .1
                .iter()
                .zip(&states[j].1)
                .map(|(a, b)| a - b)
                .collect();
            let mut md = vec![0.0; n];
            mass.apply(&diff, &mut md).unwrap();
            let l2 = dot(&diff, &md).max(0.0).sqrt();
            c.check(
                &format!("{} vs {}", states[i].0, states[j].0),
                l2 <= 1e-6,
                format!("L2 distance {l2:.3e}"),
            );
        }
    }
    c.finish();
}

/// Criterion 6: the L2-regularization path (rho = h^4, lumped regularization
/// operator) converges at the expected rate with level-independent PCG
/// iteration counts.
#[test]
fn criterion_6_l2_regularization_path() {
    let mut c = Criterion::new("criterion 6 (L2 regularization path)");
    let mut cfg = StudyConfig::benchmark_default(2);
    // start fine enough that the solver is in its asymptotic regime on
    // every level; the coarsest lattices converge in fewer iterations
    cfg.initial_cells = 32;
    cfg.levels = 3;
    cfg.form = SystemForm::SchurComplement;
    cfg.reg_kind = RegKind::L2;
    cfg.rho = RhoAssignment::Balanced;
    let report = run_uniform_study(&cfg).expect("study runs");
    assert!(report.aborted.is_none());

    for r in report.records.iter().skip(1) {
        let eoc = r.eoc.expect("eoc available");
        c.check(
            &format!("level {} eoc in [0.40, 0.60]", r.level),
            (0.40..=0.60).contains(&eoc),
            format!("{eoc:.4}"),
        );
    }
    let its: Vec<usize> = report.records.iter().map(|r| r.iterations).collect();
    let spread = its.iter().max().unwrap() - its.iter().min().unwrap();
    c.check(
        "iteration count spread <= 5",
        spread <= 5,
        format!("{its:?} (spread {spread})"),
    );
    c.finish();
}

/// Criterion 7: 3d adaptive refinement reaches the error target with a small
/// fraction of the uniform dofs and a dof-based rate above 0.6.
#[test]
fn criterion_7_adaptive_efficiency() {
    let mut c = Criterion::new("criterion 7 (adaptive efficiency)");
    let mut cfg = benchmark_uniform_cfg();
    cfg.refine = RefineMode::Adaptive;
    cfg.levels = 40;
    cfg.theta = 0.5;
    cfg.stop_error = Some(4.5e-2);
    let report = run_adaptive_study(&cfg).expect("adaptive study runs");
    assert!(report.aborted.is_none(), "aborted: {:?}", report.aborted);

    let last = report.records.last().expect("records");
    for r in &report.records {
        println!(
            "    level {:2}: dofs {:>9} error {:.4e} its {:2} eoc {:?}",
            r.level, r.dofs, r.error, r.iterations, r.eoc
        );
    }
    c.check(
        "error target reached",
        last.error <= 4.5e-2,
        format!("{:.4e} after {} levels", last.error, report.records.len()),
    );
    // the uniform hierarchy needs level 5 (16,974,593 vertices) to drop
    // below 4.5e-2: level 4 sits at 5.7e-2 on this mesh family
    let uniform_dofs = 16_974_593usize;
    c.check(
        "dofs <= 20% of the uniform requirement",
        last.dofs * 5 <= uniform_dofs,
        format!("{} vs 20% of {} = {}", last.dofs, uniform_dofs, uniform_dofs / 5),
    );
    let k = report.records.len();
    assert!(k >= 5, "need at least 5 levels for the trend, got {k}");
    let (a, b) = (&report.records[k - 5], &report.records[k - 1]);
    let trend = 3.0 * (a.error / b.error).ln() / (b.dofs as f64 / a.dofs as f64).ln();
    c.check(
        "dof-based eoc trend over last 4 levels >= 0.6",
        trend >= 0.6,
        format!("{trend:.4}"),
    );
    c.finish();
}

/// Criterion 8: iteration counts are exactly thread-count invariant, the
/// level-4 solve shows strong scaling, and nested iteration counts stay
/// constant across levels.
#[test]
fn criterion_8_scaling() {
    let mut c = Criterion::new("criterion 8 (scaling)");
    let cfg = benchmark_uniform_cfg();
    let bench = run_scaling_bench(&cfg, 4, &[1, 8], 3).expect("bench runs");
    assert!(bench.dofs >= 2_000_000, "level-4 solve has >= 2M dofs");
    c.check(
        "iteration counts invariant across thread counts",
        bench.rows.iter().all(|r| r.iterations == bench.rows[0].iterations),
        format!(
            "{:?}",
            bench.rows.iter().map(|r| r.iterations).collect::<Vec<_>>()
        ),
    );
    let t1 = bench.rows[0].min_time;
    let t8 = bench.rows[1].min_time;
    let speedup = t1 / t8;
    c.check(
        "strong-scaling speedup 1 -> 8 threads >= 4x",
        speedup >= 4.0,
        format!(
            "{speedup:.2}x (t1 = {t1:.3}s, t8 = {t8:.3}s, {} cores available)",
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(0)
        ),
    );

    let mut nested_cfg = benchmark_uniform_cfg();
    nested_cfg.nested = true;
    let nested = run_uniform_study(&nested_cfg).expect("nested study");
    let its: Vec<usize> = nested.records.iter().skip(1).map(|r| r.iterations).collect();
    let spread = its.iter().max().unwrap() - its.iter().min().unwrap();
    c.check(
        "nested iteration counts constant across levels",
        its.iter().all(|&i| (1..=5).contains(&i)) && spread <= 2,
        format!("{its:?}"),
    );
    c.finish();
}

/// Criterion 9: oracle suite — Krylov solvers against dense factorizations,
/// assembly against hand-computed matrices, clipped integration against
/// subdivision quadrature.
#[test]
fn criterion_9_oracles() {
    let mut c = Criterion::new("criterion 9 (oracle suite)");
    let mut rng = ChaCha8Rng::seed_from_u64(0x09AC1E);

    // PCG vs dense Cholesky on random SPD systems up to n = 200
    for n in [50usize, 120, 200] {
        let m = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let dense = &m * m.transpose() + nalgebra::DMatrix::identity(n, n) * (n as f64);
        let a = CsrMatrix::from_rows(
            n,
            (0..n)
                .map(|i| (0..n).map(|j| (j as u32, dense[(i, j)])).collect())
                .collect(),
        );
        let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut b = vec![0.0; n];
        a.apply(&xs, &mut b).unwrap();
        let p = DiagonalMatrix::new(a.diagonal()).unwrap();
        let (x, rep) = pcg(&a, &p, &b, &vec![0.0; n], 1e-12, 20 * n).unwrap();
        assert!(rep.converged);
        let exact = dense
            .clone()
            .cholesky()
            .unwrap()
            .solve(&nalgebra::DVector::from_column_slice(&b));
        let err = x
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / exact.norm();
        c.check(
            &format!("PCG vs dense Cholesky (n = {n})"),
            err <= 1e-10,
            format!("relative error {err:.3e}"),
        );
    }

    // MINRES vs dense LU on a random symmetric indefinite system
    {
        let n = 150;
        let m = nalgebra::DMatrix::<f64>::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let mut sym = (&m + m.transpose()) * 0.5;
        for i in 0..n {
            sym[(i, i)] += if i % 2 == 0 { 8.0 } else { -8.0 };
        }
        let a = CsrMatrix::from_rows(
            n,
            (0..n)
                .map(|i| (0..n).map(|j| (j as u32, sym[(i, j)])).collect())
                .collect(),
        );
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = DiagonalMatrix::new(vec![8.0; n]).unwrap();
        let (x, rep) = minres(&a, &p, &b, &vec![0.0; n], 1e-12, 100 * n).unwrap();
        assert!(rep.converged);
        let exact = sym
            .clone()
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(&b))
            .unwrap();
        let err = x
            .iter()
            .zip(exact.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / exact.norm();
        c.check(
            &format!("MINRES vs dense LU (n = {n})"),
            err <= 1e-10,
            format!("relative error {err:.3e}"),
        );
    }

    // assembly vs hand-computed 1d tridiagonal matrices, exact
    {
        let n = 8;
        let h = 1.0 / n as f64;
        let mesh = Mesh::unit_cube(n, 1).unwrap();
        let dofmap = DofMap::with_dirichlet(&mesh);
        let k = assemble_stiffness(&mesh, &dofmap, Coeff::Constant(1.0)).unwrap();
        let m = assemble_mass(&mesh, &dofmap);
        let mut max_k_dev = 0.0f64;
        let mut max_m_dev = 0.0f64;
        for (i, j, v) in k.triplets() {
            let expect = match i.abs_diff(j) {
                0 => 2.0 / h,
                1 => -1.0 / h,
                _ => 0.0,
            };
            max_k_dev = max_k_dev.max((v - expect).abs());
        }
        for (i, j, v) in m.triplets() {
            let expect = match i.abs_diff(j) {
                0 => 4.0 * h / 6.0,
                1 => h / 6.0,
                _ => 0.0,
            };
            max_m_dev = max_m_dev.max((v - expect).abs());
        }
        c.check(
            "1d stiffness/mass vs hand computation",
            max_k_dev <= 1e-12 && max_m_dev <= 1e-16,
            format!("max deviations {max_k_dev:.3e} / {max_m_dev:.3e}"),
        );

        // 2d element stiffness of the unit right triangle through the global
        // assembly on a single-cell mesh (two Kuhn triangles)
        let mesh2 = Mesh::unit_cube(1, 2).unwrap();
        let all = DofMap::all_free(&mesh2);
        let k2 = assemble_stiffness(&mesh2, &all, Coeff::Constant(1.0)).unwrap();
        // global matrix of the two-triangle square: known closed form, the
        // diagonal is (1, 1, 1, 1) and the two cross-diagonal couplings vanish
        let kd = trackfem_core::linalg::operator_to_dense(&k2).unwrap();
        let mut ok = true;
        for i in 0..4 {
            ok &= (kd[(i, i)] - 1.0).abs() <= 1e-14;
        }
        // corners across the diagonal of the square are uncoupled
        let diag_pairs = [(0usize, 3usize), (1, 2)];
        let coupled = kd[(0, 1)].abs() > 0.4; // edge neighbors carry -1/2
        for &(a, b) in &diag_pairs {
            // one of the two diagonals is the shared edge, the other vanishes
            ok &= kd[(a, b)].abs() <= 1e-14 || (kd[(a, b)] + 1.0).abs() <= 1e-14;
        }
        c.check(
            "2d single-square stiffness structure",
            ok && coupled,
            "diagonal 1, couplings -1/2 and shared edge -1".to_string(),
        );
    }

    // clipped load vs subdivision quadrature on random dyadic boxes
    {
        let mut worst = 0.0f64;
        for d in 1..=3usize {
            let n = [0, 6, 4, 2][d];
            let mesh = Mesh::unit_cube(n, d).unwrap();
            let all = DofMap::all_free(&mesh);
            for _ in 0..4 {
                let cells = 4 * n;
                let mut lower = vec![0.0; d];
                let mut upper = vec![0.0; d];
                for a in 0..d {
                    let lo = rng.gen_range(0..cells - 1);
                    let hi = rng.gen_range(lo + 1..cells);
                    lower[a] = lo as f64 / cells as f64;
                    upper[a] = (hi + 1) as f64 / cells as f64;
                }
                let target = BoxTarget::new(lower.clone(), upper.clone()).unwrap();
                let load = assemble_load_box_target(&mesh, &all, &target).unwrap();
                let oracle = subdivision_load_oracle(&mesh, &lower, &upper);
                for (a, b) in load.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        c.check(
            "clipped box integration vs subdivision quadrature",
            worst <= 1e-10,
            format!("max deviation {worst:.3e}"),
        );
    }
    c.finish();
}

/// Independent load oracle: refine the mesh twice (4^d sub-simplices per
/// element), classify each sub-simplex by its centroid (exact for dyadic
/// boxes) and integrate the coarse basis functions with a degree-2 rule.
fn subdivision_load_oracle(mesh: &Mesh, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let d = mesh.dim();
    let per = 1usize << d;
    let (fine1, _) = mesh.refine_uniform();
    let (fine2, _) = fine1.refine_uniform();
    let rule = QuadratureRule::degree2(d);
    let mut oracle = vec![0.0; mesh.n_vertices()];
    for ef in 0..fine2.n_elements() {
        let parent = ef / (per * per);
        let mut coords_f = [[0.0f64; 3]; 4];
        for (k, &v) in fine2.element(ef).iter().enumerate() {
            coords_f[k][..d].copy_from_slice(fine2.vertex(v as usize));
        }
        let mut centroid = [0.0f64; 3];
        for c in coords_f.iter().take(d + 1) {
            for k in 0..d {
                centroid[k] += c[k] / (d + 1) as f64;
            }
        }
        if !(0..d).all(|k| centroid[k] > lower[k] && centroid[k] < upper[k]) {
            continue;
        }
        let mut coords_c = [[0.0f64; 3]; 4];
        for (k, &v) in mesh.element(parent).iter().enumerate() {
            coords_c[k][..d].copy_from_slice(mesh.vertex(v as usize));
        }
        for (li, &v) in mesh.element(parent).iter().enumerate() {
            let val = rule.integrate(d, &coords_f[..d + 1], |x| {
                barycentric(d, &coords_c, x)[li]
            });
            oracle[v as usize] += val;
        }
    }
    oracle
}

/// Barycentric coordinates via the dense solve of the affine map; kept
/// independent of the assembly path it cross-checks.
fn barycentric(d: usize, coords: &[[f64; 3]; 4], x: &[f64; 3]) -> [f64; 4] {
    let mut a = nalgebra::DMatrix::zeros(d, d);
    let mut rhs = nalgebra::DVector::zeros(d);
    for i in 0..d {
        for k in 0..d {
            a[(k, i)] = coords[i + 1][k] - coords[0][k];
        }
        rhs[i] = x[i] - coords[0][i];
    }
    for k in 0..d {
        rhs[k] = x[k] - coords[0][k];
    }
    let sol = a.lu().solve(&rhs).expect("nondegenerate element");
    let mut lambda = [0.0f64; 4];
    lambda[0] = 1.0;
    for i in 0..d {
        lambda[i + 1] = sol[i];
        lambda[0] -= sol[i];
    }
    lambda
}
