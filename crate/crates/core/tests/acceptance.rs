//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed. The process
//! exits nonzero when a criterion fails unless it is listed in
//! `DOCUMENTED_FAILURES`, in which case the documented failure mode is
//! asserted instead.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use abreu::grid::{
    build_disk_grid, constant_boundary, convergence_study, solve_coupled, GridSolution, SolverConfig,
};
use abreu::numerics::Sign;
use abreu::operators::{elementary_symmetric, trace_inequality_slacks, RhsModel};
use abreu::radial::{residual_ode, RadialProblem, RadialSolution, RadialSolver};
use abreu::verify::{energy_jp, euler_lagrange_check, EnergyData};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Criterion 7 asks for observed order ≥ 1.5 in the w error, but the scheme
/// reproduces the quadratic target w = (1 + |x|²)/2 exactly, so the measured
/// errors are rounding noise with no order. See README.
///
/// Criterion 6 bounds the absolute ODE residual. On the large roots at
/// ψ = M the equation itself has magnitude e^{g1^p/p}·g1/ψ of order 1e2 to
/// 1e13, so centered differences cannot reach 1e-4 absolute at 512 samples.
const DOCUMENTED_FAILURES: &[usize] = &[6, 7];

struct Outcome {
    id: usize,
    passed: bool,
    detail: String,
}

fn radial(n: usize, p: f64, f: Sign, psi: f64, samples: usize) -> (Vec<f64>, Vec<RadialSolution>) {
    let problem = RadialProblem::new(n, p, f, psi, 0.0).unwrap();
    let (analysis, sols) = RadialSolver::default().solve_all(&problem, 10.0, 1e-3, samples).unwrap();
    (analysis.roots, sols)
}

fn coupled(model: &RhsModel, h: f64) -> GridSolution {
    let grid = build_disk_grid(h).unwrap();
    solve_coupled(model, &constant_boundary(0.0), &constant_boundary(1.0), &grid, &SolverConfig::default())
        .unwrap()
}

fn sup_error(sol: &GridSolution, values: &[f64], exact: impl Fn(f64) -> f64) -> f64 {
    sol.grid
        .nodes()
        .iter()
        .zip(values)
        .map(|(&[x, y], v)| (v - exact(x * x + y * y)).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let (_, sols) = radial(2, 2.0, Sign::Plus, 1.0, 256);
    let elapsed = t.elapsed().as_secs_f64();
    let s = &sols[0];
    let e_g1 = (s.g1 - (2.0 * 2f64.ln()).sqrt()).abs();
    let e_w0 = (s.samples[0].w - 0.5).abs();
    let e_slope = s
        .samples
        .iter()
        .map(|x| (x.slope - (2.0 * (1.0 + x.r * x.r).ln()).sqrt()).abs())
        .fold(0.0, f64::max);
    Outcome {
        id: 1,
        passed: sols.len() == 1 && e_g1 <= 1e-10 && e_w0 <= 1e-8 && e_slope <= 1e-8 && elapsed < 1.0,
        detail: format!("|g1 err| = {e_g1:.2e}, |w(0) err| = {e_w0:.2e}, slope err = {e_slope:.2e}, {elapsed:.3} s"),
    }
}

fn criterion_2() -> Outcome {
    let (_, sols) = radial(2, 2.0, Sign::Minus, 1.0, 256);
    let s = &sols[0];
    let e_g1 = (s.g1 - (2.0 * 1.5f64.ln()).sqrt()).abs();
    let e_w = s
        .samples
        .iter()
        .map(|x| (x.w - 0.5 * (3.0 - x.r * x.r)).abs())
        .fold(0.0, f64::max);
    Outcome {
        id: 2,
        passed: e_g1 <= 1e-10 && e_w <= 1e-8,
        detail: format!("|g1 err| = {e_g1:.2e}, max |w err| = {e_w:.2e}"),
    }
}

fn criterion_3() -> Outcome {
    let counts: Vec<usize> = [0.3, 0.5]
        .iter()
        .map(|&psi| radial(2, 2.0, Sign::Plus, psi, 16).0.len())
        .collect();
    Outcome {
        id: 3,
        passed: counts.iter().all(|&c| c == 0),
        detail: format!("root counts for psi = 0.3, 0.5: {counts:?}"),
    }
}

fn criterion_4() -> Outcome {
    let (roots, _) = radial(2, 4.0, Sign::Plus, 1.0, 16);
    let ok = roots.len() == 2 && roots[0] > 1.0 && roots[0] < 1.2 && roots[1] > 1.5 && roots[1] < 2.0;
    Outcome {
        id: 4,
        passed: ok,
        detail: format!("roots = {roots:?}"),
    }
}

fn criterion_5() -> Outcome {
    let solver = RadialSolver::default();
    let mut ok = true;
    let mut detail = Vec::new();
    for p in [3.0, 4.0] {
        let m = solver.threshold_m(2, p).unwrap();
        let (at_m, _) = radial(2, p, Sign::Plus, m, 16);
        let below = radial(2, p, Sign::Plus, 0.9 * m, 16).0.len();
        let in_unit = at_m.iter().filter(|&&t| t > 0.0 && t < 1.0).count();
        ok &= in_unit >= 1;
        detail.push(format!("p={p}: M={m:.6}, roots in (0,1) at M: {in_unit}, roots at 0.9M: {below}"));
    }
    Outcome {
        id: 5,
        passed: ok,
        detail: detail.join("; "),
    }
}

/// Per-solution ODE residual data: (label, residual at 512, at 2048, equation scale).
type ResidualRow = (String, f64, f64, f64);

fn criterion_6() -> (Outcome, Vec<ResidualRow>) {
    let solver = RadialSolver::default();
    let m3 = solver.threshold_m(2, 3.0).unwrap();
    let m4 = solver.threshold_m(2, 4.0).unwrap();
    // Every problem with roots among criteria 1 to 5.
    let cases = [
        (2.0, Sign::Plus, 1.0),
        (2.0, Sign::Minus, 1.0),
        (4.0, Sign::Plus, 1.0),
        (3.0, Sign::Plus, m3),
        (3.0, Sign::Plus, 0.9 * m3),
        (4.0, Sign::Plus, m4),
        (4.0, Sign::Plus, 0.9 * m4),
    ];
    let mut rows = Vec::new();
    for (p, f, psi) in cases {
        let (_, coarse) = radial(2, p, f, psi, 512);
        let (_, fine) = radial(2, p, f, psi, 2048);
        for (c, fi) in coarse.iter().zip(&fine) {
            let scale = (f.value() * c.g1.powf(p) / p).exp() * c.g1 / psi;
            rows.push((
                format!("p={p} f={f} psi={psi:.4} g1={:.4}", c.g1),
                residual_ode(c).unwrap(),
                residual_ode(fi).unwrap(),
                scale,
            ));
        }
    }
    let failing: Vec<String> = rows
        .iter()
        .filter(|r| !(r.1 <= 1e-4 && r.1 / r.2 >= 10.0))
        .map(|r| format!("[{}: {:.2e} -> {:.2e}, scale {:.1e}]", r.0, r.1, r.2, r.3))
        .collect();
    let worst_ratio = rows.iter().map(|r| r.1 / r.2).fold(f64::INFINITY, f64::min);
    (
        Outcome {
            id: 6,
            passed: failing.is_empty(),
            detail: format!(
                "{} solutions, min reduction 512->2048 = {worst_ratio:.1}x, failing: {}",
                rows.len(),
                if failing.is_empty() { "none".to_string() } else { failing.join(" ") }
            ),
        },
        rows,
    )
}

fn criterion_7(solutions: &mut Vec<(String, GridSolution)>) -> (Outcome, Vec<f64>) {
    let t = Instant::now();
    let model = RhsModel::laplacian_scaled(1.0);
    let reference = &radial(2, 2.0, Sign::Plus, 1.0, 4097).1[0];
    let hs = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
    let rows = convergence_study(
        &model,
        &constant_boundary(0.0),
        &constant_boundary(1.0),
        &hs,
        &SolverConfig::default(),
        reference,
    )
    .unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let errs: Vec<f64> = rows.iter().map(|r| r.error_w.unwrap_or(f64::NAN)).collect();
    let orders: Vec<f64> = rows.iter().skip(1).map(|r| r.order_w.unwrap_or(f64::NAN)).collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    let order_ok = orders.iter().all(|&o| o >= 1.5);
    let passed = monotone && order_ok && errs[2] <= 2e-3 && elapsed <= 120.0;
    // The study's solutions are not returned; re-solve for the audit pool.
    for &h in &hs {
        solutions.push((format!("laplacian f=1, h={h}"), coupled(&model, h)));
    }
    let eu: Vec<String> = rows.iter().map(|r| format!("{:.2e}", r.error_u.unwrap_or(f64::NAN))).collect();
    (
        Outcome {
            id: 7,
            passed,
            detail: format!(
                "w errors = {:?}, orders = {:?}, u errors = {eu:?}, {elapsed:.1} s",
                errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>(),
                orders.iter().map(|o| format!("{o:.2}")).collect::<Vec<_>>(),
            ),
        },
        errs,
    )
}

fn criterion_8(solutions: &mut Vec<(String, GridSolution)>) -> Outcome {
    let h = 1.0 / 32.0;
    let sol = coupled(&RhsModel::laplacian_scaled(0.0), h);
    let ew = sup_error(&sol, &sol.w.values, |_| 1.0);
    let eu = sup_error(&sol, &sol.u.values, |r2| 0.5 * (r2 - 1.0));
    let out = Outcome {
        id: 8,
        passed: ew <= 1e-8 && eu <= h * h,
        detail: format!("max |w - 1| = {ew:.2e}, max |u - (|x|^2-1)/2| = {eu:.2e} (h^2 = {:.2e})", h * h),
    };
    solutions.push(("zero rhs".into(), sol));
    out
}

fn criterion_9(solutions: &mut Vec<(String, GridSolution)>) -> Outcome {
    let sol = coupled(&RhsModel::p_laplacian(2.0, -1.0), 1.0 / 32.0);
    let ew = sup_error(&sol, &sol.w.values, |r2| 0.5 * (3.0 - r2));
    let out = Outcome {
        id: 9,
        passed: ew <= 5e-3,
        detail: format!("max |w - (3-|x|^2)/2| = {ew:.2e}"),
    };
    solutions.push(("p-laplacian p=2 f=-1".into(), sol));
    out
}

fn criterion_11() -> Outcome {
    let mut rng = StdRng::seed_from_u64(20_240_611);
    let mut worst = f64::INFINITY;
    let mut count = 0usize;
    for n in 2..=6usize {
        for _ in 0..10_000 {
            let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let scale = rng.random_range(1e-3..1.0);
            let h = &a * a.transpose() + DMatrix::identity(n, n) * scale;
            for k in 1..n {
                let (s0, s1) = trace_inequality_slacks(&h, k).unwrap();
                worst = worst.min(s0).min(s1);
                count += 1;
            }
        }
        let mut diag = vec![1e-6; n];
        diag[0] = 1.0;
        let d = DMatrix::from_diagonal(&DVector::from_vec(diag));
        for k in 1..n {
            let (s0, s1) = trace_inequality_slacks(&d, k).unwrap();
            worst = worst.min(s0).min(s1);
            count += 1;
        }
        // Sanity of the near-degenerate case: S_n equals the product of the diagonal.
        let det = elementary_symmetric(&d, n).unwrap();
        assert!((det - 1e-6f64.powi(n as i32 - 1)).abs() <= 1e-12 * det);
    }
    Outcome {
        id: 11,
        passed: worst >= -1e-12,
        detail: format!("{count} (matrix, k) pairs, smallest relative slack = {worst:.3e}"),
    }
}

fn criterion_12(solutions: &mut Vec<(String, GridSolution)>) -> Outcome {
    let inner = RhsModel::p_laplacian(2.0, -1.0);
    let mut counts = Vec::new();
    let mut converged = true;
    for gamma in [0.05, 0.025, 0.0125] {
        let grid = build_disk_grid(1.0 / 32.0).unwrap();
        match solve_coupled(
            &RhsModel::clamped(inner.clone(), gamma),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &grid,
            &SolverConfig::default(),
        ) {
            Ok(sol) => {
                counts.push(sol.report.clamp_active_count().unwrap_or(usize::MAX));
                solutions.push((format!("clamped gamma={gamma}"), sol));
            }
            Err(e) => {
                converged = false;
                counts.push(usize::MAX);
                eprintln!("clamped solve failed for gamma = {gamma}: {e}");
            }
        }
    }
    let monotone = counts.windows(2).all(|w| w[1] <= w[0]);
    Outcome {
        id: 12,
        passed: converged && counts[0] == 0 && monotone,
        detail: format!("clamp-active counts for gamma = 0.05, 0.025, 0.0125: {counts:?}"),
    }
}

fn criterion_13() -> Outcome {
    let problem = RadialProblem::new(2, 2.0, Sign::Plus, 1.0, 0.5).unwrap();
    let samples = (0..=256)
        .map(|k| {
            let r = k as f64 / 256.0;
            abreu::radial::RadialSample { r, slope: r, v: 0.5 * r * r, w: 1.0, det: 1.0 }
        })
        .collect();
    let paraboloid = RadialSolution::from_samples(problem, samples).unwrap();
    let e_rad = (energy_jp(EnergyData::Radial(&paraboloid), 2.0).unwrap() - PI / 4.0).abs();
    let grid = build_disk_grid(1.0 / 32.0).unwrap();
    let u = abreu::grid::GridField::from_fn(&grid, |x, y| 0.5 * (x * x + y * y));
    let w = abreu::grid::GridField::constant(&grid, 1.0);
    let grid_sol = GridSolution {
        grid,
        model: RhsModel::laplacian_scaled(0.0),
        u,
        w,
        report: Default::default(),
        config: SolverConfig::default(),
    };
    let e_grid = (energy_jp(EnergyData::Grid(&grid_sol), 2.0).unwrap() - PI / 4.0).abs();
    let (_, case_one) = radial(2, 2.0, Sign::Plus, 1.0, 2049);
    let el = euler_lagrange_check(&case_one[0], 1e-8).unwrap();
    let min_delta = el.checks.iter().map(|c| c.measured).fold(f64::INFINITY, f64::min);
    Outcome {
        id: 13,
        passed: e_rad <= 1e-6 && e_grid <= 1e-6 && el.passed && !el.checks.is_empty(),
        detail: format!(
            "|J2 - pi/4|: radial {e_rad:.2e}, grid {e_grid:.2e}; {} EL directions, min increase {min_delta:.3e}",
            el.checks.len()
        ),
    }
}

fn main() -> ExitCode {
    let mut pool: Vec<(String, GridSolution)> = Vec::new();
    let mut outcomes = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4(), criterion_5()];
    let (c6, residual_rows) = criterion_6();
    outcomes.push(c6);
    let (c7, w_errors) = criterion_7(&mut pool);
    outcomes.push(c7);
    outcomes.push(criterion_8(&mut pool));
    outcomes.push(criterion_9(&mut pool));
    let c12 = criterion_12(&mut pool);
    pool.push(("newton f=g=1 k=1".into(), coupled(&RhsModel::newton(1.0, 1.0, 1), 1.0 / 32.0)));
    let mut audit_ok = true;
    let mut audit_lines = Vec::new();
    for (name, sol) in &pool {
        let report = sol.report.max_principles.as_ref().expect("converged solutions carry audits");
        let tol = -10.0 * sol.config.outer_tol;
        let ok = report.checks.iter().all(|c| c.measured >= tol) && !report.checks.is_empty();
        audit_ok &= ok;
        let worst = report.checks.iter().map(|c| c.measured).fold(f64::INFINITY, f64::min);
        audit_lines.push(format!("{name}: {} audits, min slack {worst:.1e}", report.checks.len()));
    }
    outcomes.push(Outcome {
        id: 10,
        passed: audit_ok,
        detail: audit_lines.join("; "),
    });
    outcomes.push(criterion_11());
    outcomes.push(c12);
    outcomes.push(criterion_13());
    outcomes.sort_by_key(|o| o.id);

    let mut unexpected = false;
    for o in &outcomes {
        let documented = DOCUMENTED_FAILURES.contains(&o.id);
        let tag = match (o.passed, documented) {
            (true, _) => "PASS",
            (false, true) => "FAIL (documented)",
            (false, false) => "FAIL",
        };
        println!("criterion {:>2}: {tag}: {}", o.id, o.detail);
        unexpected |= !o.passed && !documented;
    }
    // The documented failure must fail for the documented reason: w errors at
    // rounding level on every mesh, far below the required accuracy.
    let rounding = w_errors.iter().all(|&e| e < 1e-9);
    println!(
        "criterion  7 failure mode: w errors at rounding level on every mesh: {}",
        if rounding { "confirmed" } else { "NOT confirmed" }
    );
    // Criterion 6 fails only where the equation scale is large, and there the
    // residual relative to that scale is small and still decreasing.
    let scaled = residual_rows.iter().all(|r| {
        (r.1 <= 1e-4 && r.1 / r.2 >= 10.0) || (r.3 >= 1e2 && r.1 / r.3 <= 1e-2 && r.2 < r.1)
    });
    println!(
        "criterion  6 failure mode: failures confined to large-scale roots with small relative residual: {}",
        if scaled { "confirmed" } else { "NOT confirmed" }
    );
    if unexpected || !rounding || !scaled {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
