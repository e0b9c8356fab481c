//! Checks of computed solutions against the bounds and identities they must
//! satisfy: energies, maximum principles, monotonicity of `F` and
//! radial-versus-grid agreement.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{check_reference, radial_errors, DiskGrid, GridError, GridField, GridSolution};
use crate::numerics::{integrate, simpson, QuadratureSpec};
use crate::operators::{rhs_evaluate, Coefficient, OperatorError, PointState, RhsModel};
use crate::radial::{RadialProblem, RadialSolution};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("parameter mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    AtLeast,
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub relation: Relation,
}

impl Check {
    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured >= bound,
            measured,
            tolerance: bound,
            relation: Relation::AtLeast,
        }
    }

    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64) -> Self {
        Self {
            name: name.into(),
            passed: measured <= bound,
            measured,
            tolerance: bound,
            relation: Relation::AtMost,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn merge(mut self, other: VerificationReport) -> Self {
        self.checks.extend(other.checks);
        Self::new(self.checks)
    }
}

/// Area of the unit sphere `S^{n−1}`, i.e. `n ω_n`.
pub fn sphere_area(n: usize) -> f64 {
    match n {
        0 => 0.0,
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 2.0 * PI / (n as f64 - 2.0) * sphere_area(n - 2),
    }
}

pub enum EnergyData<'a> {
    Radial(&'a RadialSolution),
    Grid(&'a GridSolution),
}

/// `J_p(u) = ∫ (|Du|^p / p − log det D²u) dx` over the unit ball.
pub fn energy_jp(data: EnergyData<'_>, p: f64) -> Result<f64> {
    if !(p.is_finite() && p > 1.0) {
        return Err(VerifyError::InvalidData(format!("p must exceed 1, got {p}")));
    }
    match data {
        EnergyData::Radial(sol) => {
            if let Some(s) = sol.samples.iter().find(|s| !(s.det > 0.0)) {
                return Err(VerifyError::InvalidData(format!("det = {} at r = {}", s.det, s.r)));
            }
            let n = sol.problem.n;
            let values: Vec<f64> = sol
                .samples
                .iter()
                .map(|s| (s.slope.abs().powf(p) / p - s.det.ln()) * s.r.powi(n as i32 - 1))
                .collect();
            Ok(sphere_area(n) * radial_integral(&sol.radii(), &values))
        }
        EnergyData::Grid(sol) => {
            let dets = sol.determinants();
            if let Some(i) = dets.iter().position(|d| !(*d > 0.0)) {
                return Err(VerifyError::InvalidData(format!("det = {} at node {i}", dets[i])));
            }
            let values: Vec<f64> = (0..sol.grid.len())
                .map(|i| {
                    let s = sol.grid.gather(&sol.u.values, sol.u.boundary_fn().as_ref(), i);
                    let [gx, gy] = sol.grid.gradient(i, &s);
                    gx.hypot(gy).powf(p) / p - dets[i].ln()
                })
                .collect();
            Ok(grid_integral(&sol.grid, &values))
        }
    }
}

/// Simpson on uniform samples, trapezoid otherwise.
fn radial_integral(r: &[f64], values: &[f64]) -> f64 {
    if r.len() < 2 {
        return 0.0;
    }
    let h = (r[r.len() - 1] - r[0]) / (r.len() - 1) as f64;
    let uniform = r.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
    if uniform {
        simpson(values, h)
    } else {
        r.windows(2)
            .zip(values.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }
}

/// `∫_disk f` from nodal values.
pub fn grid_integral(grid: &DiskGrid, values: &[f64]) -> f64 {
    quadrature_weights(grid)
        .iter()
        .zip(values)
        .map(|(w, v)| w * v)
        .sum()
}

const FIT_EXPONENTS: [(i32, i32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// Nodal quadrature weights for the disk, exact for quadratic integrands.
///
/// Each lattice cell `[x ± h/2] × [y ± h/2]` meeting the disk is owned by
/// the nearest node. The integrand on the cell is the least-squares quadratic
/// through the owner's 5×5 window, integrated exactly over the cell ∩ disk.
pub fn quadrature_weights(grid: &DiskGrid) -> Vec<f64> {
    let h = grid.h();
    let index: HashMap<[i64; 2], usize> = (0..grid.len()).map(|i| (grid.lattice_index(i), i)).collect();
    let mut projectors: HashMap<usize, (Vec<usize>, DMatrix<f64>)> = HashMap::new();
    let mut weights = vec![0.0; grid.len()];
    let m = (1.0 / h).ceil() as i64 + 1;
    let spec = QuadratureSpec::new(1e-15, 1e-13, 60).expect("valid quadrature spec");
    for j in -m..=m {
        for i in -m..=m {
            let (cx, cy) = (i as f64 * h, j as f64 * h);
            let (a, b, c, d) = (cx - 0.5 * h, cx + 0.5 * h, cy - 0.5 * h, cy + 0.5 * h);
            let nearest_x = 0.0f64.clamp(a, b);
            let nearest_y = 0.0f64.clamp(c, d);
            if nearest_x.hypot(nearest_y) >= 1.0 {
                continue;
            }
            let owner = match index.get(&[i, j]) {
                Some(&o) => o,
                None => nearest_node(grid, &index, [i, j]),
            };
            let [ox, oy] = grid.node(owner);
            let moments = cell_moments([a, b, c, d], [ox, oy], h, &spec);
            let (window, proj) = projectors
                .entry(owner)
                .or_insert_with(|| fit_projector(grid, &index, owner));
            for (l, &node) in window.iter().enumerate() {
                let contrib: f64 = (0..6).map(|k| moments[k] * proj[(k, l)]).sum();
                weights[node] += contrib;
            }
        }
    }
    weights
}

fn nearest_node(grid: &DiskGrid, index: &HashMap<[i64; 2], usize>, at: [i64; 2]) -> usize {
    let mut best = None;
    for radius in 1..=4i64 {
        for dj in -radius..=radius {
            for di in -radius..=radius {
                if let Some(&k) = index.get(&[at[0] + di, at[1] + dj]) {
                    let dist = di * di + dj * dj;
                    if best.is_none_or(|(bd, _)| dist < bd) {
                        best = Some((dist, k));
                    }
                }
            }
        }
        if let Some((_, k)) = best {
            return k;
        }
    }
    // Unreachable for grids built by build_disk_grid; fall back to a full scan.
    let h = grid.h();
    let (x, y) = (at[0] as f64 * h, at[1] as f64 * h);
    (0..grid.len())
        .min_by(|&p, &q| {
            let dp = (grid.node(p)[0] - x).hypot(grid.node(p)[1] - y);
            let dq = (grid.node(q)[0] - x).hypot(grid.node(q)[1] - y);
            dp.total_cmp(&dq)
        })
        .unwrap_or(0)
}

/// Window nodes and the 6×m least-squares projector onto
/// `{1, ξ, ζ, ξ², ξζ, ζ²}`, `ξ = (x − x_o)/h`.
fn fit_projector(grid: &DiskGrid, index: &HashMap<[i64; 2], usize>, owner: usize) -> (Vec<usize>, DMatrix<f64>) {
    let [oi, oj] = grid.lattice_index(owner);
    for reach in 2..=4i64 {
        let mut window = Vec::new();
        for dj in -reach..=reach {
            for di in -reach..=reach {
                if let Some(&k) = index.get(&[oi + di, oj + dj]) {
                    window.push((k, di as f64, dj as f64));
                }
            }
        }
        let a = DMatrix::from_fn(window.len(), 6, |r, c| {
            let (_, xi, zeta) = window[r];
            let (p, q) = FIT_EXPONENTS[c];
            xi.powi(p) * zeta.powi(q)
        });
        let normal = a.transpose() * &a;
        if let Some(inv) = normal.clone().cholesky().map(|ch| ch.inverse()) {
            let proj = inv * a.transpose();
            return (window.into_iter().map(|(k, _, _)| k).collect(), proj);
        }
    }
    // Degenerate windows do not occur for h < 1/4; fall back to the owner's value.
    let mut proj = DMatrix::zeros(6, 1);
    proj[(0, 0)] = 1.0;
    (vec![owner], proj)
}

fn power_integral(k: i32, lo: f64, hi: f64) -> f64 {
    (hi.powi(k + 1) - lo.powi(k + 1)) / (k + 1) as f64
}

/// `∫_{cell ∩ disk} ξ^p ζ^q dA` for the six fit monomials.
fn cell_moments(cell: [f64; 4], origin: [f64; 2], h: f64, spec: &QuadratureSpec) -> [f64; 6] {
    let [a, b, c, d] = cell;
    let [ox, oy] = origin;
    let corners_inside = [(a, c), (a, d), (b, c), (b, d)]
        .iter()
        .all(|&(x, y)| x.hypot(y) <= 1.0);
    if corners_inside {
        return std::array::from_fn(|k| {
            let (p, q) = FIT_EXPONENTS[k];
            h * h * power_integral(p, (a - ox) / h, (b - ox) / h) * power_integral(q, (c - oy) / h, (d - oy) / h)
        });
    }
    // Integrate along the axis whose range stays off ±1, so the circle is a
    // smooth graph over it.
    let swap = a <= -1.0 || b >= 1.0;
    let (o0, o1, i0, i1, oo, io) = if swap {
        (c, d, a, b, oy, ox)
    } else {
        (a, b, c, d, ox, oy)
    };
    let lo = o0.max(-1.0);
    let hi = o1.min(1.0);
    let mut cuts = vec![lo, hi];
    for bound in [i0, i1] {
        if bound.abs() < 1.0 {
            let t = (1.0 - bound * bound).sqrt();
            for cut in [-t, t] {
                if cut > lo && cut < hi {
                    cuts.push(cut);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    std::array::from_fn(|k| {
        let (p, q) = FIT_EXPONENTS[k];
        let (po, pi) = if swap { (q, p) } else { (p, q) };
        let inner = |t: f64| {
            let s = (1.0 - t * t).max(0.0).sqrt();
            let (l, u) = (i0.max(-s), i1.min(s));
            if u <= l {
                return 0.0;
            }
            ((t - oo) / h).powi(po) * h * power_integral(pi, (l - io) / h, (u - io) / h)
        };
        cuts.windows(2)
            .map(|w| {
                integrate(inner, w[0], w[1], spec)
                    .or_else(|_| integrate(inner, w[0], w[1], &QuadratureSpec::default()))
                    .unwrap_or(f64::NAN)
            })
            .sum::<f64>()
    })
}

/// Directional Euler–Lagrange check of a radial solution.
///
/// The system is stationary for
/// `E(v) = |S^{n−1}| [∫_0^1 (−f g^p/p − log det D²u) r^{n−1} dr + ψ g(1)^n / n]`;
/// for `f = −1` this is `J_p` plus the boundary term carried by the second
/// boundary condition. Each direction `η` with `η(1) = 0` must not lower `E`
/// by more than `tol` while `v + εη` stays convex.
pub fn euler_lagrange_check(sol: &RadialSolution, tol: f64) -> Result<VerificationReport> {
    type Direction = (&'static str, fn(f64) -> f64, fn(f64) -> f64);
    let directions: [Direction; 3] = [
        ("1-r^2", |r| -2.0 * r, |_| -2.0),
        ("(1-r^2)^2", |r| -4.0 * r * (1.0 - r * r), |r| -4.0 + 12.0 * r * r),
        ("r^2(1-r^2)", |r| 2.0 * r - 4.0 * r.powi(3), |r| 2.0 - 12.0 * r * r),
    ];
    let r = sol.radii();
    if r.first() != Some(&0.0) || (r[r.len() - 1] - 1.0).abs() > 1e-12 {
        return Err(VerifyError::InvalidData("radial samples must span [0, 1]".into()));
    }
    if let Some(s) = sol.samples.iter().find(|s| !(s.det > 0.0)) {
        return Err(VerifyError::InvalidData(format!("det = {} at r = {}", s.det, s.r)));
    }
    let n = sol.problem.n;
    let g: Vec<f64> = sol.slopes();
    let gp: Vec<f64> = sol
        .samples
        .iter()
        .map(|s| {
            if s.r == 0.0 {
                s.det.powf(1.0 / n as f64)
            } else {
                (s.r / s.slope).powi(n as i32 - 1) * s.det
            }
        })
        .collect();
    let base = el_functional(&sol.problem, &r, &g, &gp);
    let mut checks = Vec::new();
    for (name, d1, d2) in directions {
        for eps in [1e-2, -1e-2, 1e-3, -1e-3] {
            let ge: Vec<f64> = r.iter().zip(&g).map(|(&ri, gi)| gi + eps * d1(ri)).collect();
            let gpe: Vec<f64> = r.iter().zip(&gp).map(|(&ri, gi)| gi + eps * d2(ri)).collect();
            let convex = gpe.iter().all(|&v| v > 0.0) && r.iter().zip(&ge).all(|(&ri, &gi)| ri == 0.0 || gi > 0.0);
            if !convex {
                continue;
            }
            let delta = el_functional(&sol.problem, &r, &ge, &gpe) - base;
            checks.push(Check::at_least(format!("el[{name}, {eps:+e}]"), delta, -tol));
        }
    }
    Ok(VerificationReport::new(checks))
}

fn el_functional(problem: &RadialProblem, r: &[f64], g: &[f64], gp: &[f64]) -> f64 {
    let n = problem.n;
    let (p, f) = (problem.p, problem.f_sign.value());
    let values: Vec<f64> = (0..r.len())
        .map(|k| {
            if r[k] == 0.0 {
                return 0.0;
            }
            let log_det = gp[k].ln() + (n as f64 - 1.0) * (g[k] / r[k]).ln();
            (-f * g[k].abs().powf(p) / p - log_det) * r[k].powi(n as i32 - 1)
        })
        .collect();
    let g1 = g[g.len() - 1];
    sphere_area(n) * (radial_integral(r, &values) + problem.psi * g1.powi(n as i32) / n as f64)
}

/// Boundary points for extremal searches: stencil points plus a uniform sweep.
fn boundary_samples(grid: &DiskGrid) -> Vec<[f64; 2]> {
    let mut pts = grid.boundary_points();
    pts.extend((0..720).map(|k| {
        let t = 2.0 * PI * k as f64 / 720.0;
        [t.cos(), t.sin()]
    }));
    pts
}

/// Sup norm of a coefficient over nodes and the boundary samples.
fn coefficient_sup(f: &Coefficient, grid: &DiskGrid) -> f64 {
    match f {
        Coefficient::Constant(c) => c.abs(),
        Coefficient::Field(_) => grid
            .nodes()
            .iter()
            .chain(boundary_samples(grid).iter())
            .fold(0.0f64, |m, x| m.max(f.at(x).abs())),
    }
}

/// Maximum-principle audits of a converged solution; audits that do not
/// apply to `model` are left out.
pub fn check_max_principles(sol: &GridSolution, model: &RhsModel) -> VerificationReport {
    let tol = -10.0 * sol.config.outer_tol;
    let grid = &sol.grid;
    let bpts = boundary_samples(grid);
    let psi: Vec<f64> = bpts.iter().map(|&[x, y]| sol.w.boundary_value(x, y)).collect();
    let psi_min = psi.iter().copied().fold(f64::INFINITY, f64::min);
    let psi_max = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = &sol.w.values;
    let w_min = w.iter().copied().fold(f64::INFINITY, f64::min);
    let w_max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r2 = |i: usize| {
        let [x, y] = grid.node(i);
        x * x + y * y
    };
    let mut checks = Vec::new();
    if model.nonpositive_on_convex() == Some(true) {
        checks.push(Check::at_least("min_principle_w", w_min - psi_min, tol));
    }
    if model.nonnegative_on_convex() == Some(true) {
        checks.push(Check::at_least("max_principle_w", psi_max - w_max, tol));
    }
    if matches!(model, RhsModel::Newton { .. }) {
        let interior = (0..grid.len()).map(|i| w[i] + r2(i)).fold(f64::NEG_INFINITY, f64::max);
        checks.push(Check::at_least("newton_barrier", psi_max + 1.0 - interior, tol));
    }
    if let RhsModel::LaplacianScaled { f } = model {
        let half = 0.5 * coefficient_sup(f, grid);
        let interior = (0..grid.len()).map(|i| w[i] - half * r2(i)).fold(f64::INFINITY, f64::min);
        checks.push(Check::at_least("size_barrier", interior - (psi_min - half), tol));
    }
    VerificationReport::new(checks)
}

/// `∫ [F(u) − F(v)] (u − v) dx` for fields agreeing on the circle.
pub fn check_monotonicity_f(model: &RhsModel, u: &GridField, v: &GridField, grid: &DiskGrid) -> Result<f64> {
    for [x, y] in boundary_samples(grid) {
        let (a, b) = (u.boundary_value(x, y), v.boundary_value(x, y));
        if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
            return Err(VerifyError::Mismatch(format!("u = {a}, v = {b} at boundary point ({x}, {y})")));
        }
    }
    if u.values.len() != grid.len() || v.values.len() != grid.len() {
        return Err(VerifyError::InvalidData("field length does not match grid".into()));
    }
    let eval = |field: &GridField, i: usize| -> Result<f64> {
        let state: PointState = crate::grid::discrete_state(field, grid, i)?;
        Ok(rhs_evaluate(model, &state, &grid.node(i))?.value)
    };
    let mut integrand = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        integrand.push((eval(u, i)? - eval(v, i)?) * (u.values[i] - v.values[i]));
    }
    Ok(grid_integral(grid, &integrand))
}

/// Sup errors of `(u, w)` and the energy gap against a radial reference.
pub fn cross_validate(sol: &GridSolution, reference: &RadialSolution, tol: f64) -> Result<VerificationReport> {
    check_reference(&sol.model, sol.u.boundary_fn(), sol.w.boundary_fn(), reference).map_err(|e| match e {
        GridError::ReferenceMismatch(m) => VerifyError::Mismatch(m),
        other => other.into(),
    })?;
    let (eu, ew) = radial_errors(sol, reference)?;
    let p = reference.problem.p;
    let gap = (energy_jp(EnergyData::Grid(sol), p)? - energy_jp(EnergyData::Radial(reference), p)?).abs();
    Ok(VerificationReport::new(vec![
        Check::at_most("error_u", eu, tol),
        Check::at_most("error_w", ew, tol),
        Check::at_most("energy_gap", gap, tol),
    ]))
}
