//! Finite differences on the unit disk for the coupled system
//! `U^{ij} w_ij = F`, `w = 1/det D²u`, with `u = φ`, `w = ψ` on the circle.
//!
//! Nodes are the lattice points `h·(i, j)` inside the disk. Every node sees
//! eight neighbours (axes and diagonals); a neighbour outside the disk is
//! replaced by the point where that grid line meets the circle.
//! Second derivatives along each line use the nonuniform three-point rule
//! and `u_xy = (D²_{NE} − D²_{NW}) / 2`.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::MonotoneCubic;
use crate::operators::{rhs_evaluate, OperatorError, PointState, RhsModel};
use crate::radial::RadialSolution;
use crate::verify::{check_max_principles, VerificationReport};

/// Axis and diagonal directions, paired as (E, W), (N, S), (NE, SW), (NW, SE).
pub const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (-1, -1),
    (-1, 1),
    (1, -1),
];

/// Lattice points this close to the circle are treated as lying on it.
const ON_CIRCLE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("grid too coarse: {0}")]
    TooCoarse(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("linear solve failed: {message}")]
    LinearSolve {
        message: String,
        worst_node: Option<usize>,
        residual: f64,
    },
    #[error("Newton iteration stagnated after {iterations} steps (residual {residual:e})")]
    NewtonStagnation {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },
    #[error("outer loop did not converge in {iterations} iterations (last update {last:e})")]
    OuterDivergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },
    #[error("reference mismatch: {0}")]
    ReferenceMismatch(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

pub type Result<T> = std::result::Result<T, GridError>;

pub type BoundaryFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

pub fn constant_boundary(c: f64) -> BoundaryFn {
    Arc::new(move |_, _| c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Neighbor {
    Interior(usize),
    /// Grid line meets the circle at `frac` of a full step, at `(x, y)`.
    Boundary { frac: f64, x: f64, y: f64 },
}

#[derive(Debug, Clone)]
pub struct DiskGrid {
    h: f64,
    nodes: Vec<[f64; 2]>,
    lattice: Vec<[i64; 2]>,
    neighbors: Vec<[Neighbor; 8]>,
    /// Per node and direction pair: weights (center, forward, backward) of the second derivative.
    second: Vec<[[f64; 3]; 4]>,
    /// Same for the first derivative along x and y.
    first: Vec<[[f64; 3]; 2]>,
}

fn nonuniform_weights(a: f64, b: f64) -> ([f64; 3], [f64; 3]) {
    let s = a + b;
    let second = [-2.0 / (a * b), 2.0 / (a * s), 2.0 / (b * s)];
    let first = [(a - b) / (a * b), b / (a * s), -a / (b * s)];
    (second, first)
}

/// Builds the lattice of spacing `h` on the unit disk.
pub fn build_disk_grid(h: f64) -> Result<DiskGrid> {
    if !(h > 0.0 && h < 0.25) {
        return Err(GridError::TooCoarse(format!("need 0 < h < 1/4, got {h}")));
    }
    let limit = 1.0 - ON_CIRCLE;
    let m = (1.0 / h).ceil() as i64;
    let mut lattice = Vec::new();
    let mut index = HashMap::new();
    for j in -m..=m {
        for i in -m..=m {
            let (x, y) = (i as f64 * h, j as f64 * h);
            if x.hypot(y) < limit {
                index.insert((i, j), lattice.len());
                lattice.push([i, j]);
            }
        }
    }
    if lattice.len() < 9 {
        return Err(GridError::TooCoarse(format!(
            "h = {h} leaves only {} interior nodes",
            lattice.len()
        )));
    }
    let nodes: Vec<[f64; 2]> = lattice
        .iter()
        .map(|&[i, j]| [i as f64 * h, j as f64 * h])
        .collect();
    let mut neighbors = Vec::with_capacity(nodes.len());
    let mut second = Vec::with_capacity(nodes.len());
    let mut first = Vec::with_capacity(nodes.len());
    for (k, &[i, j]) in lattice.iter().enumerate() {
        let [x, y] = nodes[k];
        let nb: [Neighbor; 8] = std::array::from_fn(|d| {
            let (di, dj) = DIRECTIONS[d];
            match index.get(&(i + di, j + dj)) {
                Some(&idx) => Neighbor::Interior(idx),
                None => {
                    let (dx, dy) = (di as f64 * h, dj as f64 * h);
                    let qa = dx * dx + dy * dy;
                    let qb = 2.0 * (x * dx + y * dy);
                    let qc = x * x + y * y - 1.0;
                    let t = ((-qb + (qb * qb - 4.0 * qa * qc).sqrt()) / (2.0 * qa)).min(1.0);
                    let (bx, by) = (x + t * dx, y + t * dy);
                    let r = bx.hypot(by);
                    Neighbor::Boundary {
                        frac: t,
                        x: bx / r,
                        y: by / r,
                    }
                }
            }
        });
        let frac = |d: usize| match nb[d] {
            Neighbor::Interior(_) => 1.0,
            Neighbor::Boundary { frac, .. } => frac,
        };
        let mut sec = [[0.0; 3]; 4];
        let mut fst = [[0.0; 3]; 2];
        for pair in 0..4 {
            let len = if pair < 2 { h } else { h * 2f64.sqrt() };
            let (s, f) = nonuniform_weights(frac(2 * pair) * len, frac(2 * pair + 1) * len);
            sec[pair] = s;
            if pair < 2 {
                fst[pair] = f;
            }
        }
        neighbors.push(nb);
        second.push(sec);
        first.push(fst);
    }
    Ok(DiskGrid {
        h,
        nodes,
        lattice,
        neighbors,
        second,
        first,
    })
}

impl DiskGrid {
    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> [f64; 2] {
        self.nodes[i]
    }

    pub fn lattice_index(&self, i: usize) -> [i64; 2] {
        self.lattice[i]
    }

    pub fn neighbors(&self, i: usize) -> &[Neighbor; 8] {
        &self.neighbors[i]
    }

    /// Every circle point used by some stencil.
    pub fn boundary_points(&self) -> Vec<[f64; 2]> {
        self.neighbors
            .iter()
            .flatten()
            .filter_map(|n| match *n {
                Neighbor::Boundary { x, y, .. } => Some([x, y]),
                Neighbor::Interior(_) => None,
            })
            .collect()
    }

    pub fn is_near_boundary(&self, i: usize) -> bool {
        self.neighbors[i]
            .iter()
            .any(|n| matches!(n, Neighbor::Boundary { .. }))
    }

    /// Field values at the centre and the eight neighbours of node `i`.
    pub(crate) fn gather(&self, values: &[f64], boundary: &dyn Fn(f64, f64) -> f64, i: usize) -> [f64; 9] {
        let mut s = [0.0; 9];
        s[0] = values[i];
        for (d, nb) in self.neighbors[i].iter().enumerate() {
            s[d + 1] = match *nb {
                Neighbor::Interior(j) => values[j],
                Neighbor::Boundary { x, y, .. } => boundary(x, y),
            };
        }
        s
    }

    fn second_along(&self, i: usize, pair: usize, s: &[f64; 9]) -> f64 {
        let w = &self.second[i][pair];
        w[0] * s[0] + w[1] * s[1 + 2 * pair] + w[2] * s[2 + 2 * pair]
    }

    /// `(u_xx, u_yy, u_xy)` from gathered values.
    pub(crate) fn hessian(&self, i: usize, s: &[f64; 9]) -> [f64; 3] {
        [
            self.second_along(i, 0, s),
            self.second_along(i, 1, s),
            0.5 * (self.second_along(i, 2, s) - self.second_along(i, 3, s)),
        ]
    }

    pub(crate) fn gradient(&self, i: usize, s: &[f64; 9]) -> [f64; 2] {
        std::array::from_fn(|pair| {
            let w = &self.first[i][pair];
            w[0] * s[0] + w[1] * s[1 + 2 * pair] + w[2] * s[2 + 2 * pair]
        })
    }

}

/// Nodal values of a function on the disk with its Dirichlet data.
#[derive(Clone)]
pub struct GridField {
    pub values: Vec<f64>,
    boundary: BoundaryFn,
}

impl std::fmt::Debug for GridField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridField")
            .field("len", &self.values.len())
            .finish_non_exhaustive()
    }
}

impl GridField {
    pub fn new(values: Vec<f64>, boundary: BoundaryFn) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::InvalidArgument(format!("non-finite value at node {i}")));
        }
        Ok(Self { values, boundary })
    }

    /// Samples `f` at the nodes and uses it as boundary data too.
    pub fn from_fn(grid: &DiskGrid, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        let f: BoundaryFn = Arc::new(f);
        let values = grid.nodes.iter().map(|&[x, y]| f(x, y)).collect();
        Self { values, boundary: f }
    }

    pub fn constant(grid: &DiskGrid, c: f64) -> Self {
        Self {
            values: vec![c; grid.len()],
            boundary: constant_boundary(c),
        }
    }

    pub fn boundary_fn(&self) -> &BoundaryFn {
        &self.boundary
    }

    pub fn boundary_value(&self, x: f64, y: f64) -> f64 {
        (self.boundary)(x, y)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            boundary: self.boundary.clone(),
        }
    }

    fn check_len(&self, grid: &DiskGrid) -> Result<()> {
        if self.values.len() == grid.len() {
            Ok(())
        } else {
            Err(GridError::InvalidArgument(format!(
                "field has {} values, grid has {} nodes",
                self.values.len(),
                grid.len()
            )))
        }
    }
}

/// Discrete gradient, Hessian, determinant and cofactor at an interior node.
pub fn discrete_state(u: &GridField, grid: &DiskGrid, node: usize) -> Result<PointState> {
    u.check_len(grid)?;
    if node >= grid.len() {
        return Err(GridError::InvalidArgument(format!("node {node} out of range")));
    }
    let s = grid.gather(&u.values, u.boundary.as_ref(), node);
    let [hxx, hyy, hxy] = grid.hessian(node, &s);
    let g = grid.gradient(node, &s);
    Ok(PointState::new(
        DVector::from_row_slice(&g),
        DMatrix::from_row_slice(2, 2, &[hxx, hxy, hxy, hyy]),
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub damping: f64,
    pub outer_tol: f64,
    pub max_outer: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    pub convexity_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            outer_tol: 1e-10,
            max_outer: 200,
            newton_tol: 1e-10,
            max_newton: 50,
            convexity_floor: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("outer_tol", self.outer_tol),
            ("newton_tol", self.newton_tol),
            ("convexity_floor", self.convexity_floor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(GridError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(GridError::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_outer == 0 || self.max_newton == 0 {
            return Err(GridError::InvalidArgument("iteration limits must be positive".into()));
        }
        Ok(())
    }
}

/// Symmetric 2×2 `[a, d, b]` (xx, yy, xy) with eigenvalues raised to `floor`.
fn clip_hessian(hs: [f64; 3], floor: f64) -> ([f64; 3], bool) {
    let [a, d, b] = hs;
    let m = 0.5 * (a + d);
    let r = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    let (lo, hi) = (m - r, m + r);
    if lo >= floor {
        return (hs, false);
    }
    if r == 0.0 {
        return ([floor, floor, 0.0], true);
    }
    let (lo_c, hi_c) = (lo.max(floor), hi.max(floor));
    // Spectral projectors P_hi = (H − lo I)/(2r), P_lo = (hi I − H)/(2r).
    let p_hi = [(a - lo) / (2.0 * r), (d - lo) / (2.0 * r), b / (2.0 * r)];
    let p_lo = [(hi - a) / (2.0 * r), (hi - d) / (2.0 * r), -b / (2.0 * r)];
    (
        std::array::from_fn(|k| hi_c * p_hi[k] + lo_c * p_lo[k]),
        true,
    )
}

/// Assembles `a11 D_xx + a22 D_yy + 2 a12 D_xy` row by row; boundary slots
/// are moved into the returned vector.
fn assemble(
    grid: &DiskGrid,
    coeffs: &[[f64; 3]],
    boundary: &dyn Fn(f64, f64) -> f64,
) -> (Vec<Vec<(usize, f64)>>, Vec<f64>) {
    let mut rows = Vec::with_capacity(grid.len());
    let mut bvals = vec![0.0; grid.len()];
    for i in 0..grid.len() {
        let [a11, a22, a12] = coeffs[i];
        let sw = &grid.second[i];
        let mut slot = [0.0; 9];
        let pair_coef = [a11, a22, a12, -a12];
        for (pair, &c) in pair_coef.iter().enumerate() {
            slot[0] += c * sw[pair][0];
            slot[1 + 2 * pair] += c * sw[pair][1];
            slot[2 + 2 * pair] += c * sw[pair][2];
        }
        let mut row = Vec::with_capacity(9);
        row.push((i, slot[0]));
        for (d, nb) in grid.neighbors[i].iter().enumerate() {
            match *nb {
                Neighbor::Interior(j) => row.push((j, slot[d + 1])),
                Neighbor::Boundary { x, y, .. } => bvals[i] += slot[d + 1] * boundary(x, y),
            }
        }
        rows.push(row);
    }
    (rows, bvals)
}

fn row_residual(rows: &[Vec<(usize, f64)>], x: &[f64], b: &[f64]) -> Vec<f64> {
    rows.iter()
        .zip(b)
        .map(|(row, bi)| bi - row.iter().map(|&(j, a)| a * x[j]).sum::<f64>())
        .collect()
}

/// Sparse LU solve of `rows · x = b` after row equilibration, with one step
/// of iterative refinement. Returns `x` and the worst scaled residual.
fn solve_sparse(mut rows: Vec<Vec<(usize, f64)>>, mut b: Vec<f64>) -> Result<(Vec<f64>, f64, usize)> {
    let n = rows.len();
    for (row, bi) in rows.iter_mut().zip(b.iter_mut()) {
        let scale = row.iter().fold(0.0f64, |m, &(_, a)| m.max(a.abs()));
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(GridError::LinearSolve {
                message: "zero or non-finite row in assembly".into(),
                worst_node: None,
                residual: f64::NAN,
            });
        }
        for e in row.iter_mut() {
            e.1 /= scale;
        }
        *bi /= scale;
    }
    let triplets: Vec<Triplet<usize, usize, f64>> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&(j, a)| Triplet::new(i, j, a)))
        .collect();
    let fail = |message: String| GridError::LinearSolve {
        message,
        worst_node: None,
        residual: f64::NAN,
    };
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| fail(format!("{e:?}")))?;
    let lu = mat.sp_lu().map_err(|e| fail(format!("{e:?}")))?;
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| b[i]);
    lu.solve_in_place(rhs.as_mut());
    let mut x: Vec<f64> = (0..n).map(|i| rhs[(i, 0)]).collect();
    let r = row_residual(&rows, &x, &b);
    let mut corr = Mat::<f64>::from_fn(n, 1, |i, _| r[i]);
    lu.solve_in_place(corr.as_mut());
    for (i, xi) in x.iter_mut().enumerate() {
        *xi += corr[(i, 0)];
    }
    let r = row_residual(&rows, &x, &b);
    let (worst, res) = r
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(k, m), (i, v)| if v.abs() > m || v.is_nan() { (i, v.abs()) } else { (k, m) });
    if x.iter().any(|v| !v.is_finite()) || !res.is_finite() {
        return Err(GridError::LinearSolve {
            message: "singular or ill-conditioned assembly".into(),
            worst_node: Some(worst),
            residual: res,
        });
    }
    Ok((x, res, worst))
}

/// Safeguarded Hessians `(H̃, clipped)` of `u` at every node.
fn clipped_hessians(u: &GridField, grid: &DiskGrid, floor: f64) -> (Vec<[f64; 3]>, usize) {
    let mut clipped = 0;
    let hs = (0..grid.len())
        .map(|i| {
            let s = grid.gather(&u.values, u.boundary.as_ref(), i);
            let (h, c) = clip_hessian(grid.hessian(i, &s), floor);
            clipped += c as usize;
            h
        })
        .collect();
    (hs, clipped)
}

fn cofactor_coeffs(hs: &[[f64; 3]]) -> Vec<[f64; 3]> {
    hs.iter().map(|&[a, d, b]| [d, a, -b]).collect()
}

fn solve_with_coeffs(
    grid: &DiskGrid,
    coeffs: &[[f64; 3]],
    rhs: &[f64],
    bc: &BoundaryFn,
    tol: f64,
) -> Result<(Vec<f64>, f64)> {
    let (rows, bvals) = assemble(grid, coeffs, bc.as_ref());
    let b: Vec<f64> = rhs.iter().zip(&bvals).map(|(f, g)| f - g).collect();
    let (x, res, worst) = solve_sparse(rows, b)?;
    if res > tol {
        return Err(GridError::LinearSolve {
            message: format!("residual {res:e} exceeds {tol:e}"),
            worst_node: Some(worst),
            residual: res,
        });
    }
    Ok((x, res))
}

/// Solves `U^{ij} w_ij = rhs` with `w = ψ` on the circle, `U` the cofactor
/// of the safeguarded discrete Hessian of `u`.
pub fn solve_linearized_ma(
    u: &GridField,
    rhs: &GridField,
    psi_bc: &BoundaryFn,
    grid: &DiskGrid,
    config: &SolverConfig,
) -> Result<GridField> {
    config.validate()?;
    u.check_len(grid)?;
    rhs.check_len(grid)?;
    let (hs, _) = clipped_hessians(u, grid, config.convexity_floor);
    let (w, _) = solve_with_coeffs(grid, &cofactor_coeffs(&hs), &rhs.values, psi_bc, config.newton_tol)?;
    GridField::new(w, psi_bc.clone())
}

/// Harmonic extension of boundary data into the disk.
pub fn harmonic_extension(bc: &BoundaryFn, grid: &DiskGrid) -> Result<GridField> {
    let coeffs = vec![[1.0, 1.0, 0.0]; grid.len()];
    let (x, _) = solve_with_coeffs(grid, &coeffs, &vec![0.0; grid.len()], bc, 1e-9)?;
    GridField::new(x, bc.clone())
}

/// A convex function with boundary values `φ`: the harmonic extension plus
/// `c(|x|² − 1)/2`, with `c` large enough that `det D²u ≥ max 1/w`.
pub fn convex_extension(phi_bc: &BoundaryFn, w: &GridField, grid: &DiskGrid) -> Result<GridField> {
    let harm = harmonic_extension(phi_bc, grid)?;
    let hmax = (0..grid.len())
        .map(|i| {
            let [a, d, b] = grid.hessian(i, &grid.gather(&harm.values, phi_bc.as_ref(), i));
            (0.25 * (a - d) * (a - d) + b * b).sqrt() + 0.5 * (a + d).abs()
        })
        .fold(0.0f64, f64::max);
    let inv_w = w.values.iter().fold(0.0f64, |m, &v| m.max(1.0 / v));
    let c = inv_w.sqrt() + hmax;
    let values = grid
        .nodes
        .iter()
        .zip(&harm.values)
        .map(|(&[x, y], hv)| hv + 0.5 * c * (x * x + y * y - 1.0))
        .collect();
    GridField::new(values, phi_bc.clone())
}

/// Result of a Monge–Ampère Newton solve.
#[derive(Debug, Clone)]
pub struct MongeAmpereSolve {
    pub u: GridField,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    /// Nodes whose Hessian was clipped at the final iterate.
    pub clipped_nodes: usize,
}

/// Residual `det H̃ − 1/w` with `H = base + D²v`, `v = 0` on the circle.
fn ma_residual(
    base: &[[f64; 3]],
    v: &[f64],
    w: &[f64],
    grid: &DiskGrid,
    floor: f64,
) -> (Vec<f64>, Vec<[f64; 3]>, usize) {
    let zero = |_: f64, _: f64| 0.0;
    let mut clipped = 0;
    let mut r = Vec::with_capacity(grid.len());
    let mut hs = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let dv = grid.hessian(i, &grid.gather(v, &zero, i));
        let raw = std::array::from_fn(|k| base[i][k] + dv[k]);
        let (h, c) = clip_hessian(raw, floor);
        clipped += c as usize;
        let [a, d, b] = h;
        r.push(a * d - b * b - 1.0 / w[i]);
        hs.push(h);
    }
    (r, hs, clipped)
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Damped Newton iteration for `det D²u = 1/w`, `u = φ` on the circle.
pub fn solve_monge_ampere(
    w: &GridField,
    phi_bc: &BoundaryFn,
    grid: &DiskGrid,
    config: &SolverConfig,
    init: &GridField,
) -> Result<MongeAmpereSolve> {
    config.validate()?;
    w.check_len(grid)?;
    init.check_len(grid)?;
    if let Some(i) = w.values.iter().position(|&v| !(v > 0.0)) {
        return Err(GridError::Precondition(format!(
            "w must be positive, got {} at node {i}",
            w.values[i]
        )));
    }
    let floor = config.convexity_floor;
    // Newton runs on the correction v = u − init, which vanishes on the circle,
    // so short boundary arms do not amplify the rounding of u itself.
    let base: Vec<[f64; 3]> = (0..grid.len())
        .map(|i| grid.hessian(i, &grid.gather(&init.values, phi_bc.as_ref(), i)))
        .collect();
    let mut v = vec![0.0; grid.len()];
    let (mut r, mut hs, mut clipped) = ma_residual(&base, &v, &w.values, grid, floor);
    let mut res = sup(&r);
    let mut history = vec![res];
    let mut iterations = 0;
    let zero: BoundaryFn = constant_boundary(0.0);
    while res > config.newton_tol {
        if iterations == config.max_newton {
            return Err(GridError::NewtonStagnation {
                iterations,
                residual: res,
                history,
            });
        }
        iterations += 1;
        let neg_r: Vec<f64> = r.iter().map(|x| -x).collect();
        let (delta, _) = solve_with_coeffs(grid, &cofactor_coeffs(&hs), &neg_r, &zero, f64::INFINITY)?;
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = v.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            let (tr, ths, tc) = ma_residual(&base, &trial, &w.values, grid, floor);
            let tres = sup(&tr);
            if tres.is_finite() && (tres <= (1.0 - 1e-4 * lambda) * res || tres <= config.newton_tol) {
                accepted = Some((trial, tr, ths, tc, tres));
                break;
            }
            lambda *= 0.5;
        }
        let Some((nv, nr, nhs, nc, nres)) = accepted else {
            return Err(GridError::NewtonStagnation {
                iterations,
                residual: res,
                history,
            });
        };
        v = nv;
        r = nr;
        hs = nhs;
        clipped = nc;
        res = nres;
        history.push(res);
    }
    let values = init.values.iter().zip(&v).map(|(a, b)| a + b).collect();
    let u = GridField::new(values, phi_bc.clone())?;
    Ok(MongeAmpereSolve {
        u,
        iterations,
        residual_history: history,
        clipped_nodes: clipped,
    })
}

/// Diagnostics of a coupled solve.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub outer_iterations: usize,
    /// `max |u^{k+1} − u^k|` per outer iteration.
    pub outer_history: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    /// Final Monge–Ampère residual per outer iteration.
    pub ma_residuals: Vec<f64>,
    /// Scaled linearized-MA residual per outer iteration.
    pub lma_residuals: Vec<f64>,
    /// Nodes clipped by the convexity safeguard at the final iterate.
    pub clipped_nodes: usize,
    /// Nodes where the p-Laplacian gradient singularity was regularised.
    pub regularized_nodes: usize,
    /// Clamp activity per node at the final iterate, for clamped models.
    pub clamp_active: Option<Vec<bool>>,
    pub max_principles: Option<VerificationReport>,
}

impl SolveReport {
    pub fn clamp_active_count(&self) -> Option<usize> {
        self.clamp_active
            .as_ref()
            .map(|m| m.iter().filter(|&&a| a).count())
    }
}

#[derive(Debug, Clone)]
pub struct GridSolution {
    pub grid: DiskGrid,
    pub model: RhsModel,
    pub u: GridField,
    pub w: GridField,
    pub report: SolveReport,
    pub config: SolverConfig,
}

impl GridSolution {
    /// Discrete determinant of `D²u` at every node (unclipped).
    pub fn determinants(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| {
                let [a, d, b] = self
                    .grid
                    .hessian(i, &self.grid.gather(&self.u.values, self.u.boundary.as_ref(), i));
                a * d - b * b
            })
            .collect()
    }

    /// `max |det D²u · w − 1|` over the nodes.
    pub fn consistency_defect(&self) -> f64 {
        self.determinants()
            .iter()
            .zip(&self.w.values)
            .fold(0.0f64, |m, (d, w)| m.max((d * w - 1.0).abs()))
    }
}

/// Evaluates the right-hand side on the safeguarded discrete states of `u`.
fn evaluate_rhs(
    model: &RhsModel,
    u: &GridField,
    grid: &DiskGrid,
    floor: f64,
) -> Result<(Vec<f64>, usize, Option<Vec<bool>>)> {
    let (hs, _) = clipped_hessians(u, grid, floor);
    let mut values = Vec::with_capacity(grid.len());
    let mut regularized = 0;
    let mut clamp = matches!(model, RhsModel::Clamped { .. }).then(Vec::new);
    for (i, &[a, d, b]) in hs.iter().enumerate() {
        let s = grid.gather(&u.values, u.boundary.as_ref(), i);
        let g = grid.gradient(i, &s);
        let state = PointState::new(
            DVector::from_row_slice(&g),
            DMatrix::from_row_slice(2, 2, &[a, b, b, d]),
        )?;
        let e = rhs_evaluate(model, &state, &grid.nodes[i])?;
        values.push(e.value);
        regularized += e.regularized as usize;
        if let (Some(map), Some(active)) = (clamp.as_mut(), e.clamp_active) {
            map.push(active);
        }
    }
    Ok((values, regularized, clamp))
}

/// Outer damped fixed-point loop for the coupled system.
pub fn solve_coupled(
    model: &RhsModel,
    phi_bc: &BoundaryFn,
    psi_bc: &BoundaryFn,
    grid: &DiskGrid,
    config: &SolverConfig,
) -> Result<GridSolution> {
    config.validate()?;
    model.validate(2)?;
    let w0 = harmonic_extension(psi_bc, grid)?;
    if let Some(i) = w0.values.iter().position(|&v| !(v > 0.0)) {
        return Err(GridError::Precondition(format!(
            "extension of psi is not positive at node {i}"
        )));
    }
    let init = convex_extension(phi_bc, &w0, grid)?;
    let mut u = solve_monge_ampere(&w0, phi_bc, grid, config, &init)?.u;
    let mut report = SolveReport::default();
    for k in 0..config.max_outer {
        let (f, regularized, clamp) = evaluate_rhs(model, &u, grid, config.convexity_floor)?;
        let (hs, _) = clipped_hessians(&u, grid, config.convexity_floor);
        let (wv, lres) = solve_with_coeffs(grid, &cofactor_coeffs(&hs), &f, psi_bc, config.newton_tol)?;
        if let Some(i) = wv.iter().position(|&v| !(v > 0.0)) {
            return Err(GridError::Precondition(format!(
                "linearized solve produced w = {:e} at node {i} in outer iteration {k}",
                wv[i]
            )));
        }
        let w = GridField::new(wv, psi_bc.clone())?;
        let ma = solve_monge_ampere(&w, phi_bc, grid, config, &u)?;
        let theta = config.damping;
        let step = ma
            .u
            .values
            .iter()
            .zip(&u.values)
            .fold(0.0f64, |m, (s, o)| m.max(theta * (s - o).abs()));
        report.outer_iterations = k + 1;
        report.outer_history.push(step);
        report.newton_iterations.push(ma.iterations);
        report.ma_residuals.push(*ma.residual_history.last().unwrap_or(&f64::NAN));
        report.lma_residuals.push(lres);
        report.regularized_nodes = regularized;
        report.clamp_active = clamp;
        report.clipped_nodes = ma.clipped_nodes;
        if step <= config.outer_tol {
            report.converged = true;
            let mut sol = GridSolution {
                grid: grid.clone(),
                model: model.clone(),
                u: ma.u,
                w,
                report,
                config: *config,
            };
            sol.report.max_principles = Some(check_max_principles(&sol, model));
            return Ok(sol);
        }
        let mixed = ma
            .u
            .values
            .iter()
            .zip(&u.values)
            .map(|(s, o)| theta * s + (1.0 - theta) * o)
            .collect();
        u = u.with_values(mixed);
    }
    Err(GridError::OuterDivergence {
        iterations: config.max_outer,
        last: *report.outer_history.last().unwrap_or(&f64::NAN),
        history: report.outer_history,
    })
}

/// One row of a refinement study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub h: f64,
    pub nodes: usize,
    pub error_u: Option<f64>,
    pub error_w: Option<f64>,
    pub order_u: Option<f64>,
    pub order_w: Option<f64>,
    pub outer_iterations: Option<usize>,
    pub failure: Option<String>,
}

/// Sup-norm errors of `(u, w)` against a radial reference interpolated in `r`.
pub fn radial_errors(sol: &GridSolution, reference: &RadialSolution) -> Result<(f64, f64)> {
    let r = reference.radii();
    let v: Vec<f64> = reference.samples.iter().map(|s| s.v).collect();
    let w: Vec<f64> = reference.samples.iter().map(|s| s.w).collect();
    let iv = MonotoneCubic::new(r.clone(), v).map_err(|e| GridError::ReferenceMismatch(e.to_string()))?;
    let iw = MonotoneCubic::new(r, w).map_err(|e| GridError::ReferenceMismatch(e.to_string()))?;
    let mut eu = 0.0f64;
    let mut ew = 0.0f64;
    for (i, &[x, y]) in sol.grid.nodes.iter().enumerate() {
        let rr = x.hypot(y);
        eu = eu.max((sol.u.values[i] - iv.eval(rr)).abs());
        ew = ew.max((sol.w.values[i] - iw.eval(rr)).abs());
    }
    Ok((eu, ew))
}

/// Checks that boundary data and model match the radial reference problem.
pub fn check_reference(
    model: &RhsModel,
    phi_bc: &BoundaryFn,
    psi_bc: &BoundaryFn,
    reference: &RadialSolution,
) -> Result<()> {
    use crate::operators::Coefficient;
    let p = &reference.problem;
    if p.n != 2 {
        return Err(GridError::ReferenceMismatch(format!("reference has n = {}, grid is 2D", p.n)));
    }
    for k in 0..64 {
        let t = 2.0 * PI * k as f64 / 64.0;
        let (x, y) = (t.cos(), t.sin());
        let (ps, ph) = (psi_bc(x, y), phi_bc(x, y));
        if (ps - p.psi).abs() > 1e-12 * p.psi.max(1.0) {
            return Err(GridError::ReferenceMismatch(format!("psi = {ps} on the circle, reference {}", p.psi)));
        }
        if (ph - p.phi).abs() > 1e-12 * p.phi.abs().max(1.0) {
            return Err(GridError::ReferenceMismatch(format!("phi = {ph} on the circle, reference {}", p.phi)));
        }
    }
    let sign = p.f_sign.value();
    let matches = match model {
        RhsModel::LaplacianScaled { f: Coefficient::Constant(c) } => p.p == 2.0 && *c == sign,
        RhsModel::PLaplacian { p: q, f: Coefficient::Constant(c) } => *q == p.p && *c == sign,
        _ => false,
    };
    if matches {
        Ok(())
    } else {
        Err(GridError::ReferenceMismatch(format!(
            "{model:?} is not the radial problem (p = {}, f = {sign})",
            p.p
        )))
    }
}

/// Solves on each mesh width concurrently and tabulates errors against the
/// radial reference with observed orders between consecutive rows.
pub fn convergence_study(
    model: &RhsModel,
    phi_bc: &BoundaryFn,
    psi_bc: &BoundaryFn,
    h_list: &[f64],
    config: &SolverConfig,
    reference: &RadialSolution,
) -> Result<Vec<StudyRow>> {
    check_reference(model, phi_bc, psi_bc, reference)?;
    config.validate()?;
    let outcomes: Vec<Result<(usize, usize, f64, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = h_list
            .iter()
            .map(|&h| {
                scope.spawn(move || {
                    let grid = build_disk_grid(h)?;
                    let sol = solve_coupled(model, phi_bc, psi_bc, &grid, config)?;
                    let (eu, ew) = radial_errors(&sol, reference)?;
                    Ok((grid.len(), sol.report.outer_iterations, eu, ew))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(GridError::InvalidArgument("worker panicked".into())))
            })
            .collect()
    });
    let mut rows: Vec<StudyRow> = h_list
        .iter()
        .zip(outcomes)
        .map(|(&h, out)| match out {
            Ok((nodes, it, eu, ew)) => StudyRow {
                h,
                nodes,
                error_u: Some(eu),
                error_w: Some(ew),
                order_u: None,
                order_w: None,
                outer_iterations: Some(it),
                failure: None,
            },
            Err(e) => StudyRow {
                h,
                nodes: 0,
                error_u: None,
                error_w: None,
                order_u: None,
                order_w: None,
                outer_iterations: None,
                failure: Some(e.to_string()),
            },
        })
        .collect();
    let order = |e0: Option<f64>, e1: Option<f64>, h0: f64, h1: f64| match (e0, e1) {
        (Some(a), Some(b)) => Some((a / b).ln() / (h0 / h1).ln()),
        _ => None,
    };
    for k in 1..rows.len() {
        let (h0, h1) = (rows[k - 1].h, rows[k].h);
        rows[k].order_u = order(rows[k - 1].error_u, rows[k].error_u, h0, h1);
        rows[k].order_w = order(rows[k - 1].error_w, rows[k].error_w, h0, h1);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Sign;
    use crate::radial::{RadialProblem, RadialSolver};

    fn radius2(x: f64, y: f64) -> f64 {
        x * x + y * y
    }

    #[test]
    fn coarse_grid_is_refused() {
        assert!(matches!(build_disk_grid(0.5), Err(GridError::TooCoarse(_))));
        assert!(build_disk_grid(0.0).is_err());
        assert!(build_disk_grid(-0.1).is_err());
    }

    #[test]
    fn node_count_tracks_area() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let expected = PI * 256.0;
        assert!(((g.len() as f64) - expected).abs() < 0.1 * expected, "{}", g.len());
    }

    #[test]
    fn stencil_invariants() {
        let g = build_disk_grid(1.0 / 20.0).unwrap();
        for i in 0..g.len() {
            let [x, y] = g.node(i);
            assert!(x.hypot(y) < 1.0);
            for (d, nb) in g.neighbors(i).iter().enumerate() {
                match *nb {
                    Neighbor::Interior(j) => {
                        let (di, dj) = DIRECTIONS[d];
                        assert_eq!(g.lattice_index(j), [g.lattice_index(i)[0] + di, g.lattice_index(i)[1] + dj]);
                        // The reverse direction points back.
                        assert_eq!(g.neighbors(j)[d ^ 1], Neighbor::Interior(i));
                    }
                    Neighbor::Boundary { frac, x, y } => {
                        assert!(frac > 0.0 && frac <= 1.0);
                        assert!((x.hypot(y) - 1.0).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn quadratics_are_differentiated_exactly() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let u = GridField::from_fn(&g, |x, y| x * x + y * y + 0.3 * x - 0.2 * y);
        let v = GridField::from_fn(&g, |x, y| x * y);
        for i in 0..g.len() {
            let [x, y] = g.node(i);
            let s = discrete_state(&u, &g, i).unwrap();
            assert!((s.hess[(0, 0)] - 2.0).abs() < 1e-9);
            assert!((s.hess[(1, 1)] - 2.0).abs() < 1e-9);
            assert!(s.hess[(0, 1)].abs() < 1e-9);
            assert!((s.grad[0] - (2.0 * x + 0.3)).abs() < 1e-10);
            assert!((s.grad[1] - (2.0 * y - 0.2)).abs() < 1e-10);
            let t = discrete_state(&v, &g, i).unwrap();
            assert!((t.hess[(0, 1)] - 1.0).abs() < 1e-9);
        }
    }

    fn smooth_hessian_error(h: f64) -> f64 {
        let g = build_disk_grid(h).unwrap();
        let u = GridField::from_fn(&g, |x, y| x.sin() * y.cos());
        (0..g.len())
            .filter(|&i| {
                let [x, y] = g.node(i);
                x.hypot(y) < 0.5
            })
            .map(|i| {
                let [x, y] = g.node(i);
                let s = discrete_state(&u, &g, i).unwrap();
                let exact = [-x.sin() * y.cos(), -x.sin() * y.cos(), -x.cos() * y.sin()];
                (s.hess[(0, 0)] - exact[0])
                    .abs()
                    .max((s.hess[(1, 1)] - exact[1]).abs())
                    .max((s.hess[(0, 1)] - exact[2]).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn hessian_is_second_order_in_the_interior() {
        let e1 = smooth_hessian_error(1.0 / 32.0);
        let e2 = smooth_hessian_error(1.0 / 64.0);
        assert!(e1 < 1e-3);
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn near_boundary_hessian_is_consistent() {
        let mut prev = f64::INFINITY;
        for h in [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0] {
            let g = build_disk_grid(h).unwrap();
            let u = GridField::from_fn(&g, |x, y| (x + 2.0 * y).exp() / 10.0);
            let err = (0..g.len())
                .filter(|&i| g.is_near_boundary(i))
                .map(|i| {
                    let [x, y] = g.node(i);
                    let s = discrete_state(&u, &g, i).unwrap();
                    let e = (x + 2.0 * y).exp() / 10.0;
                    (s.hess[(0, 0)] - e).abs().max((s.hess[(1, 1)] - 4.0 * e).abs()).max((s.hess[(0, 1)] - 2.0 * e).abs())
                })
                .fold(0.0, f64::max);
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn clip_hessian_raises_small_eigenvalues() {
        let (h, c) = clip_hessian([2.0, 3.0, 0.5], 1e-8);
        assert!(!c);
        assert_eq!(h, [2.0, 3.0, 0.5]);
        let (h, c) = clip_hessian([1.0, -1.0, 0.0], 0.1);
        assert!(c);
        assert!((h[0] - 1.0).abs() < 1e-15 && (h[1] - 0.1).abs() < 1e-15 && h[2].abs() < 1e-15);
        let (h, c) = clip_hessian([1.0, 1.0, 1.0], 1e-3);
        assert!(c);
        let lo = 0.5 * (h[0] + h[1]) - (0.25 * (h[0] - h[1]).powi(2) + h[2] * h[2]).sqrt();
        assert!((lo - 1e-3).abs() < 1e-12);
        assert!((h[0] + h[1] - (2.0 + 1e-3)).abs() < 1e-12);
    }

    #[test]
    fn linearized_constant_solution() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let u = GridField::from_fn(&g, |x, y| x.exp() + x * y + y * y);
        let w = solve_linearized_ma(&u, &GridField::constant(&g, 0.0), &constant_boundary(1.0), &g, &cfg).unwrap();
        assert!(w.values.iter().all(|v| (v - 1.0).abs() < cfg.newton_tol));
    }

    #[test]
    fn linearized_quadratic_is_exact() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let u = GridField::from_fn(&g, |x, y| 0.5 * radius2(x, y));
        let psi: BoundaryFn = Arc::new(|x, y| 1.0 + radius2(x, y));
        let w = solve_linearized_ma(&u, &GridField::constant(&g, 4.0), &psi, &g, &cfg).unwrap();
        for (i, &[x, y]) in g.nodes().iter().enumerate() {
            assert!((w.values[i] - 1.0 - radius2(x, y)).abs() < 1e-12);
        }
    }

    #[test]
    fn linearized_minimum_principle() {
        let g = build_disk_grid(1.0 / 24.0).unwrap();
        let cfg = SolverConfig::default();
        for u in [
            GridField::from_fn(&g, |x, y| x.exp() + y * y),
            GridField::from_fn(&g, |x, y| 0.5 * radius2(x, y) + 0.25 * radius2(x, y).powi(2)),
        ] {
            let rhs = GridField::from_fn(&g, |x, y| -(1.0 + (3.0 * x).sin() * (2.0 * y).cos()).abs());
            let w = solve_linearized_ma(&u, &rhs, &constant_boundary(1.0), &g, &cfg).unwrap();
            let min = w.values.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(min >= 1.0 - 10.0 * cfg.newton_tol, "{min}");
        }
    }

    #[test]
    fn monge_ampere_paraboloid_from_extension() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let w = GridField::constant(&g, 1.0);
        let phi = constant_boundary(0.5);
        let init = convex_extension(&phi, &w, &g).unwrap();
        let out = solve_monge_ampere(&w, &phi, &g, &cfg, &init).unwrap();
        assert!(out.iterations <= 3);
        for (i, &[x, y]) in g.nodes().iter().enumerate() {
            assert!((out.u.values[i] - 0.5 * radius2(x, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn monge_ampere_constant_w() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let psi = 2.5;
        let w = GridField::constant(&g, psi);
        let phi = constant_boundary(0.0);
        // Start away from the solution.
        let init = GridField::from_fn(&g, |x, y| 2.0 * (radius2(x, y) - 1.0) + 0.1 * (x * x - 1.0 + y * y) * x);
        let out = solve_monge_ampere(&w, &phi, &g, &cfg, &init).unwrap();
        for (i, &[x, y]) in g.nodes().iter().enumerate() {
            let exact = (radius2(x, y) - 1.0) / (2.0 * psi.sqrt());
            assert!((out.u.values[i] - exact).abs() < 1e-9);
        }
        assert_eq!(out.clipped_nodes, 0);
    }

    #[test]
    fn monge_ampere_rejects_nonpositive_w() {
        let g = build_disk_grid(1.0 / 8.0).unwrap();
        let mut w = GridField::constant(&g, 1.0);
        w.values[3] = -0.1;
        let phi = constant_boundary(0.0);
        let init = GridField::from_fn(&g, |x, y| radius2(x, y) - 1.0);
        assert!(matches!(
            solve_monge_ampere(&w, &phi, &g, &SolverConfig::default(), &init),
            Err(GridError::Precondition(_))
        ));
    }

    #[test]
    fn monge_ampere_reports_stagnation() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig {
            max_newton: 1,
            ..SolverConfig::default()
        };
        let w = GridField::from_fn(&g, |x, y| 1.0 + x * x + 0.5 * y);
        let init = GridField::from_fn(&g, |x, y| 3.0 * (radius2(x, y) - 1.0));
        match solve_monge_ampere(&w, &constant_boundary(0.0), &g, &cfg, &init) {
            Err(GridError::NewtonStagnation { history, .. }) => assert!(history.len() >= 2),
            other => panic!("expected stagnation, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let base = SolverConfig::default();
        assert!(base.validate().is_ok());
        assert!(SolverConfig { damping: 0.0, ..base }.validate().is_err());
        assert!(SolverConfig { damping: 1.5, ..base }.validate().is_err());
        assert!(SolverConfig { outer_tol: -1.0, ..base }.validate().is_err());
        assert!(SolverConfig { convexity_floor: 0.0, ..base }.validate().is_err());
        assert!(SolverConfig { max_outer: 0, ..base }.validate().is_err());
    }

    #[test]
    fn coupled_zero_rhs() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_coupled(
            &RhsModel::laplacian_scaled(0.0),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &g,
            &cfg,
        )
        .unwrap();
        assert!(sol.report.converged);
        for (i, &[x, y]) in g.nodes().iter().enumerate() {
            assert!((sol.w.values[i] - 1.0).abs() < 1e-10);
            assert!((sol.u.values[i] - 0.5 * (radius2(x, y) - 1.0)).abs() < 1e-9);
        }
        assert!(sol.consistency_defect() <= 10.0 * cfg.newton_tol);
    }

    #[test]
    fn coupled_laplacian_rhs() {
        let g = build_disk_grid(1.0 / 16.0).unwrap();
        let cfg = SolverConfig::default();
        let sol = solve_coupled(
            &RhsModel::laplacian_scaled(1.0),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &g,
            &cfg,
        )
        .unwrap();
        for (i, &[x, y]) in g.nodes().iter().enumerate() {
            assert!((sol.w.values[i] - 0.5 * (1.0 + radius2(x, y))).abs() < 1e-9);
        }
        assert!(sol.consistency_defect() <= 10.0 * cfg.newton_tol);
        assert!(sol.determinants().iter().all(|&d| d > 0.0));
        let mp = sol.report.max_principles.as_ref().unwrap();
        assert!(mp.passed, "{mp:?}");
        let last = *sol.report.outer_history.last().unwrap();
        assert!(last <= cfg.outer_tol);
    }

    #[test]
    fn coupled_outer_failure_is_reported() {
        let g = build_disk_grid(1.0 / 8.0).unwrap();
        let cfg = SolverConfig {
            max_outer: 2,
            damping: 0.1,
            ..SolverConfig::default()
        };
        let r = solve_coupled(
            &RhsModel::laplacian_scaled(1.0),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &g,
            &cfg,
        );
        match r {
            Err(GridError::OuterDivergence { iterations, history, .. }) => {
                assert_eq!(iterations, 2);
                assert_eq!(history.len(), 2);
            }
            other => panic!("expected divergence report, got {other:?}"),
        }
    }

    fn reference(sign: Sign, psi: f64) -> RadialSolution {
        let solver = RadialSolver::default();
        let problem = RadialProblem::new(2, 2.0, sign, psi, 0.0).unwrap();
        let roots = solver.solve_compatibility(&problem, 10.0, 1e-3).unwrap().roots;
        solver.solve_profile(&problem, roots[0], 513).unwrap()
    }

    #[test]
    fn study_single_row_has_no_order() {
        let rows = convergence_study(
            &RhsModel::laplacian_scaled(1.0),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &[1.0 / 8.0],
            &SolverConfig::default(),
            &reference(Sign::Plus, 1.0),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].order_w.is_none() && rows[0].order_u.is_none());
        assert!(rows[0].error_w.unwrap() < 1e-9);
        assert!(rows[0].error_u.unwrap() < 2e-2);
    }

    #[test]
    fn study_rejects_mismatched_reference() {
        let bad_psi = convergence_study(
            &RhsModel::laplacian_scaled(1.0),
            &constant_boundary(0.0),
            &constant_boundary(2.0),
            &[1.0 / 8.0],
            &SolverConfig::default(),
            &reference(Sign::Plus, 1.0),
        );
        assert!(matches!(bad_psi, Err(GridError::ReferenceMismatch(_))));
        let bad_model = convergence_study(
            &RhsModel::laplacian_scaled(-1.0),
            &constant_boundary(0.0),
            &constant_boundary(1.0),
            &[1.0 / 8.0],
            &SolverConfig::default(),
            &reference(Sign::Plus, 1.0),
        );
        assert!(matches!(bad_model, Err(GridError::ReferenceMismatch(_))));
    }
}
