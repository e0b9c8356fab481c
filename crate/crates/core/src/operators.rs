//! Pointwise operator algebra: cofactor matrices, elementary symmetric
//! functions, the right-hand-side families and the γ-clamp.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotSpd(f64),
    #[error("index k = {k} out of range for n = {n}")]
    IndexOutOfRange { k: usize, n: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("state is not admissible: {0}")]
    NotAdmissible(String),
    #[error("wrapped F = {0:e} is positive; the clamp needs F <= 0 on convex states")]
    HypothesisViolated(f64),
    #[error("non-finite right-hand side: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, OperatorError>;

const SYMMETRY_TOL: f64 = 1e-12;

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(OperatorError::Dimension(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(OperatorError::NotSymmetric(asym));
    }
    Ok(())
}

/// Cofactor matrix `U^{ij} = ∂ det H / ∂ h_ij`, so that `U·H = det(H)·I`.
///
/// Built from signed minors, which keeps it well defined for singular `H`.
pub fn cofactor(hess: &DMatrix<f64>) -> DMatrix<f64> {
    let n = hess.nrows();
    match n {
        0 => DMatrix::zeros(0, 0),
        1 => DMatrix::from_element(1, 1, 1.0),
        2 => DMatrix::from_row_slice(
            2,
            2,
            &[hess[(1, 1)], -hess[(1, 0)], -hess[(0, 1)], hess[(0, 0)]],
        ),
        _ => DMatrix::from_fn(n, n, |i, j| {
            // Cofactor of entry (j, i) gives the adjugate; for symmetric H the two agree.
            let minor = hess.clone().remove_row(j).remove_column(i);
            let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
            sign * minor.determinant()
        }),
    }
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect()
}

/// `e_k(λ)`, by the usual one-pass recurrence over the eigenvalues.
fn esf_from_eigenvalues(lambda: &[f64], k: usize) -> f64 {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for &l in lambda {
        for j in (1..=k).rev() {
            e[j] += l * e[j - 1];
        }
    }
    e[k]
}

/// Elementary symmetric function `S_k` of the eigenvalues of `hess`.
pub fn elementary_symmetric(hess: &DMatrix<f64>, k: usize) -> Result<f64> {
    check_symmetric(hess)?;
    let n = hess.nrows();
    if k > n {
        return Err(OperatorError::IndexOutOfRange { k, n });
    }
    if k == 0 {
        return Ok(1.0);
    }
    Ok(esf_from_eigenvalues(&symmetric_eigenvalues(hess), k))
}

/// Gradient, Hessian, determinant and cofactor of a function at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointState {
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
    pub det: f64,
    pub cof: DMatrix<f64>,
}

impl PointState {
    pub fn new(grad: DVector<f64>, hess: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&hess)?;
        if grad.len() != hess.nrows() {
            return Err(OperatorError::Dimension(format!(
                "gradient has {} entries, Hessian is {}x{}",
                grad.len(),
                hess.nrows(),
                hess.ncols()
            )));
        }
        let det = hess.determinant();
        let cof = cofactor(&hess);
        Ok(Self {
            grad,
            hess,
            det,
            cof,
        })
    }

    pub fn dim(&self) -> usize {
        self.grad.len()
    }

    pub fn laplacian(&self) -> f64 {
        self.hess.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        symmetric_eigenvalues(&self.hess)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Uniformly convex at this point: positive definite Hessian.
    pub fn is_admissible(&self) -> bool {
        self.det > 0.0 && self.min_eigenvalue() > 0.0
    }

    fn require_admissible(&self) -> Result<()> {
        if self.is_admissible() {
            Ok(())
        } else {
            Err(OperatorError::NotAdmissible(format!(
                "det = {:e}, smallest eigenvalue = {:e}",
                self.det,
                self.min_eigenvalue()
            )))
        }
    }

    /// `(Δu)^{1/(n−1)} (det D²u)^{(n−2)/(n−1)}`, the normalisation of the clamp.
    pub fn newton_scale(&self) -> f64 {
        let n = self.dim() as f64;
        self.laplacian().powf(1.0 / (n - 1.0)) * self.det.powf((n - 2.0) / (n - 1.0))
    }
}

pub type FieldFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type CustomRhsFn = Arc<dyn Fn(&PointState, &[f64]) -> f64 + Send + Sync>;

/// Coefficient `f(x)` of a right-hand side: a constant or a field.
#[derive(Clone)]
pub enum Coefficient {
    Constant(f64),
    Field(FieldFn),
}

impl Coefficient {
    pub fn at(&self, x: &[f64]) -> f64 {
        match self {
            Coefficient::Constant(c) => *c,
            Coefficient::Field(f) => f(x),
        }
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::Constant(c) => write!(f, "Constant({c})"),
            Coefficient::Field(_) => f.write_str("Field(<fn>)"),
        }
    }
}

impl From<f64> for Coefficient {
    fn from(c: f64) -> Self {
        Coefficient::Constant(c)
    }
}

/// Right-hand side `F(x, u, Du, D²u)` of the fourth-order equation.
#[derive(Clone)]
pub enum RhsModel {
    /// `f Δu`.
    LaplacianScaled { f: Coefficient },
    /// `f div(|Du|^{p−2} Du)`, expanded pointwise.
    PLaplacian { p: f64, f: Coefficient },
    /// `−(Δu)^{1/(n−1)} det^{(n−2)/(n−1)} f − S_k^{1/(k(n−1))} det^{(n−2)/(n−1)} g`.
    Newton { f: Coefficient, g: f64, k: usize },
    /// `−(Δu)^{1/(n−1)} det^{(n−2)/(n−1)} f_γ` with
    /// `f_γ = min(−γ F / ((Δu)^{1/(n−1)} det^{(n−2)/(n−1)}), 1)` for the wrapped `F`.
    Clamped { inner: Box<RhsModel>, gamma: f64 },
    /// Any other `F`; the caller is responsible for its hypotheses.
    Custom { name: String, eval: CustomRhsFn },
}

impl fmt::Debug for RhsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RhsModel::LaplacianScaled { f: c } => write!(f, "LaplacianScaled {{ f: {c:?} }}"),
            RhsModel::PLaplacian { p, f: c } => write!(f, "PLaplacian {{ p: {p}, f: {c:?} }}"),
            RhsModel::Newton { f: c, g, k } => write!(f, "Newton {{ f: {c:?}, g: {g}, k: {k} }}"),
            RhsModel::Clamped { inner, gamma } => {
                write!(f, "Clamped {{ inner: {inner:?}, gamma: {gamma} }}")
            }
            RhsModel::Custom { name, .. } => write!(f, "Custom {{ name: {name:?} }}"),
        }
    }
}

/// One evaluation of a right-hand side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhsEval {
    pub value: f64,
    /// The p-Laplacian gradient singularity was regularised at this point.
    pub regularized: bool,
    /// Clamp activity, for clamped models only.
    pub clamp_active: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClampEval {
    pub f_gamma: f64,
    pub ratio: f64,
    pub active: bool,
    pub regularized: bool,
}

impl RhsModel {
    pub fn laplacian_scaled(f: impl Into<Coefficient>) -> Self {
        RhsModel::LaplacianScaled { f: f.into() }
    }

    pub fn p_laplacian(p: f64, f: impl Into<Coefficient>) -> Self {
        RhsModel::PLaplacian { p, f: f.into() }
    }

    pub fn newton(f: impl Into<Coefficient>, g: f64, k: usize) -> Self {
        RhsModel::Newton { f: f.into(), g, k }
    }

    pub fn clamped(inner: RhsModel, gamma: f64) -> Self {
        RhsModel::Clamped {
            inner: Box::new(inner),
            gamma,
        }
    }

    /// Checks parameter ranges for dimension `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            RhsModel::LaplacianScaled { .. } | RhsModel::Custom { .. } => Ok(()),
            RhsModel::PLaplacian { p, .. } => {
                if p.is_finite() && *p > 1.0 {
                    Ok(())
                } else {
                    Err(OperatorError::InvalidModel(format!("p must exceed 1, got {p}")))
                }
            }
            RhsModel::Newton { f, g, k } => {
                if let Coefficient::Constant(c) = f {
                    if !(0.0..=1.0).contains(c) {
                        return Err(OperatorError::InvalidModel(format!(
                            "Newton model needs 0 <= f <= 1, got {c}"
                        )));
                    }
                }
                if !(0.0..=1.0).contains(g) {
                    return Err(OperatorError::InvalidModel(format!(
                        "Newton model needs 0 <= g <= 1, got {g}"
                    )));
                }
                if *k < 1 || *k + 1 > n {
                    return Err(OperatorError::InvalidModel(format!(
                        "Newton model needs 1 <= k <= n-1, got k={k}, n={n}"
                    )));
                }
                Ok(())
            }
            RhsModel::Clamped { inner, gamma } => {
                if !(gamma.is_finite() && *gamma > 0.0) {
                    return Err(OperatorError::InvalidModel(format!(
                        "clamp needs gamma > 0, got {gamma}"
                    )));
                }
                inner.validate(n)
            }
        }
    }

    /// True when `F ≤ 0` on every convex state, so `w` obeys a minimum principle.
    pub fn nonpositive_on_convex(&self) -> Option<bool> {
        match self {
            RhsModel::LaplacianScaled { f: Coefficient::Constant(c) }
            | RhsModel::PLaplacian {
                f: Coefficient::Constant(c),
                ..
            } => Some(*c <= 0.0),
            RhsModel::Newton { .. } | RhsModel::Clamped { .. } => Some(true),
            _ => None,
        }
    }

    /// True when `F ≥ 0` on every convex state, so `w` obeys a maximum principle.
    pub fn nonnegative_on_convex(&self) -> Option<bool> {
        match self {
            RhsModel::LaplacianScaled { f: Coefficient::Constant(c) }
            | RhsModel::PLaplacian {
                f: Coefficient::Constant(c),
                ..
            } => Some(*c >= 0.0),
            RhsModel::Newton { f, g, .. } => {
                Some(matches!(f, Coefficient::Constant(c) if *c == 0.0) && *g == 0.0)
            }
            _ => None,
        }
    }
}

/// Evaluates `F(x, u, Du, D²u)` for the given model.
pub fn rhs_evaluate(model: &RhsModel, state: &PointState, x: &[f64]) -> Result<RhsEval> {
    let n = state.dim();
    model.validate(n)?;
    let mut regularized = false;
    let mut clamp_active = None;
    let value = match model {
        RhsModel::LaplacianScaled { f } => f.at(x) * state.laplacian(),
        RhsModel::PLaplacian { p, f } => {
            let (v, reg) = p_laplacian_pointwise(*p, state);
            regularized = reg;
            f.at(x) * v
        }
        RhsModel::Newton { f, g, k } => {
            state.require_admissible()?;
            let fx = f.at(x);
            if !(0.0..=1.0).contains(&fx) {
                return Err(OperatorError::InvalidModel(format!(
                    "Newton model needs 0 <= f(x) <= 1, got {fx}"
                )));
            }
            let nf = n as f64;
            let kf = *k as f64;
            let det_part = state.det.powf((nf - 2.0) / (nf - 1.0));
            let sk = elementary_symmetric(&state.hess, *k)?;
            -state.laplacian().powf(1.0 / (nf - 1.0)) * det_part * fx
                - sk.powf(1.0 / (kf * (nf - 1.0))) * det_part * g
        }
        RhsModel::Clamped { .. } => {
            let c = rhs_clamped(model, state, x)?;
            regularized = c.regularized;
            clamp_active = Some(c.active);
            -state.newton_scale() * c.f_gamma
        }
        RhsModel::Custom { eval, .. } => eval(state, x),
    };
    if !value.is_finite() {
        return Err(OperatorError::NonFinite(format!("{model:?} at {x:?} gave {value}")));
    }
    Ok(RhsEval {
        value,
        regularized,
        clamp_active,
    })
}

/// `div(|Du|^{p−2} Du) = |Du|^{p−2} [Δu + (p−2) ⟨D²u ν, ν⟩]`, `ν = Du/|Du|`.
fn p_laplacian_pointwise(p: f64, state: &PointState) -> (f64, bool) {
    let lap = state.laplacian();
    if p == 2.0 {
        return (lap, false);
    }
    let norm = state.grad.norm();
    if norm == 0.0 && p > 2.0 {
        return (0.0, false);
    }
    let floor = f64::EPSILON;
    if p < 2.0 && norm < floor {
        // Singular point; |Du| is floored and the direction term dropped when Du = 0.
        let directional = if norm > 0.0 {
            let nu = &state.grad / norm;
            (&state.hess * &nu).dot(&nu)
        } else {
            0.0
        };
        return (floor.powf(p - 2.0) * (lap + (p - 2.0) * directional), true);
    }
    let nu = &state.grad / norm;
    let directional = (&state.hess * &nu).dot(&nu);
    (norm.powf(p - 2.0) * (lap + (p - 2.0) * directional), false)
}

/// The clamp coefficient `f_γ ∈ [0, 1]` of a [`RhsModel::Clamped`] model.
pub fn rhs_clamped(model: &RhsModel, state: &PointState, x: &[f64]) -> Result<ClampEval> {
    let RhsModel::Clamped { inner, gamma } = model else {
        return Err(OperatorError::InvalidModel(format!(
            "rhs_clamped needs a clamped model, got {model:?}"
        )));
    };
    model.validate(state.dim())?;
    let lap = state.laplacian();
    if !(lap > 0.0) || !(state.det > 0.0) {
        return Err(OperatorError::NotAdmissible(format!(
            "clamp needs Δu > 0 and det > 0, got Δu = {lap:e}, det = {:e}",
            state.det
        )));
    }
    let inner_eval = rhs_evaluate(inner, state, x)?;
    if inner_eval.value > 0.0 {
        return Err(OperatorError::HypothesisViolated(inner_eval.value));
    }
    let ratio = -gamma * inner_eval.value / state.newton_scale();
    Ok(ClampEval {
        f_gamma: ratio.min(1.0),
        ratio,
        active: ratio >= 1.0,
        regularized: inner_eval.regularized,
    })
}

/// Relative slacks of `Δu ≥ S_k^{1/k}` and
/// `S_{n−1} ≥ (Δu)^{1/(n−1)} det^{(n−2)/(n−1)}`; both are nonnegative in exact arithmetic.
pub fn trace_inequality_slacks(hess: &DMatrix<f64>, k: usize) -> Result<(f64, f64)> {
    check_symmetric(hess)?;
    let n = hess.nrows();
    if k < 1 || k + 1 > n {
        return Err(OperatorError::IndexOutOfRange { k, n });
    }
    let lambda = symmetric_eigenvalues(hess);
    let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(OperatorError::NotSpd(min));
    }
    let nf = n as f64;
    let lap = hess.trace();
    let sk = esf_from_eigenvalues(&lambda, k).powf(1.0 / k as f64);
    let s_n1 = esf_from_eigenvalues(&lambda, n - 1);
    let det: f64 = lambda.iter().product();
    let rhs01 = lap.powf(1.0 / (nf - 1.0)) * det.powf((nf - 2.0) / (nf - 1.0));
    let rel = |a: f64, b: f64| (a - b) / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    Ok((rel(lap, sk), rel(s_n1, rhs01)))
}

/// Whether each trace inequality holds with relative slack `≥ −1e−12`.
pub fn check_trace_inequalities(hess: &DMatrix<f64>, k: usize) -> Result<(bool, bool)> {
    let (s00, s01) = trace_inequality_slacks(hess, k)?;
    Ok((s00 >= -1e-12, s01 >= -1e-12))
}
