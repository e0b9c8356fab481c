//! Low-level numerical kernels shared by the radial and grid solvers.
//!
//! Everything here is a pure function of its inputs. Quadrature is a globally
//! adaptive Gauss–Kronrod (7/15) scheme; root finding is a bracket-preserving
//! false-position/bisection hybrid whose final bracket width is guaranteed.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default absolute and relative quadrature tolerance.
pub const DEFAULT_QUAD_TOL: f64 = 1e-12;
/// Default bracket width for root finding.
pub const DEFAULT_ROOT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("non-finite input or intermediate value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "quadrature on [{a}, {b}] did not reach tolerance within max_depth {max_depth} \
         (estimate {estimate:e}, error {error:e})"
    )]
    ToleranceNotReached {
        a: f64,
        b: f64,
        max_depth: u32,
        estimate: f64,
        error: f64,
    },
    #[error("no bracket: f({lo}) = {f_lo:e} and f({hi}) = {f_hi:e} have the same sign")]
    NoBracket {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },
    #[error("target {target:e} outside [{f_lo:e}, {f_hi:e}]")]
    TargetOutOfRange { target: f64, f_lo: f64, f_hi: f64 },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Sign of the exponential kernel, `f ∈ {−1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "-1")]
    Minus,
    #[serde(rename = "+1")]
    Plus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }
}

impl std::str::FromStr for Sign {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "+1" | "1" | "+" | "plus" => Ok(Sign::Plus),
            "-1" | "-" | "minus" => Ok(Sign::Minus),
            other => Err(format!("expected +1 or -1, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Sign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sign::Minus => "-1",
            Sign::Plus => "+1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_depth: u32,
}

impl QuadratureSpec {
    pub fn new(abs_tol: f64, rel_tol: f64, max_depth: u32) -> Result<Self> {
        if !(abs_tol > 0.0 && abs_tol.is_finite()) || !(rel_tol > 0.0 && rel_tol.is_finite()) {
            return Err(NumericsError::InvalidArgument(format!(
                "tolerances must be positive, got abs_tol={abs_tol}, rel_tol={rel_tol}"
            )));
        }
        if max_depth < 1 {
            return Err(NumericsError::InvalidArgument("max_depth must be >= 1".into()));
        }
        Ok(Self {
            abs_tol,
            rel_tol,
            max_depth,
        })
    }
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            abs_tol: DEFAULT_QUAD_TOL,
            rel_tol: DEFAULT_QUAD_TOL,
            max_depth: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    lo: f64,
    hi: f64,
}

impl Bracket {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(NumericsError::NonFinite(format!("bracket [{lo}, {hi}]")));
        }
        if lo >= hi {
            return Err(NumericsError::InvalidArgument(format!(
                "bracket requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }
}

// Gauss–Kronrod 7/15 abscissae and weights on [-1, 1].
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

struct Panel {
    a: f64,
    b: f64,
    estimate: f64,
    error: f64,
    depth: u32,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn gauss_kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<(f64, f64)> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    let mut abs_sum = WGK[7] * fc.abs();
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        kronrod += WGK[j] * (f1 + f2);
        abs_sum += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            gauss += WG[j / 2] * (f1 + f2);
        }
    }
    let estimate = kronrod * half;
    if !estimate.is_finite() {
        return Err(NumericsError::NonFinite(format!(
            "integrand on [{a}, {b}] produced {estimate}"
        )));
    }
    // Round-off floor: the rule cannot resolve differences below this.
    let floor = 50.0 * f64::EPSILON * abs_sum * half.abs();
    let error = ((kronrod - gauss) * half).abs().max(floor);
    Ok((estimate, error))
}

/// Globally adaptive Gauss–Kronrod quadrature of `f` over `[a, b]`.
///
/// Fails explicitly when a panel would need to be split beyond
/// `spec.max_depth` levels while the tolerance is still unmet.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, spec: &QuadratureSpec) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(NumericsError::NonFinite(format!("interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    if b < a {
        return integrate(f, b, a, spec).map(|v| -v);
    }
    let (estimate, error) = gauss_kronrod(&f, a, b)?;
    let mut total = estimate;
    let mut total_error = error;
    let mut heap = BinaryHeap::new();
    heap.push(Panel {
        a,
        b,
        estimate,
        error,
        depth: 0,
    });
    loop {
        if total_error <= spec.abs_tol.max(spec.rel_tol * total.abs()) {
            return Ok(total);
        }
        let worst = heap.pop().expect("heap holds at least one panel");
        if worst.depth >= spec.max_depth {
            return Err(NumericsError::ToleranceNotReached {
                a,
                b,
                max_depth: spec.max_depth,
                estimate: total,
                error: total_error,
            });
        }
        let mid = 0.5 * (worst.a + worst.b);
        let (e1, r1) = gauss_kronrod(&f, worst.a, mid)?;
        let (e2, r2) = gauss_kronrod(&f, mid, worst.b)?;
        total += e1 + e2 - worst.estimate;
        total_error += r1 + r2 - worst.error;
        heap.push(Panel {
            a: worst.a,
            b: mid,
            estimate: e1,
            error: r1,
            depth: worst.depth + 1,
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            estimate: e2,
            error: r2,
            depth: worst.depth + 1,
        });
        // Re-sum occasionally so incremental drift never masks convergence.
        if heap.len() % 64 == 0 {
            total = heap.iter().map(|p| p.estimate).sum();
            total_error = heap.iter().map(|p| p.error).sum();
        }
    }
}

fn check_kernel_args(p: f64, m: u32, a: f64, b: f64) -> Result<()> {
    if !p.is_finite() || !a.is_finite() || !b.is_finite() {
        return Err(NumericsError::NonFinite(format!("p={p}, a={a}, b={b}")));
    }
    if p <= 1.0 {
        return Err(NumericsError::InvalidArgument(format!("p must exceed 1, got {p}")));
    }
    if m < 1 {
        return Err(NumericsError::InvalidArgument("m must be >= 1".into()));
    }
    if a < 0.0 || b < a {
        return Err(NumericsError::InvalidArgument(format!(
            "need 0 <= a <= b, got [{a}, {b}]"
        )));
    }
    Ok(())
}

/// `∫_a^b exp(sign·s^p/p) s^(m−1) ds`.
pub fn integrate_kernel(
    sign: Sign,
    p: f64,
    m: u32,
    a: f64,
    b: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    integrate_kernel_scaled(sign, p, m, a, b, 0.0, spec)
}

/// `∫_a^b exp(sign·s^p/p − shift) s^(m−1) ds`.
///
/// The shift lets callers evaluate ratios such as `H(t)·exp(−t^p/p)` without
/// overflowing when `t^p/p` exceeds the exponent range of `f64`.
pub fn integrate_kernel_scaled(
    sign: Sign,
    p: f64,
    m: u32,
    a: f64,
    b: f64,
    shift: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    check_kernel_args(p, m, a, b)?;
    if !shift.is_finite() {
        return Err(NumericsError::NonFinite(format!("shift={shift}")));
    }
    let f = sign.value();
    let power = (m - 1) as i32;
    integrate(
        |s| (f * s.powf(p) / p - shift).exp() * s.powi(power),
        a,
        b,
        spec,
    )
}

/// Bracketed root of a continuous function.
///
/// Alternates false-position steps with bisection whenever two consecutive
/// steps fail to halve the bracket. Terminates once the bracket is narrower
/// than `tol` (or cannot be split further in floating point) and returns the
/// endpoint with the smaller residual.
pub fn find_root_bracketed<F: FnMut(f64) -> f64>(
    mut f: F,
    bracket: Bracket,
    tol: f64,
) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(NumericsError::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let (mut a, mut b) = (bracket.lo, bracket.hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if !fa.is_finite() || !fb.is_finite() {
        return Err(NumericsError::NonFinite(format!("f({a})={fa}, f({b})={fb}")));
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(NumericsError::NoBracket {
            lo: a,
            hi: b,
            f_lo: fa,
            f_hi: fb,
        });
    }
    let mut force_bisect = false;
    let mut width_mark = b - a;
    let mut steps = 0u32;
    while b - a > tol {
        let mid = a + 0.5 * (b - a);
        if mid <= a || mid >= b {
            break;
        }
        let x = if force_bisect {
            mid
        } else {
            let secant = b - fb * (b - a) / (fb - fa);
            let margin = 0.5 * tol;
            if secant.is_finite() && secant > a && secant < b {
                secant.clamp(a + margin, b - margin)
            } else {
                mid
            }
        };
        let fx = f(x);
        if !fx.is_finite() {
            return Err(NumericsError::NonFinite(format!("f({x})={fx}")));
        }
        if fx == 0.0 {
            return Ok(x);
        }
        if fx.signum() == fa.signum() {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
        steps += 1;
        force_bisect = false;
        if steps % 2 == 0 {
            force_bisect = b - a > 0.5 * width_mark;
            width_mark = b - a;
        }
    }
    Ok(if fa.abs() <= fb.abs() { a } else { b })
}

/// Solves `f(t) = target` for a strictly increasing `f` on the bracket.
pub fn invert_monotone<F: FnMut(f64) -> f64>(
    mut f: F,
    target: f64,
    bracket: Bracket,
    tol: f64,
) -> Result<f64> {
    if !target.is_finite() {
        return Err(NumericsError::NonFinite(format!("target={target}")));
    }
    let f_lo = f(bracket.lo);
    let f_hi = f(bracket.hi);
    if !(f_lo <= target && target <= f_hi) {
        return Err(NumericsError::TargetOutOfRange {
            target,
            f_lo,
            f_hi,
        });
    }
    if f_lo == target {
        return Ok(bracket.lo);
    }
    if f_hi == target {
        return Ok(bracket.hi);
    }
    find_root_bracketed(|t| f(t) - target, bracket, tol)
}

/// Cumulative integral of uniformly spaced samples, exact for cubics at
/// even-indexed nodes (composite Simpson) and for quadratics elsewhere.
///
/// Returns `c` with `c[i] ≈ ∫_{x_0}^{x_i}` and `c[0] = 0`.
pub fn cumulative_simpson(ys: &[f64], h: f64) -> Vec<f64> {
    let n = ys.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    if n == 2 {
        out[1] = 0.5 * h * (ys[0] + ys[1]);
        return out;
    }
    for i in 1..n {
        out[i] = if i % 2 == 0 {
            out[i - 2] + h / 3.0 * (ys[i - 2] + 4.0 * ys[i - 1] + ys[i])
        } else if i + 1 < n {
            // Quadratic through (i-1, i, i+1) integrated over [x_{i-1}, x_i].
            out[i - 1] + h / 12.0 * (5.0 * ys[i - 1] + 8.0 * ys[i] - ys[i + 1])
        } else {
            // Last odd interval: quadratic through (i-2, i-1, i) over [x_{i-1}, x_i].
            out[i - 1] + h / 12.0 * (-ys[i - 2] + 8.0 * ys[i - 1] + 5.0 * ys[i])
        };
    }
    out
}

/// Total of [`cumulative_simpson`].
pub fn simpson(ys: &[f64], h: f64) -> f64 {
    cumulative_simpson(ys, h).last().copied().unwrap_or(0.0)
}

/// Shape-preserving piecewise cubic Hermite interpolant (Fritsch–Carlson).
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 || ys.len() != n {
            return Err(NumericsError::InvalidArgument(format!(
                "need >= 2 matching samples, got {} x and {} y",
                xs.len(),
                ys.len()
            )));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(NumericsError::InvalidArgument(
                "abscissae must be strictly increasing".into(),
            ));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                if delta[i - 1] * delta[i] > 0.0 {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    slopes[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(Self { xs, ys, slopes })
    }

    /// Evaluates the interpolant, clamping `x` to the sampled range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        let x = x.clamp(self.xs[0], self.xs[n - 1]);
        let i = match self.xs.partition_point(|&xi| xi <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let t = (x - self.xs[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.ys[i] + h10 * h * self.slopes[i] + h01 * self.ys[i + 1] + h11 * h * self.slopes[i + 1]
    }
}

fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}
