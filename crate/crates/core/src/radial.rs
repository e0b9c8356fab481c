//! Exact radial reduction on the unit ball.
//!
//! A radial solution `u(x) = v(|x|)` with slope `g = v'` is determined by the
//! single scalar `g(1)`, which must solve the compatibility equation
//! `H(g(1)) = I(g(1))` with
//!
//! ```text
//! H(t) = ∫_0^t exp(f s^p / p) s^(n-1) ds,     I(t) = exp(f t^p / p) / (n ψ).
//! ```
//!
//! Given `g(1)`, the slope profile follows from `H(g(r)) = I(g(1)) r^n`, the
//! dual variable from `w = ψ exp(f (g(r)^p − g(1)^p) / p)` and `v` by
//! integrating the slope inward from `v(1) = φ`.
//!
//! To stay inside the `f64` exponent range every comparison between `H` and
//! `I` is made after dividing by `exp(f t^p / p)` when `f = +1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, cumulative_simpson, find_root_bracketed, integrate_kernel, integrate_kernel_scaled,
    invert_monotone, Bracket, NumericsError, QuadratureSpec, Sign,
};

pub const DEFAULT_SCAN_MAX: f64 = 10.0;
pub const DEFAULT_SCAN_STEP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum RadialError {
    #[error("invalid radial problem: {0}")]
    InvalidProblem(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("g(1) = {g1} does not satisfy the compatibility condition (scaled residual {residual:e})")]
    Incompatible { g1: f64, residual: f64 },
    #[error("closed-form root {closed_form} disagrees with scanned root {scanned}")]
    Inconsistent { closed_form: f64, scanned: f64 },
}

pub type Result<T> = std::result::Result<T, RadialError>;

/// Parameters of the radial problem on the unit ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialProblem {
    pub n: usize,
    pub p: f64,
    pub f_sign: Sign,
    pub psi: f64,
    pub phi: f64,
}

impl RadialProblem {
    pub fn new(n: usize, p: f64, f_sign: Sign, psi: f64, phi: f64) -> Result<Self> {
        let problem = Self {
            n,
            p,
            f_sign,
            psi,
            phi,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(RadialError::InvalidProblem(format!("n must be >= 2, got {}", self.n)));
        }
        if !(self.p.is_finite() && self.p > 1.0) {
            return Err(RadialError::InvalidProblem(format!("p must exceed 1, got {}", self.p)));
        }
        if !(self.psi.is_finite() && self.psi > 0.0) {
            return Err(RadialError::InvalidProblem(format!(
                "psi must be positive, got {}",
                self.psi
            )));
        }
        if !self.phi.is_finite() {
            return Err(RadialError::InvalidProblem(format!("phi must be finite, got {}", self.phi)));
        }
        Ok(())
    }

    pub fn regime(&self) -> Regime {
        let n = self.n as f64;
        match self.f_sign {
            Sign::Minus => Regime::FNeg,
            Sign::Plus if self.p < n => Regime::PLtN,
            Sign::Plus if self.p == n => Regime::PEqN,
            Sign::Plus => Regime::PGtN,
        }
    }

    fn inv_n_psi(&self) -> f64 {
        1.0 / (self.n as f64 * self.psi)
    }

    fn closed_form_kernel(&self) -> bool {
        self.f_sign == Sign::Plus && self.p == self.n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "F_NEG")]
    FNeg,
    #[serde(rename = "P_LT_N")]
    PLtN,
    #[serde(rename = "P_EQ_N")]
    PEqN,
    #[serde(rename = "P_GT_N")]
    PGtN,
}

/// Admissible values of `g(1)` for one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityAnalysis {
    pub regime: Regime,
    pub roots: Vec<f64>,
    pub threshold_m: Option<f64>,
    pub scan_max: f64,
    pub scan_step: f64,
    /// Scan points where `H − I` approaches zero without changing sign; a
    /// double root may hide inside one scan step there.
    pub tangency_suspected: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialSample {
    pub r: f64,
    pub slope: f64,
    pub v: f64,
    pub w: f64,
    pub det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialSolution {
    pub problem: RadialProblem,
    pub g1: f64,
    pub samples: Vec<RadialSample>,
}

impl RadialSolution {
    /// Wraps externally produced samples (e.g. re-read from CSV) without
    /// re-solving anything.
    pub fn from_samples(problem: RadialProblem, samples: Vec<RadialSample>) -> Result<Self> {
        problem.validate()?;
        if samples.len() < 2 {
            return Err(RadialError::InvalidArgument("need at least 2 samples".into()));
        }
        if samples.windows(2).any(|w| !(w[1].r > w[0].r)) {
            return Err(RadialError::InvalidArgument("radii must be strictly increasing".into()));
        }
        let g1 = samples.last().map(|s| s.slope).unwrap_or_default();
        Ok(Self {
            problem,
            g1,
            samples,
        })
    }

    pub fn radii(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.r).collect()
    }

    pub fn slopes(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.slope).collect()
    }

    /// Lists violated structural invariants; empty for a genuine solution.
    pub fn invariant_violations(&self, tol: f64) -> Vec<String> {
        let mut out = Vec::new();
        let (first, last) = match (self.samples.first(), self.samples.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return vec!["no samples".into()],
        };
        if first.r == 0.0 && first.slope != 0.0 {
            out.push(format!("slope(0) = {} != 0", first.slope));
        }
        if (last.w - self.problem.psi).abs() > tol * self.problem.psi.max(1.0) {
            out.push(format!("w(1) = {} != psi = {}", last.w, self.problem.psi));
        }
        if (last.v - self.problem.phi).abs() > tol * self.problem.phi.abs().max(1.0) {
            out.push(format!("v(1) = {} != phi = {}", last.v, self.problem.phi));
        }
        for (i, pair) in self.samples.windows(2).enumerate() {
            if pair[1].slope < pair[0].slope {
                out.push(format!("slope decreases at sample {}", i + 1));
            }
        }
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.w > 0.0 && s.det > 0.0) {
                out.push(format!("non-positive w or det at sample {i}"));
            } else if (s.det * s.w - 1.0).abs() > tol {
                out.push(format!("det*w = {} at sample {i}", s.det * s.w));
            }
            if s.slope < 0.0 || s.slope > self.g1 * (1.0 + tol) {
                out.push(format!("slope {} outside [0, g1] at sample {i}", s.slope));
            }
        }
        out
    }
}

/// Tolerances for the radial computations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadialSolver {
    pub quad: QuadratureSpec,
    pub root_tol: f64,
    /// Largest scaled compatibility residual `solve_profile` accepts.
    pub compat_tol: f64,
}

impl Default for RadialSolver {
    fn default() -> Self {
        Self {
            quad: QuadratureSpec::default(),
            root_tol: numerics::DEFAULT_ROOT_TOL,
            compat_tol: 1e-9,
        }
    }
}

impl RadialSolver {
    pub fn kernel_h(&self, t: f64, problem: &RadialProblem) -> Result<f64> {
        check_t(t)?;
        if problem.closed_form_kernel() {
            let n = problem.n as f64;
            return Ok((t.powf(n) / n).exp_m1());
        }
        Ok(integrate_kernel(
            problem.f_sign,
            problem.p,
            problem.n as u32,
            0.0,
            t,
            &self.quad,
        )?)
    }

    /// Right-hand side of the compatibility equation. For `f = −1` this is
    /// `(1 − ∫_0^t e^{−s^p/p} s^{p−1} ds)/(nψ)`, evaluated through the
    /// identity `1 − ∫… = e^{−t^p/p}`.
    pub fn kernel_i(&self, t: f64, problem: &RadialProblem) -> Result<f64> {
        check_t(t)?;
        let value = (problem.f_sign.value() * t.powf(problem.p) / problem.p).exp()
            * problem.inv_n_psi();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(format!("I({t}) overflows")).into());
        }
        Ok(value)
    }

    /// `H(t)·exp(−f t^p / p)` for `f = +1`, `H(t)` for `f = −1`.
    fn scaled_h(&self, t: f64, problem: &RadialProblem) -> Result<f64> {
        match problem.f_sign {
            Sign::Minus => self.kernel_h(t, problem),
            Sign::Plus => {
                if problem.closed_form_kernel() {
                    let n = problem.n as f64;
                    return Ok(-(-t.powf(n) / n).exp_m1());
                }
                let shift = t.powf(problem.p) / problem.p;
                Ok(integrate_kernel_scaled(
                    Sign::Plus,
                    problem.p,
                    problem.n as u32,
                    0.0,
                    t,
                    shift,
                    &self.quad,
                )?)
            }
        }
    }

    fn scaled_i(&self, t: f64, problem: &RadialProblem) -> f64 {
        match problem.f_sign {
            Sign::Minus => (-t.powf(problem.p) / problem.p).exp() * problem.inv_n_psi(),
            Sign::Plus => problem.inv_n_psi(),
        }
    }

    /// `H − I` divided by a positive factor; same sign and zeros as `H − I`.
    pub fn compatibility_residual(&self, t: f64, problem: &RadialProblem) -> Result<f64> {
        Ok(self.scaled_h(t, problem)? - self.scaled_i(t, problem))
    }

    /// `M(n, p) = 1 + e^{1/p} / (n H(1))` for `f = +1`, `p > n`.
    pub fn threshold_m(&self, n: usize, p: f64) -> Result<f64> {
        if n < 2 || !p.is_finite() || p <= n as f64 {
            return Err(RadialError::InvalidArgument(format!(
                "threshold M(n, p) needs n >= 2 and p > n, got n={n}, p={p}"
            )));
        }
        let h1 = integrate_kernel(Sign::Plus, p, n as u32, 0.0, 1.0, &self.quad)?;
        Ok(1.0 + (1.0 / p).exp() / (n as f64 * h1))
    }

    pub fn solve_compatibility(
        &self,
        problem: &RadialProblem,
        scan_max: f64,
        scan_step: f64,
    ) -> Result<CompatibilityAnalysis> {
        problem.validate()?;
        if !(scan_max > 0.0 && scan_max.is_finite()) || !(scan_step > 0.0 && scan_step.is_finite())
        {
            return Err(RadialError::InvalidArgument(format!(
                "scan_max and scan_step must be positive, got {scan_max}, {scan_step}"
            )));
        }
        let regime = problem.regime();
        let mut analysis = CompatibilityAnalysis {
            regime,
            roots: Vec::new(),
            threshold_m: None,
            scan_max,
            scan_step,
            tangency_suspected: Vec::new(),
        };
        match regime {
            Regime::FNeg => {
                // H increases from 0 while I decreases from 1/(nψ) to 0.
                let hi = self.expand_until_positive(problem, scan_max.min(1.0))?;
                analysis.roots.push(self.refine(problem, 0.0, hi)?);
            }
            Regime::PLtN => {
                let scan = self.scan(problem, scan_max, scan_step)?;
                analysis.tangency_suspected = scan.tangency;
                match scan.brackets.first() {
                    Some(&(lo, hi)) => analysis.roots.push(self.refine(problem, lo, hi)?),
                    None => {
                        let hi = self.expand_until_positive(problem, scan_max)?;
                        analysis.roots.push(self.refine(problem, 0.0, hi)?);
                    }
                }
            }
            Regime::PEqN => {
                let n = problem.n as f64;
                let n_psi = n * problem.psi;
                if n_psi > 1.0 {
                    let g1 = (n * (n_psi / (n_psi - 1.0)).ln()).powf(1.0 / n);
                    let scan = self.scan(problem, scan_max, scan_step)?;
                    if let Some(&(lo, hi)) = scan.brackets.first() {
                        let scanned = self.refine(problem, lo, hi)?;
                        if (scanned - g1).abs() > 1e-8 * g1.max(1.0) || scan.brackets.len() > 1 {
                            return Err(RadialError::Inconsistent {
                                closed_form: g1,
                                scanned,
                            });
                        }
                    }
                    analysis.roots.push(g1);
                }
            }
            Regime::PGtN => {
                analysis.threshold_m = Some(self.threshold_m(problem.n, problem.p)?);
                let scan = self.scan(problem, scan_max, scan_step)?;
                analysis.tangency_suspected = scan.tangency;
                for (lo, hi) in scan.brackets {
                    analysis.roots.push(self.refine(problem, lo, hi)?);
                }
            }
        }
        Ok(analysis)
    }

    fn refine(&self, problem: &RadialProblem, lo: f64, hi: f64) -> Result<f64> {
        let mut failure = None;
        let root = find_root_bracketed(
            |t| match self.compatibility_residual(t, problem) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            },
            Bracket::new(lo, hi)?,
            self.root_tol,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(root?)
    }

    fn expand_until_positive(&self, problem: &RadialProblem, start: f64) -> Result<f64> {
        let mut hi = start;
        for _ in 0..64 {
            if self.compatibility_residual(hi, problem)? > 0.0 {
                return Ok(hi);
            }
            hi *= 2.0;
        }
        Err(RadialError::InvalidArgument(format!(
            "no sign change of H - I found up to t = {hi}"
        )))
    }

    /// Uniform scan of the scaled residual, accumulating `H` panel by panel.
    fn scan(&self, problem: &RadialProblem, scan_max: f64, scan_step: f64) -> Result<Scan> {
        let steps = (scan_max / scan_step).ceil() as usize;
        let p = problem.p;
        let mut ts = Vec::with_capacity(steps + 1);
        let mut ds = Vec::with_capacity(steps + 1);
        let mut scaled_h = 0.0;
        let mut t_prev = 0.0;
        ts.push(0.0);
        ds.push(-self.scaled_i(0.0, problem));
        for k in 1..=steps {
            let t = (k as f64 * scan_step).min(scan_max);
            if problem.closed_form_kernel() {
                scaled_h = self.scaled_h(t, problem)?;
            } else {
                match problem.f_sign {
                    Sign::Minus => {
                        scaled_h += integrate_kernel(
                            Sign::Minus,
                            p,
                            problem.n as u32,
                            t_prev,
                            t,
                            &self.quad,
                        )?;
                    }
                    Sign::Plus => {
                        let shift = t.powf(p) / p;
                        let decay = ((t_prev.powf(p) - t.powf(p)) / p).exp();
                        scaled_h = scaled_h * decay
                            + integrate_kernel_scaled(
                                Sign::Plus,
                                p,
                                problem.n as u32,
                                t_prev,
                                t,
                                shift,
                                &self.quad,
                            )?;
                    }
                }
            }
            ts.push(t);
            ds.push(scaled_h - self.scaled_i(t, problem));
            t_prev = t;
        }

        let mut scan = Scan::default();
        for k in 1..ts.len() {
            let (d0, d1) = (ds[k - 1], ds[k]);
            if d1 == 0.0 {
                // Exact hit; bracket it with the next point when possible.
                let hi = ts.get(k + 1).copied().unwrap_or(ts[k]);
                if hi > ts[k - 1] {
                    scan.brackets.push((ts[k - 1], hi));
                }
            } else if d0 != 0.0 && d0.signum() != d1.signum() {
                scan.brackets.push((ts[k - 1], ts[k]));
            }
            if k + 1 < ts.len() {
                let d2 = ds[k + 1];
                let same_side = d0.signum() == d1.signum() && d1.signum() == d2.signum();
                let local_min = d1.abs() <= d0.abs() && d1.abs() <= d2.abs();
                let reach = (d2 - d1).abs().max((d1 - d0).abs());
                if same_side && local_min && d1.abs() <= reach {
                    scan.tangency.push(ts[k]);
                }
            }
        }
        scan.brackets.dedup();
        Ok(scan)
    }

    /// Samples the radial solution associated with an admissible `g(1)` on a
    /// uniform grid of `r_samples` radii including both `r = 0` and `r = 1`.
    pub fn solve_profile(
        &self,
        problem: &RadialProblem,
        g1: f64,
        r_samples: usize,
    ) -> Result<RadialSolution> {
        problem.validate()?;
        if r_samples < 2 {
            return Err(RadialError::InvalidArgument(format!(
                "need at least 2 samples, got {r_samples}"
            )));
        }
        if !(g1.is_finite() && g1 > 0.0) {
            return Err(RadialError::InvalidArgument(format!("g1 must be positive, got {g1}")));
        }
        let residual = self.compatibility_residual(g1, problem)?;
        let scale = problem.inv_n_psi().max(1.0);
        if !(residual.abs() <= self.compat_tol * scale) {
            return Err(RadialError::Incompatible { g1, residual });
        }

        let n = problem.n as f64;
        let p = problem.p;
        let f = problem.f_sign.value();
        let last = r_samples - 1;
        let h = 1.0 / last as f64;
        let radii: Vec<f64> = (0..r_samples).map(|i| i as f64 * h).collect();
        let mut slopes = vec![0.0; r_samples];
        slopes[last] = g1;

        if problem.closed_form_kernel() {
            // H(g) = e^{g^n/n} − 1 inverts explicitly.
            let scale = problem.inv_n_psi() * (g1.powf(n) / n).exp();
            for i in 1..last {
                slopes[i] = (n * (scale * radii[i].powf(n)).ln_1p()).powf(1.0 / n);
            }
        } else {
            // Solve ∫_0^g e^{f(s^p − g1^p)/p} s^{n−1} ds = r^n/(nψ) panel by panel.
            let shift = f * g1.powf(p) / p;
            let panel = |lo: f64, g: f64| {
                integrate_kernel_scaled(problem.f_sign, p, problem.n as u32, lo, g, shift, &self.quad)
            };
            // `reached` is the integral at the accepted slope, not the target, so
            // root-finding error does not accumulate across panels.
            let mut reached = 0.0;
            for i in 1..last {
                let target = radii[i].powf(n) * problem.inv_n_psi();
                let lo = slopes[i - 1];
                let mut failure = None;
                let g = invert_monotone(
                    |g| match panel(lo, g) {
                        Ok(v) => v,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    },
                    target - reached,
                    Bracket::new(lo, g1)?,
                    self.root_tol,
                );
                if let Some(e) = failure {
                    return Err(e.into());
                }
                slopes[i] = g?;
                reached += panel(lo, slopes[i])?;
            }
        }

        let integral = cumulative_simpson(&slopes, h);
        let total = integral[last];
        let samples = (0..r_samples)
            .map(|i| {
                let slope = slopes[i];
                let w = problem.psi * (f * (slope.powf(p) - g1.powf(p)) / p).exp();
                RadialSample {
                    r: radii[i],
                    slope,
                    v: if i == last {
                        problem.phi
                    } else {
                        problem.phi - (total - integral[i])
                    },
                    w,
                    det: 1.0 / w,
                }
            })
            .collect();
        Ok(RadialSolution {
            problem: *problem,
            g1,
            samples,
        })
    }

    /// Compatibility analysis followed by one profile per admissible root.
    pub fn solve_all(
        &self,
        problem: &RadialProblem,
        scan_max: f64,
        scan_step: f64,
        r_samples: usize,
    ) -> Result<(CompatibilityAnalysis, Vec<RadialSolution>)> {
        let analysis = self.solve_compatibility(problem, scan_max, scan_step)?;
        let profiles = analysis
            .roots
            .iter()
            .map(|&g1| self.solve_profile(problem, g1, r_samples))
            .collect::<Result<Vec<_>>>()?;
        Ok((analysis, profiles))
    }
}

#[derive(Default)]
struct Scan {
    brackets: Vec<(f64, f64)>,
    tangency: Vec<f64>,
}

fn check_t(t: f64) -> Result<()> {
    if !t.is_finite() {
        return Err(NumericsError::NonFinite(format!("t = {t}")).into());
    }
    if t < 0.0 {
        return Err(RadialError::InvalidArgument(format!("t must be >= 0, got {t}")));
    }
    Ok(())
}

/// Largest mismatch of `e^{f g^p/p} g^{n−1} g' = e^{f g1^p/p} r^{n−1} / ψ` over
/// interior samples, with `g'` from centred differences.
pub fn residual_ode(solution: &RadialSolution) -> Result<f64> {
    let s = &solution.samples;
    if s.len() < 3 {
        return Err(RadialError::InvalidArgument(format!(
            "residual needs at least 3 samples, got {}",
            s.len()
        )));
    }
    let pr = &solution.problem;
    let f = pr.f_sign.value();
    let n1 = (pr.n - 1) as i32;
    let rhs_scale = (f * solution.g1.powf(pr.p) / pr.p).exp() / pr.psi;
    let mut worst: f64 = 0.0;
    for i in 1..s.len() - 1 {
        let dg = (s[i + 1].slope - s[i - 1].slope) / (s[i + 1].r - s[i - 1].r);
        let g = s[i].slope;
        let lhs = (f * g.powf(pr.p) / pr.p).exp() * g.powi(n1) * dg;
        let rhs = rhs_scale * s[i].r.powi(n1);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// Tightest `(c_lo, c_hi)` with `c_lo·r ≤ slope(r) ≤ c_hi·r` over samples with `r > 0`.
pub fn check_linear_growth(solution: &RadialSolution) -> (f64, f64) {
    solution
        .samples
        .iter()
        .filter(|s| s.r > 0.0)
        .map(|s| s.slope / s.r)
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), q| (lo.min(q), hi.max(q)))
}
