//! Command-line front end.
//!
//! Every command is described by a [`RunConfig`], built from flags and
//! optionally overridden field by field by a JSON file given with `--config`.
//! [`run`] executes one config and maps outcomes to exit statuses: 0 on
//! success (including nonexistence of a radial solution), 1 on solver
//! failure, 2 on invalid input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::grid::{
    build_disk_grid, constant_boundary, convergence_study, solve_coupled, DiskGrid, GridError, GridField,
    GridSolution, SolveReport, SolverConfig,
};
use crate::numerics::Sign;
use crate::operators::{OperatorError, RhsModel};
use crate::radial::{
    check_linear_growth, residual_ode, RadialError, RadialProblem, RadialSample, RadialSolution, RadialSolver,
};
use crate::verify::{
    check_max_principles, energy_jp, euler_lagrange_check, Check, EnergyData, VerificationReport, VerifyError,
};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ABREU_OUT_DIR";

pub const EXIT_OK: u8 = 0;
pub const EXIT_SOLVER: u8 = 1;
pub const EXIT_INVALID: u8 = 2;

const RADIAL_HEADER: [&str; 5] = ["r", "g", "v", "w", "det"];
const GRID_HEADER: [&str; 5] = ["x", "y", "u", "w", "det"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Solver(_) | CliError::Io(_) => EXIT_SOLVER,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Invalid(_) => "invalid_input",
            CliError::Solver(_) => "solver_failure",
            CliError::Io(_) => "io_failure",
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> Value {
        json!({ "status": "error", "kind": self.kind(), "message": self.to_string() })
    }
}

impl From<RadialError> for CliError {
    fn from(e: RadialError) -> Self {
        match e {
            RadialError::InvalidProblem(_) | RadialError::InvalidArgument(_) => CliError::Invalid(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::InvalidArgument(_) | GridError::TooCoarse(_) | GridError::ReferenceMismatch(_) => {
                CliError::Invalid(e.to_string())
            }
            GridError::Operator(ref o) if is_invalid_operator(o) => CliError::Invalid(e.to_string()),
            _ => CliError::Solver(e.to_string()),
        }
    }
}

impl From<OperatorError> for CliError {
    fn from(e: OperatorError) -> Self {
        if is_invalid_operator(&e) {
            CliError::Invalid(e.to_string())
        } else {
            CliError::Solver(e.to_string())
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Grid(g) => g.into(),
            VerifyError::Operator(o) => o.into(),
            VerifyError::InvalidData(_) | VerifyError::Mismatch(_) => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn is_invalid_operator(e: &OperatorError) -> bool {
    matches!(e, OperatorError::InvalidModel(_) | OperatorError::IndexOutOfRange { .. })
}

pub type Result<T> = std::result::Result<T, CliError>;

/// `Sign` travels through JSON as "+1" / "-1".
mod sign_text {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &Sign, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&s.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<Sign, D::Error> {
        let v = Value::deserialize(de)?;
        let text = match &v {
            Value::String(s) => s.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(serde::de::Error::custom(format!("expected a sign, got {v}"))),
        };
        Sign::from_str(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Parser)]
#[command(name = "abreu", version, about = "Radial and grid solvers for the singular Abreu boundary value problem")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the radial problem and write the profile as CSV.
    #[command(allow_negative_numbers = true)]
    Radial(CommandArgs<RadialArgs>),
    /// Locate all admissible values of g(1).
    #[command(allow_negative_numbers = true)]
    Roots(CommandArgs<RootsArgs>),
    /// Solve the coupled system on a grid over the unit disk.
    #[command(allow_negative_numbers = true)]
    Grid(CommandArgs<GridArgs>),
    /// Run the verification checks on a CSV solution.
    #[command(allow_negative_numbers = true)]
    Verify(CommandArgs<VerifyArgs>),
    /// Evaluate the energy of a CSV solution or of a fresh radial solve.
    #[command(allow_negative_numbers = true)]
    Energy(CommandArgs<EnergyArgs>),
    /// Mesh refinement study against the radial solution.
    #[command(allow_negative_numbers = true)]
    Study(CommandArgs<StudyArgs>),
}

#[derive(Debug, Args)]
pub struct CommandArgs<T: Args> {
    #[command(flatten)]
    pub args: T,
    /// JSON file whose fields override the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemArgs {
    #[arg(long, default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Sign of f: +1 or -1.
    #[arg(long, default_value = "+1", allow_hyphen_values = true)]
    #[serde(with = "sign_text")]
    pub f: Sign,
    #[arg(long, default_value_t = 1.0)]
    pub psi: f64,
    #[arg(long, default_value_t = 0.0)]
    pub phi: f64,
}

impl ProblemArgs {
    fn problem(&self) -> Result<RadialProblem> {
        Ok(RadialProblem::new(self.n, self.p, self.f, self.psi, self.phi)?)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanArgs {
    /// Upper end of the root scan.
    #[arg(long, default_value_t = crate::radial::DEFAULT_SCAN_MAX)]
    pub tmax: f64,
    #[arg(long, default_value_t = crate::radial::DEFAULT_SCAN_STEP)]
    pub tstep: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputArgs {
    /// Output file; relative paths resolve against the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Output directory (defaults to $ABREU_OUT_DIR, then the working directory).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadialArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub scan: ScanArgs,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    /// Which root to use when several exist, in increasing order (default: smallest).
    #[arg(long, default_value_t = 0)]
    pub root_index: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub scan: ScanArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Zero,
    Laplacian,
    PLaplacian,
    Newton,
    ClampedLaplacian,
    ClampedPLaplacian,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Laplacian)]
    pub model: ModelKind,
    /// Constant coefficient f.
    #[arg(long, default_value_t = 1.0)]
    pub coef: f64,
    /// Exponent of the p-Laplacian.
    #[arg(long = "model-p", default_value_t = 2.0)]
    pub model_p: f64,
    /// Coefficient g of the Newton model.
    #[arg(long, default_value_t = 1.0)]
    pub g: f64,
    /// Order k of the Newton model.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Clamp parameter.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
}

impl ModelArgs {
    pub fn model(&self) -> Result<RhsModel> {
        let model = match self.model {
            ModelKind::Zero => RhsModel::laplacian_scaled(0.0),
            ModelKind::Laplacian => RhsModel::laplacian_scaled(self.coef),
            ModelKind::PLaplacian => RhsModel::p_laplacian(self.model_p, self.coef),
            ModelKind::Newton => RhsModel::newton(self.coef, self.g, self.k),
            ModelKind::ClampedLaplacian => RhsModel::clamped(RhsModel::laplacian_scaled(self.coef), self.gamma),
            ModelKind::ClampedPLaplacian => {
                RhsModel::clamped(RhsModel::p_laplacian(self.model_p, self.coef), self.gamma)
            }
        };
        model.validate(2)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverArgs {
    #[arg(long, default_value_t = SolverConfig::default().damping)]
    pub damping: f64,
    #[arg(long, default_value_t = SolverConfig::default().outer_tol)]
    pub outer_tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().max_outer)]
    pub max_outer: usize,
    #[arg(long, default_value_t = SolverConfig::default().newton_tol)]
    pub newton_tol: f64,
    #[arg(long, default_value_t = SolverConfig::default().max_newton)]
    pub max_newton: usize,
    #[arg(long, default_value_t = SolverConfig::default().convexity_floor)]
    pub convexity_floor: f64,
}

impl SolverArgs {
    pub fn config(&self) -> Result<SolverConfig> {
        let c = SolverConfig {
            damping: self.damping,
            outer_tol: self.outer_tol,
            max_outer: self.max_outer,
            newton_tol: self.newton_tol,
            max_newton: self.max_newton,
            convexity_floor: self.convexity_floor,
        };
        c.validate()?;
        Ok(c)
    }
}

/// Constant boundary data on the unit circle.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryArgs {
    #[arg(long, default_value_t = 0.0)]
    pub phi: f64,
    #[arg(long, default_value_t = 1.0)]
    pub psi: f64,
}

impl BoundaryArgs {
    fn check(&self) -> Result<()> {
        if !self.phi.is_finite() || !(self.psi.is_finite() && self.psi > 0.0) {
            return Err(CliError::Invalid(format!(
                "need finite phi and positive psi, got phi = {}, psi = {}",
                self.phi, self.psi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub boundary: BoundaryArgs,
    /// Mesh width.
    #[arg(long, default_value_t = 1.0 / 32.0)]
    pub h: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolutionKind {
    Radial,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyArgs {
    /// CSV solution written by `radial` or `grid`.
    #[arg(long)]
    pub input: PathBuf,
    /// Radial problem parameters (radial input).
    #[command(flatten)]
    #[serde(flatten)]
    pub problem: ProblemArgs,
    /// Model, mesh and solver settings (grid input).
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1.0 / 32.0)]
    pub h: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    /// Tolerance of the Euler–Lagrange check.
    #[arg(long, default_value_t = 1e-8)]
    pub el_tol: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyArgs {
    /// CSV solution; without it the radial problem is solved first.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub scan: ScanArgs,
    #[arg(long, default_value_t = 2049)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub root_index: usize,
    /// Mesh width of a grid input.
    #[arg(long, default_value_t = 1.0 / 32.0)]
    pub h: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub boundary: BoundaryArgs,
    /// Comma-separated mesh widths.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0])]
    pub h_list: Vec<f64>,
    /// Samples of the radial reference.
    #[arg(long, default_value_t = 4097)]
    pub samples: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub scan: ScanArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum RunConfig {
    Radial(RadialArgs),
    Roots(RootsArgs),
    Grid(GridArgs),
    Verify(VerifyArgs),
    Energy(EnergyArgs),
    Study(StudyArgs),
}

impl RunConfig {
    fn name(&self) -> &'static str {
        match self {
            RunConfig::Radial(_) => "radial",
            RunConfig::Roots(_) => "roots",
            RunConfig::Grid(_) => "grid",
            RunConfig::Verify(_) => "verify",
            RunConfig::Energy(_) => "energy",
            RunConfig::Study(_) => "study",
        }
    }

    fn output(&self) -> &OutputArgs {
        match self {
            RunConfig::Radial(a) => &a.output,
            RunConfig::Roots(a) => &a.output,
            RunConfig::Grid(a) => &a.output,
            RunConfig::Verify(a) => &a.output,
            RunConfig::Energy(a) => &a.output,
            RunConfig::Study(a) => &a.output,
        }
    }

    fn default_file(&self) -> &'static str {
        match self {
            RunConfig::Radial(_) => "radial.csv",
            RunConfig::Roots(_) => "roots.json",
            RunConfig::Grid(_) => "grid.csv",
            RunConfig::Verify(_) => "verify.json",
            RunConfig::Energy(_) => "energy.json",
            RunConfig::Study(_) => "study.csv",
        }
    }

    /// Resolved path of the main artifact.
    pub fn out_path(&self) -> PathBuf {
        let out = self.output();
        let file = out.out.clone().unwrap_or_else(|| PathBuf::from(self.default_file()));
        if file.is_absolute() {
            return file;
        }
        let dir = out
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_default();
        dir.join(file)
    }

    /// Applies the fields of a JSON object on top of this config.
    pub fn with_overrides(&self, overrides: &Value) -> Result<Self> {
        let Value::Object(map) = overrides else {
            return Err(CliError::Invalid("config file must hold a JSON object".into()));
        };
        if let Some(cmd) = map.get("command") {
            if cmd.as_str() != Some(self.name()) {
                return Err(CliError::Invalid(format!(
                    "config file is for command {cmd}, running {}",
                    self.name()
                )));
            }
        }
        let mut base = serde_json::to_value(self).map_err(|e| CliError::Invalid(e.to_string()))?;
        if let Value::Object(target) = &mut base {
            for (k, v) in map {
                target.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(base).map_err(|e| CliError::Invalid(format!("config file: {e}")))
    }
}

impl Command {
    /// Builds the run config, reading `--config` when given.
    pub fn into_config(self) -> Result<RunConfig> {
        let (cfg, file) = match self {
            Command::Radial(c) => (RunConfig::Radial(c.args), c.config),
            Command::Roots(c) => (RunConfig::Roots(c.args), c.config),
            Command::Grid(c) => (RunConfig::Grid(c.args), c.config),
            Command::Verify(c) => (RunConfig::Verify(c.args), c.config),
            Command::Energy(c) => (RunConfig::Energy(c.args), c.config),
            Command::Study(c) => (RunConfig::Study(c.args), c.config),
        };
        match file {
            None => Ok(cfg),
            Some(path) => {
                let text = fs::read_to_string(&path)
                    .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
                let value: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                cfg.with_overrides(&value)
            }
        }
    }
}

/// Result of a successful run: the summary printed on stdout and the files written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub summary: Value,
    pub artifacts: Vec<PathBuf>,
}

/// Executes one command.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let out = config.out_path();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Invalid(format!("output directory {} not writable: {e}", dir.display())))?;
    }
    let (summary, residuals) = match config {
        RunConfig::Radial(a) => run_radial(a, &out)?,
        RunConfig::Roots(a) => run_roots(a, &out)?,
        RunConfig::Grid(a) => run_grid(a, &out)?,
        RunConfig::Verify(a) => run_verify(a, &out)?,
        RunConfig::Energy(a) => run_energy(a, &out)?,
        RunConfig::Study(a) => run_study(a, &out)?,
    };
    let mut artifacts = Vec::new();
    if out.exists() {
        artifacts.push(out.clone());
    }
    let prov = provenance_path(&out);
    let record = json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "residuals": residuals,
        "artifacts": artifacts,
    });
    write_json(&prov, &record)?;
    artifacts.push(prov);
    Ok(RunOutcome { summary, artifacts })
}

/// Parses arguments, runs, prints the summary or error record, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = cli.command.into_config().and_then(|c| run(&c));
    match outcome {
        Ok(o) => {
            println!("{}", o.summary);
            EXIT_OK
        }
        Err(e) => {
            println!("{}", e.record());
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn provenance_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".provenance.json");
    out.with_file_name(name)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn check_scan(scan: &ScanArgs) -> Result<()> {
    if !(scan.tmax.is_finite() && scan.tmax > 0.0 && scan.tstep > 0.0 && scan.tstep < scan.tmax) {
        return Err(CliError::Invalid(format!(
            "need 0 < tstep < tmax, got tstep = {}, tmax = {}",
            scan.tstep, scan.tmax
        )));
    }
    Ok(())
}

fn check_h(h: f64) -> Result<DiskGrid> {
    Ok(build_disk_grid(h)?)
}

/// Solves the radial problem and selects the requested root; `None` when no root exists.
fn solve_radial_selected(
    problem: &ProblemArgs,
    scan: &ScanArgs,
    samples: usize,
    root_index: usize,
) -> Result<(Vec<f64>, Option<RadialSolution>)> {
    check_scan(scan)?;
    if samples < 3 {
        return Err(CliError::Invalid(format!("need at least 3 samples, got {samples}")));
    }
    let problem = problem.problem()?;
    let solver = RadialSolver::default();
    let analysis = solver.solve_compatibility(&problem, scan.tmax, scan.tstep)?;
    if analysis.roots.is_empty() {
        return Ok((analysis.roots, None));
    }
    let g1 = *analysis.roots.get(root_index).ok_or_else(|| {
        CliError::Invalid(format!(
            "root index {root_index} out of range, {} roots found",
            analysis.roots.len()
        ))
    })?;
    let sol = solver.solve_profile(&problem, g1, samples)?;
    Ok((analysis.roots, Some(sol)))
}

fn run_radial(a: &RadialArgs, out: &Path) -> Result<(Value, Value)> {
    let (roots, sol) = solve_radial_selected(&a.problem, &a.scan, a.samples, a.root_index)?;
    let Some(sol) = sol else {
        let summary = json!({ "roots": [], "regime": a.problem.problem()?.regime() });
        return Ok((summary, json!({})));
    };
    write_radial_csv(out, &sol)?;
    let residual = residual_ode(&sol)?;
    let summary = json!({
        "roots": roots,
        "g1": sol.g1,
        "regime": sol.problem.regime(),
        "samples": sol.samples.len(),
        "out": out,
    });
    let residuals = json!({
        "ode": residual,
        "compatibility": RadialSolver::default().compatibility_residual(sol.g1, &sol.problem)?,
    });
    Ok((summary, residuals))
}

fn run_roots(a: &RootsArgs, out: &Path) -> Result<(Value, Value)> {
    check_scan(&a.scan)?;
    let problem = a.problem.problem()?;
    let solver = RadialSolver::default();
    let analysis = solver.solve_compatibility(&problem, a.scan.tmax, a.scan.tstep)?;
    let residuals: Vec<f64> = analysis
        .roots
        .iter()
        .map(|&t| solver.compatibility_residual(t, &problem))
        .collect::<std::result::Result<_, _>>()?;
    let summary = serde_json::to_value(&analysis).map_err(|e| CliError::Io(e.to_string()))?;
    write_json(out, &summary)?;
    Ok((summary, json!({ "compatibility": residuals })))
}

fn run_grid(a: &GridArgs, out: &Path) -> Result<(Value, Value)> {
    a.boundary.check()?;
    let model = a.model.model()?;
    let config = a.solver.config()?;
    let grid = check_h(a.h)?;
    let sol = solve_coupled(
        &model,
        &constant_boundary(a.boundary.phi),
        &constant_boundary(a.boundary.psi),
        &grid,
        &config,
    )?;
    write_grid_csv(out, &sol)?;
    let summary = json!({
        "nodes": sol.grid.len(),
        "outer_iterations": sol.report.outer_iterations,
        "clamp_active": sol.report.clamp_active_count(),
        "max_principles_passed": sol.report.max_principles.as_ref().map(|r| r.passed),
        "out": out,
    });
    Ok((summary, report_residuals(&sol.report)))
}

fn report_residuals(r: &SolveReport) -> Value {
    json!({
        "outer_history": r.outer_history,
        "ma": r.ma_residuals,
        "lma": r.lma_residuals,
        "newton_iterations": r.newton_iterations,
        "clipped_nodes": r.clipped_nodes,
        "regularized_nodes": r.regularized_nodes,
    })
}

fn run_verify(a: &VerifyArgs, out: &Path) -> Result<(Value, Value)> {
    let report = match detect_kind(&a.input)? {
        SolutionKind::Radial => {
            let sol = read_radial_csv(&a.input, a.problem.problem()?)?;
            verify_radial(&sol, a.el_tol)?
        }
        SolutionKind::Grid => {
            let model = a.model.model()?;
            let config = a.solver.config()?;
            let grid = check_h(a.h)?;
            let bc = BoundaryArgs {
                phi: a.problem.phi,
                psi: a.problem.psi,
            };
            bc.check()?;
            let sol = read_grid_csv(&a.input, grid, model, &bc, config)?;
            verify_grid(&sol)
        }
    };
    let value = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
    write_json(out, &value)?;
    let summary = json!({ "passed": report.passed, "checks": report.checks.len(), "out": out });
    Ok((summary, json!({})))
}

fn run_energy(a: &EnergyArgs, out: &Path) -> Result<(Value, Value)> {
    let p = a.problem.p;
    let (energy, source) = match &a.input {
        None => {
            let (_, sol) = solve_radial_selected(&a.problem, &a.scan, a.samples, a.root_index)?;
            let Some(sol) = sol else {
                let summary = json!({ "roots": [], "regime": a.problem.problem()?.regime() });
                return Ok((summary, json!({})));
            };
            (energy_jp(EnergyData::Radial(&sol), p)?, "radial solve")
        }
        Some(path) => match detect_kind(path)? {
            SolutionKind::Radial => {
                let sol = read_radial_csv(path, a.problem.problem()?)?;
                (energy_jp(EnergyData::Radial(&sol), p)?, "radial csv")
            }
            SolutionKind::Grid => {
                let grid = check_h(a.h)?;
                let bc = BoundaryArgs {
                    phi: a.problem.phi,
                    psi: a.problem.psi,
                };
                let sol = read_grid_csv(path, grid, RhsModel::laplacian_scaled(0.0), &bc, SolverConfig::default())?;
                (energy_jp(EnergyData::Grid(&sol), p)?, "grid csv")
            }
        },
    };
    let value = json!({ "energy": energy, "p": p, "source": source });
    write_json(out, &value)?;
    Ok((value, json!({})))
}

fn run_study(a: &StudyArgs, out: &Path) -> Result<(Value, Value)> {
    a.boundary.check()?;
    check_scan(&a.scan)?;
    let model = a.model.model()?;
    let config = a.solver.config()?;
    if a.h_list.is_empty() {
        return Err(CliError::Invalid("empty h list".into()));
    }
    let (p, f) = match a.model.model {
        ModelKind::Laplacian => (2.0, a.model.coef),
        ModelKind::PLaplacian => (a.model.model_p, a.model.coef),
        other => {
            return Err(CliError::Invalid(format!("no radial reference for model {other:?}")));
        }
    };
    let sign = if f == 1.0 {
        Sign::Plus
    } else if f == -1.0 {
        Sign::Minus
    } else {
        return Err(CliError::Invalid(format!("radial reference needs coef = +1 or -1, got {f}")));
    };
    let problem = ProblemArgs {
        n: 2,
        p,
        f: sign,
        psi: a.boundary.psi,
        phi: a.boundary.phi,
    };
    let (_, reference) = solve_radial_selected(&problem, &a.scan, a.samples, 0)?;
    let reference = reference.ok_or_else(|| CliError::Solver("the radial reference has no solution".into()))?;
    let rows = convergence_study(
        &model,
        &constant_boundary(a.boundary.phi),
        &constant_boundary(a.boundary.psi),
        &a.h_list,
        &config,
        &reference,
    )?;
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["h", "nodes", "error_u", "error_w", "order_u", "order_w", "outer_iterations", "failure"])?;
    let opt = |x: Option<f64>| x.map(fmt17).unwrap_or_default();
    for r in &rows {
        w.write_record([
            fmt17(r.h),
            r.nodes.to_string(),
            opt(r.error_u),
            opt(r.error_w),
            opt(r.order_u),
            opt(r.order_w),
            r.outer_iterations.map(|k| k.to_string()).unwrap_or_default(),
            r.failure.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let summary = json!({ "rows": rows, "out": out });
    Ok((summary, json!({})))
}

/// Checks run by `verify` on a radial solution.
pub fn verify_radial(sol: &RadialSolution, el_tol: f64) -> Result<VerificationReport> {
    let mut checks = vec![Check::at_most("residual_ode", residual_ode(sol)?, 1e-4)];
    checks.push(Check::at_most(
        "invariant_violations",
        sol.invariant_violations(1e-10).len() as f64,
        0.0,
    ));
    let (lo, _) = check_linear_growth(sol);
    checks.push(Check::at_least("linear_growth_lower", lo, 0.0));
    let report = VerificationReport::new(checks).merge(euler_lagrange_check(sol, el_tol)?);
    Ok(report)
}

/// Checks run by `verify` on a grid solution.
pub fn verify_grid(sol: &GridSolution) -> VerificationReport {
    let dets = sol.determinants();
    let min_det = dets.iter().copied().fold(f64::INFINITY, f64::min);
    let defect = sol.consistency_defect();
    let checks = vec![
        Check::at_least("min_det", min_det, 0.0),
        Check::at_most("det_w_defect", defect, 1e-6),
    ];
    VerificationReport::new(checks).merge(check_max_principles(sol, &sol.model))
}

pub fn write_radial_csv(path: &Path, sol: &RadialSolution) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(RADIAL_HEADER)?;
    for s in &sol.samples {
        w.write_record([fmt17(s.r), fmt17(s.slope), fmt17(s.v), fmt17(s.w), fmt17(s.det)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_grid_csv(path: &Path, sol: &GridSolution) -> Result<()> {
    let dets = sol.determinants();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(GRID_HEADER)?;
    for (i, &[x, y]) in sol.grid.nodes().iter().enumerate() {
        w.write_record([
            fmt17(x),
            fmt17(y),
            fmt17(sol.u.values[i]),
            fmt17(sol.w.values[i]),
            fmt17(dets[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, header: [&str; 5]) -> Result<Vec<[f64; 5]>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(CliError::Invalid(format!(
            "{}: header {found:?}, expected {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut row = [0.0; 5];
        for (k, field) in rec.iter().enumerate().take(5) {
            row[k] = field.trim().parse().map_err(|e| {
                CliError::Invalid(format!("{}: row {}: {field:?}: {e}", path.display(), line + 1))
            })?;
        }
        if rec.len() != 5 {
            return Err(CliError::Invalid(format!("{}: row {} has {} fields", path.display(), line + 1, rec.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Infers the solution type from the CSV header.
pub fn detect_kind(path: &Path) -> Result<SolutionKind> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header == RADIAL_HEADER {
        Ok(SolutionKind::Radial)
    } else if header == GRID_HEADER {
        Ok(SolutionKind::Grid)
    } else {
        Err(CliError::Invalid(format!("{}: unrecognised header {header:?}", path.display())))
    }
}

pub fn read_radial_csv(path: &Path, problem: RadialProblem) -> Result<RadialSolution> {
    let samples = read_rows(path, RADIAL_HEADER)?
        .into_iter()
        .map(|[r, slope, v, w, det]| RadialSample { r, slope, v, w, det })
        .collect();
    RadialSolution::from_samples(problem, samples).map_err(|e| CliError::Invalid(e.to_string()))
}

/// Re-reads a grid CSV onto the mesh of width `grid.h()`, matching rows to nodes
/// by lattice index.
pub fn read_grid_csv(
    path: &Path,
    grid: DiskGrid,
    model: RhsModel,
    boundary: &BoundaryArgs,
    config: SolverConfig,
) -> Result<GridSolution> {
    let rows = read_rows(path, GRID_HEADER)?;
    if rows.len() != grid.len() {
        return Err(CliError::Invalid(format!(
            "{}: {} rows, mesh of width {} has {} nodes",
            path.display(),
            rows.len(),
            grid.h(),
            grid.len()
        )));
    }
    let index: std::collections::HashMap<[i64; 2], usize> =
        (0..grid.len()).map(|i| (grid.lattice_index(i), i)).collect();
    let h = grid.h();
    let mut u = vec![f64::NAN; grid.len()];
    let mut w = vec![f64::NAN; grid.len()];
    for [x, y, uu, ww, _] in rows {
        let key = [(x / h).round() as i64, (y / h).round() as i64];
        let i = *index
            .get(&key)
            .ok_or_else(|| CliError::Invalid(format!("({x}, {y}) is not a node of the mesh")))?;
        u[i] = uu;
        w[i] = ww;
    }
    if u.iter().chain(&w).any(|v| v.is_nan()) {
        return Err(CliError::Invalid(format!("{}: duplicate or missing nodes", path.display())));
    }
    let u = GridField::new(u, constant_boundary(boundary.phi))?;
    let w = GridField::new(w, constant_boundary(boundary.psi))?;
    Ok(GridSolution {
        grid,
        model,
        u,
        w,
        report: SolveReport::default(),
        config,
    })
}
