//! Batch front-end: spec files, target matrices, control CSVs and the
//! `analyze | steer | verify | sweep` commands.
//!
//! Spec files are TOML:
//!
//! ```toml
//! m = 2
//!
//! [curvature]
//! preset = "diagonal-affine"     # or "constant" / "sampled"
//! offset = [1.0, 2.0]
//! slope = [0.0, 0.0]
//!
//! [window]
//! tau = 1.0
//! delta = 0.05
//!
//! [[avoid]]
//! center = 0.5
//! half_width = 0.02
//!
//! [numerics]
//! steps = 1000
//! seed = 7
//! ```
//!
//! Every command returns a [`RunReport`]; its JSON rendering depends only on
//! the inputs, the seed and the crate version.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::bilinear::{propagate_with, ControlSignal, PropagateOptions, Support, DEFAULT_STEPS};
use crate::controllability::{scan_times, DEFAULT_TOL_RANK};
use crate::franks::{
    channel_labels, contreras_check, estimate_franks_constant, jacobi_system, perturbation_window, CurvaturePath,
    PerturbationPlan, PerturbationSetup, SweepOptions, SynthesisOptions, DEFAULT_GAP_TOL,
};
use crate::steering::{Avoidance, BasisOptions, SteerOptions, SupportMask, DEFAULT_MAX_ITER, DEFAULT_TOL_STEER};
use crate::symplectic::{symplectic_defect, SymplecticMatrix, DEFAULT_TOL_SYMP};
use crate::Error;

/// Environment variable capping sweep workers.
pub const THREADS_ENV: &str = "SYMPSTEER_THREADS";
pub const DEFAULT_TOL_VERIFY: f64 = 1e-9;
pub const DEFAULT_DEPTH: usize = 3;
pub const DEFAULT_SEED: u64 = 0;
/// Upper bound on bracket scan times in `analyze`.
const MAX_SCAN_TIMES: usize = 201;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_NOT_CONTROLLABLE: i32 = 3;
pub const EXIT_NEWTON: i32 = 4;
pub const EXIT_AVOIDANCE: i32 = 5;
pub const EXIT_VERIFY: i32 = 6;
pub const EXIT_SWEEP: i32 = 7;

/// Command failures, each mapped onto the exit-code ladder.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => EXIT_SCHEMA,
            CliError::Io { .. } => EXIT_FAILURE,
            CliError::Core(e) => match e {
                Error::ContrerasFailed { .. } => EXIT_NOT_CONTROLLABLE,
                Error::NoConvergence { .. } => EXIT_NEWTON,
                Error::AvoidanceInfeasible(_) => EXIT_AVOIDANCE,
                Error::InvalidTarget { .. }
                | Error::NotSymplectic { .. }
                | Error::InvalidCurvature(_)
                | Error::Grid(_)
                | Error::InvalidArgument(_) => EXIT_SCHEMA,
                _ => EXIT_FAILURE,
            },
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn utf8(bytes: &[u8], path: &Path) -> Result<String, CliError> {
    String::from_utf8(bytes.to_vec()).map_err(|_| CliError::Schema(format!("{} is not UTF-8", path.display())))
}

// ---------------------------------------------------------------------------
// spec file

/// Curvature section of a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CurvatureSpec {
    Constant {
        matrix: Vec<Vec<f64>>,
    },
    DiagonalAffine {
        offset: Vec<f64>,
        slope: Vec<f64>,
    },
    /// One `m x m` matrix per grid time `j / steps`, `j = 0..=steps`.
    Sampled {
        samples: Vec<Vec<Vec<f64>>>,
        #[serde(default)]
        rates: Option<Vec<Vec<Vec<f64>>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub tau: f64,
    pub delta: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self { tau: 1.0, delta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub steps: usize,
    pub depth: usize,
    pub tol_symp: f64,
    pub tol_rank: f64,
    pub tol_steer: f64,
    pub tol_verify: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            depth: DEFAULT_DEPTH,
            tol_symp: DEFAULT_TOL_SYMP,
            tol_rank: DEFAULT_TOL_RANK,
            tol_steer: DEFAULT_TOL_STEER,
            tol_verify: DEFAULT_TOL_VERIFY,
            gap_tol: DEFAULT_GAP_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: DEFAULT_SEED,
        }
    }
}

fn default_horizon() -> f64 {
    1.0
}

/// Parsed and validated spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpecFile {
    pub m: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    pub curvature: CurvatureSpec,
    #[serde(default)]
    pub window: WindowSpec,
    #[serde(default)]
    pub avoid: Vec<Avoidance>,
    #[serde(default)]
    pub numerics: Numerics,
}

fn square(rows: &[Vec<f64>], m: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != m || rows.iter().any(|r| r.len() != m) {
        return Err(CliError::Schema(format!("{what} must be {m}x{m}")));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

impl SystemSpecFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let spec: SystemSpecFile = toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = read(path)?;
        let spec = Self::parse(&utf8(&bytes, path)?)?;
        Ok((spec, bytes))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.m == 0 {
            return Err(CliError::Schema("m must be positive".into()));
        }
        if self.horizon != 1.0 {
            return Err(CliError::Schema(format!(
                "horizon must be 1 (arcs are normalized to unit length), got {}",
                self.horizon
            )));
        }
        let n = &self.numerics;
        if n.steps < 2 {
            return Err(CliError::Schema("numerics.steps must be at least 2".into()));
        }
        for (name, v) in [
            ("tol_symp", n.tol_symp),
            ("tol_rank", n.tol_rank),
            ("tol_steer", n.tol_steer),
            ("tol_verify", n.tol_verify),
            ("gap_tol", n.gap_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::Schema(format!("numerics.{name} must be positive")));
            }
        }
        perturbation_window(self.window.tau, self.window.delta).map_err(|e| CliError::Schema(e.to_string()))?;
        for a in &self.avoid {
            if !(a.half_width >= 0.0 && a.center.is_finite()) {
                return Err(CliError::Schema(format!("invalid avoided interval {a:?}")));
            }
        }
        match &self.curvature {
            CurvatureSpec::Constant { matrix } => {
                square(matrix, self.m, "curvature.matrix")?;
            }
            CurvatureSpec::DiagonalAffine { offset, slope } => {
                if offset.len() != self.m || slope.len() != self.m {
                    return Err(CliError::Schema(format!(
                        "curvature.offset and curvature.slope need {} entries",
                        self.m
                    )));
                }
            }
            CurvatureSpec::Sampled { samples, rates } => {
                if samples.len() != n.steps + 1 {
                    return Err(CliError::Schema(format!(
                        "curvature.samples has {} entries, expected steps + 1 = {}",
                        samples.len(),
                        n.steps + 1
                    )));
                }
                for s in samples {
                    square(s, self.m, "curvature sample")?;
                }
                if let Some(r) = rates {
                    if r.len() != samples.len() {
                        return Err(CliError::Schema("curvature.rates must match curvature.samples".into()));
                    }
                    for s in r {
                        square(s, self.m, "curvature rate")?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn curvature_path(&self) -> Result<CurvaturePath, CliError> {
        let steps = self.numerics.steps;
        let path = match &self.curvature {
            CurvatureSpec::Constant { matrix } => {
                CurvaturePath::constant(square(matrix, self.m, "curvature.matrix")?, steps)
            }
            CurvatureSpec::DiagonalAffine { offset, slope } => {
                CurvaturePath::diagonal_affine(offset.clone(), slope.clone(), steps)
            }
            CurvatureSpec::Sampled { samples, rates } => {
                let k = samples
                    .iter()
                    .map(|s| square(s, self.m, "curvature sample"))
                    .collect::<Result<Vec<_>, _>>()?;
                let k_dot = rates
                    .as_ref()
                    .map(|r| {
                        r.iter()
                            .map(|s| square(s, self.m, "curvature rate"))
                            .collect::<Result<Vec<_>, _>>()
                    })
                    .transpose()?;
                CurvaturePath::sampled(k, k_dot)
            }
        };
        path.map_err(|e| CliError::Schema(e.to_string()))
    }

    /// Synthesis options with the given overrides applied.
    pub fn synthesis_options(&self, overrides: &Overrides) -> SynthesisOptions {
        let n = &self.numerics;
        let (tau, delta) = overrides.window.unwrap_or((self.window.tau, self.window.delta));
        let steps = overrides.steps.unwrap_or(n.steps);
        let mut avoided = self.avoid.clone();
        avoided.extend(overrides.avoid.iter().copied());
        let propagate = PropagateOptions::with_steps(steps);
        SynthesisOptions {
            tau,
            delta,
            avoided,
            steps,
            gap_tol: n.gap_tol,
            basis: BasisOptions {
                tol_rank: n.tol_rank,
                propagate: propagate.clone(),
                ..BasisOptions::default()
            },
            steer: SteerOptions {
                tol_steer: n.tol_steer,
                max_iter: n.max_iter,
                tol_symp: n.tol_symp,
                propagate,
            },
        }
    }
}

/// Command-line overrides of spec-file settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub window: Option<(f64, f64)>,
    pub avoid: Vec<Avoidance>,
    pub steps: Option<usize>,
}

impl Overrides {
    fn echo(&self) -> Value {
        json!({
            "window": self.window.map(|(tau, delta)| json!({"tau": tau, "delta": delta})),
            "avoid": self.avoid,
            "steps": self.steps,
        })
    }
}

// ---------------------------------------------------------------------------
// matrices and control CSVs

/// Parses a square matrix: one row per line, entries separated by whitespace
/// or commas, `#` starts a comment.
pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>, CliError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| CliError::Schema(format!("line {}: cannot parse {s:?} as a number", lineno + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Schema(
            "matrix file must hold a non-empty square matrix".into(),
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

/// Row-per-line rendering with shortest round-trip floats.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Loads a target and checks its size and symplectic defect.
pub fn load_target(path: &Path, m: usize, tol_symp: f64) -> Result<(SymplecticMatrix, Vec<u8>), CliError> {
    let bytes = read(path)?;
    let mat = parse_matrix(&utf8(&bytes, path)?)?;
    if mat.nrows() != 2 * m {
        return Err(CliError::Schema(format!(
            "target is {}x{}, expected {}x{}",
            mat.nrows(),
            mat.ncols(),
            2 * m,
            2 * m
        )));
    }
    let defect = symplectic_defect(&mat)?;
    if defect > tol_symp {
        return Err(CliError::Schema(format!(
            "target is off the symplectic group (defect {defect:.3e} > {tol_symp:.1e})"
        )));
    }
    Ok((SymplecticMatrix::from_trusted(m, mat), bytes))
}

/// Control CSV: header `t,u_1_1,…,u_m_m`, one row per grid time.
pub fn control_to_csv(u: &ControlSignal, m: usize) -> Result<String, CliError> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(channel_labels(m));
    let csv_err = |e: csv::Error| CliError::Schema(e.to_string());
    wtr.write_record(&header).map_err(csv_err)?;
    for j in 0..=u.intervals() {
        let mut rec = vec![format!("{}", u.time(j))];
        rec.extend(u.sample(j).iter().map(|v| format!("{v}")));
        wtr.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = wtr.into_inner().map_err(|e| CliError::Schema(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Schema(e.to_string()))
}

/// Parses a control CSV for a system with half-dimension `m` on `[0, 1]`.
pub fn control_from_csv(text: &str, m: usize) -> Result<ControlSignal, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Schema(format!("control CSV header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut expected = vec!["t".to_string()];
    expected.extend(channel_labels(m));
    if header != expected {
        return Err(CliError::Schema(format!(
            "control CSV header {header:?} does not match {expected:?}"
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Schema(format!("control CSV row {}: {e}", lineno + 2)))?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| CliError::Schema(format!("control CSV row {}: bad number {s:?}", lineno + 2)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.len() < 3 {
        return Err(CliError::Schema("control CSV needs at least three rows".into()));
    }
    let n = rows.len() - 1;
    for (j, row) in rows.iter().enumerate() {
        let t = j as f64 / n as f64;
        if (row[0] - t).abs() > 1e-9 {
            return Err(CliError::Schema(format!(
                "control CSV row {} has t = {}, expected the uniform grid value {t}",
                j + 2,
                row[0]
            )));
        }
    }
    let k = expected.len() - 1;
    let values = DMatrix::from_fn(n + 1, k, |j, i| rows[j][i + 1]);
    ControlSignal::new(1.0, values, Support::Unrestricted).map_err(|e| CliError::Schema(e.to_string()))
}

// ---------------------------------------------------------------------------
// reports

/// Machine-readable record of one command run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub arguments: Value,
    /// SHA-256 over every input file, in argument order.
    pub input_digest: String,
    pub version: String,
    pub outputs: Value,
    pub exit_code: i32,
}

impl RunReport {
    fn new(command: &str, arguments: Value, inputs: &[&[u8]], outputs: Value, exit_code: i32) -> Self {
        Self {
            command: command.to_string(),
            arguments,
            input_digest: digest(inputs),
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            exit_code,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }
}

fn digest(inputs: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for bytes in inputs {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Non-finite floats become `null` in JSON.
fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

// ---------------------------------------------------------------------------
// commands

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub spec: PathBuf,
    pub depth: Option<usize>,
    pub tol: Option<f64>,
    pub overrides: Overrides,
    pub out: Option<PathBuf>,
}

/// Bracket rank scan plus the distinct-eigenvalue check on the effective
/// window. Exit code 3 when the span condition fails.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<RunReport, CliError> {
    let (spec, bytes) = SystemSpecFile::load(&args.spec)?;
    let path = spec.curvature_path()?;
    let opts = spec.synthesis_options(&args.overrides);
    let depth = args.depth.unwrap_or(spec.numerics.depth);
    let tol_rank = args.tol.unwrap_or(spec.numerics.tol_rank);
    let window = perturbation_window(opts.tau, opts.delta).map_err(|e| CliError::Schema(e.to_string()))?;
    let mask = SupportMask::new(window, opts.avoided.clone());

    let live: Vec<f64> = path.times().into_iter().filter(|&t| !mask.excludes(t)).collect();
    if live.is_empty() {
        return Err(Error::AvoidanceInfeasible("no grid time survives the avoided intervals".into()).into());
    }
    let stride = live.len().div_ceil(MAX_SCAN_TIMES);
    let times: Vec<f64> = live.iter().copied().step_by(stride.max(1)).collect();

    let sys = jacobi_system(&path).map_err(|e| CliError::Schema(e.to_string()))?;
    let rank = scan_times(&sys, &times, depth, tol_rank)?;
    let contreras = contreras_check(&path, &mask, opts.gap_tol)?;
    let exit_code = if rank.controllable {
        EXIT_OK
    } else {
        EXIT_NOT_CONTROLLABLE
    };
    let outputs = json!({
        "m": spec.m,
        "depth": depth,
        "tol_rank": tol_rank,
        "window": window,
        "avoided": opts.avoided,
        "scanned_times": times.len(),
        "rank": {
            "required": rank.required,
            "achieved": rank.achieved,
            "controllable": rank.controllable,
            "best_time": rank.best_time,
            "singular_values": rank.singular_values,
        },
        "contreras": {
            "best_time": contreras.best_time,
            "eigenvalues": contreras.eigenvalues,
            "min_gap": contreras.min_gap,
            "gap_tol": opts.gap_tol,
            "pass": contreras.pass,
        },
    });
    let arguments = json!({
        "spec": args.spec,
        "depth": args.depth,
        "tol": args.tol,
        "overrides": args.overrides.echo(),
    });
    let report = RunReport::new("analyze", arguments, &[&bytes], outputs, exit_code);
    if let Some(out) = &args.out {
        write(out, report.to_json().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct SteerArgs {
    pub spec: PathBuf,
    pub target: PathBuf,
    /// Control CSV path; the plan JSON goes next to it with a `.json`
    /// extension.
    pub out: PathBuf,
    pub overrides: Overrides,
}

/// Path of the plan JSON written alongside a control CSV.
pub fn plan_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn plan_json(plan: &PerturbationPlan, m: usize) -> Value {
    json!({
        "window": plan.window,
        "avoided": plan.avoided,
        "channels": channel_labels(m),
        "lambda": plan.lambda,
        "target": matrix_rows(plan.target.entries()),
        "achieved": matrix_rows(plan.achieved.entries()),
        "residual": plan.residual,
        "iterations": plan.iterations,
        "norms": plan.norms,
        "control_intervals": plan.u.intervals(),
    })
}

/// Synthesizes a windowed perturbation reaching the target and writes the
/// control CSV and plan JSON.
pub fn cmd_steer(args: &SteerArgs) -> Result<RunReport, CliError> {
    let (spec, spec_bytes) = SystemSpecFile::load(&args.spec)?;
    let (target, target_bytes) = load_target(&args.target, spec.m, spec.numerics.tol_symp)?;
    let path = spec.curvature_path()?;
    let opts = spec.synthesis_options(&args.overrides);
    let setup = PerturbationSetup::new(&path, &opts)?;
    let plan = setup.solve(&target)?;

    let csv = control_to_csv(&plan.u, spec.m)?;
    write(&args.out, csv.as_bytes())?;
    let plan_value = plan_json(&plan, spec.m);
    let plan_file = plan_path(&args.out);
    let mut plan_text = serde_json::to_string_pretty(&plan_value).expect("plan serializes");
    plan_text.push('\n');
    write(&plan_file, plan_text.as_bytes())?;

    let outputs = json!({
        "control_csv": args.out,
        "plan_json": plan_file,
        "residual": plan.residual,
        "iterations": plan.iterations,
        "norm_c0": plan.norms[0],
        "norm_c2": plan.norms[..=2].iter().copied().fold(0.0, f64::max),
        "distance": (target.entries() - setup.unperturbed().entries()).norm(),
        "contreras_gap": setup.contreras.min_gap,
        "gramian_conditioning": setup.basis.conditioning(),
    });
    let arguments = json!({
        "spec": args.spec,
        "target": args.target,
        "out": args.out,
        "overrides": args.overrides.echo(),
    });
    Ok(RunReport::new(
        "steer",
        arguments,
        &[&spec_bytes, &target_bytes],
        outputs,
        EXIT_OK,
    ))
}

#[derive(Debug, Clone)]
pub struct VerifyArgs {
    pub spec: PathBuf,
    pub control: PathBuf,
    pub target: PathBuf,
    pub tol: Option<f64>,
    pub overrides: Overrides,
}

/// Re-propagates a control CSV and compares the end point with the target.
/// Exit code 6 when the residual exceeds the tolerance.
pub fn cmd_verify(args: &VerifyArgs) -> Result<RunReport, CliError> {
    let (spec, spec_bytes) = SystemSpecFile::load(&args.spec)?;
    let (target, target_bytes) = load_target(&args.target, spec.m, spec.numerics.tol_symp)?;
    let control_bytes = read(&args.control)?;
    let u = control_from_csv(&utf8(&control_bytes, &args.control)?, spec.m)?;
    let opts = spec.synthesis_options(&args.overrides);
    if u.intervals() != opts.steps {
        return Err(CliError::Schema(format!(
            "control has {} intervals but the spec integrates with {} steps",
            u.intervals(),
            opts.steps
        )));
    }
    let path = spec.curvature_path()?;
    let sys = jacobi_system(&path).map_err(|e| CliError::Schema(e.to_string()))?;
    let traj = propagate_with(&sys, &SymplecticMatrix::identity(spec.m), &u, &opts.steer.propagate)?;
    let achieved = traj.endpoint();
    let residual = (achieved.entries() - target.entries()).norm();
    let tol = args.tol.unwrap_or(spec.numerics.tol_verify);

    let window = perturbation_window(opts.tau, opts.delta).map_err(|e| CliError::Schema(e.to_string()))?;
    let mask = SupportMask::new(window, opts.avoided.clone());
    let outside_nonzero = (0..=u.intervals())
        .filter(|&j| mask.excludes(u.time(j)) && u.sample(j).iter().any(|&v| v != 0.0))
        .count();

    let passed = residual <= tol;
    let outputs = json!({
        "residual": residual,
        "tolerance": tol,
        "passed": passed,
        "symplectic_defect": achieved.defect(),
        "max_trajectory_defect": traj.max_defect(),
        "achieved": matrix_rows(achieved.entries()),
        "samples_outside_support": outside_nonzero,
    });
    let arguments = json!({
        "spec": args.spec,
        "control": args.control,
        "target": args.target,
        "tol": args.tol,
        "overrides": args.overrides.echo(),
    });
    let exit_code = if passed { EXIT_OK } else { EXIT_VERIFY };
    Ok(RunReport::new(
        "verify",
        arguments,
        &[&spec_bytes, &control_bytes, &target_bytes],
        outputs,
        exit_code,
    ))
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub spec: PathBuf,
    pub radii: Vec<f64>,
    pub samples: usize,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub overrides: Overrides,
}

/// Worker cap from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Radius sweep: CSV `r,sample,solved,norm_C0,norm_C2,ratio` plus a summary
/// with the log-log slope and the admissible constant. Exit code 7 when some
/// radius has no solved sample.
pub fn cmd_sweep(args: &SweepArgs) -> Result<RunReport, CliError> {
    let (spec, bytes) = SystemSpecFile::load(&args.spec)?;
    if args.radii.is_empty() || args.radii.iter().any(|r| !(*r > 0.0)) || args.radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Schema("radii must be positive and strictly ascending".into()));
    }
    if args.samples == 0 {
        return Err(CliError::Schema("samples must be positive".into()));
    }
    let path = spec.curvature_path()?;
    let opts = spec.synthesis_options(&args.overrides);
    let setup = PerturbationSetup::new(&path, &opts)?;
    let seed = args.seed.unwrap_or(spec.numerics.seed);
    let table = estimate_franks_constant(
        &setup,
        &SweepOptions {
            radii: args.radii.clone(),
            samples: args.samples,
            seed,
            threads: args.threads,
        },
    )?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Schema(e.to_string());
    wtr.write_record(["r", "sample", "solved", "norm_C0", "norm_C2", "ratio"])
        .map_err(csv_err)?;
    for row in &table.rows {
        wtr.write_record([
            format!("{}", row.radius),
            row.sample.to_string(),
            row.solved.to_string(),
            format!("{}", row.norm_c0),
            format!("{}", row.norm_c2),
            format!("{}", row.ratio),
        ])
        .map_err(csv_err)?;
    }
    let csv = wtr.into_inner().map_err(|e| CliError::Schema(e.to_string()))?;
    write(&args.out, &csv)?;

    let fully_unsolved = table.radii.iter().any(|r| r.solved == 0);
    let outputs = json!({
        "sweep_csv": args.out,
        "seed": seed,
        "samples": args.samples,
        "slope": num(table.slope),
        "k_est": num(table.k_est),
        "radius_bound": table.radius_bound,
        "radii": table.radii.iter().map(|r| json!({
            "radius": r.radius,
            "solved": r.solved,
            "samples": r.samples,
            "max_ratio": num(r.max_ratio),
        })).collect::<Vec<_>>(),
    });
    let arguments = json!({
        "spec": args.spec,
        "radii": args.radii,
        "samples": args.samples,
        "seed": args.seed,
        "out": args.out,
        "overrides": args.overrides.echo(),
    });
    let exit_code = if fully_unsolved { EXIT_SWEEP } else { EXIT_OK };
    Ok(RunReport::new("sweep", arguments, &[&bytes], outputs, exit_code))
}

// ---------------------------------------------------------------------------
// argument parsing

fn parse_avoid(s: &str) -> Result<Avoidance, String> {
    let (t, rho) = s.split_once(':').ok_or_else(|| format!("expected t:rho, got {s:?}"))?;
    let t: f64 = t.trim().parse().map_err(|_| format!("bad time in {s:?}"))?;
    let rho: f64 = rho.trim().parse().map_err(|_| format!("bad half-width in {s:?}"))?;
    if !(rho >= 0.0) {
        return Err(format!("half-width must be non-negative in {s:?}"));
    }
    Ok(Avoidance::new(t, rho))
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (tau, delta) = s
        .split_once(',')
        .ok_or_else(|| format!("expected tau,delta, got {s:?}"))?;
    let tau: f64 = tau.trim().parse().map_err(|_| format!("bad tau in {s:?}"))?;
    let delta: f64 = delta.trim().parse().map_err(|_| format!("bad delta in {s:?}"))?;
    Ok((tau, delta))
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// System spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
    /// Avoided neighbourhood `t:rho`; repeatable.
    #[arg(long = "avoid", value_parser = parse_avoid)]
    avoid: Vec<Avoidance>,
    /// Perturbation window parameters `tau,delta`.
    #[arg(long, value_parser = parse_window)]
    window: Option<(f64, f64)>,
    /// RK4 steps on [0, 1].
    #[arg(long)]
    steps: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            window: self.window,
            avoid: self.avoid.clone(),
            steps: self.steps,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sympsteer",
    version,
    about = "Steer linearized Poincaré maps with curvature perturbations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bracket rank and eigenvalue-gap analysis.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        depth: Option<usize>,
        /// Relative rank tolerance.
        #[arg(long)]
        tol: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize a perturbation reaching a target matrix.
    Steer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        target: PathBuf,
        /// Control CSV output (plan JSON is written next to it).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-propagate a control CSV against a target.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Control CSV to check.
        #[arg(long)]
        control: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Residual tolerance.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Radius sweep estimating the linear norm bound.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        radii: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command, prints the
/// report JSON on stdout and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let started = Instant::now();
    let result = match cli.command {
        Command::Analyze {
            common,
            depth,
            tol,
            out,
        } => cmd_analyze(&AnalyzeArgs {
            spec: common.spec.clone(),
            depth,
            tol,
            overrides: common.overrides(),
            out,
        }),
        Command::Steer { common, target, out } => cmd_steer(&SteerArgs {
            spec: common.spec.clone(),
            target,
            out,
            overrides: common.overrides(),
        }),
        Command::Verify {
            common,
            control,
            target,
            tol,
        } => cmd_verify(&VerifyArgs {
            spec: common.spec.clone(),
            control,
            target,
            tol,
            overrides: common.overrides(),
        }),
        Command::Sweep {
            common,
            radii,
            samples,
            seed,
            out,
        } => cmd_sweep(&SweepArgs {
            spec: common.spec.clone(),
            radii,
            samples,
            seed,
            out,
            threads: threads_from_env(),
            overrides: common.overrides(),
        }),
    };
    match result {
        Ok(report) => {
            print!("{}", report.to_json());
            eprintln!(
                "sympsteer: {} finished in {:.3}s",
                report.command,
                started.elapsed().as_secs_f64()
            );
            report.exit_code
        }
        Err(e) => {
            eprintln!("sympsteer: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPEC: &str = r#"
m = 2

[curvature]
preset = "diagonal-affine"
offset = [1.0, 2.0]
slope = [0.0, 0.5]

[window]
tau = 1.0
delta = 0.05

[[avoid]]
center = 0.5
half_width = 0.02

[numerics]
steps = 400
seed = 3
"#;

    #[test]
    fn spec_round_trip_and_defaults() {
        let spec = SystemSpecFile::parse(SPEC).unwrap();
        assert_eq!(spec.m, 2);
        assert_eq!(spec.horizon, 1.0);
        assert_eq!(spec.avoid, vec![Avoidance::new(0.5, 0.02)]);
        assert_eq!(spec.numerics.steps, 400);
        assert_eq!(spec.numerics.tol_steer, DEFAULT_TOL_STEER);
        let path = spec.curvature_path().unwrap();
        assert_eq!(path.intervals(), 400);
        let again = SystemSpecFile::parse(&toml::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn schema_errors() {
        let bad = [
            SPEC.replace("m = 2", "m = 3"),
            SPEC.replace("delta = 0.05", "delta = 0.6"),
            SPEC.replace("preset = \"diagonal-affine\"", "preset = \"spline\""),
            SPEC.replace("seed = 3", "seed = 3\nbogus = 1"),
            format!("horizon = 2.0\n{SPEC}"),
        ];
        for text in bad {
            let err = SystemSpecFile::parse(&text).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_SCHEMA, "{err}");
        }
    }

    #[test]
    fn sampled_spec_needs_matching_grid() {
        let text = r#"
m = 1
[curvature]
preset = "sampled"
samples = [[[1.0]], [[1.0]], [[1.0]]]
[numerics]
steps = 3
"#;
        assert!(SystemSpecFile::parse(text).is_err());
        let ok = text.replace("steps = 3", "steps = 2");
        let spec = SystemSpecFile::parse(&ok).unwrap();
        assert_eq!(spec.curvature_path().unwrap().intervals(), 2);
    }

    #[test]
    fn matrix_text_round_trip() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, -2.5e-17, 1.0 / 3.0, 4.0]);
        let parsed = parse_matrix(&format_matrix(&m)).unwrap();
        assert_eq!(parsed, m);
        assert!(parse_matrix("1 2\n3").is_err());
        assert!(parse_matrix("# only a comment\n").is_err());
        assert_eq!(
            parse_matrix("1, 0 # identity\n0, 1\n").unwrap(),
            DMatrix::identity(2, 2)
        );
    }

    #[test]
    fn control_csv_round_trip() {
        let u = ControlSignal::from_fn(3, 10, 1.0, Support::Unrestricted, |t| vec![t, -t / 3.0, 1e-300]);
        let text = control_to_csv(&u, 2).unwrap();
        assert!(text.starts_with("t,u_1_1,u_1_2,u_2_2\n"));
        let back = control_from_csv(&text, 2).unwrap();
        assert_eq!(back.values(), u.values());
        assert!(control_from_csv(&text, 1).is_err());
    }

    #[test]
    fn flag_parsers() {
        assert_eq!(parse_avoid("0.5:0.02").unwrap(), Avoidance::new(0.5, 0.02));
        assert!(parse_avoid("0.5").is_err());
        assert!(parse_avoid("0.5:-1").is_err());
        assert_eq!(parse_window("1,0.05").unwrap(), (1.0, 0.05));
        assert!(parse_window("1").is_err());
    }

    #[test]
    fn digest_depends_on_boundaries() {
        assert_ne!(digest(&[b"ab", b"c"]), digest(&[b"a", b"bc"]));
        assert_eq!(digest(&[b"x"]).len(), 64);
    }
}
