//! The `aploc` command-line tool: `simulate`, `localize` and `benchmark`.
//!
//! A run is described by one TOML document ([`RunConfig`]). Lengths in the
//! config are millimeters and angles degrees; everything is converted to SI
//! before use. Every output file starts with a header naming the tool
//! version and the master seed: a `#` comment line for CSV, a `header` key
//! (JSON) or header record (JSON lines) otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ap::{ap_localize, ApConfig, DipoleEstimate};
use crate::baselines::{rap_beamformer, rap_music, trap_music, DEFAULT_REG_SCALE};
use crate::error::Error;
use crate::geometry::{build_sensor_array, build_source_grid, HeadPerturbation, OrientationMode};
use crate::projection::Recording;
use crate::sim::{run_sweep, synthesize_trial, Environment, Method, SweepReport, TrialConfig};
use crate::VERSION;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    Io(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Solver(m) => write!(f, "solver error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn from_core(context: &str, e: Error) -> CliError {
    let msg = if context.is_empty() { e.to_string() } else { format!("{context}: {e}") };
    match e {
        Error::Parameter(_) | Error::Domain(_) => CliError::Config(msg),
        Error::Degenerate(_) | Error::Numeric(_) => CliError::Solver(msg),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub n_rings: usize,
    pub sensors_per_ring: usize,
    pub shell_radius_mm: f64,
    pub head_radius_mm: f64,
    pub grid_spacing_mm: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { n_rings: 4, sensors_per_ring: 8, shell_radius_mm: 120.0, head_radius_mm: 90.0, grid_spacing_mm: 11.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialSection {
    pub n_sources: usize,
    pub rho: f64,
    pub snr_db: f64,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub freq_range_hz: [f64; 2],
    pub n_sinusoids: usize,
    pub min_separation_mm: f64,
    pub orientation_mode: OrientationMode,
    /// Misregistration of the forward model used by `localize`.
    pub perturbation: Option<HeadPerturbation>,
}

impl Default for TrialSection {
    fn default() -> Self {
        let d = TrialConfig::default();
        Self {
            n_sources: d.n_sources,
            rho: d.rho,
            snr_db: d.snr_db,
            n_samples: d.n_samples,
            sample_rate_hz: d.sample_rate_hz,
            freq_range_hz: [d.freq_range_hz.0, d.freq_range_hz.1],
            n_sinusoids: d.n_sinusoids,
            min_separation_mm: d.min_separation * 1e3,
            orientation_mode: d.orientation_mode,
            perturbation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApSection {
    pub max_iterations: usize,
    pub convergence_tol_mm: f64,
}

impl Default for ApSection {
    fn default() -> Self {
        Self { max_iterations: 20, convergence_tol_mm: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamformerSection {
    /// Diagonal loading as a multiple of `trace(C) / M`.
    pub reg_scale: f64,
}

impl Default for BeamformerSection {
    fn default() -> Self {
        Self { reg_scale: DEFAULT_REG_SCALE }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationPreset {
    /// The ten registration errors of [`HeadPerturbation::standard_set`].
    Standard,
    /// A single unperturbed cell.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub rhos: Vec<f64>,
    pub n_trials: usize,
    pub preset: PerturbationPreset,
    /// Explicit cells, used instead of `preset` when non-empty.
    pub perturbations: Vec<HeadPerturbation>,
    /// Prepend an unperturbed cell to the list.
    pub include_unperturbed: bool,
    pub workers: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            rhos: vec![0.1, 0.5, 0.9],
            n_trials: 100,
            preset: PerturbationPreset::Standard,
            perturbations: Vec::new(),
            include_unperturbed: false,
            workers: None,
        }
    }
}

impl SweepSection {
    pub fn perturbation_list(&self) -> Vec<Option<HeadPerturbation>> {
        let mut out = Vec::new();
        if self.include_unperturbed {
            out.push(None);
        }
        if !self.perturbations.is_empty() {
            out.extend(self.perturbations.iter().copied().map(Some));
        } else {
            match self.preset {
                PerturbationPreset::Standard => out.extend(HeadPerturbation::standard_set().into_iter().map(Some)),
                PerturbationPreset::None => {
                    if out.is_empty() {
                        out.push(None);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("aploc-out") }
    }
}

fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

/// A complete run description. Only `seed` is required.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub trial: TrialSection,
    #[serde(default)]
    pub ap: ApSection,
    #[serde(default)]
    pub beamformer: BeamformerSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.trial_config().map_err(|e| from_core("", e))?;
        if cfg.ap.convergence_tol_mm < 0.0 || !cfg.ap.convergence_tol_mm.is_finite() {
            return Err(CliError::Config("ap.convergence_tol_mm must be finite and non-negative".into()));
        }
        for &rho in &cfg.sweep.rhos {
            if !(rho.abs() <= 1.0) {
                return Err(CliError::Config(format!("sweep.rhos: {rho} lies outside [-1, 1]")));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn trial_config(&self) -> crate::Result<TrialConfig> {
        let t = &self.trial;
        let cfg = TrialConfig {
            seed: self.seed,
            n_sources: t.n_sources,
            rho: t.rho,
            snr_db: t.snr_db,
            n_samples: t.n_samples,
            sample_rate_hz: t.sample_rate_hz,
            freq_range_hz: (t.freq_range_hz[0], t.freq_range_hz[1]),
            n_sinusoids: t.n_sinusoids,
            min_separation: t.min_separation_mm * 1e-3,
            perturbation: t.perturbation,
            methods: self.methods.clone(),
            orientation_mode: t.orientation_mode,
            max_iterations: self.ap.max_iterations,
            convergence_tol: self.ap.convergence_tol_mm * 1e-3,
            beamformer_reg_scale: self.beamformer.reg_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn environment(&self) -> CliResult<Environment> {
        let g = &self.geometry;
        let array = build_sensor_array(g.n_rings, g.sensors_per_ring, g.shell_radius_mm * 1e-3, g.head_radius_mm * 1e-3)
            .map_err(|e| from_core("geometry", e))?;
        let grid = build_source_grid(&array, g.grid_spacing_mm * 1e-3, self.trial.orientation_mode)
            .map_err(|e| from_core("geometry", e))?;
        Environment::new(array, grid).map_err(|e| from_core("geometry", e))
    }
}

#[derive(Debug, Parser)]
#[command(name = "aploc", version, about = "Alternating-projection MEG dipole localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one synthetic recording plus its ground truth.
    Simulate(CommonArgs),
    /// Localize sources in a recording CSV.
    Localize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the factorial Monte-Carlo sweep.
    Benchmark(CommonArgs),
}

fn header(seed: u64) -> String {
    format!("aploc v{VERSION} seed={seed}")
}

fn prepare(common: &CommonArgs) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        cfg.sweep.workers = Some(w);
    }
    let out = common.out_dir.clone().unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok((cfg, out))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn with_comment(seed: u64, body: &str) -> String {
    format!("# {}\n{body}", header(seed))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable output");
    s.push('\n');
    s
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Parses a numeric CSV matrix; blank lines and `#` comments are skipped.
pub fn matrix_from_csv(text: &str) -> CliResult<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| CliError::Config(format!("line {}: `{c}`: {e}", n + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(CliError::Config(format!("line {}: {} columns, expected {}", n + 1, row.len(), first.len())));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Config("recording has no rows".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    header: String,
    seed: u64,
    snr_db: f64,
    rho: f64,
    achieved_correlation: Option<f64>,
    grid_indices: Vec<usize>,
    locations_m: Vec<[f64; 3]>,
    orientations: Vec<[f64; 3]>,
    timecourses: Vec<Vec<f64>>,
    methods: &'a [Method],
}

/// Writes `recording.csv`, `ground_truth.json`, `sensors.csv`, `grid.csv`.
pub fn cmd_simulate(common: &CommonArgs) -> CliResult<Vec<PathBuf>> {
    let (cfg, out) = prepare(common)?;
    let tcfg = cfg.trial_config().map_err(|e| from_core("", e))?;
    let env = cfg.environment()?;
    let trial = synthesize_trial(&tcfg, &env).map_err(|e| from_core("simulate", e))?;
    let truth = GroundTruth {
        header: header(cfg.seed),
        seed: cfg.seed,
        snr_db: tcfg.snr_db,
        rho: tcfg.rho,
        achieved_correlation: trial.timecourses.achieved_correlation,
        grid_indices: trial.truth.iter().map(|h| h.grid_index).collect(),
        locations_m: trial.truth.iter().map(|h| env.grid.point(h.grid_index).into()).collect(),
        orientations: trial.truth.iter().map(|h| h.orientation.into()).collect(),
        timecourses: trial.timecourses.signals.row_iter().map(|r| r.iter().copied().collect()).collect(),
        methods: &cfg.methods,
    };
    Ok(vec![
        write_file(&out, "recording.csv", &with_comment(cfg.seed, &matrix_to_csv(trial.recording.data())))?,
        write_file(&out, "ground_truth.json", &to_json(&truth))?,
        write_file(&out, "sensors.csv", &with_comment(cfg.seed, &env.array.to_csv()))?,
        write_file(&out, "grid.csv", &with_comment(cfg.seed, &env.grid.to_csv()))?,
    ])
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodRun {
    pub method: Method,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub objective_trace: Vec<f64>,
    pub localizer_values: Vec<f64>,
    pub estimates: Vec<DipoleEstimate>,
}

#[derive(Serialize)]
struct LocalizeMeta<'a> {
    header: String,
    data: String,
    n_sensors: usize,
    n_samples: usize,
    runs: Vec<MethodMeta<'a>>,
}

#[derive(Serialize)]
struct MethodMeta<'a> {
    method: Method,
    iterations: Option<usize>,
    converged: Option<bool>,
    objective_trace: &'a [f64],
    localizer_values: &'a [f64],
}

/// Runs every configured method on `rec` with the (possibly perturbed)
/// localization model.
pub fn localize_recording(cfg: &RunConfig, env: &Environment, rec: &Recording) -> CliResult<Vec<MethodRun>> {
    let tcfg = cfg.trial_config().map_err(|e| from_core("", e))?;
    if rec.n_sensors() != env.array.len() {
        return Err(CliError::Config(format!(
            "recording has {} rows but the configured array has {} sensors",
            rec.n_sensors(),
            env.array.len()
        )));
    }
    let grid = env.localization_grid(tcfg.perturbation.as_ref()).map_err(|e| from_core("geometry", e))?;
    let q = tcfg.n_sources;
    let mode = tcfg.orientation_mode;
    cfg.methods
        .iter()
        .map(|&method| {
            let ctx = method.name();
            let run = match method {
                Method::Ap => {
                    let apc = ApConfig {
                        n_sources: q,
                        max_iterations: tcfg.max_iterations,
                        convergence_tol: tcfg.convergence_tol,
                        orientation_mode: mode,
                    };
                    let r = ap_localize(&grid, rec, &apc).map_err(|e| from_core(ctx, e))?;
                    MethodRun {
                        method,
                        iterations: Some(r.iterations),
                        converged: Some(r.converged),
                        objective_trace: r.trace.objectives(),
                        localizer_values: Vec::new(),
                        estimates: r.estimates,
                    }
                }
                _ => {
                    let r = match method {
                        Method::RapMusic => rap_music(&grid, rec, q, mode),
                        Method::TrapMusic => trap_music(&grid, rec, q, mode),
                        _ => {
                            let reg = tcfg.beamformer_reg_scale * rec.data().norm_squared() / grid.n_sensors() as f64;
                            rap_beamformer(&grid, rec, q, mode, Some(reg))
                        }
                    }
                    .map_err(|e| from_core(ctx, e))?;
                    MethodRun {
                        method,
                        iterations: None,
                        converged: None,
                        objective_trace: Vec::new(),
                        localizer_values: r.localizer_values,
                        estimates: r.estimates,
                    }
                }
            };
            Ok(run)
        })
        .collect()
}

/// Writes `estimates.csv` and `localize.json`.
pub fn cmd_localize(common: &CommonArgs, data: &Path) -> CliResult<Vec<PathBuf>> {
    let (cfg, out) = prepare(common)?;
    let env = cfg.environment()?;
    let text = fs::read_to_string(data).map_err(|e| CliError::Io(format!("{}: {e}", data.display())))?;
    let matrix = matrix_from_csv(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", data.display())),
        other => other,
    })?;
    let rec = Recording::new(matrix).map_err(|e| from_core("data", e))?;
    let runs = localize_recording(&cfg, &env, &rec)?;

    let mut csv = String::from("method,source,grid_index,x_mm,y_mm,z_mm,ox,oy,oz\n");
    for run in &runs {
        for (k, e) in run.estimates.iter().enumerate() {
            let p = e.location * 1e3;
            let o = e.orientation;
            let _ = writeln!(csv, "{},{},{},{},{},{},{},{},{}", run.method, k + 1, e.grid_index, p.x, p.y, p.z, o.x, o.y, o.z);
        }
    }
    let meta = LocalizeMeta {
        header: header(cfg.seed),
        data: data.display().to_string(),
        n_sensors: rec.n_sensors(),
        n_samples: rec.n_samples(),
        runs: runs
            .iter()
            .map(|r| MethodMeta {
                method: r.method,
                iterations: r.iterations,
                converged: r.converged,
                objective_trace: &r.objective_trace,
                localizer_values: &r.localizer_values,
            })
            .collect(),
    };
    Ok(vec![
        write_file(&out, "estimates.csv", &with_comment(cfg.seed, &csv))?,
        write_file(&out, "localize.json", &to_json(&meta))?,
    ])
}

fn perturbation_label(p: &Option<HeadPerturbation>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.label())
}

/// Long-format ranking table, one row per (cell, method).
pub fn ranking_csv(report: &SweepReport) -> String {
    let mut out = String::from("rho,perturbation_id,perturbation,rank,method,mean_error_mm\n");
    for (rho, pid) in report.cell_keys() {
        for (rank, c) in report.ranking(rho, pid).iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{},{},{}", rho, pid, perturbation_label(&c.perturbation), rank + 1, c.method, c.mean_error_mm);
        }
    }
    out
}

/// Number of cells where `method` has the lowest mean error.
pub fn rank_one_count(report: &SweepReport, method: Method) -> (usize, usize) {
    let keys = report.cell_keys();
    let wins = keys
        .iter()
        .filter(|&&(rho, pid)| report.ranking(rho, pid).first().is_some_and(|c| c.method == method))
        .count();
    (wins, keys.len())
}

fn jsonl(report: &SweepReport) -> String {
    let mut out = serde_json::json!({ "header": header(report.master_seed) }).to_string();
    out.push('\n');
    for t in &report.trials {
        out.push_str(&serde_json::to_string(t).expect("serializable trial"));
        out.push('\n');
    }
    out
}

pub fn benchmark_report(cfg: &RunConfig) -> CliResult<SweepReport> {
    let base = cfg.trial_config().map_err(|e| from_core("", e))?;
    let env = cfg.environment()?;
    if cfg.sweep.n_trials == 0 {
        return Err(CliError::Config("sweep.n_trials must be at least 1".into()));
    }
    if cfg.sweep.rhos.is_empty() {
        return Err(CliError::Config("sweep.rhos must not be empty".into()));
    }
    let workers = cfg
        .sweep
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    run_sweep(&env, &base, &cfg.sweep.rhos, &cfg.sweep.perturbation_list(), cfg.sweep.n_trials, cfg.seed, workers)
        .map_err(|e| from_core("benchmark", e))
}

/// Writes `sweep.csv`, `ranking.csv` and `trials.jsonl`.
pub fn cmd_benchmark(common: &CommonArgs) -> CliResult<(Vec<PathBuf>, SweepReport)> {
    let (cfg, out) = prepare(common)?;
    let report = benchmark_report(&cfg)?;
    let files = vec![
        write_file(&out, "sweep.csv", &with_comment(cfg.seed, &report.to_csv()))?,
        write_file(&out, "ranking.csv", &with_comment(cfg.seed, &ranking_csv(&report)))?,
        write_file(&out, "trials.jsonl", &jsonl(&report))?,
    ];
    Ok((files, report))
}

pub fn run(cli: &Cli) -> CliResult<Vec<PathBuf>> {
    let files = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c)?,
        Command::Localize { common, data } => cmd_localize(common, data)?,
        Command::Benchmark(c) => {
            let (files, report) = cmd_benchmark(c)?;
            for m in report.methods() {
                let (wins, cells) = rank_one_count(&report, m);
                println!("{m}: lowest mean error in {wins}/{cells} cells");
            }
            files
        }
    };
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(files)
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(_) => EXIT_OK,
        Err(e) => {
            eprintln!("aploc: {e}");
            e.exit_code()
        }
    }
}
