//! Synthetic trials, localization scoring and Monte-Carlo sweeps.
//!
//! A trial draws a set of grid sources, gives them correlated sinusoid
//! mixtures as time courses, mixes them through the true forward model, adds
//! white noise at a Frobenius SNR, then localizes with every requested method
//! using a (possibly misregistered) forward model.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ap::{ap_localize, ApConfig, DipoleEstimate, HeldSource};
use crate::baselines::{rap_beamformer, rap_music, trap_music, DEFAULT_REG_SCALE};
use crate::error::{Error, Result};
use crate::geometry::{perturb_forward, tangent_basis, HeadPerturbation, OrientationMode, SensorArray, SourceGrid};
use crate::projection::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ap,
    RapMusic,
    TrapMusic,
    RapBeamformer,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ap, Method::RapMusic, Method::TrapMusic, Method::RapBeamformer];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ap => "ap",
            Method::RapMusic => "rap_music",
            Method::TrapMusic => "trap_music",
            Method::RapBeamformer => "rap_beamformer",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown method `{s}`")))
    }
}

/// Everything needed to generate and score one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrialConfig {
    pub seed: u64,
    pub n_sources: usize,
    pub rho: f64,
    pub snr_db: f64,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub freq_range_hz: (f64, f64),
    pub n_sinusoids: usize,
    /// Minimum pairwise distance between true sources (m).
    pub min_separation: f64,
    pub perturbation: Option<HeadPerturbation>,
    pub methods: Vec<Method>,
    pub orientation_mode: OrientationMode,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    /// Beamformer loading as a multiple of `trace(C) / M`.
    pub beamformer_reg_scale: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sources: 2,
            rho: 0.5,
            snr_db: 0.0,
            n_samples: 50,
            sample_rate_hz: 1000.0,
            freq_range_hz: (10.0, 30.0),
            n_sinusoids: 3,
            min_separation: 0.03,
            perturbation: None,
            methods: Method::ALL.to_vec(),
            orientation_mode: OrientationMode::Fixed,
            max_iterations: 20,
            convergence_tol: 0.0,
            beamformer_reg_scale: DEFAULT_REG_SCALE,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::Parameter("n_sources must be positive".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::Parameter("n_samples must be at least 1".into()));
        }
        if !(self.rho.abs() <= 1.0) {
            return Err(Error::Parameter(format!("rho {} must lie in [-1, 1]", self.rho)));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Parameter("snr_db must be finite".into()));
        }
        let (lo, hi) = self.freq_range_hz;
        let nyquist = self.sample_rate_hz / 2.0;
        if !(self.sample_rate_hz > 0.0 && lo > 0.0 && lo <= hi && hi < nyquist) {
            return Err(Error::Parameter(format!(
                "frequency range ({lo}, {hi}) Hz must lie inside (0, {nyquist}) Hz"
            )));
        }
        if self.n_sinusoids == 0 {
            return Err(Error::Parameter("n_sinusoids must be positive".into()));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::Parameter("min_separation must be non-negative".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Parameter("at least one method is required".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be at least 1".into()));
        }
        if !(self.beamformer_reg_scale >= 0.0) {
            return Err(Error::Parameter("beamformer_reg_scale must be non-negative".into()));
        }
        Ok(())
    }

    fn ap_config(&self) -> ApConfig {
        ApConfig {
            n_sources: self.n_sources,
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            orientation_mode: self.orientation_mode,
        }
    }
}

/// Source time courses and the correlation they actually achieved.
#[derive(Debug, Clone, PartialEq)]
pub struct Timecourses {
    pub signals: DMatrix<f64>,
    /// Mean pairwise Pearson correlation against source 1, `None` when
    /// undefined (one source or one sample).
    pub achieved_correlation: Option<f64>,
}

fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn scale_to_unit_power(x: &mut [f64]) {
    let p = mean_power(x);
    if p > 0.0 {
        let s = p.sqrt();
        x.iter_mut().for_each(|v| *v /= s);
    }
}

fn sinusoid_mixture(rng: &mut impl Rng, cfg: &TrialConfig) -> Vec<f64> {
    let (lo, hi) = cfg.freq_range_hz;
    let parts: Vec<(f64, f64)> =
        (0..cfg.n_sinusoids).map(|_| (rng.random_range(lo..=hi), rng.random_range(0.0..2.0 * PI))).collect();
    (0..cfg.n_samples)
        .map(|n| {
            let t = n as f64 / cfg.sample_rate_hz;
            parts.iter().map(|&(f, phase)| (2.0 * PI * f * t + phase).sin()).sum()
        })
        .collect()
}

fn center(x: &mut [f64]) {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= mean);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sample Pearson correlation, `None` when either input has no variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    center(&mut a);
    center(&mut b);
    let den = (dot(&a, &a) * dot(&b, &b)).sqrt();
    (den > 0.0).then(|| dot(&a, &b) / den)
}

/// Draws the source time courses of a trial from `rng`.
///
/// Source 1 is a centered unit-power sinusoid mixture. Every later source is
/// `ρ·s₁ + √(1−ρ²)·z`, with `z` an independent mixture made orthogonal (in
/// the sample inner product) to `s₁` and to earlier `z`s, so the sample
/// correlation with source 1 equals `ρ`. With a single sample there is
/// nothing to center and the raw mixtures are used.
pub fn generate_timecourses_with(rng: &mut impl Rng, cfg: &TrialConfig) -> Result<Timecourses> {
    cfg.validate()?;
    let (q, n) = (cfg.n_sources, cfg.n_samples);
    let mut raw: Vec<Vec<f64>> = (0..q).map(|_| sinusoid_mixture(rng, cfg)).collect();
    let centerable = n >= 2;
    if centerable {
        raw.iter_mut().for_each(|r| center(r));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
    for r in raw.iter_mut() {
        let before = dot(r, r).sqrt();
        let mut v = r.clone();
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let after = dot(&v, &v).sqrt();
        // keep the raw mixture when it has (numerically) no new direction
        if centerable && after > 1e-8 * before {
            v.iter_mut().for_each(|x| *x /= after);
            basis.push(v.clone());
            *r = v;
        }
        scale_to_unit_power(r);
    }
    let lead = raw[0].clone();
    let indep = (1.0 - cfg.rho * cfg.rho).max(0.0).sqrt();
    let mut signals = DMatrix::zeros(q, n);
    for (k, z) in raw.iter().enumerate() {
        let mut row: Vec<f64> = if k == 0 { lead.clone() } else { lead.iter().zip(z).map(|(a, b)| cfg.rho * a + indep * b).collect() };
        scale_to_unit_power(&mut row);
        for (t, v) in row.into_iter().enumerate() {
            signals[(k, t)] = v;
        }
    }
    let achieved_correlation = if q >= 2 {
        let first: Vec<f64> = signals.row(0).iter().copied().collect();
        let corrs: Option<Vec<f64>> =
            (1..q).map(|k| pearson(&first, &signals.row(k).iter().copied().collect::<Vec<_>>())).collect();
        corrs.map(|c| c.iter().sum::<f64>() / c.len() as f64)
    } else {
        None
    };
    Ok(Timecourses { signals, achieved_correlation })
}

/// Time courses seeded from `cfg.seed`.
pub fn generate_timecourses(cfg: &TrialConfig) -> Result<Timecourses> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_timecourses_with(&mut rng, cfg)
}

/// `Y = A S + N` with white Gaussian `N` scaled so that
/// `10 log10(‖AS‖²_F / ‖N‖²_F) = snr_db` exactly.
pub fn synthesize_recording(grid: &SourceGrid, truth: &[HeldSource], signals: &DMatrix<f64>, snr_db: f64, rng: &mut impl Rng) -> Result<Recording> {
    if truth.len() != signals.nrows() {
        return Err(Error::Parameter(format!("{} sources but {} signal rows", truth.len(), signals.nrows())));
    }
    if let Some(bad) = truth.iter().find(|h| h.grid_index >= grid.len()) {
        return Err(Error::Parameter(format!("grid index {} out of range", bad.grid_index)));
    }
    let m = grid.n_sensors();
    let mut a = DMatrix::zeros(m, truth.len());
    for (k, h) in truth.iter().enumerate() {
        a.set_column(k, &h.topography(grid));
    }
    let clean = a * signals;
    let signal_energy = clean.norm_squared();
    let mut noise = DMatrix::from_fn(m, signals.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    if !(signal_energy > 0.0) {
        return Err(Error::Degenerate("signal has zero energy; SNR is undefined".into()));
    }
    let target = signal_energy / 10f64.powf(snr_db / 10.0);
    noise *= (target / noise.norm_squared()).sqrt();
    Recording::new(clean + noise)
}

/// Optimal assignment for a square cost matrix; `result[i]` is the column
/// assigned to row `i`.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // shortest augmenting path with potentials, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        if owner[j] > 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    result
}

/// Per-source errors (mm, in truth order) under the minimum-total-distance
/// pairing of estimates with true locations, and their mean.
pub fn localization_error(estimates: &[Vector3<f64>], truth: &[Vector3<f64>]) -> Result<(Vec<f64>, f64)> {
    if estimates.len() != truth.len() {
        return Err(Error::Parameter(format!("{} estimates for {} true sources", estimates.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::Parameter("no sources to score".into()));
    }
    let n = truth.len();
    let cost = DMatrix::from_fn(n, n, |i, j| (truth[i] - estimates[j]).norm());
    let assignment = min_cost_assignment(&cost);
    let errors: Vec<f64> = (0..n).map(|i| cost[(i, assignment[i])] * 1e3).collect();
    let mean = errors.iter().sum::<f64>() / n as f64;
    Ok((errors, mean))
}

/// True forward model plus the grid used to draw and localize sources.
#[derive(Debug, Clone)]
pub struct Environment {
    pub array: SensorArray,
    pub grid: SourceGrid,
}

impl Environment {
    pub fn new(array: SensorArray, grid: SourceGrid) -> Result<Self> {
        if grid.n_sensors() != array.len() {
            return Err(Error::Parameter("grid lead fields were built for a different array".into()));
        }
        Ok(Self { array, grid })
    }

    /// The grid as seen through a misregistered array: same points and
    /// orientations, lead fields from the perturbed sensors.
    pub fn localization_grid(&self, pert: Option<&HeadPerturbation>) -> Result<SourceGrid> {
        match pert {
            None => Ok(self.grid.clone()),
            Some(p) => self.grid.with_array(&perturb_forward(&self.array, p)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodReport {
    pub method: Method,
    pub grid_indices: Vec<usize>,
    pub errors_mm: Vec<f64>,
    pub mean_error_mm: Option<f64>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub seed: u64,
    pub rho: f64,
    pub perturbation: Option<HeadPerturbation>,
    pub truth_indices: Vec<usize>,
    pub achieved_correlation: Option<f64>,
    pub methods: Vec<MethodReport>,
}

impl TrialReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

/// Draws `count` distinct grid sources at least `min_separation` apart.
pub fn draw_sources(grid: &SourceGrid, count: usize, min_separation: f64, mode: OrientationMode, rng: &mut impl Rng) -> Result<Vec<HeldSource>> {
    if count > grid.len() {
        return Err(Error::Parameter(format!("cannot draw {count} sources from {} points", grid.len())));
    }
    let mut picked: Vec<usize> = Vec::with_capacity(count);
    for k in 0..count {
        let candidates: Vec<usize> = (0..grid.len())
            .filter(|&g| picked.iter().all(|&p| p != g && (grid.point(p) - grid.point(g)).norm() >= min_separation))
            .collect();
        if candidates.is_empty() {
            return Err(Error::Degenerate(format!("no grid point left for source {} at separation {min_separation} m", k + 1)));
        }
        picked.push(candidates[rng.random_range(0..candidates.len())]);
    }
    picked
        .into_iter()
        .map(|g| {
            let orientation = match (mode, grid.orientation(g)) {
                (OrientationMode::Fixed, Some(q)) => q,
                (OrientationMode::Fixed, None) => {
                    return Err(Error::Parameter("fixed orientation mode needs grid orientations".into()));
                }
                (OrientationMode::Free, _) => {
                    let (t1, t2) = tangent_basis(&grid.point(g));
                    let angle: f64 = rng.random_range(0.0..2.0 * PI);
                    t1 * angle.cos() + t2 * angle.sin()
                }
            };
            Ok(HeldSource { grid_index: g, orientation })
        })
        .collect()
}

fn run_method(method: Method, cfg: &TrialConfig, grid: &SourceGrid, rec: &Recording) -> Result<(Vec<DipoleEstimate>, Option<bool>, Option<usize>)> {
    let q = cfg.n_sources;
    let mode = cfg.orientation_mode;
    match method {
        Method::Ap => {
            let r = ap_localize(grid, rec, &cfg.ap_config())?;
            Ok((r.estimates, Some(r.converged), Some(r.iterations)))
        }
        Method::RapMusic => Ok((rap_music(grid, rec, q, mode)?.estimates, None, None)),
        Method::TrapMusic => Ok((trap_music(grid, rec, q, mode)?.estimates, None, None)),
        Method::RapBeamformer => {
            let c_trace = rec.data().norm_squared();
            let reg = cfg.beamformer_reg_scale * c_trace / grid.n_sensors() as f64;
            Ok((rap_beamformer(grid, rec, q, mode, Some(reg))?.estimates, None, None))
        }
    }
}

/// Ground truth and data of one synthetic trial.
#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    pub truth: Vec<HeldSource>,
    pub timecourses: Timecourses,
    pub recording: Recording,
}

/// Draws sources, time courses and noise for `cfg.seed`, always with the
/// true (unperturbed) forward model.
pub fn synthesize_trial(cfg: &TrialConfig, env: &Environment) -> Result<SyntheticTrial> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = draw_sources(&env.grid, cfg.n_sources, cfg.min_separation, cfg.orientation_mode, &mut rng)?;
    let timecourses = generate_timecourses_with(&mut rng, cfg)?;
    let recording = synthesize_recording(&env.grid, &truth, &timecourses.signals, cfg.snr_db, &mut rng)?;
    Ok(SyntheticTrial { truth, timecourses, recording })
}

/// Generates one trial from `cfg.seed` and scores each method on `loc_grid`.
pub fn run_trial_on(cfg: &TrialConfig, env: &Environment, loc_grid: &SourceGrid) -> Result<TrialReport> {
    let SyntheticTrial { truth, timecourses: tc, recording: rec } = synthesize_trial(cfg, env)?;
    let truth_points: Vec<Vector3<f64>> = truth.iter().map(|h| env.grid.point(h.grid_index)).collect();
    let methods = cfg
        .methods
        .iter()
        .map(|&method| match run_method(method, cfg, loc_grid, &rec) {
            Ok((est, converged, iterations)) => {
                let points: Vec<Vector3<f64>> = est.iter().map(|e| loc_grid.point(e.grid_index)).collect();
                let (errors_mm, mean) = localization_error(&points, &truth_points)?;
                Ok(MethodReport {
                    method,
                    grid_indices: est.iter().map(|e| e.grid_index).collect(),
                    errors_mm,
                    mean_error_mm: Some(mean),
                    converged,
                    iterations,
                    failure: None,
                })
            }
            Err(e) => Ok(MethodReport {
                method,
                grid_indices: Vec::new(),
                errors_mm: Vec::new(),
                mean_error_mm: None,
                converged: None,
                iterations: None,
                failure: Some(e.to_string()),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrialReport {
        seed: cfg.seed,
        rho: cfg.rho,
        perturbation: cfg.perturbation,
        truth_indices: truth.iter().map(|h| h.grid_index).collect(),
        achieved_correlation: tc.achieved_correlation,
        methods,
    })
}

/// Runs one trial, localizing through `cfg.perturbation` when set.
pub fn run_trial(cfg: &TrialConfig, env: &Environment) -> Result<TrialReport> {
    let loc_grid = env.localization_grid(cfg.perturbation.as_ref())?;
    run_trial_on(cfg, env, &loc_grid)
}

/// Seed of trial `index` under `master`. Trials with the same index share a
/// seed in every cell, so cells are compared on matched draws.
pub fn trial_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub rho: f64,
    /// 1-based position in the requested perturbation list.
    pub perturbation_id: usize,
    pub perturbation: Option<HeadPerturbation>,
    pub method: Method,
    pub mean_error_mm: f64,
    pub stderr_mm: f64,
    pub n_trials: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub master_seed: u64,
    pub cells: Vec<SweepCell>,
    pub trials: Vec<TrialReport>,
}

impl SweepReport {
    pub fn cell(&self, rho: f64, perturbation_id: usize, method: Method) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.rho == rho && c.perturbation_id == perturbation_id && c.method == method)
    }

    /// Methods in configured order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.method) {
                out.push(c.method);
            }
        }
        out
    }

    /// `(rho, perturbation_id)` pairs in sweep order.
    pub fn cell_keys(&self) -> Vec<(f64, usize)> {
        let mut keys: Vec<(f64, usize)> = Vec::new();
        for c in &self.cells {
            if !keys.iter().any(|&(r, p)| r == c.rho && p == c.perturbation_id) {
                keys.push((c.rho, c.perturbation_id));
            }
        }
        keys
    }

    /// Methods sorted by mean error (ascending) for one cell; ties keep the
    /// configured order.
    pub fn ranking(&self, rho: f64, perturbation_id: usize) -> Vec<&SweepCell> {
        let mut cells: Vec<&SweepCell> =
            self.cells.iter().filter(|c| c.rho == rho && c.perturbation_id == perturbation_id).collect();
        cells.sort_by(|a, b| a.mean_error_mm.total_cmp(&b.mean_error_mm));
        cells
    }

    /// CSV `rho,perturbation_id,method,mean_error_mm,stderr_mm,n_trials`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rho,perturbation_id,method,mean_error_mm,stderr_mm,n_trials\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.rho, c.perturbation_id, c.method, c.mean_error_mm, c.stderr_mm, c.n_trials
            ));
        }
        out
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Full factorial sweep over `rhos × perturbations`, `n_trials` per cell.
///
/// `workers` caps the thread pool; results do not depend on it.
pub fn run_sweep(
    env: &Environment,
    base: &TrialConfig,
    rhos: &[f64],
    perturbations: &[Option<HeadPerturbation>],
    n_trials: usize,
    master_seed: u64,
    workers: usize,
) -> Result<SweepReport> {
    if n_trials == 0 {
        return Err(Error::Parameter("n_trials must be at least 1".into()));
    }
    if rhos.is_empty() || perturbations.is_empty() {
        return Err(Error::Parameter("sweep needs at least one rho and one perturbation entry".into()));
    }
    base.validate()?;
    for &rho in rhos {
        TrialConfig { rho, ..base.clone() }.validate()?;
    }
    let grids: Vec<SourceGrid> = perturbations.iter().map(|p| env.localization_grid(p.as_ref())).collect::<Result<_>>()?;
    let mut jobs = Vec::with_capacity(rhos.len() * perturbations.len() * n_trials);
    for &rho in rhos {
        for (pi, pert) in perturbations.iter().enumerate() {
            for t in 0..n_trials {
                let cfg = TrialConfig { seed: trial_seed(master_seed, t), rho, perturbation: *pert, ..base.clone() };
                jobs.push((pi, cfg));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Numeric(format!("thread pool: {e}")))?;
    let trials: Vec<TrialReport> =
        pool.install(|| jobs.par_iter().map(|(pi, cfg)| run_trial_on(cfg, env, &grids[*pi])).collect::<Result<Vec<_>>>())?;

    let mut cells = Vec::new();
    let mut chunk = trials.chunks(n_trials);
    for &rho in rhos {
        for (pi, pert) in perturbations.iter().enumerate() {
            let block = chunk.next().expect("one chunk per cell");
            let mut by_method: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            let mut failed: BTreeMap<usize, usize> = BTreeMap::new();
            for trial in block {
                for (k, r) in trial.methods.iter().enumerate() {
                    match r.mean_error_mm {
                        Some(e) => by_method.entry(k).or_default().push(e),
                        None => *failed.entry(k).or_default() += 1,
                    }
                }
            }
            for (k, &method) in base.methods.iter().enumerate() {
                let errs = by_method.get(&k).cloned().unwrap_or_default();
                let (mean, se) = mean_and_stderr(&errs);
                cells.push(SweepCell {
                    rho,
                    perturbation_id: pi + 1,
                    perturbation: *pert,
                    method,
                    mean_error_mm: mean,
                    stderr_mm: se,
                    n_trials: errs.len(),
                    n_failed: failed.get(&k).copied().unwrap_or(0),
                });
            }
        }
    }
    Ok(SweepReport { master_seed, cells, trials })
}
