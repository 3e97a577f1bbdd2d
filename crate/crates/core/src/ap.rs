//! Alternating-projection least-squares localization.
//!
//! Sources are placed one at a time by a greedy sequential scan. Each later
//! iteration revisits the sources in order, re-solving the single-source
//! problem for source `q` with every other source projected out of the data
//! at its most recent estimate. Each exact maximization can only raise
//! `tr(Π_A C)`, and the grid is finite, so the sweep reaches a fixed point.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, OrientationMode, SourceGrid};
use crate::linalg::{full_rank_basis, max_generalized_eigen};
use crate::projection::{covariance, objective, Covariance, Recording, TopographySet, DEFLATED_OUT, DEFLATION_FLOOR};
use crate::scan::{scan, RatioLocalizer, ScanOutcome};

/// Relative slack allowed when checking that the objective never decreases.
/// The objective is recomputed from scratch after each step, so successive
/// values carry independent rounding.
pub const MONOTONE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApConfig {
    pub n_sources: usize,
    pub max_iterations: usize,
    /// Largest per-source displacement (m) still counted as "not moved".
    pub convergence_tol: f64,
    pub orientation_mode: OrientationMode,
}

impl Default for ApConfig {
    fn default() -> Self {
        Self { n_sources: 2, max_iterations: 20, convergence_tol: 0.0, orientation_mode: OrientationMode::Fixed }
    }
}

impl ApConfig {
    pub fn new(n_sources: usize, orientation_mode: OrientationMode) -> Self {
        Self { n_sources, orientation_mode, ..Self::default() }
    }

    fn validate(&self, grid: &SourceGrid) -> Result<()> {
        if self.n_sources == 0 {
            return Err(Error::Parameter("n_sources must be positive".into()));
        }
        if self.n_sources >= grid.n_sensors() {
            return Err(Error::Parameter(format!(
                "n_sources {} must be below the sensor count {}",
                self.n_sources,
                grid.n_sensors()
            )));
        }
        if self.n_sources > grid.len() {
            return Err(Error::Parameter(format!("grid has {} points for {} sources", grid.len(), self.n_sources)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Parameter("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::Parameter("convergence_tol must be non-negative".into()));
        }
        check_mode(grid, self.orientation_mode)
    }
}

pub(crate) fn check_mode(grid: &SourceGrid, mode: OrientationMode) -> Result<()> {
    if mode == OrientationMode::Fixed && grid.orientations().is_none() {
        return Err(Error::Parameter("fixed orientation mode needs a grid with stored orientations".into()));
    }
    Ok(())
}

/// One localized dipole.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DipoleEstimate {
    pub grid_index: usize,
    pub location: Vector3<f64>,
    pub orientation: Vector3<f64>,
    pub timecourse: DVector<f64>,
}

/// One accepted update: iteration `0` is the sequential initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApStep {
    pub iteration: usize,
    pub source: usize,
    pub grid_index: usize,
    pub objective: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ApTrace {
    pub steps: Vec<ApStep>,
}

impl ApTrace {
    pub fn objectives(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.objective).collect()
    }

    /// Index of the first step whose objective falls below its predecessor.
    pub fn first_decrease(&self) -> Option<usize> {
        self.steps.windows(2).position(|w| w[1].objective < w[0].objective - MONOTONE_TOL * w[0].objective.abs()).map(|i| i + 1)
    }

    pub fn is_monotone(&self) -> bool {
        self.first_decrease().is_none()
    }

    pub fn final_objective(&self) -> Option<f64> {
        self.steps.last().map(|s| s.objective)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub estimates: Vec<DipoleEstimate>,
    pub trace: ApTrace,
    pub converged: bool,
    /// Refinement sweeps performed after initialization.
    pub iterations: usize,
}

/// A source held at a grid point with a moment direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldSource {
    pub grid_index: usize,
    pub orientation: Vector3<f64>,
}

impl HeldSource {
    pub fn topography(&self, grid: &SourceGrid) -> DVector<f64> {
        grid.leadfield(self.grid_index) * self.orientation
    }
}

pub(crate) fn topography_set(grid: &SourceGrid, held: &[HeldSource]) -> Result<TopographySet> {
    let m = grid.n_sensors();
    let mut a = DMatrix::zeros(m, held.len());
    for (k, h) in held.iter().enumerate() {
        a.set_column(k, &h.topography(grid));
    }
    TopographySet::with_sources(a, held.iter().map(|h| h.grid_index).collect())
}

/// `I − Π_A` for the held sources (identity when none are held).
pub(crate) fn complement(grid: &SourceGrid, held: &[HeldSource]) -> Result<DMatrix<f64>> {
    let m = grid.n_sensors();
    let u = topography_set(grid, held)?.basis()?;
    Ok(DMatrix::identity(m, m) - &u * u.transpose())
}

fn deflated_scan(grid: &SourceGrid, q_proj: &DMatrix<f64>, c: &Covariance, mode: OrientationMode, excluded: &[usize]) -> Result<ScanOutcome> {
    let numerator = q_proj * c.matrix() * q_proj;
    let numerator = (&numerator + numerator.transpose()) * 0.5;
    scan(grid, mode, &RatioLocalizer { numerator: &numerator, denominator: None, deflator: q_proj }, excluded)
}

/// The grid point maximizing `(lᵀQCQl)/(lᵀQl)` (fixed) or its maximum over
/// the moment (free). Ties go to the lowest index.
pub fn scan_argmax(grid: &SourceGrid, q_proj: &DMatrix<f64>, c: &Covariance, mode: OrientationMode) -> Result<(usize, f64)> {
    check_mode(grid, mode)?;
    if grid.is_empty() {
        return Err(Error::Parameter("empty grid".into()));
    }
    let out = deflated_scan(grid, q_proj, c, mode, &[])?;
    Ok((out.index, out.value))
}

/// Free-orientation localizer at one point: the top generalized eigenpair of
/// `(LᵀQCQL, LᵀQL)`. Returns the unit moment with its largest-magnitude
/// component positive, and the localizer value. `Ok(None)` means the lead
/// field is deflated out.
pub fn solve_orientation(lead: &DMatrix<f64>, q_proj: &DMatrix<f64>, c: &Covariance) -> Result<Option<(Vector3<f64>, f64)>> {
    if lead.ncols() != 3 || lead.nrows() != q_proj.nrows() || c.dim() != lead.nrows() {
        return Err(Error::Parameter("lead field, projector and covariance dimensions disagree".into()));
    }
    let ql = q_proj * lead;
    let gram = lead.transpose() * &ql;
    let gram = (&gram + gram.transpose()) * 0.5;
    let num = ql.transpose() * c.matrix() * &ql;
    let num = (&num + num.transpose()) * 0.5;
    let scale = (lead.transpose() * lead).symmetric_eigenvalues().max();
    if !(gram.symmetric_eigenvalues().max() >= DEFLATION_FLOOR * scale) {
        return Ok(None);
    }
    Ok(max_generalized_eigen(&num, &gram, DEFLATION_FLOOR * scale)
        .map(|(value, v)| (canonical_sign(Vector3::new(v[0], v[1], v[2])), value)))
}

fn held_from(out: &ScanOutcome, g: usize) -> HeldSource {
    HeldSource { grid_index: g, orientation: out.orientations[g] }
}

/// Greedy sequential placement: source 1 maximizes the undeflated localizer;
/// source `q` maximizes it with the first `q − 1` sources projected out.
pub fn ap_initialize(grid: &SourceGrid, c: &Covariance, cfg: &ApConfig) -> Result<(Vec<HeldSource>, ApTrace)> {
    cfg.validate(grid)?;
    if c.dim() != grid.n_sensors() {
        return Err(Error::Parameter(format!("covariance is {0}x{0}, grid expects {1} sensors", c.dim(), grid.n_sensors())));
    }
    if !(c.trace() > 0.0) {
        return Err(Error::Degenerate("data have zero energy".into()));
    }
    let mut held: Vec<HeldSource> = Vec::with_capacity(cfg.n_sources);
    let mut trace = ApTrace::default();
    for q in 0..cfg.n_sources {
        let q_proj = complement(grid, &held)?;
        let excluded: Vec<usize> = held.iter().map(|h| h.grid_index).collect();
        let out = deflated_scan(grid, &q_proj, c, cfg.orientation_mode, &excluded).map_err(|e| match e {
            Error::Degenerate(msg) => Error::Degenerate(format!("initializing source {}: {msg}", q + 1)),
            other => other,
        })?;
        held.push(held_from(&out, out.index));
        trace.steps.push(ApStep {
            iteration: 0,
            source: q,
            grid_index: out.index,
            objective: objective(&topography_set(grid, &held)?, c)?,
        });
    }
    Ok((held, trace))
}

/// One refinement sweep over all sources, updating `held` in place.
/// Returns the largest displacement of any source (m).
pub fn refine_sweep(grid: &SourceGrid, c: &Covariance, mode: OrientationMode, held: &mut [HeldSource], iteration: usize, trace: &mut ApTrace) -> Result<f64> {
    let mut max_move: f64 = 0.0;
    for q in 0..held.len() {
        let others: Vec<HeldSource> = held.iter().enumerate().filter(|&(i, _)| i != q).map(|(_, h)| *h).collect();
        let q_proj = complement(grid, &others)?;
        let excluded: Vec<usize> = others.iter().map(|h| h.grid_index).collect();
        let out = deflated_scan(grid, &q_proj, c, mode, &excluded)?;
        let incumbent = held[q].grid_index;
        // an incumbent tied with the maximum keeps its place
        let chosen = if out.ties_with_best(incumbent) { incumbent } else { out.index };
        let moved = (grid.point(chosen) - grid.point(incumbent)).norm();
        max_move = max_move.max(moved);
        held[q] = held_from(&out, chosen);
        trace.steps.push(ApStep {
            iteration,
            source: q,
            grid_index: chosen,
            objective: objective(&topography_set(grid, held)?, c)?,
        });
    }
    Ok(max_move)
}

/// Runs initialization then cyclic refinement until no source moves more
/// than `convergence_tol` or `max_iterations` sweeps have run.
pub fn ap_localize(grid: &SourceGrid, rec: &Recording, cfg: &ApConfig) -> Result<ApResult> {
    if rec.n_sensors() != grid.n_sensors() {
        return Err(Error::Parameter(format!(
            "recording has {} sensors, grid expects {}",
            rec.n_sensors(),
            grid.n_sensors()
        )));
    }
    let c = covariance(rec);
    let (mut held, mut trace) = ap_initialize(grid, &c, cfg)?;
    let mut converged = false;
    let mut iterations = 0;
    for j in 1..=cfg.max_iterations {
        iterations = j;
        let moved = refine_sweep(grid, &c, cfg.orientation_mode, &mut held, j, &mut trace)?;
        if moved <= cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    if let Some(step) = trace.first_decrease() {
        return Err(Error::Numeric(format!("objective decreased at trace step {step}")));
    }
    let estimates = finalize(grid, &held, rec)?;
    Ok(ApResult { estimates, trace, converged, iterations })
}

/// Attaches recovered time courses to held sources.
pub(crate) fn finalize(grid: &SourceGrid, held: &[HeldSource], rec: &Recording) -> Result<Vec<DipoleEstimate>> {
    let set = topography_set(grid, held)?;
    let s = recover_sources(&set, rec)?;
    Ok(held
        .iter()
        .enumerate()
        .map(|(k, h)| DipoleEstimate {
            grid_index: h.grid_index,
            location: grid.point(h.grid_index),
            orientation: h.orientation,
            timecourse: s.row(k).transpose(),
        })
        .collect())
}

/// Least-squares source amplitudes `Ŝ = (AᵀA)⁻¹AᵀY`, via the QR factors of `A`.
pub fn recover_sources(a: &TopographySet, rec: &Recording) -> Result<DMatrix<f64>> {
    if a.n_sensors() != rec.n_sensors() {
        return Err(Error::Parameter("topographies and recording disagree on sensor count".into()));
    }
    if a.is_empty() {
        return Ok(DMatrix::zeros(0, rec.n_samples()));
    }
    // rank check with column naming
    full_rank_basis(a.columns())?;
    let qr = a.columns().clone().qr();
    let k = a.len();
    let q = qr.q();
    let r = qr.r();
    let rhs = q.columns(0, k).transpose() * rec.data();
    r.solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Degenerate("triangular factor is singular".into()))
}

impl From<&DipoleEstimate> for HeldSource {
    fn from(e: &DipoleEstimate) -> Self {
        HeldSource { grid_index: e.grid_index, orientation: e.orientation }
    }
}

/// Value the deflated localizer assigns to `g` with the given sources held.
pub fn deflated_value(grid: &SourceGrid, held: &[HeldSource], c: &Covariance, mode: OrientationMode, g: usize) -> Result<f64> {
    let q_proj = complement(grid, held)?;
    Ok(match mode {
        OrientationMode::Fixed => {
            let l = grid.fixed_topography(g).ok_or_else(|| Error::Parameter("grid has no stored orientations".into()))?;
            crate::projection::localizer_deflated(&l, &q_proj, c)
        }
        OrientationMode::Free => solve_orientation(grid.leadfield(g), &q_proj, c)?.map(|(_, v)| v).unwrap_or(DEFLATED_OUT),
    })
}
