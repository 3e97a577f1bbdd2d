//! Recursive scanning baselines: RAP-MUSIC, truncated RAP-MUSIC and the
//! RAP beamformer.
//!
//! All three find one source per recursion. After each pick the found
//! topographies are projected out (of the subspace for the MUSIC variants,
//! of the data for the beamformer) before the next scan.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::ap::{check_mode, complement, finalize, HeldSource};
use crate::error::{Error, Result};
use crate::geometry::{OrientationMode, SourceGrid};
use crate::linalg::{range_basis, sorted_eigen};
use crate::projection::{covariance, Covariance, Recording};
use crate::scan::{scan, RatioLocalizer};
use crate::ap::DipoleEstimate;

/// Singular values of `P⊥ U_s` below this fraction of the largest are dropped.
const SUBSPACE_TOL: f64 = 1e-8;

/// Default diagonal loading as a fraction of `trace(C) / M`.
pub const DEFAULT_REG_SCALE: f64 = 1e-3;

/// An orthonormal signal-subspace basis `U_s` (`M×R`).
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceModel {
    basis: DMatrix<f64>,
}

impl SubspaceModel {
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub estimates: Vec<DipoleEstimate>,
    /// Peak localizer value found at each recursion.
    pub localizer_values: Vec<f64>,
}

/// The top-`rank` eigenvectors of `C`.
pub fn signal_subspace(c: &Covariance, rank: usize) -> Result<SubspaceModel> {
    if rank == 0 || rank >= c.dim() {
        return Err(Error::Parameter(format!("subspace rank {rank} must lie in [1, {})", c.dim())));
    }
    let (_, vecs) = sorted_eigen(c.matrix());
    Ok(SubspaceModel { basis: vecs.columns(0, rank).into_owned() })
}

fn validate(grid: &SourceGrid, rec: &Recording, q: usize, mode: OrientationMode) -> Result<()> {
    check_mode(grid, mode)?;
    if grid.is_empty() {
        return Err(Error::Parameter("empty grid".into()));
    }
    if q == 0 || q >= grid.n_sensors() {
        return Err(Error::Parameter(format!("source count {q} must lie in [1, {})", grid.n_sensors())));
    }
    if q > grid.len() {
        return Err(Error::Parameter(format!("grid has {} points for {q} sources", grid.len())));
    }
    if rec.n_sensors() != grid.n_sensors() {
        return Err(Error::Parameter(format!(
            "recording has {} sensors, grid expects {}",
            rec.n_sensors(),
            grid.n_sensors()
        )));
    }
    if rec.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("data have zero energy".into()));
    }
    Ok(())
}

/// Which subspace each MUSIC recursion correlates against.
#[derive(Clone, Copy)]
enum Truncation {
    /// Keep every non-null direction of `P⊥ U_s`.
    None,
    /// Keep the `R − k` dominant directions at recursion `k` (0-based).
    PerRecursion,
}

fn recursive_music(grid: &SourceGrid, rec: &Recording, q: usize, mode: OrientationMode, truncation: Truncation) -> Result<ScanResult> {
    validate(grid, rec, q, mode)?;
    let c = covariance(rec);
    let subspace = signal_subspace(&c, q)?;
    let mut held: Vec<HeldSource> = Vec::with_capacity(q);
    let mut peaks = Vec::with_capacity(q);
    for k in 0..q {
        let deflator = complement(grid, &held)?;
        let keep = match truncation {
            Truncation::None => subspace.rank(),
            Truncation::PerRecursion => subspace.rank() - k,
        };
        let projected = range_basis(&(&deflator * subspace.basis()), SUBSPACE_TOL, keep);
        let numerator = &projected * projected.transpose();
        let excluded: Vec<usize> = held.iter().map(|h| h.grid_index).collect();
        let out = scan(grid, mode, &RatioLocalizer { numerator: &numerator, denominator: None, deflator: &deflator }, &excluded)
            .map_err(|e| recursion_error(e, k))?;
        peaks.push(out.value.max(0.0).sqrt());
        held.push(HeldSource { grid_index: out.index, orientation: out.orientation });
    }
    Ok(ScanResult { estimates: finalize(grid, &held, rec)?, localizer_values: peaks })
}

fn recursion_error(e: Error, k: usize) -> Error {
    match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("recursion {}: {msg}", k + 1)),
        other => other,
    }
}

/// RAP-MUSIC with signal-subspace rank `R = Q`. The reported localizer
/// values are subspace correlations in `[0, 1]`.
pub fn rap_music(grid: &SourceGrid, rec: &Recording, q: usize, mode: OrientationMode) -> Result<ScanResult> {
    recursive_music(grid, rec, q, mode, Truncation::None)
}

/// Truncated RAP-MUSIC: recursion `k` correlates against the `R − k + 1`
/// dominant directions of the projected signal subspace.
pub fn trap_music(grid: &SourceGrid, rec: &Recording, q: usize, mode: OrientationMode) -> Result<ScanResult> {
    recursive_music(grid, rec, q, mode, Truncation::PerRecursion)
}

/// Recursive beamformer. Each recursion scans
/// `l'ᵀl' / (l'ᵀ (C' + reg·I)⁻¹ l')` where `l' = P⊥ l` and `C'` is the
/// covariance of the deflated data `P⊥ Y`. `reg = None` picks
/// `DEFAULT_REG_SCALE · trace(C) / M`.
pub fn rap_beamformer(grid: &SourceGrid, rec: &Recording, q: usize, mode: OrientationMode, reg: Option<f64>) -> Result<ScanResult> {
    validate(grid, rec, q, mode)?;
    let m = grid.n_sensors();
    let c = covariance(rec);
    let reg = reg.unwrap_or(DEFAULT_REG_SCALE * c.trace() / m as f64);
    if !(reg.is_finite() && reg >= 0.0) {
        return Err(Error::Parameter(format!("regularization {reg} must be finite and non-negative")));
    }
    let mut held: Vec<HeldSource> = Vec::with_capacity(q);
    let mut peaks = Vec::with_capacity(q);
    for k in 0..q {
        let deflator = complement(grid, &held)?;
        let y = &deflator * rec.data();
        let loaded = &y * y.transpose() + DMatrix::<f64>::identity(m, m) * reg;
        let inv = symmetric_inverse(&loaded)?;
        let denominator = &deflator * inv * &deflator;
        let denominator = (&denominator + denominator.transpose()) * 0.5;
        let excluded: Vec<usize> = held.iter().map(|h| h.grid_index).collect();
        let out = scan(
            grid,
            mode,
            &RatioLocalizer { numerator: &deflator, denominator: Some(&denominator), deflator: &deflator },
            &excluded,
        )
        .map_err(|e| recursion_error(e, k))?;
        peaks.push(out.value);
        held.push(HeldSource { grid_index: out.index, orientation: out.orientation });
    }
    Ok(ScanResult { estimates: finalize(grid, &held, rec)?, localizer_values: peaks })
}

fn symmetric_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sorted_eigen(a);
    let top = vals[0];
    let bottom = vals[vals.len() - 1];
    if !(bottom > 1e-14 * top) || !top.is_finite() {
        return Err(Error::Numeric(format!("regularized covariance is singular (λmin = {bottom}, λmax = {top})")));
    }
    let inv_vals = DVector::from_iterator(vals.len(), vals.iter().map(|v| 1.0 / v));
    Ok(&vecs * DMatrix::from_diagonal(&inv_vals) * vecs.transpose())
}
