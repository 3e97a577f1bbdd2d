//! Exhaustive grid scans of quadratic-ratio localizers.
//!
//! Every localizer in this crate has the form
//! `(lᵀ N l) / (lᵀ D l)` for some symmetric `N`, `D`, evaluated either on the
//! fixed topography of each grid point or maximized over the moment of its
//! lead field (a 3×3 generalized eigenproblem). A point is skipped when its
//! topography lies in the span being deflated, i.e. `lᵀ P⊥ l < floor · lᵀ l`.

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{canonical_sign, OrientationMode, SourceGrid};
use crate::linalg::max_generalized_eigen;
use crate::projection::{DEFLATED_OUT, DEFLATION_FLOOR};

/// Values within this relative distance of the maximum count as ties.
pub const TIE_TOL: f64 = 1e-12;

/// A localizer `(lᵀ N l) / (lᵀ D l)` gated by the deflator `P⊥`.
pub struct RatioLocalizer<'a> {
    pub numerator: &'a DMatrix<f64>,
    /// `None` means the deflator itself is the denominator.
    pub denominator: Option<&'a DMatrix<f64>>,
    pub deflator: &'a DMatrix<f64>,
}

/// Per-point localizer values and the winning point.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub index: usize,
    pub value: f64,
    pub orientation: Vector3<f64>,
    pub values: Vec<f64>,
    /// Best moment per point (free mode) or the stored orientation (fixed).
    pub orientations: Vec<Vector3<f64>>,
}

impl ScanOutcome {
    /// True when `g` scores within the tie tolerance of the winner.
    pub fn ties_with_best(&self, g: usize) -> bool {
        let v = self.values[g];
        v.is_finite() && v >= self.value - TIE_TOL * self.value.abs()
    }
}

/// Evaluates the localizer at every grid point and returns the maximizer.
///
/// Points in `excluded` score [`DEFLATED_OUT`]. Among values within
/// [`TIE_TOL`] of the maximum the lowest index wins.
pub fn scan(grid: &SourceGrid, mode: OrientationMode, loc: &RatioLocalizer<'_>, excluded: &[usize]) -> Result<ScanOutcome> {
    let m = grid.n_sensors();
    for mat in [Some(loc.numerator), loc.denominator, Some(loc.deflator)].into_iter().flatten() {
        if mat.shape() != (m, m) {
            return Err(Error::Parameter(format!("localizer matrix is {:?}, expected {m}x{m}", mat.shape())));
        }
    }
    let (mut values, orientations) = match mode {
        OrientationMode::Fixed => scan_fixed(grid, loc)?,
        OrientationMode::Free => scan_free(grid, loc),
    };
    for &g in excluded {
        if g < values.len() {
            values[g] = DEFLATED_OUT;
        }
    }
    let best = values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !best.is_finite() {
        return Err(Error::Degenerate("every grid point is deflated out".into()));
    }
    let index = values
        .iter()
        .position(|&v| v.is_finite() && v >= best - TIE_TOL * best.abs())
        .expect("maximum is attained");
    Ok(ScanOutcome { index, value: values[index], orientation: orientations[index], values, orientations })
}

fn column_dots(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().zip(b.column_iter()).map(|(x, y)| x.dot(&y)).collect()
}

fn scan_fixed(grid: &SourceGrid, loc: &RatioLocalizer<'_>) -> Result<(Vec<f64>, Vec<Vector3<f64>>)> {
    let topo = grid
        .topography_matrix()
        .ok_or_else(|| Error::Parameter("fixed-orientation scan needs a grid with stored orientations".into()))?;
    let deflated = loc.deflator * topo;
    let numer = loc.numerator * topo;
    let gate = column_dots(topo, &deflated);
    let num = column_dots(topo, &numer);
    let den = match loc.denominator {
        Some(d) => column_dots(topo, &(d * topo)),
        None => gate.clone(),
    };
    let values = (0..grid.len())
        .map(|g| {
            let norm2 = topo.column(g).norm_squared();
            if !(gate[g] >= DEFLATION_FLOOR * norm2) || !(den[g] > 0.0) {
                DEFLATED_OUT
            } else {
                num[g] / den[g]
            }
        })
        .collect();
    Ok((values, grid.orientations().expect("fixed grid").to_vec()))
}

fn block_gram(lead: &DMatrix<f64>, mapped: &DMatrix<f64>, g: usize) -> DMatrix<f64> {
    let a = lead.columns(3 * g, 3);
    let b = mapped.columns(3 * g, 3);
    let h = a.transpose() * b;
    (&h + h.transpose()) * 0.5
}

fn scan_free(grid: &SourceGrid, loc: &RatioLocalizer<'_>) -> (Vec<f64>, Vec<Vector3<f64>>) {
    let lead = grid.leadfield_matrix();
    let deflated = loc.deflator * lead;
    let numer = loc.numerator * lead;
    let denom = loc.denominator.map(|d| d * lead);
    let mut values = Vec::with_capacity(grid.len());
    let mut orientations = Vec::with_capacity(grid.len());
    for g in 0..grid.len() {
        match free_point(lead, &deflated, &numer, denom.as_ref(), g) {
            Some((v, q)) => {
                values.push(v);
                orientations.push(q);
            }
            None => {
                values.push(DEFLATED_OUT);
                orientations.push(Vector3::zeros());
            }
        }
    }
    (values, orientations)
}

fn free_point(
    lead: &DMatrix<f64>,
    deflated: &DMatrix<f64>,
    numer: &DMatrix<f64>,
    denom: Option<&DMatrix<f64>>,
    g: usize,
) -> Option<(f64, Vector3<f64>)> {
    let raw = block_gram(lead, lead, g);
    let gate = block_gram(lead, deflated, g);
    let scale = raw.symmetric_eigenvalues().max();
    // the deflated Gram must keep some direction above the floor
    let gate_max = gate.symmetric_eigenvalues().max();
    if !(gate_max >= DEFLATION_FLOOR * scale) {
        return None;
    }
    let num = block_gram(lead, numer, g);
    let den = match denom {
        Some(d) => block_gram(lead, d, g),
        None => gate,
    };
    let (value, v) = max_generalized_eigen(&num, &den, DEFLATION_FLOOR * scale)?;
    Some((value, canonical_sign(Vector3::new(v[0], v[1], v[2]))))
}
