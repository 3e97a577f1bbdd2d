//! Projector algebra and the least-squares localizer functions.
//!
//! With `A` the matrix of source topographies and `C = Y Yᵀ`, the
//! least-squares location estimate maximizes `tr(Π_A C)`. Adding one column
//! `l` to a fixed set `B` splits the projector as
//! `Π_[B,l] = Π_B + Π_{Π⊥_B l}`, so a single source is chosen by maximizing
//! `(lᵀ Q C Q l) / (lᵀ Q l)` with `Q = Π⊥_B`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{full_rank_basis, sorted_eigen};

/// Score returned for topographies that lie (numerically) in the deflated span.
pub const DEFLATED_OUT: f64 = f64::NEG_INFINITY;

/// `lᵀQl < DEFLATION_FLOOR · lᵀl` marks a topography as deflated out.
pub const DEFLATION_FLOOR: f64 = 1e-12;

/// Sensor data `Y`, `M` sensors by `N` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    data: DMatrix<f64>,
}

impl Recording {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Parameter(format!("recording must be non-empty, got {}x{}", data.nrows(), data.ncols())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("recording contains non-finite samples".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn n_sensors(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.data.ncols()
    }
}

/// The unnormalized data covariance `C = Y Yᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariance {
    c: DMatrix<f64>,
}

impl Covariance {
    /// Wraps a matrix after checking symmetry and positive semidefiniteness.
    pub fn from_matrix(c: DMatrix<f64>) -> Result<Self> {
        if !c.is_square() {
            return Err(Error::Parameter("covariance must be square".into()));
        }
        let norm = c.norm();
        if (&c - c.transpose()).norm() > 1e-10 * norm {
            return Err(Error::Parameter("covariance is not symmetric".into()));
        }
        let (vals, _) = sorted_eigen(&c);
        if vals[vals.len() - 1] < -1e-10 * c.trace().abs() {
            return Err(Error::Parameter(format!("covariance has negative eigenvalue {}", vals[vals.len() - 1])));
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.c.trace()
    }
}

/// `M×K` matrix of topography columns, `K < M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopographySet {
    columns: DMatrix<f64>,
    sources: Vec<usize>,
}

impl TopographySet {
    pub fn new(columns: DMatrix<f64>) -> Result<Self> {
        if columns.ncols() >= columns.nrows() {
            return Err(Error::Parameter(format!(
                "{} topographies for {} sensors; need fewer sources than sensors",
                columns.ncols(),
                columns.nrows()
            )));
        }
        Ok(Self { columns, sources: Vec::new() })
    }

    /// A set whose columns are tagged with the grid indices they came from.
    pub fn with_sources(columns: DMatrix<f64>, sources: Vec<usize>) -> Result<Self> {
        if sources.len() != columns.ncols() {
            return Err(Error::Parameter(format!("{} source labels for {} columns", sources.len(), columns.ncols())));
        }
        let mut set = Self::new(columns)?;
        set.sources = sources;
        Ok(set)
    }

    pub fn from_vectors(m: usize, cols: &[DVector<f64>]) -> Result<Self> {
        let mut a = DMatrix::zeros(m, cols.len());
        for (k, c) in cols.iter().enumerate() {
            if c.len() != m {
                return Err(Error::Parameter(format!("topography {k} has length {}, expected {m}", c.len())));
            }
            a.set_column(k, c);
        }
        Self::new(a)
    }

    pub fn empty(m: usize) -> Self {
        Self { columns: DMatrix::zeros(m, 0), sources: Vec::new() }
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn sources(&self) -> &[usize] {
        &self.sources
    }

    pub fn n_sensors(&self) -> usize {
        self.columns.nrows()
    }

    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    /// Orthonormal basis of the column span.
    pub fn basis(&self) -> Result<DMatrix<f64>> {
        full_rank_basis(&self.columns)
    }
}

pub fn covariance(rec: &Recording) -> Covariance {
    let y = rec.data();
    let c = y * y.transpose();
    Covariance { c: (&c + c.transpose()) * 0.5 }
}

/// `Π_A = A (AᵀA)⁻¹ Aᵀ`, formed from an orthonormal basis of `span(A)`.
pub fn projector(a: &TopographySet) -> Result<DMatrix<f64>> {
    let u = a.basis()?;
    Ok(&u * u.transpose())
}

/// The complement projector `I − Π_A`.
pub fn deflate(a: &TopographySet) -> Result<DMatrix<f64>> {
    let m = a.n_sensors();
    Ok(DMatrix::identity(m, m) - projector(a)?)
}

/// `(lᵀ C l) / (lᵀ l)`.
pub fn localizer_single(l: &DVector<f64>, c: &Covariance) -> Result<f64> {
    let ll = l.dot(l);
    if !(ll > 0.0) {
        return Err(Error::Domain("zero topography".into()));
    }
    Ok(l.dot(&(c.matrix() * l)) / ll)
}

/// `(lᵀ Q C Q l) / (lᵀ Q l)`, or [`DEFLATED_OUT`] when `l` is (numerically)
/// inside the deflated span.
pub fn localizer_deflated(l: &DVector<f64>, q: &DMatrix<f64>, c: &Covariance) -> f64 {
    let ql = q * l;
    let den = l.dot(&ql);
    if !(den >= DEFLATION_FLOOR * l.dot(l)) || den <= 0.0 {
        return DEFLATED_OUT;
    }
    ql.dot(&(c.matrix() * &ql)) / den
}

/// The least-squares objective `tr(Π_A C)`.
pub fn objective(a: &TopographySet, c: &Covariance) -> Result<f64> {
    let u = a.basis()?;
    Ok((u.transpose() * c.matrix() * &u).trace())
}
