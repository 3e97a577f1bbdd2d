//! Sensor arrays, source grids and the single-sphere MEG forward model.
//!
//! All quantities are SI: positions in meters, fields in tesla per
//! ampere-meter of dipole moment. The head is a homogeneous conducting sphere
//! centered at the origin; sensors are point magnetometers outside it.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix2, Rotation3, SymmetricEigen, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Vacuum permeability over 4π.
const MU0_OVER_4PI: f64 = 1e-7;

/// Fraction of the head radius inside which grid points are kept.
pub const GRID_RADIUS_FRACTION: f64 = 0.9;

const UNIT_NORM_TOL: f64 = 1e-12;

/// A point magnetometer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensor {
    pub position: Vector3<f64>,
    pub orientation: Vector3<f64>,
}

/// The measurement geometry: `M` magnetometers around a head sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorArray {
    sensors: Vec<Sensor>,
    head_radius: f64,
}

impl SensorArray {
    /// Validates and builds an array. Orientations must already be unit norm.
    pub fn new(sensors: Vec<Sensor>, head_radius: f64) -> Result<Self> {
        if !(head_radius.is_finite() && head_radius > 0.0) {
            return Err(Error::Parameter(format!("head radius must be positive, got {head_radius}")));
        }
        if sensors.len() < 2 {
            return Err(Error::Parameter(format!("need at least 2 sensors, got {}", sensors.len())));
        }
        for (i, s) in sensors.iter().enumerate() {
            if !s.position.iter().chain(s.orientation.iter()).all(|v| v.is_finite()) {
                return Err(Error::Parameter(format!("sensor {i} has non-finite coordinates")));
            }
            if (s.orientation.norm() - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Parameter(format!(
                    "sensor {i} orientation has norm {}, expected 1",
                    s.orientation.norm()
                )));
            }
            if s.position.norm() <= head_radius {
                return Err(Error::Parameter(format!(
                    "sensor {i} at radius {} is not outside the head sphere ({head_radius})",
                    s.position.norm()
                )));
            }
        }
        for i in 0..sensors.len() {
            for j in (i + 1)..sensors.len() {
                if sensors[i].position == sensors[j].position {
                    return Err(Error::Parameter(format!("sensors {i} and {j} share a position")));
                }
            }
        }
        Ok(Self { sensors, head_radius })
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn head_radius(&self) -> f64 {
        self.head_radius
    }

    /// CSV with header `x,y,z,ox,oy,oz`, one row per sensor.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,z,ox,oy,oz\n");
        for s in &self.sensors {
            let p = s.position;
            let o = s.orientation;
            out.push_str(&format!("{},{},{},{},{},{}\n", p.x, p.y, p.z, o.x, o.y, o.z));
        }
        out
    }

    /// Parses the CSV produced by [`SensorArray::to_csv`]. Lines starting
    /// with `#` are ignored.
    pub fn from_csv(text: &str, head_radius: f64) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "x,y,z,ox,oy,oz" => {}
            other => {
                return Err(Error::Parameter(format!("bad sensor CSV header: {other:?}")));
            }
        }
        let mut sensors = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parameter(format!("sensor CSV row {row}: {e}")))?;
            if vals.len() != 6 {
                return Err(Error::Parameter(format!("sensor CSV row {row}: expected 6 fields, got {}", vals.len())));
            }
            sensors.push(Sensor {
                position: Vector3::new(vals[0], vals[1], vals[2]),
                orientation: Vector3::new(vals[3], vals[4], vals[5]),
            });
        }
        Self::new(sensors, head_radius)
    }
}

/// Radial magnetometers on a hemispherical shell centered on the head.
///
/// Ring `i` sits at polar angle `(i + 1/2) / n_rings * π/2`; sensors within a
/// ring are evenly spaced in azimuth, with odd rings staggered by half a step.
pub fn build_sensor_array(n_rings: usize, sensors_per_ring: usize, shell_radius: f64, head_radius: f64) -> Result<SensorArray> {
    if n_rings < 1 {
        return Err(Error::Parameter("n_rings must be at least 1".into()));
    }
    if sensors_per_ring < 2 {
        return Err(Error::Parameter("sensors_per_ring must be at least 2".into()));
    }
    if !(shell_radius.is_finite() && shell_radius > head_radius) {
        return Err(Error::Parameter(format!(
            "shell radius {shell_radius} must exceed head radius {head_radius}"
        )));
    }
    let mut sensors = Vec::with_capacity(n_rings * sensors_per_ring);
    for ring in 0..n_rings {
        let theta = (ring as f64 + 0.5) / n_rings as f64 * FRAC_PI_2;
        let stagger = if ring % 2 == 1 { PI / sensors_per_ring as f64 } else { 0.0 };
        for k in 0..sensors_per_ring {
            let phi = 2.0 * PI * k as f64 / sensors_per_ring as f64 + stagger;
            let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let dir = dir / dir.norm();
            sensors.push(Sensor { position: dir * shell_radius, orientation: dir });
        }
    }
    SensorArray::new(sensors, head_radius)
}

/// Whether dipole orientations are known per grid point or estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OrientationMode {
    #[default]
    Fixed,
    Free,
}

/// Candidate dipole locations with precomputed lead fields.
#[derive(Debug, Clone)]
pub struct SourceGrid {
    points: Vec<Vector3<f64>>,
    leadfields: Vec<DMatrix<f64>>,
    orientations: Option<Vec<Vector3<f64>>>,
    head_radius: f64,
    n_sensors: usize,
    topo_cache: OnceLock<Option<DMatrix<f64>>>,
    lead_cache: OnceLock<DMatrix<f64>>,
}

impl SourceGrid {
    fn assemble(
        points: Vec<Vector3<f64>>,
        leadfields: Vec<DMatrix<f64>>,
        orientations: Option<Vec<Vector3<f64>>>,
        head_radius: f64,
        n_sensors: usize,
    ) -> Self {
        Self { points, leadfields, orientations, head_radius, n_sensors, topo_cache: OnceLock::new(), lead_cache: OnceLock::new() }
    }

    /// Builds a grid on explicit points. In fixed mode each point receives the
    /// tangential orientation maximizing its lead-field response.
    pub fn from_points(array: &SensorArray, points: Vec<Vector3<f64>>, mode: OrientationMode) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parameter("source grid has no points".into()));
        }
        let leadfields = points.iter().map(|p| lead_field(array, p)).collect::<Result<Vec<_>>>()?;
        let orientations = match mode {
            OrientationMode::Fixed => {
                Some(points.iter().zip(&leadfields).map(|(p, l)| strongest_tangential(l, p)).collect())
            }
            OrientationMode::Free => None,
        };
        Ok(Self::assemble(points, leadfields, orientations, array.head_radius(), array.len()))
    }

    /// Builds a fixed-orientation grid with caller-chosen orientations.
    pub fn with_orientations(array: &SensorArray, points: Vec<Vector3<f64>>, orientations: Vec<Vector3<f64>>) -> Result<Self> {
        if orientations.len() != points.len() {
            return Err(Error::Parameter(format!(
                "{} orientations for {} points",
                orientations.len(),
                points.len()
            )));
        }
        for (g, q) in orientations.iter().enumerate() {
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("orientation {g} is not unit norm")));
            }
        }
        let grid = Self::from_points(array, points, OrientationMode::Free)?;
        Ok(Self::assemble(grid.points, grid.leadfields, Some(orientations), grid.head_radius, grid.n_sensors))
    }

    /// Same points and orientations, lead fields recomputed for another array.
    pub fn with_array(&self, array: &SensorArray) -> Result<Self> {
        let leadfields = self.points.iter().map(|p| lead_field(array, p)).collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(self.points.clone(), leadfields, self.orientations.clone(), array.head_radius(), array.len()))
    }

    /// Restricts the grid to the given indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Parameter("empty subset".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Parameter(format!("grid index {bad} out of range")));
        }
        Ok(Self::assemble(
            indices.iter().map(|&i| self.points[i]).collect(),
            indices.iter().map(|&i| self.leadfields[i].clone()).collect(),
            self.orientations.as_ref().map(|o| indices.iter().map(|&i| o[i]).collect()),
            self.head_radius,
            self.n_sensors,
        ))
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    pub fn head_radius(&self) -> f64 {
        self.head_radius
    }

    pub fn mode(&self) -> OrientationMode {
        if self.orientations.is_some() {
            OrientationMode::Fixed
        } else {
            OrientationMode::Free
        }
    }

    pub fn point(&self, g: usize) -> Vector3<f64> {
        self.points[g]
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn leadfield(&self, g: usize) -> &DMatrix<f64> {
        &self.leadfields[g]
    }

    pub fn orientation(&self, g: usize) -> Option<Vector3<f64>> {
        self.orientations.as_ref().map(|o| o[g])
    }

    pub fn orientations(&self) -> Option<&[Vector3<f64>]> {
        self.orientations.as_deref()
    }

    /// Topography of grid point `g` with its stored orientation (fixed mode).
    pub fn fixed_topography(&self, g: usize) -> Option<DVector<f64>> {
        self.orientation(g).map(|q| &self.leadfields[g] * q)
    }

    /// All fixed-orientation topographies as an `M×G` matrix.
    pub fn topography_matrix(&self) -> Option<&DMatrix<f64>> {
        self.topo_cache
            .get_or_init(|| {
                self.orientations.as_ref().map(|ors| {
                    let mut t = DMatrix::zeros(self.n_sensors, self.len());
                    for (g, q) in ors.iter().enumerate() {
                        t.set_column(g, &(&self.leadfields[g] * q));
                    }
                    t
                })
            })
            .as_ref()
    }

    /// All lead fields side by side, `M×3G`; point `g` owns columns `3g..3g+3`.
    pub fn leadfield_matrix(&self) -> &DMatrix<f64> {
        self.lead_cache.get_or_init(|| {
            let mut l = DMatrix::zeros(self.n_sensors, 3 * self.len());
            for (g, lf) in self.leadfields.iter().enumerate() {
                l.columns_mut(3 * g, 3).copy_from(lf);
            }
            l
        })
    }

    /// CSV with header `x,y,z` (free mode) or `x,y,z,ox,oy,oz` (fixed mode).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.orientations {
            Some(ors) => {
                out.push_str("x,y,z,ox,oy,oz\n");
                for (p, o) in self.points.iter().zip(ors) {
                    out.push_str(&format!("{},{},{},{},{},{}\n", p.x, p.y, p.z, o.x, o.y, o.z));
                }
            }
            None => {
                out.push_str("x,y,z\n");
                for p in &self.points {
                    out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
                }
            }
        }
        out
    }
}

/// Cubic lattice `spacing * (i, j, k)` clipped to `‖p‖ < 0.9 · head_radius`.
///
/// The origin is dropped: a dipole at the sphere center produces no external
/// field. Points are ordered with `x` varying fastest, then `y`, then `z`.
pub fn lattice_points(spacing: f64, head_radius: f64) -> Vec<Vector3<f64>> {
    let limit = GRID_RADIUS_FRACTION * head_radius;
    let n = (limit / spacing).floor() as i64 + 1;
    let mut points = Vec::new();
    for k in -n..=n {
        for j in -n..=n {
            for i in -n..=n {
                if i == 0 && j == 0 && k == 0 {
                    continue;
                }
                let p = Vector3::new(i as f64, j as f64, k as f64) * spacing;
                if p.norm() < limit {
                    points.push(p);
                }
            }
        }
    }
    points
}

/// Builds the lattice source grid and precomputes its lead fields.
pub fn build_source_grid(array: &SensorArray, spacing: f64, mode: OrientationMode) -> Result<SourceGrid> {
    let head_radius = array.head_radius();
    if !(spacing.is_finite() && spacing > 0.0 && spacing < head_radius) {
        return Err(Error::Parameter(format!(
            "grid spacing {spacing} must lie in (0, head radius {head_radius})"
        )));
    }
    let points = lattice_points(spacing, head_radius);
    if points.is_empty() {
        return Err(Error::Parameter(format!("grid spacing {spacing} leaves no points inside the head")));
    }
    SourceGrid::from_points(array, points, mode)
}

/// Field of a current dipole `moment` at `r0` in a conducting sphere,
/// evaluated at `r` outside it (Sarvas closed form).
pub fn sphere_dipole_field(r: &Vector3<f64>, r0: &Vector3<f64>, moment: &Vector3<f64>) -> Vector3<f64> {
    let a_vec = r - r0;
    let a = a_vec.norm();
    let rn = r.norm();
    let a_dot_r = a_vec.dot(r);
    let f = a * (rn * a + rn * rn - r0.dot(r));
    let grad_f = r * (a * a / rn + a_dot_r / a + 2.0 * a + 2.0 * rn) - r0 * (a + 2.0 * rn + a_dot_r / a);
    let q_cross_r0 = moment.cross(r0);
    (q_cross_r0 * f - grad_f * q_cross_r0.dot(r)) * (MU0_OVER_4PI / (f * f))
}

/// The `M×3` lead field at `p`: column `k` holds the sensor readings for a
/// unit dipole along axis `k`.
pub fn lead_field(array: &SensorArray, p: &Vector3<f64>) -> Result<DMatrix<f64>> {
    let radius = p.norm();
    if !p.iter().all(|v| v.is_finite()) || radius >= array.head_radius() {
        return Err(Error::Domain(format!(
            "source at radius {radius} is not inside the head sphere ({})",
            array.head_radius()
        )));
    }
    if radius < 1e-9 {
        return Err(Error::Domain("source at the sphere center has no external field".into()));
    }
    let mut l = DMatrix::zeros(array.len(), 3);
    for (m, s) in array.sensors().iter().enumerate() {
        for k in 0..3 {
            let b = sphere_dipole_field(&s.position, p, &Vector3::ith(k, 1.0));
            l[(m, k)] = b.dot(&s.orientation);
        }
    }
    Ok(l)
}

/// `l = L q` for a unit orientation `q`.
pub fn topography(lead: &DMatrix<f64>, q: &Vector3<f64>) -> Result<DVector<f64>> {
    if lead.ncols() != 3 {
        return Err(Error::Parameter(format!("lead field has {} columns, expected 3", lead.ncols())));
    }
    if (q.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("orientation has norm {}, expected 1", q.norm())));
    }
    Ok(lead * q)
}

/// Flips `v` so its largest-magnitude component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let k = v.iamax();
    if v[k] < 0.0 {
        -v
    } else {
        v
    }
}

/// Orthonormal basis of the plane tangent to the sphere at `p`.
pub fn tangent_basis(p: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let radial = p.normalize();
    let helper = Vector3::ith(radial.iamin(), 1.0);
    let t1 = radial.cross(&helper).normalize();
    let t2 = radial.cross(&t1).normalize();
    (t1, t2)
}

fn strongest_tangential(lead: &DMatrix<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let (t1, t2) = tangent_basis(p);
    let a = lead * t1;
    let b = lead * t2;
    let gram = Matrix2::new(a.dot(&a), a.dot(&b), a.dot(&b), b.dot(&b));
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(top);
    canonical_sign((t1 * v[0] + t2 * v[1]).normalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    Translation,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    fn unit(self) -> Vector3<f64> {
        match self {
            Axis::X => Vector3::x(),
            Axis::Y => Vector3::y(),
            Axis::Z => Vector3::z(),
        }
    }
}

/// A rigid head-to-sensor misregistration. Translations are in millimeters,
/// rotations in degrees about the head origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPerturbation {
    pub kind: PerturbationKind,
    pub axis: Axis,
    pub magnitude: f64,
}

impl HeadPerturbation {
    pub fn translation(axis: Axis, millimeters: f64) -> Self {
        Self { kind: PerturbationKind::Translation, axis, magnitude: millimeters }
    }

    pub fn rotation(axis: Axis, degrees: f64) -> Self {
        Self { kind: PerturbationKind::Rotation, axis, magnitude: degrees }
    }

    /// A short stable label, e.g. `trans_z_+1mm`.
    pub fn label(&self) -> String {
        let axis = match self.axis {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        };
        match self.kind {
            PerturbationKind::Translation => format!("trans_{axis}_{:+}mm", self.magnitude),
            PerturbationKind::Rotation => format!("rot_{axis}_{:+}deg", self.magnitude),
        }
    }

    /// The ten registration errors of the comparison study, in order:
    /// x posterior, x-axis tilt, z up, y-axis tilt, y right; 1 then 2 units each.
    ///
    /// Head frame: +x anterior, +y left, +z up.
    pub fn standard_set() -> Vec<HeadPerturbation> {
        vec![
            Self::translation(Axis::X, -1.0),
            Self::translation(Axis::X, -2.0),
            Self::rotation(Axis::X, 1.0),
            Self::rotation(Axis::X, 2.0),
            Self::translation(Axis::Z, 1.0),
            Self::translation(Axis::Z, 2.0),
            Self::rotation(Axis::Y, 1.0),
            Self::rotation(Axis::Y, 2.0),
            Self::translation(Axis::Y, -1.0),
            Self::translation(Axis::Y, -2.0),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.magnitude.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!("perturbation magnitude {} is not finite", self.magnitude)))
        }
    }
}

/// Applies a rigid transform to every sensor, returning the array the
/// localizer will believe in.
pub fn perturb_forward(array: &SensorArray, pert: &HeadPerturbation) -> Result<SensorArray> {
    pert.validate()?;
    let sensors = match pert.kind {
        PerturbationKind::Translation => {
            let shift = pert.axis.unit() * (pert.magnitude * 1e-3);
            array.sensors().iter().map(|s| Sensor { position: s.position + shift, orientation: s.orientation }).collect()
        }
        PerturbationKind::Rotation => {
            let rot = Rotation3::from_axis_angle(&Unit::new_unchecked(pert.axis.unit()), pert.magnitude.to_radians());
            array
                .sensors()
                .iter()
                .map(|s| {
                    let o = rot * s.orientation;
                    Sensor { position: rot * s.position, orientation: o / o.norm() }
                })
                .collect()
        }
    };
    SensorArray::new(sensors, array.head_radius())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn array() -> SensorArray {
        build_sensor_array(4, 8, 0.12, 0.09).unwrap()
    }

    #[test]
    fn sensor_array_counts_and_norms() {
        let a = array();
        assert_eq!(a.len(), 32);
        assert!(a.sensors().iter().all(|s| (s.orientation.norm() - 1.0).abs() < 1e-12));

        let small = build_sensor_array(1, 2, 0.12, 0.09).unwrap();
        assert_eq!(small.len(), 2);
        assert_ne!(small.sensors()[0].position, small.sensors()[1].position);
    }

    #[test]
    fn sensor_positions_match_spherical_coordinates() {
        let a = build_sensor_array(6, 17, 0.13, 0.09).unwrap();
        assert_eq!(a.len(), 102);
        for (idx, s) in a.sensors().iter().enumerate() {
            assert!((s.position.norm() - 0.13).abs() < 1e-12);
            let (ring, k) = (idx / 17, idx % 17);
            let theta = (ring as f64 + 0.5) / 6.0 * FRAC_PI_2;
            let phi = 2.0 * PI * k as f64 / 17.0 + if ring % 2 == 1 { PI / 17.0 } else { 0.0 };
            let expect = Vector3::new(0.13 * theta.sin() * phi.cos(), 0.13 * theta.sin() * phi.sin(), 0.13 * theta.cos());
            assert!((s.position - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn sensor_array_rejects_bad_parameters() {
        assert!(matches!(build_sensor_array(0, 8, 0.12, 0.09), Err(Error::Parameter(_))));
        assert!(matches!(build_sensor_array(2, 1, 0.12, 0.09), Err(Error::Parameter(_))));
        assert!(matches!(build_sensor_array(2, 8, 0.08, 0.09), Err(Error::Parameter(_))));
    }

    #[test]
    fn grid_respects_radius_and_rejects_empty() {
        let a = array();
        let g = build_source_grid(&a, 0.02, OrientationMode::Free).unwrap();
        assert!(g.points().iter().all(|p| p.norm() < 0.081));
        assert!(matches!(build_source_grid(&a, 0.09, OrientationMode::Free), Err(Error::Parameter(_))));
        // spacing just under the radius still leaves nothing inside 0.9 R
        assert!(matches!(build_source_grid(&a, 0.085, OrientationMode::Free), Err(Error::Parameter(_))));
    }

    #[test]
    fn grid_count_matches_enumeration() {
        // independent count: scan an oversized integer box
        let (s, r) = (0.015, 0.09);
        let mut count = 0;
        for i in -20i32..=20 {
            for j in -20i32..=20 {
                for k in -20i32..=20 {
                    let d = (((i * i + j * j + k * k) as f64).sqrt()) * s;
                    if d > 0.0 && d < 0.9 * r {
                        count += 1;
                    }
                }
            }
        }
        let g = build_source_grid(&array(), s, OrientationMode::Fixed).unwrap();
        assert_eq!(g.len(), count);
        for g_idx in 0..g.len() {
            let q = g.orientation(g_idx).unwrap();
            assert!((q.norm() - 1.0).abs() < 1e-12);
            assert!(q.dot(&g.point(g_idx).normalize()).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_is_deterministic() {
        let a = array();
        let g1 = build_source_grid(&a, 0.02, OrientationMode::Fixed).unwrap();
        let g2 = build_source_grid(&a, 0.02, OrientationMode::Fixed).unwrap();
        assert_eq!(g1.to_csv(), g2.to_csv());
        for i in 0..g1.len() {
            assert_eq!(g1.leadfield(i), g2.leadfield(i));
        }
    }

    #[test]
    fn radial_dipole_is_silent() {
        let a = array();
        for p in [Vector3::new(0.05, 0.0, 0.03), Vector3::new(-0.02, 0.04, -0.05), Vector3::new(0.0, 0.0, 0.07)] {
            let l = lead_field(&a, &p).unwrap();
            let radial = &l * p.normalize();
            let scale = (0..3).map(|k| l.column(k).norm()).fold(0.0, f64::max);
            assert!(radial.amax() <= 1e-10 * scale, "radial leak {}", radial.amax());
            assert!(radial.amax() < 1e-12);
        }
    }

    #[test]
    fn field_decays_with_distance() {
        let a = array();
        let far = SensorArray::new(
            a.sensors().iter().map(|s| Sensor { position: s.position * 2.0, orientation: s.orientation }).collect(),
            a.head_radius(),
        )
        .unwrap();
        let p = Vector3::new(0.02, 0.01, 0.04);
        let q = Vector3::new(0.3, -0.8, 0.1).normalize();
        let near_l = lead_field(&a, &p).unwrap() * q;
        let far_l = lead_field(&far, &p).unwrap() * q;
        for m in 0..a.len() {
            assert!(far_l[m].abs() < near_l[m].abs());
        }
    }

    #[test]
    fn lead_field_domain_errors() {
        let a = array();
        assert!(matches!(lead_field(&a, &Vector3::new(0.1, 0.0, 0.0)), Err(Error::Domain(_))));
        assert!(matches!(lead_field(&a, &Vector3::zeros()), Err(Error::Domain(_))));
    }

    /// B = -μ0 ∇U with U(r) = -(1/μ0) ∫_0^∞ B_r(r + t r̂) dt. Outside a sphere
    /// volume currents add no radial field, so B_r is the primary Biot–Savart
    /// term alone. The integral is done by quadrature and the gradient by
    /// central differences.
    fn potential_oracle_field(r: &Vector3<f64>, r0: &Vector3<f64>, q: &Vector3<f64>) -> Vector3<f64> {
        let radial_primary = |x: &Vector3<f64>| -> f64 {
            let d = x - r0;
            MU0_OVER_4PI * q.cross(&d).dot(&x.normalize()) / d.norm().powi(3)
        };
        let scalar_potential = |x: &Vector3<f64>| -> f64 {
            let e = x.normalize();
            // substitute t = u / (1 - u) on [0, 1)
            let n = 20_000;
            let mut acc = 0.0;
            for i in 0..n {
                let u = (i as f64 + 0.5) / n as f64;
                let t = u / (1.0 - u);
                let jac = 1.0 / ((1.0 - u) * (1.0 - u));
                acc += radial_primary(&(x + e * t)) * jac;
            }
            // μ0 U
            acc / n as f64
        };
        let h = 1e-5;
        let mut grad = Vector3::zeros();
        for k in 0..3 {
            let dh = Vector3::ith(k, h);
            grad[k] = (scalar_potential(&(r + dh)) - scalar_potential(&(r - dh))) / (2.0 * h);
        }
        -grad
    }

    #[test]
    fn lead_field_matches_potential_quadrature() {
        let a = array();
        let p = Vector3::new(0.05, 0.0, 0.03);
        let (t1, t2) = tangent_basis(&p);
        let q = (t1 * 0.6 + t2 * 0.8).normalize();
        let l = lead_field(&a, &p).unwrap() * q;
        let mut oracle = DVector::zeros(a.len());
        for (m, s) in a.sensors().iter().enumerate() {
            oracle[m] = potential_oracle_field(&s.position, &p, &q).dot(&s.orientation);
        }
        let rel = (&l - &oracle).norm() / oracle.norm();
        assert!(rel < 0.01, "relative mismatch {rel}");
    }

    #[test]
    fn topography_basics() {
        let a = array();
        let l = lead_field(&a, &Vector3::new(0.01, 0.03, 0.05)).unwrap();
        assert_eq!(topography(&l, &Vector3::x()).unwrap(), l.column(0).into_owned());
        let q = Vector3::new(1.0, 2.0, -0.5).normalize();
        let pos = topography(&l, &q).unwrap();
        let neg = topography(&l, &-q).unwrap();
        assert!((pos + neg).amax() == 0.0);
        let mut explicit = DVector::zeros(l.nrows());
        for m in 0..l.nrows() {
            for k in 0..3 {
                explicit[m] += l[(m, k)] * q[k];
            }
        }
        assert!((topography(&l, &q).unwrap() - explicit).amax() < 1e-24);
        assert!(matches!(topography(&l, &Vector3::new(1.0, 1.0, 0.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let a = array();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            assert_eq!(perturb_forward(&a, &HeadPerturbation::translation(axis, 0.0)).unwrap(), a);
            assert_eq!(perturb_forward(&a, &HeadPerturbation::rotation(axis, 0.0)).unwrap(), a);
        }
    }

    #[test]
    fn translations_compose() {
        let a = array();
        let one = HeadPerturbation::translation(Axis::Z, 1.0);
        let twice = perturb_forward(&perturb_forward(&a, &one).unwrap(), &one).unwrap();
        let two = perturb_forward(&a, &HeadPerturbation::translation(Axis::Z, 2.0)).unwrap();
        for (s, t) in twice.sensors().iter().zip(two.sensors()) {
            assert!((s.position - t.position).norm() < 1e-15);
            assert_eq!(s.orientation, t.orientation);
        }
    }

    #[test]
    fn rotation_matches_explicit_matrix() {
        let a = array();
        let rotated = perturb_forward(&a, &HeadPerturbation::rotation(Axis::X, 1.0)).unwrap();
        let th = 1.0f64.to_radians();
        let (c, s) = (th.cos(), th.sin());
        for (orig, rot) in a.sensors().iter().zip(rotated.sensors()) {
            let p = orig.position;
            let expect = Vector3::new(p.x, c * p.y - s * p.z, s * p.y + c * p.z);
            assert!((rot.position - expect).norm() < 1e-15);
            assert!((rot.position.norm() - p.norm()).abs() < 1e-15);
        }
    }

    #[test]
    fn sensor_csv_roundtrip() {
        let a = array();
        let b = SensorArray::from_csv(&format!("# header\n{}", a.to_csv()), 0.09).unwrap();
        assert_eq!(a, b);
    }
}
