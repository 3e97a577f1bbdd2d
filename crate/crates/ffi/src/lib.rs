//! C ABI for the `aploc` localizers.
//!
//! A model handle owns a sensor array and its source grid. Every function
//! returns an [`AplocStatus`]; on failure a message is available from
//! [`aploc_last_error`] on the same thread until the next call.
//!
//! Recordings are passed row-major: `data[i * n_samples + t]` is sensor `i`
//! at sample `t`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aploc::sim::Environment;
use aploc::{
    ap_localize, build_sensor_array, build_source_grid, rap_beamformer, rap_music, trap_music, ApConfig, DipoleEstimate,
    Error, OrientationMode, Recording,
};
use nalgebra::DMatrix;

/// Status codes. The non-zero values match the `aploc` CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AplocStatus {
    Ok = 0,
    /// Invalid parameter, dimension mismatch or null pointer.
    InvalidArgument = 2,
    /// The solver hit a degenerate or numerically singular problem.
    Solver = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AplocMethod {
    Ap = 0,
    RapMusic = 1,
    TrapMusic = 2,
    RapBeamformer = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AplocOrientation {
    Fixed = 0,
    Free = 1,
}

/// Opaque sensor array plus source grid.
pub struct AplocModel {
    env: Environment,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: AplocStatus, msg: impl Into<String>) -> AplocStatus {
    set_error(msg.into());
    status
}

fn from_core(e: Error) -> AplocStatus {
    let status = match e {
        Error::Parameter(_) | Error::Domain(_) => AplocStatus::InvalidArgument,
        Error::Degenerate(_) | Error::Numeric(_) => AplocStatus::Solver,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> AplocStatus) -> AplocStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(AplocStatus::Internal, "internal panic"),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn aploc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn aploc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a ring array of radial magnetometers and a cubic source grid.
/// Lengths are in meters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn aploc_model_new(
    n_rings: usize,
    sensors_per_ring: usize,
    shell_radius: f64,
    head_radius: f64,
    grid_spacing: f64,
    orientation: AplocOrientation,
    out: *mut *mut AplocModel,
) -> AplocStatus {
    guard(|| {
        if out.is_null() {
            return fail(AplocStatus::InvalidArgument, "out is null");
        }
        let mode = match orientation {
            AplocOrientation::Fixed => OrientationMode::Fixed,
            AplocOrientation::Free => OrientationMode::Free,
        };
        let built = build_sensor_array(n_rings, sensors_per_ring, shell_radius, head_radius).and_then(|array| {
            let grid = build_source_grid(&array, grid_spacing, mode)?;
            Environment::new(array, grid)
        });
        match built {
            Ok(env) => {
                *out = Box::into_raw(Box::new(AplocModel { env }));
                AplocStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a pointer from [`aploc_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn aploc_model_free(model: *mut AplocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `n_sensors`, `n_points` writable.
#[no_mangle]
pub unsafe extern "C" fn aploc_model_dims(model: *const AplocModel, n_sensors: *mut usize, n_points: *mut usize) -> AplocStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(AplocStatus::InvalidArgument, "model is null");
        };
        if n_sensors.is_null() || n_points.is_null() {
            return fail(AplocStatus::InvalidArgument, "output pointer is null");
        }
        *n_sensors = m.env.array.len();
        *n_points = m.env.grid.len();
        AplocStatus::Ok
    })
}

/// Writes grid point `index` (meters) to `xyz[0..3]`.
///
/// # Safety
/// `model` must be a live handle and `xyz` point to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn aploc_model_point(model: *const AplocModel, index: usize, xyz: *mut f64) -> AplocStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(AplocStatus::InvalidArgument, "model is null");
        };
        if xyz.is_null() {
            return fail(AplocStatus::InvalidArgument, "xyz is null");
        }
        if index >= m.env.grid.len() {
            return fail(AplocStatus::InvalidArgument, format!("index {index} out of range ({} points)", m.env.grid.len()));
        }
        let p = m.env.grid.point(index);
        std::slice::from_raw_parts_mut(xyz, 3).copy_from_slice(p.as_slice());
        AplocStatus::Ok
    })
}

/// Writes the fixed-orientation topography of point `index` to
/// `out[0..n_sensors]`.
///
/// # Safety
/// `model` must be a live handle and `out` point to `n_sensors` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn aploc_model_topography(model: *const AplocModel, index: usize, out: *mut f64) -> AplocStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(AplocStatus::InvalidArgument, "model is null");
        };
        if out.is_null() {
            return fail(AplocStatus::InvalidArgument, "out is null");
        }
        if index >= m.env.grid.len() {
            return fail(AplocStatus::InvalidArgument, format!("index {index} out of range"));
        }
        let Some(t) = m.env.grid.fixed_topography(index) else {
            return fail(AplocStatus::InvalidArgument, "model was built with free orientations");
        };
        std::slice::from_raw_parts_mut(out, t.len()).copy_from_slice(t.as_slice());
        AplocStatus::Ok
    })
}

fn run(m: &AplocModel, method: AplocMethod, rec: &Recording, q: usize) -> aploc::Result<Vec<DipoleEstimate>> {
    let grid = &m.env.grid;
    let mode = grid.mode();
    match method {
        AplocMethod::Ap => Ok(ap_localize(grid, rec, &ApConfig::new(q, mode))?.estimates),
        AplocMethod::RapMusic => Ok(rap_music(grid, rec, q, mode)?.estimates),
        AplocMethod::TrapMusic => Ok(trap_music(grid, rec, q, mode)?.estimates),
        AplocMethod::RapBeamformer => Ok(rap_beamformer(grid, rec, q, mode, None)?.estimates),
    }
}

/// Localizes `n_sources` dipoles in a row-major `n_sensors × n_samples`
/// recording. Writes grid indices to `indices[0..n_sources]` and unit
/// moments to `orientations[0..3*n_sources]`; `orientations` may be NULL.
///
/// # Safety
/// `data` must hold `n_sensors * n_samples` doubles; `indices` and (when
/// non-NULL) `orientations` must be writable for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn aploc_localize(
    model: *const AplocModel,
    method: AplocMethod,
    data: *const f64,
    n_sensors: usize,
    n_samples: usize,
    n_sources: usize,
    indices: *mut usize,
    orientations: *mut f64,
) -> AplocStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(AplocStatus::InvalidArgument, "model is null");
        };
        if data.is_null() || indices.is_null() {
            return fail(AplocStatus::InvalidArgument, "data or indices is null");
        }
        if n_sensors != m.env.array.len() {
            return fail(
                AplocStatus::InvalidArgument,
                format!("recording has {n_sensors} sensors, model has {}", m.env.array.len()),
            );
        }
        let Some(len) = n_sensors.checked_mul(n_samples) else {
            return fail(AplocStatus::InvalidArgument, "recording size overflows");
        };
        let values = std::slice::from_raw_parts(data, len);
        let rec = match Recording::new(DMatrix::from_row_slice(n_sensors, n_samples, values)) {
            Ok(r) => r,
            Err(e) => return from_core(e),
        };
        match run(m, method, &rec, n_sources) {
            Ok(est) => {
                let idx = std::slice::from_raw_parts_mut(indices, n_sources);
                for (slot, e) in idx.iter_mut().zip(&est) {
                    *slot = e.grid_index;
                }
                if !orientations.is_null() {
                    let o = std::slice::from_raw_parts_mut(orientations, 3 * n_sources);
                    for (chunk, e) in o.chunks_mut(3).zip(&est) {
                        chunk.copy_from_slice(e.orientation.as_slice());
                    }
                }
                AplocStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}
