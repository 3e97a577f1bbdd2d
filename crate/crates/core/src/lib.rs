//! Least-squares dipole localization for MEG/EEG by alternating projection.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] builds sensor arrays and source grids and evaluates the
//!   single-sphere magnetometer lead field.
//! * [`projection`] holds the projector algebra and localizer functions.
//! * [`ap`] is the alternating-projection solver.
//! * [`baselines`] implements RAP-MUSIC, truncated RAP-MUSIC and the
//!   recursive beamformer on the same interfaces.
//! * [`sim`] generates synthetic trials and drives Monte-Carlo sweeps.
//! * [`cli`] wires everything to the `aploc` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ap;
pub mod baselines;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod projection;
pub mod scan;
pub mod sim;

pub use ap::{ap_initialize, ap_localize, recover_sources, solve_orientation, ApConfig, ApResult, ApStep, ApTrace, DipoleEstimate};
pub use baselines::{rap_beamformer, rap_music, signal_subspace, trap_music, ScanResult, SubspaceModel};
pub use error::{Error, Result};
pub use geometry::{
    build_sensor_array, build_source_grid, lead_field, perturb_forward, topography, Axis, HeadPerturbation,
    OrientationMode, PerturbationKind, Sensor, SensorArray, SourceGrid,
};
pub use projection::{
    covariance, deflate, localizer_deflated, localizer_single, objective, projector, Covariance, Recording,
    TopographySet, DEFLATED_OUT,
};
pub use sim::{Method, SweepReport, TrialConfig, TrialReport};

/// Crate version string embedded in output headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
