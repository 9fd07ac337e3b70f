//! Synthetic radar worlds, trajectories and scans.
//!
//! A landmark world is ray-cast into polar scans, resampled onto a metric
//! Cartesian grid and corrupted with seeded noise whose severity is known per
//! frame. Everything here is a pure function of its inputs and seeds.

mod grid;
mod io;
mod noise;
mod render;
mod world;

pub use grid::{CartesianScan, PolarScan, ScanGeometry};
pub use io::{
    read_scan, read_severity_csv, read_trajectory_csv, write_scan, write_severity_csv,
    write_trajectory_csv, SCAN_MAGIC, SCAN_VERSION,
};
pub use noise::{apply_noise, NoiseConfig, NoiseProfile, BLUR_STEP_RAD};
pub use render::{polar_to_cartesian, render_polar_scan, rotate_scan};
pub use world::{
    generate_trajectory, Landmark, Pose, RouteSpec, WorldModel, WorldSpec, FRAME_PERIOD_S,
};

use std::f64::consts::TAU;

/// Wraps an angle into `[0, 2π)`.
pub fn normalize_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if a >= TAU {
        0.0
    } else {
        a
    }
}
