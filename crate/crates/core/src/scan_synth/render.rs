use std::f64::consts::TAU;

use super::grid::{CartesianScan, PolarScan};
use super::world::{Pose, WorldModel};
use crate::error::{Error, Result};

/// Range at which returned power falls by a factor of e.
const ATTENUATION_LENGTH_M: f64 = 100.0;
/// Returns weaker than this fraction of the landmark peak are not deposited.
const DEPOSIT_CUTOFF: f64 = 0.01;

/// Distance from `v` to the half-open interval `[lo, hi)`.
#[inline]
fn interval_distance(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo - v
    } else if v >= hi {
        v - hi
    } else {
        0.0
    }
}

/// Ray-casts every landmark into an `azimuths x bins` polar scan.
///
/// Azimuth `a` looks `a * 2π / azimuths` counter-clockwise from the heading;
/// bin `b` spans ranges `[b, b+1) * bin_size`. Each landmark deposits a
/// Gaussian blob of its radius, peaking at the cell containing its centre,
/// scaled by reflectivity and range attenuation. Overlaps take the maximum.
pub fn render_polar_scan(
    world: &WorldModel,
    pose: &Pose,
    pose_index: u64,
    azimuths: usize,
    bins: usize,
    bin_size: f64,
) -> Result<PolarScan> {
    if azimuths == 0 || bins == 0 {
        return Err(Error::config("azimuths and bins must be >= 1"));
    }
    if !(bin_size > 0.0) {
        return Err(Error::config("bin_size must be > 0"));
    }
    let mut scan = PolarScan::zeros(azimuths, bins, bin_size, pose_index);
    let max_range = bins as f64 * bin_size;
    let az_step = TAU / azimuths as f64;
    let a_count = azimuths as f64;

    for lm in &world.landmarks {
        let dx = lm.x - pose.x;
        let dy = lm.y - pose.y;
        let range = dx.hypot(dy);
        if range >= max_range || range < 1e-9 {
            continue;
        }
        let peak = lm.reflectivity * (-range / ATTENUATION_LENGTH_M).exp();
        if peak <= 0.0 {
            continue;
        }
        // bearing measured in azimuth-bin units, wrapped to [0, A)
        let bearing = ((dy.atan2(dx) - pose.heading) / az_step).rem_euclid(a_count);
        let sigma = lm.radius;
        let reach = sigma * (-2.0 * DEPOSIT_CUTOFF.ln()).sqrt();

        let b_lo = ((range - reach) / bin_size).floor().max(0.0) as usize;
        let b_hi = (((range + reach) / bin_size).floor() as usize).min(bins - 1);
        let half_arc = if reach >= range {
            a_count / 2.0
        } else {
            (reach / range).asin() / az_step
        };
        let a_center = bearing.round() as isize;
        let a_half = (half_arc.ceil() as isize).min(azimuths as isize / 2);

        for da in -a_half..=a_half {
            let a_raw = a_center + da;
            let a = a_raw.rem_euclid(azimuths as isize) as usize;
            // angular distance from the bearing to this azimuth's sector, unwrapped
            let d_bins = interval_distance(bearing, a_raw as f64 - 0.5, a_raw as f64 + 0.5);
            let lateral = range * d_bins * az_step;
            for b in b_lo..=b_hi {
                let radial =
                    interval_distance(range, b as f64 * bin_size, (b + 1) as f64 * bin_size);
                let w = (-(radial * radial + lateral * lateral) / (2.0 * sigma * sigma)).exp();
                if w < DEPOSIT_CUTOFF {
                    continue;
                }
                let v = (peak * w).clamp(0.0, 1.0) as f32;
                if v > scan.get(a, b) {
                    scan.set(a, b, v);
                }
            }
        }
    }
    Ok(scan)
}

/// Nearest-neighbour resampling of a polar scan onto a `side x side` grid
/// centred on the sensor.
///
/// Polar cell `(a, b)` sits at bearing `a * 2π/A` and range `(b + 0.5) * bin_size`.
/// Each polar cell is splatted onto its nearest Cartesian cell, and every
/// Cartesian cell also samples its nearest polar cell; the maximum wins. The
/// splat keeps fine polar returns that the coarse grid would skip, the
/// sampling fills gaps between far azimuths.
pub fn polar_to_cartesian(scan: &PolarScan, side: usize, cell_size: f64) -> Result<CartesianScan> {
    if side == 0 || side % 2 != 0 {
        return Err(Error::config(format!("side {side} must be even and > 0")));
    }
    if !(cell_size > 0.0) {
        return Err(Error::config("cell_size must be > 0"));
    }
    let mut out = CartesianScan::zeros(side, cell_size, scan.pose_index);
    let half = (side / 2) as f64;
    let az_step = TAU / scan.azimuths as f64;

    for a in 0..scan.azimuths {
        let (sin, cos) = (a as f64 * az_step).sin_cos();
        for b in 0..scan.bins {
            let v = scan.get(a, b);
            if v == 0.0 {
                continue;
            }
            let r = (b as f64 + 0.5) * scan.bin_size;
            let ix = (half + r * cos / cell_size).round();
            let iy = (half + r * sin / cell_size).round();
            if ix < 0.0 || iy < 0.0 || ix >= side as f64 || iy >= side as f64 {
                continue;
            }
            let (ix, iy) = (ix as usize, iy as usize);
            if v > out.get(ix, iy) {
                out.set(ix, iy, v);
            }
        }
    }

    for ix in 0..side {
        let x = (ix as f64 - half) * cell_size;
        for iy in 0..side {
            let y = (iy as f64 - half) * cell_size;
            let r = x.hypot(y);
            let b = (r / scan.bin_size).floor() as usize;
            if b >= scan.bins {
                continue;
            }
            let a = ((y.atan2(x) / az_step).round() as isize).rem_euclid(scan.azimuths as isize)
                as usize;
            let v = scan.get(a, b);
            if v > out.get(ix, iy) {
                out.set(ix, iy, v);
            }
        }
    }
    Ok(out)
}

/// Rotates a Cartesian scan counter-clockwise by `angle` about the sensor
/// cell, sampling the nearest source cell; sources off the grid read 0.
pub fn rotate_scan(scan: &CartesianScan, angle: f64) -> CartesianScan {
    if angle == 0.0 {
        return scan.clone();
    }
    let side = scan.side;
    let c = scan.center();
    let (sin, cos) = angle.sin_cos();
    let mut out = CartesianScan::zeros(side, scan.cell_size, scan.pose_index);
    for ix in 0..side {
        let x = ix as f64 - c;
        for iy in 0..side {
            let y = iy as f64 - c;
            // inverse rotation to find the source cell
            let sx = (c + cos * x + sin * y).round();
            let sy = (c - sin * x + cos * y).round();
            if sx < 0.0 || sy < 0.0 || sx >= side as f64 || sy >= side as f64 {
                continue;
            }
            out.set(ix, iy, scan.get(sx as usize, sy as usize));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use super::*;
    use crate::scan_synth::{Landmark, ScanGeometry, WorldSpec};

    fn single_landmark_world(x: f64, y: f64) -> WorldModel {
        WorldModel::new(
            vec![Landmark {
                x,
                y,
                reflectivity: 0.9,
                radius: 0.3,
            }],
            100.0,
            0,
        )
        .unwrap()
    }

    fn origin(heading: f64) -> Pose {
        Pose {
            x: 0.0,
            y: 0.0,
            heading,
            timestamp: 0.0,
        }
    }

    fn argmax(v: &[f32]) -> usize {
        v.iter()
            .enumerate()
            .fold(
                (0, f32::MIN),
                |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc },
            )
            .0
    }

    #[test]
    fn empty_world_renders_zero() {
        let scan =
            render_polar_scan(&WorldModel::empty(10.0), &origin(0.0), 0, 16, 32, 0.5).unwrap();
        assert!(scan.intensities.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_ahead_landmark_peaks_at_expected_cell() {
        let r = 10.3;
        let world = single_landmark_world(r, 0.0);
        let scan = render_polar_scan(&world, &origin(0.0), 0, 100, 256, 0.125).unwrap();
        let idx = argmax(&scan.intensities);
        assert_eq!(idx / scan.bins, 0);
        assert_eq!(idx % scan.bins, (r / 0.125).floor() as usize);
        assert!(scan.intensities.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn heading_rotation_is_circular_azimuth_shift() {
        let world = WorldModel::generate(
            &WorldSpec {
                extent: 40.0,
                landmark_count: 60,
                ..WorldSpec::default()
            },
            11,
        )
        .unwrap();
        let a = 100;
        let base = render_polar_scan(&world, &origin(0.3), 0, a, 128, 0.25).unwrap();
        for k in [1isize, 7, 25, 63] {
            let dtheta = k as f64 * TAU / a as f64;
            let rotated =
                render_polar_scan(&world, &origin(0.3 + dtheta), 0, a, 128, 0.25).unwrap();
            let shift = (dtheta * a as f64 / TAU).round() as isize;
            let expected = base.shift_azimuth(shift);
            let mut max_diff = 0f32;
            for (x, y) in rotated.intensities.iter().zip(&expected.intensities) {
                max_diff = max_diff.max((x - y).abs());
            }
            assert!(max_diff < 1e-5, "k={k}: max diff {max_diff}");
        }
    }

    #[test]
    fn zero_polar_gives_zero_cartesian() {
        let scan = PolarScan::zeros(100, 256, 0.125, 0);
        let cart = polar_to_cartesian(&scan, 64, 0.5).unwrap();
        assert_eq!(cart.count_nonzero(), 0);
    }

    #[test]
    fn single_polar_cell_lands_on_hand_computed_cell() {
        let (a_count, bins, bin_size, side, cell) = (100usize, 256usize, 0.125, 64usize, 0.5);
        for (a, b) in [(0usize, 40usize), (13, 100), (50, 7), (77, 120)] {
            let mut scan = PolarScan::zeros(a_count, bins, bin_size, 0);
            scan.set(a, b, 1.0);
            let cart = polar_to_cartesian(&scan, side, cell).unwrap();
            let theta = a as f64 * TAU / a_count as f64;
            let r = (b as f64 + 0.5) * bin_size;
            let ix = (32.0 + r * theta.cos() / cell).round() as usize;
            let iy = (32.0 + r * theta.sin() / cell).round() as usize;
            assert_eq!(cart.get(ix, iy), 1.0, "a={a} b={b}");
        }
    }

    #[test]
    fn cells_beyond_max_range_stay_zero() {
        let mut scan = PolarScan::zeros(8, 4, 1.0, 0);
        scan.intensities.iter_mut().for_each(|v| *v = 1.0);
        let cart = polar_to_cartesian(&scan, 16, 1.0).unwrap();
        assert_eq!(cart.get(0, 0), 0.0);
        assert_eq!(cart.get(8, 8), 1.0);
    }

    #[test]
    fn navtech_geometry_rasterizes_to_256_cells_of_half_meter() {
        let g = ScanGeometry::navtech();
        assert_eq!((g.azimuths, g.bins, g.side), (400, 3768, 256));
        assert_eq!((g.bin_size, g.cell_size), (0.0438, 0.5));
        let world = single_landmark_world(30.0, 12.0);
        let polar =
            render_polar_scan(&world, &origin(0.0), 3, g.azimuths, g.bins, g.bin_size).unwrap();
        let cart = polar_to_cartesian(&polar, g.side, g.cell_size).unwrap();
        assert_eq!(cart.side, 256);
        assert_eq!(cart.cell_size, 0.5);
        assert_eq!(cart.pose_index, 3);
        let ix = (128.0 + 30.0 / 0.5) as usize;
        let iy = (128.0 + 12.0 / 0.5) as usize;
        assert!(cart.get(ix, iy) > 0.5);
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let world = single_landmark_world(5.0, 3.0);
        let polar = render_polar_scan(&world, &origin(0.0), 0, 100, 256, 0.125).unwrap();
        let cart = polar_to_cartesian(&polar, 64, 0.5).unwrap();
        assert_eq!(rotate_scan(&cart, 0.0), cart);
    }

    #[test]
    fn quarter_turn_moves_cell_to_rotated_coordinates() {
        let mut scan = CartesianScan::zeros(16, 1.0, 0);
        scan.set(8 + 3, 8 + 1, 1.0);
        let out = rotate_scan(&scan, FRAC_PI_2);
        // (x, y) = (3, 1) -> (-1, 3)
        assert_eq!(out.get(8 - 1, 8 + 3), 1.0);
        assert_eq!(out.count_nonzero(), 1);
    }

    #[test]
    fn half_turn_twice_is_near_identity_on_sparse_scan() {
        let world = WorldModel::generate(
            &WorldSpec {
                extent: 60.0,
                landmark_count: 300,
                ..WorldSpec::default()
            },
            5,
        )
        .unwrap();
        let polar = render_polar_scan(&world, &origin(1.0), 0, 100, 256, 0.125).unwrap();
        let cart = polar_to_cartesian(&polar, 64, 0.5).unwrap();
        let back = rotate_scan(&rotate_scan(&cart, PI), PI);
        // row and column 0 have no source cell after a half turn
        let c = cart.center();
        let mut inside = 0;
        let mut equal = 0;
        for ix in 0..64 {
            for iy in 0..64 {
                if (ix as f64 - c).hypot(iy as f64 - c) < c - 1.0 {
                    inside += 1;
                    equal += (cart.get(ix, iy) == back.get(ix, iy)) as usize;
                }
            }
        }
        assert_eq!(equal, inside);
    }
}
