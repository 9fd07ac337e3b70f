use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::normalize_angle;
use crate::error::{Error, Result};

/// Time between consecutive frames; one revolution of a 4 Hz scanning radar.
pub const FRAME_PERIOD_S: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub reflectivity: f64,
    pub radius: f64,
}

/// Parameters for procedurally generated worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    /// Square half-width in meters.
    pub extent: f64,
    pub landmark_count: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    /// Straight walls of closely spaced returns, added after the scatter.
    #[serde(default)]
    pub wall_count: usize,
    #[serde(default = "default_wall_length")]
    pub wall_length: (f64, f64),
    /// Distance between consecutive returns along a wall.
    #[serde(default = "default_wall_spacing")]
    pub wall_spacing: f64,
}

fn default_wall_length() -> (f64, f64) {
    (5.0, 30.0)
}

fn default_wall_spacing() -> f64 {
    1.0
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            extent: 120.0,
            landmark_count: 2500,
            min_radius: 0.3,
            max_radius: 1.5,
            wall_count: 0,
            wall_length: default_wall_length(),
            wall_spacing: default_wall_spacing(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub landmarks: Vec<Landmark>,
    pub extent: f64,
    pub seed: u64,
}

impl WorldModel {
    pub fn new(landmarks: Vec<Landmark>, extent: f64, seed: u64) -> Result<Self> {
        if !(extent > 0.0) {
            return Err(Error::domain("world extent must be > 0"));
        }
        for (i, l) in landmarks.iter().enumerate() {
            if l.x.abs() > extent || l.y.abs() > extent {
                return Err(Error::domain(format!(
                    "landmark {i} lies outside the world extent"
                )));
            }
            if !(0.0..=1.0).contains(&l.reflectivity) {
                return Err(Error::domain(format!(
                    "landmark {i} reflectivity outside [0,1]"
                )));
            }
            if !(l.radius > 0.0) {
                return Err(Error::domain(format!("landmark {i} radius must be > 0")));
            }
        }
        Ok(Self {
            landmarks,
            extent,
            seed,
        })
    }

    pub fn empty(extent: f64) -> Self {
        Self {
            landmarks: Vec::new(),
            extent,
            seed: 0,
        }
    }

    /// Uniformly scattered landmarks plus optional walls; identical seeds
    /// give identical worlds.
    pub fn generate(spec: &WorldSpec, seed: u64) -> Result<Self> {
        if !(spec.min_radius > 0.0) || spec.max_radius < spec.min_radius {
            return Err(Error::config("landmark radii must satisfy 0 < min <= max"));
        }
        let (len_lo, len_hi) = spec.wall_length;
        if spec.wall_count > 0 && (!(len_lo > 0.0) || len_hi < len_lo || !(spec.wall_spacing > 0.0))
        {
            return Err(Error::config(
                "walls need 0 < min length <= max length and spacing > 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut landmarks: Vec<Landmark> = (0..spec.landmark_count)
            .map(|_| Landmark {
                x: rng.random_range(-spec.extent..=spec.extent),
                y: rng.random_range(-spec.extent..=spec.extent),
                reflectivity: rng.random_range(0.2..=1.0),
                radius: rng.random_range(spec.min_radius..=spec.max_radius),
            })
            .collect();
        for _ in 0..spec.wall_count {
            let cx = rng.random_range(-spec.extent..=spec.extent);
            let cy = rng.random_range(-spec.extent..=spec.extent);
            let angle = rng.random_range(0.0..TAU);
            let length = rng.random_range(len_lo..=len_hi);
            let reflectivity = rng.random_range(0.5..=1.0);
            let n = (length / spec.wall_spacing).floor() as usize + 1;
            for k in 0..n {
                let t = k as f64 * spec.wall_spacing - length / 2.0;
                let (x, y) = (cx + t * angle.cos(), cy + t * angle.sin());
                if x.abs() <= spec.extent && y.abs() <= spec.extent {
                    landmarks.push(Landmark {
                        x,
                        y,
                        reflectivity,
                        radius: spec.min_radius,
                    });
                }
            }
        }
        Self::new(landmarks, spec.extent, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Radians in `[0, 2π)`, counter-clockwise from +x.
    pub heading: f64,
    pub timestamp: f64,
}

/// Route shape followed by a traversal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RouteSpec {
    Straight {
        x0: f64,
        y0: f64,
        heading: f64,
    },
    /// Counter-clockwise circle; `offset` is an arc-length shift of the first frame.
    Loop {
        cx: f64,
        cy: f64,
        radius: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl RouteSpec {
    pub fn circumference(&self) -> Option<f64> {
        match self {
            RouteSpec::Loop { radius, .. } => Some(TAU * radius),
            RouteSpec::Straight { .. } => None,
        }
    }

    fn pose_at(&self, s: f64) -> (f64, f64, f64) {
        match *self {
            RouteSpec::Straight { x0, y0, heading } => {
                (x0 + s * heading.cos(), y0 + s * heading.sin(), heading)
            }
            RouteSpec::Loop {
                cx,
                cy,
                radius,
                offset,
            } => {
                let theta = (s + offset) / radius;
                (
                    cx + radius * theta.cos(),
                    cy + radius * theta.sin(),
                    theta + FRAC_PI_2,
                )
            }
        }
    }
}

/// Poses spaced `frame_spacing` meters apart along `route`, one radar
/// revolution apart in time.
pub fn generate_trajectory(
    world: &WorldModel,
    route: &RouteSpec,
    n_frames: usize,
    frame_spacing: f64,
) -> Result<Vec<Pose>> {
    if n_frames == 0 {
        return Err(Error::domain("n_frames must be >= 1"));
    }
    if !(frame_spacing > 0.0) {
        return Err(Error::domain("frame_spacing must be > 0"));
    }
    let inside = |x: f64, y: f64| x.abs() <= world.extent && y.abs() <= world.extent;
    match *route {
        RouteSpec::Loop { cx, cy, radius, .. } => {
            if !(radius > 0.0) {
                return Err(Error::domain("loop radius must be > 0"));
            }
            if !inside(cx - radius, cy - radius) || !inside(cx + radius, cy + radius) {
                return Err(Error::domain("loop route exceeds world extent"));
            }
        }
        RouteSpec::Straight { .. } => {
            let (x0, y0, _) = route.pose_at(0.0);
            let (x1, y1, _) = route.pose_at((n_frames - 1) as f64 * frame_spacing);
            if !inside(x0, y0) || !inside(x1, y1) {
                return Err(Error::domain("straight route exceeds world extent"));
            }
        }
    }
    Ok((0..n_frames)
        .map(|i| {
            let (x, y, heading) = route.pose_at(i as f64 * frame_spacing);
            Pose {
                x,
                y,
                heading: normalize_angle(heading),
                timestamp: i as f64 * FRAME_PERIOD_S,
            }
        })
        .collect())
}
