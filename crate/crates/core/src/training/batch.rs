use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan_synth::{rotate_scan, CartesianScan, Pose};

/// Scans of one traversal in temporal order, with their poses.
#[derive(Debug, Clone)]
pub struct TrainingSession {
    pub scans: Vec<CartesianScan>,
    pub poses: Vec<Pose>,
}

impl TrainingSession {
    pub fn new(scans: Vec<CartesianScan>, poses: Vec<Pose>) -> Result<Self> {
        if scans.len() != poses.len() {
            return Err(Error::dim(
                "training session poses",
                scans.len(),
                poses.len(),
            ));
        }
        Ok(Self { scans, poses })
    }

    pub fn len(&self) -> usize {
        self.scans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scans.is_empty()
    }
}

/// How augmented views are rotated.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "angle", rename_all = "snake_case")]
pub enum RotationPolicy {
    None,
    Fixed(f64),
    /// Uniform angle in `[0, 2π)`.
    #[default]
    Uniform,
}

/// Originals and their rotated, temporally proximal augmentations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub originals: Vec<CartesianScan>,
    pub augmented: Vec<CartesianScan>,
    /// Session frame of each original.
    pub indices: Vec<usize>,
    /// Session frame each augmentation was rendered from.
    pub augmented_from: Vec<usize>,
    pub angles: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

/// Pairs each frame in `indices` with a rotated copy of a frame at most
/// `window` frames away; offsets falling outside the session are clamped.
pub fn make_batch(
    session: &TrainingSession,
    indices: &[usize],
    rotation: RotationPolicy,
    window: usize,
    seed: u64,
) -> Result<Batch> {
    let n = session.len();
    if let Some(bad) = indices.iter().find(|i| **i >= n) {
        return Err(Error::domain(format!("frame {bad} outside session of {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Batch {
        originals: Vec::with_capacity(indices.len()),
        augmented: Vec::with_capacity(indices.len()),
        indices: indices.to_vec(),
        augmented_from: Vec::with_capacity(indices.len()),
        angles: Vec::with_capacity(indices.len()),
    };
    let w = window as i64;
    for &i in indices {
        let offset = rng.random_range(-w..=w);
        let src = (i as i64 + offset).clamp(0, n as i64 - 1) as usize;
        let angle = match rotation {
            RotationPolicy::None => 0.0,
            RotationPolicy::Fixed(a) => a,
            RotationPolicy::Uniform => rng.random_range(0.0..TAU),
        };
        batch.originals.push(session.scans[i].clone());
        batch
            .augmented
            .push(rotate_scan(&session.scans[src], angle));
        batch.augmented_from.push(src);
        batch.angles.push(angle);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    fn session(n: usize) -> TrainingSession {
        let scans = (0..n)
            .map(|i| {
                let mut s = CartesianScan::zeros(8, 1.0, i as u64);
                s.set(i % 8, (3 * i) % 8, 1.0);
                s
            })
            .collect();
        let poses = (0..n)
            .map(|i| Pose {
                x: i as f64,
                y: 0.0,
                heading: 0.0,
                timestamp: i as f64,
            })
            .collect();
        TrainingSession::new(scans, poses).unwrap()
    }

    #[test]
    fn zero_window_no_rotation_is_identity() {
        let s = session(6);
        let b = make_batch(&s, &[0, 3, 5], RotationPolicy::Fixed(0.0), 0, 1).unwrap();
        assert_eq!(b.originals, b.augmented);
    }

    #[test]
    fn zero_window_quarter_turn() {
        let s = session(6);
        let b = make_batch(&s, &[1, 4], RotationPolicy::Fixed(FRAC_PI_2), 0, 1).unwrap();
        for (o, a) in b.originals.iter().zip(&b.augmented) {
            assert_eq!(*a, rotate_scan(o, FRAC_PI_2));
        }
    }

    #[test]
    fn seeded_choices_are_reproducible_and_clamped() {
        let s = session(10);
        let a = make_batch(&s, &[0, 9, 4, 5], RotationPolicy::Uniform, 3, 77).unwrap();
        let b = make_batch(&s, &[0, 9, 4, 5], RotationPolicy::Uniform, 3, 77).unwrap();
        assert_eq!(a.augmented_from, b.augmented_from);
        assert_eq!(a.angles, b.angles);
        for (i, src) in a.indices.iter().zip(&a.augmented_from) {
            assert!(src.abs_diff(*i) <= 3 && *src < 10);
        }
        assert!(make_batch(&s, &[10], RotationPolicy::None, 0, 0).is_err());
    }
}
