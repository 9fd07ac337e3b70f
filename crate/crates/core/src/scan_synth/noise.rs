use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::grid::CartesianScan;
use crate::error::{Error, Result};

/// Angular step between the samples averaged by motion blur: one azimuth of
/// the 100-azimuth desk sensor.
pub const BLUR_STEP_RAD: f64 = TAU / 100.0;

/// Radar corruption parameters for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Std-dev of multiplicative speckle.
    pub speckle_sigma: f64,
    /// Per-cell probability of saturating to 1.0 near returns.
    pub saturation_prob: f64,
    pub occlusion_sectors: u32,
    /// Width of each occluded sector in radians.
    pub occlusion_width: f64,
    /// Half-width, in blur steps, of the azimuthal smear.
    pub blur_azimuths: u32,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.speckle_sigma >= 0.0) {
            return Err(Error::config("speckle_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.saturation_prob) {
            return Err(Error::config("saturation_prob must be in [0,1]"));
        }
        if !(self.occlusion_width >= 0.0) {
            return Err(Error::config("occlusion_width must be >= 0"));
        }
        Ok(())
    }

    /// Scalar summary of how corrupting this configuration is.
    ///
    /// Sum of speckle sigma, saturation probability, occluded fraction of the
    /// circle (capped at 1) and blur half-width over 10. Every term is
    /// non-decreasing in its field, and the seed does not contribute.
    pub fn severity(&self) -> f64 {
        let occluded = (self.occlusion_sectors as f64 * self.occlusion_width / TAU).min(1.0);
        self.speckle_sigma + self.saturation_prob + occluded + self.blur_azimuths as f64 / 10.0
    }

    pub fn is_identity(&self) -> bool {
        self.speckle_sigma == 0.0
            && self.saturation_prob == 0.0
            && (self.occlusion_sectors == 0 || self.occlusion_width == 0.0)
            && self.blur_azimuths == 0
    }
}

/// Per-traversal noise: the worst-case frame configuration plus how much
/// individual frames vary below it.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    pub speckle_sigma: f64,
    pub saturation_prob: f64,
    pub occlusion_sectors: u32,
    pub occlusion_width: f64,
    pub blur_azimuths: u32,
    /// Fraction in `[0,1]`; each frame is scaled by `1 - jitter * u`, `u ~ U(0,1)`.
    #[serde(default)]
    pub jitter: f64,
}

impl NoiseProfile {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::config("noise jitter must be in [0,1]"));
        }
        self.frame_config(0, 0).validate()
    }

    /// Noise configuration of `frame`, derived deterministically from `seed`.
    pub fn frame_config(&self, seed: u64, frame: u64) -> NoiseConfig {
        let frame_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(frame.wrapping_mul(0xD1B5_4A32_D192_ED03))
            ^ 0x5851_F42D_4C95_7F2D;
        let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
        let u: f64 = rng.random();
        let scale = 1.0 - self.jitter * u;
        NoiseConfig {
            speckle_sigma: self.speckle_sigma * scale,
            saturation_prob: self.saturation_prob * scale,
            occlusion_sectors: (self.occlusion_sectors as f64 * scale).round() as u32,
            occlusion_width: self.occlusion_width,
            blur_azimuths: (self.blur_azimuths as f64 * scale).round() as u32,
            seed: frame_seed,
        }
    }
}

/// Corrupts a scan with speckle, saturation, occlusion and motion blur, in
/// that order, and clamps the result to `[0,1]`. Returns the corrupted scan
/// with `cfg.severity()`.
pub fn apply_noise(scan: &CartesianScan, cfg: &NoiseConfig) -> (CartesianScan, f64) {
    let severity = cfg.severity();
    if cfg.is_identity() {
        return (scan.clone(), severity);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = scan.clone();
    let side = scan.side;

    if cfg.speckle_sigma > 0.0 {
        for v in out.intensities.iter_mut().filter(|v| **v != 0.0) {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 * (1.0 + cfg.speckle_sigma * n)).clamp(0.0, 1.0) as f32;
        }
    }

    if cfg.saturation_prob > 0.0 {
        let src = out.intensities.clone();
        for ix in 0..side {
            for iy in 0..side {
                let lit = (ix.saturating_sub(1)..=(ix + 1).min(side - 1)).any(|x| {
                    (iy.saturating_sub(1)..=(iy + 1).min(side - 1))
                        .any(|y| src[x * side + y] != 0.0)
                });
                if lit && rng.random::<f64>() < cfg.saturation_prob {
                    out.set(ix, iy, 1.0);
                }
            }
        }
    }

    if cfg.occlusion_sectors > 0 && cfg.occlusion_width > 0.0 {
        let c = out.center();
        let sectors: Vec<f64> = (0..cfg.occlusion_sectors)
            .map(|_| rng.random_range(0.0..TAU))
            .collect();
        for ix in 0..side {
            for iy in 0..side {
                let angle = (iy as f64 - c).atan2(ix as f64 - c).rem_euclid(TAU);
                if sectors
                    .iter()
                    .any(|start| (angle - start).rem_euclid(TAU) < cfg.occlusion_width)
                {
                    out.set(ix, iy, 0.0);
                }
            }
        }
    }

    if cfg.blur_azimuths > 0 {
        let src = out.clone();
        let c = out.center();
        let k = cfg.blur_azimuths as i64;
        let rotations: Vec<(f64, f64)> = (-k..=k)
            .map(|j| (j as f64 * BLUR_STEP_RAD).sin_cos())
            .collect();
        for ix in 0..side {
            let x = ix as f64 - c;
            for iy in 0..side {
                let y = iy as f64 - c;
                let mut sum = 0.0f64;
                for &(sin, cos) in &rotations {
                    let sx = (c + cos * x - sin * y).round();
                    let sy = (c + sin * x + cos * y).round();
                    if sx >= 0.0 && sy >= 0.0 && sx < side as f64 && sy < side as f64 {
                        sum += src.get(sx as usize, sy as usize) as f64;
                    }
                }
                out.set(ix, iy, (sum / rotations.len() as f64) as f32);
            }
        }
    }

    for v in &mut out.intensities {
        *v = v.clamp(0.0, 1.0);
    }
    (out, severity)
}
