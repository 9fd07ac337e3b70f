use crate::error::{Error, Result};

/// Sensor and rasterization geometry.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanGeometry {
    pub azimuths: usize,
    pub bins: usize,
    /// Range bin size in meters.
    pub bin_size: f64,
    /// Cartesian side length in cells; must be even.
    pub side: usize,
    /// Cartesian cell size in meters.
    pub cell_size: f64,
}

impl Default for ScanGeometry {
    fn default() -> Self {
        Self::desk()
    }
}

impl ScanGeometry {
    /// Small geometry used for training at desk scale: 32 m range, 64x64 grid.
    pub fn desk() -> Self {
        Self {
            azimuths: 100,
            bins: 256,
            bin_size: 0.125,
            side: 64,
            cell_size: 0.5,
        }
    }

    /// Navtech CTS350-X geometry with a 256x256 Cartesian raster.
    pub fn navtech() -> Self {
        Self {
            azimuths: 400,
            bins: 3768,
            bin_size: 0.0438,
            side: 256,
            cell_size: 0.5,
        }
    }

    pub fn max_range(&self) -> f64 {
        self.bins as f64 * self.bin_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths == 0 || self.bins == 0 {
            return Err(Error::config("azimuths and bins must be >= 1"));
        }
        if self.side == 0 || self.side % 2 != 0 {
            return Err(Error::config(format!(
                "side {} must be even and > 0",
                self.side
            )));
        }
        if !(self.bin_size > 0.0) || !(self.cell_size > 0.0) {
            return Err(Error::config("bin_size and cell_size must be > 0"));
        }
        Ok(())
    }
}

/// Raw scan: `azimuths x bins` intensities, azimuth-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarScan {
    pub intensities: Vec<f32>,
    pub azimuths: usize,
    pub bins: usize,
    pub bin_size: f64,
    pub pose_index: u64,
}

impl PolarScan {
    pub fn zeros(azimuths: usize, bins: usize, bin_size: f64, pose_index: u64) -> Self {
        Self {
            intensities: vec![0.0; azimuths * bins],
            azimuths,
            bins,
            bin_size,
            pose_index,
        }
    }

    #[inline]
    pub fn get(&self, azimuth: usize, bin: usize) -> f32 {
        self.intensities[azimuth * self.bins + bin]
    }

    #[inline]
    pub fn set(&mut self, azimuth: usize, bin: usize, v: f32) {
        self.intensities[azimuth * self.bins + bin] = v;
    }

    /// Circular shift along azimuth: output azimuth `a` takes input azimuth `a + shift`.
    pub fn shift_azimuth(&self, shift: isize) -> Self {
        let mut out = self.clone();
        let a_count = self.azimuths as isize;
        for a in 0..self.azimuths {
            let src = (a as isize + shift).rem_euclid(a_count) as usize;
            let dst = &mut out.intensities[a * self.bins..(a + 1) * self.bins];
            dst.copy_from_slice(&self.intensities[src * self.bins..(src + 1) * self.bins]);
        }
        out
    }
}

/// Rasterized scan: `side x side` intensities, row-major.
///
/// Cell `(ix, iy)` is centred at `x = (ix - side/2) * cell_size` (forward) and
/// `y = (iy - side/2) * cell_size` (left) in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianScan {
    pub intensities: Vec<f32>,
    pub side: usize,
    pub cell_size: f64,
    pub pose_index: u64,
}

impl CartesianScan {
    pub fn zeros(side: usize, cell_size: f64, pose_index: u64) -> Self {
        Self {
            intensities: vec![0.0; side * side],
            side,
            cell_size,
            pose_index,
        }
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f32 {
        self.intensities[ix * self.side + iy]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: f32) {
        self.intensities[ix * self.side + iy] = v;
    }

    #[inline]
    pub fn center(&self) -> f64 {
        (self.side / 2) as f64
    }

    pub fn count_nonzero(&self) -> usize {
        self.intensities.iter().filter(|v| **v != 0.0).count()
    }
}
