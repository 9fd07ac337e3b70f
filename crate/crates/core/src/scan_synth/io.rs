//! On-disk formats for scans, trajectories and per-frame severities.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::CartesianScan;
use super::world::Pose;
use crate::error::{Error, Result};
use crate::fsutil::{read_exact_or, write_atomic};

pub const SCAN_MAGIC: &[u8; 4] = b"RSCN";
pub const SCAN_VERSION: u32 = 1;

/// Little-endian: magic, u32 version, u32 side, f32 cell size, u64 pose
/// index, then `side * side` f32 intensities row-major.
pub fn write_scan(path: &Path, scan: &CartesianScan) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + 4 * scan.intensities.len());
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&(scan.side as u32).to_le_bytes());
    buf.extend_from_slice(&(scan.cell_size as f32).to_le_bytes());
    buf.extend_from_slice(&scan.pose_index.to_le_bytes());
    for v in &scan.intensities {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_scan(path: &Path) -> Result<CartesianScan> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 24];
    read_exact_or(&mut file, &mut header, "scan header")?;
    if &header[0..4] != SCAN_MAGIC {
        return Err(Error::format(format!("{}: bad scan magic", path.display())));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != SCAN_VERSION {
        return Err(Error::format(format!("unsupported scan version {version}")));
    }
    let side = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cell_size = f32::from_le_bytes(header[12..16].try_into().unwrap()) as f64;
    let pose_index = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let mut body = vec![0u8; side * side * 4];
    read_exact_or(&mut file, &mut body, "scan body")?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::format("trailing bytes after scan body"));
    }
    let intensities = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CartesianScan {
        intensities,
        side,
        cell_size,
        pose_index,
    })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRow {
    frame: u64,
    x: f64,
    y: f64,
    heading: f64,
    timestamp: f64,
}

/// CSV with header `frame,x,y,heading,timestamp`.
pub fn write_trajectory_csv(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, p) in poses.iter().enumerate() {
        w.serialize(TrajectoryRow {
            frame: i as u64,
            x: p.x,
            y: p.y,
            heading: p.heading,
            timestamp: p.timestamp,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<Pose>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut poses = Vec::new();
    for (i, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(csv_err)?;
        if row.frame != i as u64 {
            return Err(Error::format(format!(
                "trajectory frame {} out of order",
                row.frame
            )));
        }
        poses.push(Pose {
            x: row.x,
            y: row.y,
            heading: row.heading,
            timestamp: row.timestamp,
        });
    }
    Ok(poses)
}

#[derive(Serialize, Deserialize)]
struct SeverityRow {
    frame: u64,
    severity: f64,
}

/// CSV with header `frame,severity`.
pub fn write_severity_csv(path: &Path, severities: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (i, s) in severities.iter().enumerate() {
        w.serialize(SeverityRow {
            frame: i as u64,
            severity: *s,
        })
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_severity_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize::<SeverityRow>()
        .map(|row| row.map(|r| r.severity).map_err(csv_err))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format(format!("csv: {other:?}")),
    }
}
