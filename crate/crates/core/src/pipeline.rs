//! Glue between the model, the map and the metrics.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evalkit::{resolve, GroundTruth, QueryOutcome};
use crate::mapstore::{MapEntry, ParentMap};
use crate::model::{encode, inference_embedding, Embedding, ModelParams};
use crate::query::knn;
use crate::scan_synth::{CartesianScan, Pose};
use crate::Scalar;

/// Inference embeddings of `scans`, computed in parallel, in input order.
pub fn embed_scans<T: Scalar>(
    params: &ModelParams<T>,
    scans: &[CartesianScan],
) -> Result<Vec<Embedding<T>>> {
    scans
        .par_iter()
        .map(|s| encode(params, s).map(|l| inference_embedding(&l)))
        .collect()
}

/// Map entries for one session; ids are assigned when the entries enter a map.
pub fn session_entries<T: Scalar>(
    embeddings: &[Embedding<T>],
    poses: &[Pose],
    session: &str,
) -> Result<Vec<MapEntry>> {
    if embeddings.len() != poses.len() {
        return Err(Error::dim("session poses", embeddings.len(), poses.len()));
    }
    Ok(embeddings
        .iter()
        .zip(poses)
        .enumerate()
        .map(|(i, (e, p))| MapEntry {
            entry_id: i as u64,
            embedding: e.z.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            uncertainty: e.uncertainty.to_f64_lossy() as f32,
            position: (p.x, p.y),
            source_session: session.to_string(),
            source_frame: i as u64,
        })
        .collect())
}

/// Ground-truth positions of map entries, indexed by entry id.
pub fn map_positions(map: &ParentMap) -> Vec<(f64, f64)> {
    let n = map
        .entries
        .iter()
        .map(|e| e.entry_id + 1)
        .max()
        .unwrap_or(0) as usize;
    let mut out = vec![(f64::INFINITY, f64::INFINITY); n];
    for e in &map.entries {
        out[e.entry_id as usize] = e.position;
    }
    out
}

/// Top-`k` retrieval for every query, resolved against ground truth.
pub fn query_outcomes<T: Scalar>(
    map: &ParentMap,
    queries: &[Embedding<T>],
    query_poses: &[Pose],
    k: usize,
) -> Result<Vec<QueryOutcome>> {
    let results = queries
        .par_iter()
        .map(|q| knn(map, &q.z, k).map(|r| r.matches))
        .collect::<Result<Vec<_>>>()?;
    let us: Vec<f64> = queries
        .iter()
        .map(|q| q.uncertainty.to_f64_lossy())
        .collect();
    let gt = GroundTruth::new(
        map_positions(map),
        query_poses.iter().map(|p| (p.x, p.y)).collect(),
    );
    resolve(&results, &us, &gt)
}
