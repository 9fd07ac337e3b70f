//! Retrieval against a parent map with uncertainty-based query rejection.

use std::io::Write;

use num_traits::{FromPrimitive, Num};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapstore::ParentMap;
use crate::model::Embedding;
use crate::Scalar;

/// Static rejection thresholds spread symmetrically around the unit prior
/// variance: `(1 - delta) + n * 2 * delta / count` for `n` in `0..=count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSet<T> {
    pub delta: T,
    pub count: usize,
    pub values: Vec<T>,
}

/// Builds the threshold set. Works for floats and for exact types such as
/// `num_rational::Ratio<i64>`.
pub fn make_thresholds<T>(delta: T, count: usize) -> Result<ThresholdSet<T>>
where
    T: Num + FromPrimitive + PartialOrd + Copy,
{
    if !(delta > T::zero()) {
        return Err(Error::config("threshold delta must be > 0"));
    }
    if count == 0 {
        return Err(Error::config("threshold count must be >= 1"));
    }
    let two = T::one() + T::one();
    let n_total =
        T::from_usize(count).ok_or_else(|| Error::config("threshold count not representable"))?;
    let values = (0..=count)
        .map(|n| {
            let n = T::from_usize(n).expect("n <= count is representable");
            (T::one() - delta) + n * two * delta / n_total
        })
        .collect();
    Ok(ThresholdSet {
        delta,
        count,
        values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub id: u64,
    pub dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Knn {
    pub matches: Vec<Match>,
    /// Set when fewer than `k` entries were available.
    pub truncated: bool,
}

pub(crate) fn normalized(v: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = v.collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

/// Euclidean distance; symmetric bit for bit.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Exact k nearest neighbours of the L2-normalized query among the
/// L2-normalized map embeddings. Ties go to the lower entry id.
pub fn knn<T: Scalar>(map: &ParentMap, query: &[T], k: usize) -> Result<Knn> {
    if k == 0 {
        return Err(Error::config("k must be >= 1"));
    }
    let d = map
        .dim()
        .ok_or_else(|| Error::domain("query against an empty map"))?;
    if query.len() != d {
        return Err(Error::dim("query embedding", d, query.len()));
    }
    let q = normalized(query.iter().map(|v| v.to_f64_lossy()));
    let mut all: Vec<Match> = map
        .entries
        .iter()
        .map(|e| Match {
            id: e.entry_id,
            dist: distance(&q, &normalized(e.embedding.iter().map(|&v| v as f64))),
        })
        .collect();
    all.sort_by(|a, b| a.dist.total_cmp(&b.dist).then(a.id.cmp(&b.id)));
    let truncated = k > all.len();
    all.truncate(k);
    Ok(Knn {
        matches: all,
        truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStatus {
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub status: QueryStatus,
    pub u: f64,
    pub threshold: f64,
    pub matches: Vec<Match>,
}

/// Rejects when the query's uncertainty strictly exceeds `threshold`,
/// otherwise retrieves the top `k` map entries.
pub fn introspective_query<T: Scalar>(
    map: &ParentMap,
    embedding: &Embedding<T>,
    k: usize,
    threshold: f64,
) -> Result<QueryResult> {
    if !(threshold >= 0.0) {
        return Err(Error::config("rejection threshold must be >= 0"));
    }
    let u = embedding.uncertainty.to_f64_lossy();
    if u > threshold {
        return Ok(QueryResult {
            status: QueryStatus::Rejected,
            u,
            threshold,
            matches: Vec::new(),
        });
    }
    let found = knn(map, &embedding.z, k)?;
    Ok(QueryResult {
        status: QueryStatus::Accepted,
        u,
        threshold,
        matches: found.matches,
    })
}

/// Runs independent queries in parallel; output order follows input order.
pub fn query_all<T: Scalar>(
    map: &ParentMap,
    embeddings: &[Embedding<T>],
    k: usize,
    threshold: f64,
) -> Result<Vec<QueryResult>> {
    embeddings
        .par_iter()
        .map(|e| introspective_query(map, e, k, threshold))
        .collect()
}

/// One line of query output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryLine {
    pub frame: u64,
    #[serde(flatten)]
    pub result: QueryResult,
}

pub fn write_jsonl<W: Write>(mut w: W, lines: &[QueryLine]) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line).map_err(|e| Error::format(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(text: &str) -> Result<Vec<QueryLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(format!("query line {}: {e}", i + 1)))
        })
        .collect()
}
