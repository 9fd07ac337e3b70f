//! Place recognition metrics: Recall@N, precision-recall, AP, F-scores and
//! recall under uncertainty-based rejection.
//!
//! Retrieved entries are first resolved against ground truth into
//! [`QueryOutcome`]s. Every metric works on outcomes, so results from
//! different map/query pairs can be pooled by concatenation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::query::Match;

pub const POSITIVE_RADIUS_M: f64 = 25.0;
pub const NEGATIVE_RADIUS_M: f64 = 50.0;
pub const RECALL_NS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Indexed by map entry id.
    pub map_positions: Vec<(f64, f64)>,
    /// Indexed by query order.
    pub query_positions: Vec<(f64, f64)>,
    pub positive_radius: f64,
    pub negative_radius: f64,
}

impl GroundTruth {
    pub fn new(map_positions: Vec<(f64, f64)>, query_positions: Vec<(f64, f64)>) -> Self {
        Self {
            map_positions,
            query_positions,
            positive_radius: POSITIVE_RADIUS_M,
            negative_radius: NEGATIVE_RADIUS_M,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius > 0.0) || !(self.positive_radius < self.negative_radius) {
            return Err(Error::config("need 0 < positive_radius < negative_radius"));
        }
        Ok(())
    }
}

/// Ground-truth class of a retrieved entry relative to the query position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchClass {
    Positive,
    /// Between the positive and negative radii.
    Ambiguous,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Retrieved candidates in rank order with their embedding distance.
    pub ranked: Vec<(f64, MatchClass)>,
    /// Some map entry lies within the positive radius.
    pub has_positive: bool,
    pub uncertainty: f64,
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Resolves ranked matches against ground truth. `uncertainties` may be
/// empty when no rejection metric is needed.
pub fn resolve(
    results: &[Vec<Match>],
    uncertainties: &[f64],
    gt: &GroundTruth,
) -> Result<Vec<QueryOutcome>> {
    gt.validate()?;
    if results.len() != gt.query_positions.len() {
        return Err(Error::dim(
            "query positions",
            results.len(),
            gt.query_positions.len(),
        ));
    }
    if !uncertainties.is_empty() && uncertainties.len() != results.len() {
        return Err(Error::dim(
            "query uncertainties",
            results.len(),
            uncertainties.len(),
        ));
    }
    results
        .iter()
        .enumerate()
        .map(|(qi, matches)| {
            let q = gt.query_positions[qi];
            let ranked = matches
                .iter()
                .map(|m| {
                    let p = *gt.map_positions.get(m.id as usize).ok_or_else(|| {
                        Error::domain(format!("match id {} has no ground-truth position", m.id))
                    })?;
                    let r = dist(p, q);
                    let class = if r <= gt.positive_radius {
                        MatchClass::Positive
                    } else if r <= gt.negative_radius {
                        MatchClass::Ambiguous
                    } else {
                        MatchClass::Negative
                    };
                    Ok((m.dist, class))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryOutcome {
                ranked,
                has_positive: gt
                    .map_positions
                    .iter()
                    .any(|&p| dist(p, q) <= gt.positive_radius),
                uncertainty: uncertainties.get(qi).copied().unwrap_or(0.0),
            })
        })
        .collect()
}

/// Fraction of queries with a positive among their first `n` candidates.
pub fn recall_at_n_outcomes(outcomes: &[QueryOutcome], n: usize) -> Result<f64> {
    if outcomes.is_empty() {
        return Err(Error::domain("recall over an empty query set"));
    }
    let hits = outcomes
        .iter()
        .filter(|o| {
            o.ranked
                .iter()
                .take(n)
                .any(|(_, c)| *c == MatchClass::Positive)
        })
        .count();
    Ok(hits as f64 / outcomes.len() as f64)
}

pub fn recall_at_n(results: &[Vec<Match>], gt: &GroundTruth, n: usize) -> Result<f64> {
    recall_at_n_outcomes(&resolve(results, &[], gt)?, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Top-1 distances at or below this value are accepted.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision-recall points from sweeping a top-1 distance acceptance
/// threshold over every observed distance, ascending.
///
/// Top-1 matches in the ambiguous band are left out entirely. Points where
/// precision or recall is undefined are omitted.
pub fn pr_curve_outcomes(outcomes: &[QueryOutcome]) -> Vec<PrPoint> {
    let scored: Vec<(f64, MatchClass, bool)> = outcomes
        .iter()
        .filter_map(|o| o.ranked.first().map(|&(d, c)| (d, c, o.has_positive)))
        .filter(|(_, c, _)| *c != MatchClass::Ambiguous)
        .collect();
    let mut thresholds: Vec<f64> = scored.iter().map(|s| s.0).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
        .into_iter()
        .filter_map(|t| {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for &(d, c, has_pos) in &scored {
                if d <= t {
                    match c {
                        MatchClass::Positive => tp += 1,
                        _ => fp += 1,
                    }
                } else if has_pos {
                    fneg += 1;
                }
            }
            if tp + fp == 0 || tp + fneg == 0 {
                return None;
            }
            Some(PrPoint {
                threshold: t,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / (tp + fneg) as f64,
            })
        })
        .collect()
}

pub fn pr_curve(results: &[Vec<Match>], gt: &GroundTruth) -> Result<Vec<PrPoint>> {
    Ok(pr_curve_outcomes(&resolve(results, &[], gt)?))
}

/// Rectangular-rule area under the PR curve. Each unique recall level
/// contributes its recall increment times the precision at the first
/// threshold reaching it.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut sorted: Vec<PrPoint> = curve.to_vec();
    sorted.sort_by(|a, b| a.threshold.total_cmp(&b.threshold));
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for p in sorted {
        if p.recall > last_recall {
            ap += (p.recall - last_recall) * p.precision;
            last_recall = p.recall;
        }
    }
    ap
}

pub fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / denom
    }
}

/// The PR point with the highest F-1; the lowest threshold wins ties.
pub fn best_f1_point(curve: &[PrPoint]) -> Option<PrPoint> {
    curve
        .iter()
        .copied()
        .fold(None, |best: Option<PrPoint>, p| match best {
            Some(b) if f_beta(b.precision, b.recall, 1.0) >= f_beta(p.precision, p.recall, 1.0) => {
                Some(b)
            }
            _ => Some(p),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrPoint {
    pub rejection_fraction: f64,
    pub recall_at_1: f64,
}

/// Recall@1 on the queries surviving `u <= threshold`, for each threshold.
/// Thresholds that reject everything are omitted. Output is sorted by
/// rejection fraction with duplicate points removed.
pub fn recall_at_rejection_outcomes(outcomes: &[QueryOutcome], thresholds: &[f64]) -> Vec<RrPoint> {
    let total = outcomes.len();
    let mut points: Vec<RrPoint> = thresholds
        .iter()
        .filter_map(|&t| {
            let survivors: Vec<&QueryOutcome> =
                outcomes.iter().filter(|o| o.uncertainty <= t).collect();
            if survivors.is_empty() {
                return None;
            }
            let hits = survivors
                .iter()
                .filter(|o| matches!(o.ranked.first(), Some((_, MatchClass::Positive))))
                .count();
            Some(RrPoint {
                rejection_fraction: (total - survivors.len()) as f64 / total as f64,
                recall_at_1: hits as f64 / survivors.len() as f64,
            })
        })
        .collect();
    points.sort_by(|a, b| a.rejection_fraction.total_cmp(&b.rejection_fraction));
    points.dedup();
    points
}

/// Every distinct observed uncertainty, which realises each achievable
/// rejection level exactly once.
pub fn quantile_thresholds(outcomes: &[QueryOutcome]) -> Vec<f64> {
    let mut us: Vec<f64> = outcomes.iter().map(|o| o.uncertainty).collect();
    us.sort_by(f64::total_cmp);
    us.dedup();
    us
}

/// Rejection curve over the union of the static thresholds and the
/// empirical quantile sweep.
pub fn recall_at_rejection(
    results: &[Vec<Match>],
    uncertainties: &[f64],
    gt: &GroundTruth,
    static_thresholds: &[f64],
) -> Result<Vec<RrPoint>> {
    let outcomes = resolve(results, uncertainties, gt)?;
    if uncertainties.len() != outcomes.len() {
        return Err(Error::dim(
            "query uncertainties",
            outcomes.len(),
            uncertainties.len(),
        ));
    }
    Ok(rr_curve(&outcomes, static_thresholds))
}

fn rr_curve(outcomes: &[QueryOutcome], static_thresholds: &[f64]) -> Vec<RrPoint> {
    let mut thresholds = quantile_thresholds(outcomes);
    thresholds.extend_from_slice(static_thresholds);
    recall_at_rejection_outcomes(outcomes, &thresholds)
}

/// Recall@1 at the first curve point rejecting at least `fraction`.
pub fn recall_at_rejection_level(curve: &[RrPoint], fraction: f64) -> Option<f64> {
    curve
        .iter()
        .find(|p| p.rejection_fraction >= fraction)
        .map(|p| p.recall_at_1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScores {
    #[serde(rename = "0.5")]
    pub f_half: f64,
    #[serde(rename = "1")]
    pub f1: f64,
    #[serde(rename = "2")]
    pub f2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub average_precision: f64,
    /// Precision and recall at the F-1 maximising operating point.
    pub precision: f64,
    pub recall: f64,
    pub f_scores: FScores,
    pub recall_rr_curve: Vec<RrPoint>,
}

pub fn evaluate_outcomes(
    outcomes: &[QueryOutcome],
    static_thresholds: &[f64],
) -> Result<EvalReport> {
    let recall_at = RECALL_NS
        .iter()
        .map(|&n| Ok((n, recall_at_n_outcomes(outcomes, n)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let curve = pr_curve_outcomes(outcomes);
    let op = best_f1_point(&curve).unwrap_or(PrPoint {
        threshold: 0.0,
        precision: 0.0,
        recall: 0.0,
    });
    Ok(EvalReport {
        n_queries: outcomes.len(),
        recall_at,
        average_precision: average_precision(&curve),
        precision: op.precision,
        recall: op.recall,
        f_scores: FScores {
            f_half: f_beta(op.precision, op.recall, 0.5),
            f1: f_beta(op.precision, op.recall, 1.0),
            f2: f_beta(op.precision, op.recall, 2.0),
        },
        recall_rr_curve: rr_curve(outcomes, static_thresholds),
    })
}

pub fn evaluate(
    results: &[Vec<Match>],
    uncertainties: &[f64],
    gt: &GroundTruth,
    static_thresholds: &[f64],
) -> Result<EvalReport> {
    evaluate_outcomes(&resolve(results, uncertainties, gt)?, static_thresholds)
}

fn step_lookup(curve: &[RrPoint], fraction: f64) -> f64 {
    curve
        .iter()
        .take_while(|p| p.rejection_fraction <= fraction)
        .last()
        .or(curve.first())
        .map_or(0.0, |p| p.recall_at_1)
}

/// Metric-wise mean. Rejection curves are read as step functions and
/// averaged on the union of their rejection fractions.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::domain("no reports to average"));
    }
    let n = reports.len() as f64;
    // offset form keeps the mean of identical values exact
    let mean = |f: &dyn Fn(&EvalReport) -> f64| {
        let base = f(&reports[0]);
        base + reports.iter().map(|r| f(r) - base).sum::<f64>() / n
    };
    let mut fractions: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.recall_rr_curve.iter().map(|p| p.rejection_fraction))
        .collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let curve = fractions
        .into_iter()
        .map(|f| RrPoint {
            rejection_fraction: f,
            recall_at_1: mean(&|r| step_lookup(&r.recall_rr_curve, f)),
        })
        .collect();
    let recall_at = reports[0]
        .recall_at
        .keys()
        .map(|&k| (k, mean(&|r| r.recall_at.get(&k).copied().unwrap_or(0.0))))
        .collect();
    Ok(EvalReport {
        n_queries: reports.iter().map(|r| r.n_queries).sum(),
        recall_at,
        average_precision: mean(&|r| r.average_precision),
        precision: mean(&|r| r.precision),
        recall: mean(&|r| r.recall),
        f_scores: FScores {
            f_half: mean(&|r| r.f_scores.f_half),
            f1: mean(&|r| r.f_scores.f1),
            f2: mean(&|r| r.f_scores.f2),
        },
        recall_rr_curve: curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub map_session: usize,
    pub query_session: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub pairs: Vec<PairReport>,
    /// Mean over pairs.
    pub mean: EvalReport,
    /// All pairs' queries pooled into one evaluation.
    pub merged: EvalReport,
}

/// Evaluates every ordered `(map, query)` session pair with `run_pair`,
/// which returns the resolved outcomes for that pair.
pub fn cross_validate<F>(
    n_sessions: usize,
    static_thresholds: &[f64],
    run_pair: F,
) -> Result<CrossValidation>
where
    F: Fn(usize, usize) -> Result<Vec<QueryOutcome>> + Sync,
{
    if n_sessions < 2 {
        return Err(Error::domain("cross validation needs at least 2 sessions"));
    }
    let pairs: Vec<(usize, usize)> = (0..n_sessions)
        .flat_map(|i| {
            (0..n_sessions)
                .filter(move |&j| j != i)
                .map(move |j| (i, j))
        })
        .collect();
    let evaluated = pairs
        .par_iter()
        .map(|&(i, j)| {
            let outcomes = run_pair(i, j)?;
            let report = evaluate_outcomes(&outcomes, static_thresholds)?;
            Ok((
                PairReport {
                    map_session: i,
                    query_session: j,
                    report,
                },
                outcomes,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = evaluated.iter().map(|(p, _)| p.report.clone()).collect();
    let pooled: Vec<QueryOutcome> = evaluated
        .iter()
        .flat_map(|(_, o)| o.iter().cloned())
        .collect();
    Ok(CrossValidation {
        mean: average_reports(&reports)?,
        merged: evaluate_outcomes(&pooled, static_thresholds)?,
        pairs: evaluated.into_iter().map(|(p, _)| p).collect(),
    })
}

pub fn report_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("reports contain only finite numbers and strings")
        + "\n"
}

/// Flat `metric,value` CSV of the scalar metrics.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("metric,value\n");
    out += &format!("n_queries,{}\n", report.n_queries);
    for (n, v) in &report.recall_at {
        out += &format!("recall_at_{n},{v}\n");
    }
    out += &format!("average_precision,{}\n", report.average_precision);
    out += &format!("precision,{}\n", report.precision);
    out += &format!("recall,{}\n", report.recall);
    out += &format!("f_0.5,{}\n", report.f_scores.f_half);
    out += &format!("f_1,{}\n", report.f_scores.f1);
    out += &format!("f_2,{}\n", report.f_scores.f2);
    out
}

pub fn rr_curve_csv(curve: &[RrPoint]) -> String {
    let mut out = String::from("rejection_fraction,recall_at_1\n");
    for p in curve {
        out += &format!("{},{}\n", p.rejection_fraction, p.recall_at_1);
    }
    out
}

/// JSON Schema (draft 2020-12) describing [`EvalReport`].
pub fn report_schema() -> serde_json::Value {
    let unit = serde_json::json!({"type": "number", "minimum": 0.0, "maximum": 1.0});
    serde_json::json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "EvalReport",
        "type": "object",
        "additionalProperties": false,
        "required": ["n_queries", "recall_at", "average_precision", "precision", "recall", "f_scores", "recall_rr_curve"],
        "properties": {
            "n_queries": {"type": "integer", "minimum": 0},
            "recall_at": {
                "type": "object",
                "propertyNames": {"pattern": "^[0-9]+$"},
                "additionalProperties": unit
            },
            "average_precision": unit,
            "precision": unit,
            "recall": unit,
            "f_scores": {
                "type": "object",
                "additionalProperties": false,
                "required": ["0.5", "1", "2"],
                "properties": {"0.5": unit, "1": unit, "2": unit}
            },
            "recall_rr_curve": {
                "type": "array",
                "items": {
                    "type": "object",
                    "additionalProperties": false,
                    "required": ["rejection_fraction", "recall_at_1"],
                    "properties": {"rejection_fraction": unit, "recall_at_1": unit}
                }
            }
        }
    })
}

/// Writes `report.json`, `report.csv`, `recall_rr.csv` and
/// `report.schema.json` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_atomic(&dir.join("report.json"), report_json(report).as_bytes())?;
    write_atomic(&dir.join("report.csv"), report_csv(report).as_bytes())?;
    write_atomic(
        &dir.join("recall_rr.csv"),
        rr_curve_csv(&report.recall_rr_curve).as_bytes(),
    )?;
    let schema = serde_json::to_string_pretty(&report_schema()).expect("static schema") + "\n";
    write_atomic(&dir.join("report.schema.json"), schema.as_bytes())
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties. Zero when either
/// side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dim("spearman", xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::domain("rank correlation needs at least 2 samples"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = xs.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}
