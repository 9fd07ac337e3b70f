//! Pipeline orchestration behind the `introspect-pr` binary.
//!
//! Session directories hold `trajectory.csv`, `severity.csv` and
//! `scans/NNNNNN.rscn`. Every subcommand is a plain function so the binary
//! and the tests drive the same code.

mod config;
mod dump;

use std::path::{Path, PathBuf};

pub use config::{EvalSettings, PathSettings, PipelineConfig, QuerySettings};
pub use dump::{DumpRecord, ExternalEmbeddingDump};

use crate::bench::{build_benchmark, training_sessions, Traversal};
use crate::error::{Error, Result};
use crate::evalkit::{
    cross_validate, evaluate_outcomes, recall_at_rejection, resolve, rr_curve_csv, write_report,
    CrossValidation, EvalReport,
};
use crate::fsutil::write_atomic;
use crate::mapstore::{init_map, load_map, merge_session, save_map, ParentMap};
use crate::model::{load_checkpoint, save_checkpoint, Embedding, ModelParams};
use crate::pipeline::{embed_scans, map_positions, session_entries};
use crate::query::{knn, query_all, read_jsonl, write_jsonl, QueryLine, QueryStatus};
use crate::scan_synth::{
    read_scan, read_severity_csv, read_trajectory_csv, write_scan, write_severity_csv,
    write_trajectory_csv,
};
use crate::training::train;

/// Process exit status for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        Error::Domain(_) | Error::Dimension { .. } | Error::Format(_) | Error::Io(_) => 3,
    }
}

/// Name of a session: its directory's final component.
pub fn session_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn write_session(dir: &Path, traversal: &Traversal) -> Result<()> {
    let scans = dir.join("scans");
    std::fs::create_dir_all(&scans)?;
    write_trajectory_csv(&dir.join("trajectory.csv"), &traversal.poses)?;
    write_severity_csv(&dir.join("severity.csv"), &traversal.severities)?;
    for (i, scan) in traversal.scans.iter().enumerate() {
        write_scan(&scans.join(format!("{i:06}.rscn")), scan)?;
    }
    Ok(())
}

pub fn read_session(dir: &Path) -> Result<Traversal> {
    let poses = read_trajectory_csv(&dir.join("trajectory.csv"))?;
    let severity_path = dir.join("severity.csv");
    let severities = if severity_path.exists() {
        read_severity_csv(&severity_path)?
    } else {
        vec![0.0; poses.len()]
    };
    if severities.len() != poses.len() {
        return Err(Error::dim(
            "session severities",
            poses.len(),
            severities.len(),
        ));
    }
    let scans = (0..poses.len())
        .map(|i| read_scan(&dir.join("scans").join(format!("{i:06}.rscn"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Traversal {
        name: session_name(dir),
        poses,
        scans,
        severities,
    })
}

/// Directories written by [`cmd_synth`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train: Vec<PathBuf>,
    pub mapping: Vec<PathBuf>,
    pub query: PathBuf,
}

/// Renders the benchmark into `out/train/session_XX`, `out/eval/session_XX`
/// and `out/eval/query`.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<SynthOutput> {
    let bench = build_benchmark(&cfg.benchmark, cfg.seed)?;
    let mut written = SynthOutput {
        train: Vec::new(),
        mapping: Vec::new(),
        query: out.join("eval").join("query"),
    };
    for t in &bench.train {
        let dir = out.join("train").join(&t.name);
        write_session(&dir, t)?;
        written.train.push(dir);
    }
    for t in &bench.mapping {
        let dir = out.join("eval").join(&t.name);
        write_session(&dir, t)?;
        written.mapping.push(dir);
    }
    write_session(&written.query, &bench.query)?;
    Ok(written)
}

/// Trains from `config.model` initialised with the training seed and writes
/// `model.vcpr` and `loss.csv` into `out`.
pub fn cmd_train(cfg: &PipelineConfig, sessions: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if sessions.is_empty() {
        return Err(Error::domain("train needs at least one session"));
    }
    let traversals = sessions
        .iter()
        .map(|d| read_session(d))
        .collect::<Result<Vec<_>>>()?;
    if let Some(t) = traversals
        .iter()
        .find(|t| t.scans.iter().any(|s| s.side != cfg.model.input_side))
    {
        return Err(Error::dim(
            "training scans",
            cfg.model.input_side,
            t.scans[0].side,
        ));
    }
    let init = ModelParams::<f64>::init(cfg.model, cfg.train.seed)?;
    let (params, history) = train(&training_sessions(&traversals)?, &init, &cfg.train)?;
    std::fs::create_dir_all(out)?;
    let path = out.join("model.vcpr");
    save_checkpoint(&params, &path)?;
    history.write_csv(&out.join("loss.csv"))?;
    Ok(path)
}

fn check_map_dim(map: &ParentMap, params: &ModelParams<f64>) -> Result<()> {
    match map.dim() {
        Some(d) if d != params.config.embed_dim => {
            Err(Error::dim("map vs checkpoint", d, params.config.embed_dim))
        }
        _ => Ok(()),
    }
}

fn load_model(checkpoint: &Path) -> Result<ModelParams<f64>> {
    load_checkpoint::<f32>(checkpoint).map(|p| p.cast())
}

/// Inference embeddings of every frame of a session directory.
pub fn embed_session(
    params: &ModelParams<f64>,
    dir: &Path,
) -> Result<(Traversal, Vec<Embedding<f64>>)> {
    let t = read_session(dir)?;
    if let Some(s) = t.scans.iter().find(|s| s.side != params.config.input_side) {
        return Err(Error::dim(
            "session scans vs checkpoint",
            params.config.input_side,
            s.side,
        ));
    }
    let e = embed_scans(params, &t.scans)?;
    Ok((t, e))
}

/// Embedding dump of a session under a checkpoint.
pub fn session_dump(params: &ModelParams<f64>, dir: &Path) -> Result<ExternalEmbeddingDump> {
    let (t, e) = embed_session(params, dir)?;
    ExternalEmbeddingDump::new(
        t.poses
            .iter()
            .zip(&e)
            .enumerate()
            .map(|(i, (p, e))| DumpRecord {
                frame: i as u64,
                position: (p.x, p.y),
                uncertainty: e.uncertainty,
                embedding: e.z.clone(),
            })
            .collect(),
    )
}

pub fn cmd_build_map(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    session: &Path,
    out_map: &Path,
) -> Result<ParentMap> {
    let params = load_model(checkpoint)?;
    let (t, e) = embed_session(&params, session)?;
    let map = init_map(&session_entries(&e, &t.poses, &t.name)?, cfg.map)?;
    save_map(&map, out_map)?;
    Ok(map)
}

pub fn cmd_merge(
    map_path: &Path,
    checkpoint: &Path,
    session: &Path,
    out_map: &Path,
) -> Result<ParentMap> {
    let mut map = load_map(map_path)?;
    let params = load_model(checkpoint)?;
    check_map_dim(&map, &params)?;
    let (t, e) = embed_session(&params, session)?;
    merge_session(&mut map, &session_entries(&e, &t.poses, &t.name)?)?;
    save_map(&map, out_map)?;
    Ok(map)
}

/// Introspective queries for every frame of `session`, written as JSONL.
pub fn cmd_query(
    map_path: &Path,
    checkpoint: &Path,
    session: &Path,
    k: usize,
    threshold: f64,
    out: &Path,
) -> Result<Vec<QueryLine>> {
    let map = load_map(map_path)?;
    let params = load_model(checkpoint)?;
    check_map_dim(&map, &params)?;
    let (_, e) = embed_session(&params, session)?;
    let lines: Vec<QueryLine> = query_all(&map, &e, k, threshold)?
        .into_iter()
        .enumerate()
        .map(|(i, result)| QueryLine {
            frame: i as u64,
            result,
        })
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &lines)?;
    write_atomic(out, &buf)?;
    Ok(lines)
}

/// Query results, their uncertainties and ground truth, from a results file
/// plus the map and query session it was produced from. Rejected queries
/// keep no matches and so count as misses.
fn load_results(
    cfg: &PipelineConfig,
    results: &Path,
    map_path: &Path,
    queries: &Path,
) -> Result<(
    Vec<Vec<crate::query::Match>>,
    Vec<f64>,
    crate::evalkit::GroundTruth,
)> {
    let lines = read_jsonl(&std::fs::read_to_string(results)?)?;
    let map = load_map(map_path)?;
    let poses = read_trajectory_csv(&queries.join("trajectory.csv"))?;
    let mut query_positions = Vec::with_capacity(lines.len());
    for l in &lines {
        let p = poses.get(l.frame as usize).ok_or_else(|| {
            Error::domain(format!("result frame {} outside query session", l.frame))
        })?;
        query_positions.push((p.x, p.y));
    }
    let matches = lines
        .iter()
        .map(|l| match l.result.status {
            QueryStatus::Accepted => l.result.matches.clone(),
            QueryStatus::Rejected => Vec::new(),
        })
        .collect();
    let us = lines.iter().map(|l| l.result.u).collect();
    Ok((
        matches,
        us,
        cfg.eval.ground_truth(map_positions(&map), query_positions),
    ))
}

/// Evaluates a results file and writes the report files into `out`.
pub fn cmd_eval(
    cfg: &PipelineConfig,
    results: &Path,
    map_path: &Path,
    queries: &Path,
    out: &Path,
) -> Result<EvalReport> {
    let (matches, us, gt) = load_results(cfg, results, map_path, queries)?;
    let report = evaluate_outcomes(
        &resolve(&matches, &us, &gt)?,
        &cfg.query.static_thresholds()?,
    )?;
    std::fs::create_dir_all(out)?;
    write_report(out, &report)?;
    Ok(report)
}

/// All ordered (map, query) pairs over embedding dumps. Writes the mean
/// report into `out`, the pooled one into `out/merged` and per-pair reports
/// to `out/pairs.json`.
pub fn cmd_eval_dumps(
    cfg: &PipelineConfig,
    dumps: &[ExternalEmbeddingDump],
    out: &Path,
) -> Result<CrossValidation> {
    let dim = dumps.first().map(|d| d.dim).unwrap_or(0);
    for d in dumps {
        d.check_dim(dim)?;
    }
    let maps = dumps
        .iter()
        .enumerate()
        .map(|(i, d)| init_map(&d.entries(&format!("session_{i:02}")), cfg.map))
        .collect::<Result<Vec<_>>>()?;
    let k = cfg.query.k;
    let cv = cross_validate(dumps.len(), &cfg.query.static_thresholds()?, |i, j| {
        let map = &maps[i];
        let q = &dumps[j];
        let matches = q
            .records
            .iter()
            .map(|r| knn(map, &r.embedding, k).map(|found| found.matches))
            .collect::<Result<Vec<_>>>()?;
        let us: Vec<f64> = q.records.iter().map(|r| r.uncertainty).collect();
        let gt = cfg.eval.ground_truth(
            map_positions(map),
            q.records.iter().map(|r| r.position).collect(),
        );
        resolve(&matches, &us, &gt)
    })?;
    std::fs::create_dir_all(out.join("merged"))?;
    write_report(out, &cv.mean)?;
    write_report(&out.join("merged"), &cv.merged)?;
    let pairs =
        serde_json::to_string_pretty(&cv.pairs).map_err(|e| Error::format(e.to_string()))? + "\n";
    write_atomic(&out.join("pairs.json"), pairs.as_bytes())?;
    Ok(cv)
}

/// Recall@1 against rejection over the quantile sweep and the static
/// `(delta, count)` thresholds, written as CSV.
pub fn cmd_sweep(
    cfg: &PipelineConfig,
    results: &Path,
    map_path: &Path,
    queries: &Path,
    out: &Path,
) -> Result<String> {
    let (matches, us, gt) = load_results(cfg, results, map_path, queries)?;
    let curve = recall_at_rejection(&matches, &us, &gt, &cfg.query.static_thresholds()?)?;
    let csv = rr_curve_csv(&curve);
    write_atomic(out, csv.as_bytes())?;
    Ok(csv)
}
