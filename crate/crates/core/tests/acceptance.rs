//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Exact and oracle criteria are fatal. The benchmark trend criteria are
//! reported and only fail the run when `ACCEPTANCE_STRICT=1`.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use introspect_pr::bench::{
    build_benchmark, maintained_map, run_trial, training_sessions, BenchmarkProtocol,
    BenchmarkSpec, TrialSummary,
};
use introspect_pr::cli::{
    cmd_build_map, cmd_eval, cmd_merge, cmd_query, cmd_synth, cmd_train, PipelineConfig,
};
use introspect_pr::evalkit::{
    cross_validate, evaluate, recall_at_n_outcomes, recall_at_rejection, recall_at_rejection_level,
    GroundTruth, MatchClass, QueryOutcome,
};
use introspect_pr::mapstore::{MapEntry, ParentMap};
use introspect_pr::model::ModelParams;
use introspect_pr::pipeline::{embed_scans, query_outcomes, session_entries};
use introspect_pr::query::{make_thresholds, Match};
use introspect_pr::training::{kl_divergence, train};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{kl_by_quadrature, only, worst_gradient_error};

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_oracle() -> Verdict {
    let t0 = Instant::now();
    let terms = [
        ("inv", only(1.0, 0.0, 0.0, 0.0)),
        ("var", only(0.0, 1.0, 0.0, 0.0)),
        ("kl", only(0.0, 0.0, 1.0, 0.0)),
        ("rec", only(0.0, 0.0, 0.0, 1.0)),
        ("total", only(1.0, 0.5, 2.0, 0.3)),
    ];
    let errors: Vec<(&str, f64)> = terms
        .iter()
        .map(|(n, w)| (*n, worst_gradient_error(*w)))
        .collect();
    let secs = t0.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        worst < 1e-4 && secs < 60.0,
        format!("{} in {secs:.1}s", listed.join(", ")),
    )
}

fn kl_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mu: f64 = rng.random_range(-3.0..3.0);
        let var: f64 = rng.random_range(0.05..5.0);
        let closed = kl_divergence(&[mu], &[var.ln()]).unwrap();
        worst = worst.max((closed - kl_by_quadrature(mu, var)).abs());
    }
    let at_prior = kl_divergence(&[0.0; 8], &[0.0; 8]).unwrap();
    verdict(
        worst < 1e-6 && at_prior == 0.0,
        format!("max |closed - quadrature| {worst:.1e}, KL(0,I) = {at_prior}"),
    )
}

fn threshold_exactness() -> Verdict {
    let exact = make_thresholds(Ratio::new(1i64, 2), 10).unwrap().values;
    let expected: Vec<Ratio<i64>> = (5..=15).map(|n| Ratio::new(n, 10)).collect();
    let floats = make_thresholds(0.5f64, 10).unwrap().values;
    let same_arithmetic = floats
        .iter()
        .enumerate()
        .all(|(n, v)| v.to_bits() == ((1.0 - 0.5) + n as f64 * 2.0 * 0.5 / 10.0).to_bits());
    verdict(
        exact == expected && floats.len() == 11 && same_arithmetic,
        format!(
            "{} rational values 1/2..3/2, f64 bit-exact: {same_arithmetic}",
            exact.len()
        ),
    )
}

fn merge_oracle() -> Verdict {
    let spec = BenchmarkSpec::default();
    let bench = build_benchmark(&spec, 0).unwrap();
    let params = ModelParams::<f64>::init(BenchmarkProtocol::default().model, 0).unwrap();
    let sessions: Vec<Vec<MapEntry>> = bench
        .mapping
        .iter()
        .map(|t| {
            session_entries(&embed_scans(&params, &t.scans).unwrap(), &t.poses, &t.name).unwrap()
        })
        .collect();
    let mut sizes = Vec::new();
    for k in 1..=sessions.len() {
        sizes.push(maintained_map(&sessions[..k]).unwrap().len());
    }
    let map: ParentMap = maintained_map(&sessions).unwrap();
    let d_t = map.config.match_threshold;
    let mut mismatches = 0;
    for slot in &map.entries {
        let brute = sessions
            .iter()
            .flatten()
            .filter(|e| {
                (e.position.0 - slot.position.0).hypot(e.position.1 - slot.position.1) < d_t
            })
            .map(|e| e.uncertainty)
            .fold(f32::INFINITY, f32::min);
        mismatches += (slot.uncertainty != brute) as usize;
    }
    let replaced = map
        .entries
        .iter()
        .filter(|e| e.source_session != "session_00")
        .count();
    let constant = sizes.windows(2).all(|w| w[0] == w[1]);
    verdict(
        mismatches == 0 && constant,
        format!(
            "{} slots, {mismatches} differ from brute force, {replaced} replaced, sizes {sizes:?}",
            map.len()
        ),
    )
}

/// Six queries against five map places 100 m apart.
fn crafted_instance() -> (Vec<Vec<Match>>, GroundTruth) {
    let m = |id, dist| Match { id, dist };
    let map: Vec<(f64, f64)> = (0..5).map(|i| (100.0 * i as f64, 0.0)).collect();
    let queries = vec![
        (0.0, 0.0),
        (100.0, 0.0),
        (200.0, 0.0),
        (330.0, 0.0),
        (400.0, 0.0),
        (1000.0, 0.0),
    ];
    let results = vec![
        vec![m(0, 0.1), m(1, 0.5)],
        vec![m(2, 0.2), m(1, 0.3)],
        vec![m(3, 0.4), m(4, 0.45), m(0, 0.5)],
        vec![m(3, 0.15)],
        vec![m(4, 0.3)],
        vec![m(0, 0.6)],
    ];
    (results, GroundTruth::new(map, queries))
}

fn metric_oracles() -> Verdict {
    let (results, gt) = crafted_instance();
    let report = evaluate(&results, &[], &gt, &[]).unwrap();
    // by hand: top-1 hits q0 and q4, q1 hits at rank 2; the PR sweep leaves out
    // the ambiguous q3 and peaks in F-1 at P = R = 2/3.
    let recall_ok = report.recall_at[&1] == 2.0 / 6.0
        && report.recall_at[&5] == 3.0 / 6.0
        && report.recall_at[&10] == 0.5;
    let ap_ok = (report.average_precision - 49.0 / 72.0).abs() <= 4.0 * f64::EPSILON;
    let f = report.f_scores;
    let f_ok = [f.f_half, f.f1, f.f2]
        .iter()
        .all(|v| (v - 2.0 / 3.0).abs() <= 1e-12);

    let perfect: Vec<QueryOutcome> = (0..30)
        .map(|i| QueryOutcome {
            ranked: vec![(i as f64, MatchClass::Positive)],
            has_positive: true,
            uncertainty: 0.0,
        })
        .collect();
    let perfect_ok = recall_at_n_outcomes(&perfect, 1).unwrap() == 1.0;

    let pairs = cross_validate(5, &[], |_, _| Ok(perfect.clone())).unwrap();
    let mut ordered: Vec<(usize, usize)> = pairs
        .pairs
        .iter()
        .map(|p| (p.map_session, p.query_session))
        .collect();
    ordered.dedup();
    let pairs_ok = ordered.len() == 20 && ordered.iter().all(|(i, j)| i != j);
    verdict(
        recall_ok && ap_ok && f_ok && perfect_ok && pairs_ok,
        format!(
            "R@1 {:.4} AP {:.6} F1 {:.6}, {} cross-validation pairs",
            report.recall_at[&1],
            report.average_precision,
            f.f1,
            ordered.len()
        ),
    )
}

fn trials() -> Vec<TrialSummary> {
    let spec = BenchmarkSpec::default();
    let protocol = BenchmarkProtocol::default();
    (0..SEEDS)
        .map(|seed| run_trial(&spec, &protocol, seed).unwrap())
        .collect()
}

fn maintenance_trend(trials: &[TrialSummary], secs: f64) -> Verdict {
    let margins: Vec<f64> = trials
        .iter()
        .map(|t| t.maintained_recall - t.mean_single_recall())
        .collect();
    let mean = margins.iter().sum::<f64>() / margins.len() as f64;
    let listed: Vec<String> = margins.iter().map(|m| format!("{m:+.3}")).collect();
    verdict(
        mean > 0.0 && secs < 600.0,
        format!(
            "maintained - mean single R@1 per seed [{}], mean {mean:+.3}; {secs:.0}s",
            listed.join(", ")
        ),
    )
}

/// Queries whose top-1 is wrong carry the highest uncertainty.
fn constructed_rejection_gain() -> bool {
    let map: Vec<(f64, f64)> = (0..10).map(|i| (100.0 * i as f64, 0.0)).collect();
    let results: Vec<Vec<Match>> = (0..10)
        .map(|i| {
            vec![Match {
                id: if i < 6 { i } else { (i + 3) % 10 },
                dist: 0.1,
            }]
        })
        .collect();
    let us: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let curve =
        recall_at_rejection(&results, &us, &GroundTruth::new(map.clone(), map), &[]).unwrap();
    let r0 = curve[0].recall_at_1;
    matches!(recall_at_rejection_level(&curve, 0.5), Some(r50) if r50 > r0)
}

fn rejection_trend(trials: &[TrialSummary]) -> Verdict {
    let wins = trials
        .iter()
        .filter(|t| t.recall_at_50 >= t.recall_at_0)
        .count();
    let constructed = constructed_rejection_gain();
    let listed: Vec<String> = trials
        .iter()
        .map(|t| format!("{:.3}->{:.3}", t.recall_at_0, t.recall_at_50))
        .collect();
    verdict(
        wins >= 4 && constructed,
        format!(
            "R@1 at 0% -> 50% rejection [{}]: {wins}/{} seeds; constructed instance improves: {constructed}",
            listed.join(", "),
            trials.len()
        ),
    )
}

fn calibration(trials: &[TrialSummary]) -> Verdict {
    let rhos: Vec<f64> = trials.iter().map(|t| t.severity_rho).collect();
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    let listed: Vec<String> = rhos.iter().map(|r| format!("{r:+.3}")).collect();
    verdict(
        mean > 0.3,
        format!(
            "Spearman(severity, U) per seed [{}], mean {mean:+.3}",
            listed.join(", ")
        ),
    )
}

fn run_pipeline(cfg: &PipelineConfig, root: &Path) -> Vec<u8> {
    let synth = cmd_synth(cfg, &root.join("data")).unwrap();
    let checkpoint = cmd_train(cfg, &synth.train, &root.join("model")).unwrap();
    let map = root.join("map.pmap");
    cmd_build_map(cfg, &checkpoint, &synth.mapping[0], &map).unwrap();
    for session in &synth.mapping[1..] {
        cmd_merge(&map, &checkpoint, session, &map).unwrap();
    }
    let results = root.join("results.jsonl");
    cmd_query(
        &map,
        &checkpoint,
        &synth.query,
        cfg.query.k,
        cfg.query.threshold,
        &results,
    )
    .unwrap();
    cmd_eval(cfg, &results, &map, &synth.query, &root.join("eval")).unwrap();
    ["report.json", "report.csv", "recall_rr.csv"]
        .iter()
        .flat_map(|f| std::fs::read(root.join("eval").join(f)).unwrap())
        .collect()
}

fn determinism() -> Verdict {
    let mut cfg = PipelineConfig::default().with_seed(11);
    cfg.benchmark.n_frames = 16;
    cfg.train.epochs = 2;
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&base);
    let a = run_pipeline(&cfg, &base.join("a"));
    let b = run_pipeline(&cfg, &base.join("b"));
    verdict(
        a == b && !a.is_empty(),
        format!("{} report bytes, identical: {}", a.len(), a == b),
    )
}

fn self_retrieval() -> Verdict {
    let spec = BenchmarkSpec::default().noiseless();
    let protocol = BenchmarkProtocol::default();
    let bench = build_benchmark(&spec, 0).unwrap();
    let init = ModelParams::<f64>::init(protocol.model, 0).unwrap();
    let (params, _) = train(
        &training_sessions(&bench.train).unwrap(),
        &init,
        &protocol.train,
    )
    .unwrap();
    let founding = &bench.mapping[0];
    let embeddings = embed_scans(&params, &founding.scans).unwrap();
    let map =
        maintained_map(&[session_entries(&embeddings, &founding.poses, &founding.name).unwrap()])
            .unwrap();
    let r1 = recall_at_n_outcomes(
        &query_outcomes(&map, &embeddings, &founding.poses, 1).unwrap(),
        1,
    )
    .unwrap();
    verdict(r1 >= 0.95, format!("R@1 {r1:.3}"))
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut fatal = 0;
    let mut report = |id: usize, name: &str, trend: bool, v: Verdict| {
        let status = if v.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {status} {name}: {}", v.detail);
        if !v.pass && (!trend || strict) {
            fatal += 1;
        }
    };

    report(1, "gradient oracle", false, gradient_oracle());
    report(2, "KL oracle", false, kl_oracle());
    report(3, "threshold set exactness", false, threshold_exactness());
    report(4, "map maintenance oracle", false, merge_oracle());
    report(5, "metric oracles", false, metric_oracles());
    let t0 = Instant::now();
    let trials = trials();
    let secs = t0.elapsed().as_secs_f64();
    report(
        6,
        "map maintenance trend",
        true,
        maintenance_trend(&trials, secs),
    );
    report(
        7,
        "introspective rejection trend",
        true,
        rejection_trend(&trials),
    );
    report(8, "uncertainty calibration", true, calibration(&trials));
    report(9, "end-to-end determinism", false, determinism());
    report(10, "noiseless self-retrieval", false, self_retrieval());

    if fatal > 0 {
        eprintln!("{fatal} fatal acceptance failure(s)");
        std::process::exit(1);
    }
}
