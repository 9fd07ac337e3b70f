use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use introspect_pr::bench::training_sessions;
use introspect_pr::cli::{
    cmd_build_map, cmd_eval, cmd_eval_dumps, cmd_merge, cmd_query, cmd_sweep, cmd_synth, cmd_train,
    read_session, session_dump, DumpRecord, ExternalEmbeddingDump, PipelineConfig, SynthOutput,
};
use introspect_pr::evalkit::report_schema;
use introspect_pr::mapstore::{load_map, MergeAction};
use introspect_pr::model::{encode, load_checkpoint, ModelParams};
use introspect_pr::query::{read_jsonl, write_jsonl, QueryStatus};
use introspect_pr::training::steps_per_epoch;
use introspect_pr::Error;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(3);
    cfg.benchmark.n_frames = 12;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("cli")
        .join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

struct Trained {
    synth: SynthOutput,
    checkpoint: PathBuf,
    root: PathBuf,
}

/// Sessions and a checkpoint shared by the tests that only read them.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = scratch("shared");
        let cfg = small_config();
        let synth = cmd_synth(&cfg, &root.join("data")).unwrap();
        let checkpoint = cmd_train(&cfg, &synth.train, &root.join("model")).unwrap();
        Trained {
            synth,
            checkpoint,
            root,
        }
    })
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_with_one_directory_per_traversal() {
    let cfg = small_config();
    let (a, b) = (scratch("synth_a"), scratch("synth_b"));
    let written = cmd_synth(&cfg, &a).unwrap();
    cmd_synth(&cfg, &b).unwrap();
    assert_eq!(written.train.len(), cfg.benchmark.traversal_noise.len());
    assert_eq!(written.mapping.len(), cfg.benchmark.traversal_noise.len());
    assert!(written
        .train
        .iter()
        .chain(&written.mapping)
        .all(|d| d.is_dir()));
    assert_eq!(files_under(&a), files_under(&b));
}

#[test]
fn noiseless_synth_has_zero_severity() {
    let mut cfg = small_config();
    cfg.benchmark = cfg.benchmark.noiseless();
    let out = scratch("synth_clean");
    let written = cmd_synth(&cfg, &out).unwrap();
    for dir in written.mapping.iter().chain([&written.query]) {
        assert!(read_session(dir)
            .unwrap()
            .severities
            .iter()
            .all(|s| *s == 0.0));
    }
}

#[test]
fn zero_epochs_writes_the_initialisation() {
    let t = trained();
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let path = cmd_train(&cfg, &t.synth.train, &scratch("train_zero")).unwrap();
    let init = ModelParams::<f64>::init(cfg.model, cfg.train.seed)
        .unwrap()
        .cast::<f32>();
    assert_eq!(load_checkpoint::<f32>(&path).unwrap(), init);
}

#[test]
fn training_is_reproducible_and_logs_every_step() {
    let t = trained();
    let cfg = small_config();
    let again = cmd_train(&cfg, &t.synth.train, &scratch("train_again")).unwrap();
    assert_eq!(
        std::fs::read(&again).unwrap(),
        std::fs::read(&t.checkpoint).unwrap()
    );

    let sessions: Vec<_> = t
        .synth
        .train
        .iter()
        .map(|d| read_session(d).unwrap())
        .collect();
    let steps = steps_per_epoch(&training_sessions(&sessions).unwrap(), cfg.train.batch_size);
    let csv = std::fs::read_to_string(t.checkpoint.with_file_name("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + cfg.train.epochs * steps);
}

#[test]
fn map_has_one_entry_per_frame_with_recomputed_uncertainty() {
    let t = trained();
    let cfg = small_config();
    let session = &t.synth.mapping[0];
    let out = scratch("build");
    let map = cmd_build_map(&cfg, &t.checkpoint, session, &out.join("a.pmap")).unwrap();
    cmd_build_map(&cfg, &t.checkpoint, session, &out.join("b.pmap")).unwrap();
    assert_eq!(
        std::fs::read(out.join("a.pmap")).unwrap(),
        std::fs::read(out.join("b.pmap")).unwrap()
    );

    let frames = read_session(session).unwrap();
    assert_eq!(map.len(), frames.scans.len());
    let params = load_checkpoint::<f32>(&t.checkpoint).unwrap().cast::<f64>();
    for (entry, scan) in map.entries.iter().zip(&frames.scans) {
        let lv = encode(&params, scan).unwrap().log_var;
        let u = lv.iter().map(|v| v.exp()).sum::<f64>() / lv.len() as f64;
        assert!((entry.uncertainty as f64 - u).abs() <= 1e-6 * u.max(1.0));
    }
}

#[test]
fn merging_keeps_founders_and_lower_noise_lowers_uncertainty() {
    let t = trained();
    let cfg = small_config();
    let out = scratch("merge");
    let noisiest = &t.synth.mapping[3];
    let founded = cmd_build_map(&cfg, &t.checkpoint, noisiest, &out.join("map.pmap")).unwrap();

    let same = cmd_merge(
        &out.join("map.pmap"),
        &t.checkpoint,
        noisiest,
        &out.join("same.pmap"),
    )
    .unwrap();
    assert_eq!(same.entries, founded.entries);
    assert!(same
        .merge_log
        .iter()
        .all(|r| r.action == MergeAction::Discarded));

    let cleaner = &t.synth.mapping[0];
    let merged = cmd_merge(
        &out.join("map.pmap"),
        &t.checkpoint,
        cleaner,
        &out.join("merged.pmap"),
    )
    .unwrap();
    assert!(merged.mean_uncertainty() < founded.mean_uncertainty());
    assert_eq!(
        merged.merge_log.len(),
        read_session(cleaner).unwrap().scans.len()
    );
    assert_eq!(load_map(&out.join("merged.pmap")).unwrap(), merged);
}

#[test]
fn query_thresholds_bound_rejection() {
    let t = trained();
    let cfg = small_config();
    let out = scratch("query");
    let map = out.join("map.pmap");
    cmd_build_map(&cfg, &t.checkpoint, &t.synth.mapping[0], &map).unwrap();
    let frames = read_session(&t.synth.query).unwrap().scans.len();

    let open = cmd_query(
        &map,
        &t.checkpoint,
        &t.synth.query,
        5,
        1e300,
        &out.join("open.jsonl"),
    )
    .unwrap();
    assert!(open
        .iter()
        .all(|l| l.result.status == QueryStatus::Accepted && l.result.matches.len() == 5));
    let closed = cmd_query(
        &map,
        &t.checkpoint,
        &t.synth.query,
        5,
        0.0,
        &out.join("closed.jsonl"),
    )
    .unwrap();
    assert!(closed
        .iter()
        .all(|l| l.result.status == QueryStatus::Rejected));
    for name in ["open.jsonl", "closed.jsonl"] {
        assert_eq!(
            std::fs::read_to_string(out.join(name))
                .unwrap()
                .lines()
                .count(),
            frames
        );
    }
}

#[test]
fn self_query_is_perfect_and_report_matches_schema() {
    let t = trained();
    let cfg = small_config();
    let out = scratch("eval");
    let session = &t.synth.mapping[1];
    let map = out.join("map.pmap");
    cmd_build_map(&cfg, &t.checkpoint, session, &map).unwrap();
    cmd_query(
        &map,
        &t.checkpoint,
        session,
        10,
        1e300,
        &out.join("results.jsonl"),
    )
    .unwrap();
    let report = cmd_eval(
        &cfg,
        &out.join("results.jsonl"),
        &map,
        session,
        &out.join("report"),
    )
    .unwrap();
    assert_eq!(report.recall_at[&1], 1.0);

    let schema: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(out.join("report/report.schema.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(schema, report_schema());
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report/report.json")).unwrap())
            .unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(
        validator.is_valid(&doc),
        "{:?}",
        validator
            .iter_errors(&doc)
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
    );
}

#[test]
fn five_sessions_give_twenty_pairs() {
    let t = trained();
    let params = load_checkpoint::<f32>(&t.checkpoint).unwrap().cast::<f64>();
    let dumps: Vec<_> = t
        .synth
        .mapping
        .iter()
        .map(|d| session_dump(&params, d).unwrap())
        .collect();
    let out = scratch("pairs");
    let cv = cmd_eval_dumps(&small_config(), &dumps, &out).unwrap();
    assert_eq!(cv.pairs.len(), 20);
    let pairs: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("pairs.json")).unwrap()).unwrap();
    assert_eq!(pairs.as_array().unwrap().len(), 20);
    assert!(out.join("merged/report.json").is_file());
}

#[test]
fn dumps_of_another_dimension_are_rejected() {
    let record = |d: usize| DumpRecord {
        frame: 0,
        position: (0.0, 0.0),
        uncertainty: 1.0,
        embedding: vec![0.5; d],
    };
    let dumps = [
        ExternalEmbeddingDump::new(vec![record(4)]).unwrap(),
        ExternalEmbeddingDump::new(vec![record(3)]).unwrap(),
    ];
    let err = cmd_eval_dumps(&small_config(), &dumps, &scratch("dim")).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Dimension {
                expected: 4,
                got: 3,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn sweep_levels_follow_uncertainty_spread() {
    let t = trained();
    let cfg = small_config();
    let out = scratch("sweep");
    let map = out.join("map.pmap");
    cmd_build_map(&cfg, &t.checkpoint, &t.synth.mapping[0], &map).unwrap();
    let lines = cmd_query(
        &map,
        &t.checkpoint,
        &t.synth.query,
        10,
        1e300,
        &out.join("results.jsonl"),
    )
    .unwrap();

    let csv = cmd_sweep(
        &cfg,
        &out.join("results.jsonl"),
        &map,
        &t.synth.query,
        &out.join("rr.csv"),
    )
    .unwrap();
    let fractions: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(fractions[0], 0.0);
    let n = lines.len() as f64;
    let min_u = lines
        .iter()
        .map(|l| l.result.u)
        .fold(f64::INFINITY, f64::min);
    let at_min = lines.iter().filter(|l| l.result.u == min_u).count() as f64;
    assert_eq!(*fractions.last().unwrap(), (n - at_min) / n);

    let mut uniform =
        read_jsonl(&std::fs::read_to_string(out.join("results.jsonl")).unwrap()).unwrap();
    uniform.iter_mut().for_each(|l| l.result.u = 1.0);
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &uniform).unwrap();
    std::fs::write(out.join("uniform.jsonl"), buf).unwrap();
    let csv = cmd_sweep(
        &cfg,
        &out.join("uniform.jsonl"),
        &map,
        &t.synth.query,
        &out.join("rr_uniform.csv"),
    )
    .unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_introspect-pr");
    let out = scratch("binary");
    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = -1.0\n").unwrap();
    let run = |args: &[&str]| {
        Command::new(exe)
            .args(args)
            .env_remove("INTROSPECT_PR_LOG")
            .output()
            .unwrap()
            .status
            .code()
    };
    let out_arg = out.to_str().unwrap();
    assert_eq!(
        run(&["--config", bad.to_str().unwrap(), "--out", out_arg, "synth"]),
        Some(2)
    );
    assert_eq!(
        run(&[
            "--out",
            out_arg,
            "build-map",
            "--checkpoint",
            "/nonexistent.vcpr",
            "--session",
            out_arg
        ]),
        Some(3)
    );
    let t = trained();
    let ok = Command::new(exe)
        .args(["--out", out_arg, "build-map", "--checkpoint"])
        .arg(&t.checkpoint)
        .arg("--session")
        .arg(&t.synth.mapping[0])
        .status()
        .unwrap();
    assert!(ok.success());
    assert_eq!(load_map(&out.join("map.pmap")).unwrap().len(), 12);
    assert!(t.root.is_dir());
}
