use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use introspect_pr::cli::{
    cmd_build_map, cmd_eval, cmd_eval_dumps, cmd_merge, cmd_query, cmd_sweep, cmd_synth, cmd_train,
    exit_code, session_dump, ExternalEmbeddingDump, PipelineConfig,
};
use introspect_pr::model::load_checkpoint;
use introspect_pr::{Error, Result};

const LOG_ENV: &str = "INTROSPECT_PR_LOG";

#[derive(Parser)]
#[command(
    name = "introspect-pr",
    version,
    about = "Uncertainty-aware radar place recognition pipeline"
)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `paths.out` from the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render training, mapping and query traversals to session directories.
    Synth,
    /// Train a model; writes model.vcpr and loss.csv.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        sessions: Vec<PathBuf>,
    },
    /// Build a map from one session; writes map.pmap.
    BuildMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        session: PathBuf,
    },
    /// Merge a session into a map; writes map.pmap.
    Merge {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        session: PathBuf,
    },
    /// Query a map with every frame of a session; writes results.jsonl.
    Query {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Evaluate query results, or cross-validate over sessions or dumps.
    Eval(EvalArgs),
    /// Recall@1 against rejection rate; writes recall_rr.csv.
    Sweep {
        #[command(flatten)]
        results: ResultArgs,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EvalSource {
    /// Results file from `query`, evaluated against `--map` and `--queries`.
    #[arg(long, requires_all = ["map", "queries"])]
    results: Option<PathBuf>,
    /// Embedding dumps (`frame,x,y,u,e0..`), one per session.
    #[arg(long, num_args = 2..)]
    dumps: Option<Vec<PathBuf>>,
    /// Session directories embedded with `--checkpoint`.
    #[arg(long, num_args = 2.., requires = "checkpoint")]
    sessions: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    source: EvalSource,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct ResultArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Query session directory the results were produced from.
    #[arg(long)]
    queries: PathBuf,
}

fn init_logging() -> Result<()> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "warn".to_string());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        return Err(Error::Config(format!(
            "{LOG_ENV} must be one of error, warn, info, debug; got {level:?}"
        )));
    }
    env_logger::Builder::new().parse_filters(&level).init();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_logging()?;
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
        cfg.validate()?;
    }
    let out = cli.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::Synth => {
            let written = cmd_synth(&cfg, &out)?;
            log::info!(
                "wrote {} training, {} mapping and 1 query session",
                written.train.len(),
                written.mapping.len()
            );
        }
        Command::Train { sessions } => {
            let path = cmd_train(&cfg, &sessions, &out)?;
            log::info!("checkpoint {}", path.display());
        }
        Command::BuildMap {
            checkpoint,
            session,
        } => {
            let map = cmd_build_map(&cfg, &checkpoint, &session, &out.join("map.pmap"))?;
            log::info!("map with {} entries", map.len());
        }
        Command::Merge {
            map,
            checkpoint,
            session,
        } => {
            let map = cmd_merge(&map, &checkpoint, &session, &out.join("map.pmap"))?;
            log::info!(
                "map with {} entries, mean U {}",
                map.len(),
                map.mean_uncertainty()
            );
        }
        Command::Query {
            map,
            checkpoint,
            session,
            k,
            threshold,
        } => {
            let k = k.unwrap_or(cfg.query.k);
            let threshold = threshold.unwrap_or(cfg.query.threshold);
            cmd_query(
                &map,
                &checkpoint,
                &session,
                k,
                threshold,
                &out.join("results.jsonl"),
            )?;
        }
        Command::Eval(args) => {
            if let Some(results) = args.source.results {
                let (map, queries) = (
                    args.map.expect("required by clap"),
                    args.queries.expect("required by clap"),
                );
                cmd_eval(&cfg, &results, &map, &queries, &out)?;
            } else if let Some(paths) = args.source.dumps {
                let dumps = paths
                    .iter()
                    .map(|p| ExternalEmbeddingDump::load(p))
                    .collect::<Result<Vec<_>>>()?;
                cmd_eval_dumps(&cfg, &dumps, &out)?;
            } else if let Some(sessions) = args.source.sessions {
                let params = load_checkpoint::<f32>(&args.checkpoint.expect("required by clap"))?
                    .cast::<f64>();
                let dumps = sessions
                    .iter()
                    .map(|d| session_dump(&params, d))
                    .collect::<Result<Vec<_>>>()?;
                cmd_eval_dumps(&cfg, &dumps, &out)?;
            }
        }
        Command::Sweep { results } => {
            cmd_sweep(
                &cfg,
                &results.results,
                &results.map,
                &results.queries,
                &out.join("recall_rr.csv"),
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
