//! `uds-audit`: one subcommand per pipeline stage.

mod commands;
mod config;
mod stamp;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use udsaudit::tinylm::PatchLocation;
use udsaudit::{Error, Result};

use commands::Target;
use config::{Overrides, RunConfig, Settings};

#[derive(Parser)]
#[command(name = "uds-audit", version, about = "Patching-based unlearning audit on a toy transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default: `paths.reports` from the config, else `.`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: UDS_AUDIT_THREADS, else logical cores).
    #[arg(long, env = "UDS_AUDIT_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct CorpusArg {
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct RefArgs {
    #[arg(long, value_name = "PATH")]
    full: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    retain: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct CacheArg {
    #[arg(long, value_name = "PATH")]
    cache: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct UnlearnedArg {
    /// A checkpoint, or a directory whose `*.ckpt` files are all scored.
    #[arg(long, value_name = "PATH|DIR")]
    unlearned: PathBuf,
}

#[derive(Args, Clone, Default)]
struct SiteArgs {
    /// Knowledge-encoding threshold.
    #[arg(long, value_name = "FLOAT")]
    tau: Option<f64>,
    /// Patch site inside each block.
    #[arg(long, value_parser = parse_location)]
    location: Option<PatchLocation>,
}

fn parse_location(s: &str) -> std::result::Result<PatchLocation, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (writes corpus.jsonl).
    Gen {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Train the base, full and retain models (writes checkpoints/ and train.json).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
    },
    /// Build the unlearned, positive and negative pools (writes checkpoints/pool/ and manifest.json).
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        refs: RefArgs,
    },
    /// Stage 1: baseline drops and knowledge-encoding layers (writes the cache).
    Baseline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        cache: CacheArg,
        #[command(flatten)]
        site: SiteArgs,
    },
    /// Stage 2: score unlearned checkpoints (writes uds/<name>.json and .ler.csv).
    Uds {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, value_name = "PATH")]
        full: Option<PathBuf>,
        #[command(flatten)]
        cache: CacheArg,
        #[command(flatten)]
        unlearned: UnlearnedArg,
        /// `original` skips the retain normalisation (writes uds/<name>.original.json).
        #[arg(long, value_enum, default_value = "full")]
        target: Target,
        #[arg(long, value_parser = parse_location)]
        location: Option<PatchLocation>,
    },
    /// Output metrics and MIA scores (writes metrics/<name>.csv and .json).
    Metrics {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        unlearned: UnlearnedArg,
    },
    /// CKA, logit-lens and masked-Fisher erasure (writes whitebox/<name>.json and .csv).
    Whitebox {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        unlearned: UnlearnedArg,
        #[command(flatten)]
        site: SiteArgs,
    },
    /// Faithfulness and robustness of every metric (writes metaeval.json and perturbation.csv).
    Metaeval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArg,
        #[command(flatten)]
        refs: RefArgs,
        #[command(flatten)]
        cache: CacheArg,
        /// Quantization bits for the robustness perturbation.
        #[arg(long)]
        bits: Option<u32>,
    },
    /// Rank methods with and without UDS in the privacy term (writes ranking.csv and ranking.json).
    Rank {
        #[command(flatten)]
        common: Common,
    },
    /// KE-set sizes across thresholds (writes tau_sweep.csv and tau_sweep.json).
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cache: CacheArg,
    },
}

fn settings(common: &Common, o: Overrides) -> Result<Settings> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    Settings::resolve(
        cfg,
        &Overrides {
            seed: common.seed,
            out: common.out.clone(),
            ..o
        },
    )
}

fn common_of(c: &Command) -> &Common {
    match c {
        Command::Gen { common, .. }
        | Command::Train { common, .. }
        | Command::Unlearn { common, .. }
        | Command::Baseline { common, .. }
        | Command::Uds { common, .. }
        | Command::Metrics { common, .. }
        | Command::Whitebox { common, .. }
        | Command::Metaeval { common, .. }
        | Command::Rank { common }
        | Command::SweepTau { common, .. } => common,
    }
}

fn site(s: &SiteArgs) -> Overrides {
    Overrides {
        tau: s.tau,
        location: s.location,
        ..Default::default()
    }
}

fn run(cmd: Command) -> Result<()> {
    let common = common_of(&cmd).clone();
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    }
    match cmd {
        Command::Gen { corpus, .. } => {
            let s = settings(&common, Overrides::default())?;
            commands::gen(&s, &s.corpus_path(corpus.corpus.as_deref()))
        }
        Command::Train { corpus, .. } => {
            let s = settings(&common, Overrides::default())?;
            commands::train(&s, &s.corpus_path(corpus.corpus.as_deref()))
        }
        Command::Unlearn { corpus, refs, .. } => {
            let s = settings(&common, Overrides::default())?;
            commands::unlearn(
                &s,
                &s.corpus_path(corpus.corpus.as_deref()),
                &s.checkpoint(refs.full.as_deref(), "full"),
                &s.checkpoint(refs.retain.as_deref(), "retain"),
            )
        }
        Command::Baseline {
            corpus,
            refs,
            cache,
            site: st,
            ..
        } => {
            let s = settings(&common, site(&st))?;
            commands::baseline(
                &s,
                &s.corpus_path(corpus.corpus.as_deref()),
                &s.checkpoint(refs.full.as_deref(), "full"),
                &s.checkpoint(refs.retain.as_deref(), "retain"),
                &s.cache_path(cache.cache.as_deref()),
            )
            .map(|_| ())
        }
        Command::Uds {
            corpus,
            full,
            cache,
            unlearned,
            target,
            location,
            ..
        } => {
            let s = settings(
                &common,
                Overrides {
                    location,
                    ..Default::default()
                },
            )?;
            commands::uds(
                &s,
                &s.corpus_path(corpus.corpus.as_deref()),
                &s.checkpoint(full.as_deref(), "full"),
                &s.cache_path(cache.cache.as_deref()),
                &unlearned.unlearned,
                target,
            )
        }
        Command::Metrics { corpus, unlearned, .. } => {
            let s = settings(&common, Overrides::default())?;
            commands::metrics(&s, &s.corpus_path(corpus.corpus.as_deref()), &unlearned.unlearned)
        }
        Command::Whitebox {
            corpus,
            refs,
            unlearned,
            site: st,
            ..
        } => {
            let mut s = settings(&common, Overrides { location: st.location, ..Default::default() })?;
            if let Some(t) = st.tau {
                s.pipeline.eval.lens_tau = t;
            }
            commands::whitebox(
                &s,
                &s.corpus_path(corpus.corpus.as_deref()),
                &s.checkpoint(refs.full.as_deref(), "full"),
                &s.checkpoint(refs.retain.as_deref(), "retain"),
                &unlearned.unlearned,
            )
        }
        Command::Metaeval {
            corpus,
            refs,
            cache,
            bits,
            ..
        } => {
            let s = settings(
                &common,
                Overrides {
                    bits,
                    ..Default::default()
                },
            )?;
            commands::metaeval(
                &s,
                &s.corpus_path(corpus.corpus.as_deref()),
                &s.checkpoint(refs.full.as_deref(), "full"),
                &s.checkpoint(refs.retain.as_deref(), "retain"),
                &s.cache_path(cache.cache.as_deref()),
            )
        }
        Command::Rank { .. } => commands::rank(&settings(&common, Overrides::default())?),
        Command::SweepTau { cache, .. } => {
            let s = settings(&common, Overrides::default())?;
            commands::sweep_tau(&s, &s.cache_path(cache.cache.as_deref()))
        }
    }
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<&'a Path>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let path = match &e {
                Error::MissingArtifact(p) => Some(p.as_path()),
                Error::Io { path, .. } => Some(path.as_path()),
                _ => None,
            };
            let rec = ErrorRecord {
                error: e.kind(),
                message: e.to_string(),
                path,
            };
            eprintln!("{}", serde_json::to_string(&rec).unwrap_or_else(|_| e.to_string()));
            ExitCode::FAILURE
        }
    }
}
