use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use exemplar_cli::{
    cmd_eval, cmd_ingest, cmd_retrieve, cmd_select_aux, cmd_synth, cmd_train, EvalInput, Overrides, Preset,
    QuerySource, RunConfig, SynthRequest, UsageError,
};

#[derive(Parser)]
#[command(name = "exemplar", version, about = "Cross-lingual in-context example retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut cfg);
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Copy a bank and its embeddings into the data directory.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        query_embeddings: Option<PathBuf>,
        /// Store as the language's validation split.
        #[arg(long)]
        validation: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Filter candidate auxiliary banks by mean-embedding similarity.
    SelectAux {
        #[command(flatten)]
        common: Common,
    },
    /// Train the retriever (mode chosen by `--mode`).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Select demonstrations for each query.
    Retrieve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Query examples (JSONL); defaults to the target's validation split.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        query_embeddings: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions, or generate and score from a retrieval file.
    Eval {
        #[arg(long, conflicts_with = "retrieval", required_unless_present = "retrieval")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        retrieval: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        query_embeddings: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic benchmark and a matching config.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::TwoRelated)]
        preset: Preset,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 1)]
        copies: usize,
        /// Full generator settings as JSON; replaces the preset.
        #[arg(long)]
        synth_config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            input,
            lang,
            embeddings,
            query_embeddings,
            validation,
            common,
        } => {
            let cfg = common.resolve()?;
            let m = cmd_ingest(
                &cfg,
                &input,
                &lang,
                &embeddings,
                query_embeddings.as_deref(),
                validation,
            )?;
            println!("{}", m.display());
        }
        Command::SelectAux { common } => {
            let sel = cmd_select_aux(&common.resolve()?)?;
            println!("{}", serde_json::to_string(&sel)?);
        }
        Command::Train { common } => {
            let report = cmd_train(&common.resolve()?)?;
            if let Some(best) = report.best_iteration {
                println!("best iteration {best}: {:.4}", report.validation_trace[best - 1]);
            }
            if !report.dpp_loss_trace.is_empty() {
                println!(
                    "dpp loss {:?} ({} flagged)",
                    report.dpp_loss_trace.last().unwrap(),
                    report.dpp_flagged
                );
            }
        }
        Command::Retrieve {
            checkpoint,
            queries,
            query_embeddings,
            out,
            common,
        } => {
            let cfg = common.resolve()?;
            let src = QuerySource {
                examples: queries,
                embeddings: query_embeddings,
            };
            let recs = cmd_retrieve(&cfg, checkpoint.as_deref(), &src, out.as_deref())?;
            println!("{} queries", recs.len());
        }
        Command::Eval {
            predictions,
            retrieval,
            queries,
            query_embeddings,
            common,
        } => {
            let cfg = common.resolve()?;
            let input = match (predictions, retrieval) {
                (Some(p), _) => EvalInput::Predictions(p),
                (None, Some(r)) => EvalInput::Retrieval {
                    retrieval: r,
                    queries: QuerySource {
                        examples: queries,
                        embeddings: query_embeddings,
                    },
                },
                (None, None) => unreachable!("clap requires one input"),
            };
            let summary = cmd_eval(&cfg, &input)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::Synth {
            out_dir,
            seed,
            preset,
            clusters,
            copies,
            synth_config,
        } => {
            let path = cmd_synth(&SynthRequest {
                dir: out_dir,
                seed,
                preset,
                clusters,
                copies,
                generator: synth_config,
            })?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
