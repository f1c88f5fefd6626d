//! Command-line front end. Every subcommand maps onto one [`Pipeline`] stage.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::pipeline::{
    EvalArgs, GrpoVerifyArgs, IndexGlobalArgs, IndexLocalArgs, IngestArgs, Pipeline, PipelineError,
    RecommendArgs, RunOptions, SearchArgs, StageOutput,
};
use crate::retriever::RetrievalBackend;

#[derive(Debug, Parser)]
#[command(
    name = "memrec",
    version,
    about = "Memory-augmented recommendation agent toolkit"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "memrec.toml")]
    pub config: PathBuf,
    /// Leave wall-clock durations out of every report.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads for per-user and per-query work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus files and write normalized copies.
    Ingest {
        #[arg(long)]
        interactions: Option<PathBuf>,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Rewrite each query into one casual sentence.
        #[arg(long)]
        simplify: bool,
    },
    /// Build local or global memory.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Run the agent on one query.
    Recommend {
        #[arg(long)]
        query_id: String,
        /// Number of catalog items to rank.
        #[arg(long)]
        k: Option<usize>,
        /// Where to write the reasoning trace.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Evaluate a query set and write a report.
    Eval {
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also score memory-to-profile and memory-to-recommendation contribution.
        #[arg(long)]
        mpc_mrc: bool,
        /// Model used as the contribution judge.
        #[arg(long)]
        judge_model: Option<String>,
    },
    /// Summarize an evaluation report.
    Report {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        table: bool,
    },
    /// Query the item catalog, or one user's memory with --user.
    Search {
        #[arg(long)]
        backend: Option<RetrievalBackend>,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        query: String,
        #[arg(long)]
        user: Option<String>,
    },
    /// Inspect the memory store.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Check the GRPO objective numerically and run the bandit simulation.
    GrpoVerify {
        /// Roll out a group for this query id and export it.
        #[arg(long)]
        export_group: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// ingest, index local, index global, eval and grpo-verify in sequence.
    Pipeline,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    Local(LocalArgs),
    Global(GlobalArgs),
}

#[derive(Debug, Args)]
pub struct LocalArgs {
    /// Comma-separated user ids; all users when omitted.
    #[arg(long, value_delimiter = ',')]
    pub users: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Comma-separated scenarios; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub scenarios: Vec<String>,
    /// Overrides the config seed for query and negative sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Print entries as JSON lines.
    Dump {
        #[arg(long)]
        user: Option<String>,
    },
    /// Print counts per tier.
    Stats,
}

fn print_stage(out: &StageOutput) {
    if !out.message.is_empty() {
        println!("{}", out.message);
    }
    for path in &out.artifacts {
        println!("wrote {}", path.display());
    }
    if out.soft_failures > 0 {
        eprintln!("{} soft failures; see the reports above", out.soft_failures);
    }
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let opts = RunOptions {
        deterministic: cli.deterministic,
        jobs: cli.jobs,
    };
    if cli.jobs == 0 {
        return Err(PipelineError::Usage("--jobs must be at least 1".into()));
    }
    let p = Pipeline::from_config_file(&cli.config, opts)?;
    match cli.command {
        Command::Ingest {
            interactions,
            catalog,
            queries,
            simplify,
        } => print_stage(&p.ingest(&IngestArgs {
            interactions,
            catalog,
            queries,
            simplify,
        })?),
        Command::Index(IndexCommand::Local(a)) => {
            print_stage(&p.index_local(&IndexLocalArgs { users: a.users })?)
        }
        Command::Index(IndexCommand::Global(a)) => {
            print_stage(&p.index_global(&IndexGlobalArgs {
                scenarios: a.scenarios,
                seed: a.seed,
            })?)
        }
        Command::Recommend {
            query_id,
            k,
            trace,
            queries,
        } => print_stage(&p.recommend(&RecommendArgs {
            query_id,
            k,
            trace,
            queries,
        })?),
        Command::Eval {
            queries,
            out,
            mpc_mrc,
            judge_model,
        } => print_stage(&p.eval(&EvalArgs {
            queries,
            out,
            mpc_mrc,
            judge_model,
        })?),
        Command::Report { input, table } => println!("{}", p.report(input.as_deref(), table)?),
        Command::Search {
            backend,
            k,
            query,
            user,
        } => {
            for hit in p.search(&SearchArgs {
                backend,
                k,
                query,
                user,
            })? {
                println!("{:>4}. {}  {}", hit.rank, hit.id, hit.text);
            }
        }
        Command::Memory(MemoryCommand::Dump { user }) => {
            for line in p.memory_dump(user.as_deref())? {
                println!("{line}");
            }
        }
        Command::Memory(MemoryCommand::Stats) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&p.memory_stats()?).expect("stats serialize")
            )
        }
        Command::GrpoVerify { export_group, out } => {
            print_stage(&p.grpo_verify(&GrpoVerifyArgs { export_group, out })?)
        }
        Command::Pipeline => print_stage(&p.run_all()?),
    }
    Ok(())
}
