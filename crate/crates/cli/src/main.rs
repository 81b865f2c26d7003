use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lfs_cli::{commands, RunConfig};

#[derive(Parser)]
#[command(name = "lfs", version, about = "Lifelong few-shot generation with per-task weight modulators")]
struct Cli {
    /// Flat key=value run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render procedural toy tasks, one image folder per task.
    MakeToy {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_tasks: Option<usize>,
        #[arg(short)]
        k: Option<usize>,
    },
    /// Print the farthest-next task order.
    Order {
        /// CSV distance matrix; defaults to distances computed from the task folders.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        source: Option<String>,
    },
    /// Train every task in sequence, writing checkpoints and logs.
    Train {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write PNG samples and a grid for a stored task.
    Gen {
        #[arg(long)]
        task: String,
        #[arg(short, default_value_t = 16)]
        n: usize,
        /// Directory for the PNG files; defaults to `<out_dir>/samples/<task>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print and record diversity and Fréchet metrics for a stored task.
    Eval {
        #[arg(long)]
        task: String,
    },
    /// Print per-layer and total modulator parameter counts.
    CountParams,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LFS_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("LFS_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::MakeToy { out, n_tasks, k } => {
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            let dirs = commands::make_toy(&cfg, &out, n_tasks.unwrap_or(cfg.n_tasks), k.unwrap_or(cfg.k), cfg.seed)?;
            for d in dirs {
                println!("{}", d.display());
            }
        }
        Command::Order { matrix, source } => {
            for t in commands::order(&cfg, matrix.as_deref(), source.as_deref())? {
                println!("{t}");
            }
        }
        Command::Train { out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            for p in commands::train(&cfg, &out, &mut |line| eprintln!("{line}"))? {
                println!("{}", p.display());
            }
        }
        Command::Gen { task, n, out } => {
            let out = out.unwrap_or_else(|| cfg.out_dir.join("samples").join(&task));
            for p in commands::gen(&cfg, &cfg.out_dir, &task, cfg.seed, n, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { task } => {
            print!("{}", commands::eval(&cfg, &cfg.out_dir, &task, cfg.seed)?.to_lines());
        }
        Command::CountParams => print!("{}", commands::count_params(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
