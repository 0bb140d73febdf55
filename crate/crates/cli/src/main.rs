use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fdbem_cli::{run, Command, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "fdbem", version, about = "Fast directional BEM for exterior Helmholtz problems")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Random seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble and solve a radiation or scattering problem.
    Solve { config: PathBuf },
    /// Summation benchmark against direct sums.
    BenchSum { config: PathBuf },
    /// Raw against compressed translation operators.
    Compare { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let (cmd, path) = match cli.cmd {
        Cmd::Solve { config } => (Command::Solve, config),
        Cmd::BenchSum { config } => (Command::BenchSum, config),
        Cmd::Compare { config } => (Command::Compare, config),
    };
    let result = RunConfig::load(&path).map_err(RunError::from).and_then(|mut cfg| {
        if let Some(o) = cli.output {
            cfg.output = o;
        }
        if let Some(s) = cli.seed {
            cfg.seed = s;
        }
        run(cmd, &cfg)
    });
    match result {
        Ok(art) => {
            print!("{}", art.report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
