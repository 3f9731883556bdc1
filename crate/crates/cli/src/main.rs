use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use stabilab_cli::{exit, load_config, run_command, Stage};

#[derive(Parser)]
#[command(name = "stabilab", version, about = "Run a stage of a stabilization experiment")]
struct Cli {
    /// Stage to run.
    #[arg(value_enum)]
    command: Stage,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the one in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    threads: Option<usize>,
    /// Replaces the kick, run and mixing seeds.
    #[arg(long)]
    seed_override: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(exit::RUNTIME as u8);
        }
    }
    let mut cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit::RUNTIME as u8);
        }
    };
    if let Some(seed) = cli.seed_override {
        cfg.kick.seed = seed;
        cfg.run.seed = seed;
        cfg.mixing.seed = seed;
    }
    let out = cli.out.unwrap_or_else(|| cfg.output.clone());
    match run_command(cli.command, &cfg, &out) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!(
                    "{:<32} {:<5} {:e}",
                    c.name,
                    if c.pass { "pass" } else { "FAIL" },
                    c.value
                );
            }
            if outcome.passed() {
                ExitCode::from(exit::SUCCESS as u8)
            } else {
                ExitCode::from(exit::CHECK_FAILED as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit::RUNTIME as u8)
        }
    }
}
