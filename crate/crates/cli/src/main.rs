use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grownet::selfcheck;
use grownet_cli::config::RunConfig;
use grownet_cli::{report, run, CliError};

#[derive(Parser)]
#[command(
    name = "grownet",
    version,
    about = "Grow multi-task networks by similarity-guided binding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a config into a run directory.
    Run {
        #[arg(long, short)]
        config: PathBuf,
        /// Run directory; overrides `output_dir` of the config.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Overrides `seed` of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize run directories; several are averaged.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Gradient, oracle, nucleus and mock-search checks.
    Selfcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn cmd_run(config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let dir = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| {
        PathBuf::from(
            format!(
                "runs/{:?}-{:?}-seed{}",
                cfg.benchmark.kind, cfg.search.mode, cfg.seed
            )
            .to_lowercase(),
        )
    });
    cfg.output_dir = Some(dir.clone());
    let results = run::execute(&cfg, &dir)?;
    let ok = results.trials.iter().filter(|t| t.is_ok()).count();
    println!(
        "{} trials ({ok} ok, {} on the front) written to {}",
        results.trials.len(),
        results.front.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_selfcheck(seed: u64) -> Result<bool, CliError> {
    let checks = selfcheck::run_all(seed)?;
    for c in &checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Run { config, out, seed } => cmd_run(config, out, seed).map(|()| true),
        Command::Report { dirs } => report::report(&dirs).map(|text| {
            print!("{text}");
            true
        }),
        Command::Selfcheck { seed } => cmd_selfcheck(seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
