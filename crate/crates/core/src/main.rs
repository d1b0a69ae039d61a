use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semrl::harness::{config_load, parse_overrides, run_experiment, summarize, RunConfig};
use semrl::Error;

#[derive(Parser)]
#[command(
    name = "semrl",
    version,
    about = "Actor-critic experiments with simplicial embedding heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// TD3 with C51 critics (point mass by default).
    TrainTd3(Common),
    /// PPO (gridworld by default).
    TrainPpo(Common),
    /// Supervised training with periodically shuffled labels.
    DemoNonstat(Common),
    /// Runs the matrix described by the config file as is.
    Sweep(Common),
    /// Rebuilds summary.csv from the cells under an output directory.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write metrics as JSON lines.
    #[arg(long)]
    jsonl: bool,
    /// Config overrides as `--key value`, e.g. `--head.kind sem --head.V 16`.
    /// They must come after the named flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self, algorithm: Option<&str>) -> semrl::Result<RunConfig> {
        let mut pairs = Vec::new();
        if let Some(a) = algorithm {
            pairs.push(("algorithm".to_string(), format!("\"{a}\"")));
        }
        pairs.extend(parse_overrides(&self.overrides)?);
        let mut cfg = config_load(self.config.as_deref(), &pairs)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.jsonl |= self.jsonl;
        Ok(cfg)
    }
}

fn run(common: &Common, algorithm: Option<&str>) -> ExitCode {
    let cfg = match common.load(algorithm) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            for o in &report.outcomes {
                match &o.error {
                    None => println!("{:<40} seed {:<4} {}", o.setting, o.seed, o.status),
                    Some(e) => println!("{:<40} seed {:<4} {}: {e}", o.setting, o.seed, o.status),
                }
            }
            print!("{}", report.summary.to_csv());
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::TrainTd3(c) => run(c, Some("td3")),
        Command::TrainPpo(c) => run(c, Some("ppo")),
        Command::DemoNonstat(c) => run(c, Some("nonstat")),
        Command::Sweep(c) => run(c, None),
        Command::Summarize { out } => match summarize(out) {
            Ok(s) => {
                print!("{}", s.to_csv());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
