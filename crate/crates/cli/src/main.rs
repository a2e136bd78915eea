use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualgr::harness::{self, RunConfig, SweepParam};
use dualgr::Error;

#[derive(Parser)]
#[command(name = "dualgr", version, about = "Dual-branch generative retrieval on a simulated world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `paths.out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate catalog, logs and the train/eval split.
    Simulate(Common),
    /// Fit residual codebooks and assign item SIDs.
    Quantize(Common),
    /// Train the decoder and write a checkpoint plus loss curve.
    Train(Common),
    /// Offline hit rate of the trained checkpoint.
    Eval(Common),
    /// Full model against the three single-mechanism ablations.
    Ablate(Common),
    /// Sensitivity sweep over `l_short` or `alpha`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Parameter to sweep; values come from `[experiment]`.
        #[arg(long, default_value = "l_short")]
        param: String,
    },
}

fn run(cli: Cli) -> Result<Vec<String>, Error> {
    let (common, sweep) = match &cli.command {
        Command::Simulate(c) | Command::Quantize(c) | Command::Train(c) | Command::Eval(c) | Command::Ablate(c) => (c, None),
        Command::Sweep { common, param } => (common, Some(SweepParam::parse(param)?)),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let result = match cli.command {
        Command::Simulate(_) => harness::cmd_simulate(&cfg, &out)?,
        Command::Quantize(_) => harness::cmd_quantize(&cfg, &out)?,
        Command::Train(_) => harness::cmd_train(&cfg, &out)?,
        Command::Eval(_) => harness::cmd_eval(&cfg, &out)?,
        Command::Ablate(_) => harness::cmd_ablate(&cfg, &out)?,
        Command::Sweep { .. } => harness::cmd_sweep(&cfg, &out, sweep.expect("parsed"))?,
    };
    let mut lines = result.messages;
    lines.extend(result.files.iter().map(|f| format!("wrote {}", f.display())));
    Ok(lines)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = serde_json::json!({
                "status": "error",
                "kind": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
