//! Command-line front end for the difflab experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use difflab::experiments::{load_config, run, Command};

#[derive(Parser)]
#[command(name = "difflab", version, about = "Diffusion-model estimation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Gradient, density-bound, clip-tail and Vincent-gap property suites
    OracleCheck {
        #[command(flatten)]
        common: Common,
        /// Inject a corrupted density and score; the suites must then fail
        #[arg(long)]
        corrupt: bool,
    },
    /// Train interval-switched score networks
    Train(Common),
    /// Run the backward sampler with a trained score or the exact oracle
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trained score JSON written by `train`; the oracle when omitted
        #[arg(long)]
        score: Option<PathBuf>,
    },
    /// Train and sample across training-set sizes and fit the W1 rate
    RateScan(Common),
    /// Build and certify the constructive ReLU networks
    NetVerify(Common),
    /// Compare rates for subspace data and a full-dimensional density
    ManifoldScan(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults fill missing fields
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for manifest.json, report.csv and report.json
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the JSON report instead of the text summary
    #[arg(long)]
    json: bool,
    /// Override a config leaf by dotted path, e.g. train.optimizer.iterations=500
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn execute(command: Command, common: &Common, mut extra: Vec<(String, String)>) -> anyhow::Result<bool> {
    let mut overrides = Vec::new();
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    overrides.append(&mut extra);
    let cfg = load_config(common.config.as_deref(), &overrides).context("loading configuration")?;
    let out_dir = common.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("difflab-out").join(command.name()));
    let output = run(command, &cfg).with_context(|| format!("running {}", command.name()))?;
    output.write(&out_dir).with_context(|| format!("writing outputs to {}", out_dir.display()))?;
    if common.json {
        println!("{}", serde_json::to_string_pretty(&output.json)?);
    } else {
        for line in &output.summary {
            println!("{line}");
        }
        println!("{}: {} (outputs in {})", command.name(), if output.pass { "PASS" } else { "FAIL" }, out_dir.display());
    }
    Ok(output.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::OracleCheck { common, corrupt } => {
            let extra = if *corrupt { vec![("oracle_check.corrupt".to_string(), "true".to_string())] } else { vec![] };
            execute(Command::OracleCheck, common, extra)
        }
        Cmd::Train(c) => execute(Command::Train, c, vec![]),
        Cmd::Generate { common, score } => {
            let extra = score.iter().map(|p| ("score_path".to_string(), serde_json::Value::String(p.display().to_string()).to_string())).collect();
            execute(Command::Generate, common, extra)
        }
        Cmd::RateScan(c) => execute(Command::RateScan, c, vec![]),
        Cmd::NetVerify(c) => execute(Command::NetVerify, c, vec![]),
        Cmd::ManifoldScan(c) => execute(Command::ManifoldScan, c, vec![]),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
