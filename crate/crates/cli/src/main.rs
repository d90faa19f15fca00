use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use icp2p_cli::{commands, env_output_dir, load_config, validate};

#[derive(Parser)]
#[command(
    name = "icp2p",
    version,
    about = "Ring-ordered federated continual learning for image denoising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.transmissions=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Same as `--set preset=...`.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Same as `--set method=...`.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Same as `--set seeds=...`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Same as `--set output.dir=...`.
    #[arg(long, global = true)]
    output: Option<String>,
    /// Same as `--set transport=...`.
    #[arg(long, global = true)]
    transport: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method for every configured seed.
    Run,
    /// Run `compare.methods` on shared seeds and summarize.
    Compare,
    /// Check the core invariants.
    Validate,
    /// Write the synthetic datasets.
    DumpData,
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (key, v) in [
        ("preset", &cli.preset),
        ("method", &cli.method),
        ("seeds", &cli.seeds),
        ("output.dir", &cli.output),
        ("transport", &cli.transport),
    ] {
        if let Some(v) = v {
            out.push((key.to_string(), v.clone()));
        }
    }
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Validate = cli.command {
        let mut failed = 0;
        for c in validate::run_checks() {
            println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            failed += usize::from(!c.passed);
        }
        if failed > 0 {
            bail!("{failed} checks failed");
        }
        return Ok(());
    }
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => String::new(),
    };
    let cfg = load_config(&text, env_output_dir(), &overrides(&cli)?)?;
    match cli.command {
        Command::Run => {
            commands::run(&cfg)?;
        }
        Command::Compare => {
            commands::compare(&cfg)?;
        }
        Command::DumpData => {
            for dir in commands::dump_data(&cfg)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Validate => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
