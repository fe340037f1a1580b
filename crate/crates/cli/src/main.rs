use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edgeprov_cli::{load_config, run_experiments, threads_from_env};
use edgeprov_core::realloc::LoadSemantics;
use edgeprov_core::sim::{self, Policy};
use toml::Value;

#[derive(Parser)]
#[command(name = "edgeprov", version, about = "Edge resource provisioning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment file and write CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this seed only.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        policy: Option<Policy>,
        #[arg(long)]
        v: Option<f64>,
        #[arg(long)]
        slots: Option<u64>,
        #[arg(long, value_name = "MODE")]
        load_semantics: Option<LoadSemantics>,
    },
    /// List the named device presets.
    Presets,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Presets => {
            for (name, devices) in sim::presets() {
                println!("{name}");
                for d in devices {
                    println!(
                        "  {}: {} cores @ {} Hz, memory {} B, storage {} B, read {} B/s, write {} B/s",
                        d.name, d.cores, d.frequency_hz, d.memory, d.storage, d.read_speed, d.write_speed
                    );
                }
            }
        }
        Command::Run {
            config,
            seed,
            out,
            policy,
            v,
            slots,
            load_semantics,
        } => {
            let mut spec = load_config(&config)?;
            if let Some(seed) = seed {
                spec.seeds = vec![seed];
            }
            if let Some(out) = out {
                spec.out = out;
            }
            if let Some(p) = policy {
                spec.set("policy", Value::String(p.as_str().into()))?;
            }
            if let Some(v) = v {
                spec.set("v", Value::Float(v))?;
            }
            if let Some(n) = slots {
                spec.set("slots", Value::Integer(i64::try_from(n)?))?;
            }
            if let Some(m) = load_semantics {
                spec.set("load_semantics", Value::String(m.as_str().into()))?;
            }
            spec.validate()?;
            let report = run_experiments(&spec, threads_from_env()?)?;
            print!("{}", report.table());
            println!("wrote {} runs to {}", report.rows.len(), spec.out.display());
        }
    }
    Ok(())
}
