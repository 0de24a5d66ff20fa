use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use evit_core::pipeline::{self, ExperimentConfig};

/// Value of information transfer across a population of structures.
#[derive(Parser)]
#[command(name = "evit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; missing keys take their defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed. Overrides EVIT_SEED and the config file.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory. Overrides the config file.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write one surrogate dataset per structure and a manifest.
    Generate(Common),
    /// Run every ordered source/target transfer.
    Transfers(Common),
    /// Fit similarity weights to the transfer records.
    Weights(Common),
    /// Train the Dirichlet regression and export the prediction curve.
    Fit(Common),
    /// Export the EVIT curve and plots.
    Evit(Common),
    /// Rank transfer strategies for a new target structure.
    Recommend {
        #[command(flatten)]
        common: Common,
        /// JSON object with the target's attributes.
        #[arg(long, value_name = "PATH")]
        target: PathBuf,
    },
    /// All stages from generate to evit.
    Pipeline(Common),
}

fn config(c: &Common) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::resolve(c.config.as_deref(), c.seed, c.out.clone()).context("loading config")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let cfg = config(&c)?;
            let m = pipeline::run_generate(&cfg)?;
            let rows: usize = m.structures.iter().map(|s| s.rows).sum();
            println!(
                "wrote {} datasets ({rows} rows) to {}",
                m.structures.len(),
                cfg.output_dir.join("data").display()
            );
        }
        Command::Transfers(c) => {
            let cfg = config(&c)?;
            let r = pipeline::run_transfers(&cfg)?;
            println!(
                "wrote {} transfer records to {}",
                r.len(),
                cfg.output_dir.join(pipeline::TRANSFERS).display()
            );
        }
        Command::Weights(c) => {
            let cfg = config(&c)?;
            let fit = pipeline::run_weights(&cfg)?;
            let w = fit.weights.as_array();
            println!(
                "weights (topology, scale, E, rho) = ({:.4}, {:.4}, {:.4}, {:.4})",
                w[0], w[1], w[2], w[3]
            );
            println!(
                "pearson r = {:.4} (equal weights {:.4})",
                fit.pearson_r, fit.baseline_r
            );
        }
        Command::Fit(c) => {
            let cfg = config(&c)?;
            pipeline::run_fit(&cfg)?;
            println!("wrote {}", cfg.output_dir.join(pipeline::MODEL).display());
        }
        Command::Evit(c) => {
            let cfg = config(&c)?;
            let curve = pipeline::run_evit(&cfg)?;
            if let Some(last) = curve.last() {
                println!("EVIT at similarity {} = {:.2}", last.similarity, last.evit);
            }
            println!(
                "wrote {}",
                cfg.output_dir.join(pipeline::EVIT_CURVE).display()
            );
        }
        Command::Recommend { common, target } => {
            let cfg = config(&common)?;
            let rec = pipeline::run_recommend(&cfg, &target)?;
            for c in &rec.candidates {
                let sim = c
                    .similarity
                    .map(|s| format!("{s:.4}"))
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<14} {:>8} evit {:>10.2} cost {:>8.2} total {:>10.2}",
                    c.source_id.as_deref().unwrap_or("(no transfer)"),
                    sim,
                    c.evit,
                    c.transfer_cost,
                    c.total
                );
            }
            match &rec.chosen.source_id {
                Some(s) => println!("chosen source for {}: {s}", rec.target_id),
                None => println!("chosen for {}: no transfer", rec.target_id),
            }
        }
        Command::Pipeline(c) => {
            let cfg = config(&c)?;
            let summary = pipeline::run_pipeline(&cfg)?;
            println!("{summary}");
        }
    }
    Ok(())
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
