use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use qadapt::experiment;
use qadapt::io::RunConfig;

#[derive(Parser)]
#[command(name = "qadapt", version, about = "Progressive instruction tuning experiments on synthetic image-quality tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the JSON-lines dataset dump.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one strategy; writes stage checkpoints, train.csv and metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured strategy.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and append the report to metrics.csv next to it.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation data settings; defaults to the config stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference gradient check of every module.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates probed per tensor (largest analytic magnitude).
        #[arg(long, default_value_t = 3)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train every ablation row for several seeds and write summary.csv.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "table5")]
        grid: String,
        /// Number of seeds, counting up from 0. Defaults to the configured list.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write feature-norm and modulation maps (PGM) with instruction sidecars.
    DumpPromptMaps {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            for p in experiment::gen_data(&cfg, seed, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            config,
            strategy,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = strategy {
                cfg.strategy = s;
                cfg.validate()?;
            }
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let t = Instant::now();
            let o = experiment::train(&cfg, &cfg.strategy, seed, &out)?;
            for s in &o.report.stages {
                let last = s.steps.last().map(|r| r.loss).unwrap_or(f64::NAN);
                println!("stage {} `{}`: {} samples, {} steps, final loss {last:.4}", s.index + 1, s.name, s.samples, s.steps.len());
            }
            println!("{}", serde_json::to_string_pretty(&o.eval)?);
            eprintln!("done in {:.1}s, outputs in {}", t.elapsed().as_secs_f64(), out.display());
        }
        Command::Eval { ckpt, config } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let report = experiment::eval_checkpoint(&ckpt, cfg.as_ref())?;
            let dir = ckpt.parent().map(|p| p.to_path_buf()).unwrap_or_default();
            qadapt::io::append_metrics(&dir.join("metrics.csv"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Gradcheck {
            config,
            seed,
            coords,
            tolerance,
        } => {
            let cfg = load_config(&config)?;
            let t = Instant::now();
            let s = experiment::gradcheck(&cfg.model, seed, coords)?;
            let mut ok = true;
            for (m, e) in &s.modules {
                let pass = *e < tolerance;
                ok &= pass;
                println!("{m:<10} max rel error {e:.3e} {}", if pass { "ok" } else { "FAIL" });
            }
            println!("{} tensors, {} coordinates, {:.1}s", s.tensors, s.coords, t.elapsed().as_secs_f64());
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Ablate {
            config,
            grid,
            seeds,
            out,
        } => {
            anyhow::ensure!(grid == "table5", "unknown grid `{grid}` (only `table5`)");
            let cfg = load_config(&config)?;
            let seeds: Vec<u64> = match seeds {
                Some(n) => (0..n).collect(),
                None => cfg.seeds.clone(),
            };
            let out = out.unwrap_or_else(|| cfg.out_dir.join("ablate"));
            let rows = experiment::ablate(&cfg, &seeds, &out)?;
            for r in rows {
                let mcq = r.stats[0].1.map(|(m, s)| format!("{m:.3} ± {s:.3}")).unwrap_or_default();
                println!("{:<26} mcq {mcq}", r.variant);
            }
            println!("summary written to {}", out.join("summary.csv").display());
        }
        Command::DumpPromptMaps { ckpt, samples, out } => {
            let files = experiment::dump_prompt_maps(&ckpt, samples, &out)?;
            println!("{} files written to {}", files.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()).context("qadapt") {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
