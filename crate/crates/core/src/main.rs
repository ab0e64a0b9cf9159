use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hesp::data::write_manifest;
use hesp::train::{
    evaluate_checkpoint, load_dataset, load_encoder, parse_override_args, plot_score_distributions,
    protocol_cells, run_gradcheck, run_protocol, run_split, write_evaluation, Checkpoint,
    GradCheckConfig, RunConfig, DEFAULT_BINS,
};
use hesp::{HespError, Result};

/// Open-set video expression recognition by prompting a frozen dual encoder.
#[derive(Parser)]
#[command(name = "hesp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides as `--key value`, e.g. `--optim.epochs 40` or `--lr 0.005`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "OVERRIDES"
    )]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let config = base.with_overrides(&parse_override_args(&self.overrides)?)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the openness splits of the configured task.
    Split {
        /// Output file; defaults to `<run_dir>/splits.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the configured synthetic dataset as a manifest plus frames.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train and evaluate one split of the configured task.
    Train {
        #[arg(long, default_value_t = 0)]
        cell: usize,
        #[arg(long, default_value_t = 0)]
        split: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on the split recorded inside it.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory; defaults to `<run_dir>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every split of the configured task and aggregate.
    Protocol {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render known versus unknown knownness histograms from a scores file.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        directions: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn snapshot(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.run_dir)?;
    config.save(&config.run_dir.join("config.toml"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Split { out, cfg } => {
            let config = cfg.resolve()?;
            let dataset = load_dataset(&config)?;
            let cells = protocol_cells(&config, &dataset)?;
            let out = out.unwrap_or_else(|| config.run_dir.join("splits.json"));
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, serde_json::to_string_pretty(&cells)?)?;
            for c in &cells {
                println!("{}\t{} splits", c.label(), c.splits.len());
            }
        }
        Command::Synth { out, cfg } => {
            let config = cfg.resolve()?;
            let dataset = hesp::data::synthesize_dataset(&config.data.synthetic)?;
            let manifest = write_manifest(&dataset, &out)?;
            println!("{} videos -> {}", dataset.len(), manifest.display());
        }
        Command::Train { cell, split, cfg } => {
            let config = cfg.resolve()?;
            let dataset = load_dataset(&config)?;
            let encoder = load_encoder(&config, &dataset)?;
            let cells = protocol_cells(&config, &dataset)?;
            let chosen = cells
                .get(cell)
                .and_then(|c| c.splits.get(split))
                .ok_or_else(|| HespError::Index(format!("no split {split} in cell {cell}")))?;
            snapshot(&config)?;
            let result = run_split(&config, &encoder, &dataset, chosen, Some(&config.run_dir))?;
            let r = &result.evaluation.report;
            println!(
                "{}\tauroc {:.4}\toscr {:.4}",
                chosen.label(),
                r.auroc,
                r.oscr
            );
        }
        Command::Eval {
            checkpoint,
            out,
            cfg,
        } => {
            let config = cfg.resolve()?;
            let dataset = load_dataset(&config)?;
            let encoder = load_encoder(&config, &dataset)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let evaluation = evaluate_checkpoint(&config, &encoder, &dataset, &ckpt)?;
            let out = out.unwrap_or_else(|| config.run_dir.join("eval"));
            write_evaluation(&evaluation, &out)?;
            plot_score_distributions(
                &out.join("scores.tsv"),
                &out.join("scores.png"),
                DEFAULT_BINS,
            )?;
            let r = &evaluation.report;
            println!("auroc {:.4}\toscr {:.4}", r.auroc, r.oscr);
        }
        Command::Protocol { cfg } => {
            let config = cfg.resolve()?;
            let report = run_protocol(&config)?;
            print!("{}", report.table());
        }
        Command::Plot { scores, out, bins } => {
            plot_score_distributions(&scores, &out, bins)?;
            println!("{}", out.display());
        }
        Command::Gradcheck { directions, seed } => {
            let results = run_gradcheck(&GradCheckConfig {
                directions,
                seed,
                ..Default::default()
            })?;
            for r in &results {
                let verdict = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{}\t{:.3e}\t<= {:.0e}\t{verdict}",
                    r.loss, r.max_rel_error, r.tolerance
                );
            }
            if results.iter().any(|r| !r.passed()) {
                return Err(HespError::Check(
                    "analytic and numeric gradients disagree".into(),
                ));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
