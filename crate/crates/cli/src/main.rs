use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anchorpo_core::analysis::{
    check_gradient_decomposition, check_gradients, check_lower_bound, check_multi_identity, check_sigmoid_bound,
    TheoryReport,
};
use anchorpo_core::checkpoint::Checkpoint;
use anchorpo_core::config::{EvalConfig, RunConfig};
use anchorpo_core::data::{annotate, gen_world};
use anchorpo_core::eval::evaluate;
use anchorpo_core::metrics::{self, plotdata, Series};
use anchorpo_core::objectives::Method;
use anchorpo_core::policy::PolicyMode;
use anchorpo_core::{compare, trainer, LabError, Result};

#[derive(Parser)]
#[command(name = "anchorpo", version, about = "Preference-optimization lab with a learned utility anchor")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world, annotate it, and write the dataset file.
    GenData {
        #[arg(short, long)]
        config: PathBuf,
        /// Defaults to `<output.dir>/dataset.jsonl`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train one configuration; writes metrics.csv and checkpoint.json.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the world it was trained on.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Read the `[eval]` section from this config.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate several configurations side by side.
    Compare {
        #[arg(required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Tape gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict to one method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Numerical checks of the bounds and identities behind the objectives.
    Theorycheck {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract one series from a metrics file as step/value columns.
    Plotdata {
        #[arg(short, long)]
        metrics: PathBuf,
        /// anchor, margin, accuracy or kl.
        #[arg(short, long)]
        series: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => metrics::write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn print_reports(reports: &[TheoryReport]) -> bool {
    for r in reports {
        println!(
            "{} {}: {} instances, {} violations, worst {:.3e} (tol {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.check,
            r.instances,
            r.violations,
            r.worst,
            r.tolerance
        );
    }
    reports.iter().all(|r| r.passed)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let world = gen_world(&cfg.world)?;
            let manifest = annotate(&world, &cfg.annotator, &cfg.dataset.construction())?;
            let path = out.unwrap_or_else(|| cfg.output.dir.join("dataset.jsonl"));
            metrics::write_atomic(&path, manifest.to_jsonl()?.as_bytes())?;
            eprintln!("wrote {} records to {}", manifest.records.len(), path.display());
        }
        Command::Train { config, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let run = trainer::train_to_disk(&cfg)?;
            let last = run.rows.last().expect("step 0 is always logged");
            eprintln!(
                "{} steps, loss {:.6}, accuracy {}, metrics in {}",
                run.steps,
                last.loss,
                last.accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                cfg.output.metrics().display()
            );
        }
        Command::Eval { checkpoint, config, out } => {
            let ck = Checkpoint::read(&checkpoint)?;
            let eval_cfg = match config {
                Some(p) => RunConfig::load(&p)?.eval,
                None => EvalConfig::default(),
            };
            let world = gen_world(&ck.world)?;
            let report = evaluate(&ck, &world, &eval_cfg)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| LabError::parse("report", e))? + "\n";
            emit(&text, out.as_deref())?;
        }
        Command::Compare { configs, out } => {
            let loaded = configs
                .iter()
                .map(|p| {
                    let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into());
                    RunConfig::load(p).map(|c| (label, c))
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = compare::compare(&loaded)?;
            emit(&compare::to_csv(&rows)?, out.as_deref())?;
        }
        Command::Gradcheck { instances, seed, method } => {
            let methods = method.map_or_else(|| Method::ALL.to_vec(), |m| vec![m]);
            let mut reports = Vec::new();
            for m in methods {
                for mode in [PolicyMode::Tabular, PolicyMode::TinyLm] {
                    reports.push(check_gradients(m, mode, instances, seed)?);
                }
            }
            return Ok(print_reports(&reports));
        }
        Command::Theorycheck { samples, seed } => {
            let mut reports = vec![check_sigmoid_bound(samples, 50.0, seed)];
            for mode in [PolicyMode::Tabular, PolicyMode::TinyLm] {
                reports.push(check_multi_identity(1000, mode, seed)?);
                reports.push(check_lower_bound(10_000, mode, seed)?);
                reports.push(check_gradient_decomposition(100, mode, seed)?);
            }
            return Ok(print_reports(&reports));
        }
        Command::Plotdata { metrics: path, series, out } => {
            let series: Series = series.parse()?;
            let rows = metrics::read_file(&path)?;
            emit(&plotdata(&rows, series).to_csv()?, out.as_deref())?;
        }
        Command::DefaultConfig => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
