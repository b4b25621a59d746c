//! Command-line front end: training, evaluation sweeps, prior-weight
//! ablation, per-patch gain histograms, and trajectory export, each driven
//! by one TOML config file plus dotted-path overrides.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use jscc_core::experiments::{
    run_alpha_ablation, run_eval, run_patch_histogram, run_trace, ExperimentConfig, TrainPlan,
};
use jscc_core::metrics::PluginRegistry;
use jscc_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "jscc",
    about = "Joint source-channel coding with iterative codeword refinement",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder/decoder pair under simulated channel noise.
    TrainJscc {
        #[arg(short, long)]
        config: PathBuf,
        /// Dotted-path config overrides, e.g. --set training.total_steps=500
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Train the codeword denoiser against a frozen encoder.
    TrainDenoiser {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Paired one-shot vs. iterative evaluation over the configured SNRs.
    Eval {
        #[arg(short, long, required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
        /// Re-run from a previous run's manifest instead of a config file.
        #[arg(long, conflicts_with = "config")]
        manifest: Option<PathBuf>,
    },
    /// Evaluate once per prior weight and export gain tables and traces.
    AblateAlpha {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 4.0, 8.0])]
        alphas: Vec<f64>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Per-patch paired gains binned into histograms.
    PatchHist {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 256)]
        patch_size: usize,
        #[arg(long, default_value_t = 30)]
        patches_per_image: usize,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Export per-step decoder trajectories for nominated images.
    Trace {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

/// Applies `path.to.key=value` overrides onto a parsed TOML document.
fn apply_overrides(doc: &mut toml::Value, overrides: &[String]) -> Result<()> {
    for spec in overrides {
        let (path, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
        let parsed: toml::Value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(table) => table["v"].clone(),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut node = &mut *doc;
        let parts: Vec<&str> = path.split('.').collect();
        for key in &parts[..parts.len() - 1] {
            node = node
                .as_table_mut()
                .ok_or_else(|| {
                    Error::Config(format!("override path `{path}` crosses a non-table"))
                })?
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a non-table")))?
            .insert(parts[parts.len() - 1].to_string(), parsed);
    }
    Ok(())
}

fn load_with_overrides<T: serde::de::DeserializeOwned>(
    path: &PathBuf,
    overrides: &[String],
) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let mut doc = toml::Value::Table(table);
    apply_overrides(&mut doc, overrides)?;
    doc.try_into()
        .map_err(|e| Error::Config(format!("config error: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    let plugins = PluginRegistry::new();
    match cli.command {
        Command::TrainJscc { config, overrides } => {
            let plan: TrainPlan = load_with_overrides(&config, &overrides)?;
            let path = plan.run_train_jscc()?;
            println!("wrote {}", path.display());
        }
        Command::TrainDenoiser { config, overrides } => {
            let plan: TrainPlan = load_with_overrides(&config, &overrides)?;
            let path = plan.run_train_denoiser()?;
            println!("wrote {}", path.display());
        }
        Command::Eval {
            config,
            overrides,
            manifest,
        } => {
            let cfg: ExperimentConfig = match (manifest, config) {
                (Some(m), _) => ExperimentConfig::from_manifest(&m)?,
                (None, Some(c)) => load_with_overrides(&c, &overrides)?,
                (None, None) => unreachable!("clap enforces one of config/manifest"),
            };
            let out = run_eval(&cfg, &plugins)?;
            println!("wrote {} rows to {}", out.rows.len(), out.csv_path.display());
            for agg in &out.aggregates {
                println!(
                    "snr {:>6.2} dB: one-shot {:.3} dB, iterative {:.3} dB, delta {:+.3} dB ({} rows)",
                    agg.snr_test_db,
                    agg.mean_psnr_oneshot,
                    agg.mean_psnr_isec,
                    agg.mean_delta_psnr,
                    agg.rows
                );
            }
        }
        Command::AblateAlpha {
            config,
            alphas,
            overrides,
        } => {
            let cfg: ExperimentConfig = load_with_overrides(&config, &overrides)?;
            let out = run_alpha_ablation(&cfg, &alphas, &plugins)?;
            println!("wrote {} rows to {}", out.rows.len(), out.csv_path.display());
            for agg in &out.aggregates {
                println!(
                    "alpha {:>5.2} @ {:>6.2} dB: delta psnr {:+.3} dB",
                    agg.alpha.unwrap_or(f64::NAN),
                    agg.snr_test_db,
                    agg.mean_delta_psnr
                );
            }
        }
        Command::PatchHist {
            config,
            patch_size,
            patches_per_image,
            overrides,
        } => {
            let cfg: ExperimentConfig = load_with_overrides(&config, &overrides)?;
            let out = run_patch_histogram(&cfg, patch_size, patches_per_image, &plugins)?;
            println!(
                "wrote {} patch samples to {}",
                out.samples.len(),
                out.samples_path.display()
            );
        }
        Command::Trace { config, overrides } => {
            let cfg: ExperimentConfig = load_with_overrides(&config, &overrides)?;
            let out = run_trace(&cfg)?;
            println!(
                "wrote {} trace records to {}",
                out.traces.len(),
                out.trace_path.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
