//! Config-driven experiment harness: paired one-shot vs. iterative
//! evaluation over SNR sweeps, prior-weight ablations, per-patch gain
//! histograms, trajectory logging, and report emission.
//!
//! Every random quantity is keyed by `(seed, image, realization)` rather
//! than worker identity, so fanned-out runs reproduce byte-identical CSVs.

pub mod plot;
pub mod report;

pub use report::{
    aggregate_rows, read_aggregates, read_manifest, read_rows_csv, Aggregate, EvalRow,
    RowStatus, RunManifest, PSNR_AGGREGATION_CAP_DB,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::{
    measure_snr_db, sample_unit_noise, sigma_from_snr_db, snr_db_from_sigma, stream, substream,
    NoiseFamily,
};
use crate::data::{load_dataset, random_crop, DatasetConfig, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::isec::{self, IsecConfig, IsecStep};
use crate::metrics::{self, MetricReport, PluginRegistry};
use crate::models::{load_bundle, ModelBundle};
use crate::signal::{Codeword, SourceImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Cifar10Binary,
    ImageFolder,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBlock {
    pub source: SourceKind,
    pub path: Option<PathBuf>,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Cap on evaluated images (and the synthetic dataset size).
    pub count: Option<usize>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    /// Synthetic generator seed; defaults to the experiment seed.
    pub seed: Option<u64>,
}

fn default_split() -> Split {
    Split::Test
}

impl DatasetBlock {
    pub fn to_dataset_config(&self, default_seed: u64) -> Result<DatasetConfig> {
        match self.source {
            SourceKind::Cifar10Binary => Ok(DatasetConfig::Cifar10Binary {
                path: self
                    .path
                    .clone()
                    .ok_or_else(|| Error::Config("cifar10_binary needs a path".to_string()))?,
                split: self.split,
            }),
            SourceKind::ImageFolder => Ok(DatasetConfig::ImageFolder {
                path: self
                    .path
                    .clone()
                    .ok_or_else(|| Error::Config("image_folder needs a path".to_string()))?,
            }),
            SourceKind::Synthetic => Ok(DatasetConfig::Synthetic {
                count: self.count.unwrap_or(256),
                height: self
                    .height
                    .ok_or_else(|| Error::Config("synthetic dataset needs a height".to_string()))?,
                width: self
                    .width
                    .ok_or_else(|| Error::Config("synthetic dataset needs a width".to_string()))?,
                seed: self.seed.unwrap_or(default_seed),
                split: self.split,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelBlock {
    pub family: NoiseFamily,
    /// Absolute test SNRs in dB.
    #[serde(default)]
    pub snr_test_db: Vec<f64>,
    /// Test SNRs expressed as offsets from the checkpoint's training SNR
    /// (mismatch sweeps); resolved once the checkpoint is loaded.
    #[serde(default)]
    pub snr_offset_db: Vec<f64>,
}

impl ChannelBlock {
    /// Absolute SNR list for a model trained at `snr_train_db`.
    pub fn resolve_snrs(&self, snr_train_db: f64) -> Vec<f64> {
        let mut snrs = self.snr_test_db.clone();
        snrs.extend(self.snr_offset_db.iter().map(|off| snr_train_db + off));
        snrs
    }
}

/// Decoder parameters: either the published defaults for the checkpoint's
/// `(variant, cpp, trained snr)` tuple, or explicit values. Explicit fields
/// override defaults when both are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IsecBlock {
    #[serde(default)]
    pub defaults: bool,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub delta: Option<f64>,
    pub iterations: Option<usize>,
}

impl IsecBlock {
    pub fn resolve(&self, bundle: &ModelBundle, snr_test_db: f64) -> Result<IsecConfig> {
        let sigma_train = bundle.meta.sigma_train;
        let snr_train_db = snr_db_from_sigma(sigma_train);
        let mut cfg = if self.defaults {
            let meta = &bundle.meta.config;
            isec::default_params(
                meta.variant,
                meta.cpp_num,
                meta.cpp_den,
                snr_train_db,
                snr_test_db,
            )?
        } else {
            let need = |name: &str, v: Option<f64>| {
                v.ok_or_else(|| {
                    Error::Config(format!(
                        "isec block needs `{name}` (or set defaults = true)"
                    ))
                })
            };
            IsecConfig {
                alpha: need("alpha", self.alpha)?,
                eta: need("eta", self.eta)?,
                delta: need("delta", self.delta)?,
                iterations: self.iterations.unwrap_or(50),
                sigma: sigma_from_snr_db(snr_test_db),
                sigma_train,
            }
        };
        if let Some(alpha) = self.alpha {
            cfg.alpha = alpha;
        }
        if let Some(eta) = self.eta {
            cfg.eta = eta;
        }
        if let Some(delta) = self.delta {
            cfg.delta = delta;
        }
        if let Some(iterations) = self.iterations {
            cfg.iterations = iterations;
        }
        // Exact sigma values, never the table approximations.
        cfg.sigma = sigma_from_snr_db(snr_test_db);
        cfg.sigma_train = sigma_train;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputBlock {
    pub dir: PathBuf,
    #[serde(default)]
    pub plots: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TraceBlock {
    /// Image indices whose per-step trajectories are exported.
    #[serde(default)]
    pub images: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    pub model: ModelRef,
    pub dataset: DatasetBlock,
    pub channel: ChannelBlock,
    #[serde(default)]
    pub isec: IsecBlock,
    pub outputs: OutputBlock,
    #[serde(default)]
    pub trace: TraceBlock,
}

fn default_realizations() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Rebuilds the config recorded in a previous run's manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        Ok(report::read_manifest(path)?.config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(Error::Config("realizations must be >= 1".to_string()));
        }
        if self.channel.snr_test_db.is_empty() && self.channel.snr_offset_db.is_empty() {
            return Err(Error::Config(
                "channel needs snr_test_db and/or snr_offset_db".to_string(),
            ));
        }
        for &snr in self
            .channel
            .snr_test_db
            .iter()
            .chain(&self.channel.snr_offset_db)
        {
            if !snr.is_finite() {
                return Err(Error::Config(format!("test SNR {snr} is not finite")));
            }
        }
        Ok(())
    }
}

/// One training run as described by a config file: the schedule, the data,
/// optionally the checkpoint to start from (denoiser training), and where to
/// write the resulting bundle and line-delimited loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub training: crate::training::TrainConfig,
    pub dataset: crate::data::DatasetConfig,
    /// Existing bundle (required for denoiser training, optional resume for
    /// joint training).
    pub model: Option<PathBuf>,
    pub outputs: OutputBlock,
}

impl TrainPlan {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn prepare(&self) -> Result<(crate::training::TrainConfig, crate::data::DatasetHandle)> {
        std::fs::create_dir_all(&self.outputs.dir)?;
        let mut cfg = self.training.clone();
        if cfg.log_path.is_none() {
            cfg.log_path = Some(self.outputs.dir.join("train.log"));
        }
        if cfg.checkpoint_every > 0 && cfg.checkpoint_dir.is_none() {
            cfg.checkpoint_dir = Some(self.outputs.dir.join("checkpoints"));
        }
        let data = load_dataset(&self.dataset)?;
        Ok((cfg, data))
    }

    /// Joint encoder/decoder training; writes `model.ckpt` into the output
    /// directory and returns its path.
    pub fn run_train_jscc(&self) -> Result<PathBuf> {
        let (cfg, data) = self.prepare()?;
        let run = match &self.model {
            Some(ckpt) => {
                let bundle = load_bundle(ckpt)?;
                crate::training::train_jscc_from(&cfg, bundle, &data)?
            }
            None => crate::training::train_jscc(&cfg, &data)?,
        };
        let path = self.outputs.dir.join("model.ckpt");
        crate::models::save_bundle(&run.bundle, &path)?;
        Ok(path)
    }

    /// Denoiser training against the frozen encoder of `model`; writes the
    /// full triple to `model.ckpt` in the output directory.
    pub fn run_train_denoiser(&self) -> Result<PathBuf> {
        let ckpt = self.model.as_ref().ok_or_else(|| {
            Error::Config("denoiser training needs `model` (the encoder/decoder checkpoint)".to_string())
        })?;
        let (cfg, data) = self.prepare()?;
        let bundle = load_bundle(ckpt)?;
        let run = crate::training::train_denoiser(&cfg, bundle, &data)?;
        let path = self.outputs.dir.join("model.ckpt");
        crate::models::save_bundle(&run.bundle, &path)?;
        Ok(path)
    }
}

struct RunContext {
    bundle: ModelBundle,
    dataset: DatasetHandle,
    count: usize,
    checkpoint_sha256: String,
    snr_train_db: f64,
    /// Absolute test SNRs (explicit values plus resolved offsets).
    snrs: Vec<f64>,
    hash_changed: bool,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn prepare(cfg: &ExperimentConfig, kind: &str) -> Result<RunContext> {
    cfg.validate()?;
    // Outputs must be writable before any computation starts.
    std::fs::create_dir_all(&cfg.outputs.dir)?;
    let probe = cfg.outputs.dir.join(".write-probe");
    std::fs::write(&probe, b"ok")
        .map_err(|e| Error::Io(std::io::Error::other(format!(
            "output dir {} is not writable: {e}",
            cfg.outputs.dir.display()
        ))))?;
    std::fs::remove_file(&probe).ok();

    let bundle = load_bundle(&cfg.model.checkpoint)?;
    let checkpoint_sha256 = sha256_file(&cfg.model.checkpoint)?;
    let hash_changed = match report::read_manifest(&cfg.outputs.dir.join(manifest_name(kind))) {
        Ok(previous) => {
            let changed = previous.checkpoint_sha256 != checkpoint_sha256;
            if changed {
                eprintln!(
                    "warning: checkpoint hash changed since the previous run in {}",
                    cfg.outputs.dir.display()
                );
            }
            changed
        }
        Err(_) => false,
    };

    let dataset = load_dataset(&cfg.dataset.to_dataset_config(cfg.seed)?)?;
    let count = cfg
        .dataset
        .count
        .map(|c| c.min(dataset.len()))
        .unwrap_or(dataset.len());
    if count == 0 {
        return Err(Error::Data("no images to evaluate".to_string()));
    }
    // Abort on configuration/checkpoint mismatch before any computation:
    // probe the first image through shape validation.
    let first = dataset.fetch_raw(0)?;
    bundle.validate_image_shape(first.shape())?;
    if cfg.isec.defaults || cfg.isec.alpha.is_none_or(|a| a > 0.0) {
        // The prior model is required unless alpha is explicitly zero.
        if bundle.denoiser.is_none() && cfg.isec.alpha != Some(0.0) {
            return Err(Error::Config(
                "checkpoint has no denoiser; set isec.alpha = 0.0 or train one".to_string(),
            ));
        }
    }
    let snr_train_db = snr_db_from_sigma(bundle.meta.sigma_train);
    let snrs = cfg.channel.resolve_snrs(snr_train_db);
    Ok(RunContext {
        bundle,
        dataset,
        count,
        checkpoint_sha256,
        snr_train_db,
        snrs,
        hash_changed,
    })
}

fn manifest_name(kind: &str) -> String {
    format!("{kind}_manifest.json")
}

const FAMILY_TAG_GAUSSIAN: u64 = 0;
const FAMILY_TAG_LAPLACE: u64 = 1;

fn family_tag(family: NoiseFamily) -> u64 {
    match family {
        NoiseFamily::Gaussian => FAMILY_TAG_GAUSSIAN,
        NoiseFamily::Laplace => FAMILY_TAG_LAPLACE,
    }
}

/// Unit-variance noise for `(image, realization)`; one draw shared by every
/// test SNR so comparisons are paired across SNRs too.
fn unit_noise_for(
    seed: u64,
    family: NoiseFamily,
    image: usize,
    realization: usize,
    dim: usize,
) -> Array1<f64> {
    let mut rng = substream(
        seed,
        &[stream::NOISE, family_tag(family), image as u64, realization as u64],
    );
    sample_unit_noise(family, dim, &mut rng)
}

struct PairedOutcome {
    oneshot: MetricReport,
    iterative: Option<MetricReport>,
    status: RowStatus,
    measured_snr_db: f64,
    trace: Option<Vec<IsecStep>>,
}

/// One paired decode at one SNR: identical noisy codeword for both decoders.
#[allow(clippy::too_many_arguments)]
fn evaluate_pair(
    bundle: &ModelBundle,
    image: &SourceImage,
    codeword: &Codeword,
    unit: &Array1<f64>,
    sigma: f64,
    isec_cfg: &IsecConfig,
    plugins: &PluginRegistry,
    want_trace: bool,
) -> Result<PairedOutcome> {
    let noise: Array1<f64> = unit.mapv(|v| v * sigma);
    let received = crate::channel::add_noise(codeword, &noise);
    let measured =
        measure_snr_db(codeword, noise.as_slice().expect("contiguous noise"))
            .unwrap_or(f64::NEG_INFINITY);

    let oneshot_img = bundle.decode(&received)?;
    let oneshot = metrics::evaluate(image, &oneshot_img, plugins)?;

    let (iterative, status, trace) =
        match isec::decode(bundle, &received, isec_cfg, want_trace.then_some(image)) {
            Ok((img, trace)) => {
                let report = metrics::evaluate(image, &img, plugins)?;
                let status = if trace.diverged {
                    RowStatus::Diverged
                } else {
                    RowStatus::Ok
                };
                (Some(report), status, want_trace.then_some(trace.steps))
            }
            Err(Error::Numeric(_)) => (None, RowStatus::Failed, None),
            Err(e) => return Err(e),
        };
    Ok(PairedOutcome {
        oneshot,
        iterative,
        status,
        measured_snr_db: measured,
        trace,
    })
}

pub struct EvalOutput {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    pub manifest: RunManifest,
    pub csv_path: PathBuf,
}

/// Paired one-shot vs. iterative evaluation over the configured SNR list.
pub fn run_eval(cfg: &ExperimentConfig, plugins: &PluginRegistry) -> Result<EvalOutput> {
    let ctx = prepare(cfg, "eval")?;
    let snr_configs: Vec<(f64, IsecConfig)> = ctx
        .snrs
        .iter()
        .map(|&snr| Ok((snr, cfg.isec.resolve(&ctx.bundle, snr)?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..ctx.count)
        .flat_map(|img| (0..cfg.realizations).map(move |r| (img, r)))
        .collect();
    let results: Vec<Result<Vec<EvalRow>>> = jobs
        .par_iter()
        .map(|&(image_id, realization)| {
            let image = ctx.dataset.fetch_raw(image_id)?;
            let codeword = ctx.bundle.encode(&image)?;
            let unit = unit_noise_for(
                cfg.seed,
                cfg.channel.family,
                image_id,
                realization,
                codeword.k(),
            );
            let mut rows = Vec::with_capacity(snr_configs.len());
            for (snr, isec_cfg) in &snr_configs {
                let sigma = sigma_from_snr_db(*snr);
                let outcome = evaluate_pair(
                    &ctx.bundle,
                    &image,
                    &codeword,
                    &unit,
                    sigma,
                    isec_cfg,
                    plugins,
                    false,
                )?;
                rows.push(EvalRow {
                    image_id,
                    realization,
                    alpha: None,
                    snr_train_db: ctx.snr_train_db,
                    snr_test_db: *snr,
                    channel_family: cfg.channel.family,
                    measured_snr_db: outcome.measured_snr_db,
                    oneshot: outcome.oneshot,
                    iterative: outcome.iterative,
                    status: outcome.status,
                });
            }
            Ok(rows)
        })
        .collect();

    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    sort_rows(&mut rows);
    let aggregates = aggregate_rows(&rows);

    let csv_path = cfg.outputs.dir.join("eval_rows.csv");
    report::write_rows_csv(&csv_path, &rows, &plugins.names(), false)?;
    let agg_path = cfg.outputs.dir.join("eval_aggregates.json");
    report::write_aggregates(&agg_path, &aggregates)?;
    if cfg.outputs.plots {
        let series = vec![
            plot::Series {
                name: "one-shot".to_string(),
                points: aggregates
                    .iter()
                    .map(|a| (a.snr_test_db, a.mean_psnr_oneshot))
                    .collect(),
            },
            plot::Series {
                name: "iterative".to_string(),
                points: aggregates
                    .iter()
                    .map(|a| (a.snr_test_db, a.mean_psnr_isec))
                    .collect(),
            },
        ];
        plot::line_chart(
            &cfg.outputs.dir.join("eval_psnr.svg"),
            "PSNR vs test SNR",
            "test SNR (dB)",
            "PSNR (dB)",
            &series,
        )?;
    }

    let mut outputs = BTreeMap::new();
    outputs.insert("rows_csv".to_string(), csv_path.clone());
    outputs.insert("aggregates_json".to_string(), agg_path);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "eval".to_string(),
        config: cfg.clone(),
        checkpoint_sha256: ctx.checkpoint_sha256,
        checkpoint_hash_changed_since_previous_run: ctx.hash_changed,
        rows_written: rows.len(),
        outputs,
    };
    report::write_manifest(&cfg.outputs.dir.join(manifest_name("eval")), &manifest)?;
    Ok(EvalOutput {
        rows,
        aggregates,
        manifest,
        csv_path,
    })
}

fn sort_rows(rows: &mut [EvalRow]) {
    rows.sort_by(|a, b| {
        a.snr_test_db
            .partial_cmp(&b.snr_test_db)
            .unwrap()
            .then(
                a.alpha
                    .unwrap_or(f64::NEG_INFINITY)
                    .partial_cmp(&b.alpha.unwrap_or(f64::NEG_INFINITY))
                    .unwrap(),
            )
            .then(a.image_id.cmp(&b.image_id))
            .then(a.realization.cmp(&b.realization))
    });
}

pub struct AblationOutput {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
    pub manifest: RunManifest,
    pub csv_path: PathBuf,
    pub trace_path: PathBuf,
}

/// Runs the evaluation once per prior weight in `alphas`, reusing identical
/// noise realizations, and exports per-step traces for the nominated images.
pub fn run_alpha_ablation(
    cfg: &ExperimentConfig,
    alphas: &[f64],
    plugins: &PluginRegistry,
) -> Result<AblationOutput> {
    if alphas.is_empty() {
        return Err(Error::Config("alpha ablation needs at least one alpha".to_string()));
    }
    let ctx = prepare(cfg, "ablation")?;
    let trace_images: Vec<usize> = cfg
        .trace
        .images
        .iter()
        .copied()
        .filter(|&i| i < ctx.count)
        .collect();

    let mut combos: Vec<(f64, f64, IsecConfig)> = Vec::new();
    for &alpha in alphas {
        for &snr in &ctx.snrs {
            let mut isec_cfg = cfg.isec.resolve(&ctx.bundle, snr)?;
            isec_cfg.alpha = alpha;
            combos.push((alpha, snr, isec_cfg));
        }
    }

    let jobs: Vec<(usize, usize)> = (0..ctx.count)
        .flat_map(|img| (0..cfg.realizations).map(move |r| (img, r)))
        .collect();
    type JobOut = (Vec<EvalRow>, Vec<TraceRecord>);
    let results: Vec<Result<JobOut>> = jobs
        .par_iter()
        .map(|&(image_id, realization)| {
            let image = ctx.dataset.fetch_raw(image_id)?;
            let codeword = ctx.bundle.encode(&image)?;
            let unit = unit_noise_for(
                cfg.seed,
                cfg.channel.family,
                image_id,
                realization,
                codeword.k(),
            );
            let want_trace = trace_images.contains(&image_id) && realization == 0;
            let mut rows = Vec::new();
            let mut traces = Vec::new();
            for (alpha, snr, isec_cfg) in &combos {
                let sigma = sigma_from_snr_db(*snr);
                let outcome = evaluate_pair(
                    &ctx.bundle,
                    &image,
                    &codeword,
                    &unit,
                    sigma,
                    isec_cfg,
                    plugins,
                    want_trace,
                )?;
                if let Some(steps) = &outcome.trace {
                    for s in steps {
                        traces.push(TraceRecord {
                            image_id,
                            snr_test_db: *snr,
                            alpha: *alpha,
                            t: s.t,
                            nll: s.nll,
                            prior_norm_sq: s.prior_norm_sq,
                            psnr: s.psnr,
                        });
                    }
                }
                rows.push(EvalRow {
                    image_id,
                    realization,
                    alpha: Some(*alpha),
                    snr_train_db: ctx.snr_train_db,
                    snr_test_db: *snr,
                    channel_family: cfg.channel.family,
                    measured_snr_db: outcome.measured_snr_db,
                    oneshot: outcome.oneshot,
                    iterative: outcome.iterative,
                    status: outcome.status,
                });
            }
            Ok((rows, traces))
        })
        .collect();

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for r in results {
        let (job_rows, job_traces) = r?;
        rows.extend(job_rows);
        traces.extend(job_traces);
    }
    sort_rows(&mut rows);
    traces.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then(a.snr_test_db.partial_cmp(&b.snr_test_db).unwrap())
            .then(a.alpha.partial_cmp(&b.alpha).unwrap())
            .then(a.t.cmp(&b.t))
    });
    let aggregates = aggregate_rows(&rows);

    let csv_path = cfg.outputs.dir.join("ablation_rows.csv");
    report::write_rows_csv(&csv_path, &rows, &plugins.names(), true)?;
    let agg_path = cfg.outputs.dir.join("ablation_aggregates.json");
    report::write_aggregates(&agg_path, &aggregates)?;
    let trace_path = cfg.outputs.dir.join("ablation_traces.csv");
    write_traces_csv(&trace_path, &traces)?;
    if cfg.outputs.plots {
        emit_trace_plots(&cfg.outputs.dir, &traces)?;
    }

    let mut outputs = BTreeMap::new();
    outputs.insert("rows_csv".to_string(), csv_path.clone());
    outputs.insert("aggregates_json".to_string(), agg_path);
    outputs.insert("traces_csv".to_string(), trace_path.clone());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "ablation".to_string(),
        config: cfg.clone(),
        checkpoint_sha256: ctx.checkpoint_sha256,
        checkpoint_hash_changed_since_previous_run: ctx.hash_changed,
        rows_written: rows.len(),
        outputs,
    };
    report::write_manifest(&cfg.outputs.dir.join(manifest_name("ablation")), &manifest)?;
    Ok(AblationOutput {
        rows,
        aggregates,
        manifest,
        csv_path,
        trace_path,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub image_id: usize,
    pub snr_test_db: f64,
    pub alpha: f64,
    pub t: usize,
    pub nll: f64,
    pub prior_norm_sq: f64,
    pub psnr: Option<f64>,
}

fn write_traces_csv(path: &Path, traces: &[TraceRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    writer
        .write_record(["image_id", "snr_test_db", "alpha", "t", "nll", "prior_norm_sq", "psnr"])
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for t in traces {
        writer
            .write_record(&[
                t.image_id.to_string(),
                t.snr_test_db.to_string(),
                t.alpha.to_string(),
                t.t.to_string(),
                t.nll.to_string(),
                t.prior_norm_sq.to_string(),
                t.psnr.map(|p| p.to_string()).unwrap_or_default(),
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

pub fn read_traces_csv(path: &Path) -> Result<Vec<TraceRecord>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| Error::Data(e.to_string()))?;
        let get = |i: usize| r.get(i).unwrap_or("");
        out.push(TraceRecord {
            image_id: get(0).parse().unwrap_or(0),
            snr_test_db: get(1).parse().unwrap_or(f64::NAN),
            alpha: get(2).parse().unwrap_or(f64::NAN),
            t: get(3).parse().unwrap_or(0),
            nll: get(4).parse().unwrap_or(f64::NAN),
            prior_norm_sq: get(5).parse().unwrap_or(f64::NAN),
            psnr: if get(6).is_empty() {
                None
            } else {
                get(6).parse().ok()
            },
        });
    }
    Ok(out)
}

fn emit_trace_plots(dir: &Path, traces: &[TraceRecord]) -> Result<()> {
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for t in traces {
        if !keys.contains(&(t.image_id, t.snr_test_db)) {
            keys.push((t.image_id, t.snr_test_db));
        }
    }
    for (image_id, snr) in keys {
        let mut alphas: Vec<f64> = traces
            .iter()
            .filter(|t| t.image_id == image_id && t.snr_test_db == snr)
            .map(|t| t.alpha)
            .collect();
        alphas.dedup();
        for (metric, label, select) in [
            ("nll", "NLL", 0usize),
            ("prior", "||F(z_t)||^2", 1),
            ("psnr", "PSNR (dB)", 2),
        ] {
            let series: Vec<plot::Series> = alphas
                .iter()
                .map(|&alpha| plot::Series {
                    name: format!("alpha={alpha}"),
                    points: traces
                        .iter()
                        .filter(|t| {
                            t.image_id == image_id && t.snr_test_db == snr && t.alpha == alpha
                        })
                        .filter_map(|t| {
                            let y = match select {
                                0 => Some(t.nll),
                                1 => Some(t.prior_norm_sq),
                                _ => t.psnr,
                            };
                            y.map(|y| (t.t as f64, y))
                        })
                        .collect(),
                })
                .collect();
            plot::line_chart(
                &dir.join(format!("trace_img{image_id}_snr{snr}_{metric}.svg")),
                &format!("{label} over steps (image {image_id}, {snr} dB)"),
                "step",
                label,
                &series,
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PatchSample {
    pub image_id: usize,
    pub patch_index: usize,
    pub snr_test_db: f64,
    pub delta_psnr: f64,
    pub delta_ssim: f64,
    pub delta_ms_ssim: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBins {
    pub metric: String,
    pub snr_test_db: f64,
    pub bins: Vec<(f64, f64, usize)>,
    pub samples: usize,
}

pub struct PatchHistOutput {
    pub samples: Vec<PatchSample>,
    pub histograms: Vec<HistogramBins>,
    pub manifest: RunManifest,
    pub samples_path: PathBuf,
}

const HISTOGRAM_BINS: usize = 40;

fn bin_samples(values: &[f64]) -> Vec<(f64, f64, usize)> {
    if values.is_empty() {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bins = vec![0usize; HISTOGRAM_BINS];
    for &v in values {
        let idx = (((v - lo) / span) * HISTOGRAM_BINS as f64) as usize;
        bins[idx.min(HISTOGRAM_BINS - 1)] += 1;
    }
    bins.iter()
        .enumerate()
        .map(|(i, &count)| {
            let w = span / HISTOGRAM_BINS as f64;
            (lo + i as f64 * w, lo + (i + 1) as f64 * w, count)
        })
        .collect()
}

/// Per-patch paired gains: random patches from each image are transmitted
/// and decoded both ways; per-patch metric deltas are binned into
/// histograms. Set-level (distributional) metrics are out of scope here.
pub fn run_patch_histogram(
    cfg: &ExperimentConfig,
    patch_size: usize,
    patches_per_image: usize,
    plugins: &PluginRegistry,
) -> Result<PatchHistOutput> {
    if patches_per_image == 0 {
        return Err(Error::Config("patches_per_image must be >= 1".to_string()));
    }
    let ctx = prepare(cfg, "patch_hist")?;
    let snr_configs: Vec<(f64, IsecConfig)> = ctx
        .snrs
        .iter()
        .map(|&snr| Ok((snr, cfg.isec.resolve(&ctx.bundle, snr)?)))
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..ctx.count)
        .flat_map(|img| (0..patches_per_image).map(move |p| (img, p)))
        .collect();
    let results: Vec<Result<Vec<PatchSample>>> = jobs
        .par_iter()
        .map(|&(image_id, patch_index)| {
            let image = ctx.dataset.fetch_raw(image_id)?;
            let mut crop_rng = substream(
                cfg.seed,
                &[stream::PATCH, image_id as u64, patch_index as u64],
            );
            let patch = random_crop(&image, patch_size, &mut crop_rng)?;
            let codeword = ctx.bundle.encode(&patch)?;
            let unit = unit_noise_for(
                cfg.seed,
                cfg.channel.family,
                image_id * 1_000_003 + patch_index,
                0,
                codeword.k(),
            );
            let mut samples = Vec::with_capacity(snr_configs.len());
            for (snr, isec_cfg) in &snr_configs {
                let sigma = sigma_from_snr_db(*snr);
                let outcome = evaluate_pair(
                    &ctx.bundle,
                    &patch,
                    &codeword,
                    &unit,
                    sigma,
                    isec_cfg,
                    plugins,
                    false,
                )?;
                let Some(iter) = outcome.iterative else {
                    continue;
                };
                samples.push(PatchSample {
                    image_id,
                    patch_index,
                    snr_test_db: *snr,
                    delta_psnr: capped(iter.psnr_db) - capped(outcome.oneshot.psnr_db),
                    delta_ssim: iter.ssim - outcome.oneshot.ssim,
                    delta_ms_ssim: match (iter.ms_ssim, outcome.oneshot.ms_ssim) {
                        (Some(a), Some(b)) => Some(a - b),
                        _ => None,
                    },
                });
            }
            Ok(samples)
        })
        .collect();

    let mut samples = Vec::new();
    for r in results {
        samples.extend(r?);
    }
    samples.sort_by(|a, b| {
        a.snr_test_db
            .partial_cmp(&b.snr_test_db)
            .unwrap()
            .then(a.image_id.cmp(&b.image_id))
            .then(a.patch_index.cmp(&b.patch_index))
    });

    let mut histograms = Vec::new();
    for &(snr, _) in &snr_configs {
        let group: Vec<&PatchSample> = samples.iter().filter(|s| s.snr_test_db == snr).collect();
        let psnr_vals: Vec<f64> = group.iter().map(|s| s.delta_psnr).collect();
        histograms.push(HistogramBins {
            metric: "delta_psnr".to_string(),
            snr_test_db: snr,
            bins: bin_samples(&psnr_vals),
            samples: psnr_vals.len(),
        });
        let ssim_vals: Vec<f64> = group.iter().map(|s| s.delta_ssim).collect();
        histograms.push(HistogramBins {
            metric: "delta_ssim".to_string(),
            snr_test_db: snr,
            bins: bin_samples(&ssim_vals),
            samples: ssim_vals.len(),
        });
        let ms_vals: Vec<f64> = group.iter().filter_map(|s| s.delta_ms_ssim).collect();
        if !ms_vals.is_empty() {
            histograms.push(HistogramBins {
                metric: "delta_ms_ssim".to_string(),
                snr_test_db: snr,
                bins: bin_samples(&ms_vals),
                samples: ms_vals.len(),
            });
        }
    }

    let samples_path = cfg.outputs.dir.join("patch_samples.csv");
    {
        let mut writer = csv::Writer::from_path(&samples_path)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        writer
            .write_record([
                "image_id",
                "patch_index",
                "snr_test_db",
                "delta_psnr",
                "delta_ssim",
                "delta_ms_ssim",
            ])
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        for s in &samples {
            writer
                .write_record(&[
                    s.image_id.to_string(),
                    s.patch_index.to_string(),
                    s.snr_test_db.to_string(),
                    s.delta_psnr.to_string(),
                    s.delta_ssim.to_string(),
                    s.delta_ms_ssim.map(|v| v.to_string()).unwrap_or_default(),
                ])
                .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        }
        writer
            .flush()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    let hist_path = cfg.outputs.dir.join("patch_histograms.json");
    std::fs::write(
        &hist_path,
        serde_json::to_string_pretty(&histograms)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?,
    )?;
    if cfg.outputs.plots {
        for h in &histograms {
            plot::histogram(
                &cfg.outputs.dir.join(format!(
                    "patch_hist_{}_snr{}.svg",
                    h.metric, h.snr_test_db
                )),
                &format!("{} at {} dB", h.metric, h.snr_test_db),
                &h.metric,
                &h.bins,
            )?;
        }
    }

    let mut outputs = BTreeMap::new();
    outputs.insert("samples_csv".to_string(), samples_path.clone());
    outputs.insert("histograms_json".to_string(), hist_path);
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "patch_hist".to_string(),
        config: cfg.clone(),
        checkpoint_sha256: ctx.checkpoint_sha256,
        checkpoint_hash_changed_since_previous_run: ctx.hash_changed,
        rows_written: samples.len(),
        outputs,
    };
    report::write_manifest(&cfg.outputs.dir.join(manifest_name("patch_hist")), &manifest)?;
    Ok(PatchHistOutput {
        samples,
        histograms,
        manifest,
        samples_path,
    })
}

fn capped(v: f64) -> f64 {
    if v.is_infinite() {
        PSNR_AGGREGATION_CAP_DB
    } else {
        v
    }
}

pub struct TraceOutput {
    pub traces: Vec<TraceRecord>,
    pub manifest: RunManifest,
    pub trace_path: PathBuf,
}

/// Exports per-step trajectories (NLL, prior norm, PSNR) for the nominated
/// images at every configured SNR with the configured decoder parameters.
pub fn run_trace(cfg: &ExperimentConfig) -> Result<TraceOutput> {
    let ctx = prepare(cfg, "trace")?;
    let images: Vec<usize> = if cfg.trace.images.is_empty() {
        vec![0]
    } else {
        cfg.trace
            .images
            .iter()
            .copied()
            .filter(|&i| i < ctx.count)
            .collect()
    };
    let plugins = PluginRegistry::new();
    let mut traces: Vec<TraceRecord> = Vec::new();
    for &image_id in &images {
        let image = ctx.dataset.fetch_raw(image_id)?;
        let codeword = ctx.bundle.encode(&image)?;
        let unit = unit_noise_for(cfg.seed, cfg.channel.family, image_id, 0, codeword.k());
        for &snr in &ctx.snrs {
            let isec_cfg = cfg.isec.resolve(&ctx.bundle, snr)?;
            let sigma = sigma_from_snr_db(snr);
            let outcome = evaluate_pair(
                &ctx.bundle,
                &image,
                &codeword,
                &unit,
                sigma,
                &isec_cfg,
                &plugins,
                true,
            )?;
            if let Some(steps) = outcome.trace {
                for s in steps {
                    traces.push(TraceRecord {
                        image_id,
                        snr_test_db: snr,
                        alpha: isec_cfg.alpha,
                        t: s.t,
                        nll: s.nll,
                        prior_norm_sq: s.prior_norm_sq,
                        psnr: s.psnr,
                    });
                }
            }
        }
    }
    let trace_path = cfg.outputs.dir.join("traces.csv");
    write_traces_csv(&trace_path, &traces)?;
    if cfg.outputs.plots {
        emit_trace_plots(&cfg.outputs.dir, &traces)?;
    }
    let mut outputs = BTreeMap::new();
    outputs.insert("traces_csv".to_string(), trace_path.clone());
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "trace".to_string(),
        config: cfg.clone(),
        checkpoint_sha256: ctx.checkpoint_sha256,
        checkpoint_hash_changed_since_previous_run: ctx.hash_changed,
        rows_written: traces.len(),
        outputs,
    };
    report::write_manifest(&cfg.outputs.dir.join(manifest_name("trace")), &manifest)?;
    Ok(TraceOutput {
        traces,
        manifest,
        trace_path,
    })
}
