//! Report emission: per-row CSV, aggregate recomputation, run manifests.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::NoiseFamily;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// Cap applied to infinite PSNR rows during aggregation; the raw sentinel is
/// preserved in the per-row CSV.
pub const PSNR_AGGREGATION_CAP_DB: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    Diverged,
    Failed,
}

impl std::fmt::Display for RowStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowStatus::Ok => write!(f, "ok"),
            RowStatus::Diverged => write!(f, "diverged"),
            RowStatus::Failed => write!(f, "failed"),
        }
    }
}

/// One paired evaluation: one-shot and iterative metrics derived from the
/// identical noisy codeword.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub image_id: usize,
    pub realization: usize,
    /// Prior weight used for this row (ablation runs vary it).
    pub alpha: Option<f64>,
    pub snr_train_db: f64,
    pub snr_test_db: f64,
    pub channel_family: NoiseFamily,
    pub measured_snr_db: f64,
    pub oneshot: MetricReport,
    pub iterative: Option<MetricReport>,
    pub status: RowStatus,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows as CSV. Plugin columns appear only when plug-ins were
/// registered; the alpha column only for ablation runs.
pub fn write_rows_csv(
    path: &Path,
    rows: &[EvalRow],
    plugin_names: &[String],
    include_alpha: bool,
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Io(std::io::Error::other(format!("cannot write {}: {e}", path.display()))))?;
    let mut header: Vec<String> = Vec::new();
    if include_alpha {
        header.push("alpha".to_string());
    }
    header.extend(
        [
            "image_id",
            "realization",
            "snr_train_db",
            "snr_test_db",
            "channel_family",
            "measured_snr_db",
            "psnr_oneshot",
            "ssim_oneshot",
            "ms_ssim_oneshot",
            "psnr_isec",
            "ssim_isec",
            "ms_ssim_isec",
            "status",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    for name in plugin_names {
        header.push(format!("plugin_{name}_oneshot"));
        header.push(format!("plugin_{name}_isec"));
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    for row in rows {
        let mut record: Vec<String> = Vec::with_capacity(header.len());
        if include_alpha {
            record.push(fmt_opt(row.alpha));
        }
        record.push(row.image_id.to_string());
        record.push(row.realization.to_string());
        record.push(row.snr_train_db.to_string());
        record.push(row.snr_test_db.to_string());
        record.push(row.channel_family.to_string());
        record.push(row.measured_snr_db.to_string());
        record.push(row.oneshot.psnr_db.to_string());
        record.push(row.oneshot.ssim.to_string());
        record.push(fmt_opt(row.oneshot.ms_ssim));
        match &row.iterative {
            Some(m) => {
                record.push(m.psnr_db.to_string());
                record.push(m.ssim.to_string());
                record.push(fmt_opt(m.ms_ssim));
            }
            None => {
                record.push(String::new());
                record.push(String::new());
                record.push(String::new());
            }
        }
        record.push(row.status.to_string());
        for name in plugin_names {
            record.push(fmt_opt(row.oneshot.plugin_scores.get(name).copied().flatten()));
            record.push(fmt_opt(
                row.iterative
                    .as_ref()
                    .and_then(|m| m.plugin_scores.get(name).copied().flatten()),
            ));
        }
        writer
            .write_record(&record)
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}

/// Group aggregate over rows sharing `(snr_test, alpha)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub snr_test_db: f64,
    pub alpha: Option<f64>,
    pub channel_family: NoiseFamily,
    pub rows: usize,
    pub diverged: usize,
    pub failed: usize,
    /// Rows whose PSNR hit the +inf sentinel and were capped.
    pub psnr_capped: usize,
    pub mean_psnr_oneshot: f64,
    pub mean_psnr_isec: f64,
    pub mean_delta_psnr: f64,
    pub mean_ssim_oneshot: f64,
    pub mean_ssim_isec: f64,
    pub mean_delta_ssim: f64,
    pub mean_ms_ssim_oneshot: Option<f64>,
    pub mean_ms_ssim_isec: Option<f64>,
}

fn cap(v: f64) -> f64 {
    if v.is_infinite() {
        PSNR_AGGREGATION_CAP_DB
    } else {
        v
    }
}

/// Computes group aggregates in row order (deterministic summation).
/// Rows without iterative metrics contribute only to the failure counters.
pub fn aggregate_rows(rows: &[EvalRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(f64, Option<f64>)> = Vec::new();
    for row in rows {
        let key = (row.snr_test_db, row.alpha);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = Vec::with_capacity(keys.len());
    for (snr, alpha) in keys {
        let group: Vec<&EvalRow> = rows
            .iter()
            .filter(|r| r.snr_test_db == snr && r.alpha == alpha)
            .collect();
        let mut capped = 0usize;
        let mut diverged = 0usize;
        let mut failed = 0usize;
        let mut sums = [0.0f64; 6];
        let mut ms_sums = (0.0f64, 0.0f64, 0usize);
        let mut counted = 0usize;
        for row in &group {
            match row.status {
                RowStatus::Diverged => diverged += 1,
                RowStatus::Failed => failed += 1,
                RowStatus::Ok => {}
            }
            let Some(iter) = &row.iterative else {
                continue;
            };
            if row.oneshot.psnr_db.is_infinite() || iter.psnr_db.is_infinite() {
                capped += 1;
            }
            let p0 = cap(row.oneshot.psnr_db);
            let p1 = cap(iter.psnr_db);
            sums[0] += p0;
            sums[1] += p1;
            sums[2] += p1 - p0;
            sums[3] += row.oneshot.ssim;
            sums[4] += iter.ssim;
            sums[5] += iter.ssim - row.oneshot.ssim;
            if let (Some(a), Some(b)) = (row.oneshot.ms_ssim, iter.ms_ssim) {
                ms_sums.0 += a;
                ms_sums.1 += b;
                ms_sums.2 += 1;
            }
            counted += 1;
        }
        let n = counted.max(1) as f64;
        out.push(Aggregate {
            snr_test_db: snr,
            alpha,
            channel_family: group
                .first()
                .map(|r| r.channel_family)
                .unwrap_or(NoiseFamily::Gaussian),
            rows: group.len(),
            diverged,
            failed,
            psnr_capped: capped,
            mean_psnr_oneshot: sums[0] / n,
            mean_psnr_isec: sums[1] / n,
            mean_delta_psnr: sums[2] / n,
            mean_ssim_oneshot: sums[3] / n,
            mean_ssim_isec: sums[4] / n,
            mean_delta_ssim: sums[5] / n,
            mean_ms_ssim_oneshot: (ms_sums.2 > 0).then(|| ms_sums.0 / ms_sums.2 as f64),
            mean_ms_ssim_isec: (ms_sums.2 > 0).then(|| ms_sums.1 / ms_sums.2 as f64),
        });
    }
    out
}

/// Reads an eval CSV back into rows (used to verify that published
/// aggregates match an independent recomputation).
pub fn read_rows_csv(path: &Path, include_alpha: bool) -> Result<Vec<EvalRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(e.to_string()))?
        .clone();
    let idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing CSV column {name}")))
    };
    let parse_f = |s: &str| -> f64 { s.parse().unwrap_or(f64::NAN) };
    let parse_opt = |s: &str| -> Option<f64> {
        if s.is_empty() {
            None
        } else {
            s.parse().ok()
        }
    };
    let (i_img, i_real) = (idx("image_id")?, idx("realization")?);
    let (i_tr, i_te) = (idx("snr_train_db")?, idx("snr_test_db")?);
    let i_fam = idx("channel_family")?;
    let i_meas = idx("measured_snr_db")?;
    let (i_p0, i_s0, i_m0) = (idx("psnr_oneshot")?, idx("ssim_oneshot")?, idx("ms_ssim_oneshot")?);
    let (i_p1, i_s1, i_m1) = (idx("psnr_isec")?, idx("ssim_isec")?, idx("ms_ssim_isec")?);
    let i_status = idx("status")?;
    let i_alpha = if include_alpha { Some(idx("alpha")?) } else { None };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Data(e.to_string()))?;
        let get = |i: usize| record.get(i).unwrap_or("");
        let status = match get(i_status) {
            "ok" => RowStatus::Ok,
            "diverged" => RowStatus::Diverged,
            _ => RowStatus::Failed,
        };
        let iterative = if get(i_p1).is_empty() {
            None
        } else {
            Some(MetricReport {
                psnr_db: parse_f(get(i_p1)),
                ssim: parse_f(get(i_s1)),
                ms_ssim: parse_opt(get(i_m1)),
                plugin_scores: BTreeMap::new(),
            })
        };
        rows.push(EvalRow {
            image_id: get(i_img).parse().unwrap_or(0),
            realization: get(i_real).parse().unwrap_or(0),
            alpha: i_alpha.map(|i| parse_f(get(i))),
            snr_train_db: parse_f(get(i_tr)),
            snr_test_db: parse_f(get(i_te)),
            channel_family: if get(i_fam) == "laplace" {
                NoiseFamily::Laplace
            } else {
                NoiseFamily::Gaussian
            },
            measured_snr_db: parse_f(get(i_meas)),
            oneshot: MetricReport {
                psnr_db: parse_f(get(i_p0)),
                ssim: parse_f(get(i_s0)),
                ms_ssim: parse_opt(get(i_m0)),
                plugin_scores: BTreeMap::new(),
            },
            iterative,
            status,
        });
    }
    Ok(rows)
}

/// Run manifest: everything needed to reproduce the run byte-for-byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub kind: String,
    pub config: super::ExperimentConfig,
    pub checkpoint_sha256: String,
    /// True when a previous manifest at the same output path recorded a
    /// different checkpoint hash.
    pub checkpoint_hash_changed_since_previous_run: bool,
    pub rows_written: usize,
    pub outputs: BTreeMap<String, PathBuf>,
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(json.as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("corrupt manifest {}: {e}", path.display())))
}

pub fn write_aggregates(path: &Path, aggregates: &[Aggregate]) -> Result<()> {
    let json = serde_json::to_string_pretty(aggregates)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_aggregates(path: &Path) -> Result<Vec<Aggregate>> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("corrupt aggregates {}: {e}", path.display())))
}
