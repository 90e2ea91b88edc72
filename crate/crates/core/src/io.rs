//! Output files: trajectory CSV, density snapshots, manifest and report.
//!
//! Nothing written here carries a timestamp or host information, so two runs
//! with the same inputs produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::girsanov::{level_weights, GirsanovSample};
use crate::hilbert::DensityMatrix;
use crate::sde::Trajectory;
use crate::stats::CheckResult;

/// Opens a CSV writer whose first line is `# <provenance>`.
fn csv_writer(path: &Path, provenance: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = create(path)?;
    writeln!(w, "# {provenance}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(w))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// SHA-256 of the compact JSON encoding; object keys are sorted by serde_json.
pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("json values serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// Shortest round-trip decimal representation.
fn num(x: f64) -> String {
    format!("{x:?}")
}

fn level_headers(prefix: &str, levels: impl Iterator<Item = usize>) -> Vec<String> {
    levels.map(|n| format!("{prefix}_{}", n + 1)).collect()
}

/// Streaming CSV writer for recorded trajectories.
///
/// A `#` comment line carrying run provenance precedes the header.
/// Columns: `traj_id,t,H,V,beta,norm_err,P_1..P_D`, then one `Pi_n` column
/// per tracked degenerate level `n` (1-based, matching `P_n`).
pub struct TrajectoryCsv {
    writer: csv::Writer<BufWriter<File>>,
    num_levels: usize,
    complement_levels: Vec<usize>,
}

impl TrajectoryCsv {
    pub fn create(
        path: &Path,
        provenance: &str,
        num_levels: usize,
        complement_levels: &[usize],
    ) -> Result<Self> {
        let mut writer = csv_writer(path, provenance)?;
        let mut header: Vec<String> = ["traj_id", "t", "H", "V", "beta", "norm_err"]
            .map(String::from)
            .to_vec();
        header.extend(level_headers("P", 0..num_levels));
        header.extend(level_headers("Pi", complement_levels.iter().copied()));
        writer.write_record(&header)?;
        Ok(Self {
            writer,
            num_levels,
            complement_levels: complement_levels.to_vec(),
        })
    }

    pub fn write(&mut self, traj: &Trajectory) -> Result<()> {
        let mut row = Vec::with_capacity(6 + self.num_levels + self.complement_levels.len());
        for j in 0..traj.times.len() {
            row.clear();
            row.push(traj.index.to_string());
            for x in [
                traj.times[j],
                traj.h[j],
                traj.v[j],
                traj.beta[j],
                traj.norm_err[j],
            ] {
                row.push(num(x));
            }
            row.extend(traj.level_probs[j].iter().map(|&p| num(p)));
            for level in &self.complement_levels {
                let value = traj
                    .monitored_levels
                    .iter()
                    .position(|l| l == level)
                    .map_or(0.0, |k| traj.complement[j][k]);
                row.push(num(value));
            }
            self.writer.write_record(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io("trajectory csv", e))
    }
}

/// Streaming CSV writer for closed-form samples: the trajectory columns
/// followed by `wstar,lambda_star`. `norm_err` is identically zero.
pub struct GirsanovCsv {
    writer: csv::Writer<BufWriter<File>>,
    eigenvalues: Vec<f64>,
    sigma: f64,
}

impl GirsanovCsv {
    pub fn create(path: &Path, provenance: &str, eigenvalues: &[f64], sigma: f64) -> Result<Self> {
        let mut writer = csv_writer(path, provenance)?;
        let mut header: Vec<String> = ["traj_id", "t", "H", "V", "beta", "norm_err"]
            .map(String::from)
            .to_vec();
        header.extend(level_headers("P", 0..eigenvalues.len()));
        header.push("wstar".into());
        header.push("lambda_star".into());
        writer.write_record(&header)?;
        Ok(Self {
            writer,
            eigenvalues: eigenvalues.to_vec(),
            sigma,
        })
    }

    /// `pi` are the initial level weights the sample was generated from.
    pub fn write(&mut self, index: usize, pi: &[f64], sample: &GirsanovSample) -> Result<()> {
        let mut row = Vec::new();
        for j in 0..sample.times.len() {
            let p = level_weights(
                pi,
                &self.eigenvalues,
                self.sigma,
                sample.wstar[j],
                sample.times[j],
            )?;
            let h = sample.h[j];
            let (mut v, mut beta) = (0.0, 0.0);
            for (pn, e) in p.iter().zip(&self.eigenvalues) {
                let d = e - h;
                v += pn * d * d;
                beta += pn * d * d * d;
            }
            row.clear();
            row.push(index.to_string());
            for x in [sample.times[j], h, v, beta, 0.0] {
                row.push(num(x));
            }
            row.extend(p.iter().map(|&x| num(x)));
            row.push(num(sample.wstar[j]));
            row.push(num(sample.lambda_star[j]));
            self.writer.write_record(&row)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io("girsanov csv", e))
    }
}

/// One density matrix at one time, split into real and imaginary parts (row-major).
#[derive(Debug, Clone, Serialize)]
pub struct DensitySnapshot {
    pub time: f64,
    pub trace: f64,
    pub purity: f64,
    pub real: Vec<Vec<f64>>,
    pub imag: Vec<Vec<f64>>,
}

impl DensitySnapshot {
    pub fn new(time: f64, rho: &DensityMatrix) -> Self {
        let m = rho.matrix();
        let rows = |f: fn(&num_complex::Complex64) -> f64| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| f(&m[(i, j)])).collect())
                .collect()
        };
        Self {
            time,
            trace: rho.trace(),
            purity: rho.purity(),
            real: rows(|z| z.re),
            imag: rows(|z| z.im),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DensitySeries {
    pub source: String,
    pub snapshots: Vec<DensitySnapshot>,
}

/// Header and rows for a small table (per-time summaries and the like).
pub fn write_table(
    path: &Path,
    provenance: &str,
    header: &[&str],
    rows: &[Vec<f64>],
) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|&x| num(x)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Run provenance. Deliberately free of timestamps and host details.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub fixture: String,
    pub fixture_hash: String,
    /// Hash of the effective configuration, excluding `workers` and output paths.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub rng: String,
}

impl Manifest {
    /// One-line summary for CSV comment headers.
    pub fn provenance(&self) -> String {
        format!(
            "{} {} config_hash={} seed={}",
            self.tool, self.version, self.config_hash, self.seed
        )
    }
}

impl Manifest {
    pub fn new(
        command: &str,
        fixture: &str,
        fixture_hash: &str,
        config: serde_json::Value,
        seed: u64,
    ) -> Self {
        Self {
            tool: "collapse".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            fixture: fixture.into(),
            fixture_hash: fixture_hash.into(),
            config_hash: hash_json(&config),
            config,
            seed,
            rng: "ChaCha8, per-trajectory seeds by SplitMix64".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub manifest: Manifest,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    /// Mode-specific run summary.
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl Report {
    pub fn new(manifest: Manifest, checks: Vec<CheckResult>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self {
            manifest,
            passed,
            checks,
            summary: serde_json::Value::Null,
        }
    }

    pub fn with_summary(mut self, summary: serde_json::Value) -> Self {
        self.summary = summary;
        self
    }
}
