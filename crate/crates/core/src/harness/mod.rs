//! Experiment protocols: the Monte Carlo simulation study and the rolling
//! out-of-sample study, with seeded, resumable, checkpointed runs.

mod config;
mod report;
mod study_oos;
mod study_sim;

pub use config::{GridCell, RankMode, StudyConfig, Threshold, DEFAULT_C0_GRID};
pub use report::render_report;
pub use study_oos::{run_oos_study, OosPanel};
pub use study_sim::{run_sim_study, MetricValue, RepRecord};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io;

pub const VERSION: &str = concat!("svito-", env!("CARGO_PKG_VERSION"));
/// Share of failed replications above which a study aborts.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

/// Generator for replication `rep` of grid cell `cell`.
pub fn replication_rng(master: u64, cell: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((cell as u64) << 32) | rep as u64);
    rng
}

/// First 16 hex digits of the SHA-256 of `value`'s JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

/// Mean and standard error (sd/√n) of a sample; SE is 0 for n < 2.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One aggregated row of a result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_hash: String,
    pub version: String,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub method: String,
    pub quantity: String,
    pub norm: String,
    pub mean: f64,
    pub se: f64,
    pub replications: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    /// (cell index, replication, reason) of failed replications.
    pub failures: Vec<(usize, usize, String)>,
}

impl ResultTable {
    pub fn get(&self, cell: (usize, usize, usize), method: &str, quantity: &str, norm: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| (r.n, r.m, r.p) == cell && r.method == method && r.quantity == quantity && r.norm == norm)
    }
}

/// Outcome of a study run that may have been stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum StudyStatus {
    Complete(ResultTable),
    /// Stopped after the requested number of new replications.
    Interrupted {
        completed: usize,
        remaining: usize,
    },
}

impl StudyStatus {
    pub fn table(self) -> Option<ResultTable> {
        match self {
            StudyStatus::Complete(t) => Some(t),
            StudyStatus::Interrupted { .. } => None,
        }
    }
}

/// Writes rows as CSV with shortest round-trip float formatting.
pub fn write_rows_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "config_hash",
        "version",
        "n",
        "m",
        "p",
        "method",
        "quantity",
        "norm",
        "mean",
        "se",
        "replications",
        "failed",
    ])?;
    for r in rows {
        w.write_record([
            r.config_hash.clone(),
            r.version.clone(),
            r.n.to_string(),
            r.m.to_string(),
            r.p.to_string(),
            r.method.clone(),
            r.quantity.clone(),
            r.norm.clone(),
            io::fmt_f64(r.mean),
            io::fmt_f64(r.se),
            r.replications.to_string(),
            r.failed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        out.push(rec.map_err(|e: csv::Error| Error::Parse {
            location: format!("{}:{}", path.display(), i + 2),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Writes `value` as JSON through a temporary file and a rename, so a
/// killed run never leaves a truncated checkpoint.
pub(crate) fn write_checkpoint<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    io::write_json(&tmp, value)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}
