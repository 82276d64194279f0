use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::realized::DEFAULT_WINDOW_THETA;
use crate::sim::SimConfig;

pub const DEFAULT_C0_GRID: [f64; 5] = [1.0, 1.25, 1.5, 1.75, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub n: usize,
    pub m: usize,
    pub p: usize,
}

/// POET threshold: the default formula or an explicit ϖ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Named(DefaultThreshold),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefaultThreshold {
    Default,
}

impl Threshold {
    pub const DEFAULT: Threshold = Threshold::Named(DefaultThreshold::Default);

    pub fn label(&self) -> String {
        match self {
            Threshold::Value(v) => format!("omega={v}"),
            Threshold::Named(_) => "omega=default".into(),
        }
    }
}

/// How the factor rank used for estimation is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMode {
    /// The simulation's true r (or the panel's declared r).
    Known,
    /// The data-driven rank selection.
    Select,
}

fn default_estimators() -> Vec<String> {
    vec!["qmle".into(), "lse".into()]
}
fn default_baselines() -> Vec<String> {
    vec!["poet-prev".into(), "prvm-prev".into()]
}
fn default_thresholds() -> Vec<Threshold> {
    vec![Threshold::DEFAULT]
}
fn default_c0() -> Vec<f64> {
    DEFAULT_C0_GRID.to_vec()
}
fn default_window() -> f64 {
    DEFAULT_WINDOW_THETA
}
fn default_refit() -> usize {
    1
}
fn default_rank_mode() -> RankMode {
    RankMode::Known
}
fn default_out() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Template; p, n, m and seed are overridden per grid cell and replication.
    pub sim: SimConfig,
    pub grid: Vec<GridCell>,
    pub replications: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    #[serde(default = "default_thresholds")]
    pub thresholds: Vec<Threshold>,
    #[serde(default = "default_c0")]
    pub portfolio_c0: Vec<f64>,
    /// Out-of-sample study: days 1…h are the initial window.
    #[serde(default)]
    pub forecast_origins: Vec<usize>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default = "default_window")]
    pub window_theta: f64,
    #[serde(default = "default_rank_mode")]
    pub rank: RankMode,
    #[serde(default = "default_refit")]
    pub refit_every: usize,
    /// PSD-project SV-POET predictions before computing error metrics.
    #[serde(default)]
    pub project_prediction: bool,
}

impl StudyConfig {
    /// Desk-scale simulation study: p = 100, n ∈ {125, 250},
    /// m ∈ {390, 780}, 50 replications.
    pub fn desk_sim(seed: u64) -> Self {
        let grid = [(125, 390), (250, 390), (125, 780), (250, 780)].iter().map(|&(n, m)| GridCell { n, m, p: 100 }).collect();
        Self::with_grid(seed, grid, 50)
    }

    /// Full simulation design: p = 200, n ∈ {125, 250, 500},
    /// m ∈ {390, 780, 2340}, 500 replications.
    pub fn paper_sim(seed: u64) -> Self {
        let mut grid = Vec::new();
        for m in [390, 780, 2340] {
            for n in [125, 250, 500] {
                grid.push(GridCell { n, m, p: 200 });
            }
        }
        Self::with_grid(seed, grid, 500)
    }

    /// Desk-scale out-of-sample study on one synthetic panel.
    pub fn desk_oos(seed: u64) -> Self {
        let mut c = Self::with_grid(seed, vec![GridCell { n: 250, m: 390, p: 100 }], 1);
        c.forecast_origins = vec![200];
        c
    }

    pub fn paper_oos(seed: u64) -> Self {
        let mut c = Self::with_grid(seed, vec![GridCell { n: 500, m: 390, p: 200 }], 1);
        c.forecast_origins = vec![250];
        c
    }

    fn with_grid(seed: u64, grid: Vec<GridCell>, replications: usize) -> Self {
        let first = grid[0];
        Self {
            sim: SimConfig::paper_design(first.p, first.n, first.m, seed),
            grid,
            replications,
            estimators: default_estimators(),
            baselines: default_baselines(),
            thresholds: default_thresholds(),
            portfolio_c0: default_c0(),
            forecast_origins: vec![],
            output_dir: default_out(),
            seed,
            window_theta: DEFAULT_WINDOW_THETA,
            rank: RankMode::Known,
            refit_every: 1,
            project_prediction: false,
        }
    }

    /// The simulation config of grid cell `i`.
    pub fn cell_sim(&self, i: usize) -> SimConfig {
        let c = self.grid[i];
        let mut s = self.sim.clone();
        s.p = c.p;
        s.n = c.n;
        s.m = c.m;
        s
    }

    /// The part of the config that determines results (output location
    /// excluded), used for the provenance hash.
    pub fn hash_view(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("output_dir");
        }
        v
    }

    /// Checks invariants, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: String, msg: &str| Err(Error::InvalidConfig(format!("{field}: {msg}")));
        if self.replications < 1 {
            return bad("replications".into(), "must be >= 1");
        }
        if self.grid.is_empty() {
            return bad("grid".into(), "must contain at least one cell");
        }
        for (i, _) in self.grid.iter().enumerate() {
            if let Err(e) = self.cell_sim(i).validate() {
                return bad(format!("grid[{i}]"), &e.to_string());
            }
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if e != "qmle" && e != "lse" {
                return bad(format!("estimators[{i}]"), "must be \"qmle\" or \"lse\"");
            }
        }
        for (i, b) in self.baselines.iter().enumerate() {
            if b != "poet-prev" && b != "prvm-prev" {
                return bad(format!("baselines[{i}]"), "must be \"poet-prev\" or \"prvm-prev\"");
            }
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if let Threshold::Value(v) = t {
                if !(*v >= 0.0 && v.is_finite()) {
                    return bad(format!("thresholds[{i}]"), "must be a nonnegative number or \"default\"");
                }
            }
        }
        for (i, c) in self.portfolio_c0.iter().enumerate() {
            if !(1.0..=2.0).contains(c) {
                return bad(format!("portfolio_c0[{i}]"), "must lie in [1, 2]");
            }
        }
        for (i, &h) in self.forecast_origins.iter().enumerate() {
            for cell in &self.grid {
                if h < self.sim.q + 2 || h >= cell.n {
                    return bad(format!("forecast_origins[{i}]"), &format!("must satisfy q+2 <= h < n (n = {})", cell.n));
                }
            }
        }
        if !(self.window_theta > 0.0) {
            return bad("window_theta".into(), "must be positive");
        }
        if self.refit_every < 1 {
            return bad("refit_every".into(), "must be >= 1");
        }
        if self.estimators.is_empty() {
            return bad("estimators".into(), "must name at least one estimator");
        }
        Ok(())
    }
}
