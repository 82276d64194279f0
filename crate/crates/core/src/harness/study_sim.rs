use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{RankMode, StudyConfig, Threshold};
use super::{
    checkpoint_dir, config_hash, mean_se, replication_rng, write_checkpoint, write_rows_csv, ResultRow, ResultTable, StudyStatus,
    MAX_FAILURE_SHARE, VERSION,
};
use crate::error::{Error, Result};
use crate::factor::{align_signs, mean_matrix, select_rank_from_eigenvalues, FactorState, RankOptions};
use crate::io;
use crate::linalg::{self, Matrix};
use crate::predict::{
    default_omega, poet_estimate, poet_idio_with_eigen, single_day_omega, sv_poet, ErrorReference, MatrixErrors, PoetConfig,
};
use crate::realized::{prvm_day, psd_project_with_eigen};
use crate::sim::{conditional_oracle_from, Simulator};
use crate::svmodel::{lse_fit, qmle_fit, QmleOptions, SVParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub method: String,
    pub quantity: String,
    pub norm: String,
    pub value: f64,
}

/// Checkpointed outcome of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub config_hash: String,
    pub version: String,
    pub cell: usize,
    pub rep: usize,
    pub error: Option<String>,
    pub selected_rank: Option<usize>,
    pub clips: usize,
    pub metrics: Vec<MetricValue>,
}

struct Metrics(Vec<MetricValue>);

impl Metrics {
    fn push(&mut self, method: &str, quantity: &str, norm: &str, value: f64) {
        self.0.push(MetricValue { method: method.into(), quantity: quantity.into(), norm: norm.into(), value });
    }

    fn push_errors(&mut self, method: &str, quantity: &str, e: &MatrixErrors) {
        self.push(method, quantity, "spectral", e.spectral);
        self.push(method, quantity, "frobenius", e.frobenius);
        self.push(method, quantity, "max", e.max);
        self.push(method, quantity, "relative_spectral", e.relative_spectral);
        self.push(method, quantity, "relative_frobenius_norm", e.relative_frobenius_norm);
        self.push(method, quantity, "relative_max", e.relative_max);
        if let Some(w) = e.relative_frobenius_weighted {
            self.push(method, quantity, "relative_frobenius", w);
        }
    }

    /// Spectral, Frobenius and max norms of β̂ − β for every block.
    fn push_beta(&mut self, method: &str, suffix: &str, est: &SVParams, truth: &SVParams) {
        let d = &est.beta0 - &truth.beta0;
        self.push(method, &format!("beta0{suffix}"), "spectral", d.norm());
        self.push(method, &format!("beta0{suffix}"), "frobenius", d.norm());
        self.push(method, &format!("beta0{suffix}"), "max", d.amax());
        for (j, (b, t)) in est.betas.iter().zip(&truth.betas).enumerate() {
            let d = b - t;
            let q = format!("beta{}{suffix}", j + 1);
            self.push(method, &q, "spectral", linalg::spectral_norm(&d));
            self.push(method, &q, "frobenius", d.norm());
            self.push(method, &q, "max", d.amax());
        }
    }
}

/// Nearest orthogonal matrix (polar factor).
fn procrustes(m: &Matrix) -> Matrix {
    let svd = m.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    u * vt
}

fn threshold_value(t: &Threshold, p: usize, n: usize, m: usize) -> f64 {
    match t {
        Threshold::Value(v) => *v,
        Threshold::Named(_) => default_omega(p, n, m),
    }
}

fn method_label(base: &str, t: &Threshold, many: bool) -> String {
    if many {
        format!("{base}[{}]", t.label())
    } else {
        base.to_string()
    }
}

fn run_replication(cfg: &StudyConfig, cell: usize, rep: usize) -> Result<(Vec<MetricValue>, usize, usize)> {
    let sim_cfg = cfg.cell_sim(cell);
    let (p, n, m, q) = (sim_cfg.p, sim_cfg.n, sim_cfg.m, sim_cfg.q);
    let rank_opts = RankOptions::default();
    let r_max = rank_opts.r_max_for(p);
    let mut sim = Simulator::with_rng(&sim_cfg, replication_rng(cfg.seed, cell, rep))?;
    let mut gammas = Vec::with_capacity(n);
    let mut eigs = Vec::with_capacity(n);
    for k in 1..=n {
        let day = sim.next_day()?;
        let raw = prvm_day(&day.ticks, k, cfg.window_theta)?;
        let (proj, e) = psd_project_with_eigen(&raw);
        eigs.push(e.values.iter().take(r_max).copied().collect::<Vec<f64>>());
        gammas.push(proj.matrix);
    }
    let truth = sim.theta().clone();
    let history: Vec<Matrix> = sim.psi_history().iter().take(q).cloned().collect();
    let oracle = conditional_oracle_from(sim.loading(), sim.idio(), &history, &truth)?;
    let selection = select_rank_from_eigenvalues(&eigs, p, m, &rank_opts)?;
    let r = match cfg.rank {
        RankMode::Known => sim_cfg.r,
        RankMode::Select => selection.rank.max(1),
    };

    let mut out = Metrics(Vec::new());
    out.push("select", "rank", "selected", selection.rank as f64);
    out.push("select", "rank", "hit", (selection.rank == sim_cfg.r) as u8 as f64);

    let state = FactorState::estimate(&gammas, r)?;
    let lse = lse_fit(&state.psi_hat, q)?;
    let mut fits: Vec<(String, SVParams)> = Vec::new();
    for est in &cfg.estimators {
        match est.as_str() {
            "lse" => fits.push(("lse".into(), lse.theta.clone())),
            "qmle" => {
                let fit = qmle_fit(&state.psi_hat, &lse.theta, &QmleOptions::default())?;
                out.push("qmle", "fit", "converged", fit.converged as u8 as f64);
                fits.push(("qmle".into(), fit.theta));
            }
            other => return Err(Error::InvalidConfig(format!("unknown estimator {other}"))),
        }
    }

    if r == sim_cfg.r {
        let l = sim.loading();
        let cross = state.loading.transpose() * l / p as f64;
        let rotated = truth.change_basis(&procrustes(&cross))?;
        let signs = Matrix::from_diagonal(&cross.diagonal().map(|v| if v < 0.0 { -1.0 } else { 1.0 }));
        let sign_truth = truth.change_basis(&signs)?;
        for (name, theta) in &fits {
            out.push_beta(name, "", theta, &rotated);
            out.push_beta(name, "_sign", theta, &sign_truth);
        }
        let sp = (p as f64).sqrt();
        let aligned = align_signs(&state.loading, l);
        out.push("pca", "loading", "sign_aligned", ((aligned - l) / sp).norm());
        let proj_err = (&state.loading * state.loading.transpose() - l * l.transpose()) / p as f64;
        out.push("pca", "loading", "subspace", proj_err.norm());
    }

    let gamma_bar = mean_matrix(&gammas);
    let bar_eigen = linalg::sym_eigen_desc(&gamma_bar);
    let reference = ErrorReference::new(&oracle);
    let many = cfg.thresholds.len() > 1;
    for t in &cfg.thresholds {
        let omega = threshold_value(t, p, n, m);
        let idio = poet_idio_with_eigen(&gamma_bar, &bar_eigen, &PoetConfig::adaptive(r, omega))?;
        if !many || *t == Threshold::DEFAULT {
            let raw = poet_idio_with_eigen(&gamma_bar, &bar_eigen, &PoetConfig::adaptive(r, 0.0))?;
            out.push("thresholded", "idio", "max", linalg::max_abs(&(&idio - sim.idio())));
            out.push("unthresholded", "idio", "max", linalg::max_abs(&(&raw - sim.idio())));
        }
        for (name, theta) in &fits {
            let pred = sv_poet(&state, theta, &idio, cfg.project_prediction)?;
            let label = method_label(&format!("sv-poet-{name}"), t, many);
            out.push_errors(&label, "prediction", &reference.errors(&pred.total)?);
        }
    }
    let last = &gammas[n - 1];
    for b in &cfg.baselines {
        let est = match b.as_str() {
            "poet-prev" => poet_estimate(last, &PoetConfig::adaptive(r, single_day_omega(p, m)))?,
            "prvm-prev" => last.clone(),
            other => return Err(Error::InvalidConfig(format!("unknown baseline {other}"))),
        };
        out.push_errors(b, "prediction", &reference.errors(&est)?);
    }
    Ok((out.0, selection.rank, sim.clips()))
}

fn checkpoint_path(dir: &Path, cell: usize, rep: usize) -> std::path::PathBuf {
    dir.join(format!("sim_cell{cell:03}_rep{rep:05}.json"))
}

fn load_checkpoint(path: &Path, hash: &str) -> Option<RepRecord> {
    let rec: RepRecord = io::read_json(path).ok()?;
    (rec.config_hash == hash).then_some(rec)
}

/// Runs the simulation study, resuming from any checkpoints in
/// `config.output_dir`. With `stop_after`, at most that many new
/// replications are run before returning [`StudyStatus::Interrupted`].
pub fn run_sim_study(config: &StudyConfig, stop_after: Option<usize>) -> Result<StudyStatus> {
    config.validate()?;
    let hash = config_hash(&config.hash_view())?;
    let out = &config.output_dir;
    let ck = checkpoint_dir(out);
    std::fs::create_dir_all(&ck)?;
    io::write_json(&out.join("study_config.json"), config)?;

    let tasks: Vec<(usize, usize)> = (0..config.grid.len()).flat_map(|c| (0..config.replications).map(move |r| (c, r))).collect();
    let pending: Vec<(usize, usize)> =
        tasks.iter().copied().filter(|&(c, r)| load_checkpoint(&checkpoint_path(&ck, c, r), &hash).is_none()).collect();
    let budget = stop_after.unwrap_or(pending.len()).min(pending.len());
    let batch = &pending[..budget];
    log::info!("simulation study: {} of {} replications pending, running {}", pending.len(), tasks.len(), batch.len());

    batch.par_iter().try_for_each(|&(cell, rep)| -> Result<()> {
        let record = match run_replication(config, cell, rep) {
            Ok((metrics, rank, clips)) => RepRecord {
                config_hash: hash.clone(),
                version: VERSION.into(),
                cell,
                rep,
                error: None,
                selected_rank: Some(rank),
                clips,
                metrics,
            },
            Err(e) => {
                log::warn!("replication {rep} of cell {cell} failed: {e}");
                RepRecord {
                    config_hash: hash.clone(),
                    version: VERSION.into(),
                    cell,
                    rep,
                    error: Some(e.to_string()),
                    selected_rank: None,
                    clips: 0,
                    metrics: vec![],
                }
            }
        };
        write_checkpoint(&checkpoint_path(&ck, cell, rep), &record)
    })?;
    if budget < pending.len() {
        return Ok(StudyStatus::Interrupted {
            completed: tasks.len() - pending.len() + budget,
            remaining: pending.len() - budget,
        });
    }

    // aggregate from the re-read checkpoints so resumed and uninterrupted
    // runs go through identical bytes
    let mut records = Vec::with_capacity(tasks.len());
    for &(c, r) in &tasks {
        let rec = load_checkpoint(&checkpoint_path(&ck, c, r), &hash)
            .ok_or_else(|| Error::InvalidPanel(format!("missing checkpoint for cell {c} replication {r}")))?;
        records.push(rec);
    }
    let table = aggregate(config, &hash, &records);
    write_outputs(out, &table)?;
    let failed = table.failures.len();
    if failed as f64 > MAX_FAILURE_SHARE * tasks.len() as f64 {
        return Err(Error::StudyAborted { failed, total: tasks.len() });
    }
    Ok(StudyStatus::Complete(table))
}

fn aggregate(config: &StudyConfig, hash: &str, records: &[RepRecord]) -> ResultTable {
    let mut table = ResultTable::default();
    for (ci, cell) in config.grid.iter().enumerate() {
        let recs: Vec<&RepRecord> = records.iter().filter(|r| r.cell == ci).collect();
        let failed = recs.iter().filter(|r| r.error.is_some()).count();
        for r in &recs {
            if let Some(e) = &r.error {
                table.failures.push((ci, r.rep, e.clone()));
            }
        }
        let mut order: Vec<(String, String, String)> = Vec::new();
        let mut values: HashMap<(String, String, String), Vec<f64>> = HashMap::new();
        for r in recs.iter().filter(|r| r.error.is_none()) {
            for mv in &r.metrics {
                let key = (mv.method.clone(), mv.quantity.clone(), mv.norm.clone());
                let slot = values.entry(key.clone()).or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                });
                slot.push(mv.value);
            }
        }
        for key in order {
            let v = &values[&key];
            let (mean, se) = mean_se(v);
            table.rows.push(ResultRow {
                config_hash: hash.to_string(),
                version: VERSION.into(),
                n: cell.n,
                m: cell.m,
                p: cell.p,
                method: key.0,
                quantity: key.1,
                norm: key.2,
                mean,
                se,
                replications: v.len(),
                failed,
            });
        }
    }
    table
}

fn write_outputs(out: &Path, table: &ResultTable) -> Result<()> {
    write_rows_csv(&out.join("sim_results.csv"), &table.rows)?;
    let pick = |f: &dyn Fn(&ResultRow) -> bool| table.rows.iter().filter(|r| f(r)).cloned().collect::<Vec<_>>();
    write_rows_csv(&out.join("table1_beta0.csv"), &pick(&|r| r.quantity == "beta0"))?;
    write_rows_csv(&out.join("table2_beta1.csv"), &pick(&|r| r.quantity == "beta1"))?;
    write_rows_csv(&out.join("table3_prediction.csv"), &pick(&|r| r.quantity == "prediction"))?;
    write_rows_csv(&out.join("rank_selection.csv"), &pick(&|r| r.quantity == "rank"))?;
    let mut w = csv::Writer::from_path(out.join("failures.csv"))?;
    w.write_record(["cell", "replication", "reason"])?;
    for (c, r, e) in &table.failures {
        w.write_record([c.to_string(), r.to_string(), e.clone()])?;
    }
    w.flush()?;
    Ok(())
}
