use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RankMode, StudyConfig};
use super::study_sim::MetricValue;
use super::{
    checkpoint_dir, config_hash, mean_se, replication_rng, write_checkpoint, write_rows_csv, ResultRow, ResultTable, StudyStatus,
    MAX_FAILURE_SHARE, VERSION,
};
use crate::error::{Error, Result};
use crate::factor::{estimate_factor_vols, estimate_loading, select_rank_from_eigenvalues, FactorState, RankOptions};
use crate::io;
use crate::linalg::{self, Matrix};
use crate::portfolio::{min_variance, oos_risk, PortfolioProblem};
use crate::predict::{default_omega, poet_estimate, poet_idio_with_eigen, single_day_omega, sv_poet, ErrorReference, PoetConfig};
use crate::realized::{prvm_day, psd_project_with_eigen, DayTicks};
use crate::sim::Simulator;
use crate::svmodel::{lse_fit, qmle_fit, QmleOptions, SVParams};

/// Source of the daily tick data for the out-of-sample study.
#[derive(Debug, Clone, PartialEq)]
pub enum OosPanel {
    /// One synthetic panel from the study's first grid cell.
    Simulated,
    /// A tick CSV file.
    Ticks(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OosRecord {
    config_hash: String,
    version: String,
    origin: usize,
    /// Day being predicted (1-based).
    day: usize,
    error: Option<String>,
    metrics: Vec<MetricValue>,
}

/// Streams PSD-projected daily matrices and their leading eigenvalues.
struct DailySource {
    inner: Source,
    window_theta: f64,
    r_max: usize,
    day: usize,
}

enum Source {
    Sim(Box<Simulator>),
    Panel(std::vec::IntoIter<DayTicks>),
}

impl DailySource {
    fn next(&mut self) -> Result<(Matrix, Vec<f64>)> {
        self.day += 1;
        let ticks = match &mut self.inner {
            Source::Sim(s) => s.next_day()?.ticks,
            Source::Panel(it) => it.next().ok_or_else(|| Error::InvalidPanel("panel exhausted".into()))?,
        };
        let raw = prvm_day(&ticks, self.day, self.window_theta)?;
        let (proj, e) = psd_project_with_eigen(&raw);
        Ok((proj.matrix, e.values.into_iter().take(self.r_max).collect()))
    }
}

/// Fitted state held fixed between refits.
struct Fit {
    r: usize,
    loading: Matrix,
    thetas: Vec<(String, SVParams)>,
    idio: Matrix,
}

fn refit(cfg: &StudyConfig, gammas: &[Matrix], sum: &Matrix, sum_sq: &Matrix, eigs: &[Vec<f64>], m: usize) -> Result<Fit> {
    let k = gammas.len();
    let p = sum.nrows();
    let r = match cfg.rank {
        RankMode::Known => cfg.sim.r,
        RankMode::Select => select_rank_from_eigenvalues(eigs, p, m, &RankOptions::default())?.rank.max(1),
    };
    // (kp)⁻¹ [Σ Γ̂² − k Γ̄²]
    let mean = sum / k as f64;
    let mut s = (sum_sq - (&mean * &mean) * k as f64) / (k * p) as f64;
    linalg::symmetrize(&mut s);
    let (loading, _) = estimate_loading(&s, r)?;
    let psi_hat = estimate_factor_vols(&loading, gammas)?;
    let lse = lse_fit(&psi_hat, cfg.sim.q)?;
    let mut thetas = Vec::new();
    for est in &cfg.estimators {
        let theta = match est.as_str() {
            "lse" => lse.theta.clone(),
            _ => qmle_fit(&psi_hat, &lse.theta, &QmleOptions::default())?.theta,
        };
        thetas.push((est.clone(), theta));
    }
    let omega = match cfg.thresholds.first() {
        Some(super::Threshold::Value(v)) => *v,
        _ => default_omega(p, k, m),
    };
    let idio = poet_idio_with_eigen(&mean, &linalg::sym_eigen_desc(&mean), &PoetConfig::adaptive(r, omega))?;
    Ok(Fit { r, loading, thetas, idio })
}

fn forecast_metrics(cfg: &StudyConfig, fit: &Fit, gammas: &[Matrix], target: &Matrix, m: usize) -> Result<Vec<MetricValue>> {
    let p = target.nrows();
    let psi_hat = estimate_factor_vols(&fit.loading, &gammas[gammas.len() - cfg.sim.q..])?;
    let state = FactorState { r: fit.r, loading: fit.loading.clone(), psi_hat, s_matrix: Matrix::zeros(0, 0), eigvals: vec![] };
    let mut preds: Vec<(String, Matrix)> = Vec::new();
    for (name, theta) in &fit.thetas {
        preds.push((format!("sv-poet-{name}"), sv_poet(&state, theta, &fit.idio, cfg.project_prediction)?.total));
    }
    let last = &gammas[gammas.len() - 1];
    for b in &cfg.baselines {
        let est = match b.as_str() {
            "poet-prev" => poet_estimate(last, &PoetConfig::adaptive(fit.r, single_day_omega(p, m)))?,
            _ => last.clone(),
        };
        preds.push((b.clone(), est));
    }
    let reference = ErrorReference::new(target);
    let mut out = Vec::new();
    let mut push = |method: &str, quantity: &str, norm: String, value: f64| {
        out.push(MetricValue { method: method.into(), quantity: quantity.into(), norm, value })
    };
    for (method, pred) in &preds {
        let e = reference.errors(pred)?;
        push(method, "mpe", "relative_spectral".into(), e.relative_spectral);
        push(method, "mpe", "relative_frobenius".into(), e.relative_frobenius_norm);
        push(method, "mpe", "relative_max".into(), e.relative_max);
        for &c0 in &cfg.portfolio_c0 {
            let res = min_variance(&PortfolioProblem::from_prediction(pred, c0))?;
            push(method, "risk", format!("c0={c0}"), oos_risk(&res.weights, target)?);
        }
    }
    Ok(out)
}

fn checkpoint_path(dir: &Path, origin: usize, day: usize) -> PathBuf {
    dir.join(format!("oos_h{origin:05}_day{day:05}.json"))
}

fn load_checkpoint(path: &Path, hash: &str) -> Option<OosRecord> {
    let rec: OosRecord = io::read_json(path).ok()?;
    (rec.config_hash == hash).then_some(rec)
}

/// Rolling one-day-ahead forecasts over an expanding window, starting at
/// each of `config.forecast_origins`. With `stop_after`, at most that many
/// new forecast days are evaluated before returning
/// [`StudyStatus::Interrupted`].
pub fn run_oos_study(config: &StudyConfig, panel: &OosPanel, stop_after: Option<usize>) -> Result<StudyStatus> {
    config.validate()?;
    if config.forecast_origins.is_empty() {
        return Err(Error::InvalidConfig("forecast_origins: must name at least one origin".into()));
    }
    let mut hash_input = config.hash_view();
    if let OosPanel::Ticks(path) = panel {
        hash_input["panel"] = serde_json::Value::String(path.display().to_string());
    }
    let hash = config_hash(&hash_input)?;
    let out = &config.output_dir;
    let ck = checkpoint_dir(out);
    std::fs::create_dir_all(&ck)?;
    io::write_json(&out.join("study_config.json"), config)?;

    let (source, n, m, p) = match panel {
        OosPanel::Simulated => {
            let sim_cfg = config.cell_sim(0);
            let sim = Simulator::with_rng(&sim_cfg, replication_rng(config.seed, 0, 0))?;
            (Source::Sim(Box::new(sim)), sim_cfg.n, sim_cfg.m, sim_cfg.p)
        }
        OosPanel::Ticks(path) => {
            let panel = io::read_ticks_csv(path)?;
            let (n, p) = (panel.n_days(), panel.p);
            let ticks_per_day = panel.days.iter().map(|d| d.asset(0).times.len()).sum::<usize>() / n.max(1);
            (Source::Panel(panel.days.into_iter()), n, ticks_per_day.max(2), p)
        }
    };
    for &h in &config.forecast_origins {
        if h < config.sim.q + 2 || h >= n {
            return Err(Error::InvalidConfig(format!("forecast_origins: {h} must satisfy q+2 <= h < n = {n}")));
        }
    }
    let mut src =
        DailySource { inner: source, window_theta: config.window_theta, r_max: RankOptions::default().r_max_for(p), day: 0 };
    let first_origin = *config.forecast_origins.iter().min().expect("nonempty");
    let total: usize = config.forecast_origins.iter().map(|&h| n - h).sum();
    let mut budget = stop_after.unwrap_or(usize::MAX);
    let mut done_now = 0;

    let mut gammas: Vec<Matrix> = Vec::with_capacity(n);
    let mut eigs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sum = Matrix::zeros(p, p);
    let mut sum_sq = Matrix::zeros(p, p);
    let mut fits: HashMap<usize, Fit> = HashMap::new();
    for k in 1..=n {
        let (g, e) = src.next()?;
        if k > first_origin {
            for &h in &config.forecast_origins {
                if k <= h {
                    continue;
                }
                let path = checkpoint_path(&ck, h, k);
                if load_checkpoint(&path, &hash).is_some() {
                    continue;
                }
                if budget == 0 {
                    continue;
                }
                let history = k - 1;
                let needs_refit = (history - h) % config.refit_every == 0;
                let result = (|| -> Result<Vec<MetricValue>> {
                    if needs_refit || !fits.contains_key(&h) {
                        // between refits a resumed run rebuilds the state
                        // from the most recent refit day
                        let refit_day = h + (history - h) / config.refit_every * config.refit_every;
                        let (s, sq) =
                            if refit_day == history { (sum.clone(), sum_sq.clone()) } else { prefix_sums(&gammas[..refit_day]) };
                        fits.insert(h, refit(config, &gammas[..refit_day], &s, &sq, &eigs[..refit_day], m)?);
                    }
                    forecast_metrics(config, &fits[&h], &gammas, &g, m)
                })();
                let record = OosRecord {
                    config_hash: hash.clone(),
                    version: VERSION.into(),
                    origin: h,
                    day: k,
                    error: result.as_ref().err().map(|e| e.to_string()),
                    metrics: result.unwrap_or_default(),
                };
                if let Some(e) = &record.error {
                    log::warn!("forecast of day {k} from origin {h} failed: {e}");
                    fits.remove(&h);
                }
                write_checkpoint(&path, &record)?;
                budget -= 1;
                done_now += 1;
            }
        }
        let mut sq = Matrix::zeros(p, p);
        sq.gemm(1.0, &g, &g, 0.0);
        sum_sq += sq;
        sum += &g;
        gammas.push(g);
        eigs.push(e);
    }
    let mut records = Vec::with_capacity(total);
    let mut missing = 0;
    for &h in &config.forecast_origins {
        for k in h + 1..=n {
            match load_checkpoint(&checkpoint_path(&ck, h, k), &hash) {
                Some(r) => records.push(r),
                None => missing += 1,
            }
        }
    }
    if missing > 0 {
        log::info!("out-of-sample study interrupted after {done_now} new forecasts");
        return Ok(StudyStatus::Interrupted { completed: total - missing, remaining: missing });
    }
    let table = aggregate(config, &hash, &records, (n, m, p));
    write_outputs(out, &table, &records)?;
    let failed = table.failures.len();
    if failed as f64 > MAX_FAILURE_SHARE * total as f64 {
        return Err(Error::StudyAborted { failed, total });
    }
    Ok(StudyStatus::Complete(table))
}

fn prefix_sums(gammas: &[Matrix]) -> (Matrix, Matrix) {
    let p = gammas[0].nrows();
    let mut sum = Matrix::zeros(p, p);
    let mut sum_sq = Matrix::zeros(p, p);
    for g in gammas {
        sum += g;
        sum_sq.gemm(1.0, g, g, 1.0);
    }
    (sum, sum_sq)
}

fn aggregate(config: &StudyConfig, hash: &str, records: &[OosRecord], (n, m, p): (usize, usize, usize)) -> ResultTable {
    let mut table = ResultTable::default();
    let many = config.forecast_origins.len() > 1;
    for &h in &config.forecast_origins {
        let recs: Vec<&OosRecord> = records.iter().filter(|r| r.origin == h).collect();
        let failed = recs.iter().filter(|r| r.error.is_some()).count();
        for r in &recs {
            if let Some(e) = &r.error {
                table.failures.push((h, r.day, e.clone()));
            }
        }
        let mut order = Vec::new();
        let mut values: HashMap<(String, String, String), Vec<f64>> = HashMap::new();
        for r in recs.iter().filter(|r| r.error.is_none()) {
            for mv in &r.metrics {
                let key = (mv.method.clone(), mv.quantity.clone(), mv.norm.clone());
                values
                    .entry(key.clone())
                    .or_insert_with(|| {
                        order.push(key);
                        Vec::new()
                    })
                    .push(mv.value);
            }
        }
        for key in order {
            let v = &values[&key];
            let (mean, se) = mean_se(v);
            let method = if many { format!("{}@h{h}", key.0) } else { key.0 };
            table.rows.push(ResultRow {
                config_hash: hash.to_string(),
                version: VERSION.into(),
                n,
                m,
                p,
                method,
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

fn write_outputs(out: &Path, table: &ResultTable, records: &[OosRecord]) -> Result<()> {
    write_rows_csv(&out.join("oos_results.csv"), &table.rows)?;
    let pick = |q: &str| table.rows.iter().filter(|r| r.quantity == q).cloned().collect::<Vec<_>>();
    write_rows_csv(&out.join("oos_mpe.csv"), &pick("mpe"))?;
    write_rows_csv(&out.join("oos_risk.csv"), &pick("risk"))?;
    let mut w = csv::Writer::from_path(out.join("oos_daily.csv"))?;
    w.write_record(["origin", "day", "method", "quantity", "norm", "value"])?;
    for r in records {
        for mv in &r.metrics {
            w.write_record([
                r.origin.to_string(),
                r.day.to_string(),
                mv.method.clone(),
                mv.quantity.clone(),
                mv.norm.clone(),
                io::fmt_f64(mv.value),
            ])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join("failures.csv"))?;
    w.write_record(["origin", "day", "reason"])?;
    for (h, d, e) in &table.failures {
        w.write_record([h.to_string(), d.to_string(), e.clone()])?;
    }
    w.flush()?;
    Ok(())
}
