use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use svito::factor::{select_rank, FactorState, RankOptions};
use svito::harness::{render_report, run_oos_study, run_sim_study, OosPanel, StudyConfig, StudyStatus};
use svito::io;
use svito::linalg::Matrix;
use svito::portfolio::{min_variance, oos_risk, PortfolioProblem};
use svito::predict::{default_omega, poet_idio, sv_poet, PoetConfig};
use svito::realized::{prvm, psd_project, DEFAULT_WINDOW_THETA};
use svito::sim::{simulate, SimConfig};
use svito::svmodel::{lse_fit, qmle_fit, residuals, FitReportJson, QmleOptions, SVParams, SVParamsJson};
use svito::{Error, Result};

#[derive(Parser)]
#[command(name = "svito", version, about = "Factor SV-Itô volatility modelling for high-frequency panels")]
struct Cli {
    /// JSON configuration (simulation config for `simulate`, study config for the studies).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Use the full-size designs instead of the desk-scale defaults.
    #[arg(long, global = true)]
    paper_scale: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Qmle,
    Lse,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a tick panel and its latent volatilities.
    Simulate,
    /// Daily realized volatility matrices from a tick CSV.
    Realized {
        #[arg(long)]
        ticks: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WINDOW_THETA)]
        window_theta: f64,
        /// Keep the raw (possibly indefinite) estimates.
        #[arg(long)]
        raw: bool,
    },
    /// Loading and factor volatilities from daily matrices.
    Factor {
        #[arg(long)]
        gammas: PathBuf,
        /// Factor rank; selected from the data when omitted.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Estimate the SV-Itô parameters from factor volatilities.
    Fit {
        #[arg(long)]
        psi: PathBuf,
        #[arg(long, default_value_t = 1)]
        q: usize,
        #[arg(long, value_enum, default_value = "qmle")]
        method: Method,
        /// Starting point for QMLE (defaults to the LSE fit).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// One-day-ahead volatility matrix prediction.
    Predict {
        #[arg(long)]
        gammas: PathBuf,
        /// Fit report or parameter JSON.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        omega: Option<f64>,
        /// PSD-project the prediction.
        #[arg(long)]
        project: bool,
    },
    /// Minimum-variance portfolio under a gross exposure constraint.
    Portfolio {
        #[arg(long)]
        sigma: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        c0: f64,
        /// Realized matrix for out-of-sample risk.
        #[arg(long)]
        realized: Option<PathBuf>,
    },
    /// Monte Carlo simulation study.
    StudySim {
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Rolling out-of-sample study.
    StudyOos {
        /// Tick CSV; a simulated panel is used when omitted.
        #[arg(long)]
        ticks: Option<PathBuf>,
        #[arg(long)]
        refit_every: Option<usize>,
        #[arg(long)]
        window_theta: Option<f64>,
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Markdown tables from study outputs.
    Report {
        /// Directory with result CSVs (defaults to --out).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn day_name(prefix: &str, k: usize) -> String {
    format!("{prefix}_{k:05}")
}

fn write_series(dir: &Path, kind: &str, prefix: &str, ms: &[Matrix], meta: serde_json::Value) -> Result<()> {
    let items: Vec<(String, &Matrix)> = ms.iter().enumerate().map(|(i, m)| (day_name(prefix, i + 1), m)).collect();
    io::write_matrix_dir(dir, kind, &items, meta)
}

fn read_series(dir: &Path) -> Result<(io::MatrixManifest, Vec<Matrix>)> {
    let (manifest, items) = io::read_matrix_dir(dir)?;
    Ok((manifest, items.into_iter().map(|(_, m)| m).collect()))
}

fn read_params(path: &Path) -> Result<SVParams> {
    let v: serde_json::Value = io::read_json(path)?;
    let j: SVParamsJson = match v.get("theta") {
        Some(t) => serde_json::from_value(t.clone())?,
        None => serde_json::from_value(v)?,
    };
    j.try_into()
}

fn load_study(cli: &Cli, oos: bool) -> Result<StudyConfig> {
    let seed = cli.seed.unwrap_or(20240101);
    let mut cfg = match (&cli.config, oos, cli.paper_scale) {
        (Some(p), _, _) => io::read_json(p)?,
        (None, false, false) => StudyConfig::desk_sim(seed),
        (None, false, true) => StudyConfig::paper_sim(seed),
        (None, true, false) => StudyConfig::desk_oos(seed),
        (None, true, true) => StudyConfig::paper_oos(seed),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.sim.seed = s;
    }
    cfg.output_dir = cli.out.clone();
    Ok(cfg)
}

fn report_status(status: StudyStatus) {
    match status {
        StudyStatus::Complete(t) => println!("complete: {} result rows, {} failed", t.rows.len(), t.failures.len()),
        StudyStatus::Interrupted { completed, remaining } => println!("interrupted: {completed} done, {remaining} remaining"),
    }
}

#[derive(Serialize)]
struct PortfolioSummary {
    c0: f64,
    objective: f64,
    gross_exposure: f64,
    feasible: bool,
    kkt_residual: f64,
    iterations: usize,
    oos_risk: Option<f64>,
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    std::fs::create_dir_all(out)?;
    match &cli.command {
        Command::Simulate => {
            let mut cfg: SimConfig = match &cli.config {
                Some(p) => io::read_json(p)?,
                None if cli.paper_scale => SimConfig::paper_design(200, 500, 390, 0),
                None => SimConfig::paper_design(100, 250, 390, 0),
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let sim = simulate(&cfg)?;
            io::write_ticks_csv(&out.join("ticks.csv"), &sim.ticks)?;
            let meta = serde_json::json!({"seed": cfg.seed, "m": cfg.m});
            write_series(&out.join("true_gamma"), "integrated_volatility", "gamma", &sim.true_gamma, meta.clone())?;
            write_series(&out.join("true_psi"), "factor_volatility", "psi", &sim.true_psi, meta)?;
            io::write_matrix_csv(&out.join("loading.csv"), &sim.loading)?;
            io::write_matrix_csv(&out.join("idio.csv"), &sim.idio)?;
            io::write_json(&out.join("params.json"), &SVParamsJson::from(&sim.theta))?;
            io::write_json(&out.join("sim_config.json"), &cfg)?;
            println!("simulated {} days of {} assets ({} clips)", cfg.n, cfg.p, sim.clips);
        }
        Command::Realized { ticks, window_theta, raw } => {
            let panel = io::read_ticks_csv(ticks)?;
            let mut gammas = Vec::with_capacity(panel.n_days());
            let mut projected = Vec::with_capacity(panel.n_days());
            for k in 1..=panel.n_days() {
                let g = prvm(&panel, k, *window_theta)?;
                let g = if *raw { g } else { psd_project(&g) };
                projected.push(g.psd_projected);
                gammas.push(g.matrix);
            }
            let ticks_per_day = panel.days.iter().map(|d| d.asset(0).times.len()).sum::<usize>() / panel.n_days().max(1);
            let meta = serde_json::json!({"window_theta": window_theta, "m": ticks_per_day, "psd_projected": projected});
            write_series(&out.join("gammas"), "integrated_volatility", "gamma", &gammas, meta)?;
            println!("wrote {} daily matrices to {}", gammas.len(), out.join("gammas").display());
        }
        Command::Factor { gammas, rank } => {
            let (manifest, gs) = read_series(gammas)?;
            let r = match rank {
                Some(r) => *r,
                None => {
                    let m = manifest.meta.get("m").and_then(|v| v.as_u64()).ok_or_else(|| {
                        Error::InvalidConfig("rank selection needs \"m\" in the manifest meta; pass --rank".into())
                    })? as usize;
                    let sel = select_rank(&gs, m, &RankOptions::default())?;
                    io::write_json(&out.join("rank_selection.json"), &sel)?;
                    if sel.flagged {
                        log::warn!("selected rank {} is below 1; using 1", sel.rank);
                    }
                    sel.rank.max(1)
                }
            };
            let state = FactorState::estimate(&gs, r)?;
            io::write_matrix_csv(&out.join("loading.csv"), &state.loading)?;
            write_series(&out.join("psi"), "factor_volatility", "psi", &state.psi_hat, serde_json::json!({"r": r}))?;
            println!("rank {r}; leading eigenvalues {:?}", state.eigvals);
        }
        Command::Fit { psi, q, method, init } => {
            let (_, ps) = read_series(psi)?;
            let lse = lse_fit(&ps, *q)?;
            let fit = match method {
                Method::Lse => lse,
                Method::Qmle => {
                    let start = match init {
                        Some(p) => read_params(p)?,
                        None => lse.theta.clone(),
                    };
                    qmle_fit(&ps, &start, &QmleOptions::default())?
                }
            };
            io::write_json(&out.join("fit_report.json"), &FitReportJson::from(&fit))?;
            let res = residuals(&fit.theta, &ps)?;
            let d0 = fit.theta.d0();
            let rm = Matrix::from_fn(res.len(), d0, |i, j| res[i][j]);
            io::write_matrix_csv(&out.join("residuals.csv"), &rm)?;
            println!("objective {} after {} iterations (converged: {})", fit.objective, fit.iterations, fit.converged);
        }
        Command::Predict { gammas, params, omega, project } => {
            let (manifest, gs) = read_series(gammas)?;
            let theta = read_params(params)?;
            let state = FactorState::estimate(&gs, theta.r)?;
            let p = state.p();
            let omega = match omega {
                Some(w) => *w,
                None => {
                    let m = manifest.meta.get("m").and_then(|v| v.as_u64()).ok_or_else(|| {
                        Error::InvalidConfig("default threshold needs \"m\" in the manifest meta; pass --omega".into())
                    })? as usize;
                    default_omega(p, gs.len(), m)
                }
            };
            let idio = poet_idio(&svito::factor::mean_matrix(&gs), &PoetConfig::adaptive(theta.r, omega))?;
            let pred = sv_poet(&state, &theta, &idio, *project)?;
            io::write_matrix_csv(&out.join("prediction.csv"), &pred.total)?;
            io::write_json(
                &out.join("prediction.json"),
                &serde_json::json!({"day": pred.day, "omega": omega, "min_eigenvalue": pred.min_eigenvalue, "projected": pred.projected}),
            )?;
            println!("predicted day {} (min eigenvalue {})", pred.day, pred.min_eigenvalue);
        }
        Command::Portfolio { sigma, c0, realized } => {
            let s = io::read_matrix_csv(sigma)?;
            let res = min_variance(&PortfolioProblem::from_prediction(&s, *c0))?;
            let risk = match realized {
                Some(p) => Some(oos_risk(&res.weights, &io::read_matrix_csv(p)?)?),
                None => None,
            };
            io::write_matrix_csv(
                &out.join("weights.csv"),
                &Matrix::from_column_slice(res.weights.len(), 1, res.weights.as_slice()),
            )?;
            let summary = PortfolioSummary {
                c0: *c0,
                objective: res.objective,
                gross_exposure: res.gross_exposure,
                feasible: res.feasible,
                kkt_residual: res.kkt_residual,
                iterations: res.iterations,
                oos_risk: risk,
            };
            io::write_json(&out.join("portfolio.json"), &summary)?;
            println!("variance {} with gross exposure {}", res.objective, res.gross_exposure);
        }
        Command::StudySim { stop_after } => {
            let cfg = load_study(cli, false)?;
            report_status(run_sim_study(&cfg, *stop_after)?);
        }
        Command::StudyOos { ticks, refit_every, window_theta, stop_after } => {
            let mut cfg = load_study(cli, true)?;
            if let Some(k) = refit_every {
                cfg.refit_every = *k;
            }
            if let Some(t) = window_theta {
                cfg.window_theta = *t;
            }
            let panel = match ticks {
                Some(p) => OosPanel::Ticks(p.clone()),
                None => OosPanel::Simulated,
            };
            report_status(run_oos_study(&cfg, &panel, *stop_after)?);
        }
        Command::Report { dir } => {
            let dir = dir.as_ref().unwrap_or(out);
            print!("{}", render_report(dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
