//! Synthetic high-frequency panels from the factor-based Itô process with
//! SV-Itô factor volatility, plus the exact model-implied quantities.

mod beta;
mod process;

pub use beta::{derive_beta, phi};
pub use process::{FactorDay, FactorDynamics, FactorState};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::io::rows;
use crate::linalg::{self, Matrix};
use crate::realized::{AssetTicks, DayTicks, TickPanel};
use crate::svmodel::{build_h, SVParams};
use process::{thinning_mask, PriceGenerator};

pub const DEFAULT_SUBSTEPS_PER_OBS: usize = 10;
pub const DEFAULT_NOISE_SD: f64 = 0.005;
pub const DEFAULT_BURNIN_DAYS: usize = 50;

/// Rule producing the p×r loading matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LoadingSpec {
    /// Trigonometric columns with LᵀL = pI (r = 3 only).
    Default,
    Explicit {
        #[serde(with = "rows")]
        matrix: Matrix,
    },
}

/// Rule producing the p×p idiosyncratic volatility Γˢ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IdioSpec {
    /// Γˢ_ij = 0.1 · 0.5^|i−j|.
    Default,
    /// Γˢ_ij = scale · decay^|i−j|.
    Banded { scale: f64, decay: f64 },
    Explicit {
        #[serde(with = "rows")]
        matrix: Matrix,
    },
}

fn default_substeps() -> usize {
    DEFAULT_SUBSTEPS_PER_OBS
}
fn default_noise() -> f64 {
    DEFAULT_NOISE_SD
}
fn default_burnin() -> usize {
    DEFAULT_BURNIN_DAYS
}
fn default_loading_spec() -> LoadingSpec {
    LoadingSpec::Default
}
fn default_idio_spec() -> IdioSpec {
    IdioSpec::Default
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub p: usize,
    pub r: usize,
    pub q: usize,
    pub n: usize,
    pub m: usize,
    #[serde(default = "default_substeps")]
    pub substeps_per_obs: usize,
    #[serde(with = "rows")]
    pub alpha0: Matrix,
    #[serde(with = "rows::list")]
    pub alpha: Vec<Matrix>,
    #[serde(with = "rows")]
    pub nu: Matrix,
    #[serde(default = "default_loading_spec")]
    pub loading_spec: LoadingSpec,
    #[serde(default = "default_idio_spec")]
    pub idio_spec: IdioSpec,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_burnin")]
    pub burnin_days: usize,
    /// Keep probability of per-asset tick thinning; `None` gives the
    /// synchronous grid.
    #[serde(default)]
    pub thinning: Option<f64>,
}

impl SimConfig {
    /// The three-factor design with α₀ = Diag(0.5, 0.4, 0.3), ν = 0.5 I and
    /// the non-diagonal α₁ used throughout the simulation study.
    pub fn paper_design(p: usize, n: usize, m: usize, seed: u64) -> Self {
        let alpha0 = Matrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.4, 0.3]));
        let alpha1 = Matrix::from_column_slice(3, 3, &[0.2, 0.0, 0.0, 0.5, 0.5, -0.2, 0.8, -0.5, 0.3]);
        Self {
            p,
            r: 3,
            q: 1,
            n,
            m,
            substeps_per_obs: DEFAULT_SUBSTEPS_PER_OBS,
            alpha0,
            alpha: vec![alpha1],
            nu: Matrix::identity(3, 3) * 0.5,
            loading_spec: LoadingSpec::Default,
            idio_spec: IdioSpec::Default,
            noise_sd: DEFAULT_NOISE_SD,
            drift: 0.0,
            seed,
            burnin_days: DEFAULT_BURNIN_DAYS,
            thinning: None,
        }
    }

    /// Checks the structural invariants and returns the implied θ.
    pub fn validate(&self) -> Result<SVParams> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.r < 1 || self.p < self.r {
            return bad(format!("need p >= r >= 1, got p={} r={}", self.p, self.r));
        }
        if self.q < 1 || self.alpha.len() != self.q {
            return bad(format!("need q >= 1 alpha matrices, got q={} and {} matrices", self.q, self.alpha.len()));
        }
        if self.n < self.q + 1 {
            return bad(format!("need n >= q+1, got n={} q={}", self.n, self.q));
        }
        if self.m < 2 {
            return bad(format!("need m >= 2, got {}", self.m));
        }
        if self.substeps_per_obs < 1 {
            return bad("substeps_per_obs must be >= 1".into());
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) || !self.drift.is_finite() {
            return bad("noise_sd must be finite and nonnegative, drift finite".into());
        }
        if let Some(keep) = self.thinning {
            if !(keep > 0.0 && keep <= 1.0) {
                return bad(format!("thinning keep probability must be in (0, 1], got {keep}"));
            }
        }
        let r = self.r;
        for (name, m) in [("alpha0", &self.alpha0), ("nu", &self.nu)].into_iter().chain(self.alpha.iter().map(|a| ("alpha", a))) {
            if m.nrows() != r || m.ncols() != r {
                return Err(mismatch(format!("{name}: {r}x{r}"), format!("{}x{}", m.nrows(), m.ncols())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
        }
        let radius = linalg::spectral_radius(&self.alpha[0]);
        if !(radius < 1.0) {
            return bad(format!("spectral radius of alpha_1 must be < 1, got {radius}"));
        }
        if self.alpha[0].determinant().abs() < 1e-12 {
            log::warn!("alpha_1 is (near) singular; the beta series remains well defined");
        }
        derive_beta(&self.alpha0, &self.alpha, &self.nu)
    }

    pub fn loading(&self) -> Result<Matrix> {
        match &self.loading_spec {
            LoadingSpec::Default => default_loading(self.p, self.r),
            LoadingSpec::Explicit { matrix } => {
                if matrix.nrows() != self.p || matrix.ncols() != self.r {
                    return Err(mismatch(
                        format!("{}x{} loading", self.p, self.r),
                        format!("{}x{}", matrix.nrows(), matrix.ncols()),
                    ));
                }
                Ok(matrix.clone())
            }
        }
    }

    pub fn idio(&self) -> Result<Matrix> {
        match &self.idio_spec {
            IdioSpec::Default => Ok(default_idio(self.p)),
            IdioSpec::Banded { scale, decay } => Ok(banded(self.p, *scale, *decay)),
            IdioSpec::Explicit { matrix } => {
                if matrix.nrows() != self.p || matrix.ncols() != self.p {
                    return Err(mismatch(format!("{0}x{0} idio", self.p), format!("{}x{}", matrix.nrows(), matrix.ncols())));
                }
                if linalg::max_asymmetry(matrix) > 1e-12 {
                    return Err(Error::NotSymmetric(linalg::max_asymmetry(matrix)));
                }
                Ok(matrix.clone())
            }
        }
    }

    pub fn dynamics(&self) -> FactorDynamics {
        FactorDynamics { alpha0: self.alpha0.clone(), alpha: self.alpha.clone(), nu: self.nu.clone() }
    }
}

/// Loading columns √2 cos(2iπ/p), √2 sin(2iπ/p) and 1, i = 1…p.
pub fn default_loading(p: usize, r: usize) -> Result<Matrix> {
    if r != 3 {
        return Err(Error::Unsupported(format!("default loading needs r = 3, got {r}; supply an explicit loading")));
    }
    if p < 3 {
        return Err(Error::InvalidConfig(format!("default loading needs p >= 3, got {p}")));
    }
    let sq2 = std::f64::consts::SQRT_2;
    Ok(Matrix::from_fn(p, 3, |i, j| {
        let angle = 2.0 * std::f64::consts::PI * (i + 1) as f64 / p as f64;
        match j {
            0 => sq2 * angle.cos(),
            1 => sq2 * angle.sin(),
            _ => 1.0,
        }
    }))
}

fn banded(p: usize, scale: f64, decay: f64) -> Matrix {
    Matrix::from_fn(p, p, |i, j| scale * decay.powi(i.abs_diff(j) as i32))
}

/// Γˢ_ij = 0.1 · 0.5^|i−j|.
pub fn default_idio(p: usize) -> Matrix {
    banded(p, 0.1, 0.5)
}

/// Initial factor state at the stationary mean of Ψ.
pub fn stationary_state(theta: &SVParams) -> Result<FactorState> {
    let mean = theta.stationary_mean()?;
    Ok(FactorState { sigma: mean.clone(), psi_history: vec![mean; theta.q.max(1)] })
}

/// One simulated day.
pub struct SimDay {
    /// 1-based day index.
    pub day: usize,
    pub ticks: DayTicks,
    pub psi: Matrix,
    pub clips: usize,
}

/// Day-by-day simulator; lets large studies avoid holding the full panel.
pub struct Simulator {
    config: SimConfig,
    theta: SVParams,
    dynamics: FactorDynamics,
    prices: PriceGenerator,
    loading: Matrix,
    idio: Matrix,
    state: FactorState,
    rng: ChaCha8Rng,
    x: DVector<f64>,
    day: usize,
    clips: usize,
}

impl Simulator {
    pub fn new(config: &SimConfig) -> Result<Self> {
        Self::with_rng(config, ChaCha8Rng::seed_from_u64(config.seed))
    }

    /// Uses the supplied generator instead of seeding from `config.seed`.
    pub fn with_rng(config: &SimConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        let theta = config.validate()?;
        let loading = config.loading()?;
        let idio = config.idio()?;
        let idio_chol =
            idio.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("idiosyncratic volatility matrix".into()))?.l();
        let dynamics = config.dynamics();
        let mut state = stationary_state(&theta)?;
        let steps = config.m * config.substeps_per_obs;
        let mut clips = 0;
        for b in 0..config.burnin_days {
            clips += dynamics.step_day(&mut state, steps, None, &mut rng, b + 1)?.clips;
        }
        Ok(Self {
            prices: PriceGenerator { loading: loading.clone(), idio_chol, noise_sd: config.noise_sd, drift: config.drift },
            x: DVector::zeros(config.p),
            config: config.clone(),
            theta,
            dynamics,
            loading,
            idio,
            state,
            rng,
            day: 0,
            clips,
        })
    }

    pub fn theta(&self) -> &SVParams {
        &self.theta
    }
    pub fn loading(&self) -> &Matrix {
        &self.loading
    }
    pub fn idio(&self) -> &Matrix {
        &self.idio
    }
    /// Instantaneous factor volatility at the end of the last simulated day.
    pub fn sigma(&self) -> &Matrix {
        &self.state.sigma
    }
    /// True Ψ history, most recent first.
    pub fn psi_history(&self) -> &[Matrix] {
        &self.state.psi_history
    }
    /// Total eigenvalue clips so far, burn-in included.
    pub fn clips(&self) -> usize {
        self.clips
    }

    pub fn next_day(&mut self) -> Result<SimDay> {
        let m = self.config.m;
        let steps = m * self.config.substeps_per_obs;
        self.day += 1;
        let day = self.day;
        let fd = self.dynamics.step_day(&mut self.state, steps, Some(m), &mut self.rng, self.config.burnin_days + day)?;
        self.clips += fd.clips;
        let inc = fd.increments.expect("observation increments requested");
        let observed = self.prices.day_prices(&mut self.x, &inc, &mut self.rng);
        let offset = (day - 1) as f64;
        let times: Vec<f64> = (1..=m).map(|j| offset + j as f64 / m as f64).collect();
        let ticks = match self.config.thinning {
            None => DayTicks::Sync { times, prices: observed },
            Some(keep) => {
                let mask = thinning_mask(m, self.config.p, keep, &mut self.rng);
                DayTicks::Async(
                    mask.iter()
                        .enumerate()
                        .map(|(i, keepers)| {
                            let idx: Vec<usize> = (0..m).filter(|&j| keepers[j]).collect();
                            AssetTicks {
                                times: idx.iter().map(|&j| times[j]).collect(),
                                prices: idx.iter().map(|&j| observed[(j, i)]).collect(),
                            }
                        })
                        .collect(),
                )
            }
        };
        Ok(SimDay { day, ticks, psi: fd.psi, clips: fd.clips })
    }
}

/// A fully materialized simulation.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub ticks: TickPanel,
    pub true_gamma: Vec<Matrix>,
    pub true_psi: Vec<Matrix>,
    pub true_sigma_end: Matrix,
    pub loading: Matrix,
    pub idio: Matrix,
    pub theta: SVParams,
    /// Number of substeps at which a negative eigenvalue of Σ_t was clipped.
    pub clips: usize,
}

pub fn simulate(config: &SimConfig) -> Result<SimOutput> {
    let mut sim = Simulator::new(config)?;
    let mut days = Vec::with_capacity(config.n);
    let mut true_psi = Vec::with_capacity(config.n);
    let mut true_gamma = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let d = sim.next_day()?;
        let mut g = sim.loading() * &d.psi * sim.loading().transpose() + sim.idio();
        linalg::symmetrize(&mut g);
        true_gamma.push(g);
        true_psi.push(d.psi);
        days.push(d.ticks);
    }
    if sim.clips() > 0 {
        log::info!("simulation clipped negative eigenvalues of Sigma_t at {} substeps", sim.clips());
    }
    Ok(SimOutput {
        ticks: TickPanel::new(config.p, days)?,
        true_gamma,
        true_psi,
        true_sigma_end: sim.sigma().clone(),
        loading: sim.loading().clone(),
        idio: sim.idio().clone(),
        theta: sim.theta().clone(),
        clips: sim.clips(),
    })
}

/// Simulates only the factor volatility process and returns `n_days` daily
/// integrals Ψ_k after `burnin` discarded days.
pub fn simulate_factor_vols(
    config: &SimConfig,
    n_days: usize,
    steps_per_day: usize,
    burnin: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Matrix>> {
    let theta = config.validate()?;
    let dynamics = config.dynamics();
    let mut state = stationary_state(&theta)?;
    for b in 0..burnin {
        dynamics.step_day(&mut state, steps_per_day, None, rng, b + 1)?;
    }
    (0..n_days).map(|k| dynamics.step_day(&mut state, steps_per_day, None, rng, burnin + k + 1).map(|d| d.psi)).collect()
}

/// L·H_{n+1}(θ)·Lᵀ + Γˢ from the true loading, Ψ history (most recent
/// first) and idiosyncratic matrix.
pub fn conditional_oracle_from(loading: &Matrix, idio: &Matrix, history: &[Matrix], theta: &SVParams) -> Result<Matrix> {
    let h = build_h(theta, history)?;
    let mut out = loading * h * loading.transpose() + idio;
    linalg::symmetrize(&mut out);
    Ok(out)
}

/// E(Γ_{n+1} | F_n) for the last simulated day.
pub fn conditional_oracle(sim: &SimOutput, theta: &SVParams) -> Result<Matrix> {
    let n = sim.true_psi.len();
    if n < theta.q {
        return Err(mismatch(format!(">= {} psi matrices", theta.q), n));
    }
    let history: Vec<Matrix> = sim.true_psi.iter().rev().take(theta.q).cloned().collect();
    conditional_oracle_from(&sim.loading, &sim.idio, &history, theta)
}
