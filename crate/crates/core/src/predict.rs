//! POET idiosyncratic estimation, the SV-POET one-step predictor, the
//! previous-day baselines and matrix error norms.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::factor::FactorState;
use crate::linalg::{self, Matrix, SortedEigen};
use crate::svmodel::{build_h, SVParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PoetMode {
    /// Hard threshold at ϖ·√(s_ii s_jj).
    Adaptive,
    /// Keep entries within the same sector; `sectors[i]` labels asset i.
    Sector { sectors: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoetConfig {
    pub r: usize,
    pub threshold_omega: f64,
    pub mode: PoetMode,
}

impl PoetConfig {
    pub fn adaptive(r: usize, threshold_omega: f64) -> Self {
        Self { r, threshold_omega, mode: PoetMode::Adaptive }
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.r >= p {
            return Err(Error::InvalidConfig(format!("POET rank {} must be below p = {p}", self.r)));
        }
        if !(self.threshold_omega >= 0.0) {
            return Err(Error::InvalidConfig(format!("threshold must be nonnegative, got {}", self.threshold_omega)));
        }
        if let PoetMode::Sector { sectors } = &self.mode {
            if sectors.len() != p {
                return Err(mismatch(format!("{p} sector labels"), sectors.len()));
            }
        }
        Ok(())
    }
}

/// ϖ = √(2 log p / (n √m + m)).
pub fn default_omega(p: usize, n: usize, m: usize) -> f64 {
    let m = m as f64;
    (2.0 * (p as f64).ln() / (n as f64 * m.sqrt() + m)).sqrt()
}

/// ϖ = √(2 log p / √m), for single-day estimators.
pub fn single_day_omega(p: usize, m: usize) -> f64 {
    (2.0 * (p as f64).ln() / (m as f64).sqrt()).sqrt()
}

/// Top-r spectral component Σ_{j≤r} λ_j q_j q_jᵀ.
fn spectral_part(e: &SortedEigen, r: usize) -> Matrix {
    let q = e.vectors.columns(0, r);
    let scaled = Matrix::from_fn(q.nrows(), r, |i, j| q[(i, j)] * e.values[j]);
    let mut out = scaled * q.transpose();
    linalg::symmetrize(&mut out);
    out
}

fn threshold(residual: &Matrix, config: &PoetConfig) -> Matrix {
    let p = residual.nrows();
    let diag: Vec<f64> = (0..p).map(|i| residual[(i, i)].max(0.0)).collect();
    Matrix::from_fn(p, p, |i, j| {
        if i == j {
            return diag[i];
        }
        let x = residual[(i, j)];
        let keep = match &config.mode {
            PoetMode::Adaptive => x.abs() >= config.threshold_omega * (diag[i] * diag[j]).sqrt(),
            PoetMode::Sector { sectors } => sectors[i] == sectors[j],
        };
        if keep {
            x
        } else {
            0.0
        }
    })
}

/// POET estimate of the idiosyncratic matrix from the mean daily matrix,
/// given its eigen-decomposition.
pub fn poet_idio_with_eigen(gamma_bar: &Matrix, eigen: &SortedEigen, config: &PoetConfig) -> Result<Matrix> {
    config.validate(gamma_bar.nrows())?;
    let residual = gamma_bar - spectral_part(eigen, config.r);
    Ok(threshold(&residual, config))
}

/// Removes the top-r spectral part of `gamma_bar` and thresholds the rest.
pub fn poet_idio(gamma_bar: &Matrix, config: &PoetConfig) -> Result<Matrix> {
    let p = gamma_bar.nrows();
    if gamma_bar.ncols() != p {
        return Err(mismatch("square matrix", format!("{}x{}", p, gamma_bar.ncols())));
    }
    config.validate(p)?;
    poet_idio_with_eigen(gamma_bar, &linalg::sym_eigen_desc(gamma_bar), config)
}

/// Single-day POET estimator: top-r spectral part plus thresholded rest.
pub fn poet_estimate(gamma: &Matrix, config: &PoetConfig) -> Result<Matrix> {
    config.validate(gamma.nrows())?;
    let e = linalg::sym_eigen_desc(gamma);
    let low_rank = spectral_part(&e, config.r);
    let idio = threshold(&(gamma - &low_rank), config);
    Ok(low_rank + idio)
}

#[derive(Debug, Clone)]
pub struct PredictedVol {
    pub factor_part: Matrix,
    pub idio_part: Matrix,
    pub total: Matrix,
    /// Day being predicted.
    pub day: usize,
    pub min_eigenvalue: f64,
    /// Set when `total` was PSD-projected.
    pub projected: bool,
}

/// L̂ Ĥ_{n+1}(θ̂) L̂ᵀ + Γ̂ˢ from the last q estimated factor volatilities.
pub fn sv_poet(state: &FactorState, theta: &SVParams, idio: &Matrix, project: bool) -> Result<PredictedVol> {
    let n = state.psi_hat.len();
    if n < theta.q {
        return Err(mismatch(format!(">= {} factor volatility matrices", theta.q), n));
    }
    if theta.r != state.r {
        return Err(mismatch(format!("theta rank {}", state.r), theta.r));
    }
    let p = state.p();
    if idio.nrows() != p || idio.ncols() != p {
        return Err(mismatch(format!("{p}x{p} idiosyncratic matrix"), format!("{}x{}", idio.nrows(), idio.ncols())));
    }
    let history: Vec<Matrix> = state.psi_hat.iter().rev().take(theta.q).cloned().collect();
    let h = build_h(theta, &history)?;
    let mut factor_part = &state.loading * h * state.loading.transpose();
    linalg::symmetrize(&mut factor_part);
    let mut total = &factor_part + idio;
    let e = linalg::sym_eigen_desc(&total);
    let min_eigenvalue = e.values[p - 1];
    let projected = project && min_eigenvalue < 0.0;
    if projected {
        total = linalg::reconstruct(&e, |l| l.max(0.0));
    }
    Ok(PredictedVol { factor_part, idio_part: idio.clone(), total, day: n + 1, min_eigenvalue, projected })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixErrors {
    pub spectral: f64,
    pub frobenius: f64,
    pub max: f64,
    pub relative_spectral: f64,
    pub relative_frobenius_norm: f64,
    pub relative_max: f64,
    /// p^{−1/2} ‖Γ*^{−1/2}(A − Γ*)Γ*^{−1/2}‖_F; `None` if the truth is not PD.
    pub relative_frobenius_weighted: Option<f64>,
    pub weighted_skipped: Option<String>,
}

/// Precomputed inverse square root of a PD reference matrix, for repeated
/// weighted-norm evaluations against the same truth.
pub struct ErrorReference {
    truth: Matrix,
    inv_sqrt: std::result::Result<Matrix, String>,
    spectral: f64,
    frobenius: f64,
    max: f64,
}

impl ErrorReference {
    pub fn new(truth: &Matrix) -> Self {
        let inv_sqrt = match linalg::sym_sqrt_and_inv_sqrt(truth) {
            Some((_, inv)) => Ok(inv),
            None => Err("truth is not positive definite".to_string()),
        };
        Self {
            truth: truth.clone(),
            inv_sqrt,
            spectral: linalg::spectral_norm(truth),
            frobenius: truth.norm(),
            max: linalg::max_abs(truth),
        }
    }

    pub fn errors(&self, estimate: &Matrix) -> Result<MatrixErrors> {
        if estimate.shape() != self.truth.shape() {
            return Err(mismatch(format!("{:?}", self.truth.shape()), format!("{:?}", estimate.shape())));
        }
        let diff = estimate - &self.truth;
        let spectral = linalg::spectral_norm(&diff);
        let frobenius = diff.norm();
        let max = linalg::max_abs(&diff);
        let (weighted, skipped) = match &self.inv_sqrt {
            Ok(w) => {
                let p = diff.nrows() as f64;
                (Some((w * &diff * w).norm() / p.sqrt()), None)
            }
            Err(reason) => (None, Some(reason.clone())),
        };
        Ok(MatrixErrors {
            spectral,
            frobenius,
            max,
            relative_spectral: spectral / self.spectral,
            relative_frobenius_norm: frobenius / self.frobenius,
            relative_max: max / self.max,
            relative_frobenius_weighted: weighted,
            weighted_skipped: skipped,
        })
    }
}

pub fn matrix_errors(estimate: &Matrix, truth: &Matrix) -> Result<MatrixErrors> {
    ErrorReference::new(truth).errors(estimate)
}
