//! Vech-AR parameterization of the daily factor volatility matrices and its
//! two estimators (closed-form least squares and quasi-maximum likelihood).

mod lse;
mod order;
mod qmle;

pub use lse::lse_fit;
pub use order::{select_order, OrderCriterion, OrderSelection};
pub use qmle::{qmle_fit, qmle_objective, QmleOptions};

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Symmetry tolerance accepted by [`vech`].
pub const VECH_SYMMETRY_TOL: f64 = 1e-8;

pub fn vech_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Column-major stacking of the lower triangle.
pub fn vech(m: &Matrix) -> Result<Vector> {
    if m.nrows() != m.ncols() {
        return Err(mismatch("square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let scale = linalg::max_abs(m).max(1.0);
    let asym = linalg::max_asymmetry(m);
    if asym > VECH_SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(vech_unchecked(m))
}

pub(crate) fn vech_unchecked(m: &Matrix) -> Vector {
    let r = m.nrows();
    let mut out = Vector::zeros(vech_len(r));
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            out[k] = m[(i, j)];
            k += 1;
        }
    }
    out
}

pub fn unvech(v: &[f64], r: usize) -> Result<Matrix> {
    if v.len() != vech_len(r) {
        return Err(mismatch(vech_len(r), v.len()));
    }
    let mut m = Matrix::zeros(r, r);
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

/// Order of r from a vech length, if it is triangular.
pub fn dim_from_vech_len(len: usize) -> Option<usize> {
    let r = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (vech_len(r) == len).then_some(r)
}

/// θ = (β₀, vec(β₁), …, vec(β_q)) of the vech-AR recursion
/// `vech(Ψ_k) = β₀ + Σ_j β_j vech(Ψ_{k−j}) + e_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SVParams {
    pub r: usize,
    pub q: usize,
    pub beta0: Vector,
    pub betas: Vec<Matrix>,
}

impl SVParams {
    pub fn new(r: usize, beta0: Vector, betas: Vec<Matrix>) -> Result<Self> {
        let d0 = vech_len(r);
        if beta0.len() != d0 {
            return Err(mismatch(d0, beta0.len()));
        }
        if betas.is_empty() {
            return Err(Error::InvalidConfig("q must be at least 1".into()));
        }
        for b in &betas {
            if b.nrows() != d0 || b.ncols() != d0 {
                return Err(mismatch(format!("{d0}x{d0}"), format!("{}x{}", b.nrows(), b.ncols())));
            }
        }
        Ok(Self { r, q: betas.len(), beta0, betas })
    }

    pub fn zeros(r: usize, q: usize) -> Self {
        let d0 = vech_len(r);
        Self { r, q, beta0: Vector::zeros(d0), betas: vec![Matrix::zeros(d0, d0); q] }
    }

    pub fn d0(&self) -> usize {
        vech_len(self.r)
    }

    /// Total parameter count r(r+1){2 + q·r(r+1)}/4.
    pub fn dim(&self) -> usize {
        let d0 = self.d0();
        d0 + self.q * d0 * d0
    }

    pub fn to_theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.beta0.iter());
        for b in &self.betas {
            out.extend(b.as_slice().iter());
        }
        out
    }

    pub fn from_theta(r: usize, q: usize, theta: &[f64]) -> Result<Self> {
        let d0 = vech_len(r);
        let d = d0 + q * d0 * d0;
        if theta.len() != d {
            return Err(mismatch(d, theta.len()));
        }
        let beta0 = Vector::from_column_slice(&theta[..d0]);
        let betas = (0..q)
            .map(|j| {
                let start = d0 + j * d0 * d0;
                Matrix::from_column_slice(d0, d0, &theta[start..start + d0 * d0])
            })
            .collect();
        Ok(Self { r, q, beta0, betas })
    }

    pub fn beta_sum(&self) -> Matrix {
        let d0 = self.d0();
        self.betas.iter().fold(Matrix::zeros(d0, d0), |acc, b| acc + b)
    }

    /// Spectral radius of the companion matrix of the recursion.
    pub fn companion_radius(&self) -> f64 {
        let d0 = self.d0();
        let q = self.q;
        let mut c = Matrix::zeros(d0 * q, d0 * q);
        for (j, b) in self.betas.iter().enumerate() {
            c.view_mut((0, j * d0), (d0, d0)).copy_from(b);
        }
        for j in 1..q {
            for i in 0..d0 {
                c[(j * d0 + i, (j - 1) * d0 + i)] = 1.0;
            }
        }
        linalg::spectral_radius(&c)
    }

    pub fn is_stationary(&self) -> bool {
        self.companion_radius() < 1.0
    }

    /// `(I − Σβ_j)⁻¹ β₀` as an r×r matrix.
    pub fn stationary_mean(&self) -> Result<Matrix> {
        let d0 = self.d0();
        let a = Matrix::identity(d0, d0) - self.beta_sum();
        let lu = a.lu();
        let v = lu.solve(&self.beta0).ok_or(Error::NonStationary { radius: 1.0 })?;
        unvech(v.as_slice(), self.r)
    }

    /// Parameters of the recursion followed by `R Ψ_k Rᵀ` for an invertible
    /// r×r matrix `R`: β₀ ↦ Tβ₀ and β_j ↦ Tβ_jT⁻¹ with vech(RΨRᵀ) = T vech(Ψ).
    pub fn change_basis(&self, rot: &Matrix) -> Result<SVParams> {
        let r = self.r;
        if rot.nrows() != r || rot.ncols() != r {
            return Err(mismatch(format!("{r}x{r}"), format!("{}x{}", rot.nrows(), rot.ncols())));
        }
        let t = vech_transform(rot);
        let t_inv = t.clone().try_inverse().ok_or_else(|| Error::NotPositiveDefinite("basis change is singular".into()))?;
        let betas = self.betas.iter().map(|b| &t * b * &t_inv).collect();
        SVParams::new(r, &t * &self.beta0, betas)
    }

    pub fn max_abs_diff(&self, other: &SVParams) -> f64 {
        self.to_theta().iter().zip(other.to_theta()).fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// Serializable form of [`SVParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SVParamsJson {
    pub r: usize,
    pub q: usize,
    pub beta0: Vec<f64>,
    /// Each β_j as a list of rows.
    pub betas: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub stationary: bool,
}

impl From<&SVParams> for SVParamsJson {
    fn from(p: &SVParams) -> Self {
        Self {
            r: p.r,
            q: p.q,
            beta0: p.beta0.iter().copied().collect(),
            betas: p.betas.iter().map(linalg::to_rows).collect(),
            stationary: p.is_stationary(),
        }
    }
}

impl TryFrom<SVParamsJson> for SVParams {
    type Error = Error;

    fn try_from(j: SVParamsJson) -> Result<Self> {
        let betas = j
            .betas
            .iter()
            .map(|rows| linalg::from_rows(rows).ok_or_else(|| Error::InvalidConfig("ragged beta matrix".into())))
            .collect::<Result<Vec<_>>>()?;
        let p = SVParams::new(j.r, Vector::from_vec(j.beta0), betas)?;
        if p.q != j.q {
            return Err(mismatch(j.q, p.q));
        }
        Ok(p)
    }
}

/// The d₀×d₀ matrix T with vech(R S Rᵀ) = T vech(S) for symmetric S.
pub fn vech_transform(rot: &Matrix) -> Matrix {
    let r = rot.nrows();
    let d0 = vech_len(r);
    let mut t = Matrix::zeros(d0, d0);
    let mut unit = vec![0.0; d0];
    for c in 0..d0 {
        unit.iter_mut().for_each(|v| *v = 0.0);
        unit[c] = 1.0;
        let e = unvech(&unit, r).expect("length matches");
        t.set_column(c, &vech_unchecked(&(rot * e * rot.transpose())));
    }
    t
}

/// Conditional mean matrix `H` with `vech(H) = β₀ + Σ_j β_j vech(Ψ_{k−j})`.
/// `history[0]` is the most recent matrix.
pub fn build_h(theta: &SVParams, history: &[Matrix]) -> Result<Matrix> {
    if history.len() < theta.q {
        return Err(mismatch(format!(">= {} history matrices", theta.q), history.len()));
    }
    let mut v = theta.beta0.clone();
    for (b, psi) in theta.betas.iter().zip(history) {
        if psi.nrows() != theta.r {
            return Err(mismatch(theta.r, psi.nrows()));
        }
        v += b * vech_unchecked(psi);
    }
    unvech(v.as_slice(), theta.r)
}

/// Outcome of an estimator run.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub theta: SVParams,
    /// Mean squared loss (LSE) or the quasi-log-likelihood (QMLE).
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pd_repairs: usize,
    /// vech-space residuals for k = q+1…n.
    pub residuals: Vec<Vector>,
    /// Gradient sup-norm (QMLE) or normal-equation residual (LSE) at exit.
    pub stationarity_residual: f64,
    /// Objective after each accepted step.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReportJson {
    pub theta: SVParamsJson,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pd_repairs: usize,
    pub stationarity_residual: f64,
}

impl From<&FitReport> for FitReportJson {
    fn from(f: &FitReport) -> Self {
        Self {
            theta: (&f.theta).into(),
            objective: f.objective,
            iterations: f.iterations,
            converged: f.converged,
            pd_repairs: f.pd_repairs,
            stationarity_residual: f.stationarity_residual,
        }
    }
}

/// Residuals `vech(Ψ_k) − vech(H_k(θ))` for k = q+1…n.
pub fn residuals(theta: &SVParams, psi: &[Matrix]) -> Result<Vec<Vector>> {
    let q = theta.q;
    let mut out = Vec::with_capacity(psi.len().saturating_sub(q));
    let mut hist: Vec<Matrix> = Vec::with_capacity(q);
    for k in q..psi.len() {
        hist.clear();
        hist.extend((1..=q).map(|j| psi[k - j].clone()));
        let h = build_h(theta, &hist)?;
        out.push(vech_unchecked(&psi[k]) - vech_unchecked(&h));
    }
    Ok(out)
}
