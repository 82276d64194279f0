use super::lse::{regression, solve_least_squares};
use super::vech_len;
use crate::error::{mismatch, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderCriterion {
    Aic,
    Bic,
}

#[derive(Debug, Clone)]
pub struct OrderSelection {
    pub q: usize,
    /// (q, AIC, BIC) for each candidate.
    pub scores: Vec<(usize, f64, f64)>,
}

/// Scans AR orders 1…=q_max with LSE on a common estimation window and
/// picks the minimizer of the chosen information criterion.
pub fn select_order(psi: &[Matrix], q_max: usize, criterion: OrderCriterion) -> Result<OrderSelection> {
    let r = psi.first().map(Matrix::nrows).ok_or_else(|| mismatch("non-empty series", 0))?;
    let d0 = vech_len(r);
    if q_max == 0 || psi.len() < q_max + 1 + q_max * d0 {
        return Err(mismatch(format!("series length >= {}", q_max + 1 + q_max * d0), psi.len()));
    }
    let mut scores = Vec::with_capacity(q_max);
    for q in 1..=q_max {
        let reg = regression(psi, q, q_max);
        let coef = solve_least_squares(&reg.design, &reg.response)?;
        let resid = &reg.response - &reg.design * &coef;
        let n_obs = resid.nrows() as f64;
        let cov = resid.transpose() * &resid / n_obs;
        let logdet = cov.determinant().max(1e-300).ln();
        let k = (d0 * (1 + q * d0)) as f64;
        let aic = n_obs * logdet + 2.0 * k;
        let bic = n_obs * logdet + k * n_obs.ln();
        scores.push((q, aic, bic));
    }
    let pick = |f: fn(&(usize, f64, f64)) -> f64| {
        scores.iter().min_by(|a, b| f(a).partial_cmp(&f(b)).unwrap_or(std::cmp::Ordering::Equal)).map(|s| s.0).unwrap_or(1)
    };
    let q = match criterion {
        OrderCriterion::Aic => pick(|s| s.1),
        OrderCriterion::Bic => pick(|s| s.2),
    };
    Ok(OrderSelection { q, scores })
}
