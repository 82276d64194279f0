//! Loading and factor volatility extraction from a series of daily
//! volatility matrices, and rank selection.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::linalg::{self, Matrix};

/// Relative eigenvalue gap below which the r-th and (r+1)-th eigenvalues
/// are reported as tied.
const TIE_TOL: f64 = 1e-12;
pub const SIGN_CONVENTION_VERSION: u32 = 1;

/// (np)⁻¹ Σ_k (Γ̂_k − Γ̄)².
pub fn sample_var_matrix(gammas: &[Matrix]) -> Result<Matrix> {
    let n = gammas.len();
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 daily matrices, got {n}")));
    }
    let p = gammas[0].nrows();
    for g in gammas {
        if g.nrows() != p || g.ncols() != p {
            return Err(mismatch(format!("{p}x{p}"), format!("{}x{}", g.nrows(), g.ncols())));
        }
    }
    let mean = mean_matrix(gammas);
    let mut acc = Matrix::zeros(p, p);
    let mut d = Matrix::zeros(p, p);
    for g in gammas {
        d.copy_from(g);
        d -= &mean;
        acc.gemm(1.0, &d, &d, 1.0);
    }
    acc /= (n * p) as f64;
    linalg::symmetrize(&mut acc);
    Ok(acc)
}

pub fn mean_matrix(gammas: &[Matrix]) -> Matrix {
    let mut mean = gammas[0].clone();
    for g in &gammas[1..] {
        mean += g;
    }
    mean / gammas.len() as f64
}

/// Flips the sign of each column so that its largest-magnitude entry is
/// positive (first such entry on exact ties).
pub fn normalize_signs(v: &mut Matrix) {
    for mut col in v.column_iter_mut() {
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// √p times the top-r unit eigenvectors of `s`, sign normalized, together
/// with the top-r eigenvalues.
pub fn estimate_loading(s: &Matrix, r: usize) -> Result<(Matrix, Vec<f64>)> {
    let p = s.nrows();
    if s.ncols() != p {
        return Err(mismatch("square matrix", format!("{}x{}", p, s.ncols())));
    }
    if r < 1 || r > p {
        return Err(Error::InvalidConfig(format!("rank must be in 1..={p}, got {r}")));
    }
    let e = linalg::sym_eigen_desc(s);
    if r < p {
        let (a, b) = (e.values[r - 1], e.values[r]);
        if (a - b).abs() <= TIE_TOL * a.abs().max(b.abs()).max(f64::MIN_POSITIVE) {
            log::warn!("rank ambiguity: eigenvalues {r} and {} coincide ({a})", r + 1);
        }
    }
    let mut l = e.vectors.columns(0, r).into_owned();
    normalize_signs(&mut l);
    l *= (p as f64).sqrt();
    Ok((l, e.values.iter().take(r).copied().collect()))
}

/// Ψ̂_k = p⁻² L̂ᵀ Γ̂_k L̂.
pub fn estimate_factor_vols(loading: &Matrix, gammas: &[Matrix]) -> Result<Vec<Matrix>> {
    let p = loading.nrows();
    let scale = 1.0 / (p * p) as f64;
    gammas
        .iter()
        .map(|g| {
            if g.nrows() != p || g.ncols() != p {
                return Err(mismatch(format!("{p}x{p}"), format!("{}x{}", g.nrows(), g.ncols())));
            }
            let mut psi = loading.tr_mul(&(g * loading)) * scale;
            linalg::symmetrize(&mut psi);
            Ok(psi)
        })
        .collect()
}

/// Loading estimate plus estimated factor volatilities.
#[derive(Debug, Clone)]
pub struct FactorState {
    pub r: usize,
    pub loading: Matrix,
    pub psi_hat: Vec<Matrix>,
    pub s_matrix: Matrix,
    pub eigvals: Vec<f64>,
}

impl FactorState {
    pub fn estimate(gammas: &[Matrix], r: usize) -> Result<Self> {
        let s_matrix = sample_var_matrix(gammas)?;
        let (loading, eigvals) = estimate_loading(&s_matrix, r)?;
        let psi_hat = estimate_factor_vols(&loading, gammas)?;
        Ok(Self { r, loading, psi_hat, s_matrix, eigvals })
    }

    pub fn p(&self) -> usize {
        self.loading.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    pub r_max: Option<usize>,
    pub c1_scale: f64,
    pub c2: f64,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self { r_max: None, c1_scale: 0.02, c2: 0.5 }
    }
}

impl RankOptions {
    pub fn r_max_for(&self, p: usize) -> usize {
        self.r_max.unwrap_or_else(|| 30.min(p.saturating_sub(1)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    /// argmin of the criterion minus one; may be 0.
    pub rank: usize,
    /// Criterion value for j = 1…r_max.
    pub criterion: Vec<f64>,
    /// Set when the selected rank is below 1.
    pub flagged: bool,
}

/// Rank selection from per-day eigenvalues (descending, at least r_max
/// per day).
pub fn select_rank_from_eigenvalues(eigs: &[Vec<f64>], p: usize, m: usize, opts: &RankOptions) -> Result<RankSelection> {
    let r_max = opts.r_max_for(p);
    if r_max < 1 || r_max >= p {
        return Err(Error::InvalidConfig(format!("r_max must be in 1..{p}, got {r_max}")));
    }
    if eigs.is_empty() {
        return Err(Error::InvalidConfig("no daily matrices for rank selection".into()));
    }
    let lp = (p as f64).ln();
    let rate = ((lp / (m as f64).sqrt()).sqrt() + lp / p as f64).powf(opts.c2);
    let mut criterion = vec![0.0; r_max];
    for (k, ev) in eigs.iter().enumerate() {
        if ev.len() < r_max {
            return Err(mismatch(format!("{r_max} eigenvalues on day {}", k + 1), ev.len()));
        }
        let c1 = opts.c1_scale * ev[r_max - 1];
        for j in 1..=r_max {
            criterion[j - 1] += ev[j - 1] / p as f64 + j as f64 * c1 * rate;
        }
    }
    let mut best = 0;
    for j in 1..r_max {
        if criterion[j] < criterion[best] {
            best = j;
        }
    }
    // best is the 0-based index of the argmin j = best + 1
    let rank = best;
    let flagged = rank < 1;
    if flagged {
        log::warn!("rank selection returned {rank}; no factor structure detected");
    }
    Ok(RankSelection { rank, criterion, flagged })
}

/// Rank selection on PSD-projected daily matrices.
pub fn select_rank(gammas: &[Matrix], m: usize, opts: &RankOptions) -> Result<RankSelection> {
    let p = gammas.first().map(|g| g.nrows()).unwrap_or(0);
    let eigs: Vec<Vec<f64>> = gammas.iter().map(|g| linalg::sym_eigen_desc(g).values.to_vec()).collect();
    select_rank_from_eigenvalues(&eigs, p, m, opts)
}

/// Aligns the columns of `estimate` to `truth` by sign(estimateᵢᵀ truthᵢ).
pub fn align_signs(estimate: &Matrix, truth: &Matrix) -> Matrix {
    let mut out = estimate.clone();
    for j in 0..out.ncols() {
        if out.column(j).dot(&truth.column(j)) < 0.0 {
            out.column_mut(j).neg_mut();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_idio, default_loading};

    #[test]
    fn identical_inputs_give_zero_variance() {
        let g = Matrix::from_fn(4, 4, |i, j| 1.0 / (1 + i + j) as f64);
        let s = sample_var_matrix(&[g.clone(), g.clone(), g]).unwrap();
        assert!(s.amax() < 1e-15);
    }

    #[test]
    fn hand_computed_scalar_case() {
        let s = sample_var_matrix(&[Matrix::from_element(1, 1, 4.0), Matrix::from_element(1, 1, 8.0)]).unwrap();
        assert_eq!(s[(0, 0)], 4.0);
    }

    #[test]
    fn rank_one_loading() {
        let u = nalgebra::DVector::from_vec(vec![0.6, -0.8, 0.0]);
        let s = &u * u.transpose() * 3.0;
        let (l, ev) = estimate_loading(&s, 1).unwrap();
        let expected = -&u * 3f64.sqrt();
        assert!((l.column(0) - expected).amax() < 1e-12);
        assert!((ev[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn full_rank_loading_resolves_identity() {
        let a = Matrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * (i == j) as u8 as f64);
        let s = &a * a.transpose();
        let (l, _) = estimate_loading(&s, 5).unwrap();
        assert!((&l * l.transpose() / 5.0 - Matrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn factor_vols_invert_orthogonal_loading() {
        let l = default_loading(30, 3).unwrap();
        let a = Matrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.3, -0.05, 0.0, -0.05, 0.2]);
        let g = &l * &a * l.transpose();
        let psi = estimate_factor_vols(&l, &[g]).unwrap();
        assert!((&psi[0] - a).amax() < 1e-12);
    }

    #[test]
    fn idio_only_factor_vols_are_small() {
        let p = 200;
        let l = default_loading(p, 3).unwrap();
        let psi = estimate_factor_vols(&l, &[default_idio(p)]).unwrap();
        assert!(psi[0].amax() < 0.3 / p as f64 * 1.01);
    }

    #[test]
    fn no_factor_structure_selects_rank_zero() {
        let g = default_idio(40);
        let sel = select_rank(&vec![g; 5], 390, &RankOptions::default()).unwrap();
        assert_eq!(sel.rank, 0);
        assert!(sel.flagged);
    }

    #[test]
    fn rank_three_is_recovered_from_clean_matrices() {
        let p = 60;
        let l = default_loading(p, 3).unwrap();
        let psi = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.3, 0.2]));
        let g = &l * psi * l.transpose() + default_idio(p);
        let sel = select_rank(&[g.clone(), g], 390, &RankOptions::default()).unwrap();
        assert_eq!(sel.rank, 3);
        assert!(!sel.flagged);
    }

    #[test]
    fn r_max_must_be_below_p() {
        let opts = RankOptions { r_max: Some(5), ..Default::default() };
        assert!(select_rank(&[Matrix::identity(5, 5)], 390, &opts).is_err());
    }
}
