use super::{vech_len, vech_unchecked, FitReport, SVParams};
use crate::error::{mismatch, Error, Result};
use crate::linalg::{Matrix, Vector};

/// Condition number above which the design is treated as rank-deficient.
const MAX_CONDITION: f64 = 1e12;

pub(crate) struct Regression {
    pub design: Matrix,
    pub response: Matrix,
}

/// Rows k = q+1…n: response vech(Ψ_k), regressors [1, vech(Ψ_{k−1}), …, vech(Ψ_{k−q})].
pub(crate) fn regression(psi: &[Matrix], q: usize, start: usize) -> Regression {
    let r = psi[0].nrows();
    let d0 = vech_len(r);
    let rows = psi.len() - start;
    let mut design = Matrix::zeros(rows, 1 + q * d0);
    let mut response = Matrix::zeros(rows, d0);
    for (row, k) in (start..psi.len()).enumerate() {
        design[(row, 0)] = 1.0;
        for j in 1..=q {
            let v = vech_unchecked(&psi[k - j]);
            for (c, x) in v.iter().enumerate() {
                design[(row, 1 + (j - 1) * d0 + c)] = *x;
            }
        }
        let y = vech_unchecked(&psi[k]);
        for (c, x) in y.iter().enumerate() {
            response[(row, c)] = *x;
        }
    }
    Regression { design, response }
}

/// Closed-form least squares fit of the vech-AR(q) recursion.
pub fn lse_fit(psi: &[Matrix], q: usize) -> Result<FitReport> {
    if q == 0 {
        return Err(Error::InvalidConfig("q must be at least 1".into()));
    }
    let r = psi.first().map(Matrix::nrows).ok_or_else(|| mismatch("non-empty series", 0))?;
    if psi.iter().any(|m| m.nrows() != r || m.ncols() != r) {
        return Err(mismatch(format!("{r}x{r} matrices"), "mixed shapes"));
    }
    let d0 = vech_len(r);
    let needed = q + 1 + q * d0;
    if psi.len() < needed {
        return Err(mismatch(format!("series length >= {needed}"), psi.len()));
    }
    let reg = regression(psi, q, q);
    let coef = solve_least_squares(&reg.design, &reg.response)?;

    let beta0 = Vector::from_iterator(d0, (0..d0).map(|c| coef[(0, c)]));
    let betas = (0..q).map(|j| Matrix::from_fn(d0, d0, |i, c| coef[(1 + j * d0 + c, i)])).collect();
    let theta = SVParams::new(r, beta0, betas)?;

    let resid = &reg.response - &reg.design * &coef;
    let normal = reg.design.transpose() * &resid;
    let scale = reg.design.abs().max() * reg.response.abs().max().max(1e-300) * reg.design.nrows() as f64;
    let normal_residual = normal.abs().max() / scale.max(1e-300);
    let n = psi.len() as f64;
    let objective = resid.iter().map(|e| e * e).sum::<f64>() / n;
    let residuals = (0..resid.nrows()).map(|i| resid.row(i).transpose()).collect();

    Ok(FitReport {
        theta,
        objective,
        iterations: 1,
        converged: normal_residual < 1e-8,
        pd_repairs: 0,
        residuals,
        stationarity_residual: normal_residual,
        objective_trace: vec![objective],
    })
}

pub(crate) fn solve_least_squares(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition < MAX_CONDITION) {
        return Err(Error::RankDeficient { condition });
    }
    svd.solve(y, 0.0).map_err(|e| Error::InvalidConfig(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svmodel::{build_h, unvech};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rotation(rng: &mut ChaCha8Rng, d: usize) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        a.qr().q()
    }

    #[test]
    fn noiseless_recursion_is_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for q in 1..=2 {
            let d0 = vech_len(2);
            let beta0 = Vector::from_fn(d0, |_, _| rng.random_range(-0.5..0.5));
            let betas: Vec<Matrix> = (0..q).map(|j| rotation(&mut rng, d0) * if j == 0 { 0.9 } else { 0.05 }).collect();
            let theta = SVParams::new(2, beta0, betas).unwrap();
            let mut psi: Vec<Matrix> = (0..q)
                .map(|_| {
                    let v = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                    unvech(&v, 2).unwrap()
                })
                .collect();
            for _ in 0..200 {
                let hist: Vec<Matrix> = (1..=q).map(|j| psi[psi.len() - j].clone()).collect();
                psi.push(build_h(&theta, &hist).unwrap());
            }
            let fit = lse_fit(&psi, q).unwrap();
            assert!(fit.theta.max_abs_diff(&theta) < 1e-9, "q={q}: {}", fit.theta.max_abs_diff(&theta));
            assert!(fit.objective < 1e-20);
        }
    }

    #[test]
    fn rank_deficient_design_is_rejected() {
        let psi = vec![Matrix::identity(2, 2); 20];
        assert!(matches!(lse_fit(&psi, 1), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn too_short_series_is_rejected() {
        let psi = vec![Matrix::identity(2, 2); 4];
        assert!(lse_fit(&psi, 1).is_err());
    }
}
