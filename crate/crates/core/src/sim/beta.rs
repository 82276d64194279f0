//! Exact mapping from the continuous-time SV-Itô parameters (α₀, α_j, ν) to
//! the vech-AR coefficients of the daily integrated factor volatilities.

use crate::error::{mismatch, Error, Result};
use crate::linalg::{self, Matrix};
use crate::svmodel::{vech_len, vech_unchecked, SVParams};

const SERIES_TOL: f64 = 1e-14;
const SERIES_MAX_TERMS: usize = 500;

/// φ_k(A) = Σ_{j≥0} A^j / (j+k)!, so that φ₁(A) = A⁻¹(e^A − I),
/// φ₂(A) = A⁻²(e^A − I − A) and φ₃(A) = A⁻³(e^A − I − A − A²/2) whenever
/// A is invertible, and the series stays defined when it is not.
pub fn phi(a: &Matrix, k: usize) -> Matrix {
    let n = a.nrows();
    let mut factorial = 1.0;
    for i in 2..=k {
        factorial *= i as f64;
    }
    let mut term = Matrix::identity(n, n) / factorial;
    let mut sum = term.clone();
    for j in 1..SERIES_MAX_TERMS {
        term = (a * &term) / (j + k) as f64;
        sum += &term;
        if term.norm() < SERIES_TOL * sum.norm() {
            break;
        }
    }
    sum
}

/// vech-space row map: for a vec-space coefficient `c` (r²×r²) acting on
/// vec(Ψ), returns the d₀×d₀ coefficient acting on vech(Ψ).
fn vec_coef_to_vech(c: &Matrix, r: usize) -> Matrix {
    let d0 = vech_len(r);
    let mut out = Matrix::zeros(d0, d0);
    let mut row = 0;
    for b in 0..r {
        for a in b..r {
            let src = c.row(a + r * b);
            let m = Matrix::from_fn(r, r, |i, j| src[i + r * j]);
            let mut sym = &m + m.transpose();
            for i in 0..r {
                sym[(i, i)] = m[(i, i)];
            }
            out.row_mut(row).copy_from(&vech_unchecked(&sym).transpose());
            row += 1;
        }
    }
    out
}

/// Computes θ = (β₀, β₁, …, β_q) implied by the instantaneous volatility
/// dynamics with parameters `alpha0`, `alpha = [α₁, …, α_q]` and `nu`.
pub fn derive_beta(alpha0: &Matrix, alpha: &[Matrix], nu: &Matrix) -> Result<SVParams> {
    let r = alpha0.nrows();
    if alpha.is_empty() {
        return Err(Error::InvalidConfig("at least one alpha matrix (q >= 1) is required".into()));
    }
    for m in alpha.iter().chain([alpha0, nu]) {
        if m.nrows() != r || m.ncols() != r {
            return Err(mismatch(format!("{r}x{r}"), format!("{}x{}", m.nrows(), m.ncols())));
        }
    }
    let q = alpha.len();
    let a: Vec<Matrix> = alpha.iter().map(|al| linalg::kron(al, al)).collect();
    let rho1 = phi(&a[0], 1);
    let rho2 = phi(&a[0], 2);
    let rho3 = phi(&a[0], 3);

    let intercept =
        &rho1 * linalg::vec_of(&(alpha0 * alpha0.transpose())) + (&rho2 - &rho3 * 2.0) * linalg::vec_of(&(nu.transpose() * nu));
    let mut intercept_m = linalg::unvec(intercept.as_slice(), r, r);
    linalg::symmetrize(&mut intercept_m);
    let beta0 = vech_unchecked(&intercept_m);

    let rho12 = &rho1 - &rho2;
    let betas = (0..q)
        .map(|j| {
            let c = if j + 1 < q { &rho12 * &a[j] + &rho2 * &a[j + 1] } else { &rho12 * &a[j] };
            vec_coef_to_vech(&c, r)
        })
        .collect();
    let theta = SVParams::new(r, beta0, betas)?;
    let radius = linalg::spectral_radius(&theta.beta_sum());
    if !(radius < 1.0) {
        return Err(Error::NonStationary { radius });
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_at_zero_is_inverse_factorial() {
        let z = Matrix::zeros(4, 4);
        assert!((phi(&z, 1) - Matrix::identity(4, 4)).norm() < 1e-15);
        assert!((phi(&z, 2) - Matrix::identity(4, 4) / 2.0).norm() < 1e-15);
        assert!((phi(&z, 3) - Matrix::identity(4, 4) / 6.0).norm() < 1e-15);
    }

    #[test]
    fn phi_matches_closed_form_on_invertible_input() {
        let a = Matrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.5]);
        let i = Matrix::identity(2, 2);
        let ea = a.clone().exp();
        let ainv = a.clone().try_inverse().unwrap();
        let p1 = &ainv * (&ea - &i);
        let p2 = &ainv * &ainv * (&ea - &i - &a);
        assert!((phi(&a, 1) - p1).norm() < 1e-12);
        assert!((phi(&a, 2) - p2).norm() < 1e-11);
    }

    #[test]
    fn zero_alpha1_gives_series_limit() {
        let alpha0 = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.5, 0.4]));
        let nu = Matrix::from_row_slice(2, 2, &[0.3, 0.1, 0.0, 0.2]);
        let theta = derive_beta(&alpha0, &[Matrix::zeros(2, 2)], &nu).unwrap();
        assert!(theta.betas[0].norm() < 1e-15);
        let expected = &alpha0 * alpha0.transpose() + nu.transpose() * &nu * (0.5 - 1.0 / 3.0);
        assert!((theta.beta0.clone() - vech_unchecked(&expected)).norm() < 1e-14);
    }

    #[test]
    fn sign_flip_invariance() {
        let alpha0 = Matrix::from_row_slice(2, 2, &[0.5, 0.0, 0.1, 0.4]);
        let a1 = Matrix::from_row_slice(2, 2, &[0.3, 0.2, -0.1, 0.4]);
        let a2 = Matrix::from_row_slice(2, 2, &[0.1, 0.0, 0.05, 0.2]);
        let nu = Matrix::identity(2, 2) * 0.3;
        let t1 = derive_beta(&alpha0, &[a1.clone(), a2.clone()], &nu).unwrap();
        let t2 = derive_beta(&alpha0, &[-a1, -a2], &nu).unwrap();
        assert!(t1.max_abs_diff(&t2) < 1e-15);
    }

    #[test]
    fn non_stationary_is_rejected() {
        let alpha0 = Matrix::identity(1, 1);
        let nu = Matrix::identity(1, 1);
        // β₁ = (φ₁(a²) − φ₂(a²))·a² exceeds 1 for large a
        let res = derive_beta(&alpha0, &[Matrix::identity(1, 1) * 2.0], &nu);
        assert!(matches!(res, Err(Error::NonStationary { .. })));
    }
}
