use super::{residuals, vech_len, vech_unchecked, FitReport, SVParams};
use crate::error::{mismatch, Error, Result};
use crate::linalg::{small, Matrix};

/// Weight of the eigenvalue-deficit penalty, relative to the average
/// eigenvalue scale of the series.
const PENALTY_WEIGHT: f64 = 1e3;
const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct QmleOptions {
    /// Eigenvalue floor for H_k. `None` uses 1e-8 · mean trace of the series.
    pub floor: Option<f64>,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self { floor: None, max_iter: 500, grad_tol: 1e-7 }
    }
}

/// Pre-vectorized series used by the likelihood loop.
struct Likelihood {
    r: usize,
    q: usize,
    d0: usize,
    /// vech(Ψ_k), flat.
    x: Vec<f64>,
    /// Ψ_k row-major flat.
    psi: Vec<f64>,
    n: usize,
    floor: f64,
    scale: f64,
}

struct Eval {
    /// Mean of log det H + tr(Ψ H⁻¹), without penalty.
    nll: f64,
    penalty: f64,
    repairs: usize,
}

impl Eval {
    fn total(&self) -> f64 {
        self.nll + self.penalty
    }
}

impl Likelihood {
    fn new(series: &[Matrix], q: usize, floor: Option<f64>) -> Self {
        let r = series[0].nrows();
        let d0 = vech_len(r);
        let n = series.len();
        let mut x = Vec::with_capacity(n * d0);
        let mut psi = Vec::with_capacity(n * r * r);
        let mut mean_trace = 0.0;
        for m in series {
            x.extend(vech_unchecked(m).iter());
            for i in 0..r {
                for j in 0..r {
                    psi.push(m[(i, j)]);
                }
            }
            mean_trace += m.trace();
        }
        mean_trace /= n as f64;
        let floor = floor.unwrap_or(1e-8 * mean_trace.abs().max(1e-300));
        let scale = (mean_trace.abs() / r as f64).max(1e-300);
        Self { r, q, d0, x, psi, n, floor, scale }
    }

    fn eval(&self, theta: &[f64]) -> Eval {
        self.eval_with_gradient(theta, None)
    }

    /// Evaluates the objective. When `grad` is given and no day needs an
    /// eigenvalue repair, it receives the exact gradient of the objective.
    fn eval_with_gradient(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> Eval {
        let (r, d0, q) = (self.r, self.d0, self.q);
        let rr = r * r;
        let mut hv = vec![0.0; d0];
        let mut h = vec![0.0; rr];
        let mut shifted = vec![0.0; rr];
        let mut chol = vec![0.0; rr];
        let mut hinv = vec![0.0; rr];
        let mut tmp = vec![0.0; rr];
        let mut gv = vec![0.0; d0];
        let mut vals = vec![0.0; r];
        let mut vecs = vec![0.0; rr];
        let mut work = vec![0.0; rr];
        let mut sum = 0.0;
        let mut deficit = 0.0;
        let mut repairs = 0;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for k in q..self.n {
            hv.copy_from_slice(&theta[..d0]);
            for j in 1..=q {
                let beta = &theta[d0 + (j - 1) * d0 * d0..d0 + j * d0 * d0];
                let xk = &self.x[(k - j) * d0..(k - j + 1) * d0];
                for (c, xc) in xk.iter().enumerate() {
                    let col = &beta[c * d0..(c + 1) * d0];
                    for (i, b) in col.iter().enumerate() {
                        hv[i] += b * xc;
                    }
                }
            }
            let mut idx = 0;
            for jj in 0..r {
                for ii in jj..r {
                    h[ii * r + jj] = hv[idx];
                    h[jj * r + ii] = hv[idx];
                    idx += 1;
                }
            }
            let psi = &self.psi[k * rr..(k + 1) * rr];

            // fast path: λ_min(H) > floor, certified by a Cholesky of H − floor·I
            shifted.copy_from_slice(&h);
            for a in 0..r {
                shifted[a * r + a] -= self.floor;
            }
            if small::cholesky(&shifted, &mut chol, r) && small::cholesky(&h, &mut chol, r) {
                let logdet: f64 = (0..r).map(|a| 2.0 * chol[a * r + a].ln()).sum();
                small::cholesky_inverse(&chol, &mut hinv, &mut tmp, r);
                let mut tr = 0.0;
                for a in 0..rr {
                    tr += psi[a] * hinv[a];
                }
                sum += logdet + tr;
                if let Some(g) = grad.as_deref_mut() {
                    // d/dH = H⁻¹ − H⁻¹ Ψ H⁻¹
                    small::sandwich(&hinv, psi, &mut work, &mut tmp, r);
                    let mut idx = 0;
                    for jj in 0..r {
                        for ii in jj..r {
                            let e = hinv[ii * r + jj] - work[ii * r + jj];
                            gv[idx] = if ii == jj { e } else { 2.0 * e };
                            idx += 1;
                        }
                    }
                    for (i, v) in gv.iter().enumerate() {
                        g[i] += v;
                    }
                    for j in 1..=q {
                        let base = d0 + (j - 1) * d0 * d0;
                        let xk = &self.x[(k - j) * d0..(k - j + 1) * d0];
                        for (c, xc) in xk.iter().enumerate() {
                            let col = &mut g[base + c * d0..base + (c + 1) * d0];
                            for (slot, v) in col.iter_mut().zip(&gv) {
                                *slot += v * xc;
                            }
                        }
                    }
                }
                continue;
            }

            small::jacobi_eigen(&h, &mut vals, &mut vecs, &mut work, r);
            let mut repaired = false;
            for e in 0..r {
                let mut lam = vals[e];
                if !(lam >= self.floor) {
                    deficit += if lam.is_finite() { self.floor - lam } else { 1e300 };
                    lam = self.floor;
                    repaired = true;
                }
                let mut quad = 0.0;
                for a in 0..r {
                    let mut s = 0.0;
                    for b in 0..r {
                        s += psi[a * r + b] * vecs[b * r + e];
                    }
                    quad += vecs[a * r + e] * s;
                }
                sum += lam.ln() + quad / lam;
            }
            if repaired {
                repairs += 1;
            }
        }
        let n = self.n as f64;
        if let Some(g) = grad {
            g.iter_mut().for_each(|v| *v /= n);
        }
        Eval { nll: sum / n, penalty: PENALTY_WEIGHT * deficit / (n * self.scale), repairs }
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.eval(theta).total()
    }

    /// Exact gradient where every H_k is above the floor, central
    /// differences otherwise.
    fn gradient(&self, theta: &[f64], grad: &mut [f64]) {
        if self.eval_with_gradient(theta, Some(grad)).repairs == 0 {
            return;
        }
        self.numerical_gradient(theta, grad);
    }

    fn numerical_gradient(&self, theta: &[f64], grad: &mut [f64]) {
        let mut x = theta.to_vec();
        for i in 0..theta.len() {
            let h = 1e-6 * (1.0 + theta[i].abs());
            x[i] = theta[i] + h;
            let fp = self.value(&x);
            x[i] = theta[i] - h;
            let fm = self.value(&x);
            x[i] = theta[i];
            grad[i] = (fp - fm) / (2.0 * h);
        }
    }
}

/// Quasi-log-likelihood `−n⁻¹ Σ_{k>q} [log det H_k(θ) + Tr(Ψ_k H_k⁻¹(θ))]`
/// with eigenvalue flooring at `floor` (penalty excluded).
pub fn qmle_objective(theta: &SVParams, psi: &[Matrix], floor: Option<f64>) -> f64 {
    let lik = Likelihood::new(psi, theta.q, floor);
    -lik.eval(&theta.to_theta()).nll
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

/// Maximizes the quasi-likelihood by BFGS with central-difference
/// gradients, starting from `init` (typically the LSE).
pub fn qmle_fit(psi: &[Matrix], init: &SVParams, opts: &QmleOptions) -> Result<FitReport> {
    let q = init.q;
    let r = init.r;
    if psi.len() <= q {
        return Err(mismatch(format!("series length > {q}"), psi.len()));
    }
    if psi.iter().any(|m| m.nrows() != r || m.ncols() != r) {
        return Err(mismatch(format!("{r}x{r} matrices"), "mixed shapes"));
    }
    let lik = Likelihood::new(psi, q, opts.floor);
    let d = init.dim();
    let mut x = init.to_theta();
    let mut f = lik.value(&x);
    if x.iter().any(|v| !v.is_finite()) || !f.is_finite() || !lik.eval(&x).nll.is_finite() {
        return Err(Error::NonFiniteObjective);
    }
    let mut g = vec![0.0; d];
    lik.gradient(&x, &mut g);
    let mut hinv = Matrix::identity(d, d);
    let mut trace = vec![-lik.eval(&x).nll];
    let mut iterations = 0;
    let mut converged = sup_norm(&g) < opts.grad_tol;
    let mut first_step = true;

    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let gv = nalgebra::DVector::from_column_slice(&g);
        let mut dir = -(&hinv * &gv);
        let mut slope = dir.dot(&gv);
        if !(slope < 0.0) {
            hinv = Matrix::identity(d, d);
            dir = -gv.clone();
            slope = dir.dot(&gv);
        }
        let mut t = if first_step { (1.0 / sup_norm(&g).max(1e-12)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            let fc = lik.value(&cand);
            if fc.is_finite() && fc <= f + ARMIJO_C * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let (xn, fnew) = match accepted {
            Some(v) => v,
            None => match coordinate_search(&lik, &x, f) {
                Some(v) => {
                    hinv = Matrix::identity(d, d);
                    first_step = true;
                    v
                }
                None => break,
            },
        };
        let mut gn = vec![0.0; d];
        lik.gradient(&xn, &mut gn);
        let s = nalgebra::DVector::from_iterator(d, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = nalgebra::DVector::from_iterator(d, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if first_step {
                let gamma = sy / y.dot(&y);
                hinv = Matrix::identity(d, d) * gamma;
                first_step = false;
            }
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            let yhy = y.dot(&hy);
            // H⁺ = H − ρ(H y sᵀ + s yᵀ H) + (ρ² yᵀHy + ρ) s sᵀ
            hinv -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            hinv += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        let improvement = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        trace.push(-lik.eval(&x).nll);
        converged = sup_norm(&g) < opts.grad_tol;
        if !converged && improvement.abs() <= 1e-15 * f.abs().max(1.0) && sup_norm(&g) < 1e-5 {
            // numerical-gradient noise floor
            break;
        }
    }

    let theta = SVParams::from_theta(r, q, &x)?;
    let eval = lik.eval(&x);
    let resid = residuals(&theta, psi)?;
    Ok(FitReport {
        theta,
        objective: -eval.nll,
        iterations,
        converged,
        pd_repairs: eval.repairs,
        residuals: resid,
        stationarity_residual: sup_norm(&g),
        objective_trace: trace,
    })
}

/// Derivative-free fallback: one compass sweep with shrinking steps.
fn coordinate_search(lik: &Likelihood, x: &[f64], f: f64) -> Option<(Vec<f64>, f64)> {
    let mut best = x.to_vec();
    let mut fbest = f;
    let mut improved = false;
    let mut step = 1e-2;
    while step > 1e-10 && !improved {
        for i in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut cand = best.clone();
                cand[i] += sign * step * (1.0 + best[i].abs());
                let fc = lik.value(&cand);
                if fc.is_finite() && fc < fbest {
                    best = cand;
                    fbest = fc;
                    improved = true;
                }
            }
        }
        step *= 0.1;
    }
    improved.then_some((best, fbest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svmodel::{lse_fit, unvech};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn wishart_like(rng: &mut ChaCha8Rng, mean: &Matrix, dof: usize) -> Matrix {
        // average of outer products of Gaussian vectors with covariance `mean`
        let chol = mean.clone().cholesky().unwrap().l();
        let r = mean.nrows();
        let mut acc = Matrix::zeros(r, r);
        for _ in 0..dof {
            let z = nalgebra::DVector::from_fn(r, |_, _| StandardNormal.sample(rng));
            let v = &chol * z;
            acc += &v * v.transpose();
        }
        acc / dof as f64
    }

    #[test]
    fn iid_series_gives_constant_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mean = unvech(&[1.0, 0.2, 0.5], 2).unwrap();
        let psi: Vec<Matrix> = (0..400).map(|_| wishart_like(&mut rng, &mean, 20)).collect();
        let init = lse_fit(&psi, 1).unwrap().theta;
        let fit = qmle_fit(&psi, &init, &QmleOptions::default()).unwrap();
        let implied = fit.theta.stationary_mean().unwrap();
        let sample_mean = psi.iter().fold(Matrix::zeros(2, 2), |a, m| a + m) / psi.len() as f64;
        assert!((implied - &sample_mean).abs().max() < 0.05);
        assert!(fit.theta.betas[0].abs().max() < 0.25);
        assert!(fit.objective >= qmle_objective(&init, &psi, None) - 1e-12);
    }

    #[test]
    fn objective_trace_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mean = unvech(&[1.0, -0.1, 0.7], 2).unwrap();
        let psi: Vec<Matrix> = (0..200).map(|_| wishart_like(&mut rng, &mean, 10)).collect();
        let init = lse_fit(&psi, 1).unwrap().theta;
        let fit = qmle_fit(&psi, &init, &QmleOptions::default()).unwrap();
        assert!(fit.objective_trace.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    }

    #[test]
    fn non_finite_init_is_an_error() {
        let psi = vec![Matrix::identity(2, 2); 10];
        let mut init = SVParams::zeros(2, 1);
        init.beta0[0] = f64::NAN;
        assert!(matches!(qmle_fit(&psi, &init, &QmleOptions::default()), Err(Error::NonFiniteObjective)));
    }

    #[test]
    fn exact_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mean = unvech(&[1.0, 0.3, 0.8], 2).unwrap();
        let psi: Vec<Matrix> = (0..60).map(|_| wishart_like(&mut rng, &mean, 8)).collect();
        let init = lse_fit(&psi, 2).unwrap().theta;
        let lik = Likelihood::new(&psi, 2, None);
        let x = init.to_theta();
        let mut exact = vec![0.0; x.len()];
        let e = lik.eval_with_gradient(&x, Some(&mut exact));
        assert_eq!(e.repairs, 0);
        let mut numeric = vec![0.0; x.len()];
        lik.numerical_gradient(&x, &mut numeric);
        for (a, b) in exact.iter().zip(&numeric) {
            assert!((a - b).abs() < 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn floor_repairs_are_counted() {
        let psi = vec![Matrix::identity(2, 2); 10];
        // H = 0 everywhere: every day is floored
        let init = SVParams::zeros(2, 1);
        let lik = Likelihood::new(&psi, 1, Some(1e-3));
        let e = lik.eval(&init.to_theta());
        assert_eq!(e.repairs, 9);
        assert!(e.penalty > 0.0);
    }
}
