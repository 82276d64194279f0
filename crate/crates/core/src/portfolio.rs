//! Minimum-variance portfolios under a budget and a gross-exposure bound.

use nalgebra::DVector;

use crate::error::{mismatch, Error, Result};
use crate::linalg::{self, Matrix, Vector};

const SYMMETRY_TOL: f64 = 1e-10;
const KKT_TOL: f64 = 1e-9;
const MAX_FISTA_ITER: usize = 20_000;

#[derive(Debug, Clone)]
pub struct PortfolioProblem {
    /// Daily covariance.
    pub sigma: Matrix,
    /// Gross exposure bound ‖w‖₁ ≤ c0, c0 ∈ [1, 2].
    pub c0: f64,
    /// Diagonal regularizer; `None` uses 1e-8 · tr(Σ)/p.
    pub ridge: Option<f64>,
}

impl PortfolioProblem {
    pub fn new(sigma: Matrix, c0: f64) -> Self {
        Self { sigma, c0, ridge: None }
    }

    /// PSD-projects a predicted covariance before building the problem.
    pub fn from_prediction(prediction: &Matrix, c0: f64) -> Self {
        let mut s = prediction.clone();
        linalg::symmetrize(&mut s);
        let e = linalg::sym_eigen_desc(&s);
        if e.values.iter().any(|&l| l < 0.0) {
            s = linalg::reconstruct(&e, |l| l.max(0.0));
        }
        Self::new(s, c0)
    }
}

#[derive(Debug, Clone)]
pub struct PortfolioResult {
    pub weights: Vector,
    /// wᵀΣw in daily variance units.
    pub objective: f64,
    pub gross_exposure: f64,
    pub feasible: bool,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Euclidean projection of (a, b) onto {x, y ≥ 0, Σx − Σy = 1, Σx + Σy ≤ c0}.
fn project(a: &[f64], b: &[f64], c0: f64, x: &mut [f64], y: &mut [f64]) {
    // x = (a + ν)₊, y = (b − ν)₊ with Σx − Σy = 1 (gross bound inactive)
    let f = |nu: f64| -> f64 {
        a.iter().map(|v| (v + nu).max(0.0)).sum::<f64>() - b.iter().map(|v| (v - nu).max(0.0)).sum::<f64>() - 1.0
    };
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let bmax = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = -amax.max(-bmax) - 1.0;
    let mut hi = (1.0 - amin).max(bmax) + 1.0;
    while f(lo) > 0.0 {
        lo = 2.0 * lo - 1.0;
    }
    while f(hi) < 0.0 {
        hi = 2.0 * hi + 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    // exact solve on the active sets at the bracket midpoint
    let mid = 0.5 * (lo + hi);
    let (mut count, mut sa, mut sb) = (0usize, 0.0, 0.0);
    for v in a {
        if v + mid > 0.0 {
            count += 1;
            sa += v;
        }
    }
    for v in b {
        if v - mid > 0.0 {
            count += 1;
            sb += v;
        }
    }
    let nu = if count > 0 { (1.0 - sa + sb) / count as f64 } else { mid };
    let nu = if nu >= lo - 1e-12 && nu <= hi + 1e-12 { nu } else { mid };
    for (xi, v) in x.iter_mut().zip(a) {
        *xi = (v + nu).max(0.0);
    }
    for (yi, v) in y.iter_mut().zip(b) {
        *yi = (v - nu).max(0.0);
    }
    let gross: f64 = x.iter().sum::<f64>() + y.iter().sum::<f64>();
    if gross > c0 {
        simplex_project(a, 0.5 * (1.0 + c0), x);
        simplex_project(b, 0.5 * (c0 - 1.0), y);
    }
}

/// Projection of `v` onto {z ≥ 0, Σz = mass}.
pub(crate) fn simplex_project(v: &[f64], mass: f64, out: &mut [f64]) {
    if mass <= 0.0 {
        out.iter_mut().for_each(|z| *z = 0.0);
        return;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let mut cum = 0.0;
    let mut tau = 0.0;
    for (i, s) in sorted.iter().enumerate() {
        cum += s;
        let t = (cum - mass) / (i + 1) as f64;
        if s - t > 0.0 {
            tau = t;
        }
    }
    for (z, x) in out.iter_mut().zip(v) {
        *z = (x - tau).max(0.0);
    }
}

/// Solution of the equality-constrained QP on a support with fixed signs.
struct Candidate {
    w: Vector,
    mu: f64,
    lambda: f64,
}

/// Solves min wᵀΣw on `support` subject to 1ᵀw = 1 and, if `gross`,
/// sᵀw = c0, via the KKT system.
fn solve_on_support(sigma: &Matrix, support: &[usize], signs: &[f64], gross: bool, c0: f64) -> Option<Candidate> {
    let k = support.len();
    let extra = if gross { 2 } else { 1 };
    let dim = k + extra;
    let mut a = Matrix::zeros(dim, dim);
    let mut rhs = Vector::zeros(dim);
    for (i, &si) in support.iter().enumerate() {
        for (j, &sj) in support.iter().enumerate() {
            a[(i, j)] = 2.0 * sigma[(si, sj)];
        }
        a[(i, k)] = -1.0;
        a[(k, i)] = 1.0;
        if gross {
            a[(i, k + 1)] = signs[i];
            a[(k + 1, i)] = signs[i];
        }
    }
    rhs[k] = 1.0;
    if gross {
        rhs[k + 1] = c0;
    }
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = Vector::zeros(sigma.nrows());
    for (i, &si) in support.iter().enumerate() {
        w[si] = sol[i];
    }
    Some(Candidate { w, mu: sol[k], lambda: if gross { sol[k + 1] } else { 0.0 } })
}

/// KKT residual of w for min wᵀΣw s.t. 1ᵀw = 1, ‖w‖₁ ≤ c0, with
/// multipliers chosen to minimize the residual.
pub fn kkt_residual(sigma: &Matrix, w: &Vector, c0: f64) -> f64 {
    let g = sigma * w * 2.0;
    let budget = (w.sum() - 1.0).abs();
    let gross = w.iter().map(|v| v.abs()).sum::<f64>();
    let excess = (gross - c0).max(0.0);
    let tol = 1e-12;
    let pos: Vec<usize> = (0..w.len()).filter(|&i| w[i] > tol).collect();
    let neg: Vec<usize> = (0..w.len()).filter(|&i| w[i] < -tol).collect();
    // on the support: g_i − μ + λ s_i = 0 ⇒ μ − λ = g_i (long), μ + λ = g_i (short)
    let mean = |idx: &[usize]| idx.iter().map(|&i| g[i]).sum::<f64>() / idx.len().max(1) as f64;
    let (mut mu, mut lambda) = match (pos.is_empty(), neg.is_empty()) {
        (false, false) => {
            let (gl, gs) = (mean(&pos), mean(&neg));
            (0.5 * (gl + gs), 0.5 * (gs - gl))
        }
        (false, true) => (mean(&pos), 0.0),
        (true, false) => (mean(&neg), 0.0),
        (true, true) => (0.0, 0.0),
    };
    if neg.is_empty() && c0 - gross <= 1e-9 {
        // no-short-sale corner: λ only needs to cover the off-support spread
        let off_max = (0..w.len()).filter(|&i| w[i].abs() <= tol).map(|i| (g[i] - mu).abs()).fold(0.0, f64::max);
        lambda = off_max;
        mu += lambda;
    }
    let lambda_neg = (-lambda).max(0.0);
    let lambda = lambda.max(0.0);
    let mut stat = 0.0_f64;
    for i in 0..w.len() {
        let r = if w[i] > tol {
            g[i] - mu + lambda
        } else if w[i] < -tol {
            g[i] - mu - lambda
        } else {
            ((g[i] - mu).abs() - lambda).max(0.0)
        };
        stat = stat.max(r.abs());
    }
    let slack = lambda * (c0 - gross).max(0.0);
    budget.max(excess).max(stat).max(lambda_neg).max(slack)
}

fn fista(sigma: &Matrix, c0: f64) -> (Vector, usize) {
    let p = sigma.nrows();
    let lmax = linalg::sym_eigen_desc(sigma).values[0].max(1e-300);
    let step = 1.0 / (4.0 * lmax);
    let mut x = vec![1.0 / p as f64; p];
    let mut y = vec![0.0; p];
    let (mut xp, mut yp) = (x.clone(), y.clone());
    let (mut zx, mut zy) = (x.clone(), y.clone());
    let (mut ax, mut ay) = (vec![0.0; p], vec![0.0; p]);
    let mut t: f64 = 1.0;
    let mut iterations = 0;
    let objective = |x: &[f64], y: &[f64]| {
        let w = DVector::from_iterator(p, x.iter().zip(y).map(|(a, b)| a - b));
        w.dot(&(sigma * &w))
    };
    let mut fprev = objective(&x, &y);
    for it in 0..MAX_FISTA_ITER {
        iterations = it + 1;
        let w = DVector::from_iterator(p, zx.iter().zip(&zy).map(|(a, b)| a - b));
        let g = sigma * w * 2.0;
        for i in 0..p {
            ax[i] = zx[i] - step * g[i];
            ay[i] = zy[i] + step * g[i];
        }
        xp.copy_from_slice(&x);
        yp.copy_from_slice(&y);
        project(&ax, &ay, c0, &mut x, &mut y);
        let f = objective(&x, &y);
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if f > fprev {
            // adaptive restart
            t = 1.0;
            zx.copy_from_slice(&x);
            zy.copy_from_slice(&y);
        } else {
            let beta = (t - 1.0) / tn;
            for i in 0..p {
                zx[i] = x[i] + beta * (x[i] - xp[i]);
                zy[i] = y[i] + beta * (y[i] - yp[i]);
            }
            t = tn;
        }
        let change: f64 = x.iter().zip(&xp).chain(y.iter().zip(&yp)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < 1e-13 && it > 10 {
            break;
        }
        fprev = f;
    }
    (DVector::from_iterator(p, x.iter().zip(&y).map(|(a, b)| a - b)), iterations)
}

/// Refines an approximate solution by an active-set method on the sign
/// pattern, adding or dropping one coordinate at a time.
fn polish(sigma: &Matrix, w0: &Vector, c0: f64) -> Option<Vector> {
    let p = w0.len();
    let scale = w0.amax().max(1e-300);
    let mut signs: Vec<f64> = w0.iter().map(|&v| if v.abs() > 1e-7 * scale { v.signum() } else { 0.0 }).collect();
    let gross_now: f64 = w0.iter().map(|v| v.abs()).sum();
    let mut gross = signs.iter().any(|&s| s < 0.0) && gross_now >= c0 - 1e-6;
    for _ in 0..(4 * p + 10) {
        let support: Vec<usize> = (0..p).filter(|&i| signs[i] != 0.0).collect();
        if support.is_empty() {
            return None;
        }
        let s: Vec<f64> = support.iter().map(|&i| signs[i]).collect();
        let all_long = s.iter().all(|&v| v > 0.0);
        let use_gross = gross && !all_long;
        let cand = solve_on_support(sigma, &support, &s, use_gross, c0)?;
        let w = cand.w;
        // drop coordinates whose sign flipped
        if let Some(&i) = support.iter().find(|&&i| w[i] * signs[i] <= 0.0) {
            signs[i] = 0.0;
            continue;
        }
        let gross_w: f64 = w.iter().map(|v| v.abs()).sum();
        if !use_gross && gross_w > c0 + 1e-12 {
            if all_long {
                return None;
            }
            gross = true;
            continue;
        }
        let (mu, lambda) = (cand.mu, cand.lambda);
        if use_gross && lambda < -1e-14 {
            gross = false;
            continue;
        }
        let g = sigma * &w * 2.0;
        // off-support violation
        let mut worst = None;
        let mut worst_v = KKT_TOL * 0.01;
        for i in 0..p {
            if signs[i] != 0.0 {
                continue;
            }
            let d = g[i] - mu;
            let v = if all_long && !gross && c0 - gross_w <= 1e-12 {
                // no-short-sale corner: any λ ≥ 0 works, only d ≥ 0 matters
                -d
            } else {
                d.abs() - lambda.max(0.0)
            };
            if v > worst_v {
                worst_v = v;
                worst = Some((i, if d < 0.0 { 1.0 } else { -1.0 }));
            }
        }
        match worst {
            Some((i, sgn)) => {
                if sgn < 0.0 && c0 - 1.0 <= 0.0 {
                    return Some(w);
                }
                signs[i] = sgn;
            }
            None => return Some(w),
        }
    }
    None
}

/// Solves min wᵀΣw s.t. 1ᵀw = 1, ‖w‖₁ ≤ c0.
pub fn min_variance(problem: &PortfolioProblem) -> Result<PortfolioResult> {
    let p = problem.sigma.nrows();
    if problem.sigma.ncols() != p || p == 0 {
        return Err(mismatch("non-empty square covariance", format!("{}x{}", p, problem.sigma.ncols())));
    }
    let c0 = problem.c0;
    if !(1.0..=2.0).contains(&c0) {
        return Err(Error::InvalidConfig(format!("gross exposure bound must be in [1, 2], got {c0}")));
    }
    let asym = linalg::max_asymmetry(&problem.sigma);
    if asym > SYMMETRY_TOL * linalg::max_abs(&problem.sigma).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let ridge = problem.ridge.unwrap_or(1e-8 * linalg::trace(&problem.sigma) / p as f64);
    if !(ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be nonnegative, got {ridge}")));
    }
    let mut sigma = problem.sigma.clone();
    linalg::symmetrize(&mut sigma);
    for i in 0..p {
        sigma[(i, i)] += ridge;
    }
    if sigma.clone().cholesky().is_none() {
        let min = linalg::sym_eigen_desc(&sigma).values[p - 1];
        return Err(Error::NotPositiveDefinite(format!("covariance after ridge has minimum eigenvalue {min:e}")));
    }

    let (approx, iterations) = fista(&sigma, c0);
    let mut weights = approx.clone();
    let mut kkt = kkt_residual(&sigma, &approx, c0);
    if let Some(w) = polish(&sigma, &approx, c0) {
        let r = kkt_residual(&sigma, &w, c0);
        if r <= kkt {
            weights = w;
            kkt = r;
        }
    }
    if kkt > KKT_TOL {
        log::warn!("portfolio KKT residual {kkt:e} above tolerance");
    }
    let gross_exposure = weights.iter().map(|v| v.abs()).sum::<f64>();
    let feasible = (weights.sum() - 1.0).abs() <= 1e-8 && gross_exposure <= c0 + 1e-8;
    Ok(PortfolioResult {
        objective: weights.dot(&(&problem.sigma * &weights)),
        weights,
        gross_exposure,
        feasible,
        kkt_residual: kkt,
        iterations,
    })
}

/// Annualized risk √(252 wᵀΓw).
pub fn oos_risk(weights: &Vector, realized: &Matrix) -> Result<f64> {
    if realized.nrows() != weights.len() || realized.ncols() != weights.len() {
        return Err(mismatch(format!("{0}x{0}", weights.len()), format!("{}x{}", realized.nrows(), realized.ncols())));
    }
    Ok((252.0 * weights.dot(&(realized * weights))).max(0.0).sqrt())
}
