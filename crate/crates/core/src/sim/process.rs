//! Euler scheme for the instantaneous factor volatility Σ_t and the
//! observed price panel.

use nalgebra::DVector;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, small, Matrix};

fn to_flat(m: &Matrix) -> Vec<f64> {
    let r = m.nrows();
    let mut out = vec![0.0; r * m.ncols()];
    for i in 0..r {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    out
}

fn from_flat(v: &[f64], r: usize) -> Matrix {
    Matrix::from_fn(r, r, |i, j| v[i * r + j])
}

/// State of the factor volatility process carried across days.
#[derive(Debug, Clone)]
pub struct FactorState {
    /// Σ at the last integer time.
    pub sigma: Matrix,
    /// Past daily integrals, most recent first (length q).
    pub psi_history: Vec<Matrix>,
}

/// Parameters of the instantaneous factor volatility dynamics.
#[derive(Debug, Clone)]
pub struct FactorDynamics {
    pub alpha0: Matrix,
    pub alpha: Vec<Matrix>,
    pub nu: Matrix,
}

/// Output of one simulated day of the factor process.
pub struct FactorDay {
    /// Daily integral Ψ_k (left-endpoint Riemann sum).
    pub psi: Matrix,
    /// Factor increments per observation interval (obs × r), if requested.
    pub increments: Option<Matrix>,
    pub clips: usize,
}

impl FactorDynamics {
    pub fn r(&self) -> usize {
        self.alpha0.nrows()
    }

    /// Simulates one day with `steps` substeps. When `obs` is `Some(m)`,
    /// factor increments df = chol(Σ_t) dB_t are accumulated over each of
    /// the m observation intervals (`steps` must be a multiple of m).
    pub fn step_day(
        &self,
        state: &mut FactorState,
        steps: usize,
        obs: Option<usize>,
        rng: &mut ChaCha8Rng,
        day: usize,
    ) -> Result<FactorDay> {
        let r = self.r();
        let rr = r * r;
        let q = self.alpha.len();
        let dt = 1.0 / steps as f64;
        let sqdt = dt.sqrt();

        let mut base = &self.alpha0 * self.alpha0.transpose();
        for j in 1..q {
            base += &self.alpha[j] * &state.psi_history[j - 1] * self.alpha[j].transpose();
        }
        let base = to_flat(&base);
        let prev = to_flat(&state.sigma);
        let a1 = to_flat(&self.alpha[0]);
        let nu_t = to_flat(&self.nu.transpose());

        let mut integral = vec![0.0; rr];
        let mut sandwiched = vec![0.0; rr]; // α₁ (∫Σ) α₁ᵀ
        let mut z = vec![0.0; r];
        let mut sigma = vec![0.0; rr];
        let mut chol = vec![0.0; rr];
        let mut tmp = vec![0.0; rr];
        let mut asig = vec![0.0; rr];
        let mut vals = vec![0.0; r];
        let mut vecs = vec![0.0; rr];
        let mut work = vec![0.0; rr];
        let mut db = vec![0.0; r];
        let mut clips = 0;

        let per_obs = obs.map(|m| steps / m);
        let mut increments = obs.map(|m| Matrix::zeros(m, r));

        for i in 0..steps {
            let s = i as f64 * dt;
            let w = 1.0 - s;
            for a in 0..r {
                for b in 0..r {
                    let idx = a * r + b;
                    sigma[idx] = w * prev[idx] + s * base[idx] + sandwiched[idx] + w * z[a] * z[b];
                }
            }
            for a in 0..r {
                for b in (a + 1)..r {
                    let v = 0.5 * (sigma[a * r + b] + sigma[b * r + a]);
                    sigma[a * r + b] = v;
                    sigma[b * r + a] = v;
                }
            }
            let root_is_chol = small::cholesky(&sigma, &mut chol, r);
            if !root_is_chol {
                small::jacobi_eigen(&sigma, &mut vals, &mut vecs, &mut work, r);
                let trace: f64 = (0..r).map(|a| sigma[a * r + a]).sum();
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                if min < -1e-8 * trace.abs().max(1e-300) {
                    return Err(Error::NonPsdVolatility { day, substep: i, min_eig: min });
                }
                if min < 0.0 {
                    clips += 1;
                }
                // Σ = V diag(λ⁺) Vᵀ; root V diag(√λ⁺)
                for a in 0..r {
                    for b in 0..r {
                        let mut acc = 0.0;
                        for e in 0..r {
                            acc += vecs[a * r + e] * vals[e].max(0.0) * vecs[b * r + e];
                        }
                        sigma[a * r + b] = acc;
                    }
                }
                for a in 0..r {
                    for e in 0..r {
                        chol[a * r + e] = vecs[a * r + e] * vals[e].max(0.0).sqrt();
                    }
                }
            }
            for idx in 0..rr {
                integral[idx] += sigma[idx] * dt;
            }
            small::sandwich(&a1, &sigma, &mut asig, &mut tmp, r);
            for idx in 0..rr {
                sandwiched[idx] += asig[idx] * dt;
            }
            if let (Some(inc), Some(per)) = (increments.as_mut(), per_obs) {
                for v in db.iter_mut() {
                    let x: f64 = StandardNormal.sample(rng);
                    *v = x * sqdt;
                }
                let row = i / per;
                for a in 0..r {
                    let mut acc = 0.0;
                    for b in 0..r {
                        acc += chol[a * r + b] * db[b];
                    }
                    inc[(row, a)] += acc;
                }
            }
            for v in db.iter_mut() {
                let x: f64 = StandardNormal.sample(rng);
                *v = x * sqdt;
            }
            for a in 0..r {
                let mut acc = 0.0;
                for b in 0..r {
                    acc += nu_t[a * r + b] * db[b];
                }
                z[a] += acc;
            }
        }

        let mut psi = from_flat(&integral, r);
        linalg::symmetrize(&mut psi);
        let mut next_sigma = from_flat(&base, r) + &self.alpha[0] * &psi * self.alpha[0].transpose();
        linalg::symmetrize(&mut next_sigma);
        state.sigma = next_sigma;
        state.psi_history.insert(0, psi.clone());
        state.psi_history.truncate(q.max(1));
        Ok(FactorDay { psi, increments, clips })
    }
}

/// Constant-covariance idiosyncratic increments and observation noise.
pub struct PriceGenerator {
    pub loading: Matrix,
    /// Lower Cholesky factor of Γˢ.
    pub idio_chol: Matrix,
    pub noise_sd: f64,
    pub drift: f64,
}

impl PriceGenerator {
    /// Advances the latent log prices through one day and returns the
    /// observed (noisy) prices, m × p.
    pub fn day_prices(&self, x: &mut DVector<f64>, factor_inc: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        let m = factor_inc.nrows();
        let p = self.loading.nrows();
        let scale = (1.0 / m as f64).sqrt();
        let normals = Matrix::from_fn(m, p, |_, _| StandardNormal.sample(rng));
        // rows: idiosyncratic increments with covariance Γˢ/m
        let idio = (&normals * self.idio_chol.transpose()) * scale;
        let systematic = factor_inc * self.loading.transpose();
        let drift = self.drift / m as f64;
        let mut latent = Matrix::zeros(m, p);
        for j in 0..m {
            for i in 0..p {
                x[i] += systematic[(j, i)] + idio[(j, i)] + drift;
                latent[(j, i)] = x[i];
            }
        }
        if self.noise_sd > 0.0 {
            for v in latent.iter_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += self.noise_sd * e;
            }
        }
        latent
    }
}

/// Per-asset thinning mask: each tick kept with probability `keep`, the
/// first and last tick of the day always kept.
pub fn thinning_mask(m: usize, p: usize, keep: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    (0..p)
        .map(|_| {
            (0..m)
                .map(|j| {
                    let u: f64 = rng.random();
                    j == 0 || j + 1 == m || u < keep
                })
                .collect()
        })
        .collect()
}
