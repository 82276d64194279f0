//! Pre-averaging realized volatility matrices (PRVM) from noisy, possibly
//! non-synchronous intraday log prices.

use crate::error::{mismatch, Error, Result};
use crate::linalg::{self, Matrix, SortedEigen};

pub const DEFAULT_WINDOW_THETA: f64 = 1.0;

/// One asset's ticks on one day. Times are in day units, in (k−1, k].
#[derive(Debug, Clone, PartialEq)]
pub struct AssetTicks {
    pub times: Vec<f64>,
    pub prices: Vec<f64>,
}

/// Ticks of all assets on one day.
#[derive(Debug, Clone, PartialEq)]
pub enum DayTicks {
    /// Common observation times; `prices` is ticks × assets.
    Sync { times: Vec<f64>, prices: Matrix },
    /// Per-asset observation times.
    Async(Vec<AssetTicks>),
}

impl DayTicks {
    pub fn assets(&self) -> usize {
        match self {
            DayTicks::Sync { prices, .. } => prices.ncols(),
            DayTicks::Async(a) => a.len(),
        }
    }

    pub fn asset(&self, i: usize) -> AssetTicks {
        match self {
            DayTicks::Sync { times, prices } => {
                AssetTicks { times: times.clone(), prices: prices.column(i).iter().copied().collect() }
            }
            DayTicks::Async(a) => a[i].clone(),
        }
    }

    pub fn validate(&self, day: usize) -> Result<()> {
        let check = |asset: usize, times: &[f64], prices: &[f64]| -> Result<()> {
            if times.len() != prices.len() {
                return Err(Error::InvalidPanel(format!("asset {asset} day {day}: times/prices length differ")));
            }
            if times.len() < 2 {
                return Err(Error::InvalidPanel(format!("asset {asset} day {day}: fewer than 2 ticks")));
            }
            if times.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidPanel(format!("asset {asset} day {day}: times not strictly increasing")));
            }
            if prices.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinitePrice { asset, day });
            }
            Ok(())
        };
        match self {
            DayTicks::Sync { times, prices } => {
                if prices.nrows() != times.len() {
                    return Err(mismatch(times.len(), prices.nrows()));
                }
                for i in 0..prices.ncols() {
                    let col: Vec<f64> = prices.column(i).iter().copied().collect();
                    check(i, times, &col)?;
                }
                Ok(())
            }
            DayTicks::Async(a) => a.iter().enumerate().try_for_each(|(i, t)| check(i, &t.times, &t.prices)),
        }
    }
}

/// Noisy intraday log prices for n days × p assets.
#[derive(Debug, Clone, PartialEq)]
pub struct TickPanel {
    pub p: usize,
    /// `days[k-1]` holds day k.
    pub days: Vec<DayTicks>,
}

impl TickPanel {
    pub fn new(p: usize, days: Vec<DayTicks>) -> Result<Self> {
        for (k, d) in days.iter().enumerate() {
            if d.assets() != p {
                return Err(mismatch(format!("{p} assets on day {}", k + 1), d.assets()));
            }
            d.validate(k + 1)?;
        }
        Ok(Self { p, days })
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    pub fn is_synchronous(&self) -> bool {
        self.days.iter().all(|d| matches!(d, DayTicks::Sync { .. }))
    }
}

/// One day's integrated volatility estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyVolMatrix {
    pub day: usize,
    pub matrix: Matrix,
    pub psd_projected: bool,
}

/// Weight function g(x) = min(x, 1 − x).
fn g(x: f64) -> f64 {
    x.min(1.0 - x)
}

/// Pre-averaging constants for a window of `k` increments.
#[derive(Debug, Clone, Copy)]
pub struct PreAveraging {
    pub k: usize,
    pub psi1: f64,
    pub psi2: f64,
}

impl PreAveraging {
    pub fn new(k: usize) -> Self {
        let kf = k as f64;
        let psi2 = (1..k).map(|h| g(h as f64 / kf).powi(2)).sum::<f64>() / kf;
        let psi1 = kf * (1..=k).map(|h| (g(h as f64 / kf) - g((h - 1) as f64 / kf)).powi(2)).sum::<f64>();
        Self { k, psi1, psi2 }
    }

    /// Window k_n = ⌈θ √increments⌉, at least 2.
    pub fn window(theta: f64, increments: usize) -> usize {
        ((theta * (increments as f64).sqrt()).ceil() as usize).max(2)
    }
}

/// Refresh-time sampling: returns the refresh times and the previous-tick
/// prices of every asset at those times (ticks × assets).
pub fn refresh_time(assets: &[AssetTicks]) -> (Vec<f64>, Matrix) {
    let p = assets.len();
    let mut idx = vec![0usize; p];
    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    if assets.iter().any(|a| a.times.is_empty()) {
        return (times, Matrix::zeros(0, p));
    }
    let mut tau = assets.iter().map(|a| a.times[0]).fold(f64::NEG_INFINITY, f64::max);
    loop {
        let mut row = Vec::with_capacity(p);
        for (i, a) in assets.iter().enumerate() {
            while idx[i] + 1 < a.times.len() && a.times[idx[i] + 1] <= tau {
                idx[i] += 1;
            }
            row.push(a.prices[idx[i]]);
        }
        times.push(tau);
        rows.push(row);
        let mut next = f64::NEG_INFINITY;
        for (i, a) in assets.iter().enumerate() {
            match a.times.get(idx[i] + 1) {
                Some(&t) => next = next.max(t),
                None => {
                    let prices = Matrix::from_fn(rows.len(), p, |r, c| rows[r][c]);
                    return (times, prices);
                }
            }
        }
        tau = next;
    }
}

fn noise_variance(prices: &[f64]) -> f64 {
    let n = prices.len().saturating_sub(1);
    if n == 0 {
        return 0.0;
    }
    let ss: f64 = prices.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum();
    (ss / (2.0 * n as f64)).max(0.0)
}

/// PRVM estimate of day `day` (1-based) from the panel.
pub fn prvm(panel: &TickPanel, day: usize, window_theta: f64) -> Result<DailyVolMatrix> {
    let ticks = panel.days.get(day.wrapping_sub(1)).ok_or_else(|| mismatch(format!("day in 1..={}", panel.n_days()), day))?;
    prvm_day(ticks, day, window_theta)
}

/// PRVM estimate for a single day's ticks.
pub fn prvm_day(ticks: &DayTicks, day: usize, window_theta: f64) -> Result<DailyVolMatrix> {
    if !(window_theta > 0.0) {
        return Err(Error::InvalidConfig(format!("window_theta must be positive, got {window_theta}")));
    }
    let (times, prices, eta) = match ticks {
        DayTicks::Sync { times, prices } => {
            let eta: Vec<f64> = (0..prices.ncols())
                .map(|i| {
                    let col = prices.column(i);
                    if col.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinitePrice { asset: i, day });
                    }
                    Ok(noise_variance(col.as_slice()))
                })
                .collect::<Result<_>>()?;
            (times.clone(), prices.clone(), eta)
        }
        DayTicks::Async(assets) => {
            for (i, a) in assets.iter().enumerate() {
                if a.prices.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinitePrice { asset: i, day });
                }
            }
            let eta = assets.iter().map(|a| noise_variance(&a.prices)).collect();
            let (t, p) = refresh_time(assets);
            (t, p, eta)
        }
    };
    let m_ticks = times.len();
    let p = prices.ncols();
    let increments = m_ticks.saturating_sub(1);
    let k = PreAveraging::window(window_theta, increments);
    if m_ticks < 2 * k {
        return Err(Error::WindowExceedsSample { ticks: m_ticks, required: 2 * k });
    }
    let span = times[m_ticks - 1] - times[0];
    if !(span > 0.0) {
        return Err(Error::InvalidPanel(format!("day {day}: zero time span")));
    }
    let pa = PreAveraging::new(k);
    let weights: Vec<f64> = (1..k).map(|h| g(h as f64 / k as f64)).collect();
    let n_windows = increments + 2 - k;

    let mut ybar = Matrix::zeros(n_windows, p);
    for a in 0..p {
        let col = prices.column(a);
        let dy: Vec<f64> = col.as_slice().windows(2).map(|w| w[1] - w[0]).collect();
        let out = ybar.column_mut(a);
        for (j, slot) in out.into_iter().enumerate() {
            // Ȳ_j = Σ_{h=1}^{k−1} g(h/k) ΔY_{j+h}; dy[i] holds ΔY_{i+1}
            *slot = weights.iter().enumerate().map(|(h, w)| w * dy[j + h]).sum();
        }
    }
    let density = increments as f64 / span;
    let scale = density / (n_windows as f64 * k as f64 * pa.psi2);
    let mut est = ybar.tr_mul(&ybar) * scale;
    let bias = density * pa.psi1 / ((k * k) as f64 * pa.psi2);
    for i in 0..p {
        est[(i, i)] = (est[(i, i)] - bias * eta[i]).max(0.0);
    }
    linalg::symmetrize(&mut est);
    Ok(DailyVolMatrix { day, matrix: est, psd_projected: false })
}

/// Clips negative eigenvalues at zero. Returns the projection together with
/// its eigen-decomposition (eigenvalues already clipped, descending).
pub fn psd_project_with_eigen(v: &DailyVolMatrix) -> (DailyVolMatrix, SortedEigen) {
    let mut e = linalg::sym_eigen_desc(&v.matrix);
    let needs = e.values.iter().any(|&l| l < 0.0);
    let matrix = if needs {
        e.values.iter_mut().for_each(|l| *l = l.max(0.0));
        linalg::reconstruct(&e, |l| l)
    } else {
        v.matrix.clone()
    };
    (DailyVolMatrix { day: v.day, matrix, psd_projected: true }, e)
}

/// Nearest PSD matrix in Frobenius norm (negative eigenvalues set to 0).
pub fn psd_project(v: &DailyVolMatrix) -> DailyVolMatrix {
    psd_project_with_eigen(v).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn sync_day(prices: Matrix) -> DayTicks {
        let m = prices.nrows();
        DayTicks::Sync { times: (1..=m).map(|j| j as f64 / m as f64).collect(), prices }
    }

    #[test]
    fn constant_prices_give_zero() {
        let day = sync_day(Matrix::from_element(390, 3, 4.2));
        let est = prvm_day(&day, 1, 1.0).unwrap();
        assert_eq!(est.matrix, Matrix::zeros(3, 3));
    }

    #[test]
    fn window_exceeding_sample_is_an_error() {
        let day = sync_day(Matrix::from_element(5, 1, 0.0));
        assert!(matches!(prvm_day(&day, 1, 3.0), Err(Error::WindowExceedsSample { .. })));
    }

    #[test]
    fn non_finite_price_is_reported() {
        let mut prices = Matrix::zeros(100, 2);
        prices[(40, 1)] = f64::NAN;
        match prvm_day(&sync_day(prices), 7, 1.0) {
            Err(Error::NonFinitePrice { asset, day }) => assert_eq!((asset, day), (1, 7)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn psi_constants_for_triangular_kernel() {
        // |g(h/k) − g((h−1)/k)| = 1/k for every h, so ψ₁ = 1 exactly
        let pa = PreAveraging::new(20);
        assert!((pa.psi1 - 1.0).abs() < 1e-12);
        assert!((pa.psi2 - 1.0 / 12.0).abs() < 0.01);
    }

    #[test]
    fn output_is_exactly_symmetric_and_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = 390;
        let p = 4;
        let mut prices = Matrix::zeros(m, p);
        for i in 0..p {
            let mut x = 0.0;
            for j in 0..m {
                let z: f64 = StandardNormal.sample(&mut rng);
                x += 0.05 * z;
                prices[(j, i)] = x;
            }
        }
        let est = prvm_day(&sync_day(prices.clone()), 1, 1.0).unwrap().matrix;
        assert_eq!(est, est.transpose());
        let perm = [2usize, 0, 3, 1];
        let permuted = Matrix::from_fn(m, p, |j, c| prices[(j, perm[c])]);
        let est_p = prvm_day(&sync_day(permuted), 1, 1.0).unwrap().matrix;
        for a in 0..p {
            for b in 0..p {
                assert!((est_p[(a, b)] - est[(perm[a], perm[b])]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn noiseless_small_window_tracks_realized_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = 23_400;
        let p = 5;
        let mut x = vec![0.0; p];
        let mut prices = Matrix::zeros(m, p);
        let mut rc = Matrix::zeros(p, p);
        let n = Normal::new(0.0, (1.0 / m as f64).sqrt()).unwrap();
        for j in 0..m {
            let common: f64 = n.sample(&mut rng);
            let dx: Vec<f64> = (0..p).map(|i| 0.2 * (i as f64 + 1.0) * common + 0.3 * n.sample(&mut rng)).collect();
            if j > 0 {
                for a in 0..p {
                    for b in 0..p {
                        rc[(a, b)] += dx[a] * dx[b];
                    }
                }
            }
            for i in 0..p {
                x[i] += dx[i];
                prices[(j, i)] = x[i];
            }
        }
        let est = prvm_day(&sync_day(prices), 1, 0.05).unwrap().matrix;
        let rel = (&est - &rc).norm() / rc.norm();
        assert!(rel < 0.10, "relative error {rel}");
    }

    #[test]
    fn refresh_time_of_synchronous_ticks_is_identity() {
        let a = AssetTicks { times: vec![0.1, 0.2, 0.3], prices: vec![1.0, 2.0, 3.0] };
        let b = AssetTicks { times: vec![0.1, 0.2, 0.3], prices: vec![4.0, 5.0, 6.0] };
        let (t, p) = refresh_time(&[a, b]);
        assert_eq!(t, vec![0.1, 0.2, 0.3]);
        assert_eq!(p.column(1).iter().copied().collect::<Vec<_>>(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn refresh_time_waits_for_all_assets() {
        let a = AssetTicks { times: vec![0.1, 0.2, 0.3, 0.4], prices: vec![1.0, 2.0, 3.0, 4.0] };
        let b = AssetTicks { times: vec![0.15, 0.35], prices: vec![10.0, 20.0] };
        let (t, p) = refresh_time(&[a, b]);
        assert_eq!(t, vec![0.15, 0.35]);
        assert_eq!(p.column(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0]);
        assert_eq!(p.column(1).iter().copied().collect::<Vec<_>>(), vec![10.0, 20.0]);
    }

    #[test]
    fn psd_project_clips_diagonal() {
        let v = DailyVolMatrix { day: 1, matrix: Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]), psd_projected: false };
        let out = psd_project(&v);
        assert!((out.matrix - Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).abs().max() < 1e-15);
        assert!(out.psd_projected);
    }

    #[test]
    fn psd_project_fixes_psd_input() {
        let a = Matrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 0.7]);
        let v = DailyVolMatrix { day: 1, matrix: a.clone(), psd_projected: false };
        assert!((psd_project(&v).matrix - a).abs().max() < 1e-12);
    }

    fn sym(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let a = Matrix::from_vec(n, n, v);
            (&a + a.transpose()) * 0.5
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn psd_project_is_idempotent_and_keeps_nonnegative_eigs(a in sym(12)) {
            let v = DailyVolMatrix { day: 1, matrix: a.clone(), psd_projected: false };
            let once = psd_project(&v);
            let twice = psd_project(&once);
            prop_assert!((&once.matrix - &twice.matrix).abs().max() < 1e-12);
            let before = linalg::sym_eigen_desc(&a).values;
            let after = linalg::sym_eigen_desc(&once.matrix).values;
            prop_assert!(after.iter().all(|&l| l >= -1e-12));
            for (b, a) in before.iter().zip(after.iter()) {
                if *b >= 0.0 { prop_assert!(*a >= b - 1e-12); }
            }
        }
    }
}
