//! Acceptance criteria 1-9. Each test prints one `criterion N: PASS|FAIL`
//! line to stderr (bypassing output capture) and then asserts.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use svito::factor::estimate_factor_vols;
use svito::harness::{run_sim_study, GridCell, ResultTable, StudyConfig};
use svito::linalg::{self, Matrix, Vector};
use svito::portfolio::{kkt_residual, min_variance, PortfolioProblem};
use svito::predict::{poet_idio, PoetConfig};
use svito::realized::{prvm_day, psd_project, DailyVolMatrix, DayTicks};
use svito::sim::{derive_beta, simulate_factor_vols, SimConfig};
use svito::svmodel::{lse_fit, qmle_fit, residuals, unvech, vech, QmleOptions, SVParams};

fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
}

fn check(n: usize, pass: bool, detail: String) {
    report(n, pass, &detail);
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_beta_mapping() {
    let start = Instant::now();
    let c = SimConfig::paper_design(10, 10, 10, 0);
    let theta = derive_beta(&c.alpha0, &c.alpha, &c.nu).unwrap();
    let elapsed = start.elapsed();
    let beta0 = [0.367, 0.0, 0.005, 0.252, -0.024, 0.143];
    #[rustfmt::skip]
    let beta1 = [
        0.021, 0.105, 0.164, 0.138, 0.418, 0.328,
        0.0, 0.055, -0.056, 0.150, 0.063, -0.219,
        0.0, -0.022, 0.033, -0.062, 0.001, 0.129,
        0.0, 0.0, 0.0, 0.175, -0.365, 0.191,
        0.0, 0.0, 0.0, -0.073, 0.179, -0.106,
        0.0, 0.0, 0.0, 0.031, -0.085, 0.060,
    ];
    let e0 = theta.beta0.iter().zip(beta0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let printed = Matrix::from_row_slice(6, 6, &beta1);
    let e1 = linalg::max_abs(&(&theta.betas[0] - printed));
    let pass = e0 <= 5e-4 && e1 <= 5e-4 && elapsed < Duration::from_secs(1);
    check(1, pass, format!("max |beta0 diff| {e0:.2e}, max |beta1 diff| {e1:.2e}, {:?}", elapsed));
}

const LONG_DAYS: usize = 20_000;
const LONG_STEPS: usize = 2_000;

/// Exact daily factor volatilities over a long horizon, shared by
/// criteria 2 and 3.
fn long_series() -> &'static (SVParams, Vec<Matrix>) {
    static CELL: OnceLock<(SVParams, Vec<Matrix>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let c = SimConfig::paper_design(10, LONG_DAYS, 10, 0);
        let theta = c.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20_000);
        let psi = simulate_factor_vols(&c, LONG_DAYS, LONG_STEPS, 50, &mut rng).unwrap();
        (theta, psi)
    })
}

#[test]
fn criterion_2_martingale_residuals() {
    let (theta, psi) = long_series();
    let res = residuals(theta, psi).unwrap();
    let n = res.len() as f64;
    let d0 = theta.d0();
    let mut worst: f64 = 0.0;
    let mut zs = Vec::new();
    for i in 0..d0 {
        let mean = res.iter().map(|e| e[i]).sum::<f64>() / n;
        let var = res.iter().map(|e| (e[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let z = mean / (var / n).sqrt();
        worst = worst.max(z.abs());
        zs.push(format!("{z:.2}"));
    }
    check(2, worst < 3.0, format!("{LONG_DAYS} days at {LONG_STEPS} steps/day, z-scores [{}]", zs.join(", ")));
}

#[test]
fn criterion_3_estimator_consistency() {
    let (theta, psi) = long_series();
    let lse = lse_fit(psi, 1).unwrap();
    let qmle = qmle_fit(psi, &lse.theta, &QmleOptions::default()).unwrap();
    let e_lse = lse.theta.max_abs_diff(theta);
    let gap = qmle.theta.max_abs_diff(&lse.theta);
    let pass = e_lse <= 0.05 && gap <= 0.01;
    check(3, pass, format!("LSE max error {e_lse:.4}, QMLE-LSE gap {gap:.4} (QMLE converged: {})", qmle.converged));
}

/// Desk-scale simulation study shared by criteria 4, 5 and 7.
fn desk_study() -> &'static ResultTable {
    static CELL: OnceLock<ResultTable> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = StudyConfig::desk_sim(20240101);
        cfg.output_dir = dir.path().to_path_buf();
        run_sim_study(&cfg, None).unwrap().table().unwrap()
    })
}

fn cell_of(t: &ResultTable, n: usize, m: usize) -> (usize, usize, usize) {
    let c = GridCell { n, m, p: 100 };
    assert!(t.rows.iter().any(|r| (r.n, r.m, r.p) == (c.n, c.m, c.p)));
    (c.n, c.m, c.p)
}

#[test]
fn criterion_4_beta_error_trends() {
    let t = desk_study();
    let ns = [125, 250];
    let ms = [390, 780];
    let mut violations = Vec::new();
    let mut checks = 0;
    for est in ["qmle", "lse"] {
        for q in ["beta0", "beta1"] {
            for norm in ["spectral", "frobenius", "max"] {
                let get = |n, m| t.get(cell_of(t, n, m), est, q, norm).unwrap();
                let mut cmp = |small: (usize, usize), large: (usize, usize), what: &str| {
                    checks += 1;
                    let (a, b) = (get(small.0, small.1), get(large.0, large.1));
                    let se = (a.se.powi(2) + b.se.powi(2)).sqrt();
                    if b.mean > a.mean + se {
                        violations.push(format!("{est} {q} {norm} {what}: {:.4} -> {:.4} (se {:.4})", a.mean, b.mean, se));
                    }
                };
                for &m in &ms {
                    cmp((ns[0], m), (ns[1], m), &format!("n up at m={m}"));
                }
                for &n in &ns {
                    cmp((n, ms[0]), (n, ms[1]), &format!("m up at n={n}"));
                }
            }
        }
    }
    for &n in &ns {
        for &m in &ms {
            for q in ["beta0", "beta1"] {
                for norm in ["spectral", "frobenius", "max"] {
                    checks += 1;
                    let a = t.get(cell_of(t, n, m), "qmle", q, norm).unwrap();
                    let b = t.get(cell_of(t, n, m), "lse", q, norm).unwrap();
                    let se = (a.se.powi(2) + b.se.powi(2)).sqrt();
                    if a.mean > b.mean + se {
                        violations
                            .push(format!("qmle > lse {q} {norm} at n={n} m={m}: {:.4} vs {:.4} (se {:.4})", a.mean, b.mean, se));
                    }
                }
            }
        }
    }
    let summary = |q: &str| {
        let r = t.get(cell_of(t, 250, 780), "qmle", q, "spectral").unwrap();
        format!("{q} qmle spectral at n=250 m=780: {:.4}", r.mean)
    };
    check(
        4,
        violations.is_empty(),
        format!(
            "{} of {checks} comparisons violated; {}; {} {}",
            violations.len(),
            summary("beta0"),
            summary("beta1"),
            violations.join("; ")
        ),
    );
}

#[test]
fn criterion_5_prediction_ordering() {
    let t = desk_study();
    let mut worst = f64::INFINITY;
    let mut lines = Vec::new();
    let mut pass = true;
    for n in [125, 250] {
        for m in [390, 780] {
            let cell = cell_of(t, n, m);
            let get = |method: &str| t.get(cell, method, "prediction", "relative_frobenius").unwrap();
            let base: Vec<_> = ["poet-prev", "prvm-prev"].iter().map(|b| get(b)).collect();
            for est in ["sv-poet-qmle", "sv-poet-lse"] {
                let a = get(est);
                for b in &base {
                    let se = (a.se.powi(2) + b.se.powi(2)).sqrt();
                    let margin = (b.mean - a.mean) / se;
                    worst = worst.min(margin);
                    pass &= margin > 2.0;
                }
            }
            lines.push(format!(
                "n={n} m={m}: qmle {:.3} lse {:.3} poet-prev {:.3} prvm-prev {:.3}",
                get("sv-poet-qmle").mean,
                get("sv-poet-lse").mean,
                base[0].mean,
                base[1].mean
            ));
        }
    }
    check(5, pass, format!("smallest margin {worst:.1} SE; {}", lines.join("; ")));
}

fn prvm_replications(m: usize, reps: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = (0.04 / m as f64).sqrt();
    let times: Vec<f64> = (1..=m).map(|j| j as f64 / m as f64).collect();
    let mut est = Vec::with_capacity(reps);
    for _ in 0..reps {
        let mut x = 0.0;
        let prices = Matrix::from_fn(m, 1, |_, _| {
            x += sd * rng.sample::<f64, _>(StandardNormal);
            x + 0.005 * rng.sample::<f64, _>(StandardNormal)
        });
        let g = prvm_day(&DayTicks::Sync { times: times.clone(), prices }, 1, 1.0).unwrap();
        est.push(g.matrix[(0, 0)]);
    }
    let mean = est.iter().sum::<f64>() / reps as f64;
    let rmse = (est.iter().map(|e| (e - 0.04).powi(2)).sum::<f64>() / reps as f64).sqrt();
    (mean, rmse)
}

#[test]
fn criterion_6_prvm_calibration() {
    let (mean, rmse_390) = prvm_replications(390, 1000, 6);
    let (_, rmse_2340) = prvm_replications(2340, 1000, 7);
    let rel = (mean / 0.04 - 1.0).abs();
    let pass = rel <= 0.05 && rmse_2340 < rmse_390;
    check(6, pass, format!("mean {mean:.5} ({:.2}% off), RMSE {rmse_390:.5} at m=390, {rmse_2340:.5} at m=2340", 100.0 * rel));
}

#[test]
fn criterion_7_rank_recovery() {
    let t = desk_study();
    let mut hits = 0.0;
    let mut reps = 0.0;
    let mut per_cell = Vec::new();
    for n in [125, 250] {
        for m in [390, 780] {
            let r = t.get(cell_of(t, n, m), "select", "rank", "hit").unwrap();
            hits += r.mean * r.replications as f64;
            reps += r.replications as f64;
            per_cell.push(format!("n={n} m={m}: {:.0}%", 100.0 * r.mean));
        }
    }
    let rate = hits / reps;
    check(7, rate >= 0.9, format!("r = 3 on {:.1}% of {reps} replications ({})", 100.0 * rate, per_cell.join(", ")));
}

fn random_sym(rng: &mut ChaCha8Rng, r: usize) -> Matrix {
    let a = Matrix::from_fn(r, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&a + a.transpose()) * 0.5
}

fn random_pd(rng: &mut ChaCha8Rng, p: usize) -> Matrix {
    let a = Matrix::from_fn(p, p + 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / (p + 3) as f64 + Matrix::identity(p, p) * 0.05
}

/// Exact minimum-variance solution on 6 assets by enumerating every sign
/// pattern and both states of the gross constraint.
fn enumeration_oracle(sigma: &Matrix, c0: f64) -> (Vector, f64) {
    let p = sigma.nrows();
    let mut best: Option<(Vector, f64)> = None;
    for code in 0..3usize.pow(p as u32) {
        let mut signs = vec![0.0; p];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = [0.0, 1.0, -1.0][c % 3];
            c /= 3;
        }
        let support: Vec<usize> = (0..p).filter(|&i| signs[i] != 0.0).collect();
        if support.is_empty() {
            continue;
        }
        for gross in [false, true] {
            let k = support.len();
            let rows = k + 1 + gross as usize;
            let mut a = Matrix::zeros(rows, rows);
            let mut b = Vector::zeros(rows);
            for (ii, &i) in support.iter().enumerate() {
                for (jj, &j) in support.iter().enumerate() {
                    a[(ii, jj)] = 2.0 * sigma[(i, j)];
                }
                a[(ii, k)] = 1.0;
                a[(k, ii)] = 1.0;
                if gross {
                    a[(ii, k + 1)] = signs[i];
                    a[(k + 1, ii)] = signs[i];
                }
            }
            b[k] = 1.0;
            if gross {
                b[k + 1] = c0;
            }
            let Some(sol) = a.lu().solve(&b) else { continue };
            let mut w = Vector::zeros(p);
            for (ii, &i) in support.iter().enumerate() {
                w[i] = sol[ii];
            }
            let sign_ok = support.iter().all(|&i| w[i] * signs[i] >= -1e-12);
            // near-singular systems can return vectors off the constraint set
            let on_budget = (w.sum() - 1.0).abs() < 1e-9;
            let on_gross = !gross || (w.abs().sum() - c0).abs() < 1e-9;
            if !sign_ok || !on_budget || !on_gross || w.abs().sum() > c0 + 1e-10 {
                continue;
            }
            let obj = w.dot(&(sigma * &w));
            if best.as_ref().is_none_or(|(_, o)| obj < *o) {
                best = Some((w, obj));
            }
        }
    }
    best.expect("the equal-weight portfolio is always feasible")
}

/// Long-only minimum variance by projected gradient on the simplex.
fn simplex_oracle(sigma: &Matrix) -> Vector {
    let p = sigma.nrows();
    let step = 0.5 / linalg::spectral_norm(sigma);
    let mut w = Vector::from_element(p, 1.0 / p as f64);
    for _ in 0..200_000 {
        let g = sigma * &w * 2.0;
        let v: Vec<f64> = (&w - g * step).iter().copied().collect();
        // sort-based Euclidean projection onto the probability simplex
        let mut u = v.clone();
        u.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut cum = 0.0;
        let mut tau = 0.0;
        for (j, x) in u.iter().enumerate() {
            cum += x;
            let t = (cum - 1.0) / (j + 1) as f64;
            if x - t > 0.0 {
                tau = t;
            }
        }
        let next = Vector::from_iterator(p, v.iter().map(|x| (x - tau).max(0.0)));
        let delta = (&next - &w).amax();
        w = next;
        if delta < 1e-15 {
            break;
        }
    }
    w
}

#[test]
fn criterion_8_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures = Vec::new();

    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let r = 1 + i % 8;
        let s = random_sym(&mut rng, r);
        let back = unvech(vech(&s).unwrap().as_slice(), r).unwrap();
        worst = worst.max(linalg::max_abs(&(back - &s)));
    }
    if worst != 0.0 {
        failures.push(format!("vech roundtrip error {worst:e}"));
    }

    for _ in 0..100 {
        let p = rng.random_range(2..12);
        let a = random_sym(&mut rng, p);
        let once = psd_project(&DailyVolMatrix { day: 1, matrix: a.clone(), psd_projected: false });
        let twice = psd_project(&once);
        let x = &once.matrix;
        // nearest PSD in Frobenius norm: X ⪰ 0, X − A ⪰ 0 and X(X − A) = 0
        let d = x - &a;
        let min_x = linalg::sym_eigen_desc(x).values[p - 1];
        let min_d = linalg::sym_eigen_desc(&d).values[p - 1];
        let comp = (x * &d).norm();
        let scale = a.norm().max(1.0);
        if linalg::max_abs(&(&twice.matrix - x)) > 1e-12 * scale
            || min_x < -1e-12 * scale
            || min_d < -1e-12 * scale
            || comp > 1e-10 * scale
        {
            failures.push(format!("psd_project oracle: min eig {min_x:e}, residual min eig {min_d:e}, complementarity {comp:e}"));
            break;
        }
    }

    for _ in 0..20 {
        let (p, r) = (rng.random_range(8..40), rng.random_range(1..5));
        let q = Matrix::from_fn(p, r, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q();
        let l = q * (p as f64).sqrt();
        let psi: Vec<Matrix> = (0..5).map(|_| random_pd(&mut rng, r)).collect();
        let gammas: Vec<Matrix> = psi.iter().map(|s| &l * s * l.transpose()).collect();
        let est = estimate_factor_vols(&l, &gammas).unwrap();
        let err = est.iter().zip(&psi).map(|(a, b)| linalg::max_abs(&(a - b))).fold(0.0, f64::max);
        if err > 1e-10 {
            failures.push(format!("estimate_factor_vols identity error {err:e}"));
            break;
        }
    }

    for _ in 0..20 {
        let p = 30;
        let g = random_pd(&mut rng, p);
        let mut prev: Option<Matrix> = None;
        for omega in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6] {
            let idio = poet_idio(&g, &PoetConfig::adaptive(2, omega)).unwrap();
            if let Some(prev) = &prev {
                let grew = (0..p).any(|i| (0..p).any(|j| idio[(i, j)] != 0.0 && prev[(i, j)] == 0.0));
                if grew {
                    failures.push(format!("poet_idio support grew at omega {omega}"));
                }
            }
            prev = Some(idio);
        }
    }

    let mut enum_err: f64 = 0.0;
    let mut simplex_err: f64 = 0.0;
    for trial in 0..40 {
        let sigma = random_pd(&mut rng, 6);
        let mut last = f64::INFINITY;
        for c0 in [1.0, 1.2, 1.4, 1.6, 1.8, 2.0] {
            let res = min_variance(&PortfolioProblem::new(sigma.clone(), c0)).unwrap();
            if res.objective > last + 1e-12 {
                failures.push(format!("objective increased with c0 at trial {trial}"));
            }
            last = res.objective;
            let (w, obj) = enumeration_oracle(&sigma, c0);
            enum_err = enum_err.max((&res.weights - &w).amax()).max((res.objective - obj).abs());
            // the solver works on Σ plus a 1e-8·tr(Σ)/p ridge
            if kkt_residual(&sigma, &res.weights, c0) > 1e-6 {
                failures.push(format!("KKT residual too large at trial {trial}"));
            }
            if c0 == 1.0 {
                simplex_err = simplex_err.max((&res.weights - simplex_oracle(&sigma)).amax());
                if res.weights.iter().any(|&x| x < -1e-12) {
                    failures.push("short position at c0 = 1".into());
                }
            }
        }
    }
    if enum_err > 1e-6 {
        failures.push(format!("enumeration oracle disagreement {enum_err:e}"));
    }
    if simplex_err > 1e-6 {
        failures.push(format!("long-only oracle disagreement {simplex_err:e}"));
    }
    check(
        8,
        failures.is_empty(),
        format!("enumeration gap {enum_err:.1e}, long-only gap {simplex_err:.1e}; {}", failures.join("; ")),
    );
}

fn tiny_study(seed: u64) -> StudyConfig {
    let mut c = StudyConfig::desk_sim(seed);
    c.grid = vec![GridCell { n: 60, m: 100, p: 30 }, GridCell { n: 80, m: 100, p: 30 }];
    c.replications = 6;
    c.sim.burnin_days = 5;
    c
}

fn result_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn svito(config: &Path, out: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_svito"));
    cmd.arg("--config").arg(config).arg("--out").arg(out).arg("--threads").arg("1").arg("study-sim");
    cmd.env("RUST_LOG", "warn").stdout(std::process::Stdio::null());
    cmd
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("study.json");
    std::fs::write(&config, serde_json::to_string_pretty(&tiny_study(99)).unwrap()).unwrap();
    let dirs: Vec<PathBuf> = ["a", "b", "c"].iter().map(|d| tmp.path().join(d)).collect();
    for d in &dirs[..2] {
        assert!(svito(&config, d).status().unwrap().success());
    }

    let ck = dirs[2].join("checkpoints");
    let mut child = svito(&config, &dirs[2]).spawn().unwrap();
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let n = std::fs::read_dir(&ck)
            .map(|d| d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json")).count())
            .unwrap_or(0);
        if n >= 3 || Instant::now() > deadline || child.try_wait().unwrap().is_some() {
            break;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    child.kill().ok();
    child.wait().unwrap();
    let killed_early = !dirs[2].join("sim_results.csv").exists();
    assert!(svito(&config, &dirs[2]).status().unwrap().success());

    let (a, b, c) = (result_csvs(&dirs[0]), result_csvs(&dirs[1]), result_csvs(&dirs[2]));
    let pass = !a.is_empty() && a == b && a == c && killed_early;
    check(
        9,
        pass,
        format!(
            "{} result CSVs; rerun identical: {}; killed mid-run: {killed_early}; resumed identical: {}",
            a.len(),
            a == b,
            a == c
        ),
    );
}
