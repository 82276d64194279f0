use std::path::Path;
use std::process::{Command, Output};

use svito::io;
use svito::sim::SimConfig;
use svito::svmodel::{FitReportJson, SVParams};

fn svito(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svito")).args(args).arg("--out").arg(out).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn pipeline_from_ticks_to_portfolio() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let mut cfg = SimConfig::paper_design(15, 70, 80, 4);
    cfg.burnin_days = 5;
    cfg.substeps_per_obs = 4;
    let cfg_path = t.join("sim.json");
    io::write_json(&cfg_path, &cfg).unwrap();
    let s = cfg_path.to_str().unwrap();

    ok(svito(&["--config", s, "simulate"], &t.join("sim")));
    let ticks = t.join("sim/ticks.csv");
    let panel = io::read_ticks_csv(&ticks).unwrap();
    assert_eq!((panel.p, panel.n_days()), (15, 70));

    ok(svito(&["realized", "--ticks", ticks.to_str().unwrap()], &t.join("real")));
    ok(svito(&["factor", "--gammas", t.join("real/gammas").to_str().unwrap(), "--rank", "3"], &t.join("fac")));
    ok(svito(&["fit", "--psi", t.join("fac/psi").to_str().unwrap(), "--method", "lse"], &t.join("lse")));
    let init = t.join("lse/fit_report.json");
    ok(svito(&["fit", "--psi", t.join("fac/psi").to_str().unwrap(), "--init", init.to_str().unwrap()], &t.join("qmle")));
    let report: FitReportJson = io::read_json(&t.join("qmle/fit_report.json")).unwrap();
    let theta: SVParams = report.theta.try_into().unwrap();
    assert_eq!((theta.r, theta.q), (3, 1));
    let resid = io::read_matrix_csv(&t.join("qmle/residuals.csv")).unwrap();
    assert_eq!(resid.shape(), (69, 6));

    let params = t.join("qmle/fit_report.json");
    ok(svito(
        &["predict", "--gammas", t.join("real/gammas").to_str().unwrap(), "--params", params.to_str().unwrap(), "--project"],
        &t.join("pred"),
    ));
    let pred = io::read_matrix_csv(&t.join("pred/prediction.csv")).unwrap();
    assert_eq!(pred.shape(), (15, 15));

    let sigma = t.join("pred/prediction.csv");
    ok(svito(&["portfolio", "--sigma", sigma.to_str().unwrap(), "--c0", "1.3"], &t.join("port")));
    let w = io::read_matrix_csv(&t.join("port/weights.csv")).unwrap();
    assert!((w.sum() - 1.0).abs() < 1e-8);
    assert!(w.iter().map(|v| v.abs()).sum::<f64>() <= 1.3 + 1e-8);
}

#[test]
fn errors_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    let sigma = t.join("s.csv");
    std::fs::write(&sigma, "1,0\n0,1\n").unwrap();
    let o = svito(&["portfolio", "--sigma", sigma.to_str().unwrap(), "--c0", "2.5"], t);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("[1, 2]"));

    let bad = t.join("bad.json");
    std::fs::write(&bad, "{\n  \"grid\": [\n").unwrap();
    let o = svito(&["--config", bad.to_str().unwrap(), "study-sim"], t);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json:"));
}
