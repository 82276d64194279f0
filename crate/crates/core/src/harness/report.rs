use std::fmt::Write as _;
use std::path::Path;

use super::{read_rows_csv, ResultRow};
use crate::error::{Error, Result};

fn table(title: &str, rows: &[&ResultRow], out: &mut String) {
    if rows.is_empty() {
        return;
    }
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(out, "| n | m | p | method | quantity | norm | mean | se | reps | failed |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {:.5} | {:.5} | {} | {} |",
            r.n, r.m, r.p, r.method, r.quantity, r.norm, r.mean, r.se, r.replications, r.failed
        );
    }
    out.push('\n');
}

/// Renders the result CSVs found in `dir` as Markdown, writes
/// `report.md` next to them and returns the text.
pub fn render_report(dir: &Path) -> Result<String> {
    let mut out = String::from("# Results\n\n");
    let mut found = false;
    let sim = dir.join("sim_results.csv");
    if sim.exists() {
        found = true;
        let rows = read_rows_csv(&sim)?;
        if let Some(r) = rows.first() {
            let _ = writeln!(out, "config `{}`, {}\n", r.config_hash, r.version);
        }
        let sel = |f: &dyn Fn(&ResultRow) -> bool| rows.iter().filter(|r| f(r)).collect::<Vec<_>>();
        table("beta0 estimation error", &sel(&|r| r.quantity == "beta0"), &mut out);
        table("beta1 estimation error", &sel(&|r| r.quantity == "beta1"), &mut out);
        table(
            "Prediction error against the conditional expectation",
            &sel(&|r| r.quantity == "prediction" && r.norm.starts_with("relative")),
            &mut out,
        );
        table("Rank selection", &sel(&|r| r.quantity == "rank"), &mut out);
        table("Idiosyncratic estimate, max error", &sel(&|r| r.quantity == "idio"), &mut out);
        table("Loading error", &sel(&|r| r.quantity == "loading"), &mut out);
    }
    let oos = dir.join("oos_results.csv");
    if oos.exists() {
        found = true;
        let rows = read_rows_csv(&oos)?;
        if let Some(r) = rows.first() {
            let _ = writeln!(out, "out-of-sample config `{}`, {}\n", r.config_hash, r.version);
        }
        table("Out-of-sample prediction error", &rows.iter().filter(|r| r.quantity == "mpe").collect::<Vec<_>>(), &mut out);
        table(
            "Out-of-sample portfolio risk (annualized)",
            &rows.iter().filter(|r| r.quantity == "risk").collect::<Vec<_>>(),
            &mut out,
        );
    }
    if !found {
        return Err(Error::InvalidConfig(format!("no sim_results.csv or oos_results.csv in {}", dir.display())));
    }
    std::fs::write(dir.join("report.md"), &out)?;
    Ok(out)
}
