//! File formats: CSV matrices, tick CSV, JSON manifests.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::realized::{AssetTicks, DayTicks, TickPanel};

/// Serde adapter storing a matrix as a list of rows.
pub mod rows {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
        linalg::to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Matrix, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        linalg::from_rows(&rows).ok_or_else(|| serde::de::Error::custom("matrix rows must be non-empty and of equal length"))
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[Matrix], s: S) -> std::result::Result<S::Ok, S::Error> {
            ms.iter().map(linalg::to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Matrix>, D::Error> {
            let all: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
            all.iter()
                .map(|rows| {
                    linalg::from_rows(rows)
                        .ok_or_else(|| serde::de::Error::custom("matrix rows must be non-empty and of equal length"))
                })
                .collect()
        }
    }
}

/// Formats a float so that it parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for i in 0..m.nrows() {
        let line: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, s)| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    location: format!("{}:{}:{}", path.display(), i + 1, j + 1),
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    linalg::from_rows(&rows)
        .ok_or_else(|| Error::Parse { location: path.display().to_string(), message: "empty or ragged matrix".into() })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r)
        .map_err(|e| Error::Parse { location: format!("{}:{}:{}", path.display(), e.line(), e.column()), message: e.to_string() })
}

/// Manifest accompanying a directory of CSV matrices.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixManifest {
    pub kind: String,
    /// file name → (rows, cols)
    pub matrices: Vec<MatrixEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MatrixEntry {
    pub name: String,
    pub file: String,
    pub rows: usize,
    pub cols: usize,
}

/// Writes named matrices as CSV files in `dir` plus `manifest.json`.
pub fn write_matrix_dir(dir: &Path, kind: &str, items: &[(String, &Matrix)], meta: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(items.len());
    for (name, m) in items {
        let file = format!("{name}.csv");
        write_matrix_csv(&dir.join(&file), m)?;
        entries.push(MatrixEntry { name: name.clone(), file, rows: m.nrows(), cols: m.ncols() });
    }
    write_json(&dir.join("manifest.json"), &MatrixManifest { kind: kind.into(), matrices: entries, meta })
}

/// Reads back a directory written by [`write_matrix_dir`].
pub fn read_matrix_dir(dir: &Path) -> Result<(MatrixManifest, Vec<(String, Matrix)>)> {
    let manifest: MatrixManifest = read_json(&dir.join("manifest.json"))?;
    let mut out = Vec::with_capacity(manifest.matrices.len());
    for e in &manifest.matrices {
        let m = read_matrix_csv(&dir.join(&e.file))?;
        if m.nrows() != e.rows || m.ncols() != e.cols {
            return Err(Error::Parse {
                location: dir.join(&e.file).display().to_string(),
                message: format!("expected {}x{}, found {}x{}", e.rows, e.cols, m.nrows(), m.ncols()),
            });
        }
        out.push((e.name.clone(), m));
    }
    Ok((manifest, out))
}

/// Matrices of a directory whose names start with `prefix`, in manifest order.
pub fn matrices_with_prefix(items: &[(String, Matrix)], prefix: &str) -> Vec<Matrix> {
    items.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, m)| m.clone()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TickRow {
    day: usize,
    asset_index: usize,
    tick_index: usize,
    time: f64,
    log_price: f64,
}

/// Writes ticks as CSV with columns day, asset_index, tick_index, time,
/// log_price (day and asset_index are 1-based, tick_index 0-based).
pub fn write_ticks_csv(path: &Path, panel: &TickPanel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "day,asset_index,tick_index,time,log_price")?;
    for (k, d) in panel.days.iter().enumerate() {
        for i in 0..panel.p {
            let a = d.asset(i);
            for (t, (time, price)) in a.times.iter().zip(&a.prices).enumerate() {
                writeln!(w, "{},{},{},{},{}", k + 1, i + 1, t, fmt_f64(*time), fmt_f64(*price))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a tick CSV. Days whose assets share identical time stamps are
/// stored synchronously.
pub fn read_ticks_csv(path: &Path) -> Result<TickPanel> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut days: Vec<Vec<AssetTicks>> = Vec::new();
    for (line, rec) in rdr.deserialize::<TickRow>().enumerate() {
        let row =
            rec.map_err(|e| Error::Parse { location: format!("{}:{}", path.display(), line + 2), message: e.to_string() })?;
        if row.day == 0 || row.asset_index == 0 {
            return Err(Error::Parse {
                location: format!("{}:{}", path.display(), line + 2),
                message: "day and asset_index are 1-based".into(),
            });
        }
        if days.len() < row.day {
            days.resize_with(row.day, Vec::new);
        }
        let assets = &mut days[row.day - 1];
        if assets.len() < row.asset_index {
            assets.resize_with(row.asset_index, || AssetTicks { times: vec![], prices: vec![] });
        }
        let a = &mut assets[row.asset_index - 1];
        a.times.push(row.time);
        a.prices.push(row.log_price);
    }
    let p = days.iter().map(|d| d.len()).max().unwrap_or(0);
    let days = days
        .into_iter()
        .map(|assets| {
            let sync = assets.len() == p && assets.windows(2).all(|w| w[0].times == w[1].times);
            if sync && p > 0 {
                let times = assets[0].times.clone();
                let prices = Matrix::from_fn(times.len(), p, |j, i| assets[i].prices[j]);
                DayTicks::Sync { times, prices }
            } else {
                DayTicks::Async(assets)
            }
        })
        .collect();
    TickPanel::new(p, days)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = Matrix::from_fn(3, 4, |i, j| (i as f64 + 0.1) / (j as f64 + 3.0) - 1e-17);
        let path = dir.path().join("m.csv");
        write_matrix_csv(&path, &m).unwrap();
        assert_eq!(read_matrix_csv(&path).unwrap(), m);
    }

    #[test]
    fn tick_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let sync = DayTicks::Sync { times: vec![0.5, 1.0], prices: Matrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]) };
        let asy = DayTicks::Async(vec![
            AssetTicks { times: vec![1.2, 1.5, 2.0], prices: vec![0.0, 0.1, 0.2] },
            AssetTicks { times: vec![1.3, 2.0], prices: vec![0.5, 0.6] },
        ]);
        let panel = TickPanel::new(2, vec![sync, asy]).unwrap();
        let path = dir.path().join("t.csv");
        write_ticks_csv(&path, &panel).unwrap();
        assert_eq!(read_ticks_csv(&path).unwrap(), panel);
    }

    #[test]
    fn json_errors_have_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"kind\": ,\n}").unwrap();
        let err = read_json::<MatrixManifest>(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { ref location, .. } if location.contains("bad.json:2:")), "{err}");
    }
}
