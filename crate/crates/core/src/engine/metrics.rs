//! Per-epoch metrics CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,loss,dice_mean,dice_sd,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub split: String,
    pub loss: f64,
    pub dice_mean: Option<f64>,
    pub dice_sd: Option<f64>,
    pub wall_seconds: f64,
}

impl MetricsRow {
    fn to_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss,
            opt(self.dice_mean),
            opt(self.dice_sd),
            self.wall_seconds
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        writeln!(text, "{}", r.to_line()).expect("writing to a String");
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let bad = |line: usize, reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        if rec.len() != 6 {
            return Err(bad(line, format!("expected 6 fields, got {}", rec.len())));
        }
        let num = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(line, format!("field {k}: {e}")));
        let opt = |k: usize| if rec[k].is_empty() { Ok(None) } else { num(k).map(Some) };
        rows.push(MetricsRow {
            epoch: rec[0].parse().map_err(|e| bad(line, format!("epoch: {e}")))?,
            split: rec[1].to_string(),
            loss: num(2)?,
            dice_mean: opt(3)?,
            dice_sd: opt(4)?,
            wall_seconds: num(5)?,
        });
    }
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("reading {}", path.display()), io),
        other => Error::MalformedManifest {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("{other:?}"),
        },
    }
}
