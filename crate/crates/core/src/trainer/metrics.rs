//! Per-epoch metrics rows and their CSV form.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_acc,test_loss,test_err,wall_sec";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Percent.
    pub train_acc: f64,
    pub test_loss: f64,
    /// Percent; `100 - test accuracy`.
    pub test_err: f64,
    pub wall_sec: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.test_loss, self.test_err, self.wall_sec
        )
    }

    /// Equality on every field except the wall-clock time.
    pub fn same_outcome(&self, other: &MetricsRow) -> bool {
        let bits = |r: &MetricsRow| [r.lr, r.train_loss, r.train_acc, r.test_loss, r.test_err].map(f64::to_bits);
        self.epoch == other.epoch && bits(self) == bits(other)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Replaces `path` with the full history via a temporary file and a rename,
/// so readers never observe a half-written row.
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, metrics_csv(rows).as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn parse_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRow>> {
    let err = |reason: String| Error::Metrics {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        Some(h) => return Err(err(format!("unexpected header `{h}`"))),
        None => return Err(err("empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(err(format!("line {} has {} fields, expected 7", i + 2, fields.len())));
        }
        let num = |k: usize| -> Result<f64> {
            fields[k]
                .parse::<f64>()
                .map_err(|_| err(format!("line {}: `{}` is not a number", i + 2, fields[k])))
        };
        rows.push(MetricsRow {
            epoch: fields[0]
                .parse()
                .map_err(|_| err(format!("line {}: bad epoch `{}`", i + 2, fields[0])))?,
            lr: num(1)?,
            train_loss: num(2)?,
            train_acc: num(3)?,
            test_loss: num(4)?,
            test_err: num(5)?,
            wall_sec: num(6)?,
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Metrics {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_metrics_csv(&text, path)
}
