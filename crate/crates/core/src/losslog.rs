//! Per-step loss records and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str = "epoch,step,d_loss,g_loss";

/// One minibatch step. `epoch` counts from 1, `step` is the global step
/// count (also from 1).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: u32,
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
}

impl LossRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6}",
            self.epoch, self.step, self.d_loss, self.g_loss
        )
    }
}

pub fn format_loss_csv(records: &[LossRecord]) -> String {
    let mut out = String::with_capacity(32 * (records.len() + 1));
    out.push_str(LOSS_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_line());
    }
    out
}

/// Writes the header and one row per record, atomically.
pub fn write_loss_csv(records: &[LossRecord], path: &Path) -> Result<()> {
    if records
        .windows(2)
        .any(|w| (w[0].epoch, w[0].step) > (w[1].epoch, w[1].step))
    {
        return Err(Error::Precondition(
            "loss records are not ordered by (epoch, step)".into(),
        ));
    }
    write_atomic(path, format_loss_csv(records).as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::LossLog {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_CSV_HEADER) {
        return Err(bad("missing header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let row = || bad(format!("row {} malformed: {line:?}", i + 2));
            if f.len() != 4 {
                return Err(row());
            }
            Ok(LossRecord {
                epoch: f[0].parse().map_err(|_| row())?,
                step: f[1].parse().map_err(|_| row())?,
                d_loss: f[2].parse().map_err(|_| row())?,
                g_loss: f[3].parse().map_err(|_| row())?,
            })
        })
        .collect()
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
