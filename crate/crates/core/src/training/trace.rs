use std::io::Write;
use std::path::Path;

use super::dpo::DpoRow;
use super::sft::TraceRow;
use crate::error::{Error, Result};
use crate::model::write_atomic;

pub const TRACE_HEADER: &str = "step,ce_loss,kl_loss,total,lr";

pub fn write_trace_csv(path: impl AsRef<Path>, rows: &[TraceRow]) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        writeln!(w, "{TRACE_HEADER}")?;
        for r in rows {
            writeln!(w, "{},{},{},{},{}", r.step, r.ce_loss, r.kl_loss, r.total, r.lr)?;
        }
        Ok(())
    })
}

pub fn write_dpo_csv(path: impl AsRef<Path>, rows: &[DpoRow]) -> Result<()> {
    write_atomic(path.as_ref(), |w| {
        writeln!(w, "step,loss,margin,lr")?;
        for r in rows {
            writeln!(w, "{},{},{},{}", r.step, r.loss, r.margin, r.lr)?;
        }
        Ok(())
    })
}

/// Parses a file written by [`write_trace_csv`]; `kl_sum` is not stored and reads as NaN.
pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Data("trace CSV header mismatch".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("bad trace row {line:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                ce_loss: num(f[1])?,
                kl_loss: num(f[2])?,
                kl_sum: f64::NAN,
                total: num(f[3])?,
                lr: num(f[4])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![TraceRow {
            step: 0,
            ce_loss: 1.25,
            kl_loss: 0.1 + 0.2,
            kl_sum: 9.0,
            total: 1.0 / 3.0,
            lr: 1e-3,
        }];
        write_trace_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,ce_loss,kl_loss,total,lr\n0,1.25,"));
        let back = read_trace_csv(&path).unwrap();
        assert_eq!(back[0].kl_loss, rows[0].kl_loss);
        assert_eq!(back[0].total, rows[0].total);
    }
}
