//! The per-batch metrics CSV.
//!
//! Columns are the fields of [`MetricsRecord`] in declaration order. Floats use
//! Rust's shortest round-trip formatting, so a file read back reproduces the
//! logged values exactly; a missing accuracy is an empty field.

use std::path::Path;

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::tta::MetricsRecord;

pub const COLUMNS: [&str; 10] = [
    "step",
    "loss_ent",
    "loss_unif",
    "loss_pl",
    "mi",
    "w",
    "acc_teacher",
    "acc_student",
    "uniformity_metric",
    "marginal_entropy",
];

/// Serializes records to CSV bytes, header included.
pub fn to_csv_bytes(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

/// Writes `records` to `path` atomically.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, &to_csv_bytes(records)?)
}

/// Reads a metrics CSV, checking the header against [`COLUMNS`].
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&bytes)
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::ReaderBuilder::new().from_reader(bytes);
    let header = r.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for rec in r.deserialize::<MetricsRecord>() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, acc: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            step,
            loss_ent: 0.1 + step as f64,
            loss_unif: -1.0 / 3.0,
            loss_pl: 2.5,
            mi: 1e-17,
            w: (0.5f64).exp(),
            acc_teacher: acc,
            acc_student: acc,
            uniformity_metric: 0.75,
            marginal_entropy: std::f64::consts::LN_10,
        }
    }

    #[test]
    fn header_and_round_trip() {
        let rs = vec![rec(0, Some(0.25)), rec(1, None)];
        let bytes = to_csv_bytes(&rs).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), COLUMNS.join(","));
        assert!(text.lines().nth(2).unwrap().contains(",,"));
        assert_eq!(parse_metrics_csv(&bytes).unwrap(), rs);
    }

    #[test]
    fn bad_rows_report_line() {
        let mut bytes = to_csv_bytes(&[rec(0, None)]).unwrap();
        bytes.extend_from_slice(b"1,x,0,0,0,1,,,0,0\n");
        match parse_metrics_csv(&bytes) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_metrics_csv(b"a,b\n"), Err(Error::Parse { line: 1, .. })));
    }
}
