//! Numeric CSV output shared by the engines and reports.

use std::io::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 17 significant digits, enough to round-trip any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_table<W: Write>(
    w: W,
    columns: &[&str],
    rows: impl IntoIterator<Item = Vec<f64>>,
) -> Result<(), OutputError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(columns)?;
    for row in rows {
        out.write_record(row.iter().map(|v| fmt_f64(*v)))?;
    }
    out.flush()?;
    Ok(())
}
