use std::path::Path;

use super::RawSeries;
use crate::error::{Error, Result};

/// Reads a two-column `x,y` CSV file with a header row.
///
/// Rows are sorted by `x`; rows sharing an `x` are collapsed into one point
/// with the mean of their `y` values.
pub fn load_series_csv(path: impl AsRef<Path>) -> Result<RawSeries> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        if record.len() != 2 {
            return Err(parse_err(format!("expected 2 columns, found {}", record.len())));
        }
        let field = |k: usize| -> Result<f64> {
            let raw = &record[k];
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(parse_err(format!("`{raw}` is not a finite number"))),
            }
        };
        rows.push((field(0)?, field(1)?));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut x: Vec<f64> = Vec::with_capacity(rows.len());
    let mut y: Vec<f64> = Vec::with_capacity(rows.len());
    let mut count = 0usize;
    for (xv, yv) in rows {
        if x.last() == Some(&xv) {
            let last = y.last_mut().expect("paired with x");
            *last = (*last * count as f64 + yv) / (count + 1) as f64;
            count += 1;
        } else {
            x.push(xv);
            y.push(yv);
            count = 1;
        }
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData {
            path: path.to_owned(),
            rows: x.len(),
        });
    }
    RawSeries::new(x, y)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_owned(),
            line,
            message: format!("{other:?}"),
        },
    }
}
