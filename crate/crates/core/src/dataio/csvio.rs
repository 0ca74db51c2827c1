use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::frame::SeriesFrame;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Parses `YYYY-MM-DD HH:MM[:SS]` (a `T` separator is also accepted) as UTC epoch seconds.
pub fn parse_timestamp(s: &str) -> Result<i64> {
    let s = s.trim();
    let normalized = s.replacen('T', " ", 1);
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(&normalized, f).ok())
        .map(|dt| dt.and_utc().timestamp())
        .ok_or_else(|| Error::Data(format!("unparseable timestamp '{s}'")))
}

pub fn format_timestamp(epoch: i64) -> String {
    DateTime::from_timestamp(epoch, 0)
        .map(|d| d.format(TIMESTAMP_FORMAT).to_string())
        .unwrap_or_else(|| epoch.to_string())
}

/// How the sampling interval of a loaded file is established.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interval {
    /// Take the first gap as the interval and require it everywhere.
    Infer,
    /// Require exactly this many seconds between rows.
    Seconds(i64),
}

/// Value column names of a `date,<var>,...` CSV, in file order.
pub fn csv_columns(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    Ok(reader.headers()?.iter().skip(1).map(str::to_owned).collect())
}

/// Reads a `date,<var>,...` CSV into a [`SeriesFrame`].
pub fn load_csv(path: impl AsRef<Path>, target_name: &str, interval: Interval) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("date") {
        return Err(Error::Data(format!(
            "{}: first column must be named 'date'",
            path.display()
        )));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }
    let target_index = names
        .iter()
        .position(|n| n == target_name)
        .ok_or_else(|| Error::Data(format!("target column '{target_name}' not found")))?;

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != names.len() + 1 {
            return Err(Error::Data(format!(
                "row {}: expected {} fields, found {}",
                row + 1,
                names.len() + 1,
                rec.len()
            )));
        }
        timestamps.push(parse_timestamp(&rec[0])?);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("row {}: column '{}' is not numeric: '{cell}'", row + 1, names[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {}: column '{}' holds a NaN or infinite value",
                    row + 1,
                    names[j]
                )));
            }
            values.push(v);
        }
    }
    let len = timestamps.len();
    if len == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let interval = match interval {
        Interval::Seconds(s) => s,
        Interval::Infer if len >= 2 => timestamps[1] - timestamps[0],
        Interval::Infer => 0,
    };
    SeriesFrame::new(
        timestamps,
        Tensor::new([len, names.len()], values)?,
        names,
        target_index,
        interval,
    )
}

/// Writes a frame in the same layout [`load_csv`] reads.
pub fn write_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["date".to_string()];
    header.extend(frame.variable_names().iter().cloned());
    w.write_record(&header)?;
    let dx = frame.num_vars();
    for (r, &ts) in frame.timestamps().iter().enumerate() {
        let mut rec = vec![format_timestamp(ts)];
        rec.extend(
            frame.values().data()[r * dx..(r + 1) * dx]
                .iter()
                .map(|v| v.to_string()),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestamp_formats() {
        assert_eq!(parse_timestamp("1970-01-01 00:01").unwrap(), 60);
        assert_eq!(parse_timestamp("1970-01-01 00:00:05").unwrap(), 5);
        assert_eq!(parse_timestamp("1970-01-02T00:00:00").unwrap(), 86_400);
        assert!(parse_timestamp("01/02/2020").is_err());
        assert_eq!(format_timestamp(86_400 + 61), "1970-01-02 00:01:01");
    }
}
