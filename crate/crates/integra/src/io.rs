//! File formats: long-format series CSV, metadata CSV, covariance CSV and
//! pretty-printed JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use integra_core::data::{MonthIndex, Record, SeriesRole};
use integra_core::garch::{CountryCovariances, CovRow, CovariancePanel};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::CliError;

pub const LONG_HEADER: [&str; 3] = ["date", "series_id", "value"];
pub const META_HEADER: [&str; 2] = ["series_id", "group"];
pub const COV_HEADER: [&str; 6] = ["date", "country", "h_ii", "h_im", "h_id", "h_ie"];

fn parse_err(file: &Path, line: u64, column: Option<usize>, message: impl Into<String>) -> CliError {
    CliError::Parse { file: file.to_path_buf(), line, column, message: message.into() }
}

/// Reads a CSV with the exact header `expected` and hands each data row with
/// its line number to `row`.
fn read_csv<F>(path: &Path, expected: &[&str], mut row: F) -> Result<(), CliError>
where
    F: FnMut(u64, &csv::StringRecord) -> Result<(), CliError>,
{
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes.as_slice());
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let found: Vec<&str> = headers.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if found != expected {
        return Err(parse_err(path, 1, None, format!("expected header {:?}, found {:?}", expected.join(","), found.join(","))));
    }
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        row(line, &rec)?;
    }
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    let message = match e.kind() {
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            format!("expected {expected_len} fields, found {len}")
        }
        csv::ErrorKind::Utf8 { .. } => "invalid UTF-8".to_string(),
        _ => e.to_string(),
    };
    parse_err(path, line, None, message)
}

fn number(path: &Path, line: u64, rec: &csv::StringRecord, col: usize, name: &str) -> Result<f64, CliError> {
    let raw = &rec[col];
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| parse_err(path, line, Some(col + 1), format!("{name}: {raw:?} is not a finite number")))
}

fn month(path: &Path, line: u64, rec: &csv::StringRecord, col: usize) -> Result<MonthIndex, CliError> {
    rec[col].parse::<MonthIndex>().map_err(|e| parse_err(path, line, Some(col + 1), e.to_string()))
}

fn text(path: &Path, line: u64, rec: &csv::StringRecord, col: usize, name: &str) -> Result<String, CliError> {
    let s = &rec[col];
    if s.is_empty() {
        return Err(parse_err(path, line, Some(col + 1), format!("{name} is empty")));
    }
    Ok(s.to_string())
}

/// `date,series_id,value` rows.
pub fn read_long(path: &Path) -> Result<Vec<Record>, CliError> {
    let mut out = Vec::new();
    read_csv(path, &LONG_HEADER, |line, rec| {
        out.push(Record {
            date: month(path, line, rec, 0)?,
            series_id: text(path, line, rec, 1, "series_id")?,
            value: number(path, line, rec, 2, "value")?,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn read_meta(path: &Path) -> Result<Vec<(String, SeriesRole)>, CliError> {
    let mut out = Vec::new();
    read_csv(path, &META_HEADER, |line, rec| {
        let id = text(path, line, rec, 0, "series_id")?;
        let role = rec[1].parse::<SeriesRole>().map_err(|m| parse_err(path, line, Some(2), m))?;
        out.push((id, role));
        Ok(())
    })?;
    Ok(out)
}

pub fn read_cov(path: &Path) -> Result<CovariancePanel, CliError> {
    let mut rows: BTreeMap<String, Vec<(MonthIndex, CovRow, u64)>> = BTreeMap::new();
    read_csv(path, &COV_HEADER, |line, rec| {
        let date = month(path, line, rec, 0)?;
        let country = text(path, line, rec, 1, "country")?;
        let row = CovRow {
            h_ii: number(path, line, rec, 2, "h_ii")?,
            h_im: number(path, line, rec, 3, "h_im")?,
            h_id: number(path, line, rec, 4, "h_id")?,
            h_ie: number(path, line, rec, 5, "h_ie")?,
        };
        rows.entry(country).or_default().push((date, row, line));
        Ok(())
    })?;
    let mut panel = CovariancePanel::default();
    for (country, mut v) in rows {
        v.sort_by_key(|r| r.0);
        for w in v.windows(2) {
            if w[0].0.months_until(w[1].0) != 1 {
                let what = if w[0].0 == w[1].0 { "repeats" } else { "is not contiguous at" };
                return Err(parse_err(path, w[1].2, Some(1), format!("{country} {what} {}", w[1].0)));
            }
        }
        let start = v[0].0;
        panel.countries.insert(country, CountryCovariances { start, rows: v.into_iter().map(|r| r.1).collect() });
    }
    Ok(panel)
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<(), CliError> {
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Shortest representation that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

pub fn write_long(path: &Path, records: &[Record]) -> Result<(), CliError> {
    let mut w = writer();
    w.write_record(LONG_HEADER).map_err(|e| csv_io(path, e))?;
    for r in records {
        w.write_record([r.date.to_string(), r.series_id.clone(), fmt_f64(r.value)]).map_err(|e| csv_io(path, e))?;
    }
    finish(path, w)
}

pub fn write_meta(path: &Path, meta: &[(String, SeriesRole)]) -> Result<(), CliError> {
    let mut w = writer();
    w.write_record(META_HEADER).map_err(|e| csv_io(path, e))?;
    for (id, role) in meta {
        w.write_record([id.as_str(), role.as_str()]).map_err(|e| csv_io(path, e))?;
    }
    finish(path, w)
}

pub fn write_cov(path: &Path, panel: &CovariancePanel) -> Result<(), CliError> {
    let mut w = writer();
    w.write_record(COV_HEADER).map_err(|e| csv_io(path, e))?;
    for (country, c) in &panel.countries {
        for (k, r) in c.rows.iter().enumerate() {
            w.write_record([
                c.start.offset(k as i64).to_string(),
                country.clone(),
                fmt_f64(r.h_ii),
                fmt_f64(r.h_im),
                fmt_f64(r.h_id),
                fmt_f64(r.h_ie),
            ])
            .map_err(|e| csv_io(path, e))?;
        }
    }
    finish(path, w)
}

/// Writes a table given as header plus rows of cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_bytes(path, &table_bytes(header, rows)?)
}

pub fn table_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = writer();
    let io = |e: csv::Error| CliError::io(Path::new("<table>"), std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::io(Path::new("<table>"), e.into_error()))
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("values serialise");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_bytes(path, &json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| parse_err(path, e.line() as u64, Some(e.column()), e.to_string()))
}
