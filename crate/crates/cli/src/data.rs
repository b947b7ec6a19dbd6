//! CSV input and output.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use densratio::{DrmError, Group, Observation, Result};

/// Groups of a data file in order of first appearance.
pub struct DataFile {
    pub numeric_columns: Vec<String>,
    pub groups: Vec<(String, Vec<Observation>)>,
}

impl DataFile {
    pub fn group_labels(&self) -> Vec<&str> {
        self.groups.iter().map(|(l, _)| l.as_str()).collect()
    }

    pub fn into_groups(self) -> Vec<Group> {
        self.groups
            .into_iter()
            .map(|(label, obs)| Group::new(label, obs))
            .collect()
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| DrmError::InvalidInput(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path, e: csv::Error) -> DrmError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DrmError::Parse(format!("{}:{line}: {e}", path.display()))
}

/// Decimal notation with optional exponent; non-finite values are rejected.
pub fn parse_number(cell: &str) -> Option<f64> {
    let ok = !cell.is_empty()
        && cell
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'+' | b'-' | b'.' | b'e' | b'E'));
    ok.then(|| cell.parse::<f64>().ok())
        .flatten()
        .filter(|v| v.is_finite())
}

fn numeric_row(
    path: &Path,
    record: &csv::StringRecord,
    columns: &[(usize, String)],
) -> Result<Vec<f64>> {
    let line = record.position().map(|p| p.line()).unwrap_or(0);
    columns
        .iter()
        .map(|(k, name)| {
            let cell = record.get(*k).unwrap_or("");
            if cell.is_empty() {
                return Err(DrmError::Parse(format!(
                    "{}:{line}: missing value in column '{name}'",
                    path.display()
                )));
            }
            parse_number(cell).ok_or_else(|| {
                DrmError::Parse(format!(
                    "{}:{line}: invalid number '{cell}' in column '{name}'",
                    path.display()
                ))
            })
        })
        .collect()
}

/// Reads a file with a `group` column and at least two numeric columns
/// (covariates first, response last).
pub fn read_data(path: &Path) -> Result<DataFile> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let group_col = headers
        .iter()
        .position(|h| h == "group")
        .ok_or_else(|| DrmError::Parse(format!("{}:1: no 'group' column in header", path.display())))?;
    let columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != group_col)
        .map(|(k, h)| (k, h.to_string()))
        .collect();
    if columns.len() < 2 {
        return Err(DrmError::Parse(format!(
            "{}:1: need at least two numeric columns",
            path.display()
        )));
    }
    let mut groups: Vec<(String, Vec<Observation>)> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_err(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let label = record.get(group_col).unwrap_or("");
        if label.is_empty() {
            return Err(DrmError::Parse(format!("{}:{line}: missing group label", path.display())));
        }
        let obs = Observation::new(numeric_row(path, &record, &columns)?)?;
        match groups.iter_mut().find(|(l, _)| l == label) {
            Some((_, v)) => v.push(obs),
            None => groups.push((label.to_string(), vec![obs])),
        }
    }
    if groups.len() < 2 {
        return Err(DrmError::InvalidInput(format!(
            "{}: need at least two distinct group labels, found {}",
            path.display(),
            groups.len()
        )));
    }
    Ok(DataFile {
        numeric_columns: columns.into_iter().map(|(_, h)| h).collect(),
        groups,
    })
}

/// Query file: every column numeric; returns the header and the rows.
pub fn read_queries(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let columns: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .map(|(k, h)| (k, h.to_string()))
        .collect();
    let rows = rdr
        .records()
        .map(|r| {
            let r = r.map_err(|e| csv_err(path, e))?;
            numeric_row(path, &r, &columns)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((columns.into_iter().map(|(_, h)| h).collect(), rows))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| DrmError::InvalidInput(format!("cannot write {}: {e}", path.display())))
}

/// Serializes rows of string cells as CSV.
pub fn to_csv(header: &[String], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| DrmError::InvalidInput(format!("csv output: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| DrmError::InvalidInput(format!("csv output: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
