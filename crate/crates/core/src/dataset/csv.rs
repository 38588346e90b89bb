//! CSV schema: a header `subject_id,visit,f00,...,f79,hamd` followed by one
//! row per visit. Row and column numbers in errors are 1-based, with the
//! header on row 1.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{RawRecord, HAMD_MAX, NUM_FEATURES};
use crate::error::{Error, Result};

/// `subject_id`, `visit`, the features and `hamd`.
pub const CSV_HEADER_LEN: usize = NUM_FEATURES + 3;

fn header() -> Vec<String> {
    let mut h = vec!["subject_id".to_owned(), "visit".to_owned()];
    h.extend((0..NUM_FEATURES).map(|i| format!("f{i:02}")));
    h.push("hamd".to_owned());
    h
}

fn csv_err(row: usize, column: Option<usize>, message: impl Into<String>) -> Error {
    Error::Csv {
        row,
        column,
        message: message.into(),
    }
}

fn parse_cell<T: std::str::FromStr>(cell: &str, row: usize, col: usize, what: &str) -> Result<T> {
    if cell.trim().is_empty() {
        return Err(csv_err(row, Some(col), format!("missing {what}")));
    }
    cell.trim()
        .parse()
        .map_err(|_| csv_err(row, Some(col), format!("`{cell}` is not a valid {what}")))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let expected = header();
    let mut records = Vec::new();
    let mut saw_header = false;
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| csv_err(line, None, e.to_string()))?;
        if row.len() != CSV_HEADER_LEN {
            return Err(csv_err(
                line,
                None,
                format!("expected {CSV_HEADER_LEN} columns, found {}", row.len()),
            ));
        }
        if line == 1 {
            if let Some(col) = row
                .iter()
                .zip(&expected)
                .position(|(got, want)| got.trim() != want)
            {
                return Err(csv_err(
                    1,
                    Some(col + 1),
                    format!(
                        "missing header: expected `{}`, found `{}`",
                        expected[col], &row[col]
                    ),
                ));
            }
            saw_header = true;
            continue;
        }
        let subject_id = row[0].trim();
        if subject_id.is_empty() {
            return Err(csv_err(line, Some(1), "missing subject_id"));
        }
        let visit: u32 = parse_cell(&row[1], line, 2, "visit index")?;
        let features = (0..NUM_FEATURES)
            .map(|j| {
                let v: f64 = parse_cell(&row[j + 2], line, j + 3, "number")?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(csv_err(line, Some(j + 3), "non-finite value"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let hamd: u32 = parse_cell(
            &row[CSV_HEADER_LEN - 1],
            line,
            CSV_HEADER_LEN,
            "HAM-D score",
        )?;
        if hamd > HAMD_MAX {
            return Err(csv_err(
                line,
                Some(CSV_HEADER_LEN),
                format!("HAM-D {hamd} outside [0, 50]"),
            ));
        }
        records.push(RawRecord {
            subject_id: subject_id.to_owned(),
            visit,
            features,
            hamd,
        });
    }
    if !saw_header {
        return Err(csv_err(1, None, "missing header"));
    }
    Ok(records)
}

pub fn load_csv(path: &Path) -> Result<Vec<RawRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

/// Writes records with shortest round-trip float formatting, so reading the
/// file back reproduces every value exactly.
pub fn write_csv<W: Write>(records: &[RawRecord], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| csv_err(0, None, e.to_string());
    writer.write_record(header()).map_err(wrap)?;
    for r in records {
        r.validate()?;
        let mut row = Vec::with_capacity(CSV_HEADER_LEN);
        row.push(r.subject_id.clone());
        row.push(r.visit.to_string());
        row.extend(r.features.iter().map(|v| format!("{v:?}")));
        row.push(r.hamd.to_string());
        writer.write_record(&row).map_err(wrap)?;
    }
    writer.flush().map_err(|e| csv_err(0, None, e.to_string()))
}

pub fn write_csv_file(records: &[RawRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(file))
}
