//! Numeric tables and their CSV form: `{:.16e}` floats, NaN as an empty field, LF endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self { header: header.iter().map(|h| h.as_ref().to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.column_index(name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Value of `name` in the first row whose `key` column equals `value`.
    pub fn lookup(&self, key: &str, value: f64, name: &str) -> Option<f64> {
        let (k, i) = (self.column_index(key)?, self.column_index(name)?);
        self.rows.iter().find(|r| r[k] == value).map(|r| r[i])
    }

    pub fn nan_count(&self) -> usize {
        self.rows.iter().flatten().filter(|v| v.is_nan()).count()
    }
}

fn format_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:.16e}")
    }
}

pub fn write_csv<W: Write>(table: &Table, w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(&table.header)?;
    for row in &table.rows {
        out.write_record(row.iter().map(|v| format_value(*v)))?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `table` to `path`; returns the number of NaN cells written as empty fields.
pub fn export_csv(table: &Table, path: &Path) -> Result<usize> {
    let file = BufWriter::new(File::create(path)?);
    write_csv(table, file)?;
    Ok(table.nan_count())
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut table = Table::new(&header);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| {
                if f.is_empty() {
                    Ok(f64::NAN)
                } else {
                    f.parse::<f64>().map_err(|_| CliError::config(&format!("{}:{}", path.display(), i + 2), format!("bad number `{f}`")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push(row);
    }
    Ok(table)
}
