//! CSV output with a leading `# schema: <name>/<version>` line, and the
//! matching reader.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use crate::error::{shape_err, Error, Result};

pub const SCHEMA_PREFIX: &str = "# schema: ";

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    /// Absent for plain CSV files such as user observation files.
    pub schema: Option<String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("no column `{name}`")))
    }

    /// Column `name` parsed as floats; empty cells become NaN.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        self.rows.iter().map(|r| parse_float(&r[c])).collect()
    }
}

fn parse_float(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("`{s}` is not a number")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Shortest representation that reads back to the same `f64`; empty for NaN.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x}")
    }
}

pub fn write_csv(path: &Path, schema: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{SCHEMA_PREFIX}{schema}")?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            if r.len() != header.len() {
                return Err(shape_err("csv row", header.len(), r.len()));
            }
            w.write_record(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<CsvTable> {
    let schema = text
        .lines()
        .find_map(|l| l.strip_prefix(SCHEMA_PREFIX))
        .map(|s| s.trim().to_string());
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(CsvTable { schema, header, rows })
}

/// Observation file: a header of dimension names, then one row of floats
/// per time step.
pub fn read_observations(path: &Path, expected_dim: usize) -> Result<Array2<f64>> {
    let table = read_csv(path)?;
    let d = table.header.len();
    if d != expected_dim {
        return Err(shape_err("observation CSV columns", expected_dim, d));
    }
    if table.rows.is_empty() {
        return Err(Error::Empty(format!("no observations in {}", path.display())));
    }
    let mut out = Array2::zeros((table.rows.len(), d));
    for (k, row) in table.rows.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            let x = parse_float(cell)?;
            if !x.is_finite() {
                return Err(Error::Format(format!(
                    "row {} column {}: missing or non-finite value",
                    k + 1,
                    j + 1
                )));
            }
            out[[k, j]] = x;
        }
    }
    Ok(out)
}

pub fn write_observations(path: &Path, ys: &Array2<f64>) -> Result<()> {
    let header: Vec<String> = (0..ys.ncols()).map(|j| format!("y_{j}")).collect();
    let rows: Vec<Vec<String>> = ys.outer_iter().map(|r| r.iter().map(|&x| num(x)).collect()).collect();
    write_csv(path, "observations/1", &header, &rows)
}
