use std::path::{Path, PathBuf};

use crate::Failure;

/// A CSV table with a header row, addressed by column name.
pub struct DataTable {
    path: PathBuf,
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

impl DataTable {
    pub fn read(path: &Path) -> Result<Self, Failure> {
        let fail = |e: csv::Error| Failure::Data(format!("{}: {e}", path.display()));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(fail)?;
        let headers = reader.headers().map_err(fail)?.iter().map(String::from).collect();
        let rows = reader.records().collect::<Result<Vec<_>, _>>().map_err(fail)?;
        if rows.is_empty() {
            return Err(Failure::Data(format!("{} has no data rows", path.display())));
        }
        Ok(Self { path: path.to_path_buf(), headers, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn column(&self, name: &str) -> Result<usize, Failure> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| {
            Failure::Data(format!(
                "column '{name}' not found in {} (columns: {})",
                self.path.display(),
                self.headers.join(", ")
            ))
        })
    }

    fn cells(&self, name: &str) -> Result<Vec<(u64, &str)>, Failure> {
        let j = self.column(name)?;
        self.rows
            .iter()
            .map(|r| {
                let line = r.position().map_or(0, |p| p.line());
                match r.get(j) {
                    Some(v) if !v.is_empty() => Ok((line, v)),
                    _ => Err(Failure::Data(format!("line {line}, column '{name}': missing value"))),
                }
            })
            .collect()
    }

    /// Finite numeric values of a column.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>, Failure> {
        self.cells(name)?
            .into_iter()
            .map(|(line, v)| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Failure::Data(format!("line {line}, column '{name}': '{v}' is not a finite number"))),
            })
            .collect()
    }

    /// Raw labels of a categorical column.
    pub fn labels(&self, name: &str) -> Result<Vec<String>, Failure> {
        Ok(self.cells(name)?.into_iter().map(|(_, v)| v.to_string()).collect())
    }
}
