//! Delimited numeric tables with one header row.

use std::collections::HashSet;
use std::fmt::Display;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;

pub struct Table {
    pub names: Vec<String>,
    pub data: Array2<f64>,
}

impl Table {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let names: Vec<String> = rdr
        .headers()
        .with_context(|| format!("{}: missing header row", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut seen = HashSet::new();
    if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
        bail!("{}: duplicate column name '{dup}'", path.display());
    }
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: malformed row {}", path.display(), i + 1))?;
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().with_context(|| {
                format!("{}: row {}, column '{}': '{cell}' is not a number", path.display(), i + 1, names[j])
            })?;
            if !v.is_finite() {
                bail!("{}: row {}, column '{}' is not finite", path.display(), i + 1, names[j]);
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{}: no data rows", path.display());
    }
    let data = Array2::from_shape_vec((rows, names.len()), values)?;
    Ok(Table { names, data })
}

/// Reads a 0/1 indicator table with the same shape as `like`.
pub fn read_mask(path: &Path, rows: usize, cols: usize) -> Result<Array2<u8>> {
    let t = read_table(path)?;
    if t.data.dim() != (rows, cols) {
        bail!(
            "{}: mask is {}x{} but data are {rows}x{cols}",
            path.display(),
            t.data.nrows(),
            t.data.ncols()
        );
    }
    t.data
        .iter()
        .map(|&v| match v {
            0.0 => Ok(0u8),
            1.0 => Ok(1u8),
            other => bail!("{}: mask entry {other} is not 0 or 1", path.display()),
        })
        .collect::<Result<Vec<u8>>>()
        .map(|v| Array2::from_shape_vec((rows, cols), v).expect("shape checked"))
}

/// Writes `data` under `names`; `Display` of `f64` is the shortest
/// round-trip representation.
pub fn write_table<T: Display>(path: &Path, names: &[String], data: &Array2<T>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(names)?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn round_trip_keeps_full_precision() {
        let names = vec!["a".to_string(), "b".to_string()];
        let data = ndarray::array![[0.1 + 0.2, -1e-300], [std::f64::consts::PI, 7.0]];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_table(f.path(), &names, &data).unwrap();
        let t = read_table(f.path()).unwrap();
        assert_eq!(t.names, names);
        assert_eq!(t.data, data);
    }

    #[test]
    fn rejects_bad_tables() {
        for bad in ["a,b\n1,x\n", "a,a\n1,2\n", "a,b\n1,2\n3\n", "a,b\n", "a,b\n1,inf\n"] {
            assert!(read_table(file(bad).path()).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn mask_validation() {
        let f = file("a,b\n0,1\n1,0\n");
        assert_eq!(read_mask(f.path(), 2, 2).unwrap(), ndarray::array![[0, 1], [1, 0]]);
        assert!(read_mask(f.path(), 3, 2).is_err());
        assert!(read_mask(file("a\n2\n").path(), 1, 1).is_err());
    }
}
