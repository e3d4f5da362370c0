//! Area-level CSV files: `area_id,y,n,x1,...,xq`.
//!
//! For Fay–Herriot data the `n` column holds 1/D_i, the reciprocal of the
//! known sampling variance. Intercepts are not added: include a column of ones.

use std::collections::HashMap;
use std::path::Path;

use eub_core::{AreaRecord, FamilyKind};

use crate::error::{CliError, Result};
use crate::output::fmt_f64;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub covariate_names: Vec<String>,
    pub records: Vec<AreaRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parse CSV text, checking every record against `kind`.
    pub fn parse(text: &str, kind: FamilyKind) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| CliError::Data(format!("line 1: {e}")))?
            .clone();
        let cols: Vec<&str> = header.iter().collect();
        if cols.len() < 4 || cols[0] != "area_id" || cols[1] != "y" || cols[2] != "n" {
            return Err(CliError::Data(format!(
                "line 1: header must be area_id,y,n,x1[,x2,...], got '{}'",
                cols.join(",")
            )));
        }
        let covariate_names: Vec<String> = cols[3..].iter().map(|s| s.to_string()).collect();
        let width = cols.len();

        let mut ids = Vec::new();
        let mut records = Vec::new();
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| CliError::Data(format!("line {line}: {e}")))?;
            if row.len() != width {
                return Err(CliError::Data(format!(
                    "line {line}: expected {width} fields, got {}",
                    row.len()
                )));
            }
            let id = row[0].to_string();
            if id.is_empty() {
                return Err(CliError::Data(format!("line {line}: empty area_id")));
            }
            if let Some(first) = seen.insert(id.clone(), line) {
                return Err(CliError::Data(format!(
                    "line {line}: duplicate area_id '{id}' (first seen on line {first})"
                )));
            }
            let mut values = Vec::with_capacity(width - 1);
            for (j, field) in row.iter().enumerate().skip(1) {
                let v: f64 = field.parse().map_err(|_| {
                    CliError::Data(format!("line {line}: column '{}' is not a number: '{field}'", cols[j]))
                })?;
                if !v.is_finite() {
                    return Err(CliError::Data(format!("line {line}: column '{}' is not finite", cols[j])));
                }
                values.push(v);
            }
            let rec = AreaRecord::new(values[0], values[1], values[2..].to_vec());
            rec.validate(kind)
                .map_err(|e| CliError::Data(format!("line {line} (area '{id}'): {e}")))?;
            ids.push(id);
            records.push(rec);
        }
        if records.is_empty() {
            return Err(CliError::Data("no data rows".into()));
        }
        Ok(Self {
            ids,
            covariate_names,
            records,
        })
    }

    pub fn load(path: &Path, kind: FamilyKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, kind).map_err(|e| match e {
            CliError::Data(msg) => CliError::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["area_id".to_string(), "y".into(), "n".into()];
        header.extend(self.covariate_names.iter().cloned());
        write_row(&mut w, &header)?;
        for (id, rec) in self.ids.iter().zip(&self.records) {
            let mut row = vec![id.clone(), fmt_f64(rec.y), fmt_f64(rec.n)];
            row.extend(rec.x.iter().map(|&v| fmt_f64(v)));
            write_row(&mut w, &row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Data(e.to_string()))
    }
}

fn write_row(w: &mut csv::Writer<Vec<u8>>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| CliError::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_reports_rows() {
        let ok = "area_id,y,n,x1,x2\na,1.5,10,1,0.3\nb,0.2,5,1,-1\n";
        let d = Dataset::parse(ok, FamilyKind::PoissonGamma).unwrap();
        assert_eq!(d.ids, vec!["a", "b"]);
        assert_eq!(d.records[1].x, vec![1.0, -1.0]);

        let dup = "area_id,y,n,x1\na,1,10,1\na,2,10,1\n";
        let e = Dataset::parse(dup, FamilyKind::FayHerriot).unwrap_err().to_string();
        assert!(e.contains("line 3") && e.contains("duplicate"), "{e}");

        let bad = "area_id,y,n,x1\na,1,10,1\nb,zz,10,1\n";
        let e = Dataset::parse(bad, FamilyKind::FayHerriot).unwrap_err().to_string();
        assert!(e.contains("line 3"), "{e}");

        let short = "area_id,y,n,x1\na,1,10\n";
        assert!(Dataset::parse(short, FamilyKind::FayHerriot).is_err());

        // 1.5 successes out of 10 trials is not a count
        let frac = "area_id,y,n,x1\na,0.15,10,1\n";
        let e = Dataset::parse(frac, FamilyKind::BinomialBeta).unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");

        assert!(Dataset::parse("id,y,n,x1\na,1,1,1\n", FamilyKind::FayHerriot).is_err());
        assert!(Dataset::parse("area_id,y,n,x1\n", FamilyKind::FayHerriot).is_err());
    }

    #[test]
    fn quoted_ids_survive_round_trip() {
        let text = "area_id,y,n,x1\n\"North, upper\",0.1,3,1\nb,0.30000000000000004,7,2.5e-9\n";
        let d = Dataset::parse(text, FamilyKind::FayHerriot).unwrap();
        assert_eq!(d.ids[0], "North, upper");
        let again = Dataset::parse(&d.to_csv().unwrap(), FamilyKind::FayHerriot).unwrap();
        assert_eq!(again, d);
    }
}
