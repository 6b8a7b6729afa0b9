//! Fixed-effect design shared by every model: intercept, log county
//! population, and indicator columns for cells 2..L (cell 1 is the baseline).

use std::collections::HashMap;
use std::io::Read;

use nalgebra::DMatrix;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignOptions {
    pub intercept: bool,
    pub cell_indicators: bool,
}

impl Default for DesignOptions {
    fn default() -> Self {
        Self {
            intercept: true,
            cell_indicators: true,
        }
    }
}

/// Design matrix with named columns, rows in area-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub matrix: DMatrix<f64>,
    pub columns: Vec<String>,
}

/// Builds the design for `areas.len() × cells` entries. `log_population`, if
/// given, holds one value per area.
pub fn build_design(
    areas: usize,
    cells: usize,
    log_population: Option<&[f64]>,
    options: DesignOptions,
) -> Result<Design> {
    if let Some(pop) = log_population {
        if pop.len() != areas {
            return Err(Error::Shape(format!(
                "{} population values for {areas} areas",
                pop.len()
            )));
        }
    }
    let n = areas * cells;
    let mut columns = Vec::new();
    let mut data: Vec<Vec<f64>> = Vec::new();
    if options.intercept {
        columns.push("intercept".to_string());
        data.push(vec![1.0; n]);
    }
    if let Some(pop) = log_population {
        columns.push("log_population".to_string());
        data.push((0..n).map(|i| pop[i / cells]).collect());
    }
    if options.cell_indicators {
        for cell in 1..cells {
            columns.push(format!("cell_{}", cell + 1));
            data.push((0..n).map(|i| if i % cells == cell { 1.0 } else { 0.0 }).collect());
        }
    }
    let matrix = DMatrix::from_fn(n, data.len(), |i, j| data[j][i]);
    Ok(Design { matrix, columns })
}

/// Reads a two-column `area_id,population` file (header required).
pub fn read_population<R: Read>(reader: R) -> Result<HashMap<String, f64>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = HashMap::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Schema(format!("population row {} needs two fields", line + 2)));
        }
        let value: f64 = record[1]
            .parse()
            .map_err(|_| Error::Schema(format!("population row {}: `{}` is not a number", line + 2, &record[1])))?;
        if out.insert(record[0].to_string(), value).is_some() {
            return Err(Error::Schema(format!("duplicate population entry for {}", &record[0])));
        }
    }
    Ok(out)
}

/// Log population per area, in the order of `areas`.
pub fn log_population(areas: &[String], population: &HashMap<String, f64>) -> Result<Vec<f64>> {
    areas
        .iter()
        .map(|a| match population.get(a) {
            Some(&p) if p > 0.0 && p.is_finite() => Ok(p.ln()),
            Some(&p) => Err(Error::Domain(format!("population of {a} must be positive, got {p}"))),
            None => Err(Error::UnknownArea(a.clone())),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_and_values() {
        let d = build_design(2, 3, Some(&[1.5, 2.5]), DesignOptions::default()).unwrap();
        assert_eq!(d.columns, ["intercept", "log_population", "cell_2", "cell_3"]);
        assert_eq!(d.matrix.nrows(), 6);
        assert_eq!(d.matrix.row(4).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.5, 1.0, 0.0]);
        assert_eq!(d.matrix.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.5, 0.0, 0.0]);
    }

    #[test]
    fn population_file() {
        let pop = read_population("area_id,population\n19041,1000\n19043,e\n".as_bytes());
        assert!(pop.is_err());
        let pop = read_population("area_id,population\n19041,1000\n".as_bytes()).unwrap();
        let logs = log_population(&["19041".into()], &pop).unwrap();
        assert!((logs[0] - 1000f64.ln()).abs() < 1e-15);
        assert!(matches!(log_population(&["x".into()], &pop), Err(Error::UnknownArea(_))));
    }
}
