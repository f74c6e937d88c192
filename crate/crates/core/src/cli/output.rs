//! CSV writers with fixed significant-digit formatting.

use std::path::Path;

use crate::scenarios::{Cell, ScenarioReport};

use super::CliError;

/// Nine significant digits, shortest decimal form that round-trips them.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

pub fn fmt_cell(cell: &Cell) -> String {
    match cell {
        Cell::Num(x) => fmt_num(*x),
        Cell::Int(i) => i.to_string(),
        Cell::Text(s) => s.clone(),
    }
}

/// Writes a header row and string rows, replacing any existing file.
pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report(path: &Path, report: &ScenarioReport) -> Result<(), CliError> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| r.iter().map(fmt_cell).collect())
        .collect();
    write_rows(path, &report.columns, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(fmt_num(9.3), "9.3");
        assert_eq!(fmt_num(-10.9412345678), "-10.9412346");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(123456789012.0), "123456789000");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }
}
