//! Plot-ready tables derived from a finished bundle.

use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::formats::{parse_csv, Table};

fn missing(path: &Path) -> CliError {
    CliError::Validation(format!("{}: not found; run a sweep or ablation into this bundle first", path.display()))
}

fn read_table(path: &Path) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    Ok(Some(parse_csv(&text)))
}

fn select(path: &Path, header: &[String], rows: &[Vec<String>], keep: &[&str]) -> Result<Table> {
    let idx: Vec<usize> = keep
        .iter()
        .map(|k| {
            header.iter().position(|h| h == k).ok_or_else(|| CliError::Format {
                what: "bundle CSV",
                path: path.to_path_buf(),
                message: format!("missing column `{k}`"),
            })
        })
        .collect::<Result<_>>()?;
    let mut t = Table::new(keep);
    for (n, row) in rows.iter().enumerate() {
        let cells: Vec<String> = idx.iter().map(|&i| row.get(i).cloned().unwrap_or_default()).collect();
        if cells.iter().skip(1).any(|c| !c.parse::<f64>().is_ok_and(f64::is_finite)) {
            return Err(CliError::Format {
                what: "bundle CSV",
                path: path.to_path_buf(),
                message: format!("row {} has a missing or non-finite value", n + 1),
            });
        }
        t.row(&cells);
    }
    Ok(t)
}

/// Writes `k_curve.csv` (from a sweep) and `ablation_bars.csv` (from an
/// ablation) into `out`. Returns the names of the files written.
pub fn report_figures(bundle: &Path, out: &Path) -> Result<Vec<String>> {
    let sweep_path = bundle.join("sweep.csv");
    let ablation_path = bundle.join("ablation_summary.csv");
    let sweep = read_table(&sweep_path)?;
    let ablation = read_table(&ablation_path)?;
    if sweep.is_none() && ablation.is_none() {
        return Err(missing(&sweep_path));
    }
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    let mut written = Vec::new();
    if let Some((header, rows)) = sweep {
        let t = select(&sweep_path, &header, &rows, &["k", "measured_mean", "measured_stderr", "oracle", "bound"])?;
        let path = out.join("k_curve.csv");
        fs::write(&path, t.as_str()).map_err(CliError::io(&path))?;
        written.push("k_curve.csv".to_string());
    }
    if let Some((header, rows)) = ablation {
        let t = select(&ablation_path, &header, &rows, &["variant", "mean_pred_error", "stderr_pred_error"])?;
        let path = out.join("ablation_bars.csv");
        fs::write(&path, t.as_str()).map_err(CliError::io(&path))?;
        written.push("ablation_bars.csv".to_string());
    }
    Ok(written)
}
