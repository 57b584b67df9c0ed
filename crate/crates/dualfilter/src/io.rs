//! File formats: JSON documents and headered CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use dualfilter_core::TimeGrid;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, Model};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("documents serialize");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, to_json(value)).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e))
}

/// Writes a table of numbers under a header row.
pub fn write_csv<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<f64>>,
{
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::format(path, e))?;
    w.write_record(header).map_err(|e| CliError::format(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| CliError::format(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header and rows of a numeric CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::format(path, e))?;
    let header = r
        .headers()
        .map_err(|e| CliError::format(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::format(path, e))?;
        let row = rec
            .iter()
            .map(|v| v.parse::<f64>().map_err(|e| CliError::format(path, e)))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// `prefix_1, …, prefix_n`.
pub fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn path_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("path_{i:05}.csv"))
}

/// Identity of a simulated bundle. Paths beyond the exported ones are
/// regenerated from `(seed, index)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub model: Model,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    /// Per-path CSV files, relative to the output directory.
    pub exported: Vec<String>,
    /// Terminal states and observations of every path.
    pub terminal: String,
}

impl Manifest {
    pub fn for_experiment(exp: &Experiment, exported: Vec<String>, terminal: String) -> Self {
        Manifest {
            format_version: FORMAT_VERSION,
            model: exp.model.clone(),
            grid: exp.grid,
            n_paths: exp.config.bundle.n_paths,
            seed: exp.config.bundle.seed,
            exported,
            terminal,
        }
    }

    /// Loads the manifest in `dir` and checks that it describes the bundle
    /// of `exp`.
    pub fn require(dir: &Path, exp: &Experiment) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(CliError::config(format!(
                "missing prerequisite: bundle manifest {} (run `simulate` first)",
                path.display()
            )));
        }
        let m: Manifest = read_json(&path)?;
        let same = m.model == exp.model
            && m.grid.same_as(&exp.grid)
            && m.n_paths == exp.config.bundle.n_paths
            && m.seed == exp.config.bundle.seed;
        if !same {
            return Err(CliError::config(format!(
                "bundle in {} was simulated from a different model, grid or seed (re-run `simulate`)",
                dir.display()
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/t.csv");
        let header = vec!["t".to_string(), "x".to_string()];
        write_csv(&p, &header, vec![vec![0.0, 0.1], vec![0.5, -1e-300]]).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(rows, vec![vec![0.0, 0.1], vec![0.5, -1e-300]]);
    }

    #[test]
    fn missing_manifest_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let exp = crate::config::canonical_config(3, 1).resolve(Path::new(".")).unwrap();
        let err = Manifest::require(dir.path(), &exp).unwrap_err();
        assert!(err.to_string().contains("missing prerequisite"), "{err}");
    }

    #[test]
    fn column_names() {
        assert_eq!(columns("pi", 2), vec!["pi_1", "pi_2"]);
    }
}
