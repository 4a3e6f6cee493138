//! Output directory layout: `manifest.json`, `report.json` and CSV tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::Result;
use crate::experiments::{RawTable, StatReport};

/// Partition and grid description written into the manifest.
#[derive(Clone, Debug, Serialize)]
pub struct DiscretizationInfo {
    pub l: f64,
    pub boundaries: Vec<f64>,
    pub channel_counts: Vec<u32>,
    pub m: usize,
    pub n_spec: usize,
}

impl DiscretizationInfo {
    pub fn of(config: &RunConfig) -> Result<Self> {
        let part = config.partition()?;
        Ok(Self {
            l: part.length(),
            boundaries: part.boundaries().to_vec(),
            channel_counts: part.channels().to_vec(),
            m: config.spatial.grid_nodes,
            n_spec: config.solver.n_spec,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub config_sha256: String,
    pub seed: u64,
    pub discretization: DiscretizationInfo,
    pub overrides: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub threads: usize,
    pub versions: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub summary: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn new(subcommand: &str, config: &RunConfig) -> Result<Self> {
        let text = config.to_json();
        let mut versions = BTreeMap::new();
        versions.insert("pdmp-core".into(), env!("CARGO_PKG_VERSION").into());
        Ok(Self {
            subcommand: subcommand.into(),
            config: serde_json::from_str(&text)?,
            config_sha256: config_hash(config),
            seed: config.seed,
            discretization: DiscretizationInfo::of(config)?,
            overrides: BTreeMap::new(),
            warnings: Vec::new(),
            threads: rayon::current_num_threads(),
            versions,
            wall_time_s: 0.0,
            summary: BTreeMap::new(),
        })
    }
}

/// SHA-256 of the canonical config JSON.
pub fn config_hash(config: &RunConfig) -> String {
    let digest = Sha256::digest(config.to_json().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes into one output directory, creating subdirectories as needed.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn subdir(&self, name: &str) -> Result<Self> {
        Self::create(self.root.join(name))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let path = self.root.join(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn write_report(&self, report: &StatReport) -> Result<PathBuf> {
        self.write_json("report.json", report)
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        self.write_json("manifest.json", manifest)
    }

    /// Writes `<name>.csv`; `name` may contain one `/` for a subdirectory.
    pub fn write_table(&self, table: &RawTable) -> Result<PathBuf> {
        let path = self.root.join(format!("{}.csv", table.name));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_csv(&path, &table.header, &table.rows)?;
        Ok(path)
    }
}

/// RFC-4180 CSV with shortest round-trip float formatting.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.iter().map(|x| format_float(*x)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_float(x: f64) -> String {
    if x.is_finite() && x == x.trunc() && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("pdmp-out-{}", std::process::id()));
        let out = OutputDir::create(&dir).unwrap();
        let table = RawTable {
            name: "levels/t".into(),
            header: vec!["a".into(), "b".into()],
            rows: vec![vec![1.0, 0.1 + 0.2], vec![-3.0, 1e-300]],
        };
        let path = out.write_table(&table).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<Vec<f64>> = r
            .records()
            .map(|rec| rec.unwrap().iter().map(|s| s.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows, table.rows);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn hash_is_stable() {
        let cfg = RunConfig::default();
        assert_eq!(config_hash(&cfg), config_hash(&cfg.clone()));
        assert_eq!(config_hash(&cfg).len(), 64);
    }
}
