//! Everything a command writes goes through [`Outputs`], which stamps
//! tables with the seed and config hash, digests each file and finally
//! writes the run manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::svg::LineChart;

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "fedstack-manifest";

/// Identity of one invocation, written into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub command: String,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        let config_hash = cfg.hash();
        Self {
            command: command.into(),
            run_id: format!("{command}-s{}-{}", cfg.seed, &config_hash[..12]),
            config_hash,
            seed: cfg.seed,
        }
    }

    pub fn provenance(&self) -> fedstack::metrics::Provenance {
        fedstack::metrics::Provenance { run_id: self.run_id.clone(), config_hash: self.config_hash.clone() }
    }
}

/// A CSV table whose rows get `seed,config_hash` prepended on render.
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells);
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn render(&self, stamp: &Stamp) -> String {
        let mut out = format!("seed,config_hash,{}\n", self.header.join(","));
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", stamp.seed, stamp.config_hash, r.join(",")));
        }
        out
    }
}

/// Formats any displayable cell.
pub fn cell(v: impl Display) -> String {
    v.to_string()
}

/// Prepends `seed` to a CSV that already carries the config hash.
pub fn with_seed(csv: &str, seed: u64) -> String {
    let mut lines = csv.lines();
    let mut out = String::new();
    if let Some(h) = lines.next() {
        out.push_str(&format!("seed,{h}\n"));
    }
    for l in lines {
        out.push_str(&format!("{seed},{l}\n"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
struct FileRecord {
    path: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    run_id: &'a str,
    config_hash: &'a str,
    seed: u64,
    data: &'a T,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    #[serde(flatten)]
    stamp: &'a Stamp,
    status: &'a str,
    settings: serde_json::Value,
    outputs: Vec<&'a FileRecord>,
}

pub struct Outputs {
    dir: PathBuf,
    pub stamp: Stamp,
    files: BTreeMap<String, FileRecord>,
}

impl Outputs {
    /// Output directory of `stamp.command` under `out_dir`.
    pub fn create(out_dir: &Path, stamp: Stamp) -> Result<Self> {
        let dir = out_dir.join(&stamp.command);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir, stamp, files: BTreeMap::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let bytes = bytes.as_ref();
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let record =
            FileRecord { path: rel.to_string(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) };
        self.files.insert(rel.to_string(), record);
        Ok(path)
    }

    pub fn write_table(&mut self, rel: &str, table: &Table) -> Result<PathBuf> {
        let text = table.render(&self.stamp);
        self.write(rel, text)
    }

    /// Writes `data` wrapped with the run identity.
    pub fn write_json<T: Serialize>(&mut self, rel: &str, data: &T) -> Result<PathBuf> {
        let stamped =
            Stamped { run_id: &self.stamp.run_id, config_hash: &self.stamp.config_hash, seed: self.stamp.seed, data };
        let text = serde_json::to_string_pretty(&stamped)? + "\n";
        self.write(rel, text)
    }

    /// Writes `{stem}.svg` and `{stem}.csv`.
    pub fn write_chart(&mut self, stem: &str, chart: &LineChart) -> Result<()> {
        let svg = chart.to_svg(self.stamp.seed, &self.stamp.config_hash);
        let csv = chart.to_csv(self.stamp.seed, &self.stamp.config_hash);
        self.write(&format!("{stem}.svg"), svg)?;
        self.write(&format!("{stem}.csv"), csv)?;
        Ok(())
    }

    /// Writes the manifest: run identity, the hashed settings and every
    /// output with its digest.
    pub fn finish(self, cfg: &RunConfig, status: &str) -> Result<PathBuf> {
        let manifest = Manifest {
            format: MANIFEST_FORMAT,
            stamp: &self.stamp,
            status,
            settings: cfg.settings(),
            outputs: self.files.values().collect(),
        };
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        let path = self.dir.join(MANIFEST);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Reads a stamped JSON output back into its data part.
pub fn read_stamped<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut v: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let data = v.get_mut("data").map(serde_json::Value::take).context("missing \"data\"")?;
    serde_json::from_value(data).with_context(|| format!("decoding {}", path.display()))
}
