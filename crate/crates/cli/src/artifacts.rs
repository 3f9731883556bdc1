//! Artifact files and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("series {name}: row {row} has {got} fields, expected {expected}")]
    Ragged {
        name: String,
        row: usize,
        got: usize,
        expected: usize,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write `rows` under a header row as `dir/name.csv`. Floats use the
/// shortest representation that parses back to the same value.
pub fn emit_series(dir: &Path, name: &str, columns: &[&str], rows: &[Vec<f64>]) -> Result<PathBuf, ArtifactError> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != columns.len() {
            return Err(ArtifactError::Ragged {
                name: name.to_string(),
                row: i,
                got: r.len(),
                expected: columns.len(),
            });
        }
    }
    let path = dir.join(format!("{name}.csv"));
    let csv_err = |source| ArtifactError::Csv {
        path: path.clone(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(csv_err)?;
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|v| format!("{v:?}"))).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

/// Read a series written by [`emit_series`].
pub fn read_series(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), ArtifactError> {
    let csv_err = |source| ArtifactError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(rec.iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect());
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, ArtifactError> {
    let path = dir.join(format!("{name}.json"));
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ArtifactError::Json {
        path: path.clone(),
        source,
    })?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ArtifactError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| ArtifactError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn sha256_file(path: &Path) -> Result<String, ArtifactError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    /// Hashes of the serialized model, dichotomy, projector and kick law.
    pub component_hashes: BTreeMap<String, String>,
    /// File name to checksum.
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn load_or_new(dir: &Path, config_hash: &str) -> Result<Self, ArtifactError> {
        let path = dir.join(MANIFEST);
        let mut m = if path.exists() {
            read_json::<RunManifest>(&path)?
        } else {
            RunManifest::default()
        };
        if m.config_hash != config_hash {
            // A different configuration invalidates earlier artifacts.
            m = RunManifest::default();
        }
        m.tool_version = env!("CARGO_PKG_VERSION").to_string();
        m.config_hash = config_hash.to_string();
        Ok(m)
    }

    pub fn record(&mut self, stage: &str, path: &Path) -> Result<(), ArtifactError> {
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.artifacts.insert(
            name,
            ArtifactEntry {
                stage: stage.to_string(),
                sha256: sha256_file(path)?,
            },
        );
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf, ArtifactError> {
        write_json(dir, "manifest", self)
    }

    /// Artifact checksums without timings.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|(k, v)| (k.clone(), v.sha256.clone()))
            .collect()
    }
}
