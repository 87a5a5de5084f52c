//! On-disk formats: FMAT matrices, PLY point clouds, JSON documents and CSV tables.

pub mod fmat;
pub mod ply;
pub mod schema;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

pub use fmat::{read_fmat, write_fmat, Dtype, Section};
pub use ply::{read_ply, write_ply};
pub use schema::*;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid data: {0}")]
    Format(String),
}

impl IoError {
    pub fn format(msg: impl Into<String>) -> Self {
        IoError::Format(msg.into())
    }

    fn at(path: &Path, source: std::io::Error) -> Self {
        IoError::File { path: path.to_path_buf(), source }
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>, IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| IoError::at(path, e))
}

pub fn open(path: &Path) -> Result<BufReader<File>, IoError> {
    File::open(path).map(BufReader::new).map_err(|e| IoError::at(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::Json { path: path.into(), source: e })?;
    text.push('\n');
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| IoError::at(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    serde_json::from_reader(open(path)?).map_err(|e| IoError::Json { path: path.into(), source: e })
}

pub fn save_fmat(path: &Path, sections: &[Section]) -> Result<(), IoError> {
    write_fmat(create(path)?, sections)
}

pub fn load_fmat(path: &Path) -> Result<Vec<Section>, IoError> {
    read_fmat(open(path)?).map_err(|e| match e {
        IoError::Io(source) => IoError::at(path, source),
        other => other,
    })
}

pub fn save_ply(path: &Path, points: &[nalgebra::Vector3<f64>], binary: bool) -> Result<(), IoError> {
    write_ply(create(path)?, points, binary)
}

pub fn load_ply(path: &Path) -> Result<Vec<nalgebra::Vector3<f64>>, IoError> {
    read_ply(open(path)?)
}

/// Looks up a section by name.
pub fn section<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section, IoError> {
    sections
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| IoError::format(format!("missing FMAT section {name}")))
}
