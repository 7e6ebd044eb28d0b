//! Directories of raw little-endian f64 tensors described by a JSON manifest.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{DpmsError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: [usize; 2],
}

/// File name safe for any block name.
pub fn file_name(index: usize, name: &str) -> String {
    let clean: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}-{clean}.f64")
}

pub fn write_tensor(dir: &Path, index: usize, name: &str, values: &Array2<f64>) -> Result<TensorEntry> {
    let file = file_name(index, name);
    let path = dir.join(&file);
    let mut bytes = Vec::with_capacity(values.len() * 8);
    // iteration order of `iter` is logical row-major regardless of memory layout
    for v in values.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| DpmsError::io(&path, e))?;
    Ok(TensorEntry {
        name: name.to_string(),
        file,
        shape: [values.nrows(), values.ncols()],
    })
}

pub fn read_tensor(dir: &Path, entry: &TensorEntry) -> Result<Array2<f64>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| DpmsError::io(&path, e))?;
    let [r, c] = entry.shape;
    if bytes.len() != r * c * 8 {
        return Err(DpmsError::shape(format!("tensor file {}", entry.file), &[r * c * 8], &[bytes.len()]));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
        .collect();
    Array2::from_shape_vec((r, c), data).map_err(|e| DpmsError::Invalid(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DpmsError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DpmsError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpmsError::io(dir, e))
}
