//! Flat little-endian `f32` matrices with a JSON sidecar describing the shape.
//!
//! A payload `foo.mel.f32` is paired with `foo.mel.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sidecar for a generic row-major matrix (embeddings, alignments).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub rows: usize,
    pub cols: usize,
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    payload.with_extension("json")
}

pub fn encode_f32(values: &Array2<f64>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    bytes
}

pub fn decode_f32(bytes: &[u8], rows: usize, cols: usize) -> Result<Array2<f64>> {
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("shape {rows}x{cols} overflows")))?;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload holds {} bytes but shape {rows}x{cols} needs {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked above"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes the payload and a sidecar built by the caller.
pub fn write_matrix_with<S: Serialize>(payload: &Path, values: &Array2<f64>, sidecar: &S) -> Result<()> {
    if let Some(dir) = payload.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(payload, encode_f32(values)).map_err(|e| Error::io(payload, e))?;
    write_json(&sidecar_path(payload), sidecar)
}

pub fn write_matrix(payload: &Path, values: &Array2<f64>) -> Result<()> {
    let (rows, cols) = values.dim();
    write_matrix_with(payload, values, &MatrixSidecar { rows, cols })
}

fn read_payload(payload: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(payload).map_err(|e| Error::io(payload, e))?;
    decode_f32(&bytes, rows, cols)
}

/// Reads a matrix whose sidecar is a [`MatrixSidecar`].
pub fn read_matrix(payload: &Path) -> Result<Array2<f64>> {
    let sidecar = sidecar_path(payload);
    if !sidecar.exists() {
        return Err(Error::Format(format!("missing sidecar {}", sidecar.display())));
    }
    let shape: MatrixSidecar = read_json(&sidecar)?;
    read_payload(payload, shape.rows, shape.cols)
}

/// Reads a payload whose sidecar type carries its own shape.
pub fn read_matrix_as<S: DeserializeOwned>(
    payload: &Path,
    shape: impl Fn(&S) -> (usize, usize),
) -> Result<(Array2<f64>, S)> {
    let sidecar_file = sidecar_path(payload);
    if !sidecar_file.exists() {
        return Err(Error::Format(format!("missing sidecar {}", sidecar_file.display())));
    }
    let sidecar: S = read_json(&sidecar_file)?;
    let (rows, cols) = shape(&sidecar);
    Ok((read_payload(payload, rows, cols)?, sidecar))
}
