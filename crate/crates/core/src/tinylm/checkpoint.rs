// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint files.
//!
//! Layout: the magic line `editlab-checkpoint v1`, one line of JSON manifest
//! (config, tokenizer table, tensor name → shape and byte offset), then a
//! blob of little-endian `f32` values. An `f32` model round-trips bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::model::{tensor_shapes, ModelState, Weights};
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "editlab-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset inside the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
}

pub fn write_to<T: Scalar, W: Write>(model: &ModelState<T>, mut w: W) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, shape) in tensor_shapes(&model.config) {
        let n: usize = shape.iter().product();
        tensors.push(TensorEntry { name, shape, offset });
        offset += 4 * n;
    }
    let manifest = Manifest {
        config: model.config.clone(),
        tokenizer: model.tokenizer.clone(),
        tensors,
        blob_bytes: offset,
    };
    writeln!(w, "{MAGIC}")?;
    serde_json::to_writer(&mut w, &manifest)?;
    writeln!(w)?;
    for s in model.weights.flat() {
        for &x in s {
            w.write_all(&(x.f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_from<T: Scalar, R: BufRead>(mut r: R) -> Result<ModelState<T>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(&line)?;
    manifest.config.validate()?;
    let expected = tensor_shapes(&manifest.config);
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint("tensor table does not match config".into()));
    }
    let mut blob = vec![0u8; manifest.blob_bytes];
    r.read_exact(&mut blob)?;
    let mut weights = Weights::<T>::zeros(&manifest.config);
    for ((entry, (name, shape)), dst) in manifest.tensors.iter().zip(&expected).zip(weights.flat_mut()) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!("unexpected tensor {} {:?}", entry.name, entry.shape)));
        }
        let end = entry.offset + 4 * dst.len();
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} overruns blob")))?;
        for (x, c) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *x = T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        }
    }
    Ok(ModelState { config: manifest.config, weights, tokenizer: manifest.tokenizer })
}

pub fn save<T: Scalar>(model: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    write_to(model, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    read_from(BufReader::new(File::open(path)?))
}
