//! On-disk tensors and checkpoints.
//!
//! A tensor `name` is stored as `name.json`, holding
//! `{"dtype":"f32","shape":[...],"byte_order":"little"}`, next to `name.bin`
//! with the raw little-endian `f32` values in row-major order. A checkpoint is
//! a directory of such tensors plus `manifest.json` listing parameter names,
//! shapes and free-form tags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct TensorHeader {
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
}

fn header_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.json"))
}

fn raw_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn save_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    let header = TensorHeader {
        dtype: "f32".into(),
        shape: t.shape().to_vec(),
        byte_order: "little".into(),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    write_file(&header_path(dir, name), json.as_bytes())?;
    let mut bytes = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&raw_path(dir, name), &bytes)
}

pub fn load_tensor(dir: &Path, name: &str) -> Result<Tensor> {
    let hp = header_path(dir, name);
    let text = read_file(&hp)?;
    let header: TensorHeader =
        serde_json::from_slice(&text).map_err(|e| Error::parse(&hp, e.to_string()))?;
    if header.dtype != "f32" {
        return Err(Error::parse(&hp, format!("dtype: unsupported '{}'", header.dtype)));
    }
    if header.byte_order != "little" {
        return Err(Error::parse(
            &hp,
            format!("byte_order: unsupported '{}'", header.byte_order),
        ));
    }
    let rp = raw_path(dir, name);
    let bytes = read_file(&rp)?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::parse(
            &rp,
            format!(
                "expected {} bytes for shape {:?}, found {}",
                n * 4,
                header.shape,
                bytes.len()
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new_allow_empty(header.shape, data)
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Default)]
pub struct CheckpointManifest {
    pub params: Vec<ManifestEntry>,
    pub tags: BTreeMap<String, String>,
}

pub fn save_checkpoint(dir: &Path, params: &ParamSet, tags: &BTreeMap<String, String>) -> Result<()> {
    let mut manifest = CheckpointManifest {
        params: Vec::new(),
        tags: tags.clone(),
    };
    for p in params.iter() {
        save_tensor(dir, &p.name, p.value())?;
        manifest.params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value().shape().to_vec(),
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join("manifest.json"), json.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mp = dir.join("manifest.json");
    if !mp.exists() {
        return Err(Error::MissingArtifact(format!(
            "checkpoint manifest {} not found",
            mp.display()
        )));
    }
    let text = read_file(&mp)?;
    serde_json::from_slice(&text).map_err(|e| Error::parse(&mp, e.to_string()))
}

/// Overwrites the values of `params` from a checkpoint with identical names
/// and shapes. Returns the checkpoint tags.
pub fn load_checkpoint_into(dir: &Path, params: &mut ParamSet) -> Result<BTreeMap<String, String>> {
    let manifest = read_manifest(dir)?;
    if manifest.params.len() != params.len() {
        return Err(Error::parse(
            dir.join("manifest.json"),
            format!(
                "params: expected {} entries, found {}",
                params.len(),
                manifest.params.len()
            ),
        ));
    }
    for entry in &manifest.params {
        let t = load_tensor(dir, &entry.name)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::parse(
                header_path(dir, &entry.name),
                format!("shape: manifest says {:?}, file has {:?}", entry.shape, t.shape()),
            ));
        }
        let p = params.by_name_mut(&entry.name).ok_or_else(|| {
            Error::parse(
                dir.join("manifest.json"),
                format!("params: unknown parameter '{}'", entry.name),
            )
        })?;
        p.set_value(t)?;
    }
    Ok(manifest.tags)
}
