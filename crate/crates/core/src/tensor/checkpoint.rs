//! Checkpoint directories: `manifest.json` plus one little-endian `f64`
//! blob per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    parameters: BTreeMap<String, ManifestEntry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

/// A loaded checkpoint: raw parameter values keyed by name, plus free-form
/// metadata (model config, vocabulary, normalisation statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub parameters: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub metadata: serde_json::Value,
}

fn blob_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.bin")
}

pub fn save_checkpoint(
    dir: &Path,
    params: &[(String, Tensor)],
    metadata: &serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut parameters = BTreeMap::new();
    for (name, t) in params {
        let file = blob_name(name);
        if parameters.values().any(|e: &ManifestEntry| e.file == file) {
            return Err(Error::Format(format!(
                "parameter file name collision for {name}"
            )));
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        parameters.insert(
            name.clone(),
            ManifestEntry {
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                file,
            },
        );
    }
    let manifest = Manifest {
        parameters,
        metadata: metadata.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut parameters = BTreeMap::new();
    for (name, entry) in manifest.parameters {
        if entry.dtype != "f64" {
            return Err(Error::Format(format!(
                "{name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "{name}: expected {} bytes, found {}",
                n * 8,
                bytes.len()
            )));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        parameters.insert(name, (entry.shape, values));
    }
    Ok(Checkpoint {
        parameters,
        metadata: manifest.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300], &[2, 2]).unwrap();
        let b = Tensor::new(vec![std::f64::consts::PI], &[1]).unwrap();
        let meta = serde_json::json!({"vocab": ["a", "b"]});
        save_checkpoint(
            dir.path(),
            &[("enc.w".into(), a.clone()), ("b".into(), b)],
            &meta,
        )
        .unwrap();
        let ck = load_checkpoint(dir.path()).unwrap();
        let (shape, vals) = &ck.parameters["enc.w"];
        assert_eq!(shape, &vec![2, 2]);
        let bits: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        let orig: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, orig);
        assert_eq!(ck.metadata, meta);
    }
}
