//! Tensor archive: a JSON manifest plus a little-endian f64 blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Length in bytes.
    pub nbytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub format_version: u32,
    pub blob: String,
    pub tensors: Vec<ManifestEntry>,
    /// Free-form metadata owned by the caller (configs, epoch, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `<stem>.json` and `<stem>.bin` into `dir`.
pub fn write_tensors(
    dir: &Path,
    stem: &str,
    tensors: &[(String, &Tensor)],
    meta: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let blob_name = format!("{stem}.bin");
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset,
            nbytes: blob.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blob: blob_name.clone(),
        tensors: entries,
        meta,
    };
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json_path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn read_tensors(dir: &Path, stem: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let json_path = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let blob_path = dir.join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(Error::Checkpoint(format!("tensor `{}` has dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.nbytes as usize);
        if len != n * 8 || start + len > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` spans bytes {start}..{} of a {}-byte blob",
                e.name,
                start + len,
                blob.len()
            )));
        }
        let data = blob[start..start + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name.clone(), Tensor::new(&e.shape, data)?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.25, 0.1]).unwrap();
        let b = Tensor::new(&[1], vec![std::f64::consts::PI]).unwrap();
        write_tensors(
            dir.path(),
            "ck",
            &[("a".into(), &a), ("b".into(), &b)],
            serde_json::json!({"epoch": 3}),
        )
        .unwrap();
        let (m, ts) = read_tensors(dir.path(), "ck").unwrap();
        assert_eq!(m.meta["epoch"], 3);
        assert_eq!(m.tensors[1].offset, 48);
        for ((_, got), want) in ts.iter().zip([&a, &b]) {
            assert_eq!(got.shape(), want.shape());
            let gb: Vec<u64> = got.data().iter().map(|v| v.to_bits()).collect();
            let wb: Vec<u64> = want.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(gb, wb);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::full(&[4], 1.0);
        write_tensors(dir.path(), "ck", &[("a".into(), &a)], serde_json::Value::Null).unwrap();
        std::fs::write(dir.path().join("ck.bin"), [0u8; 16]).unwrap();
        assert!(matches!(read_tensors(dir.path(), "ck"), Err(Error::Checkpoint(_))));
    }
}
