//! Parameter container: a versioned text manifest plus one raw
//! little-endian float64 blob. Checkpoints and exported condition banks
//! share this format; round-trips are bit-exact.
//!
//! `manifest.txt`:
//! ```text
//! styleseg-params v1
//! meta <key> <value-json>
//! param <name> <d0,d1,...> <byte-offset>
//! ```
//! `params.f64` holds every tensor back to back, in manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use thiserror::Error;

use crate::Tensor;

const MAGIC: &str = "styleseg-params v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad parameter container: {0}")]
    Format(String),
    #[error("unknown container version '{0}' (expected '{MAGIC}')")]
    Version(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write named tensors plus metadata into `dir`.
pub fn write_container(
    dir: &Path,
    meta: &BTreeMap<String, String>,
    tensors: &[(String, &Tensor)],
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    for (k, v) in meta {
        manifest.push_str(&format!(
            "meta {k} {}\n",
            serde_json::to_string(v).expect("string always serializes")
        ));
    }
    let mut blob = Vec::new();
    for (name, tensor) in tensors {
        let shape = tensor
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let shape = if shape.is_empty() { "scalar".into() } else { shape };
        manifest.push_str(&format!("param {name} {shape} {}\n", blob.len()));
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;
    let bpath = dir.join("params.f64");
    fs::write(&bpath, blob).map_err(io_err(&bpath))?;
    Ok(())
}

/// Read a container back: metadata plus named tensors in manifest order.
#[allow(clippy::type_complexity)]
pub fn read_container(
    dir: &Path,
) -> Result<(BTreeMap<String, String>, Vec<(String, Tensor)>), CheckpointError> {
    let mpath = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut lines = manifest.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(CheckpointError::Version(magic.to_string()));
    }

    let bpath = dir.join("params.f64");
    let mut blob = Vec::new();
    fs::File::open(&bpath)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(io_err(&bpath))?;

    let mut meta = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let mut parts = line.splitn(2, ' ');
        match parts.next() {
            Some("meta") => {
                let rest = parts.next().unwrap_or_default();
                let (key, value_json) = rest.split_once(' ').ok_or_else(|| {
                    CheckpointError::Format(format!("bad meta line '{line}'"))
                })?;
                let value: String = serde_json::from_str(value_json).map_err(|e| {
                    CheckpointError::Format(format!("bad meta value on '{line}': {e}"))
                })?;
                meta.insert(key.to_string(), value);
            }
            Some("param") => {
                let rest = parts.next().unwrap_or_default();
                let fields: Vec<&str> = rest.split(' ').collect();
                if fields.len() != 3 {
                    return Err(CheckpointError::Format(format!("bad param line '{line}'")));
                }
                let name = fields[0].to_string();
                let shape: Vec<usize> = if fields[1] == "scalar" {
                    vec![]
                } else {
                    fields[1]
                        .split(',')
                        .map(|d| {
                            d.parse().map_err(|_| {
                                CheckpointError::Format(format!("bad shape on '{line}'"))
                            })
                        })
                        .collect::<Result<_, _>>()?
                };
                let offset: usize = fields[2]
                    .parse()
                    .map_err(|_| CheckpointError::Format(format!("bad offset on '{line}'")))?;
                let count: usize = shape.iter().product();
                let end = offset + count * 8;
                if end > blob.len() {
                    return Err(CheckpointError::Format(format!(
                        "param {name} extends past blob end ({end} > {})",
                        blob.len()
                    )));
                }
                let data: Vec<f64> = blob[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                tensors.push((
                    name,
                    Tensor::new(shape, data)
                        .map_err(|e| CheckpointError::Format(e.to_string()))?,
                ));
            }
            Some("") | None => {}
            Some(other) => {
                return Err(CheckpointError::Format(format!(
                    "unknown manifest key '{other}'"
                )))
            }
        }
    }
    Ok((meta, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), "test container".to_string());
        let a = Tensor::from_fn(&[2, 3], |i| (i as f64).exp() * 1.0e-7 - 0.3);
        let b = Tensor::scalar(std::f64::consts::PI);
        write_container(
            dir.path(),
            &meta,
            &[("alpha".into(), &a), ("beta".into(), &b)],
        )
        .unwrap();
        let (meta2, tensors) = read_container(dir.path()).unwrap();
        assert_eq!(meta2.get("kind").unwrap(), "test container");
        assert_eq!(tensors.len(), 2);
        assert_eq!(tensors[0].0, "alpha");
        assert_eq!(tensors[0].1, a);
        assert_eq!(tensors[1].1, b);
        // byte-for-byte stable across rewrites
        let before = fs::read(dir.path().join("params.f64")).unwrap();
        write_container(
            dir.path(),
            &meta,
            &[("alpha".into(), &a), ("beta".into(), &b)],
        )
        .unwrap();
        assert_eq!(before, fs::read(dir.path().join("params.f64")).unwrap());
    }

    #[test]
    fn version_gate() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.txt"), "styleseg-params v0\n").unwrap();
        fs::write(dir.path().join("params.f64"), []).unwrap();
        assert!(matches!(
            read_container(dir.path()),
            Err(CheckpointError::Version(_))
        ));
    }
}
