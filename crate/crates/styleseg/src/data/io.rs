//! On-disk dataset container: one directory per cohort holding a text
//! manifest, a raw little-endian float32 image blob, and bit-packed masks.
//!
//! Layout of `<dir>/`:
//! - `manifest.txt` - schema version, cohort fields, the generating spec
//!   echoed as one JSON line, and one line per sample.
//! - `images.f32` - `n * C * H * W` little-endian f32.
//! - `masks.bin` - per sample: label bits then base-truth bits, each
//!   row-major, MSB-first, zero-padded to whole bytes.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::metrics::Mask;
use crate::Tensor;

use super::{CohortSpec, DataError, Sample, IMAGE_CHANNELS};

const MAGIC: &str = "styleseg-dataset v1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect()
}

/// Write one cohort into `dir` (created if missing).
pub fn save_cohort(dir: &Path, spec: &CohortSpec, samples: &[Sample]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (h, w) = (spec.height, spec.width);

    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("source {}\n", spec.source));
    manifest.push_str(&format!("samples {}\n", samples.len()));
    manifest.push_str(&format!("channels {IMAGE_CHANNELS}\n"));
    manifest.push_str(&format!("height {h}\n"));
    manifest.push_str(&format!("width {w}\n"));
    let spec_json = serde_json::to_string(spec)
        .map_err(|e| DataError::Format(format!("spec serialization: {e}")))?;
    manifest.push_str(&format!("spec {spec_json}\n"));
    for (i, s) in samples.iter().enumerate() {
        manifest.push_str(&format!("sample {i} marker={}\n", s.has_marker as u8));
    }
    let mpath = dir.join("manifest.txt");
    fs::write(&mpath, manifest).map_err(io_err(&mpath))?;

    let ipath = dir.join("images.f32");
    let mut images = Vec::with_capacity(samples.len() * IMAGE_CHANNELS * h * w * 4);
    for s in samples {
        for &v in s.image.data() {
            images.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(&ipath, images).map_err(io_err(&ipath))?;

    let kpath = dir.join("masks.bin");
    let mut masks = Vec::new();
    for s in samples {
        masks.extend_from_slice(&pack_bits(s.label.bits()));
        masks.extend_from_slice(&pack_bits(s.base_truth.bits()));
    }
    fs::write(&kpath, masks).map_err(io_err(&kpath))?;
    Ok(())
}

/// Read one cohort directory back.
pub fn load_cohort(dir: &Path) -> Result<(CohortSpec, Vec<Sample>), DataError> {
    let mpath = dir.join("manifest.txt");
    let manifest = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let mut lines = manifest.lines();
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC {
        return Err(DataError::Format(format!(
            "{}: unknown container version '{magic}' (expected '{MAGIC}')",
            mpath.display()
        )));
    }
    let mut source = String::new();
    let mut n = 0usize;
    let mut channels = 0usize;
    let mut height = 0usize;
    let mut width = 0usize;
    let mut spec: Option<CohortSpec> = None;
    let mut markers = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "source" => source = rest.to_string(),
            "samples" => n = parse_num(rest, &mpath)?,
            "channels" => channels = parse_num(rest, &mpath)?,
            "height" => height = parse_num(rest, &mpath)?,
            "width" => width = parse_num(rest, &mpath)?,
            "spec" => {
                spec = Some(serde_json::from_str(rest).map_err(|e| {
                    DataError::Format(format!("{}: bad spec json: {e}", mpath.display()))
                })?)
            }
            "sample" => {
                let marker = rest.trim_end().ends_with("marker=1");
                markers.push(marker);
            }
            _ => {
                return Err(DataError::Format(format!(
                    "{}: unknown manifest key '{key}'",
                    mpath.display()
                )))
            }
        }
    }
    let spec = spec.ok_or_else(|| {
        DataError::Format(format!("{}: manifest missing spec line", mpath.display()))
    })?;
    if channels != IMAGE_CHANNELS || markers.len() != n {
        return Err(DataError::Format(format!(
            "{}: inconsistent manifest (channels {channels}, samples {n}, sample lines {})",
            mpath.display(),
            markers.len()
        )));
    }

    let ipath = dir.join("images.f32");
    let mut raw = Vec::new();
    fs::File::open(&ipath)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(io_err(&ipath))?;
    let per_image = channels * height * width;
    if raw.len() != n * per_image * 4 {
        return Err(DataError::Format(format!(
            "{}: expected {} bytes, found {}",
            ipath.display(),
            n * per_image * 4,
            raw.len()
        )));
    }

    let kpath = dir.join("masks.bin");
    let mut mask_raw = Vec::new();
    fs::File::open(&kpath)
        .and_then(|mut f| f.read_to_end(&mut mask_raw))
        .map_err(io_err(&kpath))?;
    let mask_bytes = (height * width).div_ceil(8);
    if mask_raw.len() != n * 2 * mask_bytes {
        return Err(DataError::Format(format!(
            "{}: expected {} bytes, found {}",
            kpath.display(),
            n * 2 * mask_bytes,
            mask_raw.len()
        )));
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let ibase = i * per_image * 4;
        let image = Tensor::from_fn(&[channels, height, width], |j| {
            let off = ibase + j * 4;
            f32::from_le_bytes([raw[off], raw[off + 1], raw[off + 2], raw[off + 3]]) as f64
        });
        let mbase = i * 2 * mask_bytes;
        let label = Mask::from_bits(
            height,
            width,
            unpack_bits(&mask_raw[mbase..mbase + mask_bytes], height * width),
        );
        let base_truth = Mask::from_bits(
            height,
            width,
            unpack_bits(
                &mask_raw[mbase + mask_bytes..mbase + 2 * mask_bytes],
                height * width,
            ),
        );
        samples.push(Sample {
            image,
            label,
            base_truth,
            source: source.clone(),
            has_marker: markers[i],
        });
    }
    Ok((spec, samples))
}

/// Write a whole dataset: one subdirectory per cohort, named by source.
pub fn save_dataset(
    dir: &Path,
    cohorts: &[(CohortSpec, Vec<Sample>)],
) -> Result<(), DataError> {
    for (spec, samples) in cohorts {
        save_cohort(&dir.join(&spec.source), spec, samples)?;
    }
    Ok(())
}

/// Load every cohort subdirectory (sorted by name, so ordering is stable).
pub fn load_dataset(dir: &Path) -> Result<Vec<(CohortSpec, Vec<Sample>)>, DataError> {
    let mut subdirs: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.txt").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(DataError::Format(format!(
            "{}: no cohort directories found",
            dir.display()
        )));
    }
    subdirs.iter().map(|d| load_cohort(d)).collect()
}

fn parse_num(s: &str, path: &Path) -> Result<usize, DataError> {
    s.trim()
        .parse()
        .map_err(|_| DataError::Format(format!("{}: bad number '{s}'", path.display())))
}
