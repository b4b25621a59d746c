//! Bundle checkpoint archive.
//!
//! Layout: an 8-byte magic, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, a JSON manifest (metadata plus a
//! table of named arrays with dtype, shape, and payload offsets), then the
//! concatenated row-major little-endian `f64` array payload.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BundleMeta, ModelBundle, Variant};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"JSCCBNDL";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    meta: BundleMeta,
    arrays: Vec<ArrayEntry>,
}

fn collect_named<'a>(bundle: &'a ModelBundle) -> Vec<(String, ndarray::ArrayViewD<'a, f64>)> {
    let mut tensors = bundle.encoder.named_tensors("encoder");
    tensors.extend(bundle.decoder.named_tensors("decoder"));
    if let Some(denoiser) = &bundle.denoiser {
        tensors.extend(denoiser.named_tensors("denoiser"));
    }
    tensors
}

/// Writes the bundle (weights, running statistics, metadata) to `path`.
pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let tensors = collect_named(bundle);
    let mut arrays = Vec::with_capacity(tensors.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, view) in &tensors {
        let offset = payload.len() as u64;
        for v in view.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        arrays.push(ArrayEntry {
            name: name.clone(),
            dtype: "f64".to_string(),
            shape: view.shape().to_vec(),
            offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        meta: bundle.meta.clone(),
        arrays,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a bundle back; the archive is validated structurally and every
/// array must match the reconstructed network's tensor table exactly.
pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(Error::Checkpoint(format!(
            "{} is truncated ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a bundle checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let manifest_end = 20usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("manifest extends past end of file".to_string()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..manifest_end])
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let payload = &bytes[manifest_end..];

    let mut bundle = ModelBundle::init(manifest.meta.config.clone(), manifest.meta.sigma_train, 0)?;
    if manifest.meta.has_denoiser {
        bundle.init_denoiser(0);
    }
    bundle.meta = manifest.meta.clone();

    let mut expected: HashMap<String, ndarray::ArrayViewMutD<'_, f64>> = HashMap::new();
    {
        let mut tensors = bundle.encoder.named_tensors_mut("encoder");
        tensors.extend(bundle.decoder.named_tensors_mut("decoder"));
        if let Some(denoiser) = &mut bundle.denoiser {
            tensors.extend(denoiser.named_tensors_mut("denoiser"));
        }
        for (name, view) in tensors {
            expected.insert(name, view);
        }
    }

    let mut seen = 0usize;
    for entry in &manifest.arrays {
        if entry.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "array {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let view = expected.get_mut(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "checkpoint array {} does not exist in the reconstructed model",
                entry.name
            ))
        })?;
        if view.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "array {} has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                entry.shape,
                view.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() || entry.byte_len as usize != view.len() * 8 {
            return Err(Error::Checkpoint(format!(
                "array {} payload is truncated or mis-sized",
                entry.name
            )));
        }
        for (dst, chunk) in view.iter_mut().zip(payload[start..end].chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        seen += 1;
    }
    if seen != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint provides {seen} arrays but the model needs {}",
            expected.len()
        )));
    }
    Ok(bundle)
}

/// Constraints a caller can impose when loading a checkpoint; any mismatch is
/// reported naming both the requested and the stored value.
#[derive(Debug, Default, Clone)]
pub struct BundleExpectation {
    pub variant: Option<Variant>,
    pub cpp: Option<(u32, u32)>,
    pub codeword_channels: Option<usize>,
}

pub fn load_bundle_checked(path: &Path, expect: &BundleExpectation) -> Result<ModelBundle> {
    let bundle = load_bundle(path)?;
    if let Some(variant) = expect.variant {
        if bundle.meta.config.variant != variant {
            return Err(Error::Checkpoint(format!(
                "requested variant {variant} but checkpoint holds {}",
                bundle.meta.config.variant
            )));
        }
    }
    if let Some((num, den)) = expect.cpp {
        let stored = (bundle.meta.config.cpp_num, bundle.meta.config.cpp_den);
        if stored != (num, den) {
            return Err(Error::Checkpoint(format!(
                "requested cpp {num}/{den} but checkpoint holds {}/{}",
                stored.0, stored.1
            )));
        }
    }
    if let Some(cw) = expect.codeword_channels {
        let stored = bundle.meta.config.encoder.codeword_channels;
        if stored != cw {
            return Err(Error::Checkpoint(format!(
                "requested {cw} codeword channels but checkpoint holds {stored}"
            )));
        }
    }
    Ok(bundle)
}
