//! Binary tensor container used for checkpoints and generated latents:
//! magic "UFAD", a little-endian u32 version, a u64 manifest length, a JSON
//! manifest (metadata plus per-tensor name/dtype/shape/offset), then a
//! contiguous little-endian f32 payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"UFAD";
pub const VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Meta {
    pub config: ModelConfig,
    pub step: u64,
    /// Seed that reproduces the run (training) or the draw (generation).
    pub rng_state: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Byte offset into the payload region.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

/// Serialize named tensors in the given order. Values are rounded to f32.
pub fn write_tensors(path: &Path, meta: &Meta, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, tensor) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            dtype: "f32".to_string(),
            shape: tensor.shape.clone(),
            offset: payload.len() as u64,
        });
        for &v in &tensor.data {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest { meta: meta.clone(), tensors: entries };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest encoding failed: {e}")))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct Loaded {
    pub meta: Meta,
    /// Tensors keyed by manifest name, widened back to f64.
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parse a container file. All structural checks run before any tensor is
/// materialized, so a corrupt file never yields partial state.
pub fn read_tensors(path: &Path) -> Result<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated container: {} bytes, header alone needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?} at offset 0 (expected {:02x?})",
            &bytes[0..4],
            MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} at offset 4 (expected {VERSION})"
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = HEADER_LEN.checked_add(manifest_len).ok_or_else(|| {
        Error::Format(format!("manifest length {manifest_len} at offset 8 overflows"))
    })?;
    if payload_start > bytes.len() {
        return Err(Error::Format(format!(
            "manifest length {manifest_len} at offset 8 exceeds file size {}",
            bytes.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
        .map_err(|e| {
            Error::Format(format!(
                "bad manifest near offset {}: {e}",
                HEADER_LEN + e.column().saturating_sub(1)
            ))
        })?;
    let payload = &bytes[payload_start..];
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Format(format!(
                "tensor '{}' has dtype '{}' (only f32 is defined)",
                entry.name, entry.dtype
            )));
        }
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(Error::Format(format!(
                "tensor '{}' has degenerate shape {:?}",
                entry.name, entry.shape
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel * 4)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "tensor '{}' spans past end of file (payload offset {}, {} bytes needed, {} available)",
                    entry.name,
                    entry.offset,
                    numel * 4,
                    payload.len().saturating_sub(start)
                ))
            })?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if tensors.insert(entry.name.clone(), Tensor::new(&entry.shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{}' in manifest", entry.name)));
        }
    }
    Ok(Loaded { meta: manifest.meta, tensors })
}

/// Write a full parameter set with its config, step count and run seed.
pub fn save_checkpoint(path: &Path, params: &ParamSet, step: u64, rng_state: u64) -> Result<()> {
    let meta = Meta { config: params.config.clone(), step, rng_state };
    let tensors: Vec<(&str, &Tensor)> = params.iter().collect();
    write_tensors(path, &meta, &tensors)
}

/// Load a parameter set. With `expected`, the file's tensor names must match
/// that config's layout exactly; otherwise the embedded config governs.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ParamSet, Meta)> {
    let loaded = read_tensors(path)?;
    let config = expected.unwrap_or(&loaded.meta.config).clone();
    let mut params = ParamSet::init(&config, 0)?;
    let want: Vec<String> = params.names().map(str::to_string).collect();
    let missing: Vec<String> =
        want.iter().filter(|n| !loaded.tensors.contains_key(*n)).cloned().collect();
    let extra: Vec<String> =
        loaded.tensors.keys().filter(|n| !want.contains(n)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::ManifestMismatch { missing, extra });
    }
    for (name, tensor) in loaded.tensors {
        params.set(&name, tensor)?;
    }
    Ok((params, loaded.meta))
}

/// Write one generated latent with the config and seed that produced it.
pub fn save_latent(path: &Path, config: &ModelConfig, seed: u64, latent: &Tensor) -> Result<()> {
    let meta = Meta { config: config.clone(), step: 0, rng_state: seed };
    write_tensors(path, &meta, &[("latent", latent)])
}

pub fn load_latent(path: &Path) -> Result<(Meta, Tensor)> {
    let loaded = read_tensors(path)?;
    let mut tensors = loaded.tensors;
    let latent = tensors
        .remove("latent")
        .ok_or_else(|| Error::Format("container has no 'latent' tensor".to_string()))?;
    Ok((loaded.meta, latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("latentflow-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn save_load_save_is_byte_identical_and_rounds_to_f32() {
        let params = ParamSet::init(&ModelConfig::check(), 5).unwrap();
        let a = tmp("round_a.ufad");
        let b = tmp("round_b.ufad");
        save_checkpoint(&a, &params, 42, 7).unwrap();
        let (loaded, meta) = load_checkpoint(&a, None).unwrap();
        assert_eq!(meta.step, 42);
        assert_eq!(meta.rng_state, 7);
        assert_eq!(meta.config, params.config);
        for (name, t) in params.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape, t.shape);
            for (lv, tv) in l.data.iter().zip(&t.data) {
                assert_eq!(*lv, (*tv as f32) as f64, "{name} not f32-rounded");
            }
        }
        save_checkpoint(&b, &loaded, 42, 7).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_corruption_is_rejected_with_offsets() {
        let params = ParamSet::init(&ModelConfig::check(), 5).unwrap();
        let path = tmp("header.ufad");
        save_checkpoint(&path, &params, 0, 0).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = read_tensors(&path).unwrap_err().to_string();
        assert!(err.contains("offset 0"), "{err}");

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        let err = read_tensors(&path).unwrap_err().to_string();
        assert!(err.contains("offset 4"), "{err}");

        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        let err = read_tensors(&path).unwrap_err().to_string();
        assert!(err.contains("offset 8"), "{err}");

        std::fs::write(&path, &good[..10]).unwrap();
        let err = read_tensors(&path).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn manifest_corruption_is_rejected_without_partial_state() {
        let params = ParamSet::init(&ModelConfig::check(), 5).unwrap();
        let path = tmp("manifest.ufad");
        save_checkpoint(&path, &params, 0, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[HEADER_LEN] = 0; // first manifest byte: '{' becomes NUL
        std::fs::write(&path, &bytes).unwrap();
        match read_tensors(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("manifest"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn payload_truncation_names_the_tensor() {
        let params = ParamSet::init(&ModelConfig::check(), 5).unwrap();
        let path = tmp("payload.ufad");
        save_checkpoint(&path, &params, 0, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_tensors(&path).unwrap_err().to_string();
        assert!(err.contains("spans past end"), "{err}");
    }

    #[test]
    fn cross_config_load_lists_missing_and_extra_names() {
        let params = ParamSet::init(&ModelConfig::check(), 5).unwrap();
        let path = tmp("cross.ufad");
        save_checkpoint(&path, &params, 0, 0).unwrap();

        let shallow = ModelConfig { depth: 1, ..ModelConfig::check() };
        match load_checkpoint(&path, Some(&shallow)) {
            Err(Error::ManifestMismatch { missing, extra }) => {
                assert!(missing.is_empty());
                assert!(!extra.is_empty());
                assert!(extra.iter().all(|n| n.starts_with("blocks.1.")), "{extra:?}");
            }
            other => panic!("expected manifest mismatch, got {other:?}"),
        }

        let deep = ModelConfig { depth: 3, ..ModelConfig::check() };
        match load_checkpoint(&path, Some(&deep)) {
            Err(Error::ManifestMismatch { missing, extra }) => {
                assert!(extra.is_empty());
                assert!(missing.iter().all(|n| n.starts_with("blocks.2.")), "{missing:?}");
            }
            other => panic!("expected manifest mismatch, got {other:?}"),
        }
    }

    #[test]
    fn latent_container_round_trips_at_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let latent = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let path = tmp("latent.ufad");
        save_latent(&path, &ModelConfig::check(), 99, &latent).unwrap();
        let (meta, back) = load_latent(&path).unwrap();
        assert_eq!(meta.rng_state, 99);
        assert_eq!(back.shape, vec![6, 8]);
        for (a, b) in back.data.iter().zip(&latent.data) {
            assert_eq!(*a, (*b as f32) as f64);
        }
    }
}
