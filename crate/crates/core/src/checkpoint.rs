//! Model checkpoints: a directory holding `manifest.json` plus one raw
//! tensor file per parameter.
//!
//! The manifest records the model kind, storage precision, the full
//! model config, and for every tensor its name, shape, and file. Tensor
//! files are little-endian IEEE 754 in row-major order, nothing else.
//! Loads verify kind, precision (must equal the requested scalar type's
//! — no silent casts), tensor set, and every shape.

use crate::baselm::{BaseLM, BaseLMConfig};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};
use crate::specformer::{SpecFormer, SpecFormerConfig};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

const BASE_KIND: &str = "base-lm";
const SPEC_KIND: &str = "specformer";

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    kind: String,
    precision: Precision,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_config: Option<BaseLMConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spec_config: Option<SpecFormerConfig>,
    tensors: Vec<TensorEntry>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn write_tensors<S: Scalar>(
    dir: &Path,
    named: &[(String, &Tensor<S>)],
) -> Result<Vec<TensorEntry>> {
    let mut entries = Vec::with_capacity(named.len());
    for (name, tensor) in named {
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(tensor.numel() * S::BYTE_WIDTH);
        for &v in tensor.data() {
            v.write_le(&mut bytes);
        }
        std::fs::write(dir.join(&file), bytes)?;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: tensor.shape().to_vec(),
            file,
        });
    }
    Ok(entries)
}

fn read_tensor<S: Scalar>(dir: &Path, entry: &TensorEntry) -> Result<Tensor<S>> {
    let bytes = std::fs::read(dir.join(&entry.file))?;
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * S::BYTE_WIDTH {
        return Err(Error::Checkpoint(format!(
            "tensor `{}`: {} bytes on disk, shape {:?} needs {}",
            entry.name,
            bytes.len(),
            entry.shape,
            numel * S::BYTE_WIDTH
        )));
    }
    let data: Vec<S> = bytes
        .chunks_exact(S::BYTE_WIDTH)
        .map(S::read_le)
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn load_manifest(dir: &Path, want_kind: &str, want_precision: Precision) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.kind != want_kind {
        return Err(Error::Checkpoint(format!(
            "kind `{}` found, `{want_kind}` required",
            manifest.kind
        )));
    }
    if manifest.precision != want_precision {
        return Err(Error::Checkpoint(format!(
            "precision {} found, {} required (no implicit casts)",
            manifest.precision, want_precision
        )));
    }
    Ok(manifest)
}

/// A loader closure over the manifest's tensor table that also tracks
/// which names were consumed, so unused/missing tensors are detected.
struct TensorTable<'a> {
    dir: &'a Path,
    entries: BTreeMap<String, &'a TensorEntry>,
}

impl<'a> TensorTable<'a> {
    fn new(dir: &'a Path, manifest: &'a Manifest) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for e in &manifest.tensors {
            if entries.insert(e.name.clone(), e).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(TensorTable { dir, entries })
    }

    fn take<S: Scalar>(&mut self, name: &str) -> Result<Tensor<S>> {
        let entry = self
            .entries
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        read_tensor(self.dir, entry)
    }

    fn finish(self) -> Result<()> {
        if let Some(name) = self.entries.keys().next() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has unexpected tensor `{name}`"
            )));
        }
        Ok(())
    }
}

/// Saves a base model into `dir` (created if needed).
pub fn save_base<S: Scalar>(base: &BaseLM<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = write_tensors(dir, &base.named_tensors())?;
    let manifest = Manifest {
        kind: BASE_KIND.into(),
        precision: S::PRECISION,
        base_config: Some(base.config().clone()),
        spec_config: None,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a base model; the stored precision must match `S`.
pub fn load_base<S: Scalar>(dir: &Path) -> Result<BaseLM<S>> {
    let manifest = load_manifest(dir, BASE_KIND, S::PRECISION)?;
    let config = manifest
        .base_config
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest lacks base_config".into()))?;
    let mut base = BaseLM::init(config, 0)?;
    let mut table = TensorTable::new(dir, &manifest)?;
    base.load_named(&mut |name| table.take(name))?;
    table.finish()?;
    Ok(base)
}

/// Saves a draft model into `dir` (created if needed).
pub fn save_specformer<S: Scalar>(sf: &SpecFormer<S>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let tensors = write_tensors(dir, &sf.named_tensors())?;
    let manifest = Manifest {
        kind: SPEC_KIND.into(),
        precision: S::PRECISION,
        base_config: None,
        spec_config: Some(sf.config().clone()),
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Loads a draft model; the stored precision must match `S`.
pub fn load_specformer<S: Scalar>(dir: &Path) -> Result<SpecFormer<S>> {
    let manifest = load_manifest(dir, SPEC_KIND, S::PRECISION)?;
    let config = manifest
        .spec_config
        .clone()
        .ok_or_else(|| Error::Checkpoint("manifest lacks spec_config".into()))?;
    let mut sf = SpecFormer::init(config, 0)?;
    let mut table = TensorTable::new(dir, &manifest)?;
    sf.load_named(&mut |name| table.take(name))?;
    table.finish()?;
    Ok(sf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config() -> BaseLMConfig {
        BaseLMConfig {
            layers: 4,
            d_h: 8,
            n_heads: 2,
            d_ff: 16,
            vocab: 11,
            max_seq: 32,
            rope_base: 10000.0,
            eps: 1e-6,
        }
    }

    fn spec_config() -> SpecFormerConfig {
        SpecFormerConfig {
            d_h: 8,
            l_d: 3,
            n_heads: 2,
            d_ff: 16,
            eps: 1e-6,
            rope_base: 10000.0,
        }
    }

    #[test]
    fn base_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let base = BaseLM::<f32>::init(base_config(), 21).unwrap();
        save_base(&base, dir.path()).unwrap();
        let loaded = load_base::<f32>(dir.path()).unwrap();
        assert_eq!(loaded.config(), base.config());
        for ((na, ta), (nb, tb)) in base.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(na, &nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data(), "tensor {na}");
        }
        // behavioral identity
        assert_eq!(
            base.decode_greedy(&[1, 2, 3], 8).unwrap(),
            loaded.decode_greedy(&[1, 2, 3], 8).unwrap()
        );
    }

    #[test]
    fn specformer_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let sf = SpecFormer::<f64>::init(spec_config(), 23).unwrap();
        save_specformer(&sf, dir.path()).unwrap();
        let loaded = load_specformer::<f64>(dir.path()).unwrap();
        assert_eq!(loaded.config(), sf.config());
        for ((na, ta), (_, tb)) in sf.named_tensors().iter().zip(loaded.named_tensors()) {
            assert_eq!(ta.data(), tb.data(), "tensor {na}");
        }
    }

    #[test]
    fn precision_and_kind_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = BaseLM::<f32>::init(base_config(), 2).unwrap();
        save_base(&base, dir.path()).unwrap();
        let err = load_base::<f64>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("precision")));
        let err = load_specformer::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("kind")));
    }

    #[test]
    fn corrupted_shapes_and_missing_tensors_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = BaseLM::<f32>::init(base_config(), 2).unwrap();
        save_base(&base, dir.path()).unwrap();
        // truncate one tensor file
        let victim = dir.path().join("embed.bin");
        let bytes = std::fs::read(&victim).unwrap();
        std::fs::write(&victim, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_base::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("embed")));
        // delete it entirely
        std::fs::remove_file(&victim).unwrap();
        assert!(load_base::<f32>(dir.path()).is_err());
    }
}
