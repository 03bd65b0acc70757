//! Checkpoints: a JSON manifest plus one raw little-endian array per
//! tensor, each file named by its tensor path and covered by a digest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continual::TrainReport;
use crate::encoder::{EncoderConfig, EncoderParams, EncoderState};
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::prompts::{PromptEntry, PromptPool, PromptStrategy, Provenance};
use crate::retrieval::{Classifier, DocidRegistry, Model, Segment};

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    /// SHA-256 of the file bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub start: usize,
    pub end: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub prompt_frozen: bool,
    pub key_frozen: bool,
    pub provenance: Provenance,
    pub has_attn: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolMeta {
    pub strategy: PromptStrategy,
    pub prompt_len: usize,
    pub dim: usize,
    pub top_n: usize,
    pub layers: Vec<usize>,
    pub entries: Vec<EntryMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub dtype: String,
    pub config_hash: String,
    pub timestep: usize,
    pub model_digest: String,
    pub encoder: EncoderConfig,
    pub encoder_frozen: bool,
    pub registry: DocidRegistry,
    pub segments: Vec<SegmentMeta>,
    pub pool: Option<PoolMeta>,
    pub tensors: Vec<TensorEntry>,
    pub report: Option<TrainReport>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tensor<F: Real>(dir: &Path, name: &str, t: &Tensor<F>) -> Result<TensorEntry> {
    let file = format!("{name}.bin");
    let bytes = t.to_le_bytes();
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(TensorEntry {
        name: name.to_string(),
        file,
        shape: t.shape().to_vec(),
        sha256: sha256_hex(&bytes),
    })
}

fn pool_tensors<F: Real>(pool: &PromptPool<F>) -> Vec<(String, &Tensor<F>)> {
    pool.named().into_iter().map(|(n, t, _)| (n, t)).collect()
}

/// Writes `model` into `dir` (created if needed).
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    model: &Model<F>,
    config_hash: &str,
    timestep: usize,
    report: Option<&TrainReport>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in model.encoder.params.named() {
        tensors.push(write_tensor(dir, &name, t)?);
    }
    tensors.push(write_tensor(dir, "classifier.weights", model.classifier.weights())?);
    let pool = match &model.pool {
        Some(p) => {
            for (name, t) in pool_tensors(p) {
                tensors.push(write_tensor(dir, &name, t)?);
            }
            Some(PoolMeta {
                strategy: p.strategy,
                prompt_len: p.prompt_len,
                dim: p.dim,
                top_n: p.top_n,
                layers: p.layers.clone(),
                entries: p
                    .entries()
                    .iter()
                    .map(|e| EntryMeta {
                        prompt_frozen: e.prompt_frozen,
                        key_frozen: e.key_frozen,
                        provenance: e.provenance,
                        has_attn: e.attn.is_some(),
                    })
                    .collect(),
            })
        }
        None => None,
    };
    let manifest = Manifest {
        format: FORMAT,
        dtype: F::DTYPE.to_string(),
        config_hash: config_hash.to_string(),
        timestep,
        model_digest: model.digest(),
        encoder: model.encoder.config.clone(),
        encoder_frozen: model.encoder.frozen,
        registry: model.registry.clone(),
        segments: model
            .classifier
            .segments()
            .iter()
            .map(|s| SegmentMeta {
                start: s.rows.start,
                end: s.rows.end,
                frozen: s.frozen,
            })
            .collect(),
        pool,
        tensors,
        report: report.cloned(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format != FORMAT {
        return Err(Error::Data(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

fn read_tensor<F: Real>(dir: &Path, entry: &TensorEntry) -> Result<Tensor<F>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Data(format!("digest mismatch for {}", entry.file)));
    }
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * F::BYTES {
        return Err(Error::Data(format!(
            "{} holds {} bytes, shape {:?} needs {}",
            entry.file,
            bytes.len(),
            entry.shape,
            n * F::BYTES
        )));
    }
    Tensor::from_vec(&entry.shape, bytes.chunks(F::BYTES).map(F::from_le).collect())
}

/// Loads a checkpoint, verifying every file digest and the model digest.
pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<(Model<F>, Manifest)> {
    let m = read_manifest(dir)?;
    if m.dtype != F::DTYPE {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, {} requested",
            m.dtype,
            F::DTYPE
        )));
    }
    let mut by_name = std::collections::BTreeMap::new();
    for e in &m.tensors {
        by_name.insert(e.name.as_str(), read_tensor::<F>(dir, e)?);
    }
    let mut take = |name: &str| {
        by_name
            .remove(name)
            .ok_or_else(|| Error::Data(format!("checkpoint lacks tensor {name}")))
    };

    m.encoder.validate()?;
    let mut params = EncoderParams::<F>::init(&m.encoder, &mut crate::rng::stream(0, "shape"));
    for (name, t) in params.named_mut() {
        let loaded = take(&name)?;
        if loaded.shape() != t.shape() {
            return Err(Error::Data(format!(
                "{name} has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    let mut encoder = EncoderState::from_params(m.encoder.clone(), params)?;
    encoder.frozen = m.encoder_frozen;

    let segments = m
        .segments
        .iter()
        .map(|s| Segment {
            rows: s.start..s.end,
            frozen: s.frozen,
        })
        .collect();
    let classifier = Classifier::from_parts(take("classifier.weights")?, segments)?;
    let mut registry = m.registry.clone();
    registry.reindex();
    if registry.len() != classifier.num_docs() {
        return Err(Error::Data("registry and classifier disagree".into()));
    }

    let pool = match &m.pool {
        Some(pm) => {
            let mut pool = PromptPool::new(
                pm.strategy,
                pm.prompt_len,
                pm.dim,
                pm.top_n,
                pm.layers.clone(),
            )?;
            for (i, em) in pm.entries.iter().enumerate() {
                pool.push(PromptEntry {
                    prompt: take(&format!("pool.{i}.prompt"))?,
                    key: take(&format!("pool.{i}.key"))?,
                    attn: if em.has_attn {
                        Some(take(&format!("pool.{i}.attn"))?)
                    } else {
                        None
                    },
                    prompt_frozen: em.prompt_frozen,
                    key_frozen: em.key_frozen,
                    provenance: em.provenance,
                })?;
            }
            Some(pool)
        }
        None => None,
    };
    let model = Model {
        encoder,
        classifier,
        registry,
        pool,
    };
    if model.digest() != m.model_digest {
        return Err(Error::Data("model digest does not match the manifest".into()));
    }
    Ok((model, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::{allocate_for_timestep, PoolConfig};
    use crate::rng::stream;

    fn config() -> EncoderConfig {
        EncoderConfig {
            num_layers: 3,
            dim: 8,
            heads: 2,
            ff_dim: 12,
            max_len: 8,
            vocab_size: 40,
            prompt_layers: vec![2],
            ..EncoderConfig::default()
        }
    }

    fn model<F: Real>(strategy: Option<PromptStrategy>) -> Model<F> {
        let mut rng = stream(3, "ckpt");
        let mut m = Model::<F>::new(config(), &mut rng).unwrap();
        m.index_corpus(&["a", "b", "c"], &mut rng).unwrap();
        m.index_corpus(&["d", "e"], &mut rng).unwrap();
        m.classifier.set_frozen(0, true);
        m.encoder.frozen = true;
        if let Some(s) = strategy {
            let keys = Tensor::<F>::randn(&[3, 8], 1.0, &mut rng);
            let cfg = PoolConfig {
                pool_size: 3,
                prompt_len: 2,
                coda_prompt_len: 2,
                ..PoolConfig::default()
            };
            let (mut pool, _) =
                allocate_for_timestep(None, s, &cfg, &[2], 8, 1, Some(&keys), &mut rng).unwrap();
            pool.entry_mut(0).freeze();
            m.pool = Some(pool);
        }
        m
    }

    fn probes() -> Vec<Vec<u32>> {
        vec![vec![0, 5, 6, 7], vec![0, 39, 1], vec![0, 12, 13, 14, 15, 16]]
    }

    fn probe<F: Real>(m: &Model<F>) -> Vec<u8> {
        crate::run::probe_bytes(m, &probes()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        for s in [
            None,
            Some(PromptStrategy::L2p),
            Some(PromptStrategy::Spp),
            Some(PromptStrategy::Coda),
            Some(PromptStrategy::Topic),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let m = model::<f64>(s);
            let saved = save_checkpoint(dir.path(), &m, "abc", 1, None).unwrap();
            let (back, manifest) = load_checkpoint::<f64>(dir.path()).unwrap();
            assert_eq!(manifest.tensors, saved.tensors);
            assert_eq!(manifest.pool, saved.pool);
            assert_eq!(back.digest(), m.digest(), "{s:?}");
            assert_eq!(back.frozen_digests(), m.frozen_digests());
            assert_eq!(back.registry, m.registry);
            assert_eq!(back.classifier, m.classifier);
            assert_eq!(
                back.pool.as_ref().map(|p| p.entries().to_vec()),
                m.pool.as_ref().map(|p| p.entries().to_vec())
            );
            assert_eq!(probe(&back), probe(&m));
        }
    }

    #[test]
    fn files_are_named_by_tensor_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = model::<f32>(Some(PromptStrategy::Coda));
        let manifest = save_checkpoint(dir.path(), &m, "h", 2, None).unwrap();
        assert_eq!(manifest.dtype, "f32");
        for e in &manifest.tensors {
            assert_eq!(e.file, format!("{}.bin", e.name));
            let len = std::fs::metadata(dir.path().join(&e.file)).unwrap().len();
            assert_eq!(len as usize, e.shape.iter().product::<usize>() * 4);
        }
        let names: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
        assert!(names.contains(&"encoder.layer2.wq"));
        assert!(names.contains(&"classifier.weights"));
        assert!(names.contains(&"pool.0.attn"));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = model::<f32>(Some(PromptStrategy::L2p));
        save_checkpoint(dir.path(), &m, "h", 1, None).unwrap();
        let path = dir.path().join("pool.1.key.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Data(ref s) if s.contains("pool.1.key")), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn dtype_mismatch_and_missing_manifest_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &model::<f32>(None), "h", 0, None).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(Error::Data(_))));
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(load_checkpoint::<f32>(empty.path()).unwrap_err().exit_code(), 3);
    }
}
