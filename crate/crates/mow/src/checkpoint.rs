//! Checkpoint format: a directory holding `manifest.json` (names, shapes,
//! hashes, config, assignment, optimizer step counters, RNG states) plus a
//! flat little-endian IEEE-754 tensor archive `tensors.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mow_core::clustering::ClusterAssignment;
use mow_core::model::MowModel;
use mow_core::numcore::{AdamState, ParamStore, Tensor};
use mow_core::rng::RngState;
use mow_core::ModelConfig;

use crate::error::{Error, Result};

pub const VERSION: &str = "mow-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct AdamManifest {
    step: u64,
    /// Names with (m, v) blocks in the archive, in this order.
    names: Vec<String>,
}

/// Everything the trainer wants to carry across a save/load boundary besides
/// the model itself.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainState {
    pub env_step: usize,
    pub rngs: BTreeMap<String, RngState>,
    pub episode_counters: Vec<u64>,
    /// Per-task gradient fingerprints captured after warmup.
    pub fingerprints: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    config: ModelConfig,
    clusters: usize,
    assignment: ClusterAssignment,
    train_state: TrainState,
    tensors: Vec<TensorEntry>,
    adam_wm: AdamManifest,
    adam_ac: AdamManifest,
    /// Parameter counts per top-level group (the efficiency report).
    param_counts: Vec<(String, usize)>,
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        out.write_f64::<LittleEndian>(*v).expect("vec write");
    }
    out
}

fn hash_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Write the model and train state into `dir` (created if needed).
pub fn save(model: &MowModel, state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in model.store.iter() {
        let bytes = tensor_bytes(&p.tensor);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            trainable: p.trainable,
            sha256: hash_hex(&bytes),
        });
        blob.extend_from_slice(&bytes);
    }
    let mut adam = |st: &AdamState| -> AdamManifest {
        let mut names = Vec::new();
        for (name, m, v) in st.entries() {
            blob.extend_from_slice(&tensor_bytes(&m));
            blob.extend_from_slice(&tensor_bytes(&v));
            names.push(name);
        }
        AdamManifest {
            step: st.step_count(),
            names,
        }
    };
    let adam_wm = adam(&model.wm_opt);
    let adam_ac = adam(&model.ac_opt);

    let manifest = Manifest {
        version: VERSION.to_string(),
        config: model.cfg.clone(),
        clusters: model.clusters,
        assignment: model.assignment.clone(),
        train_state: state.clone(),
        tensors,
        adam_wm,
        adam_ac,
        param_counts: model.param_manifest(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut f = fs::File::create(dir.join("tensors.bin"))?;
    f.write_all(&blob)?;
    Ok(())
}

/// Load a checkpoint; verifies the version tag, hashes, and internal
/// consistency (the embedding table and harmonious scales must match the
/// config's task count).
pub fn load(dir: &Path) -> Result<(MowModel, TrainState)> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != VERSION {
        return Err(Error::CkptVersion {
            found: manifest.version,
            expected: VERSION.to_string(),
        });
    }
    let mut blob = Vec::new();
    fs::File::open(dir.join("tensors.bin"))?.read_to_end(&mut blob)?;

    let mut cursor = std::io::Cursor::new(&blob);
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        cursor
            .read_exact(&mut bytes)
            .map_err(|_| Error::CkptCorrupt("tensor archive truncated".into()))?;
        if hash_hex(&bytes) != entry.sha256 {
            return Err(Error::CkptCorrupt(format!(
                "hash mismatch for tensor `{}`",
                entry.name
            )));
        }
        let mut rd = std::io::Cursor::new(&bytes);
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(rd.read_f64::<LittleEndian>().expect("slice read"));
        }
        let t = Tensor::new(&entry.shape, data);
        if entry.trainable {
            store.insert(&entry.name, t);
        } else {
            store.insert_buffer(&entry.name, t);
        }
    }
    let mut read_adam = |names: &[String], step: u64| -> Result<AdamState> {
        let mut entries = Vec::new();
        for name in names {
            let shape = store.get(name).shape().to_vec();
            let numel: usize = shape.iter().product();
            let read_one = |cursor: &mut std::io::Cursor<&Vec<u8>>| -> Result<Tensor> {
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(
                        cursor
                            .read_f64::<LittleEndian>()
                            .map_err(|_| Error::CkptCorrupt("optimizer archive truncated".into()))?,
                    );
                }
                Ok(Tensor::new(&shape, data))
            };
            let m = read_one(&mut cursor)?;
            let v = read_one(&mut cursor)?;
            entries.push((name.clone(), m, v));
        }
        Ok(AdamState::restore(entries, step))
    };
    let wm_opt = read_adam(&manifest.adam_wm.names, manifest.adam_wm.step)?;
    let ac_opt = read_adam(&manifest.adam_ac.names, manifest.adam_ac.step)?;

    // consistency checks against the config
    let cfg = manifest.config.clone();
    cfg.validate().map_err(Error::Core)?;
    let embed = store.get("embed.task");
    if embed.dim(0) != cfg.num_tasks || embed.dim(1) != cfg.embed_dim {
        return Err(Error::CkptCorrupt(format!(
            "embedding table {:?} does not match config with {} tasks (E={})",
            embed.shape(),
            cfg.num_tasks,
            cfg.embed_dim
        )));
    }
    if store.get(mow_core::losses::RHO_PARAM).numel() != cfg.num_tasks {
        return Err(Error::CkptCorrupt(
            "harmonious scales do not match the task count".into(),
        ));
    }
    if manifest.assignment.num_tasks() != cfg.num_tasks
        || manifest.assignment.num_clusters() != manifest.clusters
    {
        return Err(Error::CkptCorrupt("cluster assignment inconsistent".into()));
    }
    for i in 0..manifest.clusters {
        if !store.contains(&format!("vae{i}.enc.fc.w")) {
            return Err(Error::CkptCorrupt(format!("cluster {i} parameters missing")));
        }
    }

    let core = mow_core::temporal::MixtureCore::new(&cfg);
    let model = MowModel {
        cfg,
        store,
        core,
        wm_opt,
        ac_opt,
        assignment: manifest.assignment,
        clusters: manifest.clusters,
        grid: mow_core::losses::BucketGrid::default(),
    };
    Ok((model, manifest.train_state))
}

/// The manifest's per-group parameter counts without loading tensors.
pub fn read_param_counts(dir: &Path) -> Result<Vec<(String, usize)>> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    Ok(manifest.param_counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_the_probe_forward_exactly() {
        let model = MowModel::init_replicated(ModelConfig::micro(2), 5).unwrap();
        let before = model.probe_digest();
        let dir = std::env::temp_dir().join(format!("mow-ckpt-test-{}", std::process::id()));
        let state = TrainState {
            env_step: 123,
            ..Default::default()
        };
        save(&model, &state, &dir).unwrap();
        let (loaded, state2) = load(&dir).unwrap();
        assert_eq!(state2.env_step, 123);
        assert_eq!(loaded.clusters, model.clusters);
        let after = loaded.probe_digest();
        assert_eq!(before.to_bits(), after.to_bits(), "probe forward must be bit-identical");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_counts_sum_to_the_in_memory_total() {
        let model = MowModel::init_replicated(ModelConfig::micro(3), 8).unwrap();
        let dir = std::env::temp_dir().join(format!("mow-ckpt-counts-{}", std::process::id()));
        save(&model, &TrainState::default(), &dir).unwrap();
        let counts = read_param_counts(&dir).unwrap();
        let sum: usize = counts.iter().map(|(_, n)| n).sum();
        assert_eq!(sum, model.store.total_elems());
        // every cluster group appears
        for prefix in ["vae0", "vae1", "head0", "critic0", "actor", "shared", "router"] {
            assert!(
                counts.iter().any(|(g, _)| g == prefix),
                "missing group {prefix}"
            );
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_and_consistency_are_enforced() {
        let model = MowModel::init_replicated(ModelConfig::micro(2), 6).unwrap();
        let dir = std::env::temp_dir().join(format!("mow-ckpt-test2-{}", std::process::id()));
        save(&model, &TrainState::default(), &dir).unwrap();

        // corrupt the version
        let path = dir.join("manifest.json");
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        manifest["version"] = serde_json::json!("mow-ckpt-v0");
        fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(load(&dir), Err(Error::CkptVersion { .. })));

        // mismatched task count in the config
        manifest["version"] = serde_json::json!(VERSION);
        manifest["config"]["num_tasks"] = serde_json::json!(5);
        manifest["config"]["num_clusters"] = serde_json::json!(2);
        fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        let err = match load(&dir) {
            Err(e) => e,
            Ok(_) => panic!("mismatched task count must be rejected"),
        };
        assert!(err.to_string().contains("does not match") || err.to_string().contains("inconsistent"));
        fs::remove_dir_all(&dir).ok();
    }
}
