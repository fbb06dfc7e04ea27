//! Named parameter storage, content digests, and on-disk persistence.
//!
//! A checkpoint is a pair of files sharing a path prefix: `<prefix>.json`
//! holds the manifest (names, groups, shapes, byte offsets, frozen flags,
//! a format version and an arbitrary metadata echo), `<prefix>.bin` holds
//! the raw little-endian f64 arrays back to back. Round-trips are bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("unsupported format version {0} (supported: {FORMAT_VERSION})")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("base digest mismatch: bundle was trained against {expected}, current base is {found}")]
    DigestMismatch { expected: String, found: String },
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Submodule a parameter belongs to. Every parameter is in exactly one group.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PerceptionEncoder,
    InstructionEncoder,
    StateEncoder,
    Fusion,
    Decoder,
    PolicyHead,
    /// Task-specific adapter weights (bundle payloads only).
    Adapter,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::PerceptionEncoder,
        Group::InstructionEncoder,
        Group::StateEncoder,
        Group::Fusion,
        Group::Decoder,
        Group::PolicyHead,
        Group::Adapter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::PerceptionEncoder => "perception_encoder",
            Group::InstructionEncoder => "instruction_encoder",
            Group::StateEncoder => "state_encoder",
            Group::Fusion => "fusion",
            Group::Decoder => "decoder",
            Group::PolicyHead => "policy_head",
            Group::Adapter => "adapter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Arc<Tensor>,
    pub group: Group,
}

/// Ordered map of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: Group, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value: Arc::new(value),
                group,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Arc<Tensor> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        p.value = Arc::new(value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Iterate in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn group_scalar_counts(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for p in self.params.values() {
            *out.entry(p.group).or_insert(0) += p.value.numel();
        }
        out
    }

    /// Order-independent content digest: SHA-256 over canonicalized
    /// (name, shape, LE bytes) triples in sorted name order.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    pub fn digest_groups(&self, groups: &BTreeSet<Group>) -> String {
        self.digest_filtered(|p| groups.contains(&p.group))
    }

    fn digest_filtered(&self, keep: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, p) in &self.params {
            if !keep(p) {
                continue;
            }
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((p.value.shape.len() as u64).to_le_bytes());
            for &d in &p.value.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub group: Group,
    pub shape: Vec<usize>,
    /// Byte offset into the .bin blob.
    pub offset: u64,
    pub frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    /// Free-form echo: policy spec for checkpoints, bundle metadata for bundles.
    pub meta: serde_json::Value,
    pub entries: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `<prefix>.json` + `<prefix>.bin`.
pub fn save(
    prefix: &Path,
    kind: &str,
    store: &ParamStore,
    frozen_groups: &BTreeSet<Group>,
    meta: serde_json::Value,
) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        entries.push(ManifestEntry {
            name: name.clone(),
            group: p.group,
            shape: p.value.shape.clone(),
            offset: blob.len() as u64,
            frozen: frozen_groups.contains(&p.group),
        });
        for v in &p.value.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        meta,
        entries,
    };
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
    }
    let json_path = prefix.with_extension("json");
    let bin_path = prefix.with_extension("bin");
    fs::write(&json_path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&json_path))?;
    fs::write(&bin_path, blob).map_err(io_err(&bin_path))?;
    Ok(())
}

/// Reads `<prefix>.json` + `<prefix>.bin` back into a store.
pub fn load(prefix: &Path) -> Result<(ParamStore, Manifest)> {
    let json_path = prefix.with_extension("json");
    let bin_path = prefix.with_extension("bin");
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&json_path).map_err(io_err(&json_path))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(manifest.format_version));
    }
    let blob = fs::read(&bin_path).map_err(io_err(&bin_path))?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 8;
        if end > blob.len() {
            return Err(CheckpointError::Corrupt(format!(
                "entry {} spans bytes {start}..{end} but blob is {} bytes",
                e.name,
                blob.len()
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        store.insert(e.name.clone(), e.group, Tensor::new(e.shape.clone(), data));
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "decoder.l0.w",
            Group::Decoder,
            Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.0, 0.0625]),
        );
        s.insert(
            "head.b",
            Group::PolicyHead,
            Tensor::new(vec![3], vec![0.1, -0.2, 0.3]),
        );
        s
    }

    #[test]
    fn digest_changes_with_content_and_name() {
        let s = sample_store();
        let d0 = s.digest();
        let mut s2 = sample_store();
        s2.set_value("head.b", Tensor::new(vec![3], vec![0.1, -0.2, 0.30000001]));
        assert_ne!(d0, s2.digest());
        let mut s3 = ParamStore::new();
        s3.insert(
            "decoder.l0.w_renamed",
            Group::Decoder,
            Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.0, 0.0625]),
        );
        s3.insert(
            "head.b",
            Group::PolicyHead,
            Tensor::new(vec![3], vec![0.1, -0.2, 0.3]),
        );
        assert_ne!(d0, s3.digest());
        // insertion order does not matter (BTreeMap canonicalizes)
        let mut s4 = ParamStore::new();
        s4.insert(
            "head.b",
            Group::PolicyHead,
            Tensor::new(vec![3], vec![0.1, -0.2, 0.3]),
        );
        s4.insert(
            "decoder.l0.w",
            Group::Decoder,
            Tensor::new(vec![2, 2], vec![1.5, -0.25, 3.0, 0.0625]),
        );
        assert_eq!(d0, s4.digest());
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        let store = sample_store();
        let frozen: BTreeSet<Group> = [Group::Decoder].into_iter().collect();
        save(
            &prefix,
            "checkpoint",
            &store,
            &frozen,
            serde_json::json!({"d": 64}),
        )
        .unwrap();
        let (loaded, manifest) = load(&prefix).unwrap();
        assert_eq!(loaded.digest(), store.digest());
        assert_eq!(manifest.kind, "checkpoint");
        let dec = manifest
            .entries
            .iter()
            .find(|e| e.name == "decoder.l0.w")
            .unwrap();
        assert!(dec.frozen);
        let head = manifest.entries.iter().find(|e| e.name == "head.b").unwrap();
        assert!(!head.frozen);
    }

    #[test]
    fn version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        save(
            &prefix,
            "checkpoint",
            &sample_store(),
            &BTreeSet::new(),
            serde_json::Value::Null,
        )
        .unwrap();
        let json_path = prefix.with_extension("json");
        let text = std::fs::read_to_string(&json_path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&json_path, text).unwrap();
        assert!(matches!(load(&prefix), Err(CheckpointError::Version(99))));
    }

    #[test]
    fn corrupt_blob_detected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("ckpt");
        save(
            &prefix,
            "checkpoint",
            &sample_store(),
            &BTreeSet::new(),
            serde_json::Value::Null,
        )
        .unwrap();
        let bin_path = prefix.with_extension("bin");
        let blob = std::fs::read(&bin_path).unwrap();
        std::fs::write(&bin_path, &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(load(&prefix), Err(CheckpointError::Corrupt(_))));
    }
}
