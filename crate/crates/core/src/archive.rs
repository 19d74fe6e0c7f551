//! On-disk parameter archives.
//!
//! An archive is a directory:
//!
//! ```text
//! manifest.toml          schema version, kind, config snapshot, run metadata, blob index
//! params/<name>.f32      raw little-endian f32 values, row-major
//! adam_m/<name>.f32      optional first-moment state (resume)
//! adam_v/<name>.f32      optional second-moment state (resume)
//! ```
//!
//! Each blob is listed in the manifest with its shape and a SHA-256 of the
//! bytes, so loading verifies integrity and round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    Denoiser,
    Refiner,
    Classifier,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub loss_history: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: ArchiveKind,
    pub config_digest: String,
    pub training: TrainingMeta,
    pub config: toml::Table,
    /// Categories whose images the model was trained on.
    #[serde(default)]
    pub trained_categories: Vec<String>,
    pub optimizer: Option<OptimizerState>,
    pub params: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParameterArchive {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    moments: Option<(Vec<Tensor<f32>>, Vec<Tensor<f32>>)>,
}

impl ParameterArchive {
    pub fn new<C: Serialize>(kind: ArchiveKind, config: &C, params: ParamStore<f32>, config_digest: &str) -> Result<Self> {
        let config = toml::Table::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            kind,
            config_digest: config_digest.to_string(),
            training: TrainingMeta::default(),
            config,
            trained_categories: Vec::new(),
            optimizer: None,
            params: Vec::new(),
        };
        Ok(Self { manifest, params, moments: None })
    }

    pub fn expect_kind(&self, kind: ArchiveKind) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Archive(format!("expected a {kind:?} archive, found {:?}", self.manifest.kind)));
        }
        Ok(())
    }

    /// Deserialize the stored configuration snapshot.
    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        self.manifest
            .config
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Archive(format!("config snapshot: {e}")))
    }

    pub fn set_optimizer(&mut self, opt: &Adam<f32>) {
        self.manifest.optimizer = Some(OptimizerState { step: opt.step, config: opt.config });
        self.moments = Some((opt.m.clone(), opt.v.clone()));
    }

    /// Rebuild the optimizer state, if one was stored. The learning-rate
    /// settings come from `config`; only moments and step count are restored.
    pub fn optimizer(&self, config: AdamConfig) -> Result<Option<Adam<f32>>> {
        match (&self.manifest.optimizer, &self.moments) {
            (Some(state), Some((m, v))) => {
                if m.len() != self.params.len() {
                    return Err(Error::Archive("optimizer state does not match parameters".into()));
                }
                Ok(Some(Adam { config, step: state.step, m: m.clone(), v: v.clone() }))
            }
            _ => Ok(None),
        }
    }

    /// Write the archive, replacing any existing archive at `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = sibling(dir, ".partial");
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        let mut manifest = self.manifest.clone();
        manifest.params = write_blobs(&staging.join("params"), self.params.iter())?;
        if let Some((m, v)) = &self.moments {
            let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
            write_blobs(&staging.join("adam_m"), names.iter().copied().zip(m))?;
            write_blobs(&staging.join("adam_v"), names.iter().copied().zip(v))?;
        }
        let text = toml::to_string(&manifest).map_err(|e| Error::Archive(e.to_string()))?;
        let mpath = staging.join(MANIFEST);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        if dir.exists() {
            let old = sibling(dir, ".old");
            if old.exists() {
                fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
            }
            fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
            fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        } else {
            if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        if !mpath.exists() {
            return Err(Error::Archive(format!("no archive at {}", dir.display())));
        }
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Archive(format!("{}: {e}", mpath.display())))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::Archive(format!("unsupported schema version {}", manifest.schema_version)));
        }
        let mut params = ParamStore::new();
        for entry in &manifest.params {
            params.add(entry.name.clone(), read_blob(&dir.join("params"), entry, true)?);
        }
        let moments = if manifest.optimizer.is_some() {
            let read_all = |sub: &str| -> Result<Vec<Tensor<f32>>> {
                manifest.params.iter().map(|e| read_blob(&dir.join(sub), e, false)).collect()
            };
            Some((read_all("adam_m")?, read_all("adam_v")?))
        } else {
            None
        };
        Ok(Self { manifest, params, moments })
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    dir.with_file_name(name)
}

fn blob_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.f32"))
}

fn write_blobs<'a>(dir: &Path, items: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<BlobEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (name, t) in items {
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(Error::Archive(format!("invalid parameter name {name:?}")));
        }
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let path = blob_path(dir, name);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(BlobEntry { name: name.to_string(), shape: t.shape().to_vec(), sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    Ok(entries)
}

fn read_blob(dir: &Path, entry: &BlobEntry, verify: bool) -> Result<Tensor<f32>> {
    let path = blob_path(dir, &entry.name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if verify && hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(Error::Archive(format!("checksum mismatch for {}", path.display())));
    }
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 4 {
        return Err(Error::Archive(format!("{} holds {} bytes, expected {}", path.display(), bytes.len(), numel * 4)));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Tensor::new(&entry.shape, data)
}

/// Content digest of a parameter set (names, shapes and values).
pub fn params_digest(params: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
