//! Versioned binary checkpoints with JSON sidecar metadata.
//!
//! `<name>.fmck` holds the serialized parameter store; `<name>.json` next
//! to it records the format version, network kind, configuration, pixel
//! normalization and the SHA-256 of the blob, which is verified on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{Discriminator, DiscriminatorConfig};
use crate::encoder::{EncoderConfig, EncoderHandle};
use crate::error::{bail, Result};
use crate::face::PIXEL_SCALE;
use crate::morphnet::{Generator, MorphNetConfig};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { scale: PIXEL_SCALE, offset: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: String,
    pub sha256: String,
    pub config: serde_json::Value,
    pub normalization: Normalization,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn save(path: &Path, store: &ParamStore, kind: &str, config: serde_json::Value, extra: serde_json::Value) -> Result<String> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes = store.to_bytes()?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    std::fs::write(path, &bytes)?;
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        sha256: sha256.clone(),
        config,
        normalization: Normalization::default(),
        extra,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(sha256)
}

fn load(path: &Path, kind: &str) -> Result<(ParamStore, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    if meta.format_version != FORMAT_VERSION {
        bail!(Data, "{}: unsupported checkpoint version {}", path.display(), meta.format_version);
    }
    if meta.kind != kind {
        bail!(Data, "{}: expected a {kind} checkpoint, found {}", path.display(), meta.kind);
    }
    let bytes = std::fs::read(path)?;
    if hex::encode(Sha256::digest(&bytes)) != meta.sha256 {
        bail!(Data, "{}: checksum mismatch", path.display());
    }
    Ok((ParamStore::from_bytes(&bytes)?, meta))
}

pub fn save_encoder(path: &Path, enc: &EncoderHandle) -> Result<String> {
    let c = enc.config();
    let extra = serde_json::json!({
        "taps": { "f3": c.f3_shape(), "f4": c.f4_shape(), "f5": c.f5_shape() },
        "feature_dim": c.feature_dim,
    });
    save(path, enc.params(), "encoder", serde_json::to_value(c)?, extra)
}

pub fn load_encoder(path: &Path) -> Result<EncoderHandle> {
    let (store, meta) = load(path, "encoder")?;
    let config: EncoderConfig = serde_json::from_value(meta.config)?;
    EncoderHandle::from_params(config, store)
}

pub fn save_generator(path: &Path, g: &Generator) -> Result<String> {
    let extra = serde_json::json!({ "channel_schedule": g.config().channel_schedule() });
    save(path, g.params(), "generator", serde_json::to_value(g.config())?, extra)
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    let (store, meta) = load(path, "generator")?;
    let config: MorphNetConfig = serde_json::from_value(meta.config)?;
    Generator::from_params(config, store)
}

pub fn save_discriminator(path: &Path, d: &Discriminator) -> Result<String> {
    save(path, d.params(), "discriminator", serde_json::to_value(d.config())?, serde_json::Value::Null)
}

pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    let (store, meta) = load(path, "discriminator")?;
    let config: DiscriminatorConfig = serde_json::from_value(meta.config)?;
    Discriminator::from_params(config, store)
}
