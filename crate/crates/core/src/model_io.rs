//! Model directories: `manifest.json` (format version, checksums), `model.json`
//! (configuration, hyperparameters, survival head, vocabularies) and one
//! little-endian f64 file per modality holding φ.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::inference::{GuideSpec, Hyperparams, SurvivalHead, TrainConfig, TrainDiagnostics, TrainedModel};
use crate::prior::PriorModel;

pub const FORMAT_VERSION: u32 = 1;
pub const FORMAT_MINOR: u32 = 0;
pub const MANIFEST_FILE: &str = "manifest.json";
const META_FILE: &str = "model.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_version: u32,
    pub format_minor: u32,
    pub crate_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub files: Vec<FileEntry>,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: TrainConfig,
    hyper: Hyperparams,
    survival: Option<SurvivalHead>,
    prior_model: PriorModel,
    guide: Option<GuideSpec>,
    vocabularies: Vec<Vocabulary>,
    diagnostics: TrainDiagnostics,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(sha256_hex(&json)[..16].to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn phi_file(m: usize) -> String {
    format!("phi_m{m}.f64le")
}

pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<ModelManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ModelMeta {
        config: model.config.clone(),
        hyper: model.hyper.clone(),
        survival: model.survival.clone(),
        prior_model: model.prior_model.clone(),
        guide: model.guide.clone(),
        vocabularies: model.vocabularies.clone(),
        diagnostics: model.diagnostics.clone(),
    };
    let mut payloads: Vec<(String, Vec<u8>)> = vec![(META_FILE.to_string(), serde_json::to_vec_pretty(&meta)?)];
    for (m, phi) in model.phi.iter().enumerate() {
        if let Some(x) = phi.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("φ of modality {m} contains {x}")));
        }
        payloads.push((phi_file(m), phi.iter().flat_map(|x| x.to_le_bytes()).collect()));
    }
    let mut files = Vec::with_capacity(payloads.len());
    for (name, bytes) in &payloads {
        write_file(&dir.join(name), bytes)?;
        files.push(FileEntry {
            name: name.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
    }
    let manifest = ModelManifest {
        format_version: FORMAT_VERSION,
        format_minor: FORMAT_MINOR,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: model.config.seed,
        config_hash: config_hash(&model.config)?,
        files,
    };
    write_file(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

fn verified(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.name);
    let bytes = read_file(&path)?;
    if bytes.len() as u64 != entry.bytes || sha256_hex(&bytes) != entry.sha256 {
        return Err(Error::Checksum(path));
    }
    Ok(bytes)
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw: serde_json::Value = serde_json::from_slice(&read_file(&manifest_path)?)?;
    // check the version before the rest of the schema so future layouts get a clear message
    let found = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data(format!("{}: missing format_version", manifest_path.display())))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found.min(u32::MAX as u64) as u32,
            supported: FORMAT_VERSION,
        });
    }
    let manifest: ModelManifest = serde_json::from_value(raw)?;
    let entry = |name: &str| {
        manifest
            .files
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Data(format!("manifest lists no {name}")))
    };
    let meta: ModelMeta = serde_json::from_slice(&verified(dir, entry(META_FILE)?)?)?;
    let mut vocabularies = meta.vocabularies;
    for v in &mut vocabularies {
        v.reindex()?;
    }
    let k = meta.hyper.alpha.len();
    let mut phi = Vec::with_capacity(vocabularies.len());
    for (m, vocab) in vocabularies.iter().enumerate() {
        let bytes = verified(dir, entry(&phi_file(m))?)?;
        if bytes.len() != 8 * k * vocab.size() {
            return Err(Error::Data(format!(
                "{}: expected {}×{} values, found {} bytes",
                phi_file(m),
                k,
                vocab.size(),
                bytes.len()
            )));
        }
        phi.push(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect());
    }
    Ok(TrainedModel {
        config: meta.config,
        hyper: meta.hyper,
        phi,
        survival: meta.survival,
        prior_model: meta.prior_model,
        guide: meta.guide,
        vocabularies,
        diagnostics: meta.diagnostics,
    })
}
