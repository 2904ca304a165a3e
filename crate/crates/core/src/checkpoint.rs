//! Checkpoint directories.
//!
//! ```text
//! manifest.json   format version, architecture hash, parameter table
//! weights.bin     little-endian f32, concatenated in manifest order
//! arch.json       generator architecture with trained scales
//! report.json     training report (optional)
//! config.json     run configuration (optional)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{json_error, GeneratorArch, LayerSpec};
use crate::config::{canonical_json, RunConfig};
use crate::error::{Error, Result};
use crate::gan::{Model, TrainReport};
use crate::net::{disc_id, layer_params, param_specs, ParamSpec};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const GEN_PREFIX: &str = "gen.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub shape: [usize; 4],
    /// Byte offset into `weights.bin`.
    pub offset: u64,
    pub numel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub arch_hash: String,
    pub dtype: String,
    pub params: Vec<ManifestEntry>,
    pub discriminator: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub report: Option<TrainReport>,
    pub config: Option<RunConfig>,
}

fn disc_specs(layers: &[LayerSpec]) -> Vec<ParamSpec> {
    layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| layer_params(&disc_id(i), l))
        .collect()
}

/// Expected `(stored id, spec, is_generator)` in file order.
fn expected_params(model_arch: &GeneratorArch, disc: &[LayerSpec]) -> Vec<(String, ParamSpec, bool)> {
    let mut out: Vec<_> = param_specs(model_arch)
        .into_iter()
        .map(|p| (format!("{GEN_PREFIX}{}", p.name), p, true))
        .collect();
    out.extend(disc_specs(disc).into_iter().map(|p| (p.name.clone(), p, false)));
    out
}

pub fn save(dir: &Path, model: &Model, report: Option<&TrainReport>, config: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut weights = Vec::new();
    let mut params = Vec::new();
    for (id, spec, is_gen) in expected_params(&model.arch, &model.disc_layers) {
        let store = if is_gen { &model.gen } else { &model.disc };
        let e = store
            .get(&spec.name)
            .ok_or_else(|| Error::Checkpoint(format!("model is missing parameter {}", spec.name)))?;
        if e.value.shape() != spec.shape {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, architecture expects {:?}",
                spec.name,
                e.value.shape(),
                spec.shape
            )));
        }
        params.push(ManifestEntry {
            id,
            shape: spec.shape,
            offset: weights.len() as u64,
            numel: e.value.numel(),
        });
        for v in e.value.data() {
            weights.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        arch_hash: model.arch.structure_hash(),
        dtype: "f32".into(),
        params,
        discriminator: model.disc_layers.clone(),
    };
    fs::write(dir.join("manifest.json"), canonical_json(&manifest))?;
    fs::write(dir.join("weights.bin"), weights)?;
    fs::write(dir.join("arch.json"), model.arch.to_json())?;
    if let Some(r) = report {
        fs::write(dir.join("report.json"), r.to_json())?;
    }
    if let Some(c) = config {
        fs::write(dir.join("config.json"), c.to_json())?;
    }
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(json_error)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let arch = GeneratorArch::from_json(&fs::read_to_string(dir.join("arch.json"))?)?;
    let found = arch.structure_hash();
    if found != manifest.arch_hash {
        return Err(Error::ArchHashMismatch {
            expected: manifest.arch_hash,
            found,
        });
    }
    let bytes = fs::read(dir.join("weights.bin"))?;
    let expected = expected_params(&arch, &manifest.discriminator);
    if expected.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, architecture needs {}",
            manifest.params.len(),
            expected.len()
        )));
    }
    let mut gen = ParamStore::new();
    let mut disc = ParamStore::new();
    let mut offset = 0u64;
    for ((id, spec, is_gen), entry) in expected.into_iter().zip(&manifest.params) {
        let numel: usize = spec.shape.iter().product();
        if entry.id != id || entry.shape != spec.shape || entry.numel != numel || entry.offset != offset {
            return Err(Error::Checkpoint(format!("manifest entry {} does not match the architecture", entry.id)));
        }
        let start = offset as usize;
        let end = start + numel * 4;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint("weights.bin is truncated".into()))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let store = if is_gen { &mut gen } else { &mut disc };
        store.insert(spec.name, Tensor::new(spec.shape, data), spec.role.trainable());
        offset = end as u64;
    }
    if offset as usize != bytes.len() {
        return Err(Error::Checkpoint("weights.bin has trailing bytes".into()));
    }
    let report = match dir.join("report.json") {
        p if p.exists() => Some(read_json(&p)?),
        _ => None,
    };
    let config = match dir.join("config.json") {
        p if p.exists() => Some(RunConfig::from_json(&fs::read_to_string(p)?)?),
        _ => None,
    };
    Ok(Checkpoint {
        model: Model {
            arch,
            gen,
            disc_layers: manifest.discriminator,
            disc,
        },
        report,
        config,
    })
}

/// Loads a checkpoint and checks it was trained for `arch`'s structure.
pub fn load_for(dir: &Path, arch: &GeneratorArch) -> Result<Checkpoint> {
    let ck = load(dir)?;
    let expected = arch.structure_hash();
    let found = ck.model.arch.structure_hash();
    if expected != found {
        return Err(Error::ArchHashMismatch { expected, found });
    }
    Ok(ck)
}
