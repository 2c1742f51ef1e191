//! Checkpoint container.
//!
//! Layout: the 8-byte magic `NVCIMCK1`, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as raw little-endian `f32`
//! values in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::device::{NoiseSnapshot, QuantConfig, SnapshotProvenance};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Model};
use crate::pipeline::{Deployment, PipelineState, Stage};
use crate::tensor::Tensor;
use crate::tsb::{InsertionPlan, TsbBlock};

pub const MAGIC: &[u8; 8] = b"NVCIMCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the payload in values.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsbMeta {
    pub channels: usize,
    pub depth: usize,
    pub plan: InsertionPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    /// Parameter the deviations belong to.
    pub param: String,
    /// `backbone` or `tsb`.
    pub group: String,
    pub devices_per_weight: usize,
    pub provenance: SnapshotProvenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub arch: Architecture,
    pub quant: QuantConfig,
    pub tsb: Option<TsbMeta>,
    pub reprogrammed: Vec<String>,
    pub snapshots: Vec<SnapshotEntry>,
    pub tensors: Vec<TensorEntry>,
    pub payload_values: usize,
}

/// Writes a container holding `tensors` under `manifest` (tensor entries are filled in).
pub fn write_container(path: &Path, mut manifest: Manifest, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0;
    manifest.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32le".into(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    manifest.payload_values = offset;
    let header = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(16 + header.len() + 4 * offset);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing container magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("manifest runs past the end of the file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {}", manifest.format)));
    }
    let payload = &bytes[header_end..];
    if payload.len() != 4 * manifest.payload_values {
        return Err(corrupt(format!(
            "payload holds {} bytes, manifest declares {} values",
            payload.len(),
            manifest.payload_values
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.dtype != "f32le" || e.offset != expected_offset || e.offset + n > manifest.payload_values {
            return Err(corrupt(format!("tensor {} does not fit the payload", e.name)));
        }
        let data = payload[4 * e.offset..4 * (e.offset + n)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
        expected_offset += n;
    }
    if expected_offset != manifest.payload_values {
        return Err(corrupt("payload has values no tensor claims".into()));
    }
    Ok((manifest, tensors))
}

fn snapshot_tensor(s: &NoiseSnapshot) -> Tensor {
    let weights: usize = s.weight_shape.iter().product();
    Tensor::new(vec![weights, s.devices_per_weight], s.deltas().to_vec()).expect("snapshot shape")
}

/// Saves the model, its stage and any captured snapshots.
pub fn save_checkpoint(state: &PipelineState, config_hash: &str, path: &Path) -> Result<()> {
    let model = &state.model;
    let params = model.params();
    let mut tensors: Vec<(String, &Tensor)> = params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &e.tensor))
        .collect();
    let mut snapshots = Vec::new();
    let mut snapshot_tensors = Vec::new();
    for (group, dep) in [("backbone", &state.deployment), ("tsb", &state.tsb_deployment)] {
        for p in dep.iter().flat_map(|d| &d.programs) {
            let name = params.entry(p.id).name.clone();
            snapshots.push(SnapshotEntry {
                param: name.clone(),
                group: group.into(),
                devices_per_weight: p.snapshot.devices_per_weight,
                provenance: p.snapshot.provenance.clone(),
            });
            snapshot_tensors.push((format!("snapshot.{group}/{name}"), snapshot_tensor(&p.snapshot)));
        }
    }
    tensors.extend(snapshot_tensors.iter().map(|(n, t)| (n.clone(), t)));
    let quant = state.deployment.as_ref().map(|d| d.quant).unwrap_or_default();
    let manifest = Manifest {
        format: FORMAT_VERSION,
        stage: state.stage,
        config_hash: config_hash.into(),
        arch: model.arch().clone(),
        quant,
        tsb: model.tsb().map(|t| TsbMeta {
            channels: t.channels,
            depth: t.weight_ids.len(),
            plan: t.plan.clone(),
        }),
        reprogrammed: state
            .reprogrammed
            .iter()
            .map(|&id| params.entry(id).name.clone())
            .collect(),
        snapshots,
        tensors: Vec::new(),
        payload_values: 0,
    };
    write_container(path, manifest, &tensors)
}

/// Loads a checkpoint. A config hash different from `expected_hash` only
/// logs a warning.
pub fn load_checkpoint(path: &Path, expected_hash: Option<&str>) -> Result<(PipelineState, Manifest)> {
    let (manifest, tensors) = read_container(path)?;
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    if let Some(h) = expected_hash.filter(|h| *h != manifest.config_hash) {
        log::warn!(
            "{} was written under config {}, current config is {h}",
            path.display(),
            manifest.config_hash
        );
    }
    let mut model = Model::new(manifest.arch.clone(), 0)?;
    if let Some(t) = &manifest.tsb {
        model.insert_tsb(t.plan.clone(), TsbBlock::build_multilayer(t.channels, t.depth)?)?;
    }
    let mut loaded = vec![false; model.params().len()];
    let mut snaps: Vec<(String, Tensor)> = Vec::new();
    for (name, t) in tensors {
        if name.starts_with("snapshot.") {
            snaps.push((name, t));
            continue;
        }
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| corrupt(format!("unknown tensor {name}")))?;
        model
            .params_mut()
            .set(id, t)
            .map_err(|e| corrupt(e.to_string()))?;
        loaded[id] = true;
    }
    if let Some(id) = loaded.iter().position(|l| !l) {
        return Err(corrupt(format!(
            "missing tensor {}",
            model.params().entry(id).name
        )));
    }
    let mut groups: [Vec<(usize, NoiseSnapshot)>; 2] = Default::default();
    for entry in &manifest.snapshots {
        let key = format!("snapshot.{}/{}", entry.group, entry.param);
        let t = snaps
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t)
            .ok_or_else(|| corrupt(format!("missing {key}")))?;
        let id = model
            .params()
            .find(&entry.param)
            .ok_or_else(|| corrupt(format!("snapshot for unknown tensor {}", entry.param)))?;
        let snap = NoiseSnapshot::new(
            model.params().get(id).shape().to_vec(),
            entry.devices_per_weight,
            t.data().to_vec(),
            entry.provenance.clone(),
        )
        .map_err(|e| corrupt(e.to_string()))?;
        let slot = if entry.group == "tsb" { 1 } else { 0 };
        groups[slot].push((id, snap));
    }
    let [backbone, tsb] = groups;
    let rebuild = |snaps: Vec<(usize, NoiseSnapshot)>| -> Result<Option<Deployment>> {
        if snaps.is_empty() {
            return Ok(None);
        }
        Deployment::from_snapshots(model.params(), &manifest.quant, snaps).map(Some)
    };
    let deployment = rebuild(backbone)?;
    let tsb_deployment = rebuild(tsb)?;
    let reprogrammed = manifest
        .reprogrammed
        .iter()
        .map(|n| {
            model
                .params()
                .find(n)
                .ok_or_else(|| corrupt(format!("unknown re-programmed tensor {n}")))
        })
        .collect::<Result<_>>()?;
    let state = PipelineState {
        stage: manifest.stage,
        model,
        deployment,
        tsb_deployment,
        reprogrammed,
    };
    Ok((state, manifest))
}
