//! Checkpoint archives: a single file holding named f64 tensors grouped
//! into sections, plus a JSON header with the full model config and run
//! metadata. Weights round-trip bit-exactly (raw little-endian f64).
//!
//! Layout: `ASCP` magic, u32 format version, u64 header length, JSON
//! header, then tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_backbone, build_head, StudyPredictor, VesselModel, VesselModelConfig};
use crate::error::Error;
use crate::Result;

const MAGIC: &[u8; 4] = b"ASCP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SectionHeader {
    name: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    sections: Vec<SectionHeader>,
}

/// One named group of tensors to write.
pub struct Section<'a> {
    pub name: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, &'a [f64])>,
}

/// A section read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedSection {
    pub name: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<f64>)>,
}

impl LoadedSection {
    pub fn tensor(&self, name: &str) -> Result<&[f64]> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.as_slice())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }
}

/// A full checkpoint read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: serde_json::Value,
    pub sections: Vec<LoadedSection>,
}

impl LoadedCheckpoint {
    pub fn section(&self, name: &str) -> Result<&LoadedSection> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name:?}")))
    }
}

/// Write a checkpoint archive.
pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, sections: &[Section]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    let header = Header {
        meta: meta.clone(),
        sections: sections
            .iter()
            .map(|s| SectionHeader {
                name: s.name.clone(),
                config: s.config.clone(),
                tensors: s
                    .tensors
                    .iter()
                    .map(|(n, t)| TensorEntry {
                        name: n.clone(),
                        len: t.len(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_bytes).map_err(io_err)?;
    for section in sections {
        for (_, tensor) in &section.tensors {
            let mut bytes = Vec::with_capacity(tensor.len() * 8);
            for v in tensor.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes).map_err(io_err)?;
        }
    }
    file.flush().map_err(io_err)
}

/// Read a checkpoint archive.
pub fn read_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let mut file = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word).map_err(io_err)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    let mut sections = Vec::with_capacity(header.sections.len());
    for sh in header.sections {
        let mut tensors = Vec::with_capacity(sh.tensors.len());
        for te in sh.tensors {
            let mut bytes = vec![0u8; te.len * 8];
            file.read_exact(&mut bytes).map_err(io_err)?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((te.name, values));
        }
        sections.push(LoadedSection {
            name: sh.name,
            config: sh.config,
            tensors,
        });
    }
    Ok(LoadedCheckpoint {
        meta: header.meta,
        sections,
    })
}

/// Section carrying one vessel model's config and weights.
pub fn vessel_model_section<'a>(name: &str, model: &'a VesselModel) -> Result<Section<'a>> {
    Ok(Section {
        name: name.to_string(),
        config: serde_json::to_value(model.config())
            .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?,
        tensors: vec![
            ("backbone_params".into(), &model.backbone_params),
            ("backbone_buffers".into(), &model.backbone_buffers),
            ("head_params".into(), &model.head_params),
        ],
    })
}

/// Rebuild a vessel model from a loaded section, verifying that the stored
/// tensors match the config's layout.
pub fn vessel_model_from_section(section: &LoadedSection) -> Result<VesselModel> {
    let config: VesselModelConfig = serde_json::from_value(section.config.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("bad model config: {e}")))?;
    let backbone = build_backbone(&config.backbone)?;
    let (head, head_layout) = build_head(&config.head, backbone.embed_dim());
    let backbone_params = section.tensor("backbone_params")?.to_vec();
    let backbone_buffers = section.tensor("backbone_buffers")?.to_vec();
    let head_params = section.tensor("head_params")?.to_vec();
    if backbone_params.len() != backbone.param_len()
        || backbone_buffers.len() != backbone.buffer_len()
        || head_params.len() != head_layout.total_len()
    {
        return Err(Error::IncompatibleCheckpoint(format!(
            "tensor sizes do not match config (backbone {} vs {}, buffers {} vs {}, head {} vs {})",
            backbone_params.len(),
            backbone.param_len(),
            backbone_buffers.len(),
            backbone.buffer_len(),
            head_params.len(),
            head_layout.total_len()
        )));
    }
    Ok(VesselModel {
        vessel: config.vessel,
        backbone_cfg: config.backbone,
        head_cfg: config.head,
        backbone,
        head,
        backbone_params,
        backbone_buffers,
        head_params,
    })
}

/// Save a single vessel model with metadata.
pub fn save_vessel_model(path: &Path, model: &VesselModel, meta: &serde_json::Value) -> Result<()> {
    write_checkpoint(path, meta, &[vessel_model_section("model", model)?])
}

/// Load a single vessel model and its metadata.
pub fn load_vessel_model(path: &Path) -> Result<(VesselModel, serde_json::Value)> {
    let ckpt = read_checkpoint(path)?;
    let model = vessel_model_from_section(ckpt.section("model")?)?;
    Ok((model, ckpt.meta))
}

/// Save a full study predictor: both branches plus the fitted threshold.
pub fn save_predictor(path: &Path, predictor: &StudyPredictor, meta: &serde_json::Value) -> Result<()> {
    let mut meta = meta.clone();
    if !meta.is_object() {
        meta = serde_json::json!({});
    }
    meta.as_object_mut()
        .expect("object meta")
        .insert("threshold".into(), serde_json::json!(predictor.threshold));
    write_checkpoint(
        path,
        &meta,
        &[
            vessel_model_section("rca", &predictor.rca)?,
            vessel_model_section("lca", &predictor.lca)?,
        ],
    )
}

/// Load a full study predictor.
pub fn load_predictor(path: &Path) -> Result<(StudyPredictor, serde_json::Value)> {
    let ckpt = read_checkpoint(path)?;
    let rca = vessel_model_from_section(ckpt.section("rca")?)?;
    let lca = vessel_model_from_section(ckpt.section("lca")?)?;
    let threshold = ckpt
        .meta
        .get("threshold")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::Checkpoint("predictor checkpoint missing threshold".into()))?;
    Ok((
        StudyPredictor {
            rca,
            lca,
            threshold,
        },
        ckpt.meta,
    ))
}
