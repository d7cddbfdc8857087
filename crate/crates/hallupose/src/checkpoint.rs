//! Self-contained checkpoint archives.
//!
//! A checkpoint is a single safetensors file: the named weight and buffer
//! arrays (plus optimizer moments under `opt.`), with the stage tag, epoch,
//! model/SPDH configuration, the full training-config snapshot and weight
//! digests stored in the header metadata. Loading re-derives the weight digest
//! and rejects archives whose tensors do not match it.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use crate::error::{Error, Result};
use crate::geometry::SPDHConfig;
use crate::model::nn::digest_tensors;
use crate::model::{ModelConfig, Stage2Variant, TEACHER_PREFIX};

const FORMAT: &str = "hallupose-checkpoint-v1";

/// In-memory checkpoint: tensors plus training provenance.
#[derive(Clone)]
pub struct Checkpoint {
    pub stage: u8,
    /// Number of completed epochs (also the next epoch index to run).
    pub epoch: usize,
    pub model: ModelConfig,
    pub variant: Option<Stage2Variant>,
    pub spdh: SPDHConfig,
    /// Serialized training configuration, compared on resume.
    pub train_config_json: Option<String>,
    pub opt_step: usize,
    pub digest_all: String,
    pub digest_teacher: Option<String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    /// Model weights and buffers (everything except optimizer state).
    pub fn model_tensors(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    /// The frozen depth backbone subtree, used to assemble stage 2.
    pub fn teacher_tensors(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(TEACHER_PREFIX))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn optimizer_tensors(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with("opt."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut meta: HashMap<String, String> = HashMap::new();
        meta.insert("format".into(), FORMAT.into());
        meta.insert("stage".into(), self.stage.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        meta.insert("opt_step".into(), self.opt_step.to_string());
        meta.insert(
            "model_config".into(),
            serde_json::to_string(&self.model).unwrap(),
        );
        meta.insert(
            "spdh_config".into(),
            serde_json::to_string(&self.spdh).unwrap(),
        );
        if let Some(v) = &self.variant {
            meta.insert("variant".into(), serde_json::to_string(v).unwrap());
        }
        if let Some(tc) = &self.train_config_json {
            meta.insert("train_config".into(), tc.clone());
        }
        meta.insert("digest_all".into(), self.digest_all.clone());
        if let Some(d) = &self.digest_teacher {
            meta.insert("digest_teacher".into(), d.clone());
        }

        // two passes: own the byte buffers first, then hand out views
        let ordered: BTreeMap<&String, &Tensor> = self.tensors.iter().collect();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(ordered.len());
        for (name, t) in ordered {
            let data = t
                .to_dtype(candle_core::DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            buffers.push((name.clone(), t.dims().to_vec(), bytes));
        }
        let views: Vec<(&str, TensorView)> = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map_err(|e| Error::Checkpoint(format!("serialize `{name}`: {e:?}")))?;
                Ok((name.as_str(), view))
            })
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(views, &Some(meta), path)
            .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_n, header) = SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint(format!("{}: no metadata", path.display())))?;
        let get = |key: &str| -> Result<&String> {
            meta.get(key)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", path.display())))
        };
        if get("format")? != FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: unknown format `{}`",
                path.display(),
                get("format")?
            )));
        }
        let parse_err =
            |k: &str, e: String| Error::Checkpoint(format!("{}: bad `{k}`: {e}", path.display()));
        let stage: u8 = get("stage")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("stage", e.to_string()))?;
        let epoch: usize = get("epoch")?
            .parse()
            .map_err(|e: std::num::ParseIntError| parse_err("epoch", e.to_string()))?;
        let opt_step: usize = meta
            .get("opt_step")
            .map(|s| s.parse())
            .transpose()
            .map_err(|e: std::num::ParseIntError| parse_err("opt_step", e.to_string()))?
            .unwrap_or(0);
        let model: ModelConfig = serde_json::from_str(get("model_config")?)
            .map_err(|e| parse_err("model_config", e.to_string()))?;
        let spdh: SPDHConfig = serde_json::from_str(get("spdh_config")?)
            .map_err(|e| parse_err("spdh_config", e.to_string()))?;
        let variant: Option<Stage2Variant> = match meta.get("variant") {
            Some(v) => {
                Some(serde_json::from_str(v).map_err(|e| parse_err("variant", e.to_string()))?)
            }
            None => None,
        };

        let st = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        let mut tensors = HashMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!(
                    "{}: tensor `{name}` has dtype {:?}, expected F32",
                    path.display(),
                    view.dtype()
                )));
            }
            let data: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(data, view.shape(), &Device::Cpu)?;
            tensors.insert(name.to_string(), t);
        }

        let ckpt = Checkpoint {
            stage,
            epoch,
            model,
            variant,
            spdh,
            train_config_json: meta.get("train_config").cloned(),
            opt_step,
            digest_all: get("digest_all")?.clone(),
            digest_teacher: meta.get("digest_teacher").cloned(),
            tensors,
        };
        let recomputed = digest_model_tensors(&ckpt.model_tensors())?;
        if recomputed != ckpt.digest_all {
            return Err(Error::Checkpoint(format!(
                "{}: weight digest mismatch (stored {}, recomputed {recomputed})",
                path.display(),
                ckpt.digest_all
            )));
        }
        Ok(ckpt)
    }
}

/// Digest over model tensors in name order.
pub fn digest_model_tensors(tensors: &HashMap<String, Tensor>) -> Result<String> {
    let ordered: BTreeMap<&String, &Tensor> = tensors.iter().collect();
    digest_tensors(ordered.into_iter())
}
