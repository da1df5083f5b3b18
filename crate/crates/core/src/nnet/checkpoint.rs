//! Checkpoint archive: one safetensors file holding model tensors under their
//! hierarchical names, optimizer moments under `optim.*`, and JSON metadata
//! (format version, model config, training state).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::error::{GlassError, Result};
use crate::nnet::config::ModelConfig;
use crate::nnet::model::SegmentationModel;
use crate::nnet::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Parameters and batch-norm buffers.
    pub tensors: BTreeMap<String, Tensor>,
    /// Optimizer state, keyed without the `optim.` prefix.
    pub optimizer: BTreeMap<String, Tensor>,
    /// Opaque JSON describing training progress.
    pub training: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &SegmentationModel) -> Result<Self> {
        let tensors = model
            .store()
            .all()
            .into_iter()
            .map(|(n, v)| Ok((n, v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            config: model.config().clone(),
            tensors,
            optimizer: BTreeMap::new(),
            training: None,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), self.format_version.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.config)?);
        if let Some(t) = &self.training {
            meta.insert("training".to_string(), t.clone());
        }
        let mut named: Vec<(String, Tensor)> = Vec::with_capacity(self.tensors.len() + self.optimizer.len());
        for (n, t) in &self.tensors {
            if n.starts_with(OPTIM_PREFIX) {
                return Err(GlassError::Checkpoint(format!("tensor name `{n}` collides with optimizer state")));
            }
            named.push((n.clone(), t.contiguous()?));
        }
        for (n, t) in &self.optimizer {
            named.push((format!("{OPTIM_PREFIX}{n}"), t.contiguous()?));
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        safetensors::serialize_to_file(named.iter().map(|(n, t)| (n.as_str(), t)), Some(meta), path)
            .map_err(|e| GlassError::Checkpoint(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(GlassError::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let bad = |m: String| GlassError::Checkpoint(format!("{}: {m}", path.display()));
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let meta = header.metadata().clone().unwrap_or_default();
        let format_version: u32 = meta
            .get("format_version")
            .ok_or_else(|| bad("no format_version".into()))?
            .parse()
            .map_err(|_| bad("unreadable format_version".into()))?;
        if format_version != FORMAT_VERSION {
            return Err(bad(format!("format version {format_version} is not supported")));
        }
        let config: ModelConfig = serde_json::from_str(meta.get("model_config").ok_or_else(|| bad("no model_config".into()))?)?;
        let mut tensors = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (n, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            match n.strip_prefix(OPTIM_PREFIX) {
                Some(rest) => optimizer.insert(rest.to_string(), t),
                None => tensors.insert(n, t),
            };
        }
        Ok(Self {
            format_version,
            config,
            tensors,
            optimizer,
            training: meta.get("training").cloned(),
        })
    }

    /// Rebuilds the model and loads every stored tensor into it.
    pub fn to_model(&self, dtype: DType, device: &Device) -> Result<SegmentationModel> {
        let model = SegmentationModel::new(&self.config, 0, dtype, device)?;
        self.restore(model.store())?;
        Ok(model)
    }

    /// As [`Checkpoint::to_model`], without autograd tracking.
    pub fn to_inference_model(&self, dtype: DType, device: &Device) -> Result<SegmentationModel> {
        let model = SegmentationModel::for_inference(&self.config, dtype, device)?;
        self.restore(model.store())?;
        Ok(model)
    }

    /// Writes the stored tensors into `store`; every store entry must be present.
    pub fn restore(&self, store: &ParamStore) -> Result<()> {
        store.assign(&self.tensors, false)?;
        Ok(())
    }
}
