//! Model assembly and checkpoint files.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{ArchConfig, Backbone};
use crate::error::{IgmError, Result};
use crate::extractor::Extractor;
use crate::params::ParamStore;
use crate::rng;
use crate::train::{Method, RunConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Backbone plus (for IGM) the extractor, over one parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: ArchConfig,
    pub backbone: Backbone,
    pub extractor: Option<Extractor>,
    pub params: ParamStore,
}

impl Model {
    /// Freshly initialized model. The backbone and extractor draw from
    /// separate seed streams, so the backbone initialization is the same
    /// for every method under one seed.
    pub fn new(cfg: &RunConfig, feature_dim: usize, num_classes: usize) -> Model {
        let arch = cfg.arch(feature_dim, num_classes);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(
            &mut params,
            &arch,
            &mut rng::stream(cfg.seed, &[rng::STREAM_INIT_BACKBONE]),
        );
        let extractor = (cfg.method == Method::Igm).then(|| {
            Extractor::new(
                &mut params,
                feature_dim,
                cfg.enc_hidden,
                cfg.enc_layers,
                &mut rng::stream(cfg.seed, &[rng::STREAM_INIT_EXTRACTOR]),
            )
        });
        Model {
            arch,
            backbone,
            extractor,
            params,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        let mut model = Model::new(&ckpt.config, ckpt.feature_dim, ckpt.num_classes);
        if model.params.len() != ckpt.params.len() {
            return Err(IgmError::Parse(format!(
                "checkpoint has {} parameter arrays, model expects {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for p in &ckpt.params {
            let id = model
                .params
                .id_of(&p.name)
                .ok_or_else(|| IgmError::Parse(format!("unknown parameter {}", p.name)))?;
            let want = model.params.get(id).dim();
            if want != (p.rows, p.cols) || p.data.len() != p.rows * p.cols {
                return Err(IgmError::Parse(format!(
                    "parameter {} has shape ({}, {}), expected {:?}",
                    p.name, p.rows, p.cols, want
                )));
            }
            *model.params.get_mut(id) =
                Array2::from_shape_vec((p.rows, p.cols), p.data.clone()).expect("shape checked");
        }
        if !model.params.all_finite() {
            return Err(IgmError::NonFinite("checkpoint parameters"));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Parameters plus the metadata needed to rebuild and audit a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub epoch: usize,
    pub step: usize,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(model: &Model, cfg: &RunConfig, epoch: usize, step: usize) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            config_hash: cfg.hash(),
            feature_dim: model.arch.feature_dim,
            num_classes: model.arch.num_classes,
            epoch,
            step,
            params: model
                .params
                .names()
                .iter()
                .zip(model.params.values())
                .map(|(name, v)| NamedArray {
                    name: name.clone(),
                    rows: v.nrows(),
                    cols: v.ncols(),
                    data: v.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let ckpt: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ckpt.schema_version != CHECKPOINT_VERSION {
            return Err(IgmError::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                actual: ckpt.schema_version,
            });
        }
        Ok(ckpt)
    }
}
