//! JSON dataset files.
//!
//! ```text
//! {schema_version, num_classes, feature_dim, split?,
//!  graphs: [{num_nodes, edges: [[u,v],...], features: [[...],...], label,
//!            gt_mask?, base_class?, pred_mask?, edge_probs?}]}
//! ```
//!
//! `pred_mask` and `edge_probs` are written by subgraph export and ignored
//! when a file is loaded back as a [`Dataset`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{IgmError, Result};
use crate::graph::{Dataset, Graph, SplitTag};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphRecord {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub features: Vec<Vec<f64>>,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFile {
    pub schema_version: u32,
    pub num_classes: usize,
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitTag>,
    pub graphs: Vec<GraphRecord>,
}

impl GraphRecord {
    pub fn from_graph(g: &Graph) -> GraphRecord {
        GraphRecord {
            num_nodes: g.num_nodes(),
            edges: g.edges().iter().map(|&(u, v)| [u, v]).collect(),
            features: g.features().outer_iter().map(|r| r.to_vec()).collect(),
            label: g.label(),
            gt_mask: g.gt_mask().map(<[bool]>::to_vec),
            base_class: g.base_class(),
            pred_mask: None,
            edge_probs: None,
        }
    }

    fn to_graph(&self, num_classes: usize, feature_dim: usize) -> Result<Graph> {
        if self.features.len() != self.num_nodes {
            return Err(IgmError::DimensionMismatch {
                expected: self.num_nodes,
                actual: self.features.len(),
                context: "feature rows vs num_nodes",
            });
        }
        let mut flat = Vec::with_capacity(self.num_nodes * feature_dim);
        for row in &self.features {
            if row.len() != feature_dim {
                return Err(IgmError::DimensionMismatch {
                    expected: feature_dim,
                    actual: row.len(),
                    context: "node feature length vs feature_dim",
                });
            }
            flat.extend_from_slice(row);
        }
        let features = Array2::from_shape_vec((self.num_nodes, feature_dim), flat)
            .map_err(|e| IgmError::Parse(e.to_string()))?;
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&[u, v]| (u, v)).collect();
        let g = Graph::from_parts(
            self.num_nodes,
            &edges,
            features,
            self.label,
            num_classes,
            self.gt_mask.clone(),
        )?;
        Ok(g.with_base_class(self.base_class))
    }
}

impl DatasetFile {
    pub fn from_dataset(ds: &Dataset) -> DatasetFile {
        DatasetFile {
            schema_version: SCHEMA_VERSION,
            num_classes: ds.num_classes,
            feature_dim: ds.feature_dim,
            split: Some(ds.split_tag),
            graphs: ds.graphs.iter().map(GraphRecord::from_graph).collect(),
        }
    }

    pub fn into_dataset(self, default_split: SplitTag) -> Result<Dataset> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IgmError::VersionMismatch {
                expected: SCHEMA_VERSION,
                actual: self.schema_version,
            });
        }
        let graphs = self
            .graphs
            .iter()
            .map(|r| r.to_graph(self.num_classes, self.feature_dim))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(
            graphs,
            self.num_classes,
            self.feature_dim,
            self.split.unwrap_or(default_split),
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

pub fn serialize_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    DatasetFile::from_dataset(ds).write(path)
}

pub fn dataset_to_string(ds: &Dataset) -> Result<String> {
    Ok(serde_json::to_string(&DatasetFile::from_dataset(ds))?)
}

pub fn dataset_from_str(s: &str) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(s)?;
    file.into_dataset(SplitTag::Train)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_str(&fs::read_to_string(path)?)
}
