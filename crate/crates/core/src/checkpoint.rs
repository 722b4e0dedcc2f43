//! Checkpoint file: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then every parameter as a little-endian `f64` in manifest order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::adam::ParamEntry;
use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::graph::TrafficGraph;
use crate::model::{ModelConfig, ModelParams};
use crate::pruning::{normalize_adjacency, PruneConfig};
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"PRCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    /// `None` when the graph was used unpruned.
    pub prune_config: Option<PruneConfig>,
    pub norm_stats: NormStats,
    pub kept_nodes: Vec<String>,
    /// Edges of the (pruned) graph the model was trained on.
    pub graph_edges: Vec<GraphEdge>,
    pub sampling_interval_minutes: f64,
    pub horizon_minutes: f64,
    pub rng_seed: u64,
    pub manifest: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: ModelParams,
        train_config: TrainConfig,
        prune_config: Option<PruneConfig>,
        norm_stats: NormStats,
        graph: &TrafficGraph,
        sampling_interval_minutes: f64,
        horizon_minutes: f64,
    ) -> Self {
        let graph_edges = graph
            .edges()
            .into_iter()
            .map(|(i, j, w)| GraphEdge {
                src: graph.node_ids[i].clone(),
                dst: graph.node_ids[j].clone(),
                weight: w,
            })
            .collect();
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            model_config: params.config.clone(),
            train_config,
            prune_config,
            norm_stats,
            kept_nodes: graph.node_ids.clone(),
            graph_edges,
            sampling_interval_minutes,
            horizon_minutes,
            rng_seed: params.rng_seed,
            manifest: params.manifest(),
        };
        Checkpoint { header, params }
    }

    /// The graph the model was trained on, rebuilt from the header.
    pub fn graph(&self) -> Result<TrafficGraph> {
        let ids = &self.header.kept_nodes;
        let n = ids.len();
        let mut a = Array2::zeros((n, n));
        for e in &self.header.graph_edges {
            let find = |id: &str| {
                ids.iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Checkpoint(format!("edge references unknown node `{id}`")))
            };
            a[[find(&e.src)?, find(&e.dst)?]] = e.weight;
        }
        TrafficGraph::new(a, ids.clone())
    }

    pub fn a_hat(&self) -> Result<Array2<f64>> {
        Ok(normalize_adjacency(&self.graph()?.adjacency))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let flat = self.params.flatten();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * flat.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in flat {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut params = ModelParams::init(&header.model_config, header.rng_seed)?;
        if params.manifest() != header.manifest {
            return Err(bad("parameter manifest does not match the model configuration"));
        }
        let data = &bytes[16 + len..];
        if data.len() != 8 * params.num_params() {
            return Err(Error::Checkpoint(format!(
                "{} parameter bytes, expected {}",
                data.len(),
                8 * params.num_params()
            )));
        }
        let flat: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.assign_flat(&flat)?;
        if !params.is_finite() {
            return Err(bad("checkpoint holds non-finite parameters"));
        }
        Ok(Checkpoint { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
