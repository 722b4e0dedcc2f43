use ndarray::Array2;

use crate::error::{Error, Result};

/// Road network: weighted adjacency (0 means no edge) plus an external id per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficGraph {
    pub adjacency: Array2<f64>,
    pub node_ids: Vec<String>,
}

impl TrafficGraph {
    pub fn new(adjacency: Array2<f64>, node_ids: Vec<String>) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c {
            return Err(Error::Shape(format!("adjacency is {r}x{c}, not square")));
        }
        if node_ids.len() != r {
            return Err(Error::Shape(format!(
                "{} node ids for a {r}-node adjacency",
                node_ids.len()
            )));
        }
        for ((i, j), &w) in adjacency.indexed_iter() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "adjacency[{i}][{j}] = {w} is not a finite non-negative weight"
                )));
            }
            if i == j && w != 0.0 {
                return Err(Error::Config(format!(
                    "self-loop on node `{}` (diagonal must be zero)",
                    node_ids[i]
                )));
            }
        }
        Ok(TrafficGraph {
            adjacency,
            node_ids,
        })
    }

    /// Graph with ids `"0".."n-1"`.
    pub fn with_default_ids(adjacency: Array2<f64>) -> Result<Self> {
        let ids = (0..adjacency.nrows()).map(|i| i.to_string()).collect();
        TrafficGraph::new(adjacency, ids)
    }

    pub fn n(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_symmetric(&self) -> bool {
        let a = &self.adjacency;
        a.indexed_iter().all(|((i, j), &w)| w == a[[j, i]])
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&w| w > 0.0).count()
    }

    /// Induced subgraph on `keep` (indices into this graph, in the given order).
    pub fn induced(&self, keep: &[usize]) -> TrafficGraph {
        let k = keep.len();
        let adjacency = Array2::from_shape_fn((k, k), |(a, b)| self.adjacency[[keep[a], keep[b]]]);
        TrafficGraph {
            adjacency,
            node_ids: keep.iter().map(|&i| self.node_ids[i].clone()).collect(),
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|x| x == id)
    }

    /// Directed weighted edges `(src, dst, weight)` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency
            .indexed_iter()
            .filter(|(_, &w)| w > 0.0)
            .map(|((i, j), &w)| (i, j, w))
            .collect()
    }
}
