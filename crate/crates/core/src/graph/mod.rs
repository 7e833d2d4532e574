//! Graph containers, text IO, synthetic generation and split masks.

mod io;
mod split;
mod synthetic;

pub use io::{load_graph, save_graph, GraphFiles, GraphFormat};
pub use split::{make_splits, SplitMasks, SplitRatios};
pub use synthetic::{generate_synthetic, generate_synthetic_layers, RelationSpec, SyntheticGraph, SyntheticSpec};

use std::collections::HashMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("invalid graph: {0}")]
    Validation(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("split: {0}")]
    Split(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// An undirected, unweighted node-attributed graph.
///
/// `edges` holds every directed adjacency entry `(u, v)` in sorted order; an
/// undirected edge contributes both `(u, v)` and `(v, u)` and a self-loop a
/// single `(u, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphData {
    features: Tensor,
    edges: Vec<(usize, usize)>,
    labels: Vec<usize>,
    num_classes: usize,
    node_ids: Vec<usize>,
}

impl GraphData {
    /// Builds a graph from (possibly one-directional, possibly duplicated)
    /// edges between local indices. Edges are symmetrized and deduplicated.
    pub fn new(
        features: Tensor,
        edges: impl IntoIterator<Item = (usize, usize)>,
        labels: Vec<usize>,
        num_classes: usize,
        node_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = labels.len();
        if features.rows() != n {
            return Err(GraphError::Validation(format!(
                "{} feature rows for {n} nodes",
                features.rows()
            )));
        }
        if node_ids.len() != n {
            return Err(GraphError::Validation(format!(
                "{} node ids for {n} nodes",
                node_ids.len()
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(GraphError::Validation(format!(
                "label {y} of node {i} is not below class count {num_classes}"
            )));
        }
        let mut sym = Vec::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::Validation(format!(
                    "edge ({u}, {v}) has an endpoint outside 0..{n}"
                )));
            }
            sym.push((u, v));
            if u != v {
                sym.push((v, u));
            }
        }
        sym.sort_unstable();
        sym.dedup();
        Ok(Self {
            features,
            edges: sym,
            labels,
            num_classes,
            node_ids,
        })
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn node_ids(&self) -> &[usize] {
        &self.node_ids
    }

    /// Sorted directed adjacency entries.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Each undirected edge once, as `(min, max)`.
    pub fn undirected_edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied().filter(|(u, v)| u <= v)
    }

    pub fn num_undirected_edges(&self) -> usize {
        self.undirected_edges().count()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u, v)).is_ok()
    }

    /// Neighbor lists (including a node itself when it carries a self-loop).
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n()];
        for &(u, _) in &self.edges {
            deg[u] += 1;
        }
        deg
    }

    /// Directed entries split into source and target index arrays.
    pub fn edge_index(&self) -> (Rc<[usize]>, Rc<[usize]>) {
        let src: Vec<usize> = self.edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = self.edges.iter().map(|e| e.1).collect();
        (src.into(), dst.into())
    }

    /// Copy with a self-loop on every node.
    pub fn with_self_loops(&self) -> GraphData {
        let mut g = self.clone();
        g.edges.extend((0..self.n()).map(|i| (i, i)));
        g.edges.sort_unstable();
        g.edges.dedup();
        g
    }

    pub fn index_map(&self) -> HashMap<usize, usize> {
        self.node_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }

    /// Subgraph on local indices `idx` (kept in the given order).
    pub fn induced_by_indices(&self, idx: &[usize]) -> Result<GraphData> {
        let n = self.n();
        let mut local = vec![usize::MAX; n];
        for (new, &old) in idx.iter().enumerate() {
            if old >= n {
                return Err(GraphError::Validation(format!("index {old} outside 0..{n}")));
            }
            if local[old] != usize::MAX {
                return Err(GraphError::Validation(format!("index {old} listed twice")));
            }
            local[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| local[*u] != usize::MAX && local[*v] != usize::MAX)
            .map(|&(u, v)| (local[u], local[v]));
        GraphData::new(
            self.features.select_rows(idx),
            edges,
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
            idx.iter().map(|&i| self.node_ids[i]).collect(),
        )
    }

    /// Fraction of undirected non-loop edges joining same-label endpoints.
    pub fn edge_homophily(&self) -> f64 {
        let (same, total) = self
            .undirected_edges()
            .filter(|(u, v)| u != v)
            .fold((0usize, 0usize), |(s, t), (u, v)| {
                (s + usize::from(self.labels[u] == self.labels[v]), t + 1)
            });
        if total == 0 {
            0.0
        } else {
            same as f64 / total as f64
        }
    }
}

/// Subgraph containing exactly the nodes whose global ids are in `ids`,
/// ordered as in `graph`.
pub fn induced_subgraph(graph: &GraphData, ids: &[usize]) -> Result<GraphData> {
    let index = graph.index_map();
    let mut idx = Vec::with_capacity(ids.len());
    for id in ids {
        idx.push(*index.get(id).ok_or(GraphError::UnknownNode(*id))?);
    }
    idx.sort_unstable();
    idx.dedup();
    graph.induced_by_indices(&idx)
}
