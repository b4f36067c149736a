//! The explanatory graph: layers of part-pattern nodes and the `.egraph` text format.
//!
//! An `.egraph` file is pretty-printed JSON:
//!
//! ```text
//! {
//!   "schema": "expgraph/egraph",
//!   "version": 1,
//!   "hyper": { "tau": .., "max_parents": .., "iterations": .., "beta": ..,
//!              "sigma2_floor": .., "sigma2_init": .. },
//!   "layers": [            // index 0 is the lowest layer
//!     { "layer_index": i, "channels": C, "height": H, "width": W, "nodes_per_filter": N,
//!       "channel_max": [C floats],
//!       "nodes": [ { "id": {"layer","filter","slot"}, "mu": {"x","y"},
//!                    "sigma2": .., "parents": [ids in layer+1], "dormant": bool } ] }
//!   ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so reading a file back reproduces
//! every value exactly. Nodes are stored filter-major, slot-minor.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::UnitPosition;

pub const SCHEMA: &str = "expgraph/egraph";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub layer: usize,
    pub filter: usize,
    pub slot: usize,
}

impl NodeId {
    pub const fn new(layer: usize, filter: usize, slot: usize) -> Self {
        NodeId {
            layer,
            filter,
            slot,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.layer, self.filter, self.slot)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    /// Parses `layer:filter:slot`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::input(format!("node id `{s}` is not layer:filter:slot"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n = |p: &str| p.trim().parse::<usize>().map_err(|_| bad());
        Ok(NodeId::new(n(parts[0])?, n(parts[1])?, n(parts[2])?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternNode {
    pub id: NodeId,
    /// Prior position on the image plane.
    pub mu: UnitPosition,
    pub sigma2: f64,
    /// Upper-layer nodes in greedy insertion order; empty means dummy-parented.
    pub parents: Vec<NodeId>,
    /// Set when the node captured no responsibility mass in the last learning iteration.
    #[serde(default)]
    pub dormant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub tau: f64,
    pub max_parents: usize,
    pub iterations: usize,
    pub beta: f64,
    pub sigma2_floor: f64,
    pub sigma2_init: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            tau: 0.1,
            max_parents: 15,
            iterations: 20,
            beta: 1.0,
            sigma2_floor: 1e-4,
            sigma2_init: 0.0625,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphLayer {
    /// `layer_index` of the feature maps this layer was learned from.
    pub layer_index: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub nodes_per_filter: usize,
    /// Per-channel normalizer for raw responses (max over the training set).
    pub channel_max: Vec<f64>,
    pub nodes: Vec<PatternNode>,
}

impl GraphLayer {
    pub fn index_of(&self, filter: usize, slot: usize) -> usize {
        filter * self.nodes_per_filter + slot
    }

    pub fn node(&self, id: NodeId) -> Option<&PatternNode> {
        if id.filter >= self.channels || id.slot >= self.nodes_per_filter {
            return None;
        }
        self.nodes
            .get(self.index_of(id.filter, id.slot))
            .filter(|n| n.id == id)
    }

    pub fn filter_nodes(&self, filter: usize) -> &[PatternNode] {
        let start = filter * self.nodes_per_filter;
        &self.nodes[start..start + self.nodes_per_filter]
    }

    pub fn grid_cell(&self) -> f64 {
        1.0 / self.height.min(self.width) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanatoryGraph {
    pub hyper: Hyperparams,
    pub layers: Vec<GraphLayer>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    schema: String,
    version: u32,
    hyper: Hyperparams,
    layers: Vec<GraphLayer>,
}

impl ExplanatoryGraph {
    pub fn node(&self, id: NodeId) -> Option<&PatternNode> {
        self.layers.get(id.layer)?.node(id)
    }

    pub fn total_nodes(&self) -> usize {
        self.layers.iter().map(|l| l.nodes.len()).sum()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &PatternNode> {
        self.layers.iter().flat_map(|l| l.nodes.iter())
    }

    /// Checks every structural invariant and reports all offending items at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let h = &self.hyper;
        if !(h.tau > 0.0) || !(h.beta > 0.0) || !(h.sigma2_floor > 0.0) || !(h.sigma2_init > 0.0) {
            problems.push("hyperparameters tau, beta, sigma2_floor, sigma2_init must be positive".into());
        }
        if h.max_parents == 0 || h.iterations == 0 {
            problems.push("max_parents and iterations must be at least 1".into());
        }
        let top = self.layers.len().saturating_sub(1);
        for (li, layer) in self.layers.iter().enumerate() {
            if layer.channel_max.len() != layer.channels {
                problems.push(format!(
                    "layer {li}: channel_max has {} entries for {} channels",
                    layer.channel_max.len(),
                    layer.channels
                ));
            }
            if layer.channel_max.iter().any(|m| !(*m > 0.0) || !m.is_finite()) {
                problems.push(format!("layer {li}: channel_max entries must be positive"));
            }
            let expected = layer.channels * layer.nodes_per_filter;
            if layer.nodes.len() != expected {
                problems.push(format!(
                    "layer {li}: {} nodes, expected {} ({} filters x {})",
                    layer.nodes.len(),
                    expected,
                    layer.channels,
                    layer.nodes_per_filter
                ));
            }
            let mut seen = BTreeSet::new();
            for node in &layer.nodes {
                let id = node.id;
                if id.layer != li {
                    problems.push(format!("node {id} stored in layer {li}"));
                }
                if id.filter >= layer.channels || id.slot >= layer.nodes_per_filter {
                    problems.push(format!("node {id} outside layer {li} shape"));
                }
                if !seen.insert(id) {
                    problems.push(format!("duplicate node id {id}"));
                }
                if !node.mu.is_finite() {
                    problems.push(format!("node {id}: non-finite mu"));
                }
                if !(node.sigma2 >= h.sigma2_floor) || !node.sigma2.is_finite() {
                    problems.push(format!(
                        "node {id}: sigma2 {} below floor {}",
                        node.sigma2, h.sigma2_floor
                    ));
                }
                if li == top && !node.parents.is_empty() {
                    problems.push(format!("top-layer node {id} has parents"));
                }
                if node.parents.len() > h.max_parents {
                    problems.push(format!(
                        "node {id}: {} parents exceeds M={}",
                        node.parents.len(),
                        h.max_parents
                    ));
                }
                let mut pseen = BTreeSet::new();
                for p in &node.parents {
                    if p.layer != li + 1 {
                        problems.push(format!("node {id}: parent {p} not in layer {}", li + 1));
                    } else if self.layers.get(p.layer).and_then(|l| l.node(*p)).is_none() {
                        problems.push(format!("node {id}: dangling parent {p}"));
                    }
                    if !pseen.insert(*p) {
                        problems.push(format!("node {id}: duplicate parent {p}"));
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn to_text(&self) -> String {
        let doc = Document {
            schema: SCHEMA.into(),
            version: SCHEMA_VERSION,
            hyper: self.hyper.clone(),
            layers: self.layers.clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.schema != SCHEMA || doc.version != SCHEMA_VERSION {
            return Err(Error::Validation(vec![format!(
                "unsupported schema {} v{}",
                doc.schema, doc.version
            )]));
        }
        let mut graph = ExplanatoryGraph {
            hyper: doc.hyper,
            layers: doc.layers,
        };
        for layer in &mut graph.layers {
            layer.nodes.sort_by_key(|n| n.id);
        }
        graph.validate()?;
        Ok(graph)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}
