//! Top-down position inference: every node picks the unit of its filter that maximizes
//! `F(x) * compat(p_x, V)`, with parent positions taken from the layer above.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, UnitPosition};
use crate::graph::{ExplanatoryGraph, GraphLayer, Hyperparams, NodeId, PatternNode};
use crate::mixture::{entity_weight, NodeCompat, ParentAccumulator, ParentTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unit {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAssignment {
    pub node: NodeId,
    pub unit: Option<Unit>,
    pub position: Option<UnitPosition>,
    pub score: f64,
}

impl NodeAssignment {
    pub fn unassigned(node: NodeId) -> Self {
        NodeAssignment {
            node,
            unit: None,
            position: None,
            score: 0.0,
        }
    }
}

/// Inference output for one image; `layers[l][i]` belongs to node `i` of graph layer `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub image_id: String,
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub layers: Vec<Vec<NodeAssignment>>,
}

impl InferenceResult {
    pub fn assignment(&self, id: NodeId) -> Option<&NodeAssignment> {
        self.layers
            .get(id.layer)?
            .iter()
            .find(|a| a.node == id)
    }

    pub fn assignments(&self) -> impl Iterator<Item = &NodeAssignment> {
        self.layers.iter().flatten()
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// The layer above the one being evaluated, together with its assignments on the current image.
#[derive(Debug, Clone, Copy)]
pub struct UpperLayer<'a> {
    pub layer: &'a GraphLayer,
    pub assignments: &'a [NodeAssignment],
}

/// Compatibility model for a node given an explicit parent list, built with the node's
/// prior position at the origin so that `mean` is the image-specific shift.
///
/// Parents without an assignment are skipped; when none is assigned the model falls back
/// to a Gaussian at the prior with the harmonic-mean variance of the full parent set.
pub fn shift_model_for(
    parents: &[NodeId],
    sigma2_node: f64,
    upper: Option<UpperLayer<'_>>,
) -> NodeCompat {
    let upper = match upper {
        Some(u) if !parents.is_empty() => u,
        _ => return NodeCompat::gaussian(UnitPosition::ORIGIN, sigma2_node),
    };
    let mut acc = ParentAccumulator::default();
    let mut precision = 0.0;
    for &pid in parents {
        let idx = upper.layer.index_of(pid.filter, pid.slot);
        let parent = &upper.layer.nodes[idx];
        precision += 1.0 / parent.sigma2;
        if let Some(p) = upper.assignments[idx].position {
            acc.add(&ParentTerm {
                inferred: p,
                prior: parent.mu,
                sigma2: parent.sigma2,
            });
        }
    }
    if acc.count() > 0 {
        acc.model(UnitPosition::ORIGIN)
    } else {
        NodeCompat::gaussian(UnitPosition::ORIGIN, parents.len() as f64 / precision)
    }
}

pub fn shift_model(node: &PatternNode, upper: Option<UpperLayer<'_>>) -> NodeCompat {
    shift_model_for(&node.parents, node.sigma2, upper)
}

/// Compatibility model of `node` on the current image.
pub fn node_model(node: &PatternNode, upper: Option<UpperLayer<'_>>) -> NodeCompat {
    let mut m = shift_model(node, upper);
    m.mean = m.mean + node.mu;
    m
}

/// `F(x)` for every unit of one channel, row-major.
pub fn unit_weights(fmap: &FeatureMap, channel: usize, channel_max: f64, beta: f64) -> Result<Vec<f64>> {
    fmap.channel(channel)
        .iter()
        .map(|&v| entity_weight(v as f64, channel_max, beta))
        .collect()
}

fn check_shape(layer: &GraphLayer, fmap: &FeatureMap) -> Result<()> {
    if fmap.channels < layer.channels {
        return Err(Error::Mismatch(format!(
            "graph layer expects {} channels, map {} has {}",
            layer.channels, fmap.image_id, fmap.channels
        )));
    }
    if fmap.height != layer.height || fmap.width != layer.width {
        return Err(Error::Mismatch(format!(
            "graph layer is {}x{}, map {} is {}x{}",
            layer.height, layer.width, fmap.image_id, fmap.height, fmap.width
        )));
    }
    Ok(())
}

/// Assigns every node of `layer` to its best unit on `fmap`.
pub fn infer_layer(
    layer: &GraphLayer,
    hyper: &Hyperparams,
    fmap: &FeatureMap,
    upper: Option<UpperLayer<'_>>,
) -> Result<Vec<NodeAssignment>> {
    check_shape(layer, fmap)?;
    let mut out = Vec::with_capacity(layer.nodes.len());
    for d in 0..layer.channels {
        let weights = unit_weights(fmap, d, layer.channel_max[d], hyper.beta)?;
        let live: Vec<(usize, f64, UnitPosition)> = weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, &w)| (i, w, fmap.unit_position(i / fmap.width, i % fmap.width)))
            .collect();
        for node in layer.filter_nodes(d) {
            let model = node_model(node, upper);
            let mut best: Option<(f64, usize, f64, UnitPosition, f64)> = None;
            for &(i, w, p) in &live {
                let log_c = model.log_at(p);
                let key = w.ln() + log_c;
                // strict comparison keeps the lowest (row, col) on ties
                if best.is_none_or(|b| key > b.0) {
                    best = Some((key, i, w, p, log_c));
                }
            }
            out.push(match best {
                Some((_, i, w, p, log_c)) => NodeAssignment {
                    node: node.id,
                    unit: Some(Unit {
                        channel: d,
                        row: i / fmap.width,
                        col: i % fmap.width,
                    }),
                    position: Some(p),
                    score: w * log_c.exp(),
                },
                None => NodeAssignment::unassigned(node.id),
            });
        }
    }
    Ok(out)
}

/// Runs [`infer_layer`] from the top layer down. `fmaps` must hold one map per graph layer;
/// they are matched to graph layers by `layer_index`.
pub fn infer_image(graph: &ExplanatoryGraph, fmaps: &[FeatureMap]) -> Result<InferenceResult> {
    if fmaps.len() != graph.layers.len() {
        return Err(Error::input(format!(
            "graph has {} layers but {} feature maps were given",
            graph.layers.len(),
            fmaps.len()
        )));
    }
    let mut ordered = Vec::with_capacity(fmaps.len());
    for layer in &graph.layers {
        let m = fmaps
            .iter()
            .find(|m| m.layer_index == layer.layer_index)
            .ok_or_else(|| Error::input(format!("no feature map for layer_index {}", layer.layer_index)))?;
        ordered.push(m);
    }
    let first = ordered.first();
    if let Some(m) = ordered.iter().find(|m| m.image_id != ordered[0].image_id) {
        return Err(Error::input(format!(
            "feature maps from different images: {} and {}",
            ordered[0].image_id, m.image_id
        )));
    }
    let mut layers: Vec<Vec<NodeAssignment>> = vec![Vec::new(); graph.layers.len()];
    for li in (0..graph.layers.len()).rev() {
        let upper = if li + 1 < graph.layers.len() {
            Some(UpperLayer {
                layer: &graph.layers[li + 1],
                assignments: &layers[li + 1],
            })
        } else {
            None
        };
        let assigned = infer_layer(&graph.layers[li], &graph.hyper, ordered[li], upper)?;
        layers[li] = assigned;
    }
    Ok(InferenceResult {
        image_id: first.map(|m| m.image_id.clone()).unwrap_or_default(),
        image_width_px: first.map(|m| m.image_width_px).unwrap_or(0),
        image_height_px: first.map(|m| m.image_height_px).unwrap_or(0),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub k: usize,
    /// The `k` highest-scoring images, descending, ties by image id.
    pub images: Vec<(String, f64)>,
}

/// Smallest `k` whose top-`k` scores carry at least `fraction` of the total score.
pub fn top_k_energy(scores: &[(String, f64)], fraction: f64) -> Result<TopK> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::domain(format!("energy fraction {fraction} outside [0,1]")));
    }
    if let Some((id, s)) = scores.iter().find(|(_, s)| !(*s >= 0.0)) {
        return Err(Error::domain(format!("negative score {s} for image {id}")));
    }
    let mut sorted: Vec<(String, f64)> = scores.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total: f64 = sorted.iter().map(|(_, s)| s).sum();
    if total <= 0.0 {
        return Ok(TopK { k: 0, images: vec![] });
    }
    let target = fraction * total * (1.0 - 1e-12);
    let mut cum = 0.0;
    let mut k = 0;
    for (_, s) in &sorted {
        if k > 0 && cum >= target {
            break;
        }
        cum += s;
        k += 1;
    }
    if fraction == 0.0 {
        k = 0;
    }
    sorted.truncate(k);
    Ok(TopK { k, images: sorted })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{log_gauss2d, node_compat, ParentEvidence};

    fn top_layer(mu: UnitPosition, sigma2: f64, h: usize, w: usize) -> GraphLayer {
        GraphLayer {
            layer_index: 0,
            channels: 1,
            height: h,
            width: w,
            nodes_per_filter: 1,
            channel_max: vec![1.0],
            nodes: vec![PatternNode {
                id: NodeId::new(0, 0, 0),
                mu,
                sigma2,
                parents: vec![],
                dormant: false,
            }],
        }
    }

    #[test]
    fn single_live_unit_wins() {
        let layer = top_layer(UnitPosition::new(0.9, 0.9), 0.001, 4, 4);
        let mut m = FeatureMap::zeros("a", 0, 1, 4, 4, 40, 40).unwrap();
        m.set(0, 0, 1, 0.5);
        let a = infer_layer(&layer, &Hyperparams::default(), &m, None).unwrap();
        assert_eq!(a[0].unit, Some(Unit { channel: 0, row: 0, col: 1 }));
        assert_eq!(a[0].position, Some(UnitPosition::new(0.375, 0.125)));
        let expect = 0.5 * log_gauss2d(UnitPosition::new(0.375, 0.125), layer.nodes[0].mu, 0.001).exp();
        assert!((a[0].score - expect).abs() <= 1e-12 * expect.abs());
    }

    #[test]
    fn unit_at_mean_beats_farther_unit() {
        let layer = top_layer(UnitPosition::new(0.625, 0.375), 0.01, 4, 4);
        let mut m = FeatureMap::zeros("a", 0, 1, 4, 4, 40, 40).unwrap();
        m.set(0, 1, 2, 1.0);
        m.set(0, 3, 0, 1.0);
        let a = infer_layer(&layer, &Hyperparams::default(), &m, None).unwrap();
        assert_eq!(a[0].unit, Some(Unit { channel: 0, row: 1, col: 2 }));
    }

    #[test]
    fn ties_go_to_lowest_row_col() {
        let layer = top_layer(UnitPosition::new(0.5, 0.5), 0.01, 2, 2);
        let mut m = FeatureMap::zeros("a", 0, 1, 2, 2, 40, 40).unwrap();
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            m.set(0, r, c, 1.0);
        }
        let a = infer_layer(&layer, &Hyperparams::default(), &m, None).unwrap();
        assert_eq!(a[0].unit, Some(Unit { channel: 0, row: 0, col: 0 }));
    }

    #[test]
    fn silent_channel_leaves_node_unassigned() {
        let layer = top_layer(UnitPosition::new(0.5, 0.5), 0.01, 3, 3);
        let mut m = FeatureMap::zeros("a", 0, 1, 3, 3, 40, 40).unwrap();
        m.set(0, 1, 1, -2.0);
        let a = infer_layer(&layer, &Hyperparams::default(), &m, None).unwrap();
        assert_eq!(a[0], NodeAssignment::unassigned(NodeId::new(0, 0, 0)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let layer = top_layer(UnitPosition::new(0.5, 0.5), 0.01, 3, 3);
        let m = FeatureMap::zeros("a", 0, 1, 4, 3, 40, 40).unwrap();
        assert!(matches!(
            infer_layer(&layer, &Hyperparams::default(), &m, None),
            Err(Error::Mismatch(_))
        ));
        let mut wide = layer.clone();
        wide.channels = 2;
        wide.channel_max = vec![1.0, 1.0];
        let m = FeatureMap::zeros("a", 0, 1, 3, 3, 40, 40).unwrap();
        assert!(matches!(
            infer_layer(&wide, &Hyperparams::default(), &m, None),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn one_top_node_one_hot_unit() {
        let graph = ExplanatoryGraph {
            hyper: Hyperparams::default(),
            layers: vec![top_layer(UnitPosition::new(0.2, 0.2), 0.02, 5, 5)],
        };
        let mut m = FeatureMap::zeros("img", 0, 1, 5, 5, 50, 50).unwrap();
        m.set(0, 3, 4, 2.0);
        let r = infer_image(&graph, &[m]).unwrap();
        let a = &r.layers[0][0];
        assert_eq!(a.position, Some(UnitPosition::new(0.9, 0.7)));
        assert_eq!(r.image_width_px, 50);
        assert!(infer_image(&graph, &[]).is_err());
    }

    #[test]
    fn parent_evidence_drives_child() {
        // parent layer 1 with one node, child layer 0 with one node parented to it
        let parent_layer = GraphLayer {
            layer_index: 1,
            ..top_layer(UnitPosition::new(0.3, 0.3), 0.01, 4, 4)
        };
        let mut parent_layer = parent_layer;
        parent_layer.nodes[0].id = NodeId::new(1, 0, 0);
        let mut child_layer = top_layer(UnitPosition::new(0.4, 0.4), 0.01, 8, 8);
        child_layer.nodes[0].parents = vec![NodeId::new(1, 0, 0)];
        let graph = ExplanatoryGraph {
            hyper: Hyperparams::default(),
            layers: vec![child_layer, parent_layer],
        };
        graph.validate().unwrap();
        // parent fires one cell right/down of its prior; child should follow the shift
        let mut top = FeatureMap::zeros("i", 1, 1, 4, 4, 80, 80).unwrap();
        top.set(0, 2, 2, 1.0); // (0.625, 0.625): shift (+0.325, +0.325)
        let mut low = FeatureMap::zeros("i", 0, 1, 8, 8, 80, 80).unwrap();
        low.set(0, 3, 3, 1.0); // (0.4375, 0.4375) near the prior
        low.set(0, 5, 5, 1.0); // (0.6875, 0.6875) near prior + shift = 0.725
        let r = infer_image(&graph, &[low, top]).unwrap();
        let child = &r.layers[0][0];
        assert_eq!(child.unit, Some(Unit { channel: 0, row: 5, col: 5 }));
        // score equals F * literal product-form compatibility
        let ev = ParentEvidence::new(vec![ParentTerm {
            inferred: UnitPosition::new(0.625, 0.625),
            prior: UnitPosition::new(0.3, 0.3),
            sigma2: 0.01,
        }])
        .unwrap();
        let expect = node_compat(child.position.unwrap(), UnitPosition::new(0.4, 0.4), 0.01, Some(&ev));
        assert!((child.score - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn all_parents_silent_falls_back_to_prior() {
        let mut parent_layer = top_layer(UnitPosition::new(0.3, 0.3), 0.04, 4, 4);
        parent_layer.nodes[0].id = NodeId::new(1, 0, 0);
        let mut child = top_layer(UnitPosition::new(0.4, 0.4), 0.01, 8, 8).nodes.remove(0);
        child.parents = vec![NodeId::new(1, 0, 0)];
        let none = [NodeAssignment::unassigned(NodeId::new(1, 0, 0))];
        let m = node_model(&child, Some(UpperLayer { layer: &parent_layer, assignments: &none }));
        assert_eq!(m.mean, child.mu);
        assert!((m.variance - 0.04).abs() < 1e-15);
    }

    fn ids(n: usize, f: impl Fn(usize) -> f64) -> Vec<(String, f64)> {
        (0..n).map(|i| (format!("img{i:03}"), f(i))).collect()
    }

    #[test]
    fn top_k_examples() {
        let scores = ids(15, |i| if i == 0 { 10.0 } else { 1.0 });
        let t = top_k_energy(&scores, 0.3).unwrap();
        assert_eq!(t.k, 1);
        assert_eq!(t.images[0].0, "img000");

        for n in [1usize, 3, 7, 10, 20, 33, 100] {
            let t = top_k_energy(&ids(n, |_| 2.5), 0.3).unwrap();
            assert_eq!(t.k, (0.3 * n as f64 - 1e-9).ceil() as usize, "n={n}");
            let full = top_k_energy(&ids(n, |_| 2.5), 1.0).unwrap();
            assert_eq!(full.k, n);
        }
        assert_eq!(top_k_energy(&ids(4, |_| 0.0), 0.3).unwrap().k, 0);
        assert!(top_k_energy(&ids(4, |_| -1.0), 0.3).is_err());
    }

    #[test]
    fn top_k_is_monotone_in_fraction() {
        let scores = ids(40, |i| ((i * 37) % 11) as f64 + 0.5);
        let mut last = 0;
        for step in 0..=100 {
            let k = top_k_energy(&scores, step as f64 / 100.0).unwrap().k;
            assert!(k >= last);
            last = k;
        }
    }
}
