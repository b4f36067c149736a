//! Layer-wise learning of the explanatory graph.
//!
//! Layers are fitted top-down. Within a layer every iteration computes responsibilities
//! once (E-step), then for each node refits its prior position, its variance and its
//! parent set against the expected complete-data log-likelihood with those
//! responsibilities held fixed. Each of the three updates can only raise that objective,
//! so the layer log-likelihood trace never decreases.
//!
//! Responsibilities enter the updates only through per-(node, image) weighted sums
//! ([`WeightedStats`]), and each node's compatibility in an image is a Gaussian whose mean
//! is the node's prior plus an image-specific shift. The M-step formulas below are written
//! in terms of those two pieces.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, UnitPosition};
use crate::graph::{ExplanatoryGraph, GraphLayer, Hyperparams, NodeId, PatternNode};
use crate::inference::{infer_layer, shift_model, NodeAssignment, UpperLayer};
use crate::mixture::{entity_weight, posterior, Entity, ImageMixture, NodeCompat, ParentAccumulator, ParentTerm};

/// Nodes whose total responsibility mass falls below this are dormant for the iteration.
pub const DORMANT_MASS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Exact maximizer of the expected complete-data log-likelihood.
    ClosedForm,
    /// One gradient-ascent step of size `eta` per iteration.
    Gradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnConfig {
    pub tau: f64,
    /// M: maximum number of parents per node.
    pub max_parents: usize,
    /// T: EM iterations per layer.
    pub iterations: usize,
    pub beta: f64,
    /// Nodes per filter for each layer, lowest layer first. A single entry applies to all layers.
    pub nodes_per_filter: Vec<usize>,
    pub sigma2_init: f64,
    pub sigma2_floor: f64,
    pub eta: f64,
    /// Size of the co-activation prefilter for edge selection; `None` considers every upper node.
    pub candidate_pool: Option<usize>,
    pub seed: u64,
    pub mode: UpdateMode,
}

impl Default for LearnConfig {
    fn default() -> Self {
        LearnConfig {
            tau: 0.1,
            max_parents: 15,
            iterations: 20,
            beta: 1.0,
            nodes_per_filter: vgg16_nodes_per_filter(),
            sigma2_init: 0.0625,
            sigma2_floor: 1e-4,
            eta: 1e-3,
            candidate_pool: Some(100),
            seed: 0,
            mode: UpdateMode::ClosedForm,
        }
    }
}

/// Node counts for the four-layer VGG-16 graph, lowest layer first.
pub fn vgg16_nodes_per_filter() -> Vec<usize> {
    vec![40, 40, 20, 20]
}

impl LearnConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("beta", self.beta),
            ("sigma2_init", self.sigma2_init),
            ("sigma2_floor", self.sigma2_floor),
            ("eta", self.eta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_parents == 0 || self.iterations == 0 {
            return Err(Error::config("max_parents and iterations must be at least 1"));
        }
        if self.nodes_per_filter.is_empty() || self.nodes_per_filter.contains(&0) {
            return Err(Error::config("nodes_per_filter needs positive entries"));
        }
        if self.candidate_pool == Some(0) {
            return Err(Error::config("candidate_pool must be at least 1"));
        }
        Ok(())
    }

    pub fn nodes_for_layer(&self, layer: usize, layer_count: usize) -> Result<usize> {
        match self.nodes_per_filter.len() {
            1 => Ok(self.nodes_per_filter[0]),
            n if n == layer_count => Ok(self.nodes_per_filter[layer]),
            n => Err(Error::config(format!(
                "nodes_per_filter has {n} entries for {layer_count} layers"
            ))),
        }
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            tau: self.tau,
            max_parents: self.max_parents,
            iterations: self.iterations,
            beta: self.beta,
            sigma2_floor: self.sigma2_floor,
            sigma2_init: self.sigma2_init,
        }
    }
}

/// Shape and normalization of the layer being fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShape {
    pub index: usize,
    pub layer_index: u32,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub nodes_per_filter: usize,
    pub channel_max: Vec<f64>,
}

/// One image's entities for one layer, grouped by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntities {
    pub image_id: String,
    pub by_channel: Vec<Vec<Entity>>,
}

/// Max response per channel over a set of maps of the same layer; dead channels get 1.
pub fn channel_maxima<'a>(maps: impl IntoIterator<Item = &'a FeatureMap>) -> Vec<f64> {
    let mut max: Vec<f64> = Vec::new();
    for m in maps {
        if max.len() < m.channels {
            max.resize(m.channels, 0.0);
        }
        for (c, slot) in max.iter_mut().enumerate().take(m.channels) {
            let cm = m.channel(c).iter().fold(0.0f64, |a, &v| a.max(v as f64));
            *slot = slot.max(cm);
        }
    }
    max.into_iter().map(|m| if m > 0.0 { m } else { 1.0 }).collect()
}

pub fn extract_entities(fmap: &FeatureMap, channel_max: &[f64], beta: f64) -> Result<ImageEntities> {
    let mut by_channel = Vec::with_capacity(fmap.channels);
    for (c, &cmax) in channel_max.iter().enumerate().take(fmap.channels) {
        let mut ents = Vec::new();
        for (i, &v) in fmap.channel(c).iter().enumerate() {
            let w = entity_weight(v as f64, cmax, beta)?;
            if w > 0.0 {
                ents.push(Entity {
                    position: fmap.unit_position(i / fmap.width, i % fmap.width),
                    weight: w,
                    channel: c,
                });
            }
        }
        by_channel.push(ents);
    }
    Ok(ImageEntities {
        image_id: fmap.image_id.clone(),
        by_channel,
    })
}

/// Responsibility-weighted sums over one node's entities in one image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedStats {
    /// `sum F(x) q(V|x)`
    pub mass: f64,
    /// `sum F(x) q(V|x) p_x`
    pub sum: UnitPosition,
    /// `sum F(x) q(V|x) |p_x|^2`
    pub sum_sq: f64,
}

impl WeightedStats {
    pub fn add(&mut self, p: UnitPosition, w: f64) {
        self.mass += w;
        self.sum = self.sum + p * w;
        self.sum_sq += w * p.norm_sq();
    }

    /// `sum F q |p_x - c|^2`
    pub fn sq_dev(&self, c: UnitPosition) -> f64 {
        (self.sum_sq - 2.0 * c.dot(self.sum) + self.mass * c.norm_sq()).max(0.0)
    }
}

/// Expected complete-data log-likelihood of one node: `sum_I sum_x F q log compat(p_x)`,
/// with the node's models given as shifts relative to `mu`.
pub fn expected_log_likelihood(mu: UnitPosition, stats: &[WeightedStats], shifts: &[NodeCompat]) -> f64 {
    stats
        .iter()
        .zip(shifts)
        .filter(|(s, _)| s.mass > 0.0)
        .map(|(s, m)| s.mass * m.log_offset - s.sq_dev(mu + m.mean) / (2.0 * m.variance))
        .sum()
}

/// `d/d mu` of the layer log-likelihood, given responsibilities from the current parameters.
pub fn log_likelihood_gradient(mu: UnitPosition, stats: &[WeightedStats], shifts: &[NodeCompat]) -> UnitPosition {
    stats
        .iter()
        .zip(shifts)
        .fold(UnitPosition::ORIGIN, |g, (s, m)| {
            g + (s.sum - (mu + m.mean) * s.mass) * (1.0 / m.variance)
        })
}

fn total_mass(stats: &[WeightedStats]) -> f64 {
    stats.iter().map(|s| s.mass).sum()
}

/// Maximizer of [`expected_log_likelihood`] over `mu`; `None` for a dormant node.
pub fn closed_form_mu(stats: &[WeightedStats], shifts: &[NodeCompat]) -> Option<UnitPosition> {
    let mut num = UnitPosition::ORIGIN;
    let mut den = 0.0;
    for (s, m) in stats.iter().zip(shifts) {
        if s.mass <= 0.0 {
            continue;
        }
        num = num + (s.sum - m.mean * s.mass) * (1.0 / m.variance);
        den += s.mass / m.variance;
    }
    if total_mass(stats) < DORMANT_MASS || !(den > 0.0) {
        None
    } else {
        Some(num * (1.0 / den))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MuUpdate {
    pub mu: UnitPosition,
    pub dormant: bool,
}

pub fn update_mu(node: &PatternNode, stats: &[WeightedStats], shifts: &[NodeCompat], config: &LearnConfig) -> MuUpdate {
    if total_mass(stats) < DORMANT_MASS {
        return MuUpdate {
            mu: node.mu,
            dormant: true,
        };
    }
    let mu = match config.mode {
        UpdateMode::ClosedForm => closed_form_mu(stats, shifts).unwrap_or(node.mu),
        UpdateMode::Gradient => node.mu + log_likelihood_gradient(node.mu, stats, shifts) * config.eta,
    };
    MuUpdate { mu, dormant: false }
}

/// Per-axis variance of `p_x - mu - shift` under the responsibilities, floored.
pub fn update_sigma2(node: &PatternNode, stats: &[WeightedStats], shifts: &[NodeCompat], config: &LearnConfig) -> f64 {
    let mass = total_mass(stats);
    if mass < DORMANT_MASS {
        return node.sigma2;
    }
    let dev: f64 = stats
        .iter()
        .zip(shifts)
        .map(|(s, m)| s.sq_dev(node.mu + m.mean))
        .sum();
    (dev / (2.0 * mass)).max(config.sigma2_floor)
}

/// Upper layer and its assignments on every training image, aligned with the stats slices.
#[derive(Debug, Clone, Copy)]
pub struct UpperEvidence<'a> {
    pub layer: &'a GraphLayer,
    pub assignments: &'a [Vec<NodeAssignment>],
}

impl<'a> UpperEvidence<'a> {
    fn for_image(&self, image: usize) -> UpperLayer<'a> {
        UpperLayer {
            layer: self.layer,
            assignments: &self.assignments[image],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSelection {
    pub parents: Vec<NodeId>,
    /// Closed-form prior position for the selected parents.
    pub mu: UnitPosition,
    /// Expected complete-data log-likelihood at `(parents, mu)`.
    pub objective: f64,
}

/// Upper nodes ranked by their total score over the images where the node has mass.
pub fn candidate_pool(stats: &[WeightedStats], upper: UpperEvidence<'_>, pool: Option<usize>) -> Vec<NodeId> {
    let mut totals = vec![0.0; upper.layer.nodes.len()];
    for (img, s) in stats.iter().enumerate() {
        if s.mass <= DORMANT_MASS {
            continue;
        }
        for (i, a) in upper.assignments[img].iter().enumerate() {
            totals[i] += a.score;
        }
    }
    let mut ranked: Vec<(f64, NodeId)> = totals
        .iter()
        .zip(&upper.layer.nodes)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, n)| (*t, n.id))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.truncate(pool.unwrap_or(usize::MAX));
    let mut ids: Vec<NodeId> = ranked.into_iter().map(|(_, id)| id).collect();
    ids.sort();
    ids
}

/// Incremental per-image state of a parent set during greedy search.
#[derive(Clone)]
struct SetState {
    per_image: Vec<ParentAccumulator>,
    count: usize,
    precision: f64,
}

impl SetState {
    fn empty(images: usize) -> Self {
        SetState {
            per_image: vec![ParentAccumulator::default(); images],
            count: 0,
            precision: 0.0,
        }
    }

    fn with(&self, parent: &PatternNode, idx: usize, upper: UpperEvidence<'_>, active: &[usize]) -> SetState {
        let mut next = self.clone();
        next.count += 1;
        next.precision += 1.0 / parent.sigma2;
        for &img in active {
            if let Some(p) = upper.assignments[img][idx].position {
                next.per_image[img].add(&ParentTerm {
                    inferred: p,
                    prior: parent.mu,
                    sigma2: parent.sigma2,
                });
            }
        }
        next
    }

    fn shifts(&self, sigma2_node: f64) -> Vec<NodeCompat> {
        self.per_image
            .iter()
            .map(|acc| {
                if self.count == 0 {
                    NodeCompat::gaussian(UnitPosition::ORIGIN, sigma2_node)
                } else if acc.count() > 0 {
                    acc.model(UnitPosition::ORIGIN)
                } else {
                    NodeCompat::gaussian(UnitPosition::ORIGIN, self.count as f64 / self.precision)
                }
            })
            .collect()
    }
}

fn fitted_objective(stats: &[WeightedStats], shifts: &[NodeCompat], fallback: UnitPosition) -> (UnitPosition, f64) {
    let mu = closed_form_mu(stats, shifts).unwrap_or(fallback);
    (mu, expected_log_likelihood(mu, stats, shifts))
}

/// Greedy parent selection: starting from the dummy parent, repeatedly add the candidate
/// whose addition (with `mu` refitted in closed form) gives the highest objective, until
/// `max_parents` are chosen or no candidate improves it. Ties go to the lower id.
pub fn select_edges(
    node: &PatternNode,
    stats: &[WeightedStats],
    upper: UpperEvidence<'_>,
    config: &LearnConfig,
) -> EdgeSelection {
    let images = stats.len();
    let active: Vec<usize> = (0..images).filter(|&i| stats[i].mass > 0.0).collect();
    let pool = candidate_pool(stats, upper, config.candidate_pool);

    let mut state = SetState::empty(images);
    let (mut mu, mut objective) = fitted_objective(stats, &state.shifts(node.sigma2), node.mu);
    let mut chosen: Vec<NodeId> = Vec::new();

    while chosen.len() < config.max_parents {
        let mut best: Option<(f64, UnitPosition, NodeId, SetState)> = None;
        for &cand in pool.iter().filter(|c| !chosen.contains(c)) {
            let idx = upper.layer.index_of(cand.filter, cand.slot);
            let next = state.with(&upper.layer.nodes[idx], idx, upper, &active);
            let (m, obj) = fitted_objective(stats, &next.shifts(node.sigma2), mu);
            if best.as_ref().is_none_or(|b| obj > b.0) {
                best = Some((obj, m, cand, next));
            }
        }
        match best {
            Some((obj, m, cand, next)) if obj - objective > 0.0 => {
                objective = obj;
                mu = m;
                chosen.push(cand);
                state = next;
            }
            _ => break,
        }
    }
    EdgeSelection {
        parents: chosen,
        mu,
        objective,
    }
}

/// Random priors, initial variance and dummy parents for one layer.
pub fn init_layer(config: &LearnConfig, shape: &LayerShape, rng: &mut impl Rng) -> Vec<PatternNode> {
    let mut nodes = Vec::with_capacity(shape.channels * shape.nodes_per_filter);
    for d in 0..shape.channels {
        for s in 0..shape.nodes_per_filter {
            let x: f64 = rng.sample(Open01);
            let y: f64 = rng.sample(Open01);
            nodes.push(PatternNode {
                id: NodeId::new(shape.index, d, s),
                mu: UnitPosition::new(x, y),
                sigma2: config.sigma2_init,
                parents: Vec::new(),
                dormant: false,
            });
        }
    }
    nodes
}

/// Result of the E-step on one image.
struct ImageEStep {
    stats: Vec<WeightedStats>,
    shifts: Vec<NodeCompat>,
    log_likelihood: f64,
}

fn e_step_image(
    nodes: &[PatternNode],
    shape: &LayerShape,
    entities: &ImageEntities,
    upper: Option<UpperLayer<'_>>,
    tau: f64,
) -> ImageEStep {
    let n = shape.nodes_per_filter;
    let shifts: Vec<NodeCompat> = nodes.iter().map(|v| shift_model(v, upper)).collect();
    let models: Vec<Vec<NodeCompat>> = (0..shape.channels)
        .map(|d| {
            (0..n)
                .map(|s| {
                    let i = d * n + s;
                    let mut m = shifts[i];
                    m.mean = m.mean + nodes[i].mu;
                    m
                })
                .collect()
        })
        .collect();
    let mut stats = vec![WeightedStats::default(); nodes.len()];
    let mut logs = vec![0.0; n];
    for (d, ents) in entities.by_channel.iter().enumerate().take(shape.channels) {
        for e in ents {
            for (l, m) in logs.iter_mut().zip(&models[d]) {
                *l = m.log_at(e.position);
            }
            let q = posterior(&logs, tau);
            for s in 0..n {
                stats[d * n + s].add(e.position, e.weight * q[s]);
            }
        }
    }
    let log_likelihood = ImageMixture {
        entities: &entities.by_channel.concat(),
        models: &models,
    }
    .log_likelihood(tau);
    ImageEStep {
        stats,
        shifts,
        log_likelihood,
    }
}

/// State of a layer fit: the nodes, last E-step statistics and the likelihood trace.
#[derive(Debug, Clone)]
pub struct LayerFitState {
    pub nodes: Vec<PatternNode>,
    /// `stats[node][image]` from the latest E-step.
    pub stats: Vec<Vec<WeightedStats>>,
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerFit {
    pub layer: GraphLayer,
    /// Layer log-likelihood before the first iteration and after every iteration.
    pub trace: Vec<f64>,
    pub dormant: usize,
}

/// E-step over all images: node-major statistics, image-major shifts and the log-likelihood.
fn e_step(
    nodes: &[PatternNode],
    shape: &LayerShape,
    images: &[ImageEntities],
    upper: Option<UpperEvidence<'_>>,
    tau: f64,
) -> (Vec<Vec<WeightedStats>>, Vec<Vec<NodeCompat>>, f64) {
    let per_image: Vec<ImageEStep> = images
        .par_iter()
        .enumerate()
        .map(|(i, ents)| e_step_image(nodes, shape, ents, upper.map(|u| u.for_image(i)), tau))
        .collect();
    // fixed summation order: image order
    let ll = per_image.iter().map(|r| r.log_likelihood).sum();
    let mut stats = vec![Vec::with_capacity(images.len()); nodes.len()];
    let mut shifts = vec![Vec::with_capacity(images.len()); nodes.len()];
    for r in per_image {
        for (v, (s, m)) in r.stats.into_iter().zip(r.shifts).enumerate() {
            stats[v].push(s);
            shifts[v].push(m);
        }
    }
    (stats, shifts, ll)
}

/// Fits one layer. `images` must be sorted by image id and aligned with `upper.assignments`.
pub fn learn_layer(
    images: &[ImageEntities],
    upper: Option<UpperEvidence<'_>>,
    shape: &LayerShape,
    config: &LearnConfig,
    rng: &mut impl Rng,
) -> Result<LayerFit> {
    config.validate()?;
    let mut nodes = init_layer(config, shape, rng);
    if images.iter().all(|im| im.by_channel.iter().all(|c| c.is_empty())) {
        log::warn!("layer {}: no activation entities; every node stays dormant", shape.index);
    }
    let mut trace = Vec::with_capacity(config.iterations + 1);
    let mut dormant = vec![false; nodes.len()];
    for _ in 0..config.iterations {
        let (stats, shifts, ll) = e_step(&nodes, shape, images, upper, config.tau);
        trace.push(ll);
        let updated: Vec<(PatternNode, bool)> = nodes
            .par_iter()
            .enumerate()
            .map(|(v, node)| m_step_node(node, &stats[v], &shifts[v], upper, config))
            .collect();
        for (v, (node, d)) in updated.into_iter().enumerate() {
            nodes[v] = node;
            dormant[v] = d;
        }
    }
    let (_, _, ll) = e_step(&nodes, shape, images, upper, config.tau);
    trace.push(ll);
    for (node, d) in nodes.iter_mut().zip(&dormant) {
        node.dormant = *d;
    }
    let dormant = dormant.iter().filter(|d| **d).count();
    if dormant > 0 {
        log::info!("layer {}: {dormant} dormant nodes", shape.index);
    }
    Ok(LayerFit {
        layer: GraphLayer {
            layer_index: shape.layer_index,
            channels: shape.channels,
            height: shape.height,
            width: shape.width,
            nodes_per_filter: shape.nodes_per_filter,
            channel_max: shape.channel_max.clone(),
            nodes,
        },
        trace,
        dormant,
    })
}

fn m_step_node(
    node: &PatternNode,
    stats: &[WeightedStats],
    shifts: &[NodeCompat],
    upper: Option<UpperEvidence<'_>>,
    config: &LearnConfig,
) -> (PatternNode, bool) {
    let mut next = node.clone();
    let mu = update_mu(&next, stats, shifts, config);
    if mu.dormant {
        return (next, true);
    }
    next.mu = mu.mu;
    next.sigma2 = update_sigma2(&next, stats, shifts, config);
    if let Some(up) = upper {
        // the node's own variance matters only while it is dummy-parented
        let current_shifts: Vec<NodeCompat> = if next.parents.is_empty() {
            shifts
                .iter()
                .map(|_| NodeCompat::gaussian(UnitPosition::ORIGIN, next.sigma2))
                .collect()
        } else {
            shifts.to_vec()
        };
        let current = expected_log_likelihood(next.mu, stats, &current_shifts);
        let sel = select_edges(&next, stats, up, config);
        if sel.objective > current {
            next.parents = sel.parents;
            next.mu = sel.mu;
        }
    }
    (next, false)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearnReport {
    /// Likelihood traces, lowest layer first.
    pub traces: Vec<Vec<f64>>,
    pub dormant: Vec<usize>,
    pub image_ids: Vec<String>,
}

/// Groups maps by image id and graph layer (ascending `layer_index`), checking completeness.
pub fn group_maps(maps: &[FeatureMap]) -> Result<(Vec<u32>, BTreeMap<String, Vec<&FeatureMap>>)> {
    let mut layer_ids: Vec<u32> = maps.iter().map(|m| m.layer_index).collect();
    layer_ids.sort_unstable();
    layer_ids.dedup();
    let mut by_image: BTreeMap<String, BTreeMap<u32, &FeatureMap>> = BTreeMap::new();
    for m in maps {
        if by_image
            .entry(m.image_id.clone())
            .or_default()
            .insert(m.layer_index, m)
            .is_some()
        {
            return Err(Error::input(format!(
                "duplicate feature map for image {} layer {}",
                m.image_id, m.layer_index
            )));
        }
    }
    let mut grouped = BTreeMap::new();
    for (id, layers) in by_image {
        let mut row = Vec::with_capacity(layer_ids.len());
        for l in &layer_ids {
            match layers.get(l) {
                Some(m) => row.push(*m),
                None => {
                    return Err(Error::input(format!(
                        "missing feature map for image {id} layer {l}"
                    )))
                }
            }
        }
        grouped.insert(id, row);
    }
    Ok((layer_ids, grouped))
}

/// Learns a full explanatory graph, top layer first, each lower layer conditioned on the
/// inferred positions of the layer above. Output does not depend on input order.
pub fn learn_graph(maps: &[FeatureMap], config: &LearnConfig) -> Result<(ExplanatoryGraph, LearnReport)> {
    config.validate()?;
    let (layer_ids, grouped) = group_maps(maps)?;
    let depth = layer_ids.len();
    let image_ids: Vec<String> = grouped.keys().cloned().collect();
    let rows: Vec<&Vec<&FeatureMap>> = grouped.values().collect();

    let mut shapes = Vec::with_capacity(depth);
    for (li, &lid) in layer_ids.iter().enumerate() {
        let first = rows[0][li];
        for row in &rows {
            let m = row[li];
            if (m.channels, m.height, m.width) != (first.channels, first.height, first.width) {
                return Err(Error::input(format!(
                    "layer {lid}: image {} is {}x{}x{}, image {} is {}x{}x{}",
                    first.image_id, first.channels, first.height, first.width,
                    m.image_id, m.channels, m.height, m.width
                )));
            }
        }
        shapes.push(LayerShape {
            index: li,
            layer_index: lid,
            channels: first.channels,
            height: first.height,
            width: first.width,
            nodes_per_filter: config.nodes_for_layer(li, depth)?,
            channel_max: channel_maxima(rows.iter().map(|r| r[li])),
        });
    }

    let hyper = config.hyperparams();
    let mut layers: Vec<Option<GraphLayer>> = vec![None; depth];
    let mut assignments: Vec<Vec<Vec<NodeAssignment>>> = vec![Vec::new(); depth];
    let mut report = LearnReport {
        traces: vec![Vec::new(); depth],
        dormant: vec![0; depth],
        image_ids: image_ids.clone(),
    };
    for li in (0..depth).rev() {
        let shape = &shapes[li];
        let entities: Vec<ImageEntities> = rows
            .par_iter()
            .map(|r| extract_entities(r[li], &shape.channel_max, config.beta))
            .collect::<Result<_>>()?;
        let upper = if li + 1 < depth {
            Some(UpperEvidence {
                layer: layers[li + 1].as_ref().expect("upper layer fitted"),
                assignments: &assignments[li + 1],
            })
        } else {
            None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(li as u64);
        let fit = learn_layer(&entities, upper, shape, config, &mut rng)?;
        let inferred: Vec<Vec<NodeAssignment>> = rows
            .par_iter()
            .enumerate()
            .map(|(img, r)| {
                let up = upper.map(|u| u.for_image(img));
                infer_layer(&fit.layer, &hyper, r[li], up)
            })
            .collect::<Result<_>>()?;
        report.traces[li] = fit.trace;
        report.dormant[li] = fit.dormant;
        assignments[li] = inferred;
        layers[li] = Some(fit.layer);
    }
    let graph = ExplanatoryGraph {
        hyper,
        layers: layers.into_iter().map(|l| l.expect("all layers fitted")).collect(),
    };
    graph.validate()?;
    Ok((graph, report))
}
