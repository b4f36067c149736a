//! Synthetic feature maps with planted part patterns and known ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, UnitPosition};
use crate::graph::{ExplanatoryGraph, NodeId};
use crate::inference::InferenceResult;
use crate::metrics::LandmarkSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthLayer {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// A part planted at `anchor + translation + jitter + offsets[l]` in channel `channels[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthPart {
    pub name: String,
    pub anchor: UnitPosition,
    pub channels: Vec<usize>,
    pub offsets: Vec<UnitPosition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
    #[serde(default = "default_px")]
    pub image_width_px: u32,
    #[serde(default = "default_px")]
    pub image_height_px: u32,
    /// Lowest layer first.
    pub layers: Vec<SynthLayer>,
    #[serde(default)]
    pub parts: Vec<SynthPart>,
    #[serde(default)]
    pub pose_sigma: f64,
    #[serde(default)]
    pub part_sigma: f64,
    /// Bump standard deviation in grid cells of the layer it is drawn into.
    #[serde(default = "default_bump")]
    pub bump_width: f64,
    /// Distractor bumps per image per layer.
    #[serde(default)]
    pub distractors: usize,
    #[serde(default = "default_distractor_amplitude")]
    pub distractor_amplitude: f64,
}

fn default_prefix() -> String {
    "img".into()
}

fn default_px() -> u32 {
    224
}

fn default_bump() -> f64 {
    1.0
}

fn default_distractor_amplitude() -> f64 {
    0.4
}

impl SynthSpec {
    /// Largest displacement of a part from its anchor (both jitters truncated at 3 sigma per axis).
    fn max_shift(&self) -> f64 {
        3.0 * (self.pose_sigma + self.part_sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers.is_empty() {
            problems.push("at least one layer is required".to_string());
        }
        for (l, d) in self.layers.iter().enumerate() {
            if d.channels == 0 || d.height == 0 || d.width == 0 {
                problems.push(format!("layer {l} has a zero dimension"));
            }
        }
        if self.image_width_px == 0 || self.image_height_px == 0 {
            problems.push("image pixel dimensions must be positive".into());
        }
        for (name, v) in [
            ("pose_sigma", self.pose_sigma),
            ("part_sigma", self.part_sigma),
            ("distractor_amplitude", self.distractor_amplitude),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                problems.push(format!("{name} must be finite and non-negative"));
            }
        }
        if !(self.bump_width.is_finite() && self.bump_width > 0.0) {
            problems.push("bump_width must be positive".into());
        }
        let margin = self.max_shift();
        let mut names = std::collections::BTreeSet::new();
        for part in &self.parts {
            if !names.insert(part.name.as_str()) {
                problems.push(format!("duplicate part name {}", part.name));
            }
            if part.channels.len() != self.layers.len() || part.offsets.len() != self.layers.len() {
                problems.push(format!(
                    "part {} needs one channel and one offset per layer ({} layers)",
                    part.name,
                    self.layers.len()
                ));
                continue;
            }
            for (l, (&c, &off)) in part.channels.iter().zip(&part.offsets).enumerate() {
                if c >= self.layers[l].channels {
                    problems.push(format!("part {} layer {l}: channel {c} out of range", part.name));
                }
                let p = part.anchor + off;
                let inside = |v: f64| v.is_finite() && v - margin > 0.0 && v + margin < 1.0;
                if !(inside(p.x) && inside(p.y)) {
                    problems.push(format!(
                        "part {} layer {l}: planted position ({}, {}) is not {margin} inside the unit square",
                        part.name, p.x, p.y
                    ));
                }
            }
        }
        // parts sharing a channel must stay apart by more than two bump widths under any jitter
        let spread = 2.0 * 3.0 * std::f64::consts::SQRT_2 * self.part_sigma;
        for l in 0..self.layers.len() {
            let d = &self.layers[l];
            let cell = 1.0 / d.height.min(d.width) as f64;
            for (i, a) in self.parts.iter().enumerate() {
                for b in &self.parts[i + 1..] {
                    let (Some(&ca), Some(&cb)) = (a.channels.get(l), b.channels.get(l)) else {
                        continue;
                    };
                    if ca != cb {
                        continue;
                    }
                    let sep = (a.anchor + a.offsets[l]).dist(b.anchor + b.offsets[l]);
                    if sep - spread <= 2.0 * self.bump_width * cell {
                        problems.push(format!(
                            "parts {} and {} collide in layer {l} channel {ca}",
                            a.name, b.name
                        ));
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

    pub fn image_id(&self, index: usize) -> String {
        let digits = self.images.saturating_sub(1).to_string().len().max(4);
        format!("{}{:0digits$}", self.id_prefix, index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedBump {
    pub channel: usize,
    pub position: UnitPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTruth {
    pub name: String,
    /// Anchor plus translation plus jitter, before per-layer offsets.
    pub base: UnitPosition,
    pub layers: Vec<PlantedBump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTruth {
    pub image_id: String,
    pub translation: UnitPosition,
    pub parts: Vec<PartTruth>,
    /// Distractors per layer.
    pub distractors: Vec<Vec<PlantedBump>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub image_width_px: u32,
    pub image_height_px: u32,
    pub layers: Vec<SynthLayer>,
    pub images: Vec<ImageTruth>,
}

impl SynthTruth {
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("truth serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Part base positions as landmarks, keyed by part name.
    pub fn landmarks(&self) -> LandmarkSet {
        LandmarkSet(
            self.images
                .iter()
                .map(|img| {
                    let marks = img.parts.iter().map(|p| (p.name.clone(), p.base)).collect();
                    (img.image_id.clone(), marks)
                })
                .collect(),
        )
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageTruth> {
        self.images.iter().find(|i| i.image_id == image_id)
    }
}

fn truncated(normal: &Normal<f64>, sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 3.0 * sigma {
            return v;
        }
    }
}

fn jitter(sigma: f64, rng: &mut impl Rng) -> Result<UnitPosition> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("bad sigma {sigma}: {e}")))?;
    let x = truncated(&normal, sigma, rng);
    let y = truncated(&normal, sigma, rng);
    Ok(UnitPosition::new(x, y))
}

/// Max-composites a truncated isotropic bump of height `amplitude` into one channel.
pub fn draw_bump(map: &mut FeatureMap, channel: usize, center: UnitPosition, amplitude: f32, width_cells: f64) {
    let (h, w) = (map.height, map.width);
    let cx = center.x * w as f64;
    let cy = center.y * h as f64;
    let reach = 3.0 * width_cells;
    let r0 = ((cy - reach - 0.5).floor().max(0.0)) as usize;
    let r1 = ((cy + reach).ceil().max(0.0) as usize).min(h);
    let c0 = ((cx - reach - 0.5).floor().max(0.0)) as usize;
    let c1 = ((cx + reach).ceil().max(0.0) as usize).min(w);
    for row in r0..r1 {
        for col in c0..c1 {
            let dx = col as f64 + 0.5 - cx;
            let dy = row as f64 + 0.5 - cy;
            let d2 = dx * dx + dy * dy;
            if d2 > reach * reach {
                continue;
            }
            let v = amplitude * (-d2 / (2.0 * width_cells * width_cells)).exp() as f32;
            if v > map.get(channel, row, col) {
                map.set(channel, row, col, v);
            }
        }
    }
}

fn image_truth(spec: &SynthSpec, index: usize) -> Result<ImageTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let translation = jitter(spec.pose_sigma, &mut rng)?;
    let mut parts = Vec::with_capacity(spec.parts.len());
    for part in &spec.parts {
        let base = part.anchor + translation + jitter(spec.part_sigma, &mut rng)?;
        let layers = part
            .channels
            .iter()
            .zip(&part.offsets)
            .map(|(&channel, &off)| PlantedBump {
                channel,
                position: base + off,
            })
            .collect();
        parts.push(PartTruth {
            name: part.name.clone(),
            base,
            layers,
        });
    }
    let distractors = spec
        .layers
        .iter()
        .map(|d| {
            (0..spec.distractors)
                .map(|_| PlantedBump {
                    channel: rng.random_range(0..d.channels),
                    position: UnitPosition::new(rng.random::<f64>(), rng.random::<f64>()),
                })
                .collect()
        })
        .collect();
    Ok(ImageTruth {
        image_id: spec.image_id(index),
        translation,
        parts,
        distractors,
    })
}

fn render(spec: &SynthSpec, truth: &ImageTruth) -> Result<Vec<FeatureMap>> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let mut map = FeatureMap::zeros(
                truth.image_id.clone(),
                l as u32,
                d.channels,
                d.height,
                d.width,
                spec.image_width_px,
                spec.image_height_px,
            )?;
            for part in &truth.parts {
                let b = part.layers[l];
                draw_bump(&mut map, b.channel, b.position, 1.0, spec.bump_width);
            }
            for b in &truth.distractors[l] {
                draw_bump(&mut map, b.channel, b.position, spec.distractor_amplitude as f32, spec.bump_width);
            }
            Ok(map)
        })
        .collect()
}

/// Generated maps, `maps[image][layer]`, and the truth they were rendered from.
pub fn generate(spec: &SynthSpec) -> Result<(Vec<Vec<FeatureMap>>, SynthTruth)> {
    spec.validate()?;
    let pairs: Vec<(ImageTruth, Vec<FeatureMap>)> = (0..spec.images)
        .into_par_iter()
        .map(|i| {
            let truth = image_truth(spec, i)?;
            let maps = render(spec, &truth)?;
            Ok((truth, maps))
        })
        .collect::<Result<_>>()?;
    let (images, maps) = pairs.into_iter().unzip();
    Ok((
        maps,
        SynthTruth {
            image_width_px: spec.image_width_px,
            image_height_px: spec.image_height_px,
            layers: spec.layers.clone(),
            images,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartMatch {
    pub part: String,
    pub layer: usize,
    pub channel: usize,
    /// `None` when the channel has no node left for this part.
    pub node: Option<NodeId>,
    /// Errors in grid cells of the layer; infinite when the node is never assigned.
    pub mean_error: f64,
    pub max_error: f64,
    pub assigned_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub parts: Vec<PartMatch>,
}

impl MatchReport {
    pub fn misses(&self) -> usize {
        self.parts.iter().filter(|p| p.node.is_none()).count()
    }

    pub fn worst_mean_error(&self) -> f64 {
        self.parts.iter().map(|p| p.mean_error).fold(0.0, f64::max)
    }
}

struct Cost {
    mean: f64,
    max: f64,
    count: usize,
}

fn pair_cost(results: &[InferenceResult], truth: &SynthTruth, node: NodeId, part: usize, cell: f64) -> Cost {
    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
    for r in results {
        let (Some(img), Some(a)) = (truth.image(&r.image_id), r.assignment(node)) else {
            continue;
        };
        let Some(p) = a.position else { continue };
        let e = p.dist(img.parts[part].layers[node.layer].position) / cell;
        sum += e;
        max = max.max(e);
        count += 1;
    }
    if count == 0 {
        Cost {
            mean: f64::INFINITY,
            max: f64::INFINITY,
            count,
        }
    } else {
        Cost {
            mean: sum / count as f64,
            max,
            count,
        }
    }
}

/// Exhaustive search for the injective part -> node map with the fewest misses, then the
/// smallest total mean error.
fn best_assignment(costs: &[Vec<f64>], nodes: usize) -> Vec<Option<usize>> {
    fn go(
        part: usize,
        costs: &[Vec<f64>],
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        acc: (usize, f64),
        best: &mut ((usize, f64), Vec<Option<usize>>),
    ) {
        if part == costs.len() {
            let better = acc.0 < best.0 .0 || (acc.0 == best.0 .0 && acc.1 < best.0 .1);
            if better {
                *best = (acc, current.clone());
            }
            return;
        }
        for n in 0..used.len() {
            if used[n] || !costs[part][n].is_finite() {
                continue;
            }
            used[n] = true;
            current.push(Some(n));
            go(part + 1, costs, used, current, (acc.0, acc.1 + costs[part][n]), best);
            current.pop();
            used[n] = false;
        }
        current.push(None);
        go(part + 1, costs, used, current, (acc.0 + 1, acc.1), best);
        current.pop();
    }
    let mut best = ((usize::MAX, f64::INFINITY), Vec::new());
    go(0, costs, &mut vec![false; nodes], &mut Vec::new(), (0, 0.0), &mut best);
    best.1
}

/// Matches every planted part, layer by layer, to a distinct node of its channel.
pub fn match_nodes_to_truth(graph: &ExplanatoryGraph, results: &[InferenceResult], truth: &SynthTruth) -> MatchReport {
    let mut report = MatchReport::default();
    let Some(first) = truth.images.first() else {
        return report;
    };
    for (l, layer) in graph.layers.iter().enumerate() {
        let cell = layer.grid_cell();
        let mut by_channel: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, p) in first.parts.iter().enumerate() {
            if let Some(b) = p.layers.get(l) {
                by_channel.entry(b.channel).or_default().push(i);
            }
        }
        for (channel, parts) in by_channel {
            let nodes: Vec<NodeId> = if channel < layer.channels {
                layer.filter_nodes(channel).iter().map(|n| n.id).collect()
            } else {
                Vec::new()
            };
            let cost: Vec<Vec<Cost>> = parts
                .iter()
                .map(|&p| nodes.iter().map(|&n| pair_cost(results, truth, n, p, cell)).collect())
                .collect();
            let means: Vec<Vec<f64>> = cost.iter().map(|row| row.iter().map(|c| c.mean).collect()).collect();
            let pick = best_assignment(&means, nodes.len());
            for (k, &p) in parts.iter().enumerate() {
                let name = first.parts[p].name.clone();
                report.parts.push(match pick[k] {
                    Some(n) => PartMatch {
                        part: name,
                        layer: l,
                        channel,
                        node: Some(nodes[n]),
                        mean_error: cost[k][n].mean,
                        max_error: cost[k][n].max,
                        assigned_images: cost[k][n].count,
                    },
                    None => PartMatch {
                        part: name,
                        layer: l,
                        channel,
                        node: None,
                        mean_error: f64::INFINITY,
                        max_error: f64::INFINITY,
                        assigned_images: 0,
                    },
                });
            }
        }
    }
    report
}
