//! Location instability, normalized localization distance and the raw-filter-peak baseline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureMap, UnitPosition};
use crate::graph::{ExplanatoryGraph, NodeId};
use crate::inference::{InferenceResult, Unit};

/// Pixel distance between two normalized positions divided by the image diagonal.
pub fn normalized_distance(predicted: UnitPosition, truth: UnitPosition, width_px: u32, height_px: u32) -> f64 {
    let (w, h) = (width_px as f64, height_px as f64);
    let dx = (predicted.x - truth.x) * w;
    let dy = (predicted.y - truth.y) * h;
    (dx * dx + dy * dy).sqrt() / (w * w + h * h).sqrt()
}

/// Named landmark positions per image id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet(pub BTreeMap<String, BTreeMap<String, UnitPosition>>);

impl LandmarkSet {
    pub fn get(&self, image_id: &str) -> Option<&BTreeMap<String, UnitPosition>> {
        self.0.get(image_id)
    }

    pub fn validate(&self) -> Result<()> {
        for (img, marks) in &self.0 {
            for (name, p) in marks {
                if !(0.0..=1.0).contains(&p.x) || !(0.0..=1.0).contains(&p.y) {
                    return Err(Error::input(format!("landmark {name} of {img} outside [0,1]^2")));
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("landmarks serialize");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set: LandmarkSet = serde_json::from_str(&fs::read_to_string(path)?)?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// One pattern's inferred position on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image_id: String,
    pub position: Option<UnitPosition>,
    pub score: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

/// Observations of `node` across inference results.
pub fn node_observations(results: &[InferenceResult], node: NodeId) -> Vec<Observation> {
    results
        .iter()
        .filter_map(|r| {
            r.assignment(node).map(|a| Observation {
                image_id: r.image_id.clone(),
                position: a.position,
                score: a.score,
                image_width_px: r.image_width_px,
                image_height_px: r.image_height_px,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstabilityReport {
    /// Population standard deviation of the normalized distance to each landmark.
    pub per_landmark: BTreeMap<String, f64>,
    /// Mean of `per_landmark`.
    pub combined: f64,
    pub images: Vec<String>,
}

/// Instability of one pattern over its `top_n` highest-scoring assigned images.
pub fn location_instability(
    observations: &[Observation],
    landmarks: &LandmarkSet,
    top_n: usize,
) -> Result<InstabilityReport> {
    let mut usable: Vec<&Observation> = observations
        .iter()
        .filter(|o| o.position.is_some())
        .collect();
    usable.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.image_id.cmp(&b.image_id)));
    usable.truncate(top_n);
    if usable.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "location instability needs at least 2 assigned images, got {}",
            usable.len()
        )));
    }
    let lookup = |o: &Observation| {
        landmarks
            .get(&o.image_id)
            .ok_or_else(|| Error::input(format!("no landmarks for image {}", o.image_id)))
    };
    let names: Vec<String> = lookup(usable[0])?.keys().cloned().collect();
    if names.is_empty() {
        return Err(Error::input(format!("no landmarks for image {}", usable[0].image_id)));
    }
    let mut distances: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for o in &usable {
        let marks = lookup(o)?;
        if marks.len() != names.len() {
            return Err(Error::input(format!(
                "image {} has a different landmark set",
                o.image_id
            )));
        }
        let p = o.position.expect("filtered");
        for name in &names {
            let lm = marks
                .get(name)
                .ok_or_else(|| Error::input(format!("image {} lacks landmark {name}", o.image_id)))?;
            distances
                .entry(name.clone())
                .or_default()
                .push(normalized_distance(p, *lm, o.image_width_px, o.image_height_px));
        }
    }
    let per_landmark: BTreeMap<String, f64> = distances
        .into_iter()
        .map(|(name, d)| (name, population_std(&d)))
        .collect();
    let combined = per_landmark.values().sum::<f64>() / per_landmark.len() as f64;
    Ok(InstabilityReport {
        per_landmark,
        combined,
        images: usable.iter().map(|o| o.image_id.clone()).collect(),
    })
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Max-response unit of every channel after ReLU; `None` for a silent channel.
pub fn raw_filter_peaks(fmap: &FeatureMap) -> Vec<Option<(Unit, UnitPosition, f64)>> {
    (0..fmap.channels)
        .map(|c| {
            let mut best: Option<(usize, f32)> = None;
            for (i, &v) in fmap.channel(c).iter().enumerate() {
                if v > 0.0 && best.is_none_or(|b| v > b.1) {
                    best = Some((i, v));
                }
            }
            best.map(|(i, v)| {
                let (row, col) = (i / fmap.width, i % fmap.width);
                (Unit { channel: c, row, col }, fmap.unit_position(row, col), v as f64)
            })
        })
        .collect()
}

/// The baseline treats every filter as one pattern located at its peak. Keyed by
/// `(layer_index, channel)`; the observation score is the peak response.
pub fn raw_filter_peak_baseline(maps: &[FeatureMap]) -> BTreeMap<(u32, usize), Vec<Observation>> {
    let mut out: BTreeMap<(u32, usize), Vec<Observation>> = BTreeMap::new();
    for m in maps {
        for (c, peak) in raw_filter_peaks(m).into_iter().enumerate() {
            out.entry((m.layer_index, c)).or_default().push(Observation {
                image_id: m.image_id.clone(),
                position: peak.map(|p| p.1),
                score: peak.map_or(0.0, |p| p.2),
                image_width_px: m.image_width_px,
                image_height_px: m.image_height_px,
            });
        }
    }
    for obs in out.values_mut() {
        obs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    }
    out
}

/// Instability of the graph's patterns and of the raw-filter baseline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstabilitySummary {
    /// Combined instability per scored item.
    pub items: BTreeMap<String, f64>,
    pub mean: f64,
    /// Items without enough assigned images.
    pub skipped: usize,
}

fn summarize(scored: Vec<(String, Result<InstabilityReport>)>) -> Result<InstabilitySummary> {
    let mut out = InstabilitySummary::default();
    for (key, r) in scored {
        match r {
            Ok(rep) => {
                out.items.insert(key, rep.combined);
            }
            Err(Error::UndefinedMetric(_)) => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if out.items.is_empty() {
        return Err(Error::UndefinedMetric("no item has a defined instability".into()));
    }
    out.mean = out.items.values().sum::<f64>() / out.items.len() as f64;
    Ok(out)
}

/// Instability of the `patterns` live nodes with the largest total inference score
/// (all live nodes when `None`), each over its `top_n` best images.
pub fn graph_instability(
    graph: &ExplanatoryGraph,
    results: &[InferenceResult],
    landmarks: &LandmarkSet,
    top_n: usize,
    patterns: Option<usize>,
) -> Result<InstabilitySummary> {
    let mut totals: Vec<(f64, NodeId)> = graph
        .nodes()
        .filter(|n| !n.dormant)
        .map(|n| {
            let total = results
                .iter()
                .filter_map(|r| r.assignment(n.id))
                .map(|a| a.score)
                .sum::<f64>();
            (total, n.id)
        })
        .collect();
    totals.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    totals.truncate(patterns.unwrap_or(usize::MAX));
    let scored = totals
        .into_iter()
        .map(|(_, id)| {
            let obs = node_observations(results, id);
            (id.to_string(), location_instability(&obs, landmarks, top_n))
        })
        .collect();
    summarize(scored)
}

/// Baseline instability per filter, keyed `layer_index:channel`.
pub fn baseline_instability(maps: &[FeatureMap], landmarks: &LandmarkSet, top_n: usize) -> Result<InstabilitySummary> {
    let scored = raw_filter_peak_baseline(maps)
        .into_iter()
        .map(|((l, c), obs)| (format!("{l}:{c}"), location_instability(&obs, landmarks, top_n)))
        .collect();
    summarize(scored)
}
