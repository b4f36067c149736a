//! And-Or graphs for few-shot semantic part localization on top of a learned graph.
//!
//! A semantic part chooses among templates; each template is the AND of its latent
//! patterns, each of which votes for the template center through a stored displacement.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::UnitPosition;
use crate::graph::NodeId;
use crate::inference::InferenceResult;
use crate::metrics::{normalized_distance, LandmarkSet};
use crate::mixture::log_gauss2d;

pub const AOG_SCHEMA: &str = "expgraph/aog";
pub const AOG_VERSION: u32 = 1;

/// Standard deviation of the retrieval Gaussian, in normalized width units.
pub const SIGMA_RETRIEVE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartAnnotation {
    pub image_id: String,
    pub part: String,
    pub template: usize,
    pub x: f64,
    pub y: f64,
}

impl PartAnnotation {
    pub fn position(&self) -> UnitPosition {
        UnitPosition::new(self.x, self.y)
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<PartAnnotation>> {
    let list: Vec<PartAnnotation> = serde_json::from_str(&fs::read_to_string(path)?)?;
    for a in &list {
        if !a.position().is_finite() {
            return Err(Error::input(format!("annotation of {} on {} is not finite", a.part, a.image_id)));
        }
    }
    Ok(list)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentChild {
    pub node: NodeId,
    /// Template center minus the pattern's position on the annotated image.
    pub displacement: UnitPosition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub index: usize,
    pub source_image: String,
    pub children: Vec<LatentChild>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AndOrGraph {
    pub part: String,
    pub k: usize,
    pub sigma_retrieve: f64,
    pub templates: Vec<PartTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AogSet {
    pub schema: String,
    pub version: u32,
    pub parts: Vec<AndOrGraph>,
}

impl AogSet {
    pub fn new(parts: Vec<AndOrGraph>) -> Self {
        AogSet {
            schema: AOG_SCHEMA.into(),
            version: AOG_VERSION,
            parts,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("aog serializes");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let set: AogSet = serde_json::from_str(text)?;
        if set.schema != AOG_SCHEMA || set.version != AOG_VERSION {
            return Err(Error::input(format!(
                "unsupported aog schema {} version {}",
                set.schema, set.version
            )));
        }
        for aog in &set.parts {
            for t in &aog.templates {
                if t.children.iter().any(|c| !c.displacement.is_finite()) {
                    return Err(Error::input(format!("template {} of {} has a non-finite displacement", t.index, aog.part)));
                }
            }
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Keeps the `k` patterns of the annotated image scoring highest under
/// `S * N(p | p*, sigma^2)`, ties broken by node id.
pub fn build_template(
    annotation: &PartAnnotation,
    result: &InferenceResult,
    k: usize,
    sigma_retrieve: f64,
) -> Result<PartTemplate> {
    if annotation.image_id != result.image_id {
        return Err(Error::input(format!(
            "annotation on {} paired with inference of {}",
            annotation.image_id, result.image_id
        )));
    }
    if !(sigma_retrieve.is_finite() && sigma_retrieve > 0.0) {
        return Err(Error::domain(format!("retrieval sigma must be positive, got {sigma_retrieve}")));
    }
    let target = annotation.position();
    let variance = sigma_retrieve * sigma_retrieve;
    let mut scored: Vec<(f64, NodeId, UnitPosition)> = result
        .assignments()
        .filter_map(|a| a.position.map(|p| (a.score * log_gauss2d(p, target, variance).exp(), a.node, p)))
        .collect();
    if scored.is_empty() {
        warn!("no assigned patterns on {}; template {} of {} is empty", result.image_id, annotation.template, annotation.part);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(PartTemplate {
        index: annotation.template,
        source_image: annotation.image_id.clone(),
        children: scored
            .into_iter()
            .map(|(_, node, p)| LatentChild {
                node,
                displacement: target - p,
            })
            .collect(),
    })
}

/// One template per annotation of `part`, ordered by template index.
pub fn build_aog(
    part: &str,
    annotations: &[PartAnnotation],
    results: &BTreeMap<String, InferenceResult>,
    k: usize,
) -> Result<AndOrGraph> {
    let mut mine: Vec<&PartAnnotation> = annotations.iter().filter(|a| a.part == part).collect();
    if mine.is_empty() {
        return Err(Error::input(format!("no annotations for part {part}")));
    }
    mine.sort_by_key(|a| a.template);
    for w in mine.windows(2) {
        if w[0].template == w[1].template {
            return Err(Error::input(format!("part {part} has two annotations for template {}", w[0].template)));
        }
    }
    let templates = mine
        .into_iter()
        .map(|a| {
            let r = results
                .get(&a.image_id)
                .ok_or_else(|| Error::input(format!("no inference result for annotated image {}", a.image_id)))?;
            build_template(a, r, k, SIGMA_RETRIEVE)
        })
        .collect::<Result<_>>()?;
    Ok(AndOrGraph {
        part: part.into(),
        k,
        sigma_retrieve: SIGMA_RETRIEVE,
        templates,
    })
}

/// Builds an AOG for every part named in the annotations.
pub fn build_aogs(
    annotations: &[PartAnnotation],
    results: &BTreeMap<String, InferenceResult>,
    k: usize,
) -> Result<AogSet> {
    let mut parts: Vec<&str> = annotations.iter().map(|a| a.part.as_str()).collect();
    parts.sort_unstable();
    parts.dedup();
    let aogs = parts
        .into_iter()
        .map(|p| build_aog(p, annotations, results, k))
        .collect::<Result<_>>()?;
    Ok(AogSet::new(aogs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub score: f64,
    pub position: Option<UnitPosition>,
}

/// Template score (sum over children) and position (mean of child votes over assigned children).
pub fn score_template(template: &PartTemplate, result: &InferenceResult) -> TemplateScore {
    let mut score = 0.0;
    let mut sum = UnitPosition::ORIGIN;
    let mut n = 0usize;
    for child in &template.children {
        let Some(a) = result.assignment(child.node) else { continue };
        let Some(p) = a.position else { continue };
        score += a.score;
        sum = sum + p + child.displacement;
        n += 1;
    }
    TemplateScore {
        score,
        position: (n > 0).then(|| sum * (1.0 / n as f64)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub image_id: String,
    pub part: String,
    /// `None` marks a localization failure.
    pub position: Option<UnitPosition>,
    pub template: Option<usize>,
    pub score: f64,
    pub image_width_px: u32,
    pub image_height_px: u32,
}

pub fn localize(aog: &AndOrGraph, result: &InferenceResult) -> Localization {
    let mut best: Option<(usize, TemplateScore)> = None;
    for t in &aog.templates {
        let s = score_template(t, result);
        if s.position.is_none() {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| s.score > b.score) {
            best = Some((t.index, s));
        }
    }
    let (template, score, position) = match best {
        Some((i, s)) => (Some(i), s.score, s.position),
        None => (None, 0.0, None),
    };
    Localization {
        image_id: result.image_id.clone(),
        part: aog.part.clone(),
        position,
        template,
        score,
        image_width_px: result.image_width_px,
        image_height_px: result.image_height_px,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationEval {
    pub mean: f64,
    pub median: f64,
    pub failures: usize,
    /// Normalized distance per `(image_id, part)`.
    pub distances: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Mean normalized distance to the landmarks; a failed localization counts as distance 1.
pub fn evaluate_localization(predictions: &[Localization], truth: &LandmarkSet) -> Result<LocalizationEval> {
    if predictions.is_empty() {
        return Err(Error::UndefinedMetric("no predictions to evaluate".into()));
    }
    let mut distances: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut all = Vec::with_capacity(predictions.len());
    let mut failures = 0;
    for p in predictions {
        let t = truth
            .get(&p.image_id)
            .and_then(|m| m.get(&p.part))
            .ok_or_else(|| Error::input(format!("no landmark {} for image {}", p.part, p.image_id)))?;
        let d = match p.position {
            Some(pos) => normalized_distance(pos, *t, p.image_width_px, p.image_height_px),
            None => {
                failures += 1;
                1.0
            }
        };
        distances.entry(p.image_id.clone()).or_default().insert(p.part.clone(), d);
        all.push(d);
    }
    Ok(LocalizationEval {
        mean: all.iter().sum::<f64>() / all.len() as f64,
        median: crate::metrics::median(&all).expect("nonempty"),
        failures,
        distances,
    })
}
