use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use expgraph::aog::{self, AogSet, Localization, PartAnnotation};
use expgraph::metrics::{self, InstabilitySummary, LandmarkSet};
use expgraph::synth::{self, SynthSpec};
use expgraph::viz::{self, Patch};
use expgraph::{infer_image, learn_graph, ExplanatoryGraph, FeatureMap, InferenceResult, LearnConfig, NodeId};

use crate::config::write_manifest;
use crate::error::{at, CliError};

const FMAP_EXT: &str = "fmap";
const RESULT_SUFFIX: &str = ".infer.json";

/// Files given directly, plus the files in given directories whose name ends with `suffix`.
fn expand(paths: &[PathBuf], suffix: &str) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.to_string_lossy().ends_with(suffix))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.exists() {
            out.push(p.clone());
        } else {
            return Err(CliError::Io(format!("{}: no such file or directory", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("no input files ending in {suffix}")));
    }
    Ok(out)
}

fn load_fmaps(paths: &[PathBuf]) -> Result<(Vec<PathBuf>, Vec<FeatureMap>), CliError> {
    let files = expand(paths, &format!(".{FMAP_EXT}"))?;
    let maps = files
        .par_iter()
        .map(|f| FeatureMap::load(f).map_err(at(f)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((files, maps))
}

fn load_results(paths: &[PathBuf]) -> Result<(Vec<PathBuf>, Vec<InferenceResult>), CliError> {
    let files = expand(paths, RESULT_SUFFIX)?;
    let mut results = files
        .par_iter()
        .map(|f| InferenceResult::load(f).map_err(at(f)))
        .collect::<Result<Vec<_>, _>>()?;
    results.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    for w in results.windows(2) {
        if w[0].image_id == w[1].image_id {
            return Err(CliError::Validation(format!("two inference results for image {}", w[0].image_id)));
        }
    }
    Ok((files, results))
}

fn load_graph(path: &Path) -> Result<ExplanatoryGraph, CliError> {
    ExplanatoryGraph::load(path).map_err(at(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn manifest_for_file(out: &Path) -> PathBuf {
    sidecar(out, ".manifest.toml")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSettings {
    pub spec: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn synth(s: SynthSettings) -> Result<(), CliError> {
    let text = fs::read_to_string(&s.spec).map_err(|e| CliError::io(&s.spec, e))?;
    let mut spec: SynthSpec =
        toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {}", s.spec.display(), e.message())))?;
    if let Some(seed) = s.seed {
        spec.seed = seed;
    }
    let (maps, truth) = synth::generate(&spec)?;
    create_dir(&s.out)?;
    let mut outputs = Vec::new();
    for m in maps.iter().flatten() {
        let path = s.out.join(format!("{}.l{}.{FMAP_EXT}", m.image_id, m.layer_index));
        m.save(&path).map_err(at(&path))?;
        outputs.push(path);
    }
    let truth_path = s.out.join("truth.json");
    write_text(&truth_path, &truth.to_text())?;
    let lm_path = s.out.join("landmarks.json");
    write_text(&lm_path, &truth.landmarks().to_text())?;
    outputs.extend([truth_path, lm_path]);
    write_manifest(&s.out.join("manifest.toml"), "synth", &s, &[s.spec.clone()], &outputs)?;
    log::info!("wrote {} feature maps to {}", outputs.len() - 2, s.out.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LearnSettings {
    pub fmaps: Vec<PathBuf>,
    pub out: PathBuf,
    #[serde(flatten)]
    pub learn: LearnConfig,
}

pub fn learn(s: LearnSettings) -> Result<(), CliError> {
    let (files, maps) = load_fmaps(&s.fmaps)?;
    let (graph, report) = learn_graph(&maps, &s.learn)?;
    write_text(&s.out, &graph.to_text())?;
    let report_path = sidecar(&s.out, ".report.json");
    write_json(&report_path, &report)?;
    for (l, trace) in report.traces.iter().enumerate() {
        log::info!(
            "layer {l}: log-likelihood {:.6} -> {:.6}, {} dormant",
            trace.first().copied().unwrap_or(f64::NAN),
            trace.last().copied().unwrap_or(f64::NAN),
            report.dormant[l]
        );
    }
    write_manifest(&manifest_for_file(&s.out), "learn", &s, &files, &[s.out.clone(), report_path])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSettings {
    pub graph: PathBuf,
    pub fmaps: Vec<PathBuf>,
    pub out: PathBuf,
}

pub fn infer(s: InferSettings) -> Result<(), CliError> {
    let graph = load_graph(&s.graph)?;
    let (files, maps) = load_fmaps(&s.fmaps)?;
    let mut by_image: BTreeMap<&str, Vec<FeatureMap>> = BTreeMap::new();
    for m in &maps {
        by_image.entry(m.image_id.as_str()).or_default().push(m.clone());
    }
    let results = by_image
        .par_iter()
        .map(|(_, fm)| infer_image(&graph, fm))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&s.out)?;
    let mut outputs = Vec::with_capacity(results.len());
    for r in &results {
        let path = s.out.join(format!("{}{RESULT_SUFFIX}", r.image_id));
        write_text(&path, &r.to_text())?;
        outputs.push(path);
    }
    let mut inputs = vec![s.graph.clone()];
    inputs.extend(files);
    write_manifest(&s.out.join("manifest.toml"), "infer", &s, &inputs, &outputs)
}

fn default_top_n() -> usize {
    20
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstabilitySettings {
    pub graph: PathBuf,
    pub results: Vec<PathBuf>,
    pub landmarks: PathBuf,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
    pub patterns: Option<usize>,
    #[serde(default)]
    pub baseline_fmaps: Vec<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct InstabilityOutput {
    learned: InstabilitySummary,
    baseline: Option<InstabilitySummary>,
}

pub fn instability(s: InstabilitySettings) -> Result<(), CliError> {
    let graph = load_graph(&s.graph)?;
    let (mut inputs, results) = load_results(&s.results)?;
    let landmarks = LandmarkSet::load(&s.landmarks).map_err(at(&s.landmarks))?;
    landmarks.validate()?;
    let learned = metrics::graph_instability(&graph, &results, &landmarks, s.top_n, s.patterns)?;
    let baseline = if s.baseline_fmaps.is_empty() {
        None
    } else {
        let (files, maps) = load_fmaps(&s.baseline_fmaps)?;
        inputs.extend(files);
        Some(metrics::baseline_instability(&maps, &landmarks, s.top_n)?)
    };
    println!("learned mean instability {:.6} over {} patterns", learned.mean, learned.items.len());
    if let Some(b) = &baseline {
        println!("raw filter mean instability {:.6} over {} filters", b.mean, b.items.len());
    }
    write_json(&s.out, &InstabilityOutput { learned, baseline })?;
    inputs.insert(0, s.graph.clone());
    inputs.push(s.landmarks.clone());
    write_manifest(&manifest_for_file(&s.out), "instability", &s, &inputs, &[s.out.clone()])
}

fn default_heat_fraction() -> f64 {
    0.5
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatmapSettings {
    pub graph: PathBuf,
    pub result: PathBuf,
    pub layer: usize,
    #[serde(default = "default_heat_fraction")]
    pub fraction: f64,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub out: PathBuf,
}

pub fn heatmap(s: HeatmapSettings) -> Result<(), CliError> {
    let graph = load_graph(&s.graph)?;
    let result = InferenceResult::load(&s.result).map_err(at(&s.result))?;
    let layer = graph
        .layers
        .get(s.layer)
        .ok_or_else(|| CliError::Usage(format!("graph has {} layers, no layer {}", graph.layers.len(), s.layer)))?;
    let assigned = result
        .layers
        .get(s.layer)
        .ok_or_else(|| CliError::Validation(format!("{} has no layer {}", s.result.display(), s.layer)))?;
    let width = s.width.unwrap_or(result.image_width_px as usize);
    let height = s.height.unwrap_or(result.image_height_px as usize);
    let img = viz::render_heatmap(layer, assigned, s.fraction, width, height)?;
    if let Some(dir) = s.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&s.out, img.to_pgm()).map_err(|e| CliError::io(&s.out, e))?;
    write_manifest(
        &manifest_for_file(&s.out),
        "heatmap",
        &s,
        &[s.graph.clone(), s.result.clone()],
        &[s.out.clone()],
    )
}

fn default_patch_fraction() -> f64 {
    0.3
}

fn default_patch() -> u32 {
    70
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchesSettings {
    pub graph: PathBuf,
    pub results: Vec<PathBuf>,
    #[serde(default)]
    pub nodes: Vec<String>,
    #[serde(default = "default_patch_fraction")]
    pub fraction: f64,
    #[serde(default = "default_patch")]
    pub patch: u32,
    pub out: PathBuf,
}

pub fn patches(s: PatchesSettings) -> Result<(), CliError> {
    let graph = load_graph(&s.graph)?;
    let (mut inputs, results) = load_results(&s.results)?;
    let nodes: Vec<NodeId> = if s.nodes.is_empty() {
        graph.nodes().filter(|n| !n.dormant).map(|n| n.id).collect()
    } else {
        s.nodes
            .iter()
            .map(|t| {
                let id: NodeId = t.parse().map_err(|_| CliError::Usage(format!("bad node id {t}")))?;
                graph
                    .node(id)
                    .map(|n| n.id)
                    .ok_or_else(|| CliError::Validation(format!("graph has no node {id}")))
            })
            .collect::<Result<_, _>>()?
    };
    let table = nodes
        .par_iter()
        .map(|&id| {
            let obs = metrics::node_observations(&results, id);
            let p = viz::top_patches(&obs, s.fraction, s.patch)?;
            Ok((id.to_string(), p))
        })
        .collect::<Result<BTreeMap<String, Vec<Patch>>, expgraph::Error>>()?;
    write_json(&s.out, &table)?;
    inputs.insert(0, s.graph.clone());
    write_manifest(&manifest_for_file(&s.out), "patches", &s, &inputs, &[s.out.clone()])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AogBuildSettings {
    pub results: Vec<PathBuf>,
    pub annotations: PathBuf,
    pub k: usize,
    pub out: PathBuf,
}

pub fn aog_build(s: AogBuildSettings) -> Result<(), CliError> {
    let (mut inputs, results) = load_results(&s.results)?;
    let annotations: Vec<PartAnnotation> = aog::load_annotations(&s.annotations).map_err(at(&s.annotations))?;
    let by_id: BTreeMap<String, InferenceResult> = results.into_iter().map(|r| (r.image_id.clone(), r)).collect();
    let set = aog::build_aogs(&annotations, &by_id, s.k)?;
    write_text(&s.out, &set.to_text())?;
    inputs.push(s.annotations.clone());
    write_manifest(&manifest_for_file(&s.out), "aog-build", &s, &inputs, &[s.out.clone()])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AogLocalizeSettings {
    pub aog: PathBuf,
    pub results: Vec<PathBuf>,
    pub out: PathBuf,
}

pub fn aog_localize(s: AogLocalizeSettings) -> Result<(), CliError> {
    let set = AogSet::load(&s.aog).map_err(at(&s.aog))?;
    let (mut inputs, results) = load_results(&s.results)?;
    let preds: Vec<Localization> = results
        .par_iter()
        .flat_map_iter(|r| set.parts.iter().map(move |a| aog::localize(a, r)))
        .collect();
    let failures = preds.iter().filter(|p| p.position.is_none()).count();
    if failures > 0 {
        log::warn!("{failures} of {} localizations failed", preds.len());
    }
    write_json(&s.out, &preds)?;
    inputs.insert(0, s.aog.clone());
    write_manifest(&manifest_for_file(&s.out), "aog-localize", &s, &inputs, &[s.out.clone()])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AogEvalSettings {
    pub predictions: PathBuf,
    pub landmarks: PathBuf,
    pub out: PathBuf,
}

pub fn aog_eval(s: AogEvalSettings) -> Result<(), CliError> {
    let text = fs::read_to_string(&s.predictions).map_err(|e| CliError::io(&s.predictions, e))?;
    let preds: Vec<Localization> =
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", s.predictions.display())))?;
    let landmarks = LandmarkSet::load(&s.landmarks).map_err(at(&s.landmarks))?;
    let eval = aog::evaluate_localization(&preds, &landmarks)?;
    println!(
        "mean normalized distance {:.6}, median {:.6}, {} failures over {} predictions",
        eval.mean,
        eval.median,
        eval.failures,
        preds.len()
    );
    write_json(&s.out, &eval)?;
    write_manifest(
        &manifest_for_file(&s.out),
        "aog-eval",
        &s,
        &[s.predictions.clone(), s.landmarks.clone()],
        &[s.out.clone()],
    )
}
