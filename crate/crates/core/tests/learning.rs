use expgraph::fmap::UnitPosition as P;
use expgraph::learner::{
    closed_form_mu, log_likelihood_gradient, select_edges, UpdateMode, UpperEvidence, WeightedStats,
};
use expgraph::mixture::NodeCompat;
use expgraph::synth::{generate, match_nodes_to_truth, SynthLayer, SynthPart, SynthSpec, SynthTruth};
use expgraph::{
    infer_image, learn_graph, metrics, Error, ExplanatoryGraph, FeatureMap, GraphLayer, InferenceResult, LearnConfig,
    NodeId, PatternNode,
};
use expgraph::inference::NodeAssignment;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn part(name: &str, anchor: (f64, f64), channels: [usize; 2], offsets: [(f64, f64); 2]) -> SynthPart {
    SynthPart {
        name: name.into(),
        anchor: P::new(anchor.0, anchor.1),
        channels: channels.to_vec(),
        offsets: offsets.iter().map(|&(x, y)| P::new(x, y)).collect(),
    }
}

fn spec(seed: u64, images: usize, pose_sigma: f64) -> SynthSpec {
    SynthSpec {
        seed,
        images,
        id_prefix: "img".into(),
        image_width_px: 224,
        image_height_px: 224,
        layers: vec![
            SynthLayer {
                channels: 6,
                height: 14,
                width: 14,
            },
            SynthLayer {
                channels: 6,
                height: 7,
                width: 7,
            },
        ],
        parts: vec![
            part("a", (0.3, 0.35), [0, 0], [(0.0, 0.0), (0.03, -0.02)]),
            part("b", (0.7, 0.55), [0, 1], [(0.0, 0.0), (-0.02, 0.03)]),
            part("c", (0.45, 0.72), [1, 2], [(0.0, 0.0), (0.0, 0.0)]),
        ],
        pose_sigma,
        part_sigma: 0.01,
        bump_width: 1.0,
        distractors: 2,
        distractor_amplitude: 0.2,
    }
}

fn config(seed: u64) -> LearnConfig {
    LearnConfig {
        nodes_per_filter: vec![3],
        seed,
        ..LearnConfig::default()
    }
}

struct Run {
    truth: SynthTruth,
    graph: ExplanatoryGraph,
    results: Vec<InferenceResult>,
}

fn run(spec: &SynthSpec, config: &LearnConfig) -> Run {
    let (per_image, truth) = generate(spec).unwrap();
    let maps: Vec<FeatureMap> = per_image.iter().flatten().cloned().collect();
    let (graph, _) = learn_graph(&maps, config).unwrap();
    let results = per_image.iter().map(|m| infer_image(&graph, m).unwrap()).collect();
    Run {
        truth,
        graph,
        results,
    }
}

#[test]
fn planted_patterns_are_recovered_and_inferred_near_truth() {
    let r = run(&spec(3, 80, 0.07), &config(3));
    let report = match_nodes_to_truth(&r.graph, &r.results, &r.truth);
    assert_eq!(report.misses(), 0, "{report:?}");
    assert!(report.worst_mean_error() <= 1.5, "{report:?}");

    let (mut near, mut total) = (0, 0);
    for m in &report.parts {
        let id = m.node.unwrap();
        let cell = r.graph.layers[id.layer].grid_cell();
        let pi = r.truth.images[0].parts.iter().position(|p| p.name == m.part).unwrap();
        for (res, img) in r.results.iter().zip(&r.truth.images) {
            total += 1;
            let planted = img.parts[pi].layers[m.layer].position;
            if let Some(p) = res.assignment(id).and_then(|a| a.position) {
                if p.dist(planted) <= 1.5 * cell {
                    near += 1;
                }
            }
        }
    }
    assert!(near as f64 >= 0.9 * total as f64, "{near}/{total} inferred within 1.5 cells");
}

#[test]
fn learned_edges_carry_planted_displacements() {
    // large pose jitter makes parent positions informative, so edges get adopted
    let s = spec(5, 120, 0.08);
    let r = run(&s, &config(5));
    let report = match_nodes_to_truth(&r.graph, &r.results, &r.truth);
    let planted = |name: &str, layer: usize| {
        let p = s.parts.iter().find(|p| p.name == name).unwrap();
        p.anchor + p.offsets[layer]
    };
    let cell = 1.0 / 14.0;
    let mut checked = 0;
    for child in report.parts.iter().filter(|m| m.layer == 0) {
        let node = r.graph.node(child.node.unwrap()).unwrap();
        for pid in &node.parents {
            let Some(parent) = report.parts.iter().find(|m| m.layer == 1 && m.node == Some(*pid)) else {
                continue;
            };
            let learned = node.mu - r.graph.node(*pid).unwrap().mu;
            let want = planted(&child.part, 0) - planted(&parent.part, 1);
            assert!(
                learned.dist(want) <= 1.5 * cell,
                "{} -> {}: learned {learned:?}, planted {want:?}",
                node.id,
                pid
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "no edge between matched nodes was learned");
}

#[test]
fn input_order_does_not_matter() {
    let (per_image, _) = generate(&spec(8, 30, 0.07)).unwrap();
    let mut maps: Vec<FeatureMap> = per_image.into_iter().flatten().collect();
    let (a, _) = learn_graph(&maps, &config(1)).unwrap();
    maps.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
    let (b, _) = learn_graph(&maps, &config(1)).unwrap();
    assert_eq!(a.to_text(), b.to_text());
}

#[test]
fn thread_count_does_not_matter() {
    let (per_image, _) = generate(&spec(9, 30, 0.07)).unwrap();
    let maps: Vec<FeatureMap> = per_image.into_iter().flatten().collect();
    let learn = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| learn_graph(&maps, &config(2)).unwrap())
    };
    let (a, ra) = learn(1);
    let (b, rb) = learn(4);
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(ra, rb);
}

#[test]
fn gradient_mode_raises_likelihood() {
    let (per_image, _) = generate(&spec(4, 40, 0.07)).unwrap();
    let maps: Vec<FeatureMap> = per_image.into_iter().flatten().collect();
    let cfg = LearnConfig {
        mode: UpdateMode::Gradient,
        eta: 1e-3,
        iterations: 5,
        ..config(4)
    };
    let (_, report) = learn_graph(&maps, &cfg).unwrap();
    for trace in &report.traces {
        assert!(trace.last().unwrap() > trace.first().unwrap(), "{trace:?}");
    }
}

#[test]
fn small_gradient_step_follows_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let images = rng.random_range(1..=5);
        let mut stats = Vec::new();
        let mut shifts = Vec::new();
        for _ in 0..images {
            let mut s = WeightedStats::default();
            for _ in 0..rng.random_range(1..=8) {
                s.add(P::new(rng.random(), rng.random()), rng.random_range(0.1..1.0));
            }
            stats.push(s);
            let variance = rng.random_range(0.002..0.05);
            shifts.push(NodeCompat {
                mean: P::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)),
                variance,
                log_offset: -(2.0 * std::f64::consts::PI * variance).ln(),
            });
        }
        let mu = P::new(rng.random(), rng.random());
        let f = |m: P| expgraph::learner::expected_log_likelihood(m, &stats, &shifts);
        let h = 1e-6;
        let fd = P::new(
            (f(mu + P::new(h, 0.0)) - f(mu - P::new(h, 0.0))) / (2.0 * h),
            (f(mu + P::new(0.0, h)) - f(mu - P::new(0.0, h))) / (2.0 * h),
        );
        let step = log_likelihood_gradient(mu, &stats, &shifts) * 1e-6;
        let cos = step.dot(fd) / (step.norm_sq().sqrt() * fd.norm_sq().sqrt());
        assert!(cos > 0.999, "cosine {cos}");
        // the closed form is the fixed point the gradient steps toward
        let target = closed_form_mu(&stats, &shifts).unwrap();
        let g = log_likelihood_gradient(target, &stats, &shifts);
        assert!(g.norm_sq().sqrt() < 1e-6 * stats.iter().map(|s| s.mass).sum::<f64>() / 0.002);
    }
}

fn upper_layer(candidates: usize) -> GraphLayer {
    GraphLayer {
        layer_index: 1,
        channels: 1,
        height: 7,
        width: 7,
        nodes_per_filter: candidates,
        channel_max: vec![1.0],
        nodes: (0..candidates)
            .map(|s| PatternNode {
                id: NodeId::new(1, 0, s),
                mu: P::new(0.5, 0.5),
                sigma2: 0.01,
                parents: vec![],
                dormant: false,
            })
            .collect(),
    }
}

fn child() -> PatternNode {
    PatternNode {
        id: NodeId::new(0, 0, 0),
        mu: P::new(0.5, 0.5),
        sigma2: 0.02,
        parents: vec![],
        dormant: false,
    }
}

#[test]
fn consistent_candidate_is_picked_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let upper = upper_layer(3);
    let mut stats = Vec::new();
    let mut assignments = Vec::new();
    for _ in 0..20 {
        let center = P::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let mut s = WeightedStats::default();
        s.add(center, 1.0);
        stats.push(s);
        let positions = [
            P::new(rng.random(), rng.random()),
            P::new(rng.random(), rng.random()),
            center + P::new(0.1, -0.05),
        ];
        assignments.push(
            positions
                .iter()
                .zip(&upper.nodes)
                .map(|(p, n)| NodeAssignment {
                    node: n.id,
                    unit: None,
                    position: Some(*p),
                    score: 1.0,
                })
                .collect::<Vec<_>>(),
        );
    }
    let cfg = LearnConfig {
        max_parents: 1,
        candidate_pool: None,
        ..LearnConfig::default()
    };
    let ev = UpperEvidence {
        layer: &upper,
        assignments: &assignments,
    };
    let sel = select_edges(&child(), &stats, ev, &cfg);
    assert_eq!(sel.parents, vec![NodeId::new(1, 0, 2)]);
}

#[test]
fn small_pool_is_selected_entirely() {
    // each candidate tracks the node exactly but fires on a different third of the images,
    // so every addition covers images that were left to the fallback model
    let upper = upper_layer(3);
    let mut stats = Vec::new();
    let mut assignments = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for img in 0..12 {
        let center = P::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8));
        let mut s = WeightedStats::default();
        s.add(center, 1.0);
        stats.push(s);
        assignments.push(
            upper
                .nodes
                .iter()
                .map(|n| {
                    if img % 3 == n.id.slot {
                        NodeAssignment {
                            node: n.id,
                            unit: None,
                            position: Some(center),
                            score: 1.0,
                        }
                    } else {
                        NodeAssignment::unassigned(n.id)
                    }
                })
                .collect::<Vec<_>>(),
        );
    }
    let cfg = LearnConfig {
        max_parents: 5,
        candidate_pool: None,
        ..LearnConfig::default()
    };
    let ev = UpperEvidence {
        layer: &upper,
        assignments: &assignments,
    };
    let sel = select_edges(&child(), &stats, ev, &cfg);
    let mut got = sel.parents.clone();
    got.sort();
    assert_eq!(got, upper.nodes.iter().map(|n| n.id).collect::<Vec<_>>());
}

#[test]
fn missing_layer_is_reported() {
    let (per_image, _) = generate(&spec(1, 3, 0.07)).unwrap();
    let mut maps: Vec<FeatureMap> = per_image.into_iter().flatten().collect();
    let dropped = maps.remove(3);
    let err = learn_graph(&maps, &config(0)).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err:?}");
    let text = err.to_string();
    assert!(text.contains(&dropped.image_id) && text.contains(&dropped.layer_index.to_string()), "{text}");
}

#[test]
fn single_layer_learning() {
    let (per_image, truth) = generate(&spec(6, 40, 0.07)).unwrap();
    let maps: Vec<FeatureMap> = per_image.iter().map(|m| m[0].clone()).collect();
    let (graph, report) = learn_graph(&maps, &config(6)).unwrap();
    assert_eq!(graph.layers.len(), 1);
    assert!(graph.nodes().all(|n| n.parents.is_empty()));
    assert_eq!(report.traces.len(), 1);
    let results: Vec<InferenceResult> = per_image.iter().map(|m| infer_image(&graph, &m[..1]).unwrap()).collect();
    let landmarks = truth.landmarks();
    let summary = metrics::graph_instability(&graph, &results, &landmarks, 20, None).unwrap();
    assert!(summary.mean.is_finite());
}
