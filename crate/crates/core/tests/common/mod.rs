#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relcap::config::Config;
use relcap::gcn::GcnConfig;
use relcap::graph::{EdgeAnnotation, GraphEdge, GraphLevel, GraphNode, ImageNodes, NodeLevel, SceneGraph};
use relcap::corpus::SceneRecord;
use relcap::model::{fit_relation_classifier, fit_spatial_mixture, CaptionModel, ModelConfig};
use relcap::synthetic::{caption_predicate, SyntheticSpec};
use relcap::tensor::Tensor;
use relcap::vocab::Vocabulary;

/// Small model settings used by the experiment-style tests.
pub fn desk_config() -> Config {
    Config {
        d_model: 32,
        n_heads: 4,
        batch_size: 8,
        patience: 0,
        min_count: 1,
        ..Config::default()
    }
}

/// Settings for gradient checks and quick smoke runs.
pub fn tiny_config() -> Config {
    Config {
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        d_rel: 3,
        gmm_components: 3,
        relcls_hidden: 8,
        relcls_epochs: 2,
        min_count: 1,
        max_len: 12,
        ..Config::default()
    }
}

/// Fits the pair annotators on `aux` and builds an untrained captioner
/// whose vocabulary comes from `train`.
pub fn build_model(cfg: &Config, train: &[SceneRecord], aux: &[SceneRecord]) -> relcap::Result<CaptionModel> {
    let gmm = fit_spatial_mixture(aux, cfg)?;
    let clf = fit_relation_classifier(aux, cfg)?;
    CaptionModel::new(
        ModelConfig::from_config(cfg)?,
        Vocabulary::build(train, 1),
        gmm,
        clf,
        train[0].feature_dim(),
        cfg.seed,
    )
}

/// Replaces the zero-initialized output projection with small random
/// weights so every parameter influences the output.
pub fn randomize_output(model: &mut CaptionModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with("out_weight") {
            for x in model.params.get_mut(id).data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
}

/// Share of `captions` whose predicate word matches the first reference.
pub fn predicate_accuracy(spec: &SyntheticSpec, captions: &[(String, String)], refs: &[SceneRecord]) -> f64 {
    let hits = captions
        .iter()
        .zip(refs)
        .filter(|((_, c), r)| {
            let got = caption_predicate(spec, c);
            got.is_some() && got == caption_predicate(spec, &r.captions[0])
        })
        .count();
    hits as f64 / refs.len() as f64
}

/// Redraws every parameter uniformly from `[-scale, scale]`.
pub fn randomize_all(model: &mut CaptionModel, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for x in model.params.get_mut(id).data_mut() {
            *x = rng.random_range(-scale..scale);
        }
    }
}

pub fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_annotation(rng: &mut ChaCha8Rng, m: usize, classes: usize) -> EdgeAnnotation {
    let mut scores: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = scores.iter().sum();
    scores.iter_mut().for_each(|s| *s /= total);
    let mut dist: Vec<f64> = (0..classes).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = dist.iter().sum();
    dist.iter_mut().for_each(|s| *s /= total);
    EdgeAnnotation {
        spatial_scores: scores,
        relation: rng.random_range(0..classes),
        relation_distribution: dist,
    }
}

/// Object-level graph over `n` nodes with each pair linked with probability
/// `p`; `annotated` attaches random pair annotations to every edge.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, d: usize, p: f64, annotated: bool) -> SceneGraph {
    let nodes = (0..n)
        .map(|_| GraphNode {
            level: NodeLevel::Object,
            feature: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                let (forward, backward) = if annotated {
                    (Some(random_annotation(rng, 3, 4)), Some(random_annotation(rng, 3, 4)))
                } else {
                    (None, None)
                };
                edges.push(GraphEdge { i, j, forward, backward });
            }
        }
    }
    let images = vec![ImageNodes {
        image_id: "g".into(),
        image_node: None,
        objects: (0..n).collect(),
    }];
    SceneGraph::from_parts(GraphLevel::Object, nodes, edges, images).unwrap()
}

pub fn gcn_config(d_in: usize, d_model: usize, layers: usize, gates: bool) -> GcnConfig {
    GcnConfig {
        d_in,
        d_model,
        layers,
        d_rel: 2,
        spatial_dim: 3,
        relation_classes: 4,
        gates,
        soft_relation: false,
    }
}
