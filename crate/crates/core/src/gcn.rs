//! Edge-gated graph convolution: `H' = relu((Â ⊙ S) H W)` where `S[i,j]` is a
//! sigmoid gate over the annotation of pair `(i, j)` (1 where none exists).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GcnConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub layers: usize,
    /// Width of the learned relation-class embedding.
    pub d_rel: usize,
    /// Mixture components in each spatial-score vector.
    pub spatial_dim: usize,
    /// Relation classes including non-relation.
    pub relation_classes: usize,
    /// When false every gate is fixed at 1 (plain renormalized propagation).
    pub gates: bool,
    /// Embed the full relation distribution instead of the argmax class.
    pub soft_relation: bool,
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.layers == 0 {
            return Err(Error::validation("gcn dims and layer count must be positive"));
        }
        if self.relation_classes == 0 {
            return Err(Error::validation("gcn needs at least one relation class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct GcnEncoder {
    pub config: GcnConfig,
    pub layers: Vec<GcnLayer>,
    pub relation_embedding: ParamId,
}

/// Refined node features plus the decoder-visible rows of each image.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedScene {
    pub hidden: Tensor,
    pub image_rows: Vec<(String, Vec<usize>)>,
}

impl EncodedScene {
    pub fn rows_for(&self, image_id: &str) -> Result<&[usize]> {
        self.image_rows
            .iter()
            .find(|(id, _)| id == image_id)
            .map(|(_, r)| r.as_slice())
            .ok_or_else(|| Error::validation(format!("image {image_id} is not in the encoded scene")))
    }
}

/// The rows of `image_id`'s nodes, in detection order.
pub fn encode_for_decoder(scene: &EncodedScene, image_id: &str) -> Result<Tensor> {
    let rows = scene.rows_for(image_id)?;
    let d = scene.hidden.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(scene.hidden.row(r));
    }
    Tensor::new(vec![rows.len(), d], data)
}

impl GcnEncoder {
    /// Registers parameters under `prefix` in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: GcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let gate_in = config.spatial_dim + config.d_rel;
        let relation_embedding = store.add_uniform(
            format!("{prefix}.relation_embedding"),
            &[config.relation_classes, config.d_rel],
            1.0,
            rng,
        );
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let d_in = if l == 0 { config.d_in } else { config.d_model };
            layers.push(GcnLayer {
                weight: store.add_uniform(
                    format!("{prefix}.layer{l}.weight"),
                    &[d_in, config.d_model],
                    1.0 / (d_in as f64).sqrt(),
                    rng,
                ),
                gate_weight: store.add_uniform(
                    format!("{prefix}.layer{l}.gate_weight"),
                    &[gate_in.max(1), 1],
                    1.0 / (gate_in.max(1) as f64).sqrt(),
                    rng,
                ),
                gate_bias: store.add_zeros(format!("{prefix}.layer{l}.gate_bias"), &[1]),
            });
        }
        Ok(Self {
            config,
            layers,
            relation_embedding,
        })
    }

    /// `[P, spatial_dim + d_rel]` annotation rows of the graph's annotated
    /// ordered pairs, and their flat positions in an `n x n` matrix.
    fn annotation_rows(&self, tape: &mut Tape<'_>, graph: &SceneGraph) -> Result<Option<(Var, Vec<usize>)>> {
        let pairs = graph.annotated_pairs();
        if pairs.is_empty() {
            return Ok(None);
        }
        let n = graph.num_nodes();
        let m = self.config.spatial_dim;
        let classes = self.config.relation_classes;
        let mut scores = Vec::with_capacity(pairs.len() * m);
        let mut ids = Vec::with_capacity(pairs.len());
        let mut dists = Vec::with_capacity(pairs.len() * classes);
        let mut positions = Vec::with_capacity(pairs.len());
        for (i, j, a) in &pairs {
            if a.spatial_scores.len() != m {
                return Err(Error::shape("gcn spatial scores", &[m], &[a.spatial_scores.len()]));
            }
            if a.relation >= classes || a.relation_distribution.len() != classes {
                return Err(Error::validation(format!(
                    "relation annotation does not fit {classes} classes"
                )));
            }
            scores.extend_from_slice(&a.spatial_scores);
            ids.push(a.relation);
            dists.extend_from_slice(&a.relation_distribution);
            positions.push(i * n + j);
        }
        let table = tape.param(self.relation_embedding);
        let rel = if self.config.soft_relation {
            let d = tape.constant(Tensor::new(vec![pairs.len(), classes], dists)?);
            tape.matmul(d, table)?
        } else {
            tape.embedding(table, &ids)?
        };
        let rows = if m == 0 {
            rel
        } else {
            let s = tape.constant(Tensor::new(vec![pairs.len(), m], scores)?);
            tape.concat(&[s, rel], 1)?
        };
        Ok(Some((rows, positions)))
    }

    /// Final node features `[n, d_model]` for `graph` with renormalized
    /// adjacency `adj`.
    pub fn forward(&self, tape: &mut Tape<'_>, graph: &SceneGraph, adj: &Tensor) -> Result<Var> {
        let n = graph.num_nodes();
        if adj.shape() != [n, n] {
            return Err(Error::shape("gcn adjacency", adj.shape(), &[n, n]));
        }
        if graph.feature_dim() != self.config.d_in {
            return Err(Error::shape("gcn input", &[n, graph.feature_dim()], &[n, self.config.d_in]));
        }
        let annotations = if self.config.gates {
            self.annotation_rows(tape, graph)?
        } else {
            None
        };
        let adj_entries = annotations.as_ref().map(|(_, pos)| {
            let vals: Vec<f64> = pos.iter().map(|&p| adj.data()[p]).collect();
            Tensor::new(vec![pos.len(), 1], vals).expect("column")
        });
        let adj_const = tape.constant(adj.clone());
        let mut h = tape.constant(graph.feature_matrix());
        for layer in &self.layers {
            let prop = match (&annotations, &adj_entries) {
                (Some((rows, positions)), Some(entries)) => {
                    let gw = tape.param(layer.gate_weight);
                    let gb = tape.param(layer.gate_bias);
                    let logits = tape.matmul(*rows, gw)?;
                    let logits = tape.add_row(logits, gb)?;
                    let gates = tape.sigmoid(logits);
                    let entries = tape.constant(entries.clone());
                    let gated = tape.mul(gates, entries)?;
                    tape.scatter(gated, adj, positions)?
                }
                _ => adj_const,
            };
            let w = tape.param(layer.weight);
            let mixed = tape.matmul(prop, h)?;
            let z = tape.matmul(mixed, w)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Tape-free encoding of a whole graph.
    pub fn encode(&self, store: &ParamStore, graph: &SceneGraph) -> Result<EncodedScene> {
        let adj = graph.adjacency().normalized;
        let mut tape = Tape::new(store);
        let h = self.forward(&mut tape, graph, &adj)?;
        let image_rows = graph
            .images
            .iter()
            .map(|im| Ok((im.image_id.clone(), graph.decoder_rows(&im.image_id)?)))
            .collect::<Result<_>>()?;
        Ok(EncodedScene {
            hidden: tape.tensor(h),
            image_rows,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{EdgeAnnotation, GraphEdge, GraphLevel, GraphNode, ImageNodes, NodeLevel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(d_in: usize, d_model: usize, layers: usize, gates: bool) -> GcnConfig {
        GcnConfig {
            d_in,
            d_model,
            layers,
            d_rel: 3,
            spatial_dim: 2,
            relation_classes: 4,
            gates,
            soft_relation: false,
        }
    }

    fn annotation(k: usize) -> EdgeAnnotation {
        EdgeAnnotation {
            spatial_scores: vec![0.25 * k as f64, 1.0 - 0.25 * k as f64],
            relation: k % 4,
            relation_distribution: vec![0.1, 0.2, 0.3, 0.4],
        }
    }

    /// Graph built by hand: every edge annotated both ways.
    fn graph(features: Vec<Vec<f64>>, edges: &[(usize, usize)]) -> SceneGraph {
        let n = features.len();
        let nodes = features
            .into_iter()
            .map(|feature| GraphNode {
                level: NodeLevel::Object,
                feature,
            })
            .collect();
        let edges = edges
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| GraphEdge {
                i,
                j,
                forward: Some(annotation(k)),
                backward: Some(annotation(k + 1)),
            })
            .collect();
        let images = vec![ImageNodes {
            image_id: "x".into(),
            image_node: None,
            objects: (0..n).collect(),
        }];
        SceneGraph::from_parts(GraphLevel::Object, nodes, edges, images).unwrap()
    }

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|c| row.iter().zip(b).map(|(x, br)| x * br[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn set(store: &mut ParamStore, id: ParamId, rows: &[Vec<f64>]) {
        let t = Tensor::from_rows(rows).unwrap();
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }

    #[test]
    fn single_node_identity_weight_is_relu() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GcnEncoder::new(&mut store, "g", config(2, 2, 1, true), &mut rng).unwrap();
        set(&mut store, enc.layers[0].weight, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let g = graph(vec![vec![-1.5, 2.0]], &[]);
        let out = enc.encode(&store, &g).unwrap();
        assert_eq!(out.hidden.data(), &[0.0, 2.0]);
    }

    #[test]
    fn ungated_matches_hand_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GcnEncoder::new(&mut store, "g", config(2, 2, 1, false), &mut rng).unwrap();
        set(&mut store, enc.layers[0].weight, &[vec![1.0, -2.0], vec![0.5, 1.0]]);
        let g = graph(vec![vec![1.0, 2.0], vec![3.0, -1.0]], &[(0, 1)]);
        // Â = 0.5 everywhere; ÂH = [[2, .5],[2, .5]]; (ÂH)W = [[2.25, -3.5], ...].
        let out = enc.encode(&store, &g).unwrap();
        let want = [2.25, 0.0, 2.25, 0.0];
        for (a, b) in out.hidden.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gate_params_halve_annotated_entries() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = GcnEncoder::new(&mut store, "g", config(2, 3, 1, true), &mut rng).unwrap();
        store.get_mut(enc.layers[0].gate_weight).data_mut().fill(0.0);
        let feats = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.5]];
        let g = graph(feats.clone(), &[(0, 1), (1, 2)]);
        let adj = rows(&g.adjacency().normalized);
        let gated: Vec<Vec<f64>> = adj
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.iter()
                    .enumerate()
                    .map(|(j, &x)| if i == j || x == 0.0 { x } else { 0.5 * x })
                    .collect()
            })
            .collect();
        let w = rows(store.get(enc.layers[0].weight));
        let want = matmul(&matmul(&gated, &feats), &w);
        let out = enc.encode(&store, &g).unwrap();
        for (r, wr) in want.iter().enumerate() {
            for (c, x) in wr.iter().enumerate() {
                assert!((out.hidden.at(r, c) - x.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_pass_finite_differences() {
        for soft in [false, true] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut cfg = config(2, 3, 2, true);
            cfg.soft_relation = soft;
            let enc = GcnEncoder::new(&mut store, "g", cfg, &mut rng).unwrap();
            let g = graph(vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.5, 0.7]], &[(0, 1), (0, 2), (1, 2)]);
            let adj = g.adjacency().normalized;
            let report = crate::tensor::gradcheck::check(
                &mut store,
                |tape| {
                    let h = enc.forward(tape, &g, &adj)?;
                    let sq = tape.mul(h, h)?;
                    Ok(tape.sum(sq))
                },
                &Default::default(),
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = GcnEncoder::new(&mut store, "g", config(3, 2, 1, true), &mut rng).unwrap();
        let g = graph(vec![vec![1.0, 2.0]], &[]);
        assert!(enc.encode(&store, &g).is_err());
    }

    #[test]
    fn encode_for_decoder_selects_rows() {
        let scene = EncodedScene {
            hidden: Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            image_rows: vec![("a".into(), vec![2, 0])],
        };
        assert_eq!(encode_for_decoder(&scene, "a").unwrap().data(), &[3.0, 1.0]);
        assert!(encode_for_decoder(&scene, "b").is_err());
    }
}
