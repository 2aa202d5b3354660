//! The full captioner: frozen pair annotators (mixture model and relation
//! classifier), a graph encoder and a caption decoder sharing one parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::{group_contexts, SceneRecord};
use crate::decoder::{DecoderConfig, DecoderState, TransformerDecoder};
use crate::error::{Error, Result};
use crate::gcn::{EncodedScene, GcnConfig, GcnEncoder};
use crate::geometry::{spatial_feature, SpatialFeature};
use crate::gmm::{fit_gmm, CovarianceKind, GmmModel, GmmOptions};
use crate::graph::{build_graph, GraphLevel, GraphOptions, HierarchyMode, PairAnnotator, SceneGraph, TYPE_DIM};
use crate::relation::{
    examples_from_corpus, train_relation_classifier, RelationClassifier, RelationClassifierConfig,
    RelationVocabulary,
};
use crate::search::{beam_decode, greedy_decode, Hypothesis, SequenceModel};
use crate::tensor::{kernels, Checkpoint, DType, ParamStore, Tape, Tensor, Var};
use crate::vocab::{Vocabulary, END, START};

pub const MODEL_SECTION: &str = "model";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub level: GraphLevel,
    pub graph: GraphOptions,
    pub gates: bool,
    pub soft_relation: bool,
    pub d_model: usize,
    pub gcn_layers: usize,
    pub d_rel: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub context_size: usize,
    /// Let the decoder also attend to the target image's image node.
    pub context_memory: bool,
}

impl ModelConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        Ok(Self {
            level: GraphLevel::parse(&c.level)?,
            graph: GraphOptions {
                mode: HierarchyMode::parse(&c.hierarchy_mode)?,
                scene_nodes: c.scene_nodes,
            },
            gates: c.gates,
            soft_relation: c.soft_relation,
            d_model: c.d_model,
            gcn_layers: c.gcn_layers,
            d_rel: c.d_rel,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: if c.d_ff == 0 { 4 * c.d_model } else { c.d_ff },
            max_len: c.max_len,
            context_size: c.context_size,
            context_memory: c.context_memory,
        })
    }

    fn to_meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("level", self.level.as_str().into()),
            ("hierarchy_mode", self.graph.mode.as_str().into()),
            ("scene_nodes", self.graph.scene_nodes.to_string()),
            ("gates", self.gates.to_string()),
            ("soft_relation", self.soft_relation.to_string()),
            ("d_model", self.d_model.to_string()),
            ("gcn_layers", self.gcn_layers.to_string()),
            ("d_rel", self.d_rel.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("context_size", self.context_size.to_string()),
            ("context_memory", self.context_memory.to_string()),
        ]
    }

    fn from_meta(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| ckpt.require_meta(&format!("model.{k}"));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::validation(format!("checkpoint meta model.{k} is not a number")))
        };
        let flag = |k: &str| -> Result<bool> {
            get(k)?
                .parse()
                .map_err(|_| Error::validation(format!("checkpoint meta model.{k} is not a bool")))
        };
        Ok(Self {
            level: GraphLevel::parse(get("level")?)?,
            graph: GraphOptions {
                mode: HierarchyMode::parse(get("hierarchy_mode")?)?,
                scene_nodes: flag("scene_nodes")?,
            },
            gates: flag("gates")?,
            soft_relation: flag("soft_relation")?,
            d_model: num("d_model")?,
            gcn_layers: num("gcn_layers")?,
            d_rel: num("d_rel")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            context_size: num("context_size")?,
            context_memory: flag("context_memory")?,
        })
    }
}

/// Spatial features of every ordered region pair in `corpus`.
pub fn pair_spatial_features(corpus: &[SceneRecord]) -> Result<Vec<SpatialFeature>> {
    let mut out = Vec::new();
    for rec in corpus {
        for (i, a) in rec.regions.iter().enumerate() {
            for (j, b) in rec.regions.iter().enumerate() {
                if i != j {
                    out.push(spatial_feature(&a.bbox, &b.bbox)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn fit_spatial_mixture(corpus: &[SceneRecord], cfg: &Config) -> Result<GmmModel> {
    let opts = GmmOptions {
        components: cfg.gmm_components,
        covariance: CovarianceKind::parse(&cfg.gmm_covariance)?,
        max_iters: cfg.gmm_max_iters,
        tolerance: cfg.gmm_tolerance,
        seed: cfg.seed,
    };
    fit_gmm(&pair_spatial_features(corpus)?, &opts)
}

pub fn fit_relation_classifier(corpus: &[SceneRecord], cfg: &Config) -> Result<RelationClassifier> {
    let vocab = RelationVocabulary::from_corpus(corpus)?;
    let examples = examples_from_corpus(corpus, &vocab)?;
    let rc = RelationClassifierConfig {
        hidden: cfg.relcls_hidden,
        epochs: cfg.relcls_epochs,
        batch_size: cfg.relcls_batch,
        adam: crate::optim::AdamConfig {
            lr: cfg.relcls_lr,
            ..cfg.adam()
        },
        seed: cfg.seed,
        zero_output: true,
    };
    let dim = corpus.first().map_or(0, SceneRecord::feature_dim);
    let (clf, trace) = train_relation_classifier(&examples, vocab, dim, &rc)?;
    log::info!(
        "relation classifier: {} examples, final loss {:.4}",
        examples.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(clf)
}

/// A graph built for one context with the corpus indices of its images.
#[derive(Clone, Debug)]
pub struct PreparedContext {
    pub graph: SceneGraph,
    pub adjacency: Tensor,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub gmm: GmmModel,
    pub classifier: RelationClassifier,
    pub params: ParamStore,
    pub gcn: GcnEncoder,
    pub decoder: TransformerDecoder,
    pub feature_dim: usize,
}

impl CaptionModel {
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        gmm: GmmModel,
        classifier: RelationClassifier,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if classifier.feature_dim != feature_dim {
            return Err(Error::validation(format!(
                "relation classifier expects {} features, corpus has {feature_dim}",
                classifier.feature_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gcn = GcnEncoder::new(
            &mut params,
            "gcn",
            GcnConfig {
                d_in: feature_dim + TYPE_DIM,
                d_model: config.d_model,
                layers: config.gcn_layers,
                d_rel: config.d_rel,
                spatial_dim: gmm.components(),
                relation_classes: classifier.vocab.num_classes(),
                gates: config.gates,
                soft_relation: config.soft_relation,
            },
            &mut rng,
        )?;
        let mut dc = DecoderConfig::new(config.d_model, vocab.len());
        dc.n_layers = config.n_layers;
        dc.n_heads = config.n_heads;
        dc.d_ff = config.d_ff;
        dc.max_len = config.max_len;
        let decoder = TransformerDecoder::new(&mut params, "decoder", dc, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            gmm,
            classifier,
            params,
            gcn,
            decoder,
            feature_dim,
        })
    }

    /// Builds the graphs covering `corpus` at the configured level.
    pub fn prepare(&self, corpus: &[SceneRecord]) -> Result<Vec<PreparedContext>> {
        let annotator = PairAnnotator {
            gmm: &self.gmm,
            classifier: &self.classifier,
        };
        let groups: Vec<Vec<usize>> = match self.config.level {
            GraphLevel::Object => (0..corpus.len()).map(|i| vec![i]).collect(),
            _ => group_contexts(corpus, self.config.context_size),
        };
        groups
            .into_iter()
            .map(|members| {
                let recs: Vec<&SceneRecord> = members.iter().map(|&i| &corpus[i]).collect();
                if let Some(r) = recs.iter().find(|r| r.feature_dim() != self.feature_dim) {
                    return Err(Error::validation(format!(
                        "image {} has feature dim {} (model expects {})",
                        r.image_id,
                        r.feature_dim(),
                        self.feature_dim
                    )));
                }
                let mut graph = build_graph(self.config.level, &recs, &annotator, self.config.graph)?;
                graph.append_type_embedding();
                let adjacency = graph.adjacency().normalized;
                Ok(PreparedContext {
                    graph,
                    adjacency,
                    members,
                })
            })
            .collect()
    }

    /// `<S> .. <E>` ids clipped to the decoder's position budget.
    pub fn encode_caption(&self, caption: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(caption);
        if ids.len() > self.config.max_len + 1 {
            log::warn!("caption longer than max_len {}; truncating", self.config.max_len);
            ids.truncate(self.config.max_len + 1);
        }
        ids
    }

    /// Node features of a context on the tape.
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, ctx: &PreparedContext) -> Result<Var> {
        self.gcn.forward(tape, &ctx.graph, &ctx.adjacency)
    }

    /// Teacher-forced logits for `ids` given encoded context rows `hidden`.
    pub fn caption_logits(&self, tape: &mut Tape<'_>, ctx: &PreparedContext, hidden: Var, image_id: &str, ids: &[usize]) -> Result<Var> {
        let rows = ctx.graph.memory_rows(image_id, self.config.context_memory)?;
        let memory = tape.select_rows(hidden, &rows)?;
        self.decoder.forward(tape, &ids[..ids.len() - 1], memory)
    }

    /// Mean per-token negative log-likelihood of every caption of every
    /// image in `contexts`, without gradients.
    pub fn mean_loss(&self, contexts: &[PreparedContext], corpus: &[SceneRecord]) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for ctx in contexts {
            let mut tape = Tape::new(&self.params);
            let hidden = self.encode_on_tape(&mut tape, ctx)?;
            for &m in &ctx.members {
                let rec = &corpus[m];
                for cap in &rec.captions {
                    let ids = self.encode_caption(cap);
                    let logits = self.caption_logits(&mut tape, ctx, hidden, &rec.image_id, &ids)?;
                    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
                    let loss = tape.cross_entropy(logits, &targets)?;
                    total += tape.scalar(loss) * targets.len() as f64;
                    count += targets.len();
                }
            }
        }
        if count == 0 {
            return Err(Error::validation("no captions to score"));
        }
        Ok(total / count as f64)
    }

    pub fn encode(&self, ctx: &PreparedContext) -> Result<EncodedScene> {
        let mut scene = self.gcn.encode(&self.params, &ctx.graph)?;
        if self.config.context_memory {
            for (id, rows) in &mut scene.image_rows {
                *rows = ctx.graph.memory_rows(id, true)?;
            }
        }
        Ok(scene)
    }

    fn runner(&self, scene: &EncodedScene, image_id: &str) -> Result<DecoderRun<'_>> {
        Ok(DecoderRun {
            decoder: &self.decoder,
            params: &self.params,
            memory: crate::gcn::encode_for_decoder(scene, image_id)?,
        })
    }

    /// Greedy (`beam == 1`) or beam decoding of one image of an encoded
    /// context.
    pub fn decode(&self, scene: &EncodedScene, image_id: &str, beam: usize) -> Result<Hypothesis> {
        let run = self.runner(scene, image_id)?;
        if beam == 1 {
            greedy_decode(&run, END, self.config.max_len)
        } else {
            beam_decode(&run, beam, END, self.config.max_len)
        }
    }

    pub fn caption_text(&self, hyp: &Hypothesis) -> String {
        self.vocab.decode(&hyp.tokens)
    }

    /// `(image_id, caption)` for every image of `corpus`, in corpus order.
    pub fn caption_corpus(&self, corpus: &[SceneRecord], beam: usize) -> Result<Vec<(String, String)>> {
        let mut out = vec![(String::new(), String::new()); corpus.len()];
        for ctx in self.prepare(corpus)? {
            let scene = self.encode(&ctx)?;
            for &m in &ctx.members {
                let hyp = self.decode(&scene, &corpus[m].image_id, beam)?;
                out[m] = (corpus[m].image_id.clone(), self.caption_text(&hyp));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for (k, v) in self.config.to_meta() {
            ckpt.set_meta(&format!("model.{k}"), v)?;
        }
        ckpt.set_meta("model.feature_dim", self.feature_dim.to_string())?;
        ckpt.set_meta("model.vocab", self.vocab.tokens()[crate::vocab::RESERVED.len()..].join(" "))?;
        self.gmm.to_checkpoint(&mut ckpt)?;
        self.classifier.to_checkpoint(&mut ckpt)?;
        ckpt.push_params(MODEL_SECTION, &self.params, DType::F64)?;
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_meta(ckpt)?;
        let feature_dim = ckpt
            .require_meta("model.feature_dim")?
            .parse()
            .map_err(|_| Error::validation("checkpoint meta model.feature_dim is not a number"))?;
        let vocab = Vocabulary::from_tokens(
            ckpt.require_meta("model.vocab")?
                .split_whitespace()
                .map(str::to_string),
        )?;
        let gmm = GmmModel::from_checkpoint(ckpt)?;
        let classifier = RelationClassifier::from_checkpoint(ckpt)?;
        let mut model = Self::new(config, vocab, gmm, classifier, feature_dim, 0)?;
        ckpt.load_params(MODEL_SECTION, &mut model.params)?;
        Ok(model)
    }
}

/// Incremental decoder bound to one memory matrix.
pub struct DecoderRun<'a> {
    pub decoder: &'a TransformerDecoder,
    pub params: &'a ParamStore,
    pub memory: Tensor,
}

impl SequenceModel for DecoderRun<'_> {
    type State = DecoderState;

    fn initial(&self) -> Result<(DecoderState, Vec<f64>)> {
        let mut state = self.decoder.start(self.params, &self.memory)?;
        let mut logp = self.decoder.step(self.params, &mut state, START)?;
        kernels::log_softmax_in_place(&mut logp);
        Ok((state, logp))
    }

    fn extend(&self, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        let mut logp = self.decoder.step(self.params, state, token)?;
        kernels::log_softmax_in_place(&mut logp);
        Ok(logp)
    }
}
