//! Semantic relation classifier for ordered region pairs.
//!
//! A two-layer perceptron over `[v_i, v_j, v_union, spatial(i, j)]` predicts
//! one of `C` predicate classes or the reserved non-relation class `C`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Region, SceneRecord};
use crate::error::{Error, Result};
use crate::geometry::{iou, spatial_feature, SPATIAL_DIM};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{kernels, Checkpoint, DType, ParamId, ParamStore, Tape, Tensor, Var};

pub const RELCLS_SECTION: &str = "relcls";
pub const NONE_NAME: &str = "<none>";

/// Predicate names; id `len()` is the implicit non-relation class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationVocabulary {
    names: Vec<String>,
}

impl RelationVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) || n == NONE_NAME {
                return Err(Error::validation(format!("invalid relation name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::validation(format!("duplicate relation name {n}")));
            }
        }
        Ok(Self { names })
    }

    /// Sorted distinct predicates annotated anywhere in `corpus`.
    pub fn from_corpus(corpus: &[SceneRecord]) -> Result<Self> {
        let mut names: Vec<String> = corpus
            .iter()
            .flat_map(|r| r.relations.iter().map(|p| p.predicate.clone()))
            .collect();
        names.sort();
        names.dedup();
        Self::new(names)
    }

    pub fn predicates(&self) -> &[String] {
        &self.names
    }

    /// Number of classes including non-relation.
    pub fn num_classes(&self) -> usize {
        self.names.len() + 1
    }

    pub fn none_id(&self) -> usize {
        self.names.len()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        self.names.get(id).map_or(NONE_NAME, String::as_str)
    }

    /// One name per line; lines starting with `#` are comments.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# relcap-relations 1\n");
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationPrediction {
    pub distribution: Vec<f64>,
    pub class_id: usize,
}

/// Mean feature of every region whose box has IoU > 0.5 with the union box
/// of regions `i` and `j`; falls back to the mean of `v_i` and `v_j`.
pub fn union_feature(regions: &[Region], i: usize, j: usize) -> Vec<f64> {
    let ubox = regions[i].bbox.union_box(&regions[j].bbox);
    let covered: Vec<&Region> = regions
        .iter()
        .filter(|r| iou(&r.bbox, &ubox) > 0.5)
        .collect();
    let pool: Vec<&Region> = if covered.is_empty() {
        vec![&regions[i], &regions[j]]
    } else {
        covered
    };
    let dim = regions[i].feature.len();
    let mut out = vec![0.0; dim];
    for r in &pool {
        for (o, v) in out.iter_mut().zip(&r.feature) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= pool.len() as f64);
    out
}

/// Classifier input for the ordered pair `(i, j)`.
pub fn pair_input(regions: &[Region], i: usize, j: usize) -> Result<Vec<f64>> {
    let sf = spatial_feature(&regions[i].bbox, &regions[j].bbox)?;
    let mut x = Vec::with_capacity(3 * regions[i].feature.len() + SPATIAL_DIM);
    x.extend_from_slice(&regions[i].feature);
    x.extend_from_slice(&regions[j].feature);
    x.extend(union_feature(regions, i, j));
    x.extend_from_slice(sf.as_slice());
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelationExample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Every ordered pair of every scene, labelled by its annotation or as
/// non-relation.
pub fn examples_from_corpus(corpus: &[SceneRecord], vocab: &RelationVocabulary) -> Result<Vec<RelationExample>> {
    let mut out = Vec::new();
    for rec in corpus {
        let k = rec.regions.len();
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let label = match rec.relation_for(i, j) {
                    Some(p) => vocab.id(p).ok_or_else(|| {
                        Error::validation(format!("predicate {p} missing from relation vocabulary"))
                    })?,
                    None => vocab.none_id(),
                };
                out.push(RelationExample {
                    input: pair_input(&rec.regions, i, j)?,
                    label,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct RelationClassifierConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub zero_output: bool,
}

impl Default for RelationClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            epochs: 30,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
            zero_output: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelationClassifier {
    pub vocab: RelationVocabulary,
    pub feature_dim: usize,
    pub params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl RelationClassifier {
    pub fn new(vocab: RelationVocabulary, feature_dim: usize, hidden: usize, zero_output: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = 3 * feature_dim + SPATIAL_DIM;
        let classes = vocab.num_classes();
        let mut params = ParamStore::new();
        let w1 = params.add_uniform("w1", &[input, hidden], 1.0 / (input as f64).sqrt(), &mut rng);
        let b1 = params.add_zeros("b1", &[hidden]);
        let w2 = if zero_output {
            params.add_zeros("w2", &[hidden, classes])
        } else {
            params.add_uniform("w2", &[hidden, classes], 1.0 / (hidden as f64).sqrt(), &mut rng)
        };
        let b2 = params.add_zeros("b2", &[classes]);
        Self {
            vocab,
            feature_dim,
            params,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn input_dim(&self) -> usize {
        3 * self.feature_dim + SPATIAL_DIM
    }

    pub fn hidden(&self) -> usize {
        self.params.get(self.b1).numel()
    }

    /// Logits for a `[n, input_dim]` batch.
    pub fn logits(&self, tape: &mut Tape<'_>, inputs: Var) -> Result<Var> {
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        let h = tape.matmul(inputs, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    fn batch_tensor(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("relation classifier input", &[d], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), d], data)
    }

    pub fn predict_input(&self, input: &[f64]) -> Result<RelationPrediction> {
        let x = self.batch_tensor(&[input])?;
        let mut tape = Tape::new(&self.params);
        let xv = tape.constant(x);
        let logits = self.logits(&mut tape, xv)?;
        let mut distribution = tape.value(logits).to_vec();
        kernels::softmax_in_place(&mut distribution);
        let class_id = kernels::argmax(&distribution);
        Ok(RelationPrediction {
            distribution,
            class_id,
        })
    }

    pub fn classify(&self, v_i: &[f64], v_j: &[f64], union_feat: &[f64], spatial: &[f64; SPATIAL_DIM]) -> Result<RelationPrediction> {
        for v in [v_i, v_j, union_feat] {
            if v.len() != self.feature_dim {
                return Err(Error::shape("classify", &[self.feature_dim], &[v.len()]));
            }
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(v_i);
        x.extend_from_slice(v_j);
        x.extend_from_slice(union_feat);
        x.extend_from_slice(spatial);
        self.predict_input(&x)
    }

    pub fn classify_pair(&self, regions: &[Region], i: usize, j: usize) -> Result<RelationPrediction> {
        self.predict_input(&pair_input(regions, i, j)?)
    }

    /// Mean cross-entropy over `examples`.
    pub fn loss(&self, tape: &mut Tape<'_>, examples: &[&RelationExample]) -> Result<Var> {
        let rows: Vec<&[f64]> = examples.iter().map(|e| e.input.as_slice()).collect();
        let x = tape.constant(self.batch_tensor(&rows)?);
        let logits = self.logits(tape, x)?;
        let targets: Vec<Option<usize>> = examples.iter().map(|e| Some(e.label)).collect();
        tape.cross_entropy(logits, &targets)
    }

    pub fn accuracy(&self, examples: &[RelationExample]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let rows: Vec<&[f64]> = examples.iter().map(|e| e.input.as_slice()).collect();
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(self.batch_tensor(&rows)?);
        let logits = self.logits(&mut tape, x)?;
        let classes = self.vocab.num_classes();
        let hits = tape
            .value(logits)
            .chunks(classes)
            .zip(examples)
            .filter(|(row, e)| kernels::argmax(row) == e.label)
            .count();
        Ok(hits as f64 / examples.len() as f64)
    }

    pub fn to_checkpoint(&self, ckpt: &mut Checkpoint) -> Result<()> {
        ckpt.set_meta("relcls.names", self.vocab.predicates().join(" "))?;
        ckpt.set_meta("relcls.feature_dim", self.feature_dim.to_string())?;
        ckpt.set_meta("relcls.hidden", self.hidden().to_string())?;
        ckpt.push_params(RELCLS_SECTION, &self.params, DType::F64)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let names = ckpt
            .require_meta("relcls.names")?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let parse = |k: &str| -> Result<usize> {
            ckpt.require_meta(k)?
                .parse()
                .map_err(|_| Error::validation(format!("bad {k}")))
        };
        let mut clf = Self::new(
            RelationVocabulary::new(names)?,
            parse("relcls.feature_dim")?,
            parse("relcls.hidden")?,
            true,
            0,
        );
        ckpt.load_params(RELCLS_SECTION, &mut clf.params)?;
        Ok(clf)
    }
}

/// Cross-entropy training with Adam on shuffled mini-batches. Returns the
/// classifier and the mean training loss of each epoch.
pub fn train_relation_classifier(
    examples: &[RelationExample],
    vocab: RelationVocabulary,
    feature_dim: usize,
    config: &RelationClassifierConfig,
) -> Result<(RelationClassifier, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::validation("relation classifier corpus is empty"));
    }
    if let Some(e) = examples.iter().find(|e| e.label >= vocab.num_classes()) {
        return Err(Error::validation(format!("label {} outside relation vocabulary", e.label)));
    }
    let mut clf = RelationClassifier::new(vocab, feature_dim, config.hidden, config.zero_output, config.seed);
    let mut adam = Adam::new(config.adam.clone(), &clf.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size.max(1)) {
            let refs: Vec<&RelationExample> = batch.iter().map(|&i| &examples[i]).collect();
            let grads = {
                let mut tape = Tape::new(&clf.params);
                let loss = clf.loss(&mut tape, &refs)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::numerical(format!(
                        "relation classifier loss diverged in epoch {epoch} (seed {})",
                        config.seed
                    )));
                }
                total += value * batch.len() as f64;
                tape.backward(loss)?
            };
            clf.params.zero_grads();
            clf.params.accumulate(&grads);
            adam.step(&mut clf.params)?;
        }
        trace.push(total / examples.len() as f64);
    }
    Ok((clf, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn region(cx: f64, cy: f64, w: f64, h: f64, feature: Vec<f64>) -> Region {
        Region {
            bbox: BoundingBox::new(cx, cy, w, h),
            feature,
            class_id: 0,
        }
    }

    #[test]
    fn vocabulary_reserves_none_last() {
        let v = RelationVocabulary::parse("# comment\nabove\nbelow\n").unwrap();
        assert_eq!(v.num_classes(), 3);
        assert_eq!(v.none_id(), 2);
        assert_eq!(v.name(2), NONE_NAME);
        assert_eq!(RelationVocabulary::parse(&v.to_text()).unwrap(), v);
        assert!(RelationVocabulary::parse("a\na\n").is_err());
    }

    #[test]
    fn untrained_zero_output_is_uniform() {
        let v = RelationVocabulary::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let clf = RelationClassifier::new(v, 4, 16, true, 1);
        let p = clf
            .classify(&[1.0; 4], &[0.5; 4], &[0.0; 4], &[0.1, 0.2, 1.0, 0.0, 1.0, 1.0])
            .unwrap();
        for x in &p.distribution {
            assert!((x - 0.25).abs() < 1e-15);
        }
        assert_eq!(p.class_id, 0);
    }

    #[test]
    fn classify_rejects_wrong_dims() {
        let v = RelationVocabulary::new(vec!["a".into()]).unwrap();
        let clf = RelationClassifier::new(v, 4, 8, true, 1);
        assert!(clf.classify(&[1.0; 3], &[0.5; 4], &[0.0; 4], &[0.0; 6]).is_err());
    }

    #[test]
    fn separated_pair_pools_own_features() {
        let regions = vec![
            region(0.2, 0.2, 0.1, 0.1, vec![1.0, 0.0]),
            region(0.8, 0.8, 0.1, 0.1, vec![0.0, 3.0]),
        ];
        assert_eq!(union_feature(&regions, 0, 1), vec![0.5, 1.5]);
    }

    #[test]
    fn overlapping_triple_pools_all_three() {
        // Union of the first two is (0.5,0.5,0.44,0.4); all three cover most of it.
        let regions = vec![
            region(0.48, 0.5, 0.4, 0.4, vec![3.0, 0.0]),
            region(0.52, 0.5, 0.4, 0.4, vec![0.0, 6.0]),
            region(0.5, 0.5, 0.42, 0.38, vec![3.0, 3.0]),
            region(0.9, 0.9, 0.05, 0.05, vec![100.0, 100.0]),
        ];
        assert_eq!(union_feature(&regions, 0, 1), vec![2.0, 3.0]);
    }

    #[test]
    fn single_example_is_memorized() {
        let v = RelationVocabulary::new(vec!["a".into(), "b".into()]).unwrap();
        let ex = vec![RelationExample {
            input: vec![0.3; 3 * 2 + SPATIAL_DIM],
            label: 1,
        }];
        let cfg = RelationClassifierConfig {
            hidden: 16,
            epochs: 300,
            batch_size: 1,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..Default::default()
        };
        let (_, trace) = train_relation_classifier(&ex, v, 2, &cfg).unwrap();
        assert!(*trace.last().unwrap() < 1e-3, "{:?}", trace.last());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let v = RelationVocabulary::new(vec!["a".into()]).unwrap();
        let cfg = RelationClassifierConfig::default();
        assert!(train_relation_classifier(&[], v, 2, &cfg).is_err());
    }
}
