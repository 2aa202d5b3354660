mod common;

use std::collections::HashMap;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relcap::bleu::corpus_bleu;
use relcap::config::Config;
use relcap::corpus::{corpus_to_string, parse_corpus, tokenize};
use relcap::decoder::{DecoderConfig, TransformerDecoder};
use relcap::gcn::GcnEncoder;
use relcap::geometry::{spatial_feature, BoundingBox, SpatialFeature};
use relcap::gmm::{fit_gmm, CovarianceKind, GmmModel, GmmOptions};
use relcap::graph::renormalize;
use relcap::search::{beam_decode, greedy_decode, TableModel};
use relcap::synthetic::{generate_synthetic, SyntheticSpec};
use relcap::tensor::{ParamStore, Tape, Tensor};
use relcap::vocab::START;

use common::{gcn_config, random_graph, uniform_tensor};

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.005..0.8f64, 0.005..0.8f64).prop_map(|(x, y, w, h)| BoundingBox::new(x, y, w, h))
}

fn fitted_gmm() -> &'static GmmModel {
    static GMM: OnceLock<GmmModel> = OnceLock::new();
    GMM.get_or_init(|| {
        let corpus = generate_synthetic(60, 9, &SyntheticSpec::relational()).unwrap();
        let feats = relcap::model::pair_spatial_features(&corpus).unwrap();
        fit_gmm(
            &feats,
            &GmmOptions {
                components: 5,
                covariance: CovarianceKind::Full,
                ..Default::default()
            },
        )
        .unwrap()
    })
}

/// Random next-token table over `vocab` tokens (token 0 ends) for prefixes
/// up to `depth` tokens.
fn random_table(seed: u64, vocab: usize, depth: usize) -> TableModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for prefix in frontier {
            let w: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = w.iter().sum();
            table.insert(prefix.clone(), w.iter().map(|x| (x / total).ln()).collect());
            for t in 1..vocab {
                let mut p = prefix.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    TableModel { table }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn spatial_feature_is_finite_and_consistent(a in boxes(), b in boxes()) {
        let f = spatial_feature(&a, &b).unwrap();
        prop_assert!(f.0.iter().all(|x| x.is_finite()));
        prop_assert!((0.0..=1.0).contains(&f.iou()));
        prop_assert!(f.size_ratio() > 0.0);
        let r = spatial_feature(&b, &a).unwrap();
        prop_assert!((f.iou() - r.iou()).abs() < 1e-12);
        prop_assert!((f.size_ratio() * r.size_ratio() - 1.0).abs() < 1e-12);
        prop_assert_eq!(f.aspect_i(), r.aspect_j());
    }

    #[test]
    fn spatial_feature_ignores_frame(a in boxes(), b in boxes(), dx in -5.0..5.0f64, dy in -5.0..5.0f64, s in 0.1..10.0f64) {
        let base = spatial_feature(&a, &b).unwrap();
        let moved = spatial_feature(&a.translated(dx, dy), &b.translated(dx, dy)).unwrap();
        let scaled = spatial_feature(&a.scaled(s), &b.scaled(s)).unwrap();
        for k in 0..6 {
            let tol = 1e-9 * (1.0 + base.0[k].abs());
            prop_assert!((moved.0[k] - base.0[k]).abs() < tol, "shift {k}: {:?} {:?}", moved, base);
            prop_assert!((scaled.0[k] - base.0[k]).abs() < tol, "scale {k}: {:?} {:?}", scaled, base);
        }
    }

    #[test]
    fn box_paired_with_itself(a in boxes()) {
        let f = spatial_feature(&a, &a).unwrap();
        let r = a.w / a.h;
        prop_assert_eq!(f.0, [0.0, 0.0, 1.0, 1.0, r, r]);
    }

    #[test]
    fn mixture_scores_are_a_distribution(v in prop::array::uniform6(-1e6..1e6f64)) {
        let s = fitted_gmm().assign_scores(&SpatialFeature(v));
        prop_assert_eq!(s.len(), 5);
        prop_assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn renormalized_adjacency_is_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    a[i * n + j] = 1.0;
                    a[j * n + i] = 1.0;
                }
            }
        }
        let degree: Vec<f64> = (0..n).map(|i| 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
        let r = renormalize(&Tensor::new(vec![n, n], a).unwrap()).unwrap();
        for i in 0..n {
            prop_assert!((r.at(i, i) - 1.0 / degree[i]).abs() < 1e-15);
            for j in 0..n {
                prop_assert_eq!(r.at(i, j), r.at(j, i));
                prop_assert!((0.0..=1.0).contains(&r.at(i, j)));
            }
        }
    }

    #[test]
    fn gcn_commutes_with_relabeling(seed in any::<u64>(), n in 1usize..8, layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 3, 0.5, true);
        let mut store = ParamStore::new();
        let enc = GcnEncoder::new(&mut store, "g", gcn_config(3, 5, layers, true), &mut rng).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let base = enc.encode(&store, &g).unwrap().hidden;
        let moved = enc.encode(&store, &g.permuted(&perm).unwrap()).unwrap().hidden;
        for (old, &new) in perm.iter().enumerate() {
            for c in 0..5 {
                prop_assert!((base.at(old, c) - moved.at(new, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decoder_rows_ignore_later_tokens(seed in any::<u64>(), len in 1usize..8, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut cfg = DecoderConfig::new(8, 6);
        cfg.n_heads = 2;
        cfg.zero_output = false;
        let dec = TransformerDecoder::new(&mut store, "d", cfg, &mut rng).unwrap();
        let memory = uniform_tensor(&mut rng, &[k, 8], -1.0, 1.0);
        let mut a = vec![START];
        a.extend((1..len).map(|_| rng.random_range(0..6)));
        let mut b = a.clone();
        let cut = rng.random_range(1..=len);
        for t in b.iter_mut().skip(cut) {
            *t = rng.random_range(0..6);
        }
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new(&store);
            let m = tape.constant(memory.clone());
            let out = dec.forward(&mut tape, tokens, m).unwrap();
            tape.tensor(out)
        };
        let (la, lb) = (run(&a), run(&b));
        for t in 0..cut {
            prop_assert_eq!(la.row(t), lb.row(t));
        }
        let p = dec.decode_step(&store, &a, &memory).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn beam_of_one_is_greedy(seed in any::<u64>(), vocab in 2usize..5, depth in 1usize..5) {
        let model = random_table(seed, vocab, depth);
        let g = greedy_decode(&model, 0, depth).unwrap();
        prop_assert_eq!(beam_decode(&model, 1, 0, depth).unwrap(), g);
    }

    #[test]
    fn wide_beam_is_exhaustive(seed in any::<u64>(), vocab in 2usize..4, depth in 1usize..4) {
        let model = random_table(seed, vocab, depth);
        // Best finished sequence, else best sequence of full length.
        let mut finished = (f64::NEG_INFINITY, Vec::new());
        let mut open = (f64::NEG_INFINITY, Vec::new());
        let mut stack = vec![(0.0, Vec::<usize>::new())];
        while let Some((score, prefix)) = stack.pop() {
            let next = &model.table[&prefix];
            for (t, lp) in next.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(t);
                let s = score + lp;
                if t == 0 {
                    if s > finished.0 { finished = (s, seq); }
                } else if seq.len() < depth {
                    stack.push((s, seq));
                } else if s > open.0 {
                    open = (s, seq);
                }
            }
        }
        let want = if finished.1.is_empty() { open } else { finished };
        let got = beam_decode(&model, vocab.pow(depth as u32), 0, depth).unwrap();
        prop_assert_eq!(got.tokens, want.1);
        prop_assert!((got.log_prob - want.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_is_bounded(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "man", "dog", "rides", "the", "horse", "near"];
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.random_range(1..8);
            (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
        };
        let cands: Vec<Vec<String>> = (0..n).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<Vec<String>>> = (0..n).map(|_| (0..2).map(|_| sentence(&mut rng)).collect()).collect();
        let r = corpus_bleu(&cands, &refs, 4).unwrap();
        prop_assert!(r.brevity_penalty > 0.0 && r.brevity_penalty <= 1.0);
        prop_assert!(r.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        let self_refs: Vec<Vec<Vec<String>>> = cands.iter().map(|c| vec![c.clone()]).collect();
        let same = corpus_bleu(&cands, &self_refs, 1).unwrap();
        prop_assert!((same.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenize_is_idempotent(s in "[ a-zA-Z\t]{0,40}") {
        let once = tokenize(&s);
        prop_assert_eq!(tokenize(&once.join(" ")), once.clone());
        prop_assert!(once.iter().all(|t| !t.is_empty() && t.to_lowercase() == *t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn corpus_text_round_trips(seed in any::<u64>(), n in 1usize..6, contextual in any::<bool>()) {
        let spec = if contextual { SyntheticSpec::contextual() } else { SyntheticSpec::relational() };
        let recs = generate_synthetic(n, seed, &spec).unwrap();
        let text = corpus_to_string(&recs);
        let back = parse_corpus(&text, std::path::Path::new("mem"), 36).unwrap();
        prop_assert_eq!(back, recs);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), lr in 1e-6..1e-1f64, epochs in 1usize..100, gates in any::<bool>()) {
        let cfg = Config { seed, lr, epochs, gates, level: "hierarchical".into(), ..Config::default() };
        let back = Config::parse(&cfg.to_text(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
