use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};

use relcap::bleu::corpus_bleu;
use relcap::config::Config;
use relcap::corpus::{load_corpus, tokenize, write_corpus, SceneRecord};
use relcap::error::{Error, Result};
use relcap::gmm::GmmModel;
use relcap::model::{fit_relation_classifier, fit_spatial_mixture, CaptionModel, ModelConfig};
use relcap::relation::{RelationClassifier, RELCLS_SECTION};
use relcap::synthetic::{generate_synthetic, SyntheticSpec};
use relcap::tensor::Checkpoint;
use relcap::train::{metrics_header, train_model, TrainOptions};
use relcap::vocab::Vocabulary;

#[derive(Parser)]
#[command(name = "relcap", version, about = "Relation-aware graph captioning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Flat key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// object | image | hierarchical
    #[arg(long, global = true)]
    level: Option<String>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Output file; stdout when omitted for text outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenSynthetic {
        #[arg(long)]
        scenes: Option<usize>,
        /// relational | contextual
        #[arg(long)]
        preset: Option<String>,
        /// TOML scene specification (overrides --preset).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Build a caption vocabulary.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        min_count: Option<usize>,
    },
    /// Fit the spatial mixture model on every region pair of a corpus.
    FitGmm {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the pairwise relation classifier.
    TrainRelcls {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the captioner.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Validation corpus; defaults to the trailing val_fraction of --corpus.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Checkpoint holding a fitted mixture model.
        #[arg(long)]
        gmm: Option<PathBuf>,
        /// Checkpoint holding a trained relation classifier.
        #[arg(long)]
        relcls: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Caption every image of a corpus.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Corpus BLEU@1..4 of captions against references.
    Evaluate {
        /// `image_id<TAB>caption` lines.
        #[arg(long)]
        candidates: PathBuf,
        /// `image_id<TAB>caption` lines, several per image allowed.
        #[arg(long, conflicts_with = "corpus")]
        references: Option<PathBuf>,
        /// Corpus whose captions serve as references.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Finite-difference check of the end-to-end loss gradient.
    GradCheck {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print the graph built for an image's context.
    DumpGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        image: Option<String>,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<Config> {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(l) = &g.level {
        cfg.level = l.clone();
    }
    if let Some(b) = g.beam {
        cfg.beam = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_out(g: &GlobalArgs) -> Result<&Path> {
    g.out
        .as_deref()
        .ok_or_else(|| Error::validation("--out is required for this command"))
}

fn emit(g: &GlobalArgs, text: &str) -> Result<()> {
    match &g.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected image_id<TAB>caption".into(),
                })
        })
        .collect()
}

fn evaluate(candidates: &Path, references: Option<&Path>, corpus: Option<&Path>, k_max: usize) -> Result<String> {
    let mut refs: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    match (references, corpus) {
        (Some(r), _) => {
            for (id, cap) in read_tsv(r)? {
                refs.entry(id).or_default().push(tokenize(&cap));
            }
        }
        (None, Some(c)) => {
            for rec in load_corpus(c, k_max)? {
                refs.insert(rec.image_id.clone(), rec.captions.iter().map(|s| tokenize(s)).collect());
            }
        }
        (None, None) => return Err(Error::validation("evaluate needs --references or --corpus")),
    }
    let mut cands = Vec::new();
    let mut ref_sets = Vec::new();
    for (id, cap) in read_tsv(candidates)? {
        let r = refs
            .get(&id)
            .ok_or_else(|| Error::validation(format!("no references for image {id}")))?;
        cands.push(tokenize(&cap));
        ref_sets.push(r.clone());
    }
    let report = corpus_bleu(&cands, &ref_sets, 4)?;
    let mut s = String::new();
    for (n, v) in report.scores.iter().enumerate() {
        s.push_str(&format!("BLEU@{}\t{v:.10}\n", n + 1));
    }
    s.push_str(&format!(
        "brevity_penalty\t{:.10}\ncandidate_len\t{}\nreference_len\t{}\n",
        report.brevity_penalty, report.candidate_len, report.reference_len
    ));
    Ok(s)
}

fn load_gmm(path: &Path) -> Result<GmmModel> {
    GmmModel::from_checkpoint(&Checkpoint::load(path)?)
}

fn load_relcls(path: &Path) -> Result<RelationClassifier> {
    let ckpt = Checkpoint::load(path)?;
    if !ckpt.has_section(RELCLS_SECTION) {
        return Err(Error::validation(format!("{} has no relation classifier", path.display())));
    }
    RelationClassifier::from_checkpoint(&ckpt)
}

fn split_validation(corpus: Vec<SceneRecord>, fraction: f64) -> (Vec<SceneRecord>, Vec<SceneRecord>) {
    let n_val = (corpus.len() as f64 * fraction).floor() as usize;
    let mut train = corpus;
    let val = train.split_off(train.len() - n_val.min(train.len().saturating_sub(1)));
    (train, val)
}

fn grad_check(corpus: Option<&Path>, cfg: &Config, tolerance: f64) -> Result<String> {
    let corpus = match corpus {
        Some(p) => load_corpus(p, cfg.k_max)?,
        None => generate_synthetic(40, cfg.seed, &SyntheticSpec::relational())?,
    };
    let mut small = cfg.clone();
    small.d_model = 8;
    small.n_heads = 2;
    small.d_ff = 12;
    small.d_rel = 3;
    small.gmm_components = 3;
    small.relcls_hidden = 8;
    small.relcls_epochs = 2;
    let gmm = fit_spatial_mixture(&corpus, &small)?;
    let clf = fit_relation_classifier(&corpus, &small)?;
    let vocab = Vocabulary::build(&corpus, 1);
    let mut model = CaptionModel::new(ModelConfig::from_config(&small)?, vocab, gmm, clf, corpus[0].feature_dim(), cfg.seed)?;
    // Non-zero output layer so every parameter receives gradient.
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.name(id).ends_with("out_weight") {
            let mut rng = rand::rngs::StdRng::seed_from_u64(cfg.seed);
            for x in model.params.get_mut(id).data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let ctx = model.prepare(&corpus[..small.context_size.min(corpus.len()).max(1)])?.remove(0);
    let rec = &corpus[ctx.members[0]];
    let ids = model.encode_caption(&rec.captions[0]);
    let targets: Vec<Option<usize>> = ids[1..].iter().map(|&t| Some(t)).collect();
    let mut store = std::mem::take(&mut model.params);
    let report = relcap::tensor::gradcheck::check(
        &mut store,
        |tape| {
            let h = model.encode_on_tape(tape, &ctx)?;
            let logits = model.caption_logits(tape, &ctx, h, &rec.image_id, &ids)?;
            tape.cross_entropy(logits, &targets)
        },
        // Central differences on an O(1) loss resolve about 1e-10.
        &relcap::tensor::gradcheck::GradCheckOptions {
            floor: 1e-6,
            ..Default::default()
        },
    )?;
    let line = format!(
        "checked {} coordinates, max relative error {:.3e} at {:?}\n",
        report.checked, report.max_rel_err, report.worst
    );
    if report.max_rel_err >= tolerance {
        return Err(Error::numerical(format!("gradient check failed: {}", line.trim())));
    }
    Ok(line)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let cfg = resolve_config(g)?;
    match cli.command {
        Command::GenSynthetic { scenes, preset, spec } => {
            let spec = match (spec, preset) {
                (Some(p), _) => SyntheticSpec::load(&p)?,
                (None, Some(name)) => SyntheticSpec::preset(&name)?,
                (None, None) => SyntheticSpec::preset(&cfg.synthetic_preset)?,
            };
            let recs = generate_synthetic(scenes.unwrap_or(cfg.synthetic_scenes), cfg.seed, &spec)?;
            write_corpus(require_out(g)?, &recs)?;
            log::info!("wrote {} scenes", recs.len());
        }
        Command::BuildVocab { corpus, min_count } => {
            let recs = load_corpus(&corpus, cfg.k_max)?;
            let v = Vocabulary::build(&recs, min_count.unwrap_or(cfg.min_count));
            emit(g, &v.to_text())?;
        }
        Command::FitGmm { corpus } => {
            let recs = load_corpus(&corpus, cfg.k_max)?;
            let gmm = fit_spatial_mixture(&recs, &cfg)?;
            let mut ckpt = Checkpoint::new();
            gmm.to_checkpoint(&mut ckpt)?;
            ckpt.save(require_out(g)?)?;
            if let Some(ll) = gmm.log_likelihood.last() {
                log::info!("{} EM iterations, log-likelihood {ll:.6}", gmm.log_likelihood.len());
            }
        }
        Command::TrainRelcls { corpus } => {
            let recs = load_corpus(&corpus, cfg.k_max)?;
            let clf = fit_relation_classifier(&recs, &cfg)?;
            let mut ckpt = Checkpoint::new();
            clf.to_checkpoint(&mut ckpt)?;
            ckpt.save(require_out(g)?)?;
        }
        Command::Train { corpus, val, vocab, gmm, relcls, metrics } => {
            let recs = load_corpus(&corpus, cfg.k_max)?;
            if recs.is_empty() {
                return Err(Error::validation("training corpus is empty"));
            }
            let (train, val) = match val {
                Some(p) => (recs, load_corpus(&p, cfg.k_max)?),
                None => split_validation(recs, cfg.val_fraction),
            };
            let vocab = match vocab {
                Some(p) => Vocabulary::load(&p)?,
                None => Vocabulary::build(&train, cfg.min_count),
            };
            let gmm = match gmm {
                Some(p) => load_gmm(&p)?,
                None => fit_spatial_mixture(&train, &cfg)?,
            };
            let clf = match relcls {
                Some(p) => load_relcls(&p)?,
                None => fit_relation_classifier(&train, &cfg)?,
            };
            let mut model = CaptionModel::new(
                ModelConfig::from_config(&cfg)?,
                vocab,
                gmm,
                clf,
                train[0].feature_dim(),
                cfg.seed,
            )?;
            let mut sink: Option<fs::File> = match &metrics {
                Some(p) => {
                    let mut f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
                    f.write_all(metrics_header(&cfg).as_bytes())
                        .map_err(|e| Error::io(p, e))?;
                    Some(f)
                }
                None => None,
            };
            let opts = TrainOptions::from_config(&cfg);
            train_model(
                &mut model,
                &train,
                &val,
                &opts,
                sink.as_mut().map(|f| f as &mut dyn Write),
            )?;
            model.to_checkpoint()?.save(require_out(g)?)?;
        }
        Command::Caption { checkpoint, corpus } => {
            let model = CaptionModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let recs = load_corpus(&corpus, cfg.k_max)?;
            let mut text = String::new();
            for (id, cap) in model.caption_corpus(&recs, cfg.beam)? {
                text.push_str(&format!("{id}\t{cap}\n"));
            }
            emit(g, &text)?;
        }
        Command::Evaluate { candidates, references, corpus } => {
            emit(g, &evaluate(&candidates, references.as_deref(), corpus.as_deref(), cfg.k_max)?)?;
        }
        Command::GradCheck { corpus, tolerance } => {
            emit(g, &grad_check(corpus.as_deref(), &cfg, tolerance)?)?;
        }
        Command::DumpGraph { checkpoint, corpus, image } => {
            let model = CaptionModel::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let recs = load_corpus(&corpus, cfg.k_max)?;
            let mut m = model;
            if g.level.is_some() {
                m.config.level = relcap::graph::GraphLevel::parse(&cfg.level)?;
            }
            let contexts = m.prepare(&recs)?;
            let ctx = match &image {
                Some(id) => contexts
                    .iter()
                    .find(|c| c.members.iter().any(|&i| &recs[i].image_id == id))
                    .ok_or_else(|| Error::validation(format!("image {id} not in corpus")))?,
                None => contexts
                    .first()
                    .ok_or_else(|| Error::validation("corpus is empty"))?,
            };
            emit(g, &ctx.graph.dump())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
