//! Teacher-forced cross-entropy training of the graph encoder and decoder.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::corpus::SceneRecord;
use crate::error::{Error, Result};
use crate::model::{CaptionModel, PreparedContext};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{kernels, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a `min_delta` validation improvement before stopping;
    /// 0 never stops early.
    pub patience: usize,
    pub min_delta: f64,
    /// Restore the parameters of the best validation epoch when training ends.
    pub keep_best: bool,
    pub seed: u64,
}

impl TrainOptions {
    pub fn from_config(c: &Config) -> Self {
        Self {
            adam: c.adam(),
            batch_size: c.batch_size,
            epochs: c.epochs,
            patience: c.patience,
            min_delta: c.min_delta,
            keep_best: c.keep_best,
            seed: c.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        let val = self.val_loss.map_or("-".to_string(), |v| format!("{v:.10}"));
        format!("{}\t{:.10}\t{val}\t{:.3}", self.epoch, self.train_loss, self.wall_seconds)
    }
}

/// Mean negative log-likelihood of `targets` under `distributions`
/// (one row per position), skipping `None` targets.
pub fn xe_loss(distributions: &[Vec<f64>], targets: &[Option<usize>]) -> Result<f64> {
    if distributions.len() != targets.len() {
        return Err(Error::shape("xe_loss", &[distributions.len()], &[targets.len()]));
    }
    let (mut total, mut n) = (0.0, 0usize);
    for (p, t) in distributions.iter().zip(targets) {
        let Some(t) = *t else { continue };
        let prob = p
            .get(t)
            .ok_or_else(|| Error::validation(format!("target id {t} outside vocabulary of {}", p.len())))?;
        total -= prob.ln();
        n += 1;
    }
    if n == 0 {
        return Err(Error::validation("xe_loss with no scored targets"));
    }
    Ok(total / n as f64)
}

/// One caption of one image: `(context, image corpus index, caption index)`.
type Unit = (usize, usize, usize);

fn units(contexts: &[PreparedContext], corpus: &[SceneRecord]) -> Vec<Unit> {
    let mut out = Vec::new();
    for (c, ctx) in contexts.iter().enumerate() {
        for &m in &ctx.members {
            for k in 0..corpus[m].captions.len() {
                out.push((c, m, k));
            }
        }
    }
    out
}

/// One optimizer step on `batch`; returns the batch's summed token NLL and
/// token count.
fn train_step(
    model: &mut CaptionModel,
    adam: &mut Adam,
    contexts: &[PreparedContext],
    corpus: &[SceneRecord],
    batch: &[Unit],
) -> Result<(f64, usize)> {
    let (grads, loss, tokens) = {
        let mut tape = Tape::new(&model.params);
        let mut encoded: Vec<(usize, crate::tensor::Var)> = Vec::new();
        let mut logits = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for &(c, m, k) in batch {
            let hidden = match encoded.iter().find(|(ec, _)| *ec == c) {
                Some(&(_, h)) => h,
                None => {
                    let h = model.encode_on_tape(&mut tape, &contexts[c])?;
                    encoded.push((c, h));
                    h
                }
            };
            let ids = model.encode_caption(&corpus[m].captions[k]);
            logits.push(model.caption_logits(&mut tape, &contexts[c], hidden, &corpus[m].image_id, &ids)?);
            targets.extend(ids[1..].iter().map(|&t| Some(t)));
        }
        let all = tape.concat(&logits, 0)?;
        let loss = tape.cross_entropy(all, &targets)?;
        let value = tape.scalar(loss);
        (tape.backward(loss)?, value, targets.len())
    };
    if !loss.is_finite() {
        return Err(Error::numerical(format!("training loss is {loss}")));
    }
    model.params.zero_grads();
    model.params.accumulate(&grads);
    adam.step(&mut model.params)?;
    Ok((loss * tokens as f64, tokens))
}

/// Trains `model` on `train`, scoring `val` after each epoch, and writes one
/// metrics line per epoch to `metrics`.
pub fn train_model(
    model: &mut CaptionModel,
    train: &[SceneRecord],
    val: &[SceneRecord],
    opts: &TrainOptions,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    if train.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    let train_ctx = model.prepare(train)?;
    let val_ctx = if val.is_empty() {
        Vec::new()
    } else {
        model.prepare(val)?
    };
    let mut adam = Adam::new(opts.adam.clone(), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order = units(&train_ctx, train);
    let started = Instant::now();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best = f64::INFINITY;
    let mut best_params = None;
    let mut stale = 0;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let (l, n) = train_step(model, &mut adam, &train_ctx, train, batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg} (epoch {epoch}, seed {}, lr {}, batch {})",
                    opts.seed, opts.adam.lr, opts.batch_size
                )),
                other => other,
            })?;
            total += l;
            tokens += n;
        }
        let val_loss = if val_ctx.is_empty() {
            None
        } else {
            Some(model.mean_loss(&val_ctx, val)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss: total / tokens as f64,
            val_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("{}", rec.to_line());
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{}", rec.to_line()).map_err(|e| Error::io("metrics log", e))?;
        }
        history.push(rec);
        if let Some(v) = val_loss {
            if opts.keep_best && v < best {
                best_params = Some(model.params.clone());
            }
        }
        if let (Some(v), true) = (val_loss, opts.patience > 0) {
            if v < best - opts.min_delta {
                stale = 0;
            } else {
                stale += 1;
                if stale >= opts.patience {
                    log::info!("validation loss stalled for {stale} epochs; stopping");
                    break;
                }
            }
        }
        if let Some(v) = val_loss {
            best = best.min(v);
        }
    }
    if let Some(p) = best_params {
        model.params = p;
    }
    Ok(history)
}

/// Metrics file header: the run configuration as `#` comments, then the
/// column names.
pub fn metrics_header(config: &Config) -> String {
    let mut s = String::from("# relcap-metrics 1\n");
    for (k, v) in config.entries() {
        s.push_str(&format!("# {k} = {v}\n"));
    }
    s.push_str("# epoch\ttrain_loss\tval_loss\twall_seconds\n");
    s
}

/// Probability rows of the teacher-forced decode of `caption`.
pub fn caption_distributions(model: &CaptionModel, ctx: &PreparedContext, image_id: &str, caption: &str) -> Result<Vec<Vec<f64>>> {
    let ids = model.encode_caption(caption);
    let mut tape = Tape::new(&model.params);
    let hidden = model.encode_on_tape(&mut tape, ctx)?;
    let logits = model.caption_logits(&mut tape, ctx, hidden, image_id, &ids)?;
    let v = model.vocab.len();
    Ok(tape
        .value(logits)
        .chunks(v)
        .map(|row| {
            let mut p = row.to_vec();
            kernels::softmax_in_place(&mut p);
            p
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xe_closed_forms() {
        let certain = vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]];
        assert_eq!(xe_loss(&certain, &[Some(1), Some(0)]).unwrap(), 0.0);
        let uniform = vec![vec![0.01; 100]; 3];
        let l = xe_loss(&uniform, &[Some(5), None, Some(99)]).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        assert!(xe_loss(&uniform, &[Some(100), None, None]).is_err());
        assert!(xe_loss(&uniform, &[None, None, None]).is_err());
    }
}
