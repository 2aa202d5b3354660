//! Greedy and beam decoding over any autoregressive scorer.

use crate::error::{Error, Result};
use crate::tensor::kernels;

/// An autoregressive model exposing next-token log-probabilities.
pub trait SequenceModel {
    type State: Clone;

    /// State after the start token and the log-probabilities of the first
    /// generated token.
    fn initial(&self) -> Result<(Self::State, Vec<f64>)>;

    /// Appends `token` and returns log-probabilities of the next one.
    fn extend(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, ending with the end token when finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

/// Appends the argmax token until `end` or `max_len` generated tokens.
pub fn greedy_decode<M: SequenceModel>(model: &M, end: usize, max_len: usize) -> Result<Hypothesis> {
    let (mut state, mut logp) = model.initial()?;
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while hyp.tokens.len() < max_len {
        let tok = kernels::argmax(&logp);
        hyp.tokens.push(tok);
        hyp.log_prob += logp[tok];
        if tok == end {
            hyp.finished = true;
            break;
        }
        if hyp.tokens.len() < max_len {
            logp = model.extend(&mut state, tok)?;
        }
    }
    Ok(hyp)
}

struct Live<S> {
    hyp: Hypothesis,
    state: S,
    next: Vec<f64>,
}

/// Beam search on cumulative log-probability without length normalization.
/// Finished hypotheses leave the beam; the best finished one is returned,
/// or the best unfinished one if none finished within `max_len`.
pub fn beam_decode<M: SequenceModel>(model: &M, beam: usize, end: usize, max_len: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::validation("beam size must be at least 1"));
    }
    let (state, next) = model.initial()?;
    let mut live = vec![Live {
        hyp: Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            finished: false,
        },
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, l) in live.iter().enumerate() {
            for (t, &lp) in l.next.iter().enumerate() {
                if lp > f64::NEG_INFINITY {
                    cands.push((l.hyp.log_prob + lp, h, t));
                }
            }
        }
        // Descending score; ties keep beam then token order.
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next_live = Vec::with_capacity(beam);
        for (score, h, t) in cands {
            if next_live.len() == beam {
                break;
            }
            let mut hyp = live[h].hyp.clone();
            hyp.tokens.push(t);
            hyp.log_prob = score;
            if t == end {
                hyp.finished = true;
                finished.push(hyp);
                continue;
            }
            let mut state = live[h].state.clone();
            let next = if step + 1 < max_len {
                model.extend(&mut state, t)?
            } else {
                Vec::new()
            };
            next_live.push(Live { hyp, state, next });
        }
        live = next_live;
        let best_finished = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
        // Scores only decrease as tokens are appended.
        if live.is_empty() || best_finished >= best_live {
            break;
        }
    }
    let pick = |hs: Vec<Hypothesis>| {
        hs.into_iter()
            .fold(None::<Hypothesis>, |best, h| match best {
                Some(b) if b.log_prob >= h.log_prob => Some(b),
                _ => Some(h),
            })
    };
    match pick(finished) {
        Some(h) => Ok(h),
        None => pick(live.into_iter().map(|l| l.hyp).collect())
            .ok_or_else(|| Error::numerical("beam search produced no hypothesis")),
    }
}

/// Sequence model defined by a table of next-token log-probabilities keyed
/// on the generated prefix.
#[derive(Clone, Debug)]
pub struct TableModel {
    pub table: std::collections::HashMap<Vec<usize>, Vec<f64>>,
}

impl SequenceModel for TableModel {
    type State = Vec<usize>;

    fn initial(&self) -> Result<(Vec<usize>, Vec<f64>)> {
        let p = self
            .table
            .get(&Vec::new())
            .cloned()
            .ok_or_else(|| Error::validation("table has no entry for the empty prefix"))?;
        Ok((Vec::new(), p))
    }

    fn extend(&self, state: &mut Vec<usize>, token: usize) -> Result<Vec<f64>> {
        state.push(token);
        self.table
            .get(state)
            .cloned()
            .ok_or_else(|| Error::validation(format!("table has no entry for prefix {state:?}")))
    }
}
