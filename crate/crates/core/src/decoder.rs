//! Transformer caption decoder: token embeddings plus sinusoidal positions,
//! post-norm layers of masked self-attention, cross-attention over encoder
//! rows and a feed-forward block, then a vocabulary projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{kernels, ParamId, ParamStore, Tape, Tensor, Var};
use crate::vocab::START;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Start the output projection at zero so untrained outputs are uniform.
    pub zero_output: bool,
}

impl DecoderConfig {
    pub fn new(d_model: usize, vocab_size: usize) -> Self {
        Self {
            d_model,
            n_layers: 2,
            n_heads: 4,
            d_ff: 4 * d_model,
            max_len: 32,
            vocab_size,
            zero_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::validation(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::validation("decoder sizes must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Sinusoidal position code for position `pos`.
pub fn position_encoding(pos: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|i| {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Single-head `softmax(q kᵀ / sqrt(d) + mask) v` on plain matrices.
/// `mask[r * keys + c] = true` hides key `c` from query `r`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (nq, d) = (q.rows(), q.cols());
    let nk = k.rows();
    if k.cols() != d || v.rows() != nk {
        return Err(Error::shape("attention", q.shape(), k.shape()));
    }
    if mask.is_some_and(|m| m.len() != nq * nk) {
        return Err(Error::shape("attention mask", &[nq, nk], &[mask.map_or(0, <[bool]>::len)]));
    }
    let dv = v.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; nq * dv];
    let mut w = vec![0.0; nk];
    for r in 0..nq {
        for c in 0..nk {
            let hidden = mask.is_some_and(|m| m[r * nk + c]);
            w[c] = if hidden {
                f64::NEG_INFINITY
            } else {
                kernels::dot(q.row(r), k.row(c)) * scale
            };
        }
        kernels::softmax_in_place(&mut w);
        for (c, &p) in w.iter().enumerate() {
            for (o, x) in out[r * dv..(r + 1) * dv].iter_mut().zip(v.row(c)) {
                *o += p * x;
            }
        }
    }
    Tensor::new(vec![nq, dv], out)
}

#[derive(Clone, Debug)]
struct AttentionParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: AttentionParams,
    cross_attn: AttentionParams,
    ff_in: ParamId,
    ff_in_bias: ParamId,
    ff_out: ParamId,
    ff_out_bias: ParamId,
    norms: [Norm; 3],
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub config: DecoderConfig,
    embedding: ParamId,
    layers: Vec<DecoderLayer>,
    out_weight: ParamId,
    out_bias: ParamId,
    positions: Vec<Vec<f64>>,
}

impl TransformerDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        let embedding = store.add_uniform(format!("{prefix}.embedding"), &[config.vocab_size, d], 1.0, rng);
        let attn = |store: &mut ParamStore, name: String, rng: &mut R| AttentionParams {
            wq: store.add_uniform(format!("{name}.query"), &[d, d], bound, rng),
            wk: store.add_uniform(format!("{name}.key"), &[d, d], bound, rng),
            wv: store.add_uniform(format!("{name}.value"), &[d, d], bound, rng),
            wo: store.add_uniform(format!("{name}.output"), &[d, d], bound, rng),
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("{prefix}.layer{l}");
            let self_attn = attn(store, format!("{p}.self"), rng);
            let cross_attn = attn(store, format!("{p}.cross"), rng);
            let norms = [0, 1, 2].map(|k| Norm {
                gain: store.add_filled(format!("{p}.norm{k}.gain"), &[d], 1.0),
                bias: store.add_zeros(format!("{p}.norm{k}.bias"), &[d]),
            });
            layers.push(DecoderLayer {
                self_attn,
                cross_attn,
                ff_in: store.add_uniform(format!("{p}.ff_in"), &[d, config.d_ff], bound, rng),
                ff_in_bias: store.add_zeros(format!("{p}.ff_in_bias"), &[config.d_ff]),
                ff_out: store.add_uniform(
                    format!("{p}.ff_out"),
                    &[config.d_ff, d],
                    1.0 / (config.d_ff as f64).sqrt(),
                    rng,
                ),
                ff_out_bias: store.add_zeros(format!("{p}.ff_out_bias"), &[d]),
                norms,
            });
        }
        let out_weight = if config.zero_output {
            store.add_zeros(format!("{prefix}.out_weight"), &[d, config.vocab_size])
        } else {
            store.add_uniform(format!("{prefix}.out_weight"), &[d, config.vocab_size], bound, rng)
        };
        let out_bias = store.add_zeros(format!("{prefix}.out_bias"), &[config.vocab_size]);
        let positions = (0..config.max_len).map(|p| position_encoding(p, d)).collect();
        Ok(Self {
            config,
            embedding,
            layers,
            out_weight,
            out_bias,
            positions,
        })
    }

    fn check_prefix(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::validation("decoder prefix is empty"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::validation(format!(
                "prefix length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::validation(format!("token id {t} outside vocabulary")));
        }
        Ok(())
    }

    fn check_memory(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.d_model {
            return Err(Error::shape("decoder memory", shape, &[1, self.config.d_model]));
        }
        Ok(())
    }

    fn tape_attention(&self, tape: &mut Tape<'_>, p: &AttentionParams, x: Var, mem: Var, causal: bool) -> Result<Var> {
        let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(mem, wk)?;
        let v = tape.matmul(mem, wv)?;
        let (nq, nk) = (tape.shape(x)[0], tape.shape(mem)[0]);
        let dh = self.config.head_dim();
        let mask: Option<Vec<bool>> =
            causal.then(|| (0..nq * nk).map(|idx| idx % nk > idx / nk).collect());
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, 1.0 / (dh as f64).sqrt());
            if let Some(m) = &mask {
                s = tape.masked_fill(s, m, f64::NEG_INFINITY)?;
            }
            let w = tape.softmax(s, 1)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let cat = tape.concat(&heads, 1)?;
        tape.matmul(cat, wo)
    }

    fn tape_norm(&self, tape: &mut Tape<'_>, n: &Norm, x: Var) -> Result<Var> {
        let y = tape.layer_norm(x);
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        let y = tape.mul_row(y, g)?;
        tape.add_row(y, b)
    }

    /// Teacher-forced logits `[T, |V|]` for every position of `tokens`.
    pub fn forward(&self, tape: &mut Tape<'_>, tokens: &[usize], memory: Var) -> Result<Var> {
        self.check_prefix(tokens)?;
        self.check_memory(tape.shape(memory))?;
        let d = self.config.d_model;
        let table = tape.param(self.embedding);
        let emb = tape.embedding(table, tokens)?;
        let pos: Vec<f64> = self.positions[..tokens.len()].iter().flatten().copied().collect();
        let pos = tape.constant(Tensor::new(vec![tokens.len(), d], pos)?);
        let mut x = tape.add(emb, pos)?;
        for layer in &self.layers {
            let a = self.tape_attention(tape, &layer.self_attn, x, x, true)?;
            let r = tape.add(x, a)?;
            x = self.tape_norm(tape, &layer.norms[0], r)?;
            let c = self.tape_attention(tape, &layer.cross_attn, x, memory, false)?;
            let r = tape.add(x, c)?;
            x = self.tape_norm(tape, &layer.norms[1], r)?;
            let (w1, b1, w2, b2) = (
                tape.param(layer.ff_in),
                tape.param(layer.ff_in_bias),
                tape.param(layer.ff_out),
                tape.param(layer.ff_out_bias),
            );
            let h = tape.matmul(x, w1)?;
            let h = tape.add_row(h, b1)?;
            let h = tape.relu(h);
            let f = tape.matmul(h, w2)?;
            let f = tape.add_row(f, b2)?;
            let r = tape.add(x, f)?;
            x = self.tape_norm(tape, &layer.norms[2], r)?;
        }
        let w = tape.param(self.out_weight);
        let b = tape.param(self.out_bias);
        let logits = tape.matmul(x, w)?;
        tape.add_row(logits, b)
    }

    /// Next-token distribution after `prefix`, recomputed from scratch.
    pub fn decode_step(&self, store: &ParamStore, prefix: &[usize], memory: &Tensor) -> Result<Vec<f64>> {
        if prefix.first() != Some(&START) {
            return Err(Error::validation("decoder prefix must start with <S>"));
        }
        let mut state = self.start(store, memory)?;
        let mut logits = Vec::new();
        for &t in prefix {
            logits = self.step(store, &mut state, t)?;
        }
        kernels::softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Fresh incremental state with cross-attention keys and values
    /// precomputed from `memory`.
    pub fn start(&self, store: &ParamStore, memory: &Tensor) -> Result<DecoderState> {
        self.check_memory(memory.shape())?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerCache {
                    self_keys: Vec::new(),
                    self_values: Vec::new(),
                    cross_keys: memory.matmul(store.get(l.cross_attn.wk))?.into_data(),
                    cross_values: memory.matmul(store.get(l.cross_attn.wv))?.into_data(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(DecoderState {
            tokens: Vec::new(),
            d_model: self.config.d_model,
            layers,
        })
    }

    /// Appends `token` and returns logits for the following position.
    pub fn step(&self, store: &ParamStore, state: &mut DecoderState, token: usize) -> Result<Vec<f64>> {
        let pos = state.tokens.len();
        state.tokens.push(token);
        if let Err(e) = self.check_prefix(&state.tokens) {
            state.tokens.pop();
            return Err(e);
        }
        let d = self.config.d_model;
        let table = store.get(self.embedding).data();
        let mut x: Vec<f64> = table[token * d..(token + 1) * d]
            .iter()
            .zip(&self.positions[pos])
            .map(|(a, b)| a + b)
            .collect();
        for (layer, cache) in self.layers.iter().zip(state.layers.iter_mut()) {
            let p = &layer.self_attn;
            let q = vec_mat(&x, store.get(p.wq));
            cache.self_keys.extend(vec_mat(&x, store.get(p.wk)));
            cache.self_values.extend(vec_mat(&x, store.get(p.wv)));
            let ctx = self.row_attention(&q, &cache.self_keys, &cache.self_values);
            let a = vec_mat(&ctx, store.get(p.wo));
            x = self.row_norm(store, &layer.norms[0], &add(&x, &a));

            let p = &layer.cross_attn;
            let q = vec_mat(&x, store.get(p.wq));
            let ctx = self.row_attention(&q, &cache.cross_keys, &cache.cross_values);
            let c = vec_mat(&ctx, store.get(p.wo));
            x = self.row_norm(store, &layer.norms[1], &add(&x, &c));

            let mut h = add(&vec_mat(&x, store.get(layer.ff_in)), store.get(layer.ff_in_bias).data());
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let f = add(&vec_mat(&h, store.get(layer.ff_out)), store.get(layer.ff_out_bias).data());
            x = self.row_norm(store, &layer.norms[2], &add(&x, &f));
        }
        Ok(add(&vec_mat(&x, store.get(self.out_weight)), store.get(self.out_bias).data()))
    }

    fn row_attention(&self, q: &[f64], keys: &[f64], values: &[f64]) -> Vec<f64> {
        let d = self.config.d_model;
        let dh = self.config.head_dim();
        let n = keys.len() / d;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; d];
        let mut w = vec![0.0; n];
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            for (r, wr) in w.iter_mut().enumerate() {
                *wr = kernels::dot(&q[cols.clone()], &keys[r * d + cols.start..r * d + cols.end]) * scale;
            }
            kernels::softmax_in_place(&mut w);
            for (r, &p) in w.iter().enumerate() {
                for c in cols.clone() {
                    out[c] += p * values[r * d + c];
                }
            }
        }
        out
    }

    fn row_norm(&self, store: &ParamStore, n: &Norm, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; x.len()];
        kernels::layer_norm_row(x, &mut y);
        let (g, b) = (store.get(n.gain).data(), store.get(n.bias).data());
        y.iter_mut()
            .zip(g.iter().zip(b))
            .for_each(|(v, (g, b))| *v = *v * g + b);
        y
    }
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    let mut out = vec![0.0; n];
    kernels::matmul(x, w.data(), &mut out, 1, k, n);
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Clone, Debug)]
struct LayerCache {
    self_keys: Vec<f64>,
    self_values: Vec<f64>,
    cross_keys: Vec<f64>,
    cross_values: Vec<f64>,
}

/// Generated prefix plus per-layer key/value caches.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub tokens: Vec<usize>,
    d_model: usize,
    layers: Vec<LayerCache>,
}

impl DecoderState {
    /// Number of positions held in the self-attention cache.
    pub fn cache_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.self_keys.len() / self.d_model)
    }
}
