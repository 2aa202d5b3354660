use super::kernels;
use super::params::{Gradients, ParamId, ParamStore};
use super::{as_matrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, lens: Vec<usize>, outer: usize, inner: usize },
    Transpose(Var),
    MaskedFill { x: Var, mask: Vec<bool> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Sum(Var),
    Mean(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    Scatter { x: Var, positions: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    // Empty for parameter nodes; their values live in the store.
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one reverse sweep.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::standalone()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    /// A tape with no parameter store; only constants can be recorded.
    pub fn standalone() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let Tensor { shape, data, .. } = tensor;
        self.push(shape, data, Op::Leaf, &[])
    }

    /// Records parameter `id`. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(id.0).copied().flatten() {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let shape = store.get(id).shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: Vec::new(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("param node without store").get(id).data(),
            _ => &node.data,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        as_matrix(op, self.shape(v), &[])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.shape(a), self.shape(b))?;
        let (k2, n) = as_matrix("matmul", self.shape(b), self.shape(a))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(op, a, b)?;
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.value(row).len() != cols {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok(cols)
    }

    /// Adds a bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.row_broadcast("add_row", x, bias)?;
        let b = self.value(bias);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Multiplies every row of `x` elementwise by `gain`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let cols = self.row_broadcast("mul_row", x, gain)?;
        let g = self.value(gain);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % cols])
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow(x, gain), &[x, gain]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| kernels::sigmoid(*v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    /// Pre-affine layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap_or(&1);
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        let inv_std = src
            .chunks(cols)
            .zip(out.chunks_mut(cols))
            .map(|(row, o)| kernels::layer_norm_row(row, o))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::validation(format!(
                "embedding id {bad} out of range for table of {vocab} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            lens.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, len) in inputs.iter().zip(&lens) {
                let chunk = len * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                lens,
                outer,
                inner,
            },
            inputs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", x)?;
        let out = kernels::transpose(self.value(x), m, n);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), &[x]))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .iter()
            .zip(mask)
            .map(|(v, m)| if *m { fill } else { *v })
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
            &[x],
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        let mut slice = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * len * inner + k * inner + i;
                for (k, s) in slice.iter_mut().enumerate() {
                    *s = out[idx(k)];
                }
                kernels::softmax_in_place(&mut slice);
                for (k, s) in slice.iter().enumerate() {
                    out[idx(k)] = *s;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean(x), &[x])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::validation(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, end]));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        Ok(self.push(vec![m, end - start], out, Op::SliceCols { x, start }, &[x]))
    }

    /// Writes the elements of `x` into flat `positions` of a copy of `base`.
    pub fn scatter(&mut self, x: Var, base: &Tensor, positions: &[usize]) -> Result<Var> {
        if positions.len() != self.value(x).len() {
            return Err(Error::shape("scatter", self.shape(x), &[positions.len()]));
        }
        let mut seen = vec![false; base.numel()];
        for &p in positions {
            if p >= base.numel() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::validation(format!("scatter position {p} invalid or repeated")));
            }
        }
        let mut out = base.data().to_vec();
        for (&p, v) in positions.iter().zip(self.value(x)) {
            out[p] = *v;
        }
        Ok(self.push(
            base.shape().to_vec(),
            out,
            Op::Scatter {
                x,
                positions: positions.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows whose target is `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &[rows, vocab], &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::validation(format!(
                "target id {bad} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut nll = 0.0;
        let mut count = 0;
        for (row, t) in probs.chunks_mut(vocab).zip(targets) {
            let lse = kernels::log_sum_exp(row);
            if let Some(t) = t {
                nll += lse - row[*t];
                count += 1;
            }
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        if count == 0 {
            return Err(Error::validation("cross_entropy with no non-pad targets"));
        }
        let loss = nll / count as f64;
        Ok(self.push(
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Returns per-parameter gradients;
    /// the tape itself is left intact so the sweep can be repeated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n_params = self.params.map_or(0, ParamStore::len);
        let mut out = Gradients(vec![None; n_params]);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        // Materialize zeros for parameters that did not take part.
        if let Some(store) = self.params {
            for id in store.ids() {
                if out.0[id.0].is_none() {
                    out.0[id.0] = Some(vec![0.0; store.get(id).numel()]);
                }
            }
        }
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_bt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(av, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * o;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * o;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let cols = gb.len();
                    for (i, d) in g.iter().enumerate() {
                        gb[i % cols] += d;
                    }
                }
            }
            Op::MulRow(x, gain) => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let cols = gv.len();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, d) in g.iter().enumerate() {
                        gx[i] += d * gv[i % cols];
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (i, d) in g.iter().enumerate() {
                        gg[i % cols] += d * xv[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d * c);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, d), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *a += d;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, d), y) in gx.iter_mut().zip(g).zip(&node.data) {
                        *a += d * y * (1.0 - y);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = *node.shape.last().unwrap_or(&1);
                    let n = cols as f64;
                    for (r, s) in inv_std.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let (dy, y) = (&g[span.clone()], &node.data[span.clone()]);
                        let sum_dy: f64 = dy.iter().sum();
                        let sum_dyy: f64 = kernels::dot(dy, y);
                        for (k, a) in gx[span].iter_mut().enumerate() {
                            *a += s / n * (n * dy[k] - sum_dy - y[k] * sum_dyy);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = self.slot(grads, *table) {
                    let dim = self.shape(*table)[1];
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * dim..(i + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (v, len) in inputs.iter().zip(lens) {
                    if let Some(gv) = self.slot(grads, *v) {
                        let chunk = len * inner;
                        for o in 0..*outer {
                            let src = o * total * inner + offset * inner;
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    add_into(gx, &kernels::transpose(g, m, n));
                }
            }
            Op::MaskedFill { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, d), m) in gx.iter_mut().zip(g).zip(mask) {
                        if !m {
                            *a += d;
                        }
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = &node.data;
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let idx = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..*len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..*len {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::SelectRows { x, rows } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let n = node.shape[1];
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * n..(r + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    let w = node.shape[1];
                    for r in 0..node.shape[0] {
                        add_into(
                            &mut gx[r * n + start..r * n + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Scatter { x, positions } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (a, &p) in gx.iter_mut().zip(positions) {
                        *a += g[p];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let vocab = self.shape(*logits)[1];
                    let scale = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut gl[r * vocab..(r + 1) * vocab];
                        for (k, a) in row.iter_mut().enumerate() {
                            let onehot = if k == *t { 1.0 } else { 0.0 };
                            *a += scale * (probs[r * vocab + k] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], delta: &[f64]) {
    acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d);
}
