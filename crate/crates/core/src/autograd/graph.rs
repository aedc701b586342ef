use super::kernels::{axpy, dot, linear_backward_input, linear_backward_weight, linear_forward};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    StraightThrough { x: Var, mask: Option<Vec<bool>> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Embedding { .. } => "embedding",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gelu(..) => "gelu",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Operation record built while the forward pass executes.
///
/// Nodes are appended in execution order, so inputs always precede their
/// consumers and the reverse sweep is a single backwards scan.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Registers a parameter; its gradient is tracked iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push_unchecked(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::config(format!("constant of shape {shape:?} given {} values", data.len())));
        }
        Ok(self.push_unchecked(data, shape, Op::Leaf, false))
    }

    fn push_unchecked(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                op.name(),
                format!("non-finite output at element {bad} (node {})", self.nodes.len()),
            ));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_unchecked(value, shape, op, needs_grad))
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::config(format!("{what}: expected a matrix, got shape {other:?}"))),
        }
    }

    /// `x · wᵀ` for `x: [n, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, input) = self.dims2(x, "linear input")?;
        let (out, w_in) = self.dims2(w, "linear weight")?;
        if w_in != input {
            return Err(Error::config(format!(
                "linear: input width {input} does not match weight [{out}, {w_in}]"
            )));
        }
        let y = linear_forward(self.value(x), self.value(w), n, input, out);
        self.push(y, vec![n, out], Op::Linear { x, w }, &[x, w])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let y = self.value(a).iter().map(|&p| p * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(y, shape, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = T::zero();
        for &v in self.value(a) {
            s += v;
        }
        self.push(vec![s], vec![1], Op::Sum(a), &[a])
    }

    /// Gathers rows of `table: [rows, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding table")?;
        if ids.is_empty() {
            return Err(Error::data("embedding: no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::config(format!("embedding: id {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut y = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            y.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(
            y,
            vec![ids.len(), d],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Row-wise RMS normalization with a learned gain of width `d`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "rms_norm")?;
        if self.value(gain).len() != d {
            return Err(Error::config(format!("rms_norm: gain width {} != {d}", self.value(gain).len())));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut inv = Vec::with_capacity(n);
        let mut y = vec![T::zero(); n * d];
        let dn = T::of(d as f64);
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let ms = dot(row, row) / dn;
            let ir = T::one() / (ms + T::of(eps)).sqrt();
            inv.push(ir);
            for j in 0..d {
                y[r * d + j] = row[j] * ir * gv[j];
            }
        }
        self.push(y, vec![n, d], Op::RmsNorm { x, gain, inv_rms: inv }, &[x, gain])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let y = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(y, shape, Op::Gelu(x), &[x])
    }

    /// Causal multi-head attention over `q, k, v: [batch * seq, d]`.
    /// Head `h` uses columns `h * d/heads .. (h + 1) * d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (n, d) = self.dims2(q, "attention q")?;
        self.same_shape(q, k, "attention k")?;
        self.same_shape(q, v, "attention v")?;
        if n != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: [{n}, {d}] incompatible with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); n * d];
        let mut row = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for t in 0..seq {
                    let qrow = &qv[(b * seq + t) * d + h * dh..][..dh];
                    let mut m = T::neg_infinity();
                    for s in 0..=t {
                        let krow = &kv[(b * seq + s) * d + h * dh..][..dh];
                        row[s] = dot(qrow, krow) * scale;
                        if row[s] > m {
                            m = row[s];
                        }
                    }
                    let mut z = T::zero();
                    for s in 0..=t {
                        row[s] = (row[s] - m).exp();
                        z += row[s];
                    }
                    let orow = &mut out[(b * seq + t) * d + h * dh..][..dh];
                    for s in 0..=t {
                        let p = row[s] / z;
                        probs[base + t * seq + s] = p;
                        axpy(p, &vv[(b * seq + s) * d + h * dh..][..dh], orow);
                    }
                }
            }
        }
        self.push(
            out,
            vec![n, d],
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean negative log-likelihood over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, vocab) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::config(format!("cross_entropy: {} targets for {n} rows", targets.len())));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::data("cross_entropy: batch has no prediction targets"));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= vocab) {
            return Err(Error::config(format!("cross_entropy: target {bad} outside vocabulary {vocab}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * vocab];
        let mut total = T::zero();
        for (r, tgt) in targets.iter().enumerate() {
            let Some(t) = *tgt else { continue };
            let row = &lv[r * vocab..(r + 1) * vocab];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            let pr = &mut probs[r * vocab..(r + 1) * vocab];
            for (p, &l) in pr.iter_mut().zip(row) {
                *p = (l - m).exp();
                z += *p;
            }
            for p in pr.iter_mut() {
                *p /= z;
            }
            total += m + z.ln() - row[t];
        }
        let loss = total / T::of(count as f64);
        self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Replaces the value of `x` by `values` in the forward pass while the
    /// backward pass treats the substitution as the identity (optionally
    /// zeroing the gradient where `mask` is false).
    pub fn straight_through(&mut self, x: Var, values: Vec<T>, mask: Option<Vec<bool>>) -> Result<Var> {
        if values.len() != self.value(x).len() || mask.as_ref().is_some_and(|m| m.len() != values.len()) {
            return Err(Error::config("straight_through: length mismatch"));
        }
        let shape = self.shape(x).to_vec();
        self.push(values, shape, Op::StraightThrough { x, mask }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients are available
    /// through [`Graph::grad`]; a graph can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same graph".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &upstream)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, idx: usize, up: &[T]) -> Result<()> {
        // Ops are moved out temporarily so their saved tensors can be read
        // while the input nodes are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let (n, input) = self.dims2(*x, "linear")?;
                let out = self.nodes[w.0].shape[0];
                if self.wants(*x) {
                    let dx = linear_backward_input(up, self.value(*w), n, input, out);
                    self.accumulate(*x, dx);
                }
                if self.wants(*w) {
                    let dw = linear_backward_weight(up, self.value(*x), n, input, out);
                    self.accumulate(*w, dw);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, up.to_vec());
                self.accumulate(*b, up.to_vec());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let g = up.iter().zip(self.value(*b)).map(|(&u, &q)| u * q).collect();
                    self.accumulate(*a, g);
                }
                if self.wants(*b) {
                    let g = up.iter().zip(self.value(*a)).map(|(&u, &p)| u * p).collect();
                    self.accumulate(*b, g);
                }
            }
            Op::Scale(a, c) => {
                let g = up.iter().map(|&u| u * *c).collect();
                self.accumulate(*a, g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(*a, vec![up[0]; n]);
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut g = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[i * d + j] += up[r * d + j];
                    }
                }
                self.accumulate(*table, g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (n, d) = self.dims2(*x, "rms_norm")?;
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dn = T::of(d as f64);
                let mut dx = vec![T::zero(); n * d];
                let mut dg = vec![T::zero(); d];
                for r in 0..n {
                    let ir = inv_rms[r];
                    let row = &xv[r * d..(r + 1) * d];
                    let ur = &up[r * d..(r + 1) * d];
                    let mut s = T::zero();
                    for j in 0..d {
                        s += gv[j] * ur[j] * row[j];
                        dg[j] += ur[j] * row[j] * ir;
                    }
                    let k = s * ir * ir * ir / dn;
                    for j in 0..d {
                        dx[r * d + j] = ir * gv[j] * ur[j] - row[j] * k;
                    }
                }
                let (x, gain) = (*x, *gain);
                if self.wants(x) {
                    self.accumulate(x, dx);
                }
                if self.wants(gain) {
                    self.accumulate(gain, dg);
                }
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let g = self
                    .value(*x)
                    .iter()
                    .zip(up)
                    .map(|(&v, &u)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * a * v * v);
                        u * d
                    })
                    .collect();
                self.accumulate(*x, g);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = self.nodes[q.0].shape[1];
                let dh = d / heads;
                let scale = T::of(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let base = (b * heads + h) * seq * seq;
                        for t in 0..seq {
                            let off_t = (b * seq + t) * d + h * dh;
                            let urow = &up[off_t..off_t + dh];
                            let prow = &probs[base + t * seq..base + t * seq + seq];
                            let mut rowdot = T::zero();
                            for s in 0..=t {
                                let off_s = (b * seq + s) * d + h * dh;
                                dp[s] = dot(urow, &vv[off_s..off_s + dh]);
                                rowdot += prow[s] * dp[s];
                                axpy(prow[s], urow, &mut dv[off_s..off_s + dh]);
                            }
                            for s in 0..=t {
                                let off_s = (b * seq + s) * d + h * dh;
                                let ds = prow[s] * (dp[s] - rowdot) * scale;
                                axpy(ds, &kv[off_s..off_s + dh], &mut dq[off_t..off_t + dh]);
                                axpy(ds, &qv[off_t..off_t + dh], &mut dk[off_s..off_s + dh]);
                            }
                        }
                    }
                }
                let (q, k, v) = (*q, *k, *v);
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let vocab = self.nodes[logits.0].shape[1];
                let c = up[0] / T::of(*count as f64);
                let mut g = vec![T::zero(); probs.len()];
                for (r, tgt) in targets.iter().enumerate() {
                    let Some(t) = *tgt else { continue };
                    for j in 0..vocab {
                        g[r * vocab + j] = probs[r * vocab + j] * c;
                    }
                    g[r * vocab + t] -= c;
                }
                self.accumulate(*logits, g);
            }
            Op::StraightThrough { x, mask } => {
                let g = match mask {
                    None => up.to_vec(),
                    Some(m) => up
                        .iter()
                        .zip(m)
                        .map(|(&u, &keep)| if keep { u } else { T::zero() })
                        .collect(),
                };
                self.accumulate(*x, g);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}
