//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass in
//! execution order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it once in reverse. Tapes are built
//! fresh for every step and never shared between threads.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{activate_grad, c, gemm, layer_norm_rows, transpose, Activation, Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddTrailing(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleGroups { x: Var, factors: Vec<T> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(T, T)> },
    Act { x: Var, kind: Activation },
    Reshape(Var),
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    PrependTokens { tokens: Var, x: Var },
    TakeLeading { x: Var, count: usize },
    CrossEntropy { logits: Var, probs: Vec<T>, targets: Vec<T> },
    Sum(Var),
    Mean(Var),
    Map { x: Var, deriv: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddTrailing(..) => "add_trailing",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleGroups { .. } => "scale_groups",
            Op::MatMul { .. } => "matmul",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Act { .. } => "activation",
            Op::Reshape(_) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::PrependTokens { .. } => "prepend_tokens",
            Op::TakeLeading { .. } => "take_leading",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Map { .. } => "map",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
pub struct Grads<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Enables NaN/Inf validation of every op output (and a row-sum check on
    /// softmax outputs). Off by default so benchmarks do not pay for it.
    pub fn with_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Bytes held by intermediate (non-leaf) values.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.value.len() * T::BYTES)
            .sum()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var belongs to a different tape").value
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "variable {} is not recorded on this tape",
                v.idx
            )));
        }
        Ok(&self.nodes[v.idx])
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.idx].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`
    /// (bias rows, positional tables).
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (va.shape(), vb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_trailing", sa, sb));
        }
        let w = vb.len();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_exact_mut(w) {
            for (x, &y) in chunk.iter_mut().zip(vb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        self.push(out, Op::AddTrailing(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * s).collect())?;
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Multiplies each of `factors.len()` equal contiguous groups of `x` by
    /// its factor (per-sample drop-path masks).
    pub fn scale_groups(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if factors.is_empty() || vx.len() % factors.len() != 0 {
            return Err(Error::shape("scale_groups", vx.shape(), &[factors.len()]));
        }
        let g = vx.len() / factors.len();
        let mut data = vx.data().to_vec();
        for (chunk, &f) in data.chunks_exact_mut(g).zip(&factors) {
            for v in chunk {
                *v = *v * f;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(out, Op::ScaleGroups { x, factors }, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched matrix product `op(a) · op(b)` where `op` optionally
    /// transposes the last two dimensions. Operands are both rank 2 or both
    /// rank 3 with equal leading extent.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ga, ash) = split_batch(va.shape()).ok_or_else(|| Error::shape("matmul", va.shape(), vb.shape()))?;
        let (gb, bsh) = split_batch(vb.shape()).ok_or_else(|| Error::shape("matmul", va.shape(), vb.shape()))?;
        let k_a = if ta { ash.0 } else { ash.1 };
        let k_b = if tb { bsh.1 } else { bsh.0 };
        if va.rank() != vb.rank() || ga != gb || k_a != k_b {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (data, m, n) = bmm(va.data(), ash, ta, vb.data(), bsh, tb, ga);
        let shape = if va.rank() == 3 { vec![ga, m, n] } else { vec![m, n] };
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let out = vx.softmax(vx.rank() - 1)?;
        if self.check_finite {
            let w = *out.shape().last().unwrap();
            let tol = 1e-6f64.max(w as f64 * T::epsilon().as_f64());
            for row in out.data().chunks_exact(w) {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                if (s - 1.0).abs() > tol {
                    return Err(Error::Validation(format!("softmax row sums to {s}")));
                }
            }
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let (vg, vbeta) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        let cols = *vx.shape().last().unwrap();
        if vg.shape() != [cols] || vbeta.shape() != [cols] {
            return Err(Error::shape("layer_norm", vx.shape(), vg.shape()));
        }
        let mut out = vec![T::zero(); vx.len()];
        let mut stats = Vec::with_capacity(vx.len() / cols);
        layer_norm_rows(vx.data(), vg.data(), vbeta.data(), cols, c(eps), &mut out, Some(&mut stats));
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let out = self.node(x)?.value.activation(kind);
        self.push(out, Op::Act { x, kind }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `[batch·seq, heads·dk]` → `[batch·heads, seq, dk]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let width = vx.len() / (batch * seq).max(1);
        if batch * seq * width != vx.len() || width % heads != 0 {
            return Err(Error::shape("split_heads", vx.shape(), &[batch, seq, heads]));
        }
        let dk = width / heads;
        let data = permute_heads(vx.data(), batch, seq, heads, dk, false);
        let out = Tensor::new(vec![batch * heads, seq, dk], data)?;
        self.push(out, Op::SplitHeads { x, batch, seq, heads }, &[x])
    }

    /// Inverse of [`Tape::split_heads`]: `[batch·heads, seq, dk]` → `[batch·seq, heads·dk]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.rank() != 3 || vx.shape()[0] != batch * heads || vx.shape()[1] != seq {
            return Err(Error::shape("merge_heads", vx.shape(), &[batch, seq, heads]));
        }
        let dk = vx.shape()[2];
        let data = permute_heads(vx.data(), batch, seq, heads, dk, true);
        let out = Tensor::new(vec![batch * seq, heads * dk], data)?;
        self.push(out, Op::MergeHeads { x, batch, seq, heads }, &[x])
    }

    /// Prepends `tokens: [n, C]` to every sequence of `x: [B, L, C]`.
    pub fn prepend_tokens(&mut self, tokens: Var, x: Var) -> Result<Var> {
        let (vt, vx) = (&self.node(tokens)?.value, &self.node(x)?.value);
        if vt.rank() != 2 || vx.rank() != 3 || vt.shape()[1] != vx.shape()[2] {
            return Err(Error::shape("prepend_tokens", vt.shape(), vx.shape()));
        }
        let (b, l, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let n = vt.shape()[0];
        let mut data = Vec::with_capacity(b * (n + l) * w);
        for s in vx.data().chunks_exact(l * w) {
            data.extend_from_slice(vt.data());
            data.extend_from_slice(s);
        }
        let out = Tensor::new(vec![b, n + l, w], data)?;
        self.push(out, Op::PrependTokens { tokens, x }, &[tokens, x])
    }

    /// First `count` tokens of each sequence in `x: [B, N, C]`, concatenated
    /// into `[B, count·C]`.
    pub fn take_leading(&mut self, x: Var, count: usize) -> Result<Var> {
        let vx = &self.node(x)?.value;
        if vx.rank() != 3 || count == 0 || count > vx.shape()[1] {
            return Err(Error::shape("take_leading", vx.shape(), &[count]));
        }
        let (b, n, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let mut data = Vec::with_capacity(b * count * w);
        for s in vx.data().chunks_exact(n * w) {
            data.extend_from_slice(&s[..count * w]);
        }
        let out = Tensor::new(vec![b, count * w], data)?;
        self.push(out, Op::TakeLeading { x, count }, &[x])
    }

    /// Mean over the batch of `-Σ targets · log_softmax(logits)`. Targets are
    /// soft distributions, one row per sample.
    pub fn cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let vl = &self.node(logits)?.value;
        if vl.rank() != 2 || vl.shape() != targets.shape() {
            return Err(Error::shape("cross_entropy", vl.shape(), targets.shape()));
        }
        let (b, k) = (vl.shape()[0], vl.shape()[1]);
        for (i, row) in targets.data().chunks_exact(k).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < T::zero()) {
                return Err(Error::Validation(format!(
                    "target row {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut total = T::zero();
        for (row, trow) in vl.data().chunks_exact(k).zip(targets.data().chunks_exact(k)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut se = T::zero();
            for &v in row {
                se += (v - mx).exp();
            }
            let lse = se.ln();
            let mut l = T::zero();
            for (&v, &t) in row.iter().zip(trow) {
                let logp = v - mx - lse;
                probs.push(logp.exp());
                if t != T::zero() {
                    l += -t * logp;
                }
            }
            total += l;
        }
        let out = Tensor::scalar(total / c(b as f64));
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.data().to_vec(),
        };
        self.push(out, op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.node(x)?.value.sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let out = Tensor::scalar(vx.sum() / c(vx.len() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    /// Elementwise `f` with a caller-supplied derivative `df`. The backward
    /// rule is trusted as given, which makes this the hook for exercising the
    /// gradient checker.
    pub fn map(&mut self, x: Var, f: impl Fn(T) -> T, df: impl Fn(T) -> T) -> Result<Var> {
        let vx = &self.node(x)?.value;
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())?;
        let deriv = vx.data().iter().map(|&v| df(v)).collect();
        self.push(out, Op::Map { x, deriv }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients are accumulated in
    /// reverse recording order, so the result is bitwise reproducible.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        Ok(Grads {
            tape: self.id,
            grads: leaves,
        })
    }

    fn propagate(&self, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| &self.nodes[v.idx].value;
        let wants = |v: Var| self.nodes[v.idx].needs_grad;
        let mut send = |v: Var, d: Vec<T>| accumulate(grads, v, d);

        match &node.op {
            Op::Leaf => unreachable!("leaves are collected by the caller"),
            Op::Add(a, b) => {
                if wants(*b) {
                    send(*b, g.clone());
                }
                if wants(*a) {
                    send(*a, g);
                }
            }
            Op::AddTrailing(a, b) => {
                if wants(*b) {
                    let w = val(*b).len();
                    let mut db = vec![T::zero(); w];
                    for chunk in g.chunks_exact(w) {
                        for (d, &x) in db.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    send(*b, db);
                }
                if wants(*a) {
                    send(*a, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(*b) {
                    let d = g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                    send(*b, d);
                }
                if wants(*a) {
                    let d = g.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                    send(*a, d);
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|&v| v * *s).collect()),
            Op::ScaleGroups { x, factors } => {
                let n = g.len() / factors.len();
                let mut d = g;
                for (chunk, &f) in d.chunks_exact_mut(n).zip(factors) {
                    for v in chunk {
                        *v = *v * f;
                    }
                }
                send(*x, d);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let (ga, ash) = split_batch(va.shape()).unwrap();
                let (_, bsh) = split_batch(vb.shape()).unwrap();
                let m = if *ta { ash.1 } else { ash.0 };
                let n = if *tb { bsh.0 } else { bsh.1 };
                if wants(*b) {
                    let (db, _, _) = if *tb {
                        bmm(&g, (m, n), true, va.data(), ash, *ta, ga)
                    } else {
                        bmm(va.data(), ash, !*ta, &g, (m, n), false, ga)
                    };
                    send(*b, db);
                }
                if wants(*a) {
                    let (da, _, _) = if *ta {
                        bmm(vb.data(), bsh, *tb, &g, (m, n), true, ga)
                    } else {
                        bmm(&g, (m, n), false, vb.data(), bsh, !*tb, ga)
                    };
                    send(*a, da);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((drow, grow), yrow) in d.chunks_exact_mut(w).zip(g.chunks_exact(w)).zip(y.chunks_exact(w)) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in grow.iter().zip(yrow) {
                        dot += gv * yv;
                    }
                    for j in 0..w {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = val(*x).data();
                let gm = val(*gamma).data();
                let w = gm.len();
                let inv_n = T::one() / c::<T>(w as f64);
                let mut dx = vec![T::zero(); vx.len()];
                let mut dgamma = vec![T::zero(); w];
                let mut dbeta = vec![T::zero(); w];
                let mut xhat = vec![T::zero(); w];
                let mut gh = vec![T::zero(); w];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &vx[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let mut mg = T::zero();
                    let mut mgx = T::zero();
                    for j in 0..w {
                        xhat[j] = (xr[j] - mean) * rstd;
                        gh[j] = gr[j] * gm[j];
                        mg += gh[j];
                        mgx += gh[j] * xhat[j];
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                    mg = mg * inv_n;
                    mgx = mgx * inv_n;
                    let dr = &mut dx[r * w..(r + 1) * w];
                    for j in 0..w {
                        dr[j] = rstd * (gh[j] - mg - xhat[j] * mgx);
                    }
                }
                if wants(*beta) {
                    send(*beta, dbeta);
                }
                if wants(*gamma) {
                    send(*gamma, dgamma);
                }
                if wants(*x) {
                    send(*x, dx);
                }
            }
            Op::Act { x, kind } => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| g * activate_grad(v, *kind))
                    .collect();
                send(*x, d);
            }
            Op::Reshape(x) => send(*x, g),
            Op::SplitHeads { x, batch, seq, heads } => {
                let dk = node.value.shape()[2];
                send(*x, permute_heads(&g, *batch, *seq, *heads, dk, true));
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let dk = val(*x).shape()[2];
                send(*x, permute_heads(&g, *batch, *seq, *heads, dk, false));
            }
            Op::PrependTokens { tokens, x } => {
                let vt = val(*tokens);
                let tl = vt.len();
                let sl = node.value.shape()[1] * node.value.shape()[2];
                if wants(*x) {
                    let mut dx = Vec::with_capacity(val(*x).len());
                    for s in g.chunks_exact(sl) {
                        dx.extend_from_slice(&s[tl..]);
                    }
                    send(*x, dx);
                }
                if wants(*tokens) {
                    let mut dt = vec![T::zero(); tl];
                    for s in g.chunks_exact(sl) {
                        for (d, &v) in dt.iter_mut().zip(&s[..tl]) {
                            *d += v;
                        }
                    }
                    send(*tokens, dt);
                }
            }
            Op::TakeLeading { x, count } => {
                let vx = val(*x);
                let (n, w) = (vx.shape()[1], vx.shape()[2]);
                let mut dx = vec![T::zero(); vx.len()];
                for (dst, src) in dx.chunks_exact_mut(n * w).zip(g.chunks_exact(count * w)) {
                    dst[..count * w].copy_from_slice(src);
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let k = val(*logits).shape()[1];
                let b = probs.len() / k;
                let scale = g[0] / c::<T>(b as f64);
                let mut d = Vec::with_capacity(probs.len());
                for (prow, trow) in probs.chunks_exact(k).zip(targets.chunks_exact(k)) {
                    let mut ts = T::zero();
                    for &t in trow {
                        ts += t;
                    }
                    for (&p, &t) in prow.iter().zip(trow) {
                        d.push((p * ts - t) * scale);
                    }
                }
                send(*logits, d);
            }
            Op::Sum(x) => send(*x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                send(*x, vec![g[0] / c::<T>(n as f64); n]);
            }
            Op::Map { x, deriv } => {
                send(*x, g.iter().zip(deriv).map(|(&g, &d)| g * d).collect());
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.idx] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(d) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn split_batch(shape: &[usize]) -> Option<(usize, (usize, usize))> {
    match *shape {
        [r, c] => Some((1, (r, c))),
        [g, r, c] => Some((g, (r, c))),
        _ => None,
    }
}

/// Batched `op(a) · op(b)`; `a` is stored as `g` matrices of `ash`, `b` as
/// `g` matrices of `bsh`. Returns the output data and its `(m, n)`.
fn bmm<T: Scalar>(
    a: &[T],
    ash: (usize, usize),
    ta: bool,
    b: &[T],
    bsh: (usize, usize),
    tb: bool,
    g: usize,
) -> (Vec<T>, usize, usize) {
    let (m, k) = if ta { (ash.1, ash.0) } else { ash };
    let n = if tb { bsh.0 } else { bsh.1 };
    let (asz, bsz) = (ash.0 * ash.1, bsh.0 * bsh.1);
    let mut out = vec![T::zero(); g * m * n];
    for i in 0..g {
        let ai = &a[i * asz..(i + 1) * asz];
        let bi = &b[i * bsz..(i + 1) * bsz];
        let at;
        let ai: &[T] = if ta {
            at = transpose(ai, ash.0, ash.1);
            &at
        } else {
            ai
        };
        let bt;
        let bi: &[T] = if tb {
            bt = transpose(bi, bsh.0, bsh.1);
            &bt
        } else {
            bi
        };
        gemm(ai, bi, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
    }
    (out, m, n)
}

/// Head split (`inverse == false`) or merge (`inverse == true`).
fn permute_heads<T: Copy + Default>(
    src: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    dk: usize,
    inverse: bool,
) -> Vec<T> {
    let width = heads * dk;
    let mut out = vec![T::default(); src.len()];
    for b in 0..batch {
        for s in 0..seq {
            for h in 0..heads {
                let flat = (b * seq + s) * width + h * dk;
                let split = ((b * heads + h) * seq + s) * dk;
                let (from, to) = if inverse { (split, flat) } else { (flat, split) };
                out[to..to + dk].copy_from_slice(&src[from..from + dk]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let l = tape.sum(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let bt = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
        let b = tape.leaf(bt.clone(), true);
        let p = tape.matmul(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        let expect_a = Tensor::<f64>::ones(&[2, 2]).matmul(&bt.transpose2d().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap(), &expect_a);
        let at = tape.value(a).transpose2d().unwrap();
        let expect_b = at.matmul(&Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(g.get(b).unwrap(), &expect_b);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let s1 = tape.sum(x).unwrap();
        let s2 = tape.sum(x).unwrap();
        let l = tape.add(s1, s2).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0; 3]);
    }

    #[test]
    fn var_from_other_tape_is_graph_error() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.leaf(t(&[1], &[1.0]), true);
        let _ = b.leaf(t(&[1], &[1.0]), true);
        assert!(matches!(b.sum(x), Err(Error::Graph(_))));
        let y = b.leaf(t(&[1], &[2.0]), true);
        let l = b.sum(y).unwrap();
        assert!(matches!(a.backward(l), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Validation(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        let mut onehot = vec![0.0; 10];
        onehot[3] = 1.0;
        let l = tape.cross_entropy(logits, &t(&[1, 10], &onehot)).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut z = vec![0.0; 10];
        z[3] = 30.0;
        let logits = tape.constant(t(&[1, 10], &z));
        let l = tape.cross_entropy(logits, &t(&[1, 10], &onehot)).unwrap();
        assert!(tape.value(l).data()[0] < 1e-9);

        let bad = t(&[1, 10], &[0.2; 10]);
        assert!(matches!(tape.cross_entropy(logits, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (b, k) = (6, 5);
        let logits: Vec<f64> = (0..b * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mut targets = Vec::new();
        for _ in 0..b {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
            let s: f64 = raw.iter().sum();
            targets.extend(raw.iter().map(|v| v / s));
        }
        let mut oracle = 0.0;
        for i in 0..b {
            let row = &logits[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..k {
                oracle -= targets[i * k + j] * (row[j].exp() / z).ln();
            }
        }
        oracle /= b as f64;
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(t(&[b, k], &logits));
        let l = tape.cross_entropy(lv, &t(&[b, k], &targets)).unwrap();
        assert!((tape.value(l).data()[0] - oracle).abs() <= 1e-10);
    }

    #[test]
    fn split_and_merge_heads_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2 * 3, 8], |i| i as f64), true);
        let s = tape.split_heads(x, 2, 3, 4).unwrap();
        assert_eq!(tape.value(s).shape(), &[8, 3, 2]);
        // batch 1, head 2, token 1 holds columns 4..6 of row 1*3+1
        assert_eq!(tape.value(s).at(&[1 * 4 + 2, 1, 0]), (4 * 8 + 4) as f64);
        let m = tape.merge_heads(s, 2, 3, 4).unwrap();
        assert_eq!(tape.value(m), tape.value(x));
    }

    #[test]
    fn non_finite_detection_is_opt_in() {
        let mut tape = Tape::<f64>::new().with_checks(true);
        let x = tape.leaf(t(&[1], &[f64::MAX]), true);
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[f64::MAX]), true);
        assert!(tape.scale(x, 10.0).is_ok());
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(Tensor::from_fn(&[4, 6], |i| (i as f32 * 0.37).sin()), true);
            let b = tape.leaf(Tensor::from_fn(&[6, 5], |i| (i as f32 * 0.11).cos()), true);
            let p = tape.matmul(a, b).unwrap();
            let s = tape.softmax(p).unwrap();
            let l = tape.cross_entropy(s, &Tensor::full(&[4, 5], 0.2)).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(a).unwrap().clone(), g.get(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
