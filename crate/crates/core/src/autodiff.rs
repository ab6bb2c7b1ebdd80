//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Tape`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep. The tape is thrown
//! away after each optimizer step.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::kernels;
use crate::parallel::Exec;
use crate::tensor::Tensor;

/// Identifier of a trainable tensor in a parameter store.
pub type ParamId = usize;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Whether `XFER_DEBUG_CHECKS=1` is set.
pub fn debug_checks_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| std::env::var("XFER_DEBUG_CHECKS").is_ok_and(|v| v == "1"))
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, factors: Vec<f64> },
    Scale { a: Var, s: f64 },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, active: Vec<bool>, probs: Vec<f64>, count: usize },
    Sum { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter id.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    exec: Exec,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_exec(Exec::best())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: Vec::new(), exec }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable input whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        self.push(t, Op::Param(id), true)
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("operands must be at least 2-D, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", format!("inner dims differ: {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && lead != &sb[..sb.len() - 2] {
            return Err(Error::shape("matmul", format!("batch dims differ: {sa:?} x {sb:?}")));
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_b {
                kernels::matmul_nn(self.exec, av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    kernels::matmul_nn(
                        self.exec,
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b, batch, m, k, n, shared_b }, ng))
    }

    /// Elementwise sum. `b` may also be a trailing-suffix shape of `a` (bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let bv = self.value(b).data();
        let inner = bv.len().max(1);
        let data: Vec<f64> = self.value(a).data().iter().enumerate().map(|(i, x)| x + bv[i % inner]).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add { a, b }, ng))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul { a, b }, ng))
    }

    /// Multiply by fixed per-element factors (dropout masks, padding masks).
    pub fn mul_const(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        if factors.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", format!("{} factors for shape {:?}", factors.len(), self.shape(a))));
        }
        let data: Vec<f64> = self.value(a).data().iter().zip(&factors).map(|(x, f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::MulConst { a, factors }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Scale { a, s }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true.
    /// Excluded entries get probability 0; a row with no allowed entry is all
    /// zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask of {} entries for shape {:?}", mask.len(), self.shape(a)),
            ));
        }
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let w = *shape.last().unwrap_or(&0);
        if w == 0 {
            return Err(Error::shape("softmax", format!("last axis must be non-empty, got {shape:?}")));
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        for (r, (xr, yr)) in x.chunks(w).zip(out.chunks_mut(w)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[r * w + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for (j, (&v, y)) in xr.iter().zip(yr.iter_mut()).enumerate() {
                if allowed(j) {
                    *y = (v - max).exp();
                    sum += *y;
                }
            }
            for y in yr.iter_mut() {
                *y /= sum;
            }
            if debug_checks_enabled() {
                let total: f64 = yr.iter().sum();
                assert!((total - 1.0).abs() < 1e-12, "softmax row sums to {total}");
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, ng))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::shape("layer_norm", format!("last axis must be non-empty, got {shape:?}")));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "scale {:?} and shift {:?} must be [{d}] for input {shape:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xr = &xv[r * d..(r + 1) * d];
            let mean = xr.iter().sum::<f64>() / d as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (xr[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
            if debug_checks_enabled() && var > 1e-6 {
                let hr = &xhat[r * d..(r + 1) * d];
                let m = hr.iter().sum::<f64>() / d as f64;
                let v = hr.iter().map(|h| (h - m) * (h - m)).sum::<f64>() / d as f64;
                assert!(m.abs() < 1e-9, "layer_norm row mean {m}");
                assert!((v - 1.0).abs() < 1e-6, "layer_norm row variance {v}");
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.needs(a);
        self.push(Tensor::from_parts(shape, data), Op::Gelu { a }, ng)
    }

    /// Gather rows of a `[n, d]` table. Output shape is `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::shape("embedding_lookup", format!("table must be 2-D, got {ts:?}")));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding_lookup", format!("{} ids for index shape {ids_shape:?}", ids.len())));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape("embedding_lookup", format!("id {bad} out of range for table {ts:?}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let ng = self.needs(table);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} out of range for {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { a, axis, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(a))));
        }
        let data = self.value(a).data().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape { a }, ng))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of the axes of {s:?}")));
        }
        let (shape, data) = permute_data(self.value(a).data(), &s, perm);
        let ng = self.needs(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Permute { a, perm: perm.to_vec() }, ng))
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against `targets`, over
    /// rows where `active` is true. Inactive rows contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], active: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || active.len() != s[0] {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets and {} mask entries", targets.len(), active.len()),
            ));
        }
        let (rows, c) = (s[0], s[1]);
        let count = active.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NothingToPredict);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        for r in 0..rows {
            if !active[r] {
                continue;
            }
            if targets[r] >= c {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("target {} out of range for {c} classes", targets[r]),
                ));
            }
            let lr = &lv[r * c..(r + 1) * c];
            let max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = lr.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (lr[j] - lse).exp();
            }
            total += lse - lr[targets[r]];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), active: active.to_vec(), probs, count },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, ng)
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf
    /// it depends on. Parameters the loss does not reach are absent.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let exec = self.exec;
        let mut send = |v: Var, t: Tensor| {
            if self.needs(v) {
                accumulate(grads, v.0, t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => match out.by_param.get_mut(id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.by_param.insert(*id, g);
                }
            },
            &Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let gv = g.data();
                if self.needs(a) {
                    let mut da = vec![0.0; batch * m * k];
                    if shared_b {
                        kernels::matmul_nt(exec, gv, bv, &mut da, batch * m, n, k);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_nt(
                                exec,
                                &gv[i * m * n..(i + 1) * m * n],
                                &bv[i * k * n..(i + 1) * k * n],
                                &mut da[i * m * k..(i + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    send(a, Tensor::from_parts(self.shape(a).to_vec(), da));
                }
                if self.needs(b) {
                    let mut db = vec![0.0; self.value(b).numel()];
                    if shared_b {
                        kernels::matmul_tn(exec, av, gv, &mut db, batch * m, k, n);
                    } else {
                        for i in 0..batch {
                            kernels::matmul_tn(
                                exec,
                                &av[i * m * k..(i + 1) * m * k],
                                &gv[i * m * n..(i + 1) * m * n],
                                &mut db[i * k * n..(i + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                    send(b, Tensor::from_parts(self.shape(b).to_vec(), db));
                }
            }
            &Op::Add { a, b } => {
                if self.needs(b) {
                    let inner = self.value(b).numel().max(1);
                    let mut db = vec![0.0; inner];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % inner] += v;
                    }
                    send(b, Tensor::from_parts(self.shape(b).to_vec(), db));
                }
                send(a, g);
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let d: Vec<f64> = g.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    send(a, Tensor::from_parts(g.shape().to_vec(), d));
                }
                if self.needs(b) {
                    let d: Vec<f64> = g.data().iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    send(b, Tensor::from_parts(g.shape().to_vec(), d));
                }
            }
            Op::MulConst { a, factors } => {
                let d: Vec<f64> = g.data().iter().zip(factors).map(|(x, f)| x * f).collect();
                send(*a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            &Op::Scale { a, s } => {
                let d: Vec<f64> = g.data().iter().map(|x| x * s).collect();
                send(a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.data().chunks(w)).zip(d.chunks_mut(w)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for j in 0..w {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = *g.shape().last().unwrap();
                let gv = g.data();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in gv.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    send(*gamma, Tensor::from_parts(vec![d], dg));
                    send(*beta, Tensor::from_parts(vec![d], db));
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; gv.len()];
                    let mut dh = vec![0.0; d];
                    for (r, ((gr, hr), dr)) in gv.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dr[j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    send(*x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
            }
            &Op::Gelu { a } => {
                let d: Vec<f64> = g.data().iter().zip(self.value(a).data()).map(|(gi, &x)| gi * gelu_grad(x)).collect();
                send(a, Tensor::from_parts(g.shape().to_vec(), d));
            }
            Op::Embedding { table, ids } => {
                let ts = self.shape(*table).to_vec();
                let d = ts[1];
                let mut dt = vec![0.0; ts[0] * d];
                for (row, &i) in g.data().chunks(d).zip(ids) {
                    for (t, v) in dt[i * d..(i + 1) * d].iter_mut().zip(row) {
                        *t += v;
                    }
                }
                send(*table, Tensor::from_parts(ts, dt));
            }
            Op::Concat { parts, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let len = ps[*axis];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        send(p, Tensor::from_parts(ps, d));
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let s = self.shape(a).to_vec();
                let len = g.shape()[axis];
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut d = vec![0.0; self.value(a).numel()];
                for o in 0..outer {
                    let base = o * s[axis] * inner + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                send(a, Tensor::from_parts(s, d));
            }
            &Op::Reshape { a } => {
                let s = self.shape(a).to_vec();
                send(a, Tensor::from_parts(s, g.into_data()));
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(g.data(), g.shape(), &inv);
                send(*a, Tensor::from_parts(shape, data));
            }
            Op::CrossEntropy { logits, targets, active, probs, count } => {
                let scale = g.item() / *count as f64;
                let c = self.shape(*logits)[1];
                let mut d = vec![0.0; probs.len()];
                for (r, &on) in active.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..c {
                        d[r * c + j] = probs[r * c + j] * scale;
                    }
                    d[r * c + targets[r]] -= scale;
                }
                send(*logits, Tensor::from_parts(self.shape(*logits).to_vec(), d));
            }
            &Op::Sum { a } => {
                let s = self.shape(a).to_vec();
                send(a, Tensor::full(&s, g.item()));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, t: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_assign(&t),
        slot => *slot = Some(t),
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        out.push(src[offset]);
        let mut ax = nd;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn uniform_two_class_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.param(0, t(&[1, 2], &[0.0, 0.0]));
        let loss = tape.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let g = tape.backward(loss).unwrap();
        let d = g.get(0).unwrap().data();
        assert!((d[0] + 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(3, Tensor::zeros(&[2, 3, 4]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        let gx = g.get(3).unwrap();
        assert_eq!(gx.shape(), &[2, 3, 4]);
        assert!(gx.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(0, Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) => grad = 2x, with x entering mul twice.
        let mut tape = Tape::new();
        let x = tape.param(0, t(&[3], &[1.0, -2.0, 0.5]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let b = tape_const(&mut tape, &[3]);
        let err = tape.mul(a, b).unwrap_err().to_string();
        assert!(err.starts_with("mul"), "{err}");
    }

    fn tape_const(tape: &mut Tape, shape: &[usize]) -> Var {
        tape.constant(Tensor::zeros(shape))
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.masked_softmax(x, &[false, false, true, false]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn permute_round_trips() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = tape.constant(t(&[2, 3, 4], &data));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        // y[k, i, j] == x[i, j, k]
        assert_eq!(tape.value(y).data()[(2 + 1) * 3 + 2], data[(3 + 2) * 4 + 1]);
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z).data(), &data[..]);
    }
}
