//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! a topological order by construction. [`Graph::backward`] walks the nodes
//! once in reverse and accumulates gradients by addition.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, gemm_acc, numel, permute_table, transpose2, BroadcastMap, Scalar, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<S> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        map_a: BroadcastMap,
        map_b: BroadcastMap,
    },
    Scale {
        x: Var,
        c: S,
    },
    MatMul {
        a: Var,
        b: Var,
        plan: MatMulPlan,
    },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    RmsNorm {
        x: Var,
        w: Var,
        rinv: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Gather {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Batch layout of a matmul: `a[batch, m, k] · b[batch, k, n]` with
/// per-batch offsets into possibly broadcast operands.
#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        let shape = self.shapes[v.0].clone();
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(shape, g).expect("grad shape"))
    }
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(&sa, &sb)?;
        let map_a = BroadcastMap::new(&sa, &out_shape);
        let map_b = BroadcastMap::new(&sb, &out_shape);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let total = numel(&out_shape);
        let data: Vec<S> = match kind {
            Binary::Add => (0..total)
                .map(|i| da[map_a.index(i)] + db[map_b.index(i)])
                .collect(),
            Binary::Sub => (0..total)
                .map(|i| da[map_a.index(i)] - db[map_b.index(i)])
                .collect(),
            Binary::Mul => (0..total)
                .map(|i| da[map_a.index(i)] * db[map_b.index(i)])
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            rg,
        ))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let value = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, c }, rg)
    }

    /// Batched matrix product `a[..., m, k] · b[..., k, n]` with broadcast
    /// batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape(format!(
                "matmul of {sa:?} and {sb:?}: inner extents do not match"
            )));
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (plan, out_shape) = if sb.len() == 2 {
            // weight matrix: fold every leading axis of `a` into rows
            let m = numel(&sa[..sa.len() - 1]);
            let mut out_shape = sa[..sa.len() - 1].to_vec();
            out_shape.push(n);
            (
                MatMulPlan {
                    m,
                    k,
                    n,
                    a_offsets: vec![0],
                    b_offsets: vec![0],
                },
                out_shape,
            )
        } else {
            let m = sa[sa.len() - 2];
            let batch_a = &sa[..sa.len() - 2];
            let batch_b = &sb[..sb.len() - 2];
            let batch = broadcast_shapes(batch_a, batch_b).map_err(|_| {
                Error::shape(format!(
                    "matmul of {sa:?} and {sb:?}: batch extents are not broadcastable"
                ))
            })?;
            let map_a = BroadcastMap::new(batch_a, &batch);
            let map_b = BroadcastMap::new(batch_b, &batch);
            let nb = numel(&batch);
            let a_offsets = (0..nb).map(|i| map_a.index(i) * m * k).collect();
            let b_offsets = (0..nb).map(|i| map_b.index(i) * k * n).collect();
            let mut out_shape = batch;
            out_shape.extend([m, n]);
            (
                MatMulPlan {
                    m,
                    k,
                    n,
                    a_offsets,
                    b_offsets,
                },
                out_shape,
            )
        };
        let (m, n2) = (plan.m, plan.n);
        let mut out = vec![S::zero(); numel(&out_shape)];
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            for (bi, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                gemm_acc(
                    m,
                    k,
                    n2,
                    &da[ao..ao + m * k],
                    &db[bo..bo + k * n2],
                    &mut out[bi * m * n2..(bi + 1) * m * n2],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, plan }, rg))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (S::one() + (-v).exp()));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    /// Softmax over the last axis. `mask`, when given, is an additive mask
    /// broadcastable to `x` whose entries are `0` (keep) or `-inf` (drop);
    /// dropped entries come out exactly zero.
    pub fn softmax_lastdim(&mut self, x: Var, mask: Option<&Tensor<S>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax of a scalar"))?;
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); xd.len()];
        let map = match mask {
            Some(m) => {
                let b = broadcast_shapes(m.shape(), &shape)?;
                if b != shape {
                    return Err(Error::shape(format!(
                        "mask {:?} does not broadcast to {:?}",
                        m.shape(),
                        shape
                    )));
                }
                Some((BroadcastMap::new(m.shape(), &shape), m.data()))
            }
            None => None,
        };
        if last > 0 {
            for (r, row) in out.chunks_mut(last).enumerate() {
                let base = r * last;
                let mut mx = S::neg_infinity();
                for j in 0..last {
                    let v = masked(xd[base + j], &map, base + j);
                    if v > mx {
                        mx = v;
                    }
                }
                if mx == S::neg_infinity() {
                    return Err(Error::invalid(format!(
                        "softmax row {r} is fully masked"
                    )));
                }
                let mut total = S::zero();
                for j in 0..last {
                    let v = masked(xd[base + j], &map, base + j);
                    let e = if v == S::neg_infinity() {
                        S::zero()
                    } else {
                        (v - mx).exp()
                    };
                    row[j] = e;
                    total += e;
                }
                for e in row.iter_mut() {
                    *e = *e / total;
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, w: Var, b: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layernorm of a scalar"))?;
        if self.value(w).numel() != d || self.value(b).numel() != d {
            return Err(Error::shape(format!(
                "layernorm over width {d} with weight {:?} and bias {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let eps = S::from_f64(eps);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let rows = if d == 0 { 0 } else { xd.len() / d };
        let mut xhat = vec![S::zero(); xd.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        let dn = S::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * wd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::LayerNorm { x, w, b, xhat, rstd }, rg))
    }

    /// RMS normalization over the last axis.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("rmsnorm of a scalar"))?;
        if self.value(w).numel() != d {
            return Err(Error::shape(format!(
                "rmsnorm over width {d} with weight {:?}",
                self.shape(w)
            )));
        }
        let eps = S::from_f64(eps);
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let rows = if d == 0 { 0 } else { xd.len() / d };
        let mut rinv = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        let dn = S::from_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / dn;
            let ri = S::one() / (ms + eps).sqrt();
            rinv[r] = ri;
            for j in 0..d {
                out[r * d + j] = row[j] * ri * wd[j];
            }
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::RmsNorm { x, w, rinv }, rg))
    }

    /// Mean cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy expects logits [B, K] with B = {}, got {:?}",
                labels.len(),
                shape
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} out of range [0, {k})")));
        }
        if b == 0 {
            return Err(Error::shape("cross_entropy over an empty batch"));
        }
        let xd = self.value(logits).data();
        let mut probs = vec![S::zero(); xd.len()];
        let mut loss = S::zero();
        for r in 0..b {
            let row = &xd[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[r * k + j] = e;
                total += e;
            }
            for j in 0..k {
                probs[r * k + j] = probs[r * k + j] / total;
            }
            // -log p_label = log(total) - (x_label - mx)
            loss += total.ln() - (row[labels[r]] - mx);
        }
        let loss = loss / S::from_f64(b as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `out[i] = x[index[i]]` (flat indices), reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(Error::shape(format!(
                "gather of {} elements into shape {:?}",
                index.len(),
                shape
            )));
        }
        let xd = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::Index(format!(
                "gather index {bad} out of range for {} elements",
                xd.len()
            )));
        }
        let data = index.iter().map(|&i| xd[i]).collect();
        let rg = self.rg(x);
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let (shape, table) = permute_table(self.shape(x), perm)?;
        self.gather(x, Arc::new(table), &shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::shape("transpose needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "narrow({axis}, {start}, {len}) out of bounds for {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            index.extend(base + start * inner..base + (start + len) * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, Arc::new(index), &out_shape)
    }

    /// Expands `x` to `shape` by trailing-dimension broadcasting.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let b = broadcast_shapes(self.shape(x), shape)?;
        if b != shape {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(x),
                shape
            )));
        }
        let map = BroadcastMap::new(self.shape(x), shape);
        let index = (0..numel(shape)).map(|i| map.index(i)).collect();
        self.gather(x, Arc::new(index), shape)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} for shape {base:?}")));
        }
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let widths: Vec<usize> = inputs
            .iter()
            .map(|&v| self.shape(v)[axis] * inner)
            .collect();
        let total_w: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<S>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<S>() / S::from_f64(t.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires grad and
    /// is reachable from `loss` gets its gradient filled.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        self.sweep(loss, true)
    }

    /// Like [`Graph::backward`] but keeps gradients of leaves only, releasing
    /// intermediate buffers as soon as they have been propagated.
    pub fn backward_leaves(&self, loss: Var) -> Result<Grads<S>> {
        self.sweep(loss, false)
    }

    fn sweep(&self, loss: Var, retain_all: bool) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            if retain_all || matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // leaves that do not require grad never report one
        for (id, n) in self.nodes.iter().enumerate() {
            if !n.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Grads { grads, shapes })
    }

    fn backprop(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            } => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    let acc = slot(grads, *a, va.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb[map_b.index(i)],
                        };
                        acc[map_a.index(i)] += d;
                    }
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, vb.len());
                    for (i, &gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[map_a.index(i)],
                        };
                        acc[map_b.index(i)] += d;
                    }
                }
            }
            Op::Scale { x, c } => {
                let acc = slot(grads, *x, g.len());
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi * *c;
                }
            }
            Op::MatMul { a, b, plan } => {
                let MatMulPlan {
                    m,
                    k,
                    n,
                    a_offsets,
                    b_offsets,
                } = plan;
                let (m, k, n) = (*m, *k, *n);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                if self.rg(*a) {
                    let len = va.len();
                    let acc = slot(grads, *a, len);
                    let mut tmp = vec![S::zero(); m * k];
                    for (bi, (&ao, &bo)) in a_offsets.iter().zip(b_offsets).enumerate() {
                        // dA = G · Bᵀ
                        let bt = transpose2(&vb[bo..bo + k * n], k, n);
                        tmp.iter_mut().for_each(|v| *v = S::zero());
                        gemm_acc(m, n, k, &g[bi * m * n..(bi + 1) * m * n], &bt, &mut tmp);
                        for (d, &t) in acc[ao..ao + m * k].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                }
                if self.rg(*b) {
                    let len = vb.len();
                    let acc = slot(grads, *b, len);
                    let mut tmp = vec![S::zero(); k * n];
                    for (bi, (&ao, &bo)) in a_offsets.iter().zip(b_offsets).enumerate() {
                        // dB = Aᵀ · G
                        let at = transpose2(&va[ao..ao + m * k], m, k);
                        tmp.iter_mut().for_each(|v| *v = S::zero());
                        gemm_acc(k, m, n, &at, &g[bi * m * n..(bi + 1) * m * n], &mut tmp);
                        for (d, &t) in acc[bo..bo + k * n].iter_mut().zip(&tmp) {
                            *d += t;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let acc = slot(grads, *x, xv.len());
                for ((a, &gi), &v) in acc.iter_mut().zip(g).zip(xv) {
                    *a += gi * gelu_grad(v);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let acc = slot(grads, *x, xv.len());
                for ((a, &gi), &v) in acc.iter_mut().zip(g).zip(xv) {
                    let s = S::one() / (S::one() + (-v).exp());
                    *a += gi * s * (S::one() + v * (S::one() - s));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap();
                let acc = slot(grads, *x, y.len());
                if last > 0 {
                    for r in 0..y.len() / last {
                        let ys = &y[r * last..(r + 1) * last];
                        let gs = &g[r * last..(r + 1) * last];
                        let dot: S = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for j in 0..last {
                            acc[r * last + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, w, b, xhat, rstd } => {
                let d = *node.value.shape().last().unwrap();
                let wv = self.value(*w).data();
                let rows = rstd.len();
                if self.rg(*w) {
                    let acc = slot(grads, *w, d);
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, d);
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let acc = slot(grads, *x, rows * d);
                    let dn = S::from_f64(d as f64);
                    let mut dxhat = vec![S::zero(); d];
                    for r in 0..rows {
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * wv[j];
                            dxhat[j] = v;
                            m1 += v;
                            m2 += v * xhat[r * d + j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            acc[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, rinv } => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let rows = rinv.len();
                if self.rg(*w) {
                    let acc = slot(grads, *w, d);
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xv[r * d + j] * rinv[r];
                        }
                    }
                }
                if self.rg(*x) {
                    let acc = slot(grads, *x, rows * d);
                    let dn = S::from_f64(d as f64);
                    for r in 0..rows {
                        let ri = rinv[r];
                        let mut dot = S::zero();
                        for j in 0..d {
                            dot += g[r * d + j] * wv[j] * xv[r * d + j];
                        }
                        let c = ri * ri * ri * dot / dn;
                        for j in 0..d {
                            acc[r * d + j] += ri * wv[j] * g[r * d + j] - xv[r * d + j] * c;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                let b = labels.len();
                let scale = g[0] / S::from_f64(b as f64);
                let acc = slot(grads, *logits, probs.len());
                for r in 0..b {
                    for j in 0..k {
                        let onehot = if labels[r] == j { S::one() } else { S::zero() };
                        acc[r * k + j] += (probs[r * k + j] - onehot) * scale;
                    }
                }
            }
            Op::Gather { x, index } => {
                let len = self.value(*x).numel();
                let acc = slot(grads, *x, len);
                for (&i, &gi) in index.iter().zip(g) {
                    acc[i] += gi;
                }
            }
            Op::Reshape(x) => {
                let acc = slot(grads, *x, g.len());
                for (a, &gi) in acc.iter_mut().zip(g) {
                    *a += gi;
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut col = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.rg(v) {
                        let acc = slot(grads, v, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * total + col..o * total + col + w];
                            for (a, &gi) in acc[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *a += gi;
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).numel();
                let acc = slot(grads, *x, len);
                for a in acc.iter_mut() {
                    *a += g[0];
                }
            }
            Op::Mean(x) => {
                let len = self.value(*x).numel();
                let c = g[0] / S::from_f64(len as f64);
                let acc = slot(grads, *x, len);
                for a in acc.iter_mut() {
                    *a += c;
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, len: usize) -> &mut Vec<S> {
    grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
}

#[inline]
fn masked<S: Scalar>(x: S, map: &Option<(BroadcastMap, &[S])>, i: usize) -> S {
    match map {
        Some((m, data)) => {
            let a = data[m.index(i)];
            if a == S::neg_infinity() {
                S::neg_infinity()
            } else {
                x + a
            }
        }
        None => x,
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + three * a * x * x)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, in double precision.
pub fn grad_check<F>(f: F, x0: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(x0.clone(), true);
    let y = f(&mut g, x)?;
    let analytic = g
        .backward(y)?
        .get(x)
        .map(|t| t.into_data())
        .unwrap_or_else(|| vec![0.0; x0.numel()]);
    let eval = |xv: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(xv, false);
        let y = f(&mut g, x)?;
        Ok(g.value(y).data()[0])
    };
    let mut max_rel_err: f64 = 0.0;
    for i in 0..x0.numel() {
        let mut plus = x0.clone();
        plus.data_mut()[i] += h;
        let mut minus = x0.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradCheckReport {
        max_rel_err,
        tol,
        passed: max_rel_err <= tol,
    })
}
