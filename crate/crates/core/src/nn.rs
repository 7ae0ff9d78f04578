//! Layer primitives and the named parameter store.

use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Pcg32;
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of every initial weight draw.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S: Scalar> {
    pub tensor: Tensor<S>,
    pub trainable: bool,
}

/// Ordered map from dotted parameter path to tensor plus trainable flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S: Scalar> {
    params: IndexMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// How parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BindMode {
    /// Only trainable parameters require grad.
    Trainable,
    /// Every parameter requires grad (inspection and gradient checks).
    All,
    /// No parameter requires grad.
    Inference,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<S>, trainable: bool) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.split('.').any(|s| s.is_empty()) {
            return Err(Error::invalid(format!("bad parameter name `{name}`")));
        }
        if self.params.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn extend(&mut self, other: ParamStore<S>) -> Result<()> {
        for (k, p) in other.params {
            self.insert(k, p.tensor, p.trainable)?;
        }
        Ok(())
    }

    /// Sets the trainable flag on every parameter under `prefix.`; returns
    /// how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let dotted = format!("{prefix}.");
        let mut n = 0;
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(&dotted) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    /// Number of scalars, split into (trainable, frozen).
    pub fn counts(&self) -> (usize, usize) {
        self.params.values().fold((0, 0), |(t, f), p| {
            if p.trainable {
                (t + p.tensor.numel(), f)
            } else {
                (t, f + p.tensor.numel())
            }
        })
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb && a.trainable == b.trainable && a.tensor.bitwise_eq(&b.tensor)
            })
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<S>, mode: BindMode) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| {
                let rg = match mode {
                    BindMode::Trainable => p.trainable,
                    BindMode::All => true,
                    BindMode::Inference => false,
                };
                (k.clone(), g.leaf(p.tensor.clone(), rg))
            })
            .collect();
        Bound { vars }
    }
}

/// Parameter leaves of one graph, looked up by name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Routes `name` to another variable, e.g. to differentiate with
    /// respect to one parameter in isolation.
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }

    /// Gradients of the bound parameters that received one.
    pub fn collect_grads<S: Scalar>(&self, grads: &mut Grads<S>) -> HashMap<String, Tensor<S>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|t| (k.clone(), t)))
            .collect()
    }
}

/// Draws initial parameters in registration order from one stream.
pub struct Init<'a> {
    rng: &'a mut Pcg32,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut Pcg32) -> Self {
        Init { rng }
    }

    pub fn normal<S: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<S> {
        Tensor::from_fn(shape, |_| S::from_f64(self.rng.normal() * std))
    }

    pub fn linear<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
        trainable: bool,
    ) -> Result<()> {
        store.insert(format!("{prefix}.weight"), self.normal(&[d_in, d_out], std), trainable)?;
        if bias {
            store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d_out]), trainable)?;
        }
        Ok(())
    }
}

pub fn layernorm_params<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.weight"), Tensor::full(&[d], S::one()), true)?;
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]), true)
}

pub const LAYERNORM_EPS: f64 = 1e-6;

pub fn layernorm<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.layernorm(x, w, b, LAYERNORM_EPS)
}

pub fn linear_param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
    d_in * d_out + if bias { d_out } else { 0 }
}

/// `x · W + b` over the last axis of `x`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    match p.try_get(&format!("{prefix}.bias")) {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Masking {
    None,
    PaddingOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub masking: Masking,
    /// Bias on the q/k/v and output projections.
    pub qkv_bias: bool,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        4 * linear_param_count(self.d_model, self.d_model, self.qkv_bias)
    }

    pub fn register<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        init: &mut Init,
        prefix: &str,
        std: f64,
        trainable: bool,
    ) -> Result<()> {
        let d = self.d_model;
        for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
            init.linear(store, &format!("{prefix}.{proj}"), d, d, self.qkv_bias, std, trainable)?;
        }
        Ok(())
    }
}

/// Additive key mask `[B, 1, 1, T]` from a boolean keep-mask `[B, T]`.
pub fn padding_mask<S: Scalar>(keep: &[bool], batch: usize, tokens: usize) -> Result<Tensor<S>> {
    if keep.len() != batch * tokens {
        return Err(Error::shape(format!(
            "padding mask has {} entries, expected {batch}x{tokens}",
            keep.len()
        )));
    }
    for b in 0..batch {
        if !keep[b * tokens..(b + 1) * tokens].iter().any(|&k| k) {
            return Err(Error::invalid(format!("sequence {b} is entirely padding")));
        }
    }
    Tensor::new(
        vec![batch, 1, 1, tokens],
        keep.iter()
            .map(|&k| if k { S::zero() } else { S::neg_infinity() })
            .collect(),
    )
}

/// Scaled dot-product self-attention over `x[B, T, d]`.
///
/// `pad_mask[b * T + t]` is true for real tokens. There is no causal mask in
/// any configuration: every token attends to every non-padded token.
pub fn multi_head_attention<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &AttentionConfig,
    p: &Bound,
    prefix: &str,
    x: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.d_model {
        return Err(Error::shape(format!(
            "attention expects [B, T, {}], got {:?}",
            cfg.d_model, shape
        )));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let mask = match (pad_mask, cfg.masking) {
        (None, _) => None,
        (Some(keep), Masking::PaddingOnly) => Some(padding_mask::<S>(keep, b, t)?),
        (Some(keep), Masking::None) => {
            if keep.iter().all(|&k| k) {
                None
            } else {
                return Err(Error::invalid(
                    "padding mask given to attention configured without masking",
                ));
            }
        }
    };

    // Keys and values are reduced in a canonical token order (rows sorted by
    // value), so reordering the input reorders the output bit for bit.
    let order = canonical_order(g.value(x), b, t, d);
    let kv_src = g.gather(x, Arc::new(row_gather_table(&order, t, d)), &[b, t, d])?;
    let mask = mask.map(|m| {
        let data = m.data();
        let permuted = (0..b * t).map(|i| data[(i / t) * t + order[i]]).collect();
        Tensor::new(vec![b, 1, 1, t], permuted).expect("mask shape")
    });

    let heads = |g: &mut Graph<S>, name: &str, src: Var| -> Result<Var> {
        let y = linear(g, p, &format!("{prefix}.{name}"), src)?;
        let y = g.reshape(y, &[b, t, h, dh])?;
        g.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(g, "q_proj", x)?;
    let k = heads(g, "k_proj", kv_src)?;
    let v = heads(g, "v_proj", kv_src)?;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
    let weights = g.softmax_lastdim(scores, mask.as_ref())?;
    let ctx = g.matmul(weights, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, t, d])?;
    linear(g, p, &format!("{prefix}.out_proj"), ctx)
}

/// Per sequence, token indices sorted lexicographically by row values
/// (total order on floats; stable, so equal rows keep input order).
fn canonical_order<S: Scalar>(x: &Tensor<S>, b: usize, t: usize, d: usize) -> Vec<usize> {
    let data = x.data();
    let mut out = Vec::with_capacity(b * t);
    for s in 0..b {
        let row = |i: usize| &data[(s * t + i) * d..(s * t + i + 1) * d];
        let mut idx: Vec<usize> = (0..t).collect();
        idx.sort_by(|&i, &j| {
            row(i)
                .iter()
                .zip(row(j))
                .map(|(a, c)| a.as_f64().total_cmp(&c.as_f64()))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        out.extend(idx);
    }
    out
}

fn row_gather_table(order: &[usize], t: usize, d: usize) -> Vec<usize> {
    let mut table = Vec::with_capacity(order.len() * d);
    for (i, &src) in order.iter().enumerate() {
        let base = ((i / t) * t + src) * d;
        table.extend(base..base + d);
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// `fc2(gelu(fc1(x)))` with biases.
    Gelu2Layer,
    /// `down(silu(gate(x)) * up(x))` without biases.
    Swiglu,
}

pub fn mlp_param_count(kind: MlpKind, d: usize, ff: usize) -> usize {
    match kind {
        MlpKind::Gelu2Layer => linear_param_count(d, ff, true) + linear_param_count(ff, d, true),
        MlpKind::Swiglu => 3 * d * ff,
    }
}

pub fn register_mlp<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &mut Init,
    prefix: &str,
    kind: MlpKind,
    d: usize,
    ff: usize,
    std: f64,
    trainable: bool,
) -> Result<()> {
    match kind {
        MlpKind::Gelu2Layer => {
            init.linear(store, &format!("{prefix}.fc1"), d, ff, true, std, trainable)?;
            init.linear(store, &format!("{prefix}.fc2"), ff, d, true, std, trainable)
        }
        MlpKind::Swiglu => {
            init.linear(store, &format!("{prefix}.gate"), d, ff, false, std, trainable)?;
            init.linear(store, &format!("{prefix}.up"), d, ff, false, std, trainable)?;
            init.linear(store, &format!("{prefix}.down"), ff, d, false, std, trainable)
        }
    }
}

pub fn transformer_mlp<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    x: Var,
    kind: MlpKind,
) -> Result<Var> {
    match kind {
        MlpKind::Gelu2Layer => {
            let hdn = linear(g, p, &format!("{prefix}.fc1"), x)?;
            let hdn = g.gelu(hdn);
            linear(g, p, &format!("{prefix}.fc2"), hdn)
        }
        MlpKind::Swiglu => {
            let gate = linear(g, p, &format!("{prefix}.gate"), x)?;
            let gate = g.silu(gate);
            let up = linear(g, p, &format!("{prefix}.up"), x)?;
            let hdn = g.mul(gate, up)?;
            linear(g, p, &format!("{prefix}.down"), hdn)
        }
    }
}

/// Number of tokens produced by non-overlapping patches, or an error naming
/// the offending extents.
pub fn patch_grid(extents: &[usize], patch: &[usize]) -> Result<Vec<usize>> {
    if extents.len() != patch.len() {
        return Err(Error::shape(format!(
            "patch {patch:?} does not match spatial extents {extents:?}"
        )));
    }
    if patch.iter().any(|&p| p == 0)
        || extents.iter().zip(patch).any(|(&e, &p)| e % p != 0)
    {
        return Err(Error::shape(match extents.len() {
            2 => format!(
                "image extents H={}, W={} are not divisible by patch size P={}",
                extents[0],
                extents[1],
                if patch[0] == patch[1] {
                    patch[0].to_string()
                } else {
                    format!("{patch:?}")
                }
            ),
            _ => format!(
                "volume extents (D, H, W)={extents:?} are not divisible by patch {patch:?}"
            ),
        }));
    }
    Ok(extents.iter().zip(patch).map(|(e, p)| e / p).collect())
}

/// Gather table that rearranges `[B, C, *spatial]` into
/// `[B, tokens, C * prod(patch)]`; tokens are in row-major grid order and
/// each patch vector is ordered `(c, *within-patch offsets)`.
fn patchify_table(batch: usize, channels: usize, extents: &[usize], patch: &[usize]) -> Result<(Vec<usize>, usize, usize)> {
    let grid = patch_grid(extents, patch)?;
    let n_tok: usize = grid.iter().product();
    let p_vol: usize = patch.iter().product();
    let feat = channels * p_vol;
    let spatial: usize = extents.iter().product();
    let nd = extents.len();
    let mut table = Vec::with_capacity(batch * n_tok * feat);
    let mut gidx = vec![0usize; nd];
    let mut pidx = vec![0usize; nd];
    for b in 0..batch {
        for tok in 0..n_tok {
            let mut r = tok;
            for ax in (0..nd).rev() {
                gidx[ax] = r % grid[ax];
                r /= grid[ax];
            }
            for c in 0..channels {
                for po in 0..p_vol {
                    let mut r = po;
                    for ax in (0..nd).rev() {
                        pidx[ax] = r % patch[ax];
                        r /= patch[ax];
                    }
                    let mut off = 0;
                    for ax in 0..nd {
                        off = off * extents[ax] + gidx[ax] * patch[ax] + pidx[ax];
                    }
                    table.push((b * channels + c) * spatial + off);
                }
            }
        }
    }
    Ok((table, n_tok, feat))
}

/// Patch embedding for any number of spatial axes: `x[B, C, *spatial]`
/// with one patch extent per spatial axis.
pub fn patch_embed_nd<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    x: Var,
    patch: &[usize],
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != patch.len() + 2 {
        return Err(Error::shape(format!(
            "patch {patch:?} needs input [B, C, {} spatial axes], got {shape:?}",
            patch.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let (table, n_tok, feat) = patchify_table(b, c, &shape[2..], patch)?;
    let patches = g.gather(x, Arc::new(table), &[b, n_tok, feat])?;
    linear(g, p, prefix, patches)
}

/// Non-overlapping `P x P` patches of `images[B, C, H, W]`, flattened and
/// projected to `[B, (H/P)(W/P), d]`.
pub fn patch_embed_2d<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    images: Var,
    patch: usize,
) -> Result<Var> {
    if g.shape(images).len() != 4 {
        return Err(Error::shape(format!(
            "patch_embed_2d expects [B, C, H, W], got {:?}",
            g.shape(images)
        )));
    }
    patch_embed_nd(g, p, prefix, images, &[patch, patch])
}

/// Tubelet patches of `volumes[B, C, D, H, W]` projected to `[B, T, d]`.
pub fn patch_embed_3d<S: Scalar>(
    g: &mut Graph<S>,
    p: &Bound,
    prefix: &str,
    volumes: Var,
    patch: [usize; 3],
) -> Result<Var> {
    if g.shape(volumes).len() != 5 {
        return Err(Error::shape(format!(
            "patch_embed_3d expects [B, C, D, H, W], got {:?}",
            g.shape(volumes)
        )));
    }
    patch_embed_nd(g, p, prefix, volumes, &patch)
}
