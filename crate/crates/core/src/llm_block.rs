//! The frozen language-model block: pre-norm RMSNorm, padding-only
//! self-attention without biases, SwiGLU MLP. It has no positional encoding
//! of any kind, so it is equivariant to token permutations.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, register_mlp, transformer_mlp, AttentionConfig, Bound, Init, Masking,
    MlpKind, ParamStore,
};
use crate::rng::Pcg32;
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "llm_block";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LlmSource {
    Synthetic { seed: u64 },
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmBlockConfig {
    pub d_llm: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Number of stacked blocks.
    #[serde(default = "default_depth")]
    pub depth: usize,
    pub source: LlmSource,
    #[serde(default = "default_frozen")]
    pub frozen: bool,
}

fn default_eps() -> f64 {
    1e-5
}
fn default_depth() -> usize {
    1
}
fn default_frozen() -> bool {
    true
}

impl LlmBlockConfig {
    /// Desk-scale block: width 64, 4 heads, SwiGLU hidden 172.
    pub fn desk(seed: u64) -> Self {
        LlmBlockConfig {
            d_llm: 64,
            n_heads: 4,
            d_ffn: 172,
            eps: default_eps(),
            depth: 1,
            source: LlmSource::Synthetic { seed },
            frozen: true,
        }
    }

    /// LLaMA-7B block dimensions.
    pub fn llama7b(source: LlmSource) -> Self {
        LlmBlockConfig {
            d_llm: 4096,
            n_heads: 32,
            d_ffn: 11008,
            eps: default_eps(),
            depth: 1,
            source,
            frozen: true,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_llm,
            n_heads: self.n_heads,
            masking: Masking::PaddingOnly,
            qkv_bias: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_llm == 0 {
            return Err(Error::config("model.llm.d_llm", "must be positive"));
        }
        if self.n_heads == 0 || self.d_llm % self.n_heads != 0 {
            return Err(Error::config(
                "model.llm.n_heads",
                format!("d_llm {} is not divisible by n_heads {}", self.d_llm, self.n_heads),
            ));
        }
        if self.depth == 0 {
            return Err(Error::config("model.llm.depth", "must be at least 1"));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::config("model.llm.eps", "must be non-negative"));
        }
        Ok(())
    }

    /// Expected parameter shapes, in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_llm, self.d_ffn);
        let mut out = Vec::new();
        for i in 0..self.depth {
            let l = format!("{PREFIX}.layers.{i}");
            out.push((format!("{l}.attn_norm.weight"), vec![d]));
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                out.push((format!("{l}.attn.{proj}.weight"), vec![d, d]));
            }
            out.push((format!("{l}.mlp_norm.weight"), vec![d]));
            out.push((format!("{l}.mlp.gate.weight"), vec![d, ff]));
            out.push((format!("{l}.mlp.up.weight"), vec![d, ff]));
            out.push((format!("{l}.mlp.down.weight"), vec![ff, d]));
        }
        out
    }
}

/// `4·d² + 3·d·d_ffn + 2·d` per block.
pub fn llm_param_count(cfg: &LlmBlockConfig) -> usize {
    let (d, ff) = (cfg.d_llm, cfg.d_ffn);
    cfg.depth * (4 * d * d + 3 * d * ff + 2 * d)
}

/// Builds the block parameters, registered under `llm_block.*` with
/// `trainable = !frozen`.
pub fn load_or_synthesize<S: Scalar>(cfg: &LlmBlockConfig, frozen: bool) -> Result<ParamStore<S>> {
    cfg.validate()?;
    let trainable = !frozen;
    let mut store = ParamStore::new();
    match &cfg.source {
        LlmSource::Synthetic { seed } => {
            let mut rng = Pcg32::for_label(*seed, PREFIX);
            let mut init = Init::new(&mut rng);
            let std = crate::nn::INIT_STD / std::f64::consts::SQRT_2;
            let attn = cfg.attention();
            for i in 0..cfg.depth {
                let l = format!("{PREFIX}.layers.{i}");
                store.insert(
                    format!("{l}.attn_norm.weight"),
                    Tensor::full(&[cfg.d_llm], S::one()),
                    trainable,
                )?;
                attn.register(&mut store, &mut init, &format!("{l}.attn"), std, trainable)?;
                store.insert(
                    format!("{l}.mlp_norm.weight"),
                    Tensor::full(&[cfg.d_llm], S::one()),
                    trainable,
                )?;
                register_mlp(
                    &mut store,
                    &mut init,
                    &format!("{l}.mlp"),
                    MlpKind::Swiglu,
                    cfg.d_llm,
                    cfg.d_ffn,
                    std,
                    trainable,
                )?;
            }
        }
        LlmSource::Checkpoint { path } => {
            let ckpt: ParamStore<S> = checkpoint::load_checkpoint(path)?;
            let mut mismatches = Vec::new();
            for (name, shape) in cfg.param_shapes() {
                match ckpt.get(&name) {
                    Some(p) if p.tensor.shape() == shape.as_slice() => {
                        store.insert(name, p.tensor.clone(), trainable)?;
                    }
                    Some(p) => mismatches.push(format!(
                        "{name}: checkpoint {:?} vs config {:?}",
                        p.tensor.shape(),
                        shape
                    )),
                    None => mismatches.push(format!("{name}: missing from checkpoint")),
                }
            }
            if !mismatches.is_empty() {
                return Err(Error::invalid(format!(
                    "llm checkpoint {} does not match config (d_llm={}, d_ffn={}, depth={}): {}",
                    path.display(),
                    cfg.d_llm,
                    cfg.d_ffn,
                    cfg.depth,
                    mismatches.join("; ")
                )));
            }
        }
    }
    Ok(store)
}

/// `h = x + attn(rmsnorm(x)); out = h + mlp(rmsnorm(h))` for every stacked block.
pub fn llm_block_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &LlmBlockConfig,
    p: &Bound,
    tokens: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = g.shape(tokens);
    if shape.len() != 3 || shape[2] != cfg.d_llm {
        return Err(Error::shape(format!(
            "llm block expects tokens [B, T, {}], got {:?}",
            cfg.d_llm, shape
        )));
    }
    let attn = cfg.attention();
    let mut x = tokens;
    for i in 0..cfg.depth {
        let l = format!("{PREFIX}.layers.{i}");
        let w = p.get(&format!("{l}.attn_norm.weight"))?;
        let hn = g.rmsnorm(x, w, cfg.eps)?;
        let a = multi_head_attention(g, &attn, p, &format!("{l}.attn"), hn, pad_mask)?;
        let h = g.add(x, a)?;
        let w = p.get(&format!("{l}.mlp_norm.weight"))?;
        let hn = g.rmsnorm(h, w, cfg.eps)?;
        let m = transformer_mlp(g, p, &format!("{l}.mlp"), hn, MlpKind::Swiglu)?;
        x = g.add(h, m)?;
    }
    Ok(x)
}

/// Zeroes the attention output and MLP down projections, turning every
/// block into the exact identity map.
pub fn zero_output_projections<S: Scalar>(store: &mut ParamStore<S>, cfg: &LlmBlockConfig) -> Result<()> {
    for i in 0..cfg.depth {
        let l = format!("{PREFIX}.layers.{i}");
        for name in [format!("{l}.attn.out_proj.weight"), format!("{l}.mlp.down.weight")] {
            store
                .tensor_mut(&name)?
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = S::zero());
        }
    }
    Ok(())
}
