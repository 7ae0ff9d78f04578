//! Vision encoders (ViT-2D, ViT-3D, factorised ViViT) and the classifier head.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    layernorm, layernorm_params, linear, multi_head_attention, patch_grid, register_mlp,
    transformer_mlp, AttentionConfig, Bound, Init, Masking, MlpKind, ParamStore, INIT_STD,
};
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "backbone";
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Vit2d,
    Vit3d,
    VivitFactorised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    ClsToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub d_model: usize,
    /// Transformer blocks (the spatial encoder for ViViT).
    pub depth: usize,
    /// Temporal encoder blocks; ViViT only.
    #[serde(default)]
    pub depth_temporal: usize,
    pub n_heads: usize,
    pub ffn_ratio: usize,
    /// `[P]` or `[P_h, P_w]` for 2D; `[P]` or `[P_d, P_h, P_w]` for volumes.
    pub patch: Vec<usize>,
    /// `[C, H, W]` or `[C, D, H, W]`.
    pub input: Vec<usize>,
    pub n_classes: usize,
    pub pooling: Pooling,
}

pub const PRESETS: [&str; 4] = ["vit-tiny", "vit3d-tiny", "vivit-tiny", "vit-s"];

impl BackboneConfig {
    pub fn preset(name: &str, n_classes: usize) -> Option<Self> {
        let tiny = |kind, patch: Vec<usize>, input: Vec<usize>, depth_temporal| BackboneConfig {
            kind,
            d_model: 64,
            depth: 4,
            depth_temporal,
            n_heads: 4,
            ffn_ratio: 4,
            patch,
            input,
            n_classes,
            pooling: Pooling::ClsToken,
        };
        Some(match name {
            "vit-tiny" => tiny(BackboneKind::Vit2d, vec![4, 4], vec![1, 28, 28], 0),
            "vit3d-tiny" => tiny(BackboneKind::Vit3d, vec![7, 7, 7], vec![1, 28, 28, 28], 0),
            "vivit-tiny" => tiny(BackboneKind::VivitFactorised, vec![4, 7, 7], vec![1, 28, 28, 28], 2),
            "vit-s" => BackboneConfig {
                kind: BackboneKind::Vit2d,
                d_model: 384,
                depth: 12,
                depth_temporal: 0,
                n_heads: 6,
                ffn_ratio: 4,
                patch: vec![16, 16],
                input: vec![3, 224, 224],
                n_classes,
                pooling: Pooling::ClsToken,
            },
            _ => return None,
        })
    }

    pub fn spatial_dims(&self) -> usize {
        match self.kind {
            BackboneKind::Vit2d => 2,
            _ => 3,
        }
    }

    /// Patch extents with a scalar patch expanded to every spatial axis.
    pub fn patch_dims(&self) -> Vec<usize> {
        if self.patch.len() == 1 {
            vec![self.patch[0]; self.spatial_dims()]
        } else {
            self.patch.clone()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            masking: Masking::None,
            qkv_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let path = |f: &str| format!("model.backbone.{f}");
        if self.d_model == 0 {
            return Err(Error::config(path("d_model"), "must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::config(path("depth"), "must be at least 1"));
        }
        if self.kind == BackboneKind::VivitFactorised && self.depth_temporal == 0 {
            return Err(Error::config(path("depth_temporal"), "must be at least 1 for vivit_factorised"));
        }
        if self.kind != BackboneKind::VivitFactorised && self.depth_temporal != 0 {
            return Err(Error::config(path("depth_temporal"), "only applies to vivit_factorised"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                path("n_heads"),
                format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads),
            ));
        }
        if self.ffn_ratio == 0 {
            return Err(Error::config(path("ffn_ratio"), "must be positive"));
        }
        if self.n_classes < 2 {
            return Err(Error::config(path("n_classes"), "must be at least 2"));
        }
        let nd = self.spatial_dims();
        if self.input.len() != nd + 1 {
            return Err(Error::config(
                path("input"),
                format!("expected {} entries (C plus {nd} spatial extents), got {:?}", nd + 1, self.input),
            ));
        }
        if self.input.contains(&0) {
            return Err(Error::config(path("input"), "extents must be positive"));
        }
        if self.patch.len() != 1 && self.patch.len() != nd {
            return Err(Error::config(
                path("patch"),
                format!("expected 1 or {nd} entries, got {:?}", self.patch),
            ));
        }
        patch_grid(&self.input[1..], &self.patch_dims()).map_err(|e| Error::config(path("patch"), e.to_string()))?;
        Ok(())
    }

    /// Patch grid, e.g. `[7, 7]` for 28x28 with patch 4.
    pub fn grid(&self) -> Result<Vec<usize>> {
        patch_grid(&self.input[1..], &self.patch_dims())
    }

    /// Tokens per sample in the backbone output, CLS included.
    pub fn output_tokens(&self) -> Result<usize> {
        let grid = self.grid()?;
        Ok(match self.kind {
            BackboneKind::VivitFactorised => grid[0] + 1,
            _ => grid.iter().product::<usize>() + 1,
        })
    }

    fn patch_features(&self) -> usize {
        self.input[0] * self.patch_dims().iter().product::<usize>()
    }
}

fn register_encoder<S: Scalar>(
    store: &mut ParamStore<S>,
    init: &mut Init,
    cfg: &BackboneConfig,
    prefix: &str,
    tokens: usize,
    depth: usize,
) -> Result<()> {
    let d = cfg.d_model;
    store.insert(format!("{prefix}.cls_token"), init.normal(&[1, 1, d], INIT_STD), true)?;
    store.insert(format!("{prefix}.pos_embed"), init.normal(&[1, tokens + 1, d], INIT_STD), true)?;
    let attn = cfg.attention();
    for i in 0..depth {
        let b = format!("{prefix}.blocks.{i}");
        layernorm_params(store, &format!("{b}.norm1"), d)?;
        attn.register(store, init, &format!("{b}.attn"), INIT_STD, true)?;
        layernorm_params(store, &format!("{b}.norm2"), d)?;
        register_mlp(store, init, &format!("{b}.mlp"), MlpKind::Gelu2Layer, d, d * cfg.ffn_ratio, INIT_STD, true)?;
    }
    layernorm_params(store, &format!("{prefix}.norm"), d)
}

/// Registers `backbone.*`, drawing weights from `init` in registration order.
pub fn register_backbone<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    init.linear(store, &format!("{PREFIX}.patch_embed"), cfg.patch_features(), cfg.d_model, true, INIT_STD, true)?;
    match cfg.kind {
        BackboneKind::Vit2d | BackboneKind::Vit3d => {
            register_encoder(store, init, cfg, PREFIX, grid.iter().product(), cfg.depth)
        }
        BackboneKind::VivitFactorised => {
            register_encoder(store, init, cfg, &format!("{PREFIX}.spatial"), grid[1] * grid[2], cfg.depth)?;
            register_encoder(store, init, cfg, &format!("{PREFIX}.temporal"), grid[0], cfg.depth_temporal)
        }
    }
}

/// Registers `classifier.fc1` (d→d) and `classifier.fc2` (d→K).
pub fn register_classifier<S: Scalar>(store: &mut ParamStore<S>, init: &mut Init, d: usize, n_classes: usize) -> Result<()> {
    init.linear(store, &format!("{CLASSIFIER}.fc1"), d, d, true, INIT_STD, true)?;
    init.linear(store, &format!("{CLASSIFIER}.fc2"), d, n_classes, true, INIT_STD, true)
}

/// Intermediate activations recorded during a forward pass, by layer name.
pub type Taps = IndexMap<String, Var>;

/// Pre-norm block: `x + attn(ln1(x))`, then `+ mlp(ln2(·))`. The `ln1`
/// output is recorded under the block's name.
fn block<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    p: &Bound,
    prefix: &str,
    x: Var,
    taps: &mut Option<&mut Taps>,
) -> Result<Var> {
    let h = layernorm(g, p, &format!("{prefix}.norm1"), x)?;
    if let Some(t) = taps.as_deref_mut() {
        t.insert(prefix.to_string(), h);
    }
    let a = multi_head_attention(g, &cfg.attention(), p, &format!("{prefix}.attn"), h, None)?;
    let x = g.add(x, a)?;
    let h = layernorm(g, p, &format!("{prefix}.norm2"), x)?;
    let m = transformer_mlp(g, p, &format!("{prefix}.mlp"), h, MlpKind::Gelu2Layer)?;
    g.add(x, m)
}

/// CLS prepend, positional embedding, blocks, final norm over `tokens[B, T, d]`.
fn encoder<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    p: &Bound,
    prefix: &str,
    tokens: Var,
    depth: usize,
    taps: &mut Option<&mut Taps>,
) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    let (b, d) = (shape[0], shape[2]);
    let cls = p.get(&format!("{prefix}.cls_token"))?;
    let cls = g.broadcast_to(cls, &[b, 1, d])?;
    let x = g.concat(&[cls, tokens], 1)?;
    let pos = p.get(&format!("{prefix}.pos_embed"))?;
    let mut x = g.add(x, pos)?;
    for i in 0..depth {
        x = block(g, cfg, p, &format!("{prefix}.blocks.{i}"), x, taps)?;
    }
    layernorm(g, p, &format!("{prefix}.norm"), x)
}

/// `F_V`: images `[B, *input]` to tokens `[B, T+1, d_model]` with the class
/// token first.
pub fn backbone_forward<S: Scalar>(
    g: &mut Graph<S>,
    cfg: &BackboneConfig,
    p: &Bound,
    batch: Var,
    mut taps: Option<&mut Taps>,
) -> Result<Var> {
    let shape = g.shape(batch).to_vec();
    if shape.len() != cfg.input.len() + 1 || shape[1..] != cfg.input[..] {
        return Err(Error::shape(format!(
            "backbone expects [B, {}], got {:?}",
            cfg.input.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
            shape
        )));
    }
    let b = shape[0];
    let grid = cfg.grid()?;
    let pe = crate::nn::patch_embed_nd(g, p, &format!("{PREFIX}.patch_embed"), batch, &cfg.patch_dims())?;
    match cfg.kind {
        BackboneKind::Vit2d | BackboneKind::Vit3d => encoder(g, cfg, p, PREFIX, pe, cfg.depth, &mut taps),
        BackboneKind::VivitFactorised => {
            let (nt, ns, d) = (grid[0], grid[1] * grid[2], cfg.d_model);
            let frames = g.reshape(pe, &[b * nt, ns, d])?;
            let sp = encoder(g, cfg, p, &format!("{PREFIX}.spatial"), frames, cfg.depth, &mut taps)?;
            let cls = g.narrow(sp, 1, 0, 1)?;
            let per_frame = g.reshape(cls, &[b, nt, d])?;
            encoder(g, cfg, p, &format!("{PREFIX}.temporal"), per_frame, cfg.depth_temporal, &mut taps)
        }
    }
}

/// CLS row of `features[B, T+1, d]`.
pub fn pool<S: Scalar>(g: &mut Graph<S>, features: Var) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape(format!("pool expects [B, T+1, d], got {shape:?}")));
    }
    let cls = g.narrow(features, 1, 0, 1)?;
    g.reshape(cls, &[shape[0], shape[2]])
}

/// `F_C`: `fc2(gelu(fc1(z)))`, logits `[B, K]`.
pub fn classify<S: Scalar>(g: &mut Graph<S>, p: &Bound, features: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{CLASSIFIER}.fc1"), features)?;
    let h = g.gelu(h);
    linear(g, p, &format!("{CLASSIFIER}.fc2"), h)
}

/// Zeroes every block's attention output and MLP second projection, which
/// turns all blocks into identity maps.
pub fn zero_block_outputs<S: Scalar>(store: &mut ParamStore<S>) {
    let names: Vec<String> = store
        .names()
        .filter(|n| {
            n.starts_with("backbone.")
                && (n.contains(".attn.out_proj.") || n.contains(".mlp.fc2."))
        })
        .map(str::to_string)
        .collect();
    for n in names {
        let t = store.tensor_mut(&n).expect("listed name");
        *t = Tensor::zeros(&t.shape().to_vec());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BindMode;
    use crate::rng::Pcg32;

    fn build(cfg: &BackboneConfig) -> ParamStore<f32> {
        let mut rng = Pcg32::seeded(3);
        let mut init = Init::new(&mut rng);
        let mut s = ParamStore::new();
        register_backbone(&mut s, &mut init, cfg).unwrap();
        register_classifier(&mut s, &mut init, cfg.d_model, cfg.n_classes).unwrap();
        s
    }

    fn shrink(mut cfg: BackboneConfig) -> BackboneConfig {
        cfg.d_model = 8;
        cfg.n_heads = 2;
        cfg.depth = 1;
        cfg.ffn_ratio = 1;
        if cfg.depth_temporal > 0 {
            cfg.depth_temporal = 1;
        }
        cfg
    }

    fn out_shape(cfg: &BackboneConfig, b: usize) -> Vec<usize> {
        let s = build(cfg);
        let mut g = Graph::new();
        let p = s.bind(&mut g, BindMode::Trainable);
        let mut shape = vec![b];
        shape.extend_from_slice(&cfg.input);
        let x = g.constant(Tensor::from_fn(&shape, |i| (i % 7) as f32 / 7.0));
        let y = backbone_forward(&mut g, cfg, &p, x, None).unwrap();
        let z = pool(&mut g, y).unwrap();
        let logits = classify(&mut g, &p, z).unwrap();
        assert_eq!(g.shape(logits), &[b, cfg.n_classes]);
        g.shape(y).to_vec()
    }

    #[test]
    fn output_token_counts() {
        let v = shrink(BackboneConfig::preset("vit-tiny", 4).unwrap());
        assert_eq!(out_shape(&v, 2), vec![2, 50, 8]);
        let v3 = shrink(BackboneConfig::preset("vit3d-tiny", 2).unwrap());
        assert_eq!(out_shape(&v3, 1), vec![1, 65, 8]);
        let vv = shrink(BackboneConfig::preset("vivit-tiny", 11).unwrap());
        assert_eq!(out_shape(&vv, 2), vec![2, 8, 8]);
        assert_eq!(vv.output_tokens().unwrap(), 8);
    }

    #[test]
    fn depth_zero_is_config_error() {
        let mut c = BackboneConfig::preset("vit-tiny", 2).unwrap();
        c.depth = 0;
        let e = c.validate().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("model.backbone.depth"));
    }

    #[test]
    fn vit_s_tokens() {
        let c = BackboneConfig::preset("vit-s", 2).unwrap();
        assert_eq!(c.output_tokens().unwrap(), 197);
    }
}
