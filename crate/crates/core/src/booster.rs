//! Wiring of the adapters `F_E`, `F_D` and the frozen block `F_L` between
//! the backbone and the classifier.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    backbone_forward, classify, pool, register_backbone, register_classifier, BackboneConfig, Taps,
};
use crate::error::{Error, Result};
use crate::llm_block::{llm_block_forward, load_or_synthesize, LlmBlockConfig};
use crate::nn::{linear, linear_param_count, Bound, Init, ParamStore, INIT_STD};
use crate::rng::Pcg32;
use crate::tensor::Scalar;

pub const ENCODER: &str = "booster.encoder";
pub const DECODER: &str = "booster.decoder";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoosterVariant {
    Baseline,
    RLlm,
    OutRLlm,
    HybridRLlm,
    MlpControl,
}

impl BoosterVariant {
    pub const ALL: [BoosterVariant; 5] = [
        BoosterVariant::Baseline,
        BoosterVariant::RLlm,
        BoosterVariant::OutRLlm,
        BoosterVariant::HybridRLlm,
        BoosterVariant::MlpControl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BoosterVariant::Baseline => "baseline",
            BoosterVariant::RLlm => "r-llm",
            BoosterVariant::OutRLlm => "out-r-llm",
            BoosterVariant::HybridRLlm => "hybrid-r-llm",
            BoosterVariant::MlpControl => "mlp-control",
        }
    }

    pub fn has_adapters(self) -> bool {
        self != BoosterVariant::Baseline
    }

    pub fn has_llm(self) -> bool {
        matches!(
            self,
            BoosterVariant::RLlm | BoosterVariant::OutRLlm | BoosterVariant::HybridRLlm
        )
    }
}

impl fmt::Display for BoosterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BoosterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoosterVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "model.booster.variant",
                    format!(
                        "unknown variant `{s}`, expected one of {}",
                        BoosterVariant::ALL.map(|v| v.name()).join(", ")
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoosterConfig {
    pub variant: BoosterVariant,
    #[serde(default)]
    pub unfreeze_llm: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub booster: BoosterConfig,
    pub llm: LlmBlockConfig,
}

impl ModelSpec {
    pub fn new(backbone: BackboneConfig, variant: BoosterVariant, llm: LlmBlockConfig) -> Self {
        ModelSpec {
            backbone,
            booster: BoosterConfig {
                variant,
                unfreeze_llm: false,
            },
            llm,
        }
    }

    pub fn variant(&self) -> BoosterVariant {
        self.booster.variant
    }

    /// Whether `llm_block.*` parameters are excluded from training.
    pub fn llm_frozen(&self) -> bool {
        self.llm.frozen && !self.booster.unfreeze_llm
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.variant().has_adapters() {
            self.llm.validate()?;
        }
        Ok(())
    }
}

/// Builds all parameters: backbone, classifier, adapters, frozen block.
/// Each module draws from its own labelled stream of `seed`; the synthetic
/// block uses the seed in its own source config.
pub fn init_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<S>> {
    let mut store = init_without_llm(spec, seed)?;
    if spec.variant().has_llm() {
        store.extend(load_or_synthesize(&spec.llm, spec.llm_frozen())?)?;
    }
    Ok(store)
}

fn init_without_llm<S: Scalar>(spec: &ModelSpec, seed: u64) -> Result<ParamStore<S>> {
    spec.validate()?;
    let d = spec.backbone.d_model;
    let mut store = ParamStore::new();
    let mut rng = Pcg32::for_label(seed, "backbone");
    register_backbone(&mut store, &mut Init::new(&mut rng), &spec.backbone)?;
    let mut rng = Pcg32::for_label(seed, "classifier");
    register_classifier(&mut store, &mut Init::new(&mut rng), d, spec.backbone.n_classes)?;
    let v = spec.variant();
    if v.has_adapters() {
        let mut rng = Pcg32::for_label(seed, "booster");
        let mut init = Init::new(&mut rng);
        init.linear(&mut store, ENCODER, d, spec.llm.d_llm, true, INIT_STD, true)?;
        init.linear(&mut store, DECODER, spec.llm.d_llm, d, true, INIT_STD, true)?;
    }
    Ok(store)
}

/// Applies the variant's wiring to `tokens[B, T+1, d_model]`.
pub fn booster_forward<S: Scalar>(
    g: &mut Graph<S>,
    spec: &ModelSpec,
    p: &Bound,
    tokens: Var,
    pad_mask: Option<&[bool]>,
) -> Result<Var> {
    let v = spec.variant();
    if v == BoosterVariant::Baseline {
        return Ok(tokens);
    }
    let r = linear(g, p, ENCODER, tokens)?;
    let inner = match v {
        BoosterVariant::MlpControl => r,
        BoosterVariant::OutRLlm => llm_block_forward(g, &spec.llm, p, r, pad_mask)?,
        _ => {
            let l = llm_block_forward(g, &spec.llm, p, r, pad_mask)?;
            g.add(l, r)?
        }
    };
    let z = linear(g, p, DECODER, inner)?;
    match v {
        BoosterVariant::OutRLlm | BoosterVariant::HybridRLlm => g.add(z, tokens),
        _ => Ok(z),
    }
}

/// `F_C(pool(booster(F_V(batch))))`.
pub fn full_forward<S: Scalar>(
    g: &mut Graph<S>,
    spec: &ModelSpec,
    p: &Bound,
    batch: Var,
    pad_mask: Option<&[bool]>,
    taps: Option<&mut Taps>,
) -> Result<Var> {
    let tokens = backbone_forward(g, &spec.backbone, p, batch, taps)?;
    let z = booster_forward(g, spec, p, tokens, pad_mask)?;
    let pooled = pool(g, z)?;
    classify(g, p, pooled)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
    /// Keyed by the first path segment (`backbone`, `classifier`, ...).
    pub per_module: IndexMap<String, Counts>,
}

impl Accounting {
    pub fn counts(&self) -> Counts {
        Counts {
            total: self.total,
            trainable: self.trainable,
            frozen: self.frozen,
        }
    }
}

pub fn param_accounting<S: Scalar>(store: &ParamStore<S>) -> Accounting {
    accounting_from(store.iter().map(|(name, p)| (name, p.tensor.numel(), p.trainable)))
}

/// Accounting from shapes alone; the frozen block is never read or
/// synthesized, so this stays cheap for full-size blocks.
pub fn spec_accounting(spec: &ModelSpec) -> Result<Accounting> {
    let store = init_without_llm::<f32>(spec, 0)?;
    let llm = if spec.variant().has_llm() {
        spec.llm.validate()?;
        spec.llm.param_shapes()
    } else {
        Vec::new()
    };
    let trainable = !spec.llm_frozen();
    Ok(accounting_from(
        store
            .iter()
            .map(|(name, p)| (name, p.tensor.numel(), p.trainable))
            .chain(llm.iter().map(|(name, shape)| (name.as_str(), shape.iter().product(), trainable))),
    ))
}

fn accounting_from<'a>(params: impl Iterator<Item = (&'a str, usize, bool)>) -> Accounting {
    let mut per_module: IndexMap<String, Counts> = IndexMap::new();
    for (name, n, trainable) in params {
        let module = name.split('.').next().unwrap_or(name).to_string();
        let c = per_module.entry(module).or_default();
        c.total += n;
        if trainable {
            c.trainable += n;
        } else {
            c.frozen += n;
        }
    }
    let sum = |f: fn(&Counts) -> usize| per_module.values().map(f).sum();
    Accounting {
        total: sum(|c| c.total),
        trainable: sum(|c| c.trainable),
        frozen: sum(|c| c.frozen),
        per_module,
    }
}

/// Parameters contributed by `F_E` plus `F_D`.
pub fn adapter_param_count(d_model: usize, d_llm: usize) -> usize {
    linear_param_count(d_model, d_llm, true) + linear_param_count(d_llm, d_model, true)
}
