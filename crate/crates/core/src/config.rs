//! JSON run configuration: parsing, `--set` overrides and resolution of
//! presets and defaults into a fully explicit document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, BackboneKind, Pooling, PRESETS};
use crate::booster::{BoosterConfig, ModelSpec};
use crate::data::dataset::{
    gen_synthetic, load_array_dir, load_npz, resize_bilinear_2d, DatasetBundle, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::llm_block::{LlmBlockConfig, LlmSource};
use crate::train::TrainConfig;

/// Backbone section: an optional preset plus field overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub kind: Option<BackboneKind>,
    #[serde(default)]
    pub d_model: Option<usize>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub depth_temporal: Option<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default)]
    pub ffn_ratio: Option<usize>,
    #[serde(default)]
    pub patch: Option<Vec<usize>>,
    #[serde(default)]
    pub input: Option<Vec<usize>>,
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default)]
    pub pooling: Option<Pooling>,
}

/// Frozen-block section: an optional preset (`desk`, `llama7b`) plus overrides.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub d_llm: Option<usize>,
    #[serde(default)]
    pub n_heads: Option<usize>,
    #[serde(default)]
    pub d_ffn: Option<usize>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub depth: Option<usize>,
    #[serde(default)]
    pub source: Option<LlmSource>,
    #[serde(default)]
    pub frozen: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub backbone: BackboneSection,
    pub booster: BoosterConfig,
    #[serde(default)]
    pub llm: LlmSection,
    /// Seed of the initial parameter draw.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Npz {
        path: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
        /// Bilinear resize `[H, W]` applied to 2D images after loading.
        #[serde(default)]
        resize: Option<[usize; 2]>,
    },
    Dir {
        path: PathBuf,
        #[serde(default)]
        n_classes: Option<usize>,
        #[serde(default)]
        resize: Option<[usize; 2]>,
    },
    Synthetic {
        generator: SyntheticKind,
        n_per_class: usize,
        n_classes: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DataConfig {
    /// Class count known without reading any file.
    pub fn declared_classes(&self) -> Option<usize> {
        match self {
            DataConfig::Npz { n_classes, .. } | DataConfig::Dir { n_classes, .. } => *n_classes,
            DataConfig::Synthetic { n_classes, .. } => Some(*n_classes),
        }
    }

    fn resize(&self) -> Option<[usize; 2]> {
        match self {
            DataConfig::Npz { resize, .. } | DataConfig::Dir { resize, .. } => *resize,
            DataConfig::Synthetic { .. } => None,
        }
    }

    /// Relative paths are taken relative to `base`.
    pub fn load(&self, base: &Path) -> Result<DatasetBundle> {
        let mut bundle = match self {
            DataConfig::Npz { path, n_classes, .. } => load_npz(base.join(path), *n_classes)?,
            DataConfig::Dir { path, n_classes, .. } => load_array_dir(base.join(path), *n_classes)?,
            DataConfig::Synthetic {
                generator,
                n_per_class,
                n_classes,
                seed,
            } => gen_synthetic(*generator, *n_per_class, *n_classes, *seed)?,
        };
        if let Some([h, w]) = self.resize() {
            if bundle.spatial_dims() != 2 {
                return Err(Error::config("data.resize", "only applies to 2D images"));
            }
            for split in [&mut bundle.train, &mut bundle.val, &mut bundle.test] {
                split.images = resize_bilinear_2d(&split.images, h, w)?;
            }
        }
        Ok(bundle)
    }

    /// Spatial rank of the samples, when known without reading.
    fn declared_spatial_dims(&self) -> Option<usize> {
        match self {
            DataConfig::Synthetic { generator, .. } => Some(match generator {
                SyntheticKind::Blobs2d => 2,
                SyntheticKind::Blobs3d => 3,
            }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/latest")
}

/// Every value explicit; serializes to a document that parses back to the
/// same configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub model: ResolvedModel,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedModel {
    pub backbone: BackboneConfig,
    pub booster: BoosterConfig,
    pub llm: LlmBlockConfig,
    pub seed: u64,
}

impl ResolvedConfig {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            backbone: self.model.backbone.clone(),
            booster: self.model.booster.clone(),
            llm: self.model.llm.clone(),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Applies `dotted.path=value` to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise; missing
/// intermediate objects are created.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like dotted.path=value"))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::config(path, "bad override path"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(keys[..i].join("."), "is not an object"))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

fn json_error(e: serde_path_to_error::Error<serde_json::Error>, source: &str) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let loc = if inner.line() > 0 {
        format!(" ({source} line {}, column {})", inner.line(), inner.column())
    } else {
        String::new()
    };
    Error::config(if path == "." { "<root>".into() } else { path }, format!("{inner}{loc}"))
}

/// Parses a config document, applying overrides before validation.
pub fn parse_config(text: &str, source: &str, overrides: &[String]) -> Result<RawConfig> {
    let raw: RawConfig = if overrides.is_empty() {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg = serde_path_to_error::deserialize(&mut de).map_err(|e| json_error(e, source))?;
        de.end().map_err(|e| Error::config("<root>", format!("{e} ({source})")))?;
        cfg
    } else {
        let mut doc: Value = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", format!("{e} ({source} line {}, column {})", e.line(), e.column())))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        serde_path_to_error::deserialize(doc).map_err(|e| json_error(e, source))?
    };
    Ok(raw)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RawConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string(), overrides)
}

fn resolve_backbone(s: &BackboneSection, n_classes: Option<usize>) -> Result<BackboneConfig> {
    let p = |f: &str| format!("model.backbone.{f}");
    let n_classes = s.n_classes.or(n_classes).ok_or_else(|| {
        Error::config(p("n_classes"), "required when the data section does not declare n_classes")
    })?;
    let mut cfg = match &s.preset {
        Some(name) => BackboneConfig::preset(name, n_classes).ok_or_else(|| {
            Error::config(p("preset"), format!("unknown preset `{name}`, expected one of {}", PRESETS.join(", ")))
        })?,
        None => BackboneConfig {
            kind: s.kind.ok_or_else(|| Error::config(p("kind"), "required without a preset"))?,
            d_model: s.d_model.ok_or_else(|| Error::config(p("d_model"), "required without a preset"))?,
            depth: s.depth.ok_or_else(|| Error::config(p("depth"), "required without a preset"))?,
            depth_temporal: 0,
            n_heads: s.n_heads.ok_or_else(|| Error::config(p("n_heads"), "required without a preset"))?,
            ffn_ratio: 4,
            patch: s.patch.clone().ok_or_else(|| Error::config(p("patch"), "required without a preset"))?,
            input: s.input.clone().ok_or_else(|| Error::config(p("input"), "required without a preset"))?,
            n_classes,
            pooling: Pooling::ClsToken,
        },
    };
    if let Some(v) = s.kind {
        cfg.kind = v;
    }
    if let Some(v) = s.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = s.depth {
        cfg.depth = v;
    }
    if let Some(v) = s.depth_temporal {
        cfg.depth_temporal = v;
    }
    if let Some(v) = s.n_heads {
        cfg.n_heads = v;
    }
    if let Some(v) = s.ffn_ratio {
        cfg.ffn_ratio = v;
    }
    if let Some(v) = &s.patch {
        cfg.patch = v.clone();
    }
    if let Some(v) = &s.input {
        cfg.input = v.clone();
    }
    if let Some(v) = s.pooling {
        cfg.pooling = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_llm(s: &LlmSection) -> Result<LlmBlockConfig> {
    let source = s.source.clone().unwrap_or(LlmSource::Synthetic { seed: 0 });
    let mut cfg = match s.preset.as_deref().unwrap_or("desk") {
        "desk" => LlmBlockConfig {
            source,
            ..LlmBlockConfig::desk(0)
        },
        "llama7b" => LlmBlockConfig::llama7b(source),
        other => {
            return Err(Error::config(
                "model.llm.preset",
                format!("unknown preset `{other}`, expected one of desk, llama7b"),
            ))
        }
    };
    if let Some(v) = s.d_llm {
        cfg.d_llm = v;
    }
    if let Some(v) = s.n_heads {
        cfg.n_heads = v;
    }
    if let Some(v) = s.d_ffn {
        cfg.d_ffn = v;
    }
    if let Some(v) = s.eps {
        cfg.eps = v;
    }
    if let Some(v) = s.depth {
        cfg.depth = v;
    }
    if let Some(v) = s.frozen {
        cfg.frozen = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves presets and defaults. `n_classes` and `spatial_dims` come from
/// loaded data when available; otherwise from the config alone.
pub fn resolve(raw: &RawConfig, data: Option<&DatasetBundle>) -> Result<ResolvedConfig> {
    let n_classes = data.map(|d| d.n_classes).or(raw.data.declared_classes());
    let backbone = resolve_backbone(&raw.model.backbone, n_classes)?;
    let llm = resolve_llm(&raw.model.llm)?;
    let mut train = raw.train.clone();
    let spatial = data
        .map(|d| d.spatial_dims())
        .or(raw.data.declared_spatial_dims())
        .unwrap_or(backbone.spatial_dims());
    train.resolve(spatial);
    train.validate()?;
    if let Some(d) = data {
        if backbone.input != d.sample_shape() {
            return Err(Error::config(
                "model.backbone.input",
                format!("{:?} does not match the data samples {:?}", backbone.input, d.sample_shape()),
            ));
        }
        if backbone.n_classes != d.n_classes {
            return Err(Error::config(
                "model.backbone.n_classes",
                format!("{} does not match the data's {} classes", backbone.n_classes, d.n_classes),
            ));
        }
    }
    let resolved = ResolvedConfig {
        model: ResolvedModel {
            backbone,
            booster: raw.model.booster.clone(),
            llm,
            seed: raw.model.seed,
        },
        train,
        data: raw.data.clone(),
        output_dir: raw.output_dir.clone(),
    };
    resolved.spec().validate()?;
    Ok(resolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"{
        "model": {"backbone": {"preset": "vit-tiny"}, "booster": {"variant": "r-llm"}},
        "data": {"kind": "synthetic", "generator": "blobs2d", "n_per_class": 10, "n_classes": 4}
    }"#;

    #[test]
    fn resolves_presets_and_defaults() {
        let raw = parse_config(BASIC, "cfg", &[]).unwrap();
        let r = resolve(&raw, None).unwrap();
        assert_eq!(r.model.backbone.n_classes, 4);
        assert_eq!(r.model.llm.d_llm, 64);
        assert_eq!(r.train.lr, Some(5e-4));
        // the resolved document is itself a valid config
        let text = r.to_json();
        let again = resolve(&parse_config(&text, "resolved", &[]).unwrap(), None).unwrap();
        assert_eq!(again, r);
    }

    #[test]
    fn overrides_and_errors() {
        let raw = parse_config(BASIC, "cfg", &["train.lr=1e-5".into()]).unwrap();
        assert_eq!(raw.train.lr, Some(1e-5));
        let e = parse_config(BASIC, "cfg", &["model.booster.variant=rllm".into()]).unwrap_err();
        assert!(e.is_config());
        let msg = e.to_string();
        assert!(msg.contains("model.booster.variant") && msg.contains("r-llm"), "{msg}");
        let e = parse_config(&BASIC.replace("\"seed\"", "x").replace("\"n_classes\": 4}", "\"n_classes\": 4, \"bogus\": 1}"), "cfg", &[])
            .unwrap_err()
            .to_string();
        assert!(e.contains("data") && e.contains("bogus"), "{e}");
        assert!(e.contains("line 4"), "{e}");
    }
}
