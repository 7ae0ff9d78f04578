//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use freeboost::backbone::{BackboneConfig, BackboneKind, Pooling};
use freeboost::booster::{init_params, BoosterVariant, ModelSpec};
use freeboost::data::crc32::crc32;
use freeboost::data::npy::{NpyArray, NpyData};
use freeboost::data::zip::ZipWriter;
use freeboost::llm_block::{LlmBlockConfig, LlmSource};
use freeboost::nn::ParamStore;
use freeboost::rng::Pcg32;
use freeboost::{Scalar, Tensor};
use indexmap::IndexMap;

/// Raw DEFLATE streams with known decodings: (name, stream, expected output).
/// Produced by zlib with raw windows; the error cases are hand-made.
pub const DEFLATE_VECTORS: &[(&str, &str, &[u8])] = &[
    ("empty fixed block", "0300", b""),
    ("empty stored block", "010000ffff", b""),
    ("fixed literals", "f348cdc9c9d75108cf2fca49510400", b"Hello, World!"),
    ("stored block", "010d00f2ff73746f72656420626c6f636b0a", b"stored block\n"),
];

/// (name, stream) pairs that must be rejected.
pub const DEFLATE_INVALID: &[(&str, &str)] = &[
    ("reserved block type", "07"),
    ("stored length complement mismatch", "010500fafe6869"),
    ("truncated stored payload", "010500faff6869"),
    ("distance before start of output", "030200"),
    ("no final block", "00"),
];

pub fn hex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

/// `a` repeated 300 times: one literal then back-references at distance 1.
pub fn run_vector() -> (Vec<u8>, Vec<u8>) {
    (hex("4b4c1c05c40200"), vec![b'a'; 300])
}

pub fn deflate_raw(data: &[u8], level: u8) -> Vec<u8> {
    miniz_oxide::deflate::compress_to_vec(data, level)
}

/// NPZ archive whose members are DEFLATE-compressed.
pub fn npz_deflated(arrays: &IndexMap<String, NpyArray>) -> Vec<u8> {
    let mut w = ZipWriter::new();
    for (name, a) in arrays {
        let raw = a.to_bytes();
        w.add_raw(&format!("{name}.npy"), 8, &deflate_raw(&raw, 6), crc32(&raw), raw.len());
    }
    w.finish()
}

/// Small image/label arrays in the dataset layout.
pub fn small_arrays(seed: u64) -> IndexMap<String, NpyArray> {
    let mut rng = Pcg32::seeded(seed);
    let mut out = IndexMap::new();
    for (split, n) in [("train", 6usize), ("val", 2), ("test", 4)] {
        let img: Vec<u8> = (0..n * 8 * 8).map(|_| rng.below(256) as u8).collect();
        let lab: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        out.insert(format!("{split}_images"), NpyArray::new(vec![n, 8, 8], NpyData::U8(img)));
        out.insert(format!("{split}_labels"), NpyArray::new(vec![n, 1], NpyData::U8(lab)));
    }
    out
}

/// O(n^2) pairwise AUC; ties count one half.
pub fn auc_pairwise(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Binary: class-1 column. Multiclass: mean one-vs-rest over defined classes.
pub fn auc_oracle(probs: &[f64], k: usize, labels: &[usize]) -> Option<f64> {
    let col = |c: usize| -> Vec<f64> { probs.chunks(k).map(|r| r[c]).collect() };
    let pos = |c: usize| -> Vec<bool> { labels.iter().map(|&l| l == c).collect() };
    if k == 2 {
        return auc_pairwise(&col(1), &pos(1));
    }
    let defined: Vec<f64> = (0..k).filter_map(|c| auc_pairwise(&col(c), &pos(c))).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn random_tensor<S: Scalar>(rng: &mut Pcg32, shape: &[usize], std: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.normal() * std))
}

/// 2D backbone over `[1, 8, 8]` images with 4x4 patches: 4 patches plus CLS.
pub fn tiny_backbone(d_model: usize, n_classes: usize) -> BackboneConfig {
    BackboneConfig {
        kind: BackboneKind::Vit2d,
        d_model,
        depth: 1,
        depth_temporal: 0,
        n_heads: 2,
        ffn_ratio: 2,
        patch: vec![4, 4],
        input: vec![1, 8, 8],
        n_classes,
        pooling: Pooling::ClsToken,
    }
}

pub fn tiny_llm(d_llm: usize, seed: u64) -> LlmBlockConfig {
    LlmBlockConfig {
        d_llm,
        n_heads: 4,
        d_ffn: 2 * d_llm,
        eps: 1e-5,
        depth: 1,
        source: LlmSource::Synthetic { seed },
        frozen: true,
    }
}

pub fn tiny_spec(variant: BoosterVariant) -> ModelSpec {
    ModelSpec::new(tiny_backbone(16, 3), variant, tiny_llm(24, 5))
}

/// Parameters redrawn at unit-ish scale so gradients are far from zero;
/// norm gains stay near one.
pub fn lively_params<S: Scalar>(spec: &ModelSpec, seed: u64) -> ParamStore<S> {
    let mut store = init_params::<S>(spec, seed).unwrap();
    let mut rng = Pcg32::for_label(seed, "lively");
    for (name, p) in store.iter_mut() {
        let gain = name.contains("norm") && name.ends_with("weight");
        let std = if gain { 0.1 } else { 0.4 };
        for v in p.tensor.data_mut() {
            *v = S::from_f64(if gain { 1.0 } else { 0.0 } + std * rng.normal());
        }
    }
    store
}
