//! Browser bindings: parameter accounting, in-page training on synthetic
//! blobs, and Grad-CAM overlays.

use freeboost::backbone::BackboneConfig;
use freeboost::booster::{init_params, spec_accounting, BoosterVariant, ModelSpec};
use freeboost::data::dataset::{gen_synthetic, DatasetBundle, SyntheticKind, SYNTH_SIZE};
use freeboost::gradcam::{grad_cam, overlay_ppm};
use freeboost::llm_block::LlmBlockConfig;
use freeboost::train::{evaluate, Trainer, TrainConfig};
use wasm_bindgen::prelude::*;

const N_CLASSES: usize = 4;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn spec_for(variant: &str, d_model: usize, d_llm: usize) -> Result<ModelSpec, JsError> {
    let variant: BoosterVariant = variant.parse().map_err(js_err)?;
    let mut backbone = BackboneConfig::preset("vit-tiny", N_CLASSES).expect("preset exists");
    backbone.d_model = d_model;
    let llm = LlmBlockConfig {
        d_llm,
        ..LlmBlockConfig::desk(0)
    };
    let spec = ModelSpec::new(backbone, variant, llm);
    spec.validate().map_err(js_err)?;
    Ok(spec)
}

/// Per-module total/trainable/frozen counts for a vit-tiny classifier, as JSON.
#[wasm_bindgen]
pub fn accounting(variant: &str, d_model: usize, d_llm: usize) -> Result<String, JsError> {
    let acc = spec_accounting(&spec_for(variant, d_model, d_llm)?).map_err(js_err)?;
    serde_json::to_string(&acc).map_err(js_err)
}

/// Synthetic 2D dataset plus a model being trained one epoch at a time.
#[wasm_bindgen]
pub struct DemoSession {
    data: DatasetBundle,
    trainer: Trainer<f32>,
}

#[wasm_bindgen]
impl DemoSession {
    #[wasm_bindgen(constructor)]
    pub fn new(variant: &str, n_per_class: usize, seed: u64) -> Result<DemoSession, JsError> {
        let spec = spec_for(variant, 64, 64)?;
        let data = gen_synthetic(SyntheticKind::Blobs2d, n_per_class, N_CLASSES, seed).map_err(js_err)?;
        let store = init_params::<f32>(&spec, seed).map_err(js_err)?;
        let cfg = TrainConfig {
            batch_size: 32,
            epochs: 1000,
            lr: Some(1e-4),
            grad_clip: Some(1.0),
            seed,
            ..Default::default()
        };
        let trainer = Trainer::new(spec, cfg, store).map_err(js_err)?;
        Ok(DemoSession { data, trainer })
    }

    /// Runs one epoch; returns the epoch record as JSON.
    pub fn train_epoch(&mut self) -> Result<String, JsError> {
        let rec = self.trainer.run_epoch(&self.data).map_err(js_err)?;
        serde_json::to_string(&rec).map_err(js_err)
    }

    /// Test accuracy and AUC of the current parameters, as JSON.
    pub fn test_metrics(&self) -> Result<String, JsError> {
        let r = evaluate(&self.trainer.spec, &self.trainer.store, &self.data.test, 64).map_err(js_err)?;
        serde_json::to_string(&serde_json::json!({"acc": r.acc, "auc": r.auc})).map_err(js_err)
    }

    pub fn n_test(&self) -> usize {
        self.data.test.len()
    }

    pub fn label(&self, index: usize) -> usize {
        self.data.test.labels[index.min(self.data.test.len() - 1)]
    }

    /// Test image `index` as RGBA, `side x side` with `side = 28 * upscale`.
    pub fn sample_rgba(&self, index: usize, upscale: usize) -> Vec<u8> {
        let img = self.data.test.sample(index.min(self.data.test.len() - 1));
        let up = upscale.max(1);
        let side = SYNTH_SIZE * up;
        let mut out = Vec::with_capacity(side * side * 4);
        for y in 0..side {
            for x in 0..side {
                let v = (img[(y / up) * SYNTH_SIZE + x / up].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.extend_from_slice(&[v, v, v, 255]);
            }
        }
        out
    }

    /// Grad-CAM overlay for test image `index` as RGBA, `side x side` with
    /// `side = 7 * upscale`. The first byte after the pixels is the class
    /// the map explains.
    pub fn gradcam_rgba(&self, index: usize, upscale: usize) -> Result<Vec<u8>, JsError> {
        let i = index.min(self.data.test.len() - 1);
        let image = self.data.test.batch(&[i]).0;
        let h = grad_cam(&self.trainer.spec, &self.trainer.store, &image, None, None).map_err(js_err)?;
        let ppm = overlay_ppm(&h, &image, upscale).map_err(js_err)?;
        let mut out = Vec::with_capacity(ppm.data.len() / 3 * 4 + 1);
        for px in ppm.data.chunks_exact(3) {
            out.extend_from_slice(&[px[0], px[1], px[2], 255]);
        }
        out.push(h.target_class as u8);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_runs_natively() {
        let mut s = DemoSession::new("r-llm", 10, 3).unwrap();
        assert!(s.train_epoch().unwrap().contains("\"epoch\":1"));
        assert_eq!(s.sample_rgba(0, 2).len(), 56 * 56 * 4);
        assert_eq!(s.gradcam_rgba(0, 4).unwrap().len(), 28 * 28 * 4 + 1);
        let acc: serde_json::Value = serde_json::from_str(&accounting("mlp-control", 64, 64).unwrap()).unwrap();
        assert!(acc["trainable"].as_u64().unwrap() > 0);
    }
}
