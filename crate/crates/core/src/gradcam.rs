//! Grad-CAM over patch tokens of 2D backbones.
//!
//! A layer name `backbone.blocks.{i}` refers to the normalized input of
//! block `i` (its first layer norm), the last point at which every patch
//! token still feeds the class token through attention.

use std::path::Path;

use crate::autograd::Graph;
use crate::backbone::{BackboneKind, Taps};
use crate::booster::{full_forward, ModelSpec};
use crate::data::netpbm::Netpbm;
use crate::error::{Error, Result};
use crate::nn::{BindMode, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, non-negative; max-normalized to 1 unless all zero.
    pub grid: Vec<f64>,
    pub target_class: usize,
    pub layer: String,
}

impl Heatmap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.grid[r * self.cols + c]
    }

    /// Row-major index of the largest cell (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.grid.iter().enumerate() {
            if v > self.grid[best] {
                best = i;
            }
        }
        best
    }

    /// Cells quantized to 0..=255.
    pub fn quantized(&self) -> Vec<u8> {
        self.grid.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}

pub fn default_layer(spec: &ModelSpec) -> String {
    format!("backbone.blocks.{}", spec.backbone.depth - 1)
}

/// Heatmap for one image `[C, H, W]` (or `[1, C, H, W]`). `target` defaults
/// to the predicted class, `layer` to the last backbone block.
pub fn grad_cam<S: Scalar>(
    spec: &ModelSpec,
    store: &ParamStore<S>,
    image: &Tensor<f32>,
    target: Option<usize>,
    layer: Option<&str>,
) -> Result<Heatmap> {
    if spec.backbone.kind != BackboneKind::Vit2d {
        return Err(Error::invalid("Grad-CAM supports 2D backbones only"));
    }
    let layer = layer.map(str::to_string).unwrap_or_else(|| default_layer(spec));
    let mut shape = image.shape().to_vec();
    if shape.len() == 3 {
        shape.insert(0, 1);
    }
    if shape.len() != 4 || shape[0] != 1 {
        return Err(Error::shape(format!("Grad-CAM takes one image [C, H, W], got {:?}", image.shape())));
    }
    let grid = spec.backbone.grid()?;
    let k = spec.backbone.n_classes;

    let mut g = Graph::<S>::new();
    let p = store.bind(&mut g, BindMode::Inference);
    // the input requires grad so every activation is differentiable
    let x = g.leaf(image.clone().reshape(&shape)?.cast::<S>(), true);
    let mut taps = Taps::new();
    let logits = full_forward(&mut g, spec, &p, x, None, Some(&mut taps))?;
    let act = *taps.get(&layer).ok_or_else(|| {
        Error::invalid(format!(
            "unknown layer `{layer}`; expected one of {}",
            taps.keys().cloned().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let target = match target {
        Some(t) if t >= k => return Err(Error::Index(format!("target class {t} out of range for {k} classes"))),
        Some(t) => t,
        None => {
            let row = g.value(logits).data();
            (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b })
        }
    };
    let picked = g.narrow(logits, 1, target, 1)?;
    let score = g.sum(picked);
    let grads = g.backward(score)?;

    let a = g.value(act);
    let (t1, d) = (a.shape()[1], a.shape()[2]);
    let n_tok = t1 - 1;
    let a = &a.data()[d..];
    let gr = grads.get(act).map(|t| t.into_data()).unwrap_or_else(|| vec![S::zero(); t1 * d]);
    let gr = &gr[d..];
    let mut w = vec![0.0f64; d];
    for t in 0..n_tok {
        for c in 0..d {
            w[c] += gr[t * d + c].as_f64();
        }
    }
    w.iter_mut().for_each(|v| *v /= n_tok as f64);
    let mut cam: Vec<f64> = (0..n_tok)
        .map(|t| (0..d).map(|c| w[c] * a[t * d + c].as_f64()).sum::<f64>().max(0.0))
        .collect();
    let max = cam.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        cam.iter_mut().for_each(|v| *v /= max);
    }
    Ok(Heatmap {
        rows: grid[0],
        cols: grid[1],
        grid: cam,
        target_class: target,
        layer,
    })
}

pub fn heatmap_pgm(h: &Heatmap) -> Netpbm {
    Netpbm {
        width: h.cols,
        height: h.rows,
        channels: 1,
        maxval: 255,
        data: h.quantized(),
    }
}

/// Nearest-upscaled heatmap as a red ramp blended at alpha 0.5 over the
/// grayscale image `[C, H, W]` (channels averaged), resampled by nearest
/// neighbour to `rows*upscale x cols*upscale`.
pub fn overlay_ppm(h: &Heatmap, image: &Tensor<f32>, upscale: usize) -> Result<Netpbm> {
    let s = image.shape();
    let s = match s.len() {
        3 => s,
        4 if s[0] == 1 => &s[1..],
        _ => return Err(Error::shape(format!("overlay expects one image [C, H, W], got {s:?}"))),
    };
    let (c, ih, iw) = (s[0], s[1], s[2]);
    let upscale = upscale.max(1);
    let (oh, ow) = (h.rows * upscale, h.cols * upscale);
    let px = image.data();
    let mut data = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = (y * ih / oh, x * iw / ow);
            let gray = (0..c).map(|ch| px[(ch * ih + sy) * iw + sx] as f64).sum::<f64>() / c as f64;
            let heat = h.at(y / upscale, x / upscale).clamp(0.0, 1.0);
            let gray = gray.clamp(0.0, 1.0);
            let q = |v: f64| (v * 255.0).round() as u8;
            data.extend_from_slice(&[q(0.5 * gray + 0.5 * heat), q(0.5 * gray), q(0.5 * gray)]);
        }
    }
    Ok(Netpbm {
        width: ow,
        height: oh,
        channels: 3,
        maxval: 255,
        data,
    })
}

pub fn write_heatmap_pgm(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, heatmap_pgm(h).encode())?;
    Ok(())
}

pub fn write_overlay_ppm(h: &Heatmap, image: &Tensor<f32>, path: impl AsRef<Path>, upscale: usize) -> Result<()> {
    std::fs::write(path, overlay_ppm(h, image, upscale)?.encode())?;
    Ok(())
}
