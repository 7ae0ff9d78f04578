//! AdamW, the training loop, evaluation and the metrics report.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::booster::{full_forward, param_accounting, Counts, ModelSpec};
use crate::data::checkpoint::save_checkpoint;
use crate::data::dataset::{DatasetBundle, Split};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax_rows, auc, softmax_rows};
use crate::nn::{BindMode, ParamStore};
use crate::rng::Pcg32;
use crate::tensor::{Precision, Scalar, Tensor};

pub const DEFAULT_LR_2D: f64 = 5e-4;
pub const DEFAULT_LR_3D: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// `None` resolves to the 2D or 3D default.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Also write `ckpt_epoch_NNN.rlbk` every this many epochs (0 = never).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub precision: Precision,
}

fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    100
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            lr: None,
            weight_decay: default_weight_decay(),
            betas: default_betas(),
            eps: default_eps(),
            seed: 0,
            schedule: Schedule::Constant,
            warmup_epochs: 0,
            grad_clip: None,
            checkpoint_every: 0,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    /// Fills `lr` from the input dimensionality when unset.
    pub fn resolve(&mut self, spatial_dims: usize) {
        if self.lr.is_none() {
            self.lr = Some(if spatial_dims >= 3 { DEFAULT_LR_3D } else { DEFAULT_LR_2D });
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(DEFAULT_LR_2D)
    }

    pub fn validate(&self) -> Result<()> {
        let path = |f: &str| format!("train.{f}");
        if self.batch_size == 0 {
            return Err(Error::config(path("batch_size"), "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config(path("epochs"), "must be at least 1"));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(path("lr"), format!("must be positive, got {lr}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(path("weight_decay"), "must be non-negative"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config(path("betas"), "each beta must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config(path("eps"), "must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config(path("warmup_epochs"), "exceeds epochs"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config(path("grad_clip"), "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWHyper {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        AdamWHyper {
            lr: cfg.lr(),
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Norm weights and biases are not decayed.
pub fn decays(name: &str) -> bool {
    !name.split('.').any(|seg| seg.contains("norm"))
}

/// AdamW with decoupled weight decay. Moment buffers are created lazily.
#[derive(Debug, Clone, Default)]
pub struct AdamW<S> {
    t: u64,
    m: HashMap<String, Vec<S>>,
    v: HashMap<String, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new() -> Self {
        AdamW {
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Number of steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Trainable parameters without a gradient are left alone;
    /// a gradient for a frozen parameter is a contract violation and nothing
    /// is updated.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &HashMap<String, Tensor<S>>, hp: &AdamWHyper) -> Result<()> {
        for (name, g) in grads {
            let p = store.get(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if !p.trainable {
                return Err(Error::Contract(format!("gradient supplied for frozen parameter `{name}`")));
            }
            if p.tensor.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.tensor.shape()
                )));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let [b1, b2] = hp.betas;
        let bc1 = S::from_f64(1.0 - b1.powi(t));
        let bc2 = S::from_f64(1.0 - b2.powi(t));
        let (b1s, b2s) = (S::from_f64(b1), S::from_f64(b2));
        let (one, lr, eps) = (S::one(), S::from_f64(hp.lr), S::from_f64(hp.eps));
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let decay = if decays(&name) { S::from_f64(hp.lr * hp.weight_decay) } else { S::zero() };
            let n = g.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let theta = store.tensor_mut(&name)?.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1s * m[i] + (one - b1s) * gi;
                v[i] = b2s * v[i] + (one - b2s) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] = theta[i] - lr * (mh / (vh.sqrt() + eps)) - decay * theta[i];
            }
        }
        Ok(())
    }
}

/// Learning rate for 0-based optimizer step `step`.
pub fn lr_at(cfg: &TrainConfig, step: usize, steps_per_epoch: usize) -> f64 {
    let base = cfg.lr();
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    match cfg.schedule {
        Schedule::Constant => base,
        Schedule::Cosine => {
            let total = (cfg.epochs * steps_per_epoch).saturating_sub(warmup).max(1);
            let frac = ((step - warmup) as f64 / total as f64).min(1.0);
            base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub acc: f64,
    pub auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
    pub loss: f64,
}

/// Logits `[N, K]` (as f64) of every sample in `split`, in order.
pub fn predict<S: Scalar>(spec: &ModelSpec, store: &ParamStore<S>, split: &Split, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.len() * spec.backbone.n_classes);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, _) = split.batch(chunk);
        let mut g = Graph::new();
        let p = store.bind(&mut g, BindMode::Inference);
        let x = g.constant(images.cast::<S>());
        let logits = full_forward(&mut g, spec, &p, x, None, None)?;
        out.extend(g.value(logits).data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

pub fn evaluate<S: Scalar>(spec: &ModelSpec, store: &ParamStore<S>, split: &Split, batch_size: usize) -> Result<EvalResult> {
    let k = spec.backbone.n_classes;
    let logits = predict(spec, store, split, batch_size)?;
    let probs = softmax_rows(&logits, k);
    let acc = accuracy(&argmax_rows(&logits, k), &split.labels)?;
    let a = auc(&probs, k, &split.labels)?;
    let loss = probs
        .chunks_exact(k)
        .zip(&split.labels)
        .map(|(row, &l)| -row[l].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / split.len() as f64;
    Ok(EvalResult {
        acc,
        auc: a.overall,
        per_class_auc: a.per_class,
        loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub val_auc: Option<f64>,
}

/// Checks that the model's input and class count match the data.
pub fn check_compatible(spec: &ModelSpec, data: &DatasetBundle) -> Result<()> {
    if spec.backbone.input != data.sample_shape() {
        return Err(Error::shape(format!(
            "model input {:?} does not match data samples {:?}",
            spec.backbone.input,
            data.sample_shape()
        )));
    }
    if spec.backbone.n_classes != data.n_classes {
        return Err(Error::shape(format!(
            "model has {} classes, data has {}",
            spec.backbone.n_classes, data.n_classes
        )));
    }
    Ok(())
}

/// Epoch-at-a-time training state. Holds no clock, so it also runs where
/// wall time is unavailable.
pub struct Trainer<S: Scalar> {
    pub spec: ModelSpec,
    pub cfg: TrainConfig,
    pub store: ParamStore<S>,
    opt: AdamW<S>,
    rng: Pcg32,
    step: usize,
    frozen: Vec<(String, Tensor<S>)>,
    pub history: Vec<EpochRecord>,
    best: Option<((f64, f64), ParamStore<S>)>,
}

impl<S: Scalar> Trainer<S> {
    /// `cfg.lr` must already be resolved (see [`TrainConfig::resolve`]).
    pub fn new(spec: ModelSpec, cfg: TrainConfig, store: ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let frozen = store
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.to_string(), p.tensor.clone()))
            .collect();
        let rng = Pcg32::for_label(cfg.seed, "shuffle");
        Ok(Trainer {
            spec,
            cfg,
            store,
            opt: AdamW::new(),
            rng,
            step: 0,
            frozen,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    pub fn done(&self) -> bool {
        self.epoch() >= self.cfg.epochs
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn train_step(&mut self, images: &Tensor<f32>, labels: &[usize], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, BindMode::Trainable);
        let x = g.constant(images.cast::<S>());
        let logits = full_forward(&mut g, &self.spec, &p, x, None, None)?;
        let loss = g.cross_entropy(logits, labels)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        let mut grads = g.backward_leaves(loss)?;
        let mut grads = p.collect_grads(&mut grads);
        drop(g);
        if let Some(max_norm) = self.cfg.grad_clip {
            clip_global_norm(&mut grads, &self.store, max_norm);
        }
        let hp = AdamWHyper {
            lr,
            ..AdamWHyper::from_config(&self.cfg)
        };
        self.opt.step(&mut self.store, &grads, &hp)?;
        Ok(loss_value)
    }

    /// Bytewise check that no frozen tensor moved.
    pub fn check_frozen(&self) -> Result<()> {
        for (name, t) in &self.frozen {
            if !self.store.tensor(name)?.bitwise_eq(t) {
                return Err(Error::Contract(format!("frozen parameter `{name}` changed during training")));
            }
        }
        Ok(())
    }

    /// Trains one shuffled epoch, then evaluates on the validation split.
    pub fn run_epoch(&mut self, data: &DatasetBundle) -> Result<EpochRecord> {
        let n = data.train.len();
        let bs = self.cfg.batch_size;
        let steps = n.div_ceil(bs);
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let (images, labels) = data.train.batch(chunk);
            let lr = lr_at(&self.cfg, self.step, steps);
            total += self.train_step(&images, &labels, lr)? * chunk.len() as f64;
            self.step += 1;
        }
        self.check_frozen()?;
        let (val_acc, val_auc) = if data.val.is_empty() {
            (None, None)
        } else {
            match evaluate(&self.spec, &self.store, &data.val, bs) {
                Ok(r) => (Some(r.acc), Some(r.auc)),
                Err(Error::InvalidInput(_)) => {
                    let logits = predict(&self.spec, &self.store, &data.val, bs)?;
                    let k = self.spec.backbone.n_classes;
                    (Some(accuracy(&argmax_rows(&logits, k), &data.val.labels)?), None)
                }
                Err(e) => return Err(e),
            }
        };
        let rec = EpochRecord {
            epoch: self.epoch() + 1,
            train_loss: total / n as f64,
            val_acc,
            val_auc,
        };
        // best validation AUC, then validation accuracy, earliest epoch on
        // full ties; without a usable validation AUC the latest epoch wins
        let score = (val_auc.unwrap_or(f64::INFINITY), val_acc.unwrap_or(0.0));
        if self.best.as_ref().is_none_or(|(b, _)| score > *b || score.0 == f64::INFINITY) {
            self.best = Some((score, self.store.clone()));
        }
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Parameters from the epoch with the best validation AUC (the current
    /// parameters before any epoch has run).
    pub fn best_store(&self) -> &ParamStore<S> {
        self.best.as_ref().map(|(_, s)| s).unwrap_or(&self.store)
    }
}

fn clip_global_norm<S: Scalar>(grads: &mut HashMap<String, Tensor<S>>, store: &ParamStore<S>, max_norm: f64) {
    // sum in store order so the norm does not depend on hash order
    let mut sq = 0.0f64;
    for name in store.names() {
        if let Some(g) = grads.get(name) {
            for &v in g.data() {
                sq += v.as_f64() * v.as_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let c = S::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * c);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub acc: f64,
    pub auc: f64,
    pub per_class_auc: Vec<Option<f64>>,
}

impl From<EvalResult> for TestMetrics {
    fn from(r: EvalResult) -> Self {
        TestMetrics {
            acc: r.acc,
            auc: r.auc,
            per_class_auc: r.per_class_auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: serde_json::Value,
    pub param_counts: Counts,
    pub epochs: Vec<EpochRecord>,
    pub test: TestMetrics,
    pub wall_clock_s: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// The report as JSON with the wall-clock field removed, for
    /// reproducibility comparisons.
    pub fn without_wall_clock(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().unwrap().remove("wall_clock_s");
        v
    }
}

pub struct TrainOutcome<S: Scalar> {
    pub report: MetricsReport,
    pub best: ParamStore<S>,
    pub last: ParamStore<S>,
}

pub const METRICS_FILE: &str = "metrics.json";
pub const CKPT_BEST: &str = "ckpt_best.rlbk";
pub const CKPT_LAST: &str = "ckpt_last.rlbk";

/// Full run: initial parameters `store`, `cfg.epochs` epochs, test metrics
/// from the best-validation parameters. With `run_dir`, writes
/// `metrics.json`, `ckpt_best.rlbk`, `ckpt_last.rlbk` (and periodic
/// checkpoints when configured). `on_epoch` observes each record.
pub fn run_training<S: Scalar>(
    spec: &ModelSpec,
    data: &DatasetBundle,
    cfg: &TrainConfig,
    store: ParamStore<S>,
    config: serde_json::Value,
    run_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<S>> {
    let start = std::time::Instant::now();
    check_compatible(spec, data)?;
    let mut cfg = cfg.clone();
    cfg.resolve(data.spatial_dims());
    let counts = param_accounting(&store).counts();
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut trainer = Trainer::new(spec.clone(), cfg.clone(), store)?;
    while !trainer.done() {
        let rec = trainer.run_epoch(data)?;
        on_epoch(&rec);
        if let Some(dir) = run_dir {
            if cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&trainer.store, dir.join(format!("ckpt_epoch_{:03}.rlbk", rec.epoch)))?;
            }
        }
    }
    let best = trainer.best_store().clone();
    let test = evaluate(spec, &best, &data.test, cfg.batch_size)?;
    let report = MetricsReport {
        config,
        param_counts: counts,
        epochs: trainer.history.clone(),
        test: test.into(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = run_dir {
        save_checkpoint(&best, dir.join(CKPT_BEST))?;
        save_checkpoint(&trainer.store, dir.join(CKPT_LAST))?;
        std::fs::write(dir.join(METRICS_FILE), report.to_json())?;
    }
    Ok(TrainOutcome {
        report,
        best,
        last: trainer.store,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, trainable: bool, name: &str) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::from_f64(&[1], &[v]).unwrap(), trainable).unwrap();
        s
    }

    fn grad(name: &str, g: f64) -> HashMap<String, Tensor<f64>> {
        HashMap::from([(name.to_string(), Tensor::from_f64(&[1], &[g]).unwrap())])
    }

    fn hp(lr: f64, wd: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn adamw_closed_forms() {
        let mut s = one_param(0.0, true, "w");
        let mut opt = AdamW::new();
        opt.step(&mut s, &grad("w", 1.0), &hp(0.01, 0.0)).unwrap();
        let got = s.tensor("w").unwrap().data()[0];
        let m_hat = (1.0f64 - 0.9) / (1.0 - 0.9);
        let v_hat = (1.0f64 - 0.999) / (1.0 - 0.999);
        assert_eq!(got, 0.0 - 0.01 * (m_hat / (v_hat.sqrt() + 1e-8)));
        assert!((got + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);

        let mut s = one_param(0.7, true, "w");
        AdamW::new().step(&mut s, &grad("w", 0.0), &hp(0.01, 0.0)).unwrap();
        assert_eq!(s.tensor("w").unwrap().data()[0], 0.7);

        let mut s = one_param(0.7, true, "w");
        AdamW::new().step(&mut s, &grad("w", 0.0), &hp(0.01, 0.5)).unwrap();
        assert_eq!(s.tensor("w").unwrap().data()[0], 0.7 - 0.01 * 0.5 * 0.7);

        // norm parameters are not decayed
        let mut s = one_param(0.7, true, "blocks.0.norm1.weight");
        AdamW::new()
            .step(&mut s, &grad("blocks.0.norm1.weight", 0.0), &hp(0.01, 0.5))
            .unwrap();
        assert_eq!(s.tensor("blocks.0.norm1.weight").unwrap().data()[0], 0.7);
    }

    #[test]
    fn frozen_gradient_is_contract_error() {
        let mut s = one_param(1.0, false, "w");
        let e = AdamW::new().step(&mut s, &grad("w", 1.0), &hp(0.01, 0.0)).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
        assert_eq!(s.tensor("w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn schedules() {
        let mut c = TrainConfig {
            lr: Some(1.0),
            epochs: 2,
            ..Default::default()
        };
        assert_eq!(lr_at(&c, 3, 5), 1.0);
        c.schedule = Schedule::Cosine;
        assert_eq!(lr_at(&c, 0, 5), 1.0);
        assert!((lr_at(&c, 5, 5) - 0.5).abs() < 1e-12);
        c.warmup_epochs = 1;
        assert_eq!(lr_at(&c, 0, 4), 0.25);
    }

    #[test]
    fn config_defaults() {
        let c: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 100);
        assert_eq!(c.weight_decay, 0.05);
        let mut c2 = c.clone();
        c2.resolve(2);
        assert_eq!(c2.lr, Some(5e-4));
        let mut c3 = c;
        c3.resolve(3);
        assert_eq!(c3.lr, Some(1e-5));
        assert!(serde_json::from_str::<TrainConfig>("{\"lrr\": 1}").is_err());
    }
}
