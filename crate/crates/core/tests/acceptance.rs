//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! `FB_ACCEPT_ONLY=1,3,7` restricts the run to some criteria.
//! `FB_PNEUMONIA_NPZ=<path>` enables the optional real-data criterion;
//! `FB_PNEUMONIA_EPOCHS` (at most 100, default 100) bounds its length.
//! Failures are reported but only fail the process with
//! `FB_ACCEPT_STRICT=1`, so the rest of the workspace tests still run.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use freeboost::autograd::{grad_check, Graph, Var};
use freeboost::backbone::{backbone_forward, classify, pool, BackboneConfig, CLASSIFIER};
use freeboost::booster::{
    booster_forward, init_params, param_accounting, BoosterVariant, ModelSpec, DECODER, ENCODER,
};
use freeboost::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use freeboost::data::crc32::crc32;
use freeboost::data::dataset::{gen_synthetic, load_npz, npz_bytes, parse_npz, SyntheticKind};
use freeboost::data::inflate::inflate;
use freeboost::data::netpbm::Netpbm;
use freeboost::data::zip::ZipArchive;
use freeboost::gradcam::{grad_cam, heatmap_pgm, overlay_ppm};
use freeboost::llm_block::{llm_block_forward, llm_param_count, load_or_synthesize, zero_output_projections, LlmBlockConfig};
use freeboost::metrics::auc;
use freeboost::nn::{linear, BindMode, ParamStore};
use freeboost::rng::Pcg32;
use freeboost::train::{evaluate, run_training, TrainConfig, Trainer};
use freeboost::{Error, Tensor};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>, what: &str) -> std::result::Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

// ---------------------------------------------------------------- 1

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;

struct GradSuite {
    checks: usize,
    worst: f64,
    worst_name: String,
    failures: Vec<String>,
}

impl GradSuite {
    fn new() -> Self {
        GradSuite {
            checks: 0,
            worst: 0.0,
            worst_name: String::new(),
            failures: Vec::new(),
        }
    }

    fn run(&mut self, name: &str, x0: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> freeboost::Result<Var>) {
        self.checks += 1;
        match grad_check(f, x0, H, TOL) {
            Ok(r) => {
                if r.max_rel_err > self.worst {
                    self.worst = r.max_rel_err;
                    self.worst_name = name.to_string();
                }
                if !r.passed {
                    self.failures.push(format!("{name} ({:.2e})", r.max_rel_err));
                }
            }
            Err(e) => self.failures.push(format!("{name}: {e}")),
        }
    }
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> freeboost::Result<Var> {
    let mut rng = Pcg32::seeded(seed);
    let w = g.constant(random_tensor(&mut rng, g.shape(y), 1.0));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn elementary_ops(s: &mut GradSuite) {
    let mut rng = Pcg32::seeded(11);
    let mut r = |shape: &[usize]| random_tensor::<f64>(&mut rng, shape, 1.0);
    let (c23, c3, c45, c245, c34) = (r(&[2, 3]), r(&[3]), r(&[4, 5]), r(&[2, 4, 5]), r(&[3, 4]));
    let x23 = r(&[2, 3]);
    let x3 = r(&[3]);
    let x234 = r(&[2, 3, 4]);
    let x24 = r(&[2, 4]);

    type BinOp = fn(&mut Graph<f64>, Var, Var) -> freeboost::Result<Var>;
    let binaries: [(&str, BinOp); 3] = [("add", Graph::add), ("sub", Graph::sub), ("mul", Graph::mul)];
    for (name, op) in binaries {
        let c = c23.clone();
        s.run(&format!("{name}(x, c)"), &x23, move |g, x| {
            let c = g.constant(c.clone());
            let y = op(g, x, c)?;
            project(g, y, 1)
        });
        let c = c23.clone();
        s.run(&format!("{name}(c, x) broadcast"), &x3, move |g, x| {
            let c = g.constant(c.clone());
            let y = op(g, c, x)?;
            project(g, y, 2)
        });
        let c = c3.clone();
        s.run(&format!("{name}(x, c) broadcast"), &x23, move |g, x| {
            let c = g.constant(c.clone());
            let y = op(g, x, c)?;
            project(g, y, 3)
        });
        s.run(&format!("{name}(x, x)"), &x23, move |g, x| {
            let y = op(g, x, x)?;
            project(g, y, 4)
        });
    }
    s.run("scale", &x23, |g, x| {
        let y = g.scale(x, -1.7);
        project(g, y, 5)
    });
    let c = c45.clone();
    s.run("matmul(x, W)", &x234, move |g, x| {
        let w = g.constant(c.clone());
        let y = g.matmul(x, w)?;
        project(g, y, 6)
    });
    let c = c34.clone();
    s.run("matmul(A, x)", &r(&[4, 2]), move |g, x| {
        let a = g.constant(c.clone());
        let y = g.matmul(a, x)?;
        project(g, y, 7)
    });
    let c = c245.clone();
    s.run("batched matmul", &x234, move |g, x| {
        let w = g.constant(c.clone());
        let y = g.matmul(x, w)?;
        project(g, y, 8)
    });
    let c = c34.clone();
    s.run("batched matmul rhs", &r(&[2, 4, 5]), move |g, x| {
        let a = g.constant(c.clone());
        let y = g.matmul(a, x)?;
        project(g, y, 9)
    });
    s.run("gelu", &x234, |g, x| {
        let y = g.gelu(x);
        project(g, y, 10)
    });
    s.run("silu", &x234, |g, x| {
        let y = g.silu(x);
        project(g, y, 11)
    });
    s.run("softmax", &x234, |g, x| {
        let y = g.softmax_lastdim(x, None)?;
        project(g, y, 12)
    });
    let mask = Tensor::from_f64(&[1, 1, 4], &[0.0, f64::NEG_INFINITY, 0.0, 0.0]).unwrap();
    s.run("softmax masked", &x234, move |g, x| {
        let y = g.softmax_lastdim(x, Some(&mask))?;
        project(g, y, 13)
    });
    let (w4, b4) = (r(&[4]), r(&[4]));
    {
        let (w, b) = (w4.clone(), b4.clone());
        s.run("layernorm wrt x", &x234, move |g, x| {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.layernorm(x, w, b, 1e-5)?;
            project(g, y, 14)
        });
        let (xx, b) = (x234.clone(), b4.clone());
        s.run("layernorm wrt gain", &w4, move |g, w| {
            let (x, b) = (g.constant(xx.clone()), g.constant(b.clone()));
            let y = g.layernorm(x, w, b, 1e-5)?;
            project(g, y, 14)
        });
        let (xx, w) = (x234.clone(), w4.clone());
        s.run("layernorm wrt bias", &b4, move |g, b| {
            let (x, w) = (g.constant(xx.clone()), g.constant(w.clone()));
            let y = g.layernorm(x, w, b, 1e-5)?;
            project(g, y, 14)
        });
        let w = w4.clone();
        s.run("rmsnorm wrt x", &x234, move |g, x| {
            let w = g.constant(w.clone());
            let y = g.rmsnorm(x, w, 1e-5)?;
            project(g, y, 15)
        });
        let xx = x234.clone();
        s.run("rmsnorm wrt gain", &w4, move |g, w| {
            let x = g.constant(xx.clone());
            let y = g.rmsnorm(x, w, 1e-5)?;
            project(g, y, 15)
        });
    }
    s.run("cross_entropy", &x24, |g, x| g.cross_entropy(x, &[3, 0]));
    let table: Vec<usize> = vec![5, 0, 0, 23, 7, 7, 7, 12, 1];
    s.run("gather", &x234, move |g, x| {
        let y = g.gather(x, std::sync::Arc::new(table.clone()), &[3, 3])?;
        project(g, y, 16)
    });
    s.run("reshape", &x234, |g, x| {
        let y = g.reshape(x, &[6, 4])?;
        project(g, y, 17)
    });
    s.run("permute", &x234, |g, x| {
        let y = g.permute(x, &[2, 0, 1])?;
        project(g, y, 18)
    });
    s.run("transpose_last2", &x234, |g, x| {
        let y = g.transpose_last2(x)?;
        project(g, y, 19)
    });
    s.run("narrow", &x234, |g, x| {
        let y = g.narrow(x, 1, 1, 2)?;
        project(g, y, 20)
    });
    s.run("broadcast_to", &x3, |g, x| {
        let y = g.broadcast_to(x, &[2, 4, 3])?;
        project(g, y, 21)
    });
    let c = c23.clone();
    s.run("concat", &x23, move |g, x| {
        let c = g.constant(c.clone());
        let y = g.concat(&[c, x, x], 0)?;
        project(g, y, 22)
    });
    s.run("sum", &x234, |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.sum(y))
    });
    s.run("mean", &x234, |g, x| {
        let y = g.mul(x, x)?;
        Ok(g.mean(y))
    });
}

/// Checks the gradient of `loss(params)` with respect to every tensor of
/// `store` whose name passes `select`, one tensor at a time.
fn check_params(
    s: &mut GradSuite,
    label: &str,
    store: &ParamStore<f64>,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&mut Graph<f64>, &freeboost::nn::Bound) -> freeboost::Result<Var> + Copy,
) {
    for (name, p) in store.iter() {
        if !select(name) {
            continue;
        }
        let name = name.to_string();
        s.run(&format!("{label} wrt {name}"), &p.tensor, |g, x| {
            let mut b = store.bind(g, BindMode::Inference);
            b.set(&name, x);
            loss(g, &b)
        });
    }
}

fn composites(s: &mut GradSuite) {
    let mut rng = Pcg32::seeded(12);

    // ViT block: a depth-1 backbone over two 8x8 images (T = 5 with CLS).
    let spec = tiny_spec(BoosterVariant::Baseline);
    let store = lively_params::<f64>(&spec, 1);
    let images = random_tensor::<f64>(&mut rng, &[2, 1, 8, 8], 1.0);
    let bb = spec.backbone.clone();
    {
        let (store, bb) = (&store, &bb);
        s.run("vit block wrt input", &images, |g, x| {
            let p = store.bind(g, BindMode::Inference);
            let y = backbone_forward(g, bb, &p, x, None)?;
            project(g, y, 30)
        });
    }
    let img = images.clone();
    check_params(s, "vit block", &store, |n| n.starts_with("backbone."), |g, p| {
        let x = g.constant(img.clone());
        let y = backbone_forward(g, &tiny_backbone(16, 3), p, x, None)?;
        project(g, y, 30)
    });

    // LLaMA-style block, with and without padding.
    let llm = tiny_llm(24, 3);
    let store = lively_params::<f64>(&ModelSpec::new(tiny_backbone(16, 3), BoosterVariant::RLlm, llm.clone()), 2);
    let tokens = random_tensor::<f64>(&mut rng, &[2, 5, 24], 1.0);
    let keep = [true, true, true, true, true, true, true, true, false, false];
    for (label, mask) in [("llm block", None), ("llm block padded", Some(&keep[..]))] {
        let (store, llm) = (&store, &llm);
        s.run(&format!("{label} wrt input"), &tokens, move |g, x| {
            let p = store.bind(g, BindMode::Inference);
            let y = llm_block_forward(g, llm, &p, x, mask)?;
            project(g, y, 31)
        });
    }
    let tk = tokens.clone();
    check_params(s, "llm block", &store, |n| n.starts_with("llm_block."), |g, p| {
        let x = g.constant(tk.clone());
        let y = llm_block_forward(g, &tiny_llm(24, 3), p, x, Some(&keep))?;
        project(g, y, 31)
    });

    // Every booster variant end to end: tokens -> booster -> pool -> classifier -> loss.
    let tokens = random_tensor::<f64>(&mut rng, &[2, 5, 16], 1.0);
    let labels = [2usize, 0];
    for v in BoosterVariant::ALL {
        let spec = tiny_spec(v);
        let store = lively_params::<f64>(&spec, 3);
        let e2e = |g: &mut Graph<f64>, p: &freeboost::nn::Bound, x: Var| -> freeboost::Result<Var> {
            let z = booster_forward(g, &spec, p, x, None)?;
            let pooled = pool(g, z)?;
            let logits = classify(g, p, pooled)?;
            g.cross_entropy(logits, &labels)
        };
        {
            let store = &store;
            s.run(&format!("{v} wrt tokens"), &tokens, |g, x| {
                let p = store.bind(g, BindMode::Inference);
                e2e(g, &p, x)
            });
        }
        let tk = tokens.clone();
        check_params(
            s,
            &v.to_string(),
            &store,
            |n| n.starts_with(ENCODER) || n.starts_with(DECODER) || n.starts_with(CLASSIFIER),
            |g, p| {
                let x = g.constant(tk.clone());
                e2e(g, p, x)
            },
        );
    }
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let mut s = GradSuite::new();
    elementary_ops(&mut s);
    composites(&mut s);
    let secs = start.elapsed().as_secs_f64();
    ensure!(s.failures.is_empty(), "{} of {} checks failed: {}", s.failures.len(), s.checks, s.failures.join("; "));
    ensure!(secs < 60.0, "took {secs:.1} s (bound 60 s)");
    Ok(format!(
        "{} gradient checks, worst rel err {:.1e} ({}), {secs:.1} s",
        s.checks, s.worst, s.worst_name
    ))
}

// ---------------------------------------------------------------- 2

fn llm_tensors(store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    store
        .iter()
        .filter(|(n, _)| n.starts_with("llm_block."))
        .map(|(n, p)| (n.to_string(), p.tensor.clone()))
        .collect()
}

fn ten_steps(spec: ModelSpec) -> std::result::Result<(Vec<(String, Tensor<f32>)>, ParamStore<f32>), String> {
    let data = ok(gen_synthetic(SyntheticKind::Blobs2d, 10, 4, 2), "data")?;
    let store = ok(init_params::<f32>(&spec, 4), "init")?;
    let before = llm_tensors(&store);
    let cfg = TrainConfig {
        batch_size: 8,
        lr: Some(1e-3),
        ..Default::default()
    };
    let mut t = ok(Trainer::new(spec, cfg, store), "trainer")?;
    for step in 0..10 {
        let idx: Vec<usize> = (0..8).map(|i| (step * 8 + i) % data.train.len()).collect();
        let (x, y) = data.train.batch(&idx);
        ok(t.train_step(&x, &y, 1e-3), "step")?;
    }
    Ok((before, t.store))
}

fn criterion_2() -> Check {
    let spec = ModelSpec::new(
        BackboneConfig::preset("vit-tiny", 4).unwrap(),
        BoosterVariant::RLlm,
        LlmBlockConfig::desk(0),
    );
    let (before, after) = ten_steps(spec.clone())?;
    for (name, t) in &before {
        ensure!(after.tensor(name).unwrap().bitwise_eq(t), "frozen `{name}` changed");
    }
    let moved = after
        .iter()
        .filter(|(n, _)| n.starts_with("booster."))
        .count();
    ensure!(moved > 0, "no adapter parameters present");

    let mut unfrozen = spec;
    unfrozen.booster.unfreeze_llm = true;
    let (before, after) = ten_steps(unfrozen)?;
    let changed = before
        .iter()
        .filter(|(n, t)| !after.tensor(n).unwrap().bitwise_eq(t))
        .count();
    ensure!(changed > 0, "unfreeze_llm=true left every llm_block tensor unchanged");
    Ok(format!(
        "{} llm_block tensors bitwise unchanged after 10 steps; {changed} changed when unfrozen",
        before.len()
    ))
}

// ---------------------------------------------------------------- 3

fn forward_f32(spec: &ModelSpec, store: &ParamStore<f32>, tokens: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::<f32>::new();
    let p = store.bind(&mut g, BindMode::Inference);
    let x = g.constant(tokens.clone());
    let y = booster_forward(&mut g, spec, &p, x, None).unwrap();
    g.value(y).clone()
}

fn criterion_3() -> Check {
    let mut rng = Pcg32::seeded(21);
    let tokens = random_tensor::<f32>(&mut rng, &[2, 5, 16], 1.0);

    let spec = tiny_spec(BoosterVariant::RLlm);
    let mut store = lively_params::<f32>(&spec, 5);
    ok(zero_output_projections(&mut store, &spec.llm), "zero projections")?;
    let got = forward_f32(&spec, &store, &tokens);
    let want = {
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, BindMode::Inference);
        let x = g.constant(tokens.clone());
        let r = linear(&mut g, &p, ENCODER, x).unwrap();
        let r2 = g.scale(r, 2.0);
        let z = linear(&mut g, &p, DECODER, r2).unwrap();
        g.value(z).clone()
    };
    let diff = got
        .data()
        .iter()
        .zip(want.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    ensure!(diff <= 1e-6, "r-llm with identity block differs from F_D(2 F_E(t)) by {diff:e}");

    let spec = tiny_spec(BoosterVariant::OutRLlm);
    let mut store = lively_params::<f32>(&spec, 6);
    for n in [format!("{DECODER}.weight"), format!("{DECODER}.bias")] {
        store.tensor_mut(&n).unwrap().data_mut().fill(0.0);
    }
    ensure!(forward_f32(&spec, &store, &tokens).bitwise_eq(&tokens), "out-r-llm with zero F_D is not the identity");

    let spec = tiny_spec(BoosterVariant::Baseline);
    let store = lively_params::<f32>(&spec, 7);
    ensure!(forward_f32(&spec, &store, &tokens).bitwise_eq(&tokens), "baseline is not bitwise identity");
    Ok(format!("r-llm max deviation {diff:e}; out-r-llm and baseline bitwise identity"))
}

// ---------------------------------------------------------------- 4

fn llm_out<S: freeboost::Scalar>(cfg: &LlmBlockConfig, store: &ParamStore<S>, x: &Tensor<S>, keep: Option<&[bool]>) -> Tensor<S> {
    let mut g = Graph::<S>::new();
    let p = store.bind(&mut g, BindMode::Inference);
    let xv = g.constant(x.clone());
    let y = llm_block_forward(&mut g, cfg, &p, xv, keep).unwrap();
    g.value(y).clone()
}

/// Applies a per-sequence token permutation to `[B, T, d]`.
fn permute_tokens<S: Copy>(x: &[S], perm: &[Vec<usize>], t: usize, d: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for (b, p) in perm.iter().enumerate() {
        for &src in p {
            out.extend_from_slice(&x[(b * t + src) * d..(b * t + src + 1) * d]);
        }
    }
    out
}

fn equivariance<S: freeboost::Scalar>(seed: u64, trials: usize) -> std::result::Result<usize, String> {
    let cfg = LlmBlockConfig::desk(seed);
    let store = ok(load_or_synthesize::<S>(&cfg, true), "block")?;
    let mut rng = Pcg32::for_label(seed, "equivariance");
    let (b, t, d) = (2, 9, cfg.d_llm);
    for trial in 0..trials {
        let x = random_tensor::<S>(&mut rng, &[b, t, d], 1.0);
        let keep: Vec<bool> = (0..b * t).map(|i| i % t < t - trial % 3).collect();
        let perm: Vec<Vec<usize>> = (0..b)
            .map(|_| {
                let mut p: Vec<usize> = (0..t).collect();
                rng.shuffle(&mut p);
                p
            })
            .collect();
        let keep_p = permute_tokens(&keep, &perm, t, 1);
        let y = llm_out(&cfg, &store, &x, Some(&keep));
        let xp = Tensor::new(vec![b, t, d], permute_tokens(x.data(), &perm, t, d)).unwrap();
        let yp = llm_out(&cfg, &store, &xp, Some(&keep_p));
        let want = permute_tokens(y.data(), &perm, t, d);
        let same = yp.data().iter().zip(&want).all(|(a, c)| a.as_f64().to_bits() == c.as_f64().to_bits());
        ensure!(same, "trial {trial}: forward(pi x) != pi forward(x)");
    }
    Ok(trials)
}

fn criterion_4() -> Check {
    let cfg = LlmBlockConfig::desk(9);
    let store = ok(load_or_synthesize::<f64>(&cfg, true), "block")?;
    let mut rng = Pcg32::seeded(31);
    let (t, d) = (6, cfg.d_llm);
    let x = random_tensor::<f64>(&mut rng, &[1, t, d], 1.0);
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[(t - 1) * d..] {
        *v += 0.5;
    }
    let (y, y2) = (llm_out(&cfg, &store, &x, None), llm_out(&cfg, &store, &x2, None));
    let change = (0..d).map(|c| (y.data()[c] - y2.data()[c]).abs()).fold(0.0, f64::max);
    ensure!(change != 0.0, "perturbing the last token left token 0 unchanged");
    let n64 = equivariance::<f64>(1, 25)?;
    let n32 = equivariance::<f32>(2, 25)?;
    Ok(format!(
        "token 0 moves by {change:.3e} when token {} is perturbed; {} random permutations bitwise equivariant",
        t - 1,
        n64 + n32
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Check {
    let mut rng = Pcg32::seeded(41);
    let mut lines = Vec::new();
    for _ in 0..3 {
        let heads = [2usize, 4][rng.below(2) as usize];
        let d_model = heads * (4 + rng.below(8) as usize);
        let d_llm = 4 * (3 + rng.below(10) as usize);
        let d_ffn = 8 + rng.below(60) as usize;
        let mut bb = BackboneConfig::preset("vit-tiny", 3).unwrap();
        bb.d_model = d_model;
        bb.n_heads = heads;
        bb.depth = 1;
        let llm = LlmBlockConfig {
            d_ffn,
            ..tiny_llm(d_llm, 1)
        };
        let acc = |v| {
            let spec = ModelSpec::new(bb.clone(), v, llm.clone());
            init_params::<f32>(&spec, 0).map(|s| param_accounting(&s))
        };
        let r = ok(acc(BoosterVariant::RLlm), "r-llm")?;
        let m = ok(acc(BoosterVariant::MlpControl), "mlp-control")?;
        ensure!(
            r.trainable == m.trainable,
            "d_model {d_model}, d_llm {d_llm}: trainable r-llm {} != mlp-control {}",
            r.trainable,
            m.trainable
        );
        ensure!(
            r.frozen == llm_param_count(&llm),
            "frozen {} != llm_param_count {}",
            r.frozen,
            llm_param_count(&llm)
        );
        lines.push(format!("({d_model},{d_llm},{d_ffn}): {} trainable, {} frozen", r.trainable, r.frozen));
    }
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------- 6

const EPOCHS: usize = 30;
const N_PER_CLASS: usize = 400;
const BAR: f64 = 0.95;

/// Shared by every criterion-6 run. The default 5e-4 at batch 128 leaves
/// most variants on a two-pair plateau (transposed blob layouts tied) for
/// the whole budget; rare gradient spikes on the patch embedding need
/// clipping to avoid collapsing back to chance.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: EPOCHS,
        batch_size: 32,
        lr: Some(1e-4),
        grad_clip: Some(1.0),
        seed: 1,
        ..Default::default()
    }
}

struct RunSummary {
    train_acc: f64,
    test_auc: f64,
    secs: f64,
    report: serde_json::Value,
}

fn train_run(
    data: &freeboost::data::dataset::DatasetBundle,
    preset: &str,
    v: BoosterVariant,
    cfg: &TrainConfig,
) -> std::result::Result<RunSummary, String> {
    let spec = ModelSpec::new(BackboneConfig::preset(preset, 4).unwrap(), v, LlmBlockConfig::desk(0));
    let store = ok(init_params::<f32>(&spec, 0), "init")?;
    let start = Instant::now();
    let out = ok(
        run_training(&spec, data, cfg, store, serde_json::json!({"preset": preset, "variant": v}), None, |_| {}),
        "training",
    )?;
    let secs = start.elapsed().as_secs_f64();
    let train = ok(evaluate(&spec, &out.best, &data.train, 128), "train eval")?;
    Ok(RunSummary {
        train_acc: train.acc,
        test_auc: out.report.test.auc,
        secs,
        report: out.report.without_wall_clock(),
    })
}

fn criterion_6() -> Check {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    let mut judge = |label: String, r: &RunSummary, limit_s: f64| {
        let line = format!("{label} train acc {:.3} test auc {:.4} {:.0}s", r.train_acc, r.test_auc, r.secs);
        if r.train_acc < BAR || r.test_auc < BAR || r.secs > limit_s {
            failures.push(line.clone());
        }
        lines.push(line);
    };

    let data = ok(gen_synthetic(SyntheticKind::Blobs2d, N_PER_CLASS, 4, 1), "blobs2d")?;
    let cfg2 = desk_train_config();
    let mut first_r_llm = None;
    for v in BoosterVariant::ALL {
        let r = train_run(&data, "vit-tiny", v, &cfg2)?;
        judge(format!("vit-tiny/{v}"), &r, 600.0);
        if v == BoosterVariant::RLlm {
            first_r_llm = Some(r.report);
        }
    }
    let again = train_run(&data, "vit-tiny", BoosterVariant::RLlm, &cfg2)?;
    let reproducible = first_r_llm.as_ref() == Some(&again.report);

    let data3 = ok(gen_synthetic(SyntheticKind::Blobs3d, N_PER_CLASS, 4, 1), "blobs3d")?;
    let cfg3 = desk_train_config();
    for preset in ["vit3d-tiny", "vivit-tiny"] {
        let r = train_run(&data3, preset, BoosterVariant::RLlm, &cfg3)?;
        judge(format!("{preset}/r-llm"), &r, 1200.0);
    }
    ensure!(reproducible, "same-seed reruns produced different metrics; {}", lines.join("; "));
    ensure!(failures.is_empty(), "below bar: {}; all runs: {}", failures.join("; "), lines.join("; "));
    Ok(format!("{}; same-seed rerun identical", lines.join("; ")))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let mut rng = Pcg32::seeded(71);
    let mut worst = 0.0f64;
    let mut n_multi = 0;
    for i in 0..1000 {
        let k = if i % 2 == 0 { 2 } else { 3 + rng.below(3) as usize };
        let n = 2 + rng.below(199) as usize;
        // coarse grids force ties
        let levels = [4u32, 16, 64, 1 << 20][rng.below(4) as usize];
        let mut labels: Vec<usize> = (0..n).map(|_| rng.below(k as u32) as usize).collect();
        labels[0] = 0;
        labels[1] = 1;
        let probs: Vec<f64> = (0..n * k).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        if k > 2 {
            n_multi += 1;
        }
        let got = ok(auc(&probs, k, &labels), "auc")?.overall;
        let want = auc_oracle(&probs, k, &labels).ok_or("oracle undefined")?;
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= 1e-9, "instance {i}: auc {got} vs oracle {want}");
        let warped: Vec<f64> = probs.iter().map(|&p| (4.0 * p).exp() - 3.0 + p * p * p).collect();
        let again = ok(auc(&warped, k, &labels), "auc")?.overall;
        ensure!(again == got, "instance {i}: monotone transform moved auc {got} -> {again}");
    }
    Ok(format!("1000 instances ({n_multi} multiclass), max |auc - oracle| {worst:.1e}, transform-invariant"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Check {
    for (name, stream, want) in DEFLATE_VECTORS {
        let got = ok(inflate(&hex(stream), 1 << 20), name)?;
        ensure!(got == *want, "{name}: wrong output");
    }
    let (stream, want) = run_vector();
    ensure!(ok(inflate(&stream, 1 << 20), "run")? == want, "distance-1 run decoded wrong");
    for (name, stream) in DEFLATE_INVALID {
        ensure!(inflate(&hex(stream), 1 << 20).is_err(), "{name}: accepted");
    }
    let mut rng = Pcg32::seeded(81);
    // dynamic blocks, long matches, far distances
    let text: Vec<u8> = (0..70_000)
        .map(|i| if i % 1000 < 500 { b"abcdefgh"[rng.below(8) as usize] } else { (i % 251) as u8 })
        .collect();
    for level in [1u8, 6, 9] {
        let got = ok(inflate(&deflate_raw(&text, level), 1 << 20), "miniz stream")?;
        ensure!(got == text, "level {level} round trip differs");
    }
    ensure!(crc32(b"123456789") == 0xCBF4_3926, "crc-32 check value");
    ensure!(crc32(b"") == 0, "crc-32 of empty input");

    let arrays = small_arrays(3);
    let stored = npz_bytes(&arrays);
    let deflated = npz_deflated(&arrays);
    let a = ok(parse_npz(&stored, None), "stored npz")?;
    let b = ok(parse_npz(&deflated, None), "deflated npz")?;
    ensure!(a.train.images.bitwise_eq(&b.train.images) && a.test.labels == b.test.labels, "stored and deflated npz disagree");
    ensure!(a.to_arrays() == arrays, "npz contents changed");

    // a corrupted CRC is reported as such
    let mut bad = stored.clone();
    ensure!(ok(ZipArchive::parse(&stored), "zip")?.entries().len() == 6, "member count");
    let pos = stored.windows(6).position(|w| w == b"\x93NUMPY").ok_or("no npy member")?;
    bad[pos + 130] ^= 0x40;
    let err = parse_npz(&bad, None).unwrap_err();
    ensure!(
        matches!(err, Error::Format(freeboost::FormatError::CrcMismatch { .. })),
        "flipped payload byte gave {err}"
    );

    let fuzz = fuzz_archives(&[stored, deflated], 10_000, 82)?;

    let spec = tiny_spec(BoosterVariant::HybridRLlm);
    let s32 = lively_params::<f32>(&spec, 8);
    let s64 = lively_params::<f64>(&spec, 8);
    let back32: ParamStore<f32> = ok(decode_checkpoint(&encode_checkpoint(&s32)), "ckpt f32")?;
    let back64: ParamStore<f64> = ok(decode_checkpoint(&encode_checkpoint(&s64)), "ckpt f64")?;
    ensure!(back32.bitwise_eq(&s32) && back64.bitwise_eq(&s64), "checkpoint round trip not bitwise");
    Ok(format!(
        "{} inflate vectors, {} rejections, crc-32, stored+deflated npz, {fuzz}, checkpoint bitwise",
        DEFLATE_VECTORS.len() + 4,
        DEFLATE_INVALID.len() + 1
    ))
}

/// Truncations, bit flips, byte overwrites and splices of valid archives;
/// every outcome must be `Ok` or a structured error, never a panic.
fn fuzz_archives(seeds: &[Vec<u8>], iters: usize, seed: u64) -> std::result::Result<String, String> {
    let mut rng = Pcg32::seeded(seed);
    let mut errors = 0;
    for i in 0..iters {
        let base = &seeds[i % seeds.len()];
        let mut m = base.clone();
        match rng.below(4) {
            0 => m.truncate(rng.below(m.len() as u32) as usize),
            1 => {
                for _ in 0..1 + rng.below(8) {
                    let p = rng.below(m.len() as u32) as usize;
                    m[p] ^= 1 << rng.below(8);
                }
            }
            2 => {
                let p = rng.below(m.len() as u32) as usize;
                let len = (1 + rng.below(16) as usize).min(m.len() - p);
                for b in &mut m[p..p + len] {
                    *b = rng.below(256) as u8;
                }
            }
            _ => {
                let p = rng.below(m.len() as u32) as usize;
                let junk: Vec<u8> = (0..rng.below(32)).map(|_| rng.below(256) as u8).collect();
                m.splice(p..p, junk);
            }
        }
        match catch_unwind(AssertUnwindSafe(|| parse_npz(&m, None))) {
            Ok(Ok(_)) => {}
            Ok(Err(_)) => errors += 1,
            Err(_) => return Err(format!("fuzz iteration {i} panicked")),
        }
    }
    Ok(format!("{iters} fuzz cases ({errors} errors, 0 panics)"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let spec = ModelSpec::new(
        BackboneConfig::preset("vit-tiny", 4).unwrap(),
        BoosterVariant::RLlm,
        LlmBlockConfig::desk(0),
    );
    let data = ok(gen_synthetic(SyntheticKind::Blobs2d, 10, 4, 9), "data")?;
    let image = data.test.batch(&[0]).0;

    let mut store = ok(init_params::<f64>(&spec, 9), "init")?;
    let live = ok(grad_cam(&spec, &store, &image, None, None), "grad-cam")?;
    ensure!((live.rows, live.cols) == (7, 7), "grid {}x{}, expected 7x7", live.rows, live.cols);
    ensure!(live.grid.iter().all(|&v| (0.0..=1.0).contains(&v)), "values outside [0, 1]");

    for (name, p) in store.iter_mut() {
        if name.starts_with(CLASSIFIER) {
            p.tensor.data_mut().fill(0.0);
        }
    }
    let zero = ok(grad_cam(&spec, &store, &image, None, None), "grad-cam")?;
    ensure!(zero.grid.iter().all(|&v| v == 0.0), "zero classifier gave a nonzero heatmap");

    let pgm = heatmap_pgm(&live);
    let parsed = ok(Netpbm::parse(&pgm.encode()), "pgm")?;
    ensure!(parsed == pgm && parsed.data == live.quantized(), "pgm did not parse back exactly");
    ensure!((parsed.width, parsed.height, parsed.channels) == (7, 7, 1), "pgm dims");
    let ppm = ok(overlay_ppm(&live, &image, 4), "overlay")?;
    let parsed = ok(Netpbm::parse(&ppm.encode()), "ppm")?;
    ensure!(parsed == ppm && (parsed.width, parsed.height, parsed.channels) == (28, 28, 3), "ppm did not parse back exactly");
    ensure!(heatmap_pgm(&zero).data.iter().all(|&v| v == 0), "zero heatmap PGM payload not all zero");
    Ok(format!(
        "7x7 grid, zero classifier gives all-zero map, PGM/PPM parse back exactly (peak cell {})",
        live.argmax()
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Option<Check> {
    let path = std::env::var("FB_PNEUMONIA_NPZ").ok()?;
    Some((|| {
        let epochs: usize = std::env::var("FB_PNEUMONIA_EPOCHS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(100)
            .min(100);
        let data = ok(load_npz(&path, None), "load")?;
        ensure!(data.sample_shape() == [1, 28, 28], "expected 28x28 grayscale, got {:?}", data.sample_shape());
        let spec = ModelSpec::new(
            BackboneConfig::preset("vit-tiny", data.n_classes).unwrap(),
            BoosterVariant::Baseline,
            LlmBlockConfig::desk(0),
        );
        let store = ok(init_params::<f32>(&spec, 0), "init")?;
        let cfg = TrainConfig {
            epochs,
            ..Default::default()
        };
        let out = ok(run_training(&spec, &data, &cfg, store, serde_json::Value::Null, None, |_| {}), "training")?;
        let a = out.report.test.auc;
        ensure!(a >= 0.80, "test auc {a:.4} after {epochs} epochs (floor 0.80)");
        Ok(format!("test auc {a:.4}, acc {:.4} after {epochs} epochs", out.report.test.acc))
    })())
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("FB_ACCEPT_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Check); 9] = [
        ("gradient suite", criterion_1),
        ("freeze contract", criterion_2),
        ("identity-block algebra", criterion_3),
        ("non-causality and permutation equivariance", criterion_4),
        ("capacity-control accounting", criterion_5),
        ("desk-scale training", criterion_6),
        ("auc oracle", criterion_7),
        ("format conformance", criterion_8),
        ("grad-cam", criterion_9),
    ];
    let wanted = |i: usize| only.as_ref().map_or(true, |o| o.contains(&i));
    let mut failed = 0;
    // keep panics from individual checks out of the report lines
    std::panic::set_hook(Box::new(|_| {}));
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(*f).unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if wanted(10) {
        match catch_unwind(criterion_10) {
            Ok(None) => println!("criterion 10 SKIP  real-data smoke: set FB_PNEUMONIA_NPZ to a PneumoniaMNIST npz"),
            Ok(Some(Ok(d))) => println!("criterion 10 PASS  real-data smoke: {d}"),
            Ok(Some(Err(why))) => {
                failed += 1;
                println!("criterion 10 FAIL  real-data smoke: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("criterion 10 FAIL  real-data smoke: panicked");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        if std::env::var("FB_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
