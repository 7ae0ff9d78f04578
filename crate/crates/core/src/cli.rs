//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 configuration error (including argument errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::booster::{init_params, param_accounting, spec_accounting, ModelSpec};
use crate::config::{load_config, resolve, ResolvedConfig};
use crate::data::checkpoint::load_checkpoint;
use crate::data::dataset::{gen_synthetic, write_fixture, DatasetBundle, SyntheticKind};
use crate::error::{Error, Result};
use crate::gradcam::{grad_cam, write_heatmap_pgm, write_overlay_ppm};
use crate::nn::ParamStore;
use crate::tensor::{Precision, Scalar};
use crate::train::{evaluate, run_training, CKPT_BEST, METRICS_FILE};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const HEATMAP_DIR: &str = "heatmaps";

#[derive(Debug, Parser)]
#[command(name = "freeboost", version, about = "ViT classifiers boosted by a frozen LLM block")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.lr=1e-4` (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints and metrics to the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of the configured data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the metrics as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print total, trainable and frozen parameter counts per module.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        json: bool,
    },
    /// Grad-CAM heatmap (PGM) and overlay (PPM) for one sample.
    Gradcam {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value = "test")]
        split: String,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        target: Option<usize>,
        /// Token layer, e.g. `backbone.blocks.3`; defaults to the last block.
        #[arg(long)]
        layer: Option<String>,
        /// Output directory; defaults to `<output_dir>/heatmaps`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        upscale: usize,
    },
    /// Write a synthetic dataset as `<name>.npz` and `<name>/*.npy`.
    GenFixture {
        #[arg(long, value_enum)]
        kind: FixtureKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FixtureKind {
    Blobs2d,
    Blobs3d,
}

impl From<FixtureKind> for SyntheticKind {
    fn from(k: FixtureKind) -> Self {
        match k {
            FixtureKind::Blobs2d => SyntheticKind::Blobs2d,
            FixtureKind::Blobs3d => SyntheticKind::Blobs3d,
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        2
    } else {
        1
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(exit_code(&e));
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// `FB_THREADS` caps the worker pool used by the parallel kernels.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("FB_THREADS", format!("expected a positive integer, got `{v}`")))?;
    #[cfg(feature = "parallel")]
    {
        // a second initialization (e.g. in tests) keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_resolved(args: &ConfigArgs) -> Result<(ResolvedConfig, DatasetBundle)> {
    let raw = load_config(&args.config, &args.overrides)?;
    // catch config errors before reading any data; the class count may
    // only be known from the data itself
    if let Err(e) = resolve(&raw, None) {
        let deferred = raw.data.declared_classes().is_none()
            && matches!(&e, Error::Config { path, .. } if path == "model.backbone.n_classes");
        if !deferred {
            return Err(e);
        }
    }
    let data = raw.data.load(&config_base(&args.config))?;
    let resolved = resolve(&raw, Some(&data))?;
    Ok((resolved, data))
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, out } => {
            let (resolved, data) = load_resolved(&cfg)?;
            let dir = out.unwrap_or_else(|| resolved.output_dir.clone());
            match resolved.train.precision {
                Precision::Single => train::<f32>(&resolved, &data, &dir),
                Precision::Double => train::<f64>(&resolved, &data, &dir),
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            split,
            out,
        } => {
            let (resolved, data) = load_resolved(&cfg)?;
            let json = match resolved.train.precision {
                Precision::Single => eval::<f32>(&resolved, &data, &checkpoint, &split)?,
                Precision::Double => eval::<f64>(&resolved, &data, &checkpoint, &split)?,
            };
            print!("{json}");
            if let Some(path) = out {
                std::fs::write(path, json)?;
            }
            Ok(())
        }
        Command::Params { cfg, json } => {
            let raw = load_config(&cfg.config, &cfg.overrides)?;
            let resolved = resolve(&raw, None)?;
            let acc = spec_accounting(&resolved.spec())?;
            if json {
                println!("{}", serde_json::to_string_pretty(&acc)?);
            } else {
                println!("{:<24} {:>12} {:>12} {:>12}", "module", "total", "trainable", "frozen");
                for (m, c) in &acc.per_module {
                    println!("{m:<24} {:>12} {:>12} {:>12}", c.total, c.trainable, c.frozen);
                }
                println!("{:<24} {:>12} {:>12} {:>12}", "all", acc.total, acc.trainable, acc.frozen);
            }
            Ok(())
        }
        Command::Gradcam {
            cfg,
            checkpoint,
            index,
            split,
            target,
            layer,
            out,
            upscale,
        } => {
            let (resolved, data) = load_resolved(&cfg)?;
            let dir = out.unwrap_or_else(|| resolved.output_dir.join(HEATMAP_DIR));
            let store: ParamStore<f64> = load_checkpoint(&checkpoint)?;
            let s = data
                .split(&split)
                .ok_or_else(|| Error::invalid(format!("unknown split `{split}`")))?;
            if index >= s.len() {
                return Err(Error::Index(format!("sample {index} out of range for {} samples", s.len())));
            }
            let image = s.batch(&[index]).0;
            let h = grad_cam(&resolved.spec(), &store, &image, target, layer.as_deref())?;
            std::fs::create_dir_all(&dir)?;
            let pgm = dir.join(format!("heatmap_{split}_{index}.pgm"));
            let ppm = dir.join(format!("overlay_{split}_{index}.ppm"));
            write_heatmap_pgm(&h, &pgm)?;
            write_overlay_ppm(&h, &image, &ppm, upscale)?;
            println!(
                "class {} (label {}), layer {}: {} {}",
                h.target_class,
                s.labels[index],
                h.layer,
                pgm.display(),
                ppm.display()
            );
            Ok(())
        }
        Command::GenFixture {
            kind,
            seed,
            n_per_class,
            n_classes,
            out,
            name,
        } => {
            let kind = SyntheticKind::from(kind);
            let bundle = gen_synthetic(kind, n_per_class, n_classes, seed)?;
            let name = name.unwrap_or_else(|| match kind {
                SyntheticKind::Blobs2d => "blobs2d".into(),
                SyntheticKind::Blobs3d => "blobs3d".into(),
            });
            write_fixture(&bundle, &out, &name)?;
            println!(
                "{}: {} train, {} val, {} test",
                out.join(format!("{name}.npz")).display(),
                bundle.train.len(),
                bundle.val.len(),
                bundle.test.len()
            );
            Ok(())
        }
    }
}

fn train<S: Scalar>(resolved: &ResolvedConfig, data: &DatasetBundle, dir: &Path) -> Result<()> {
    let spec: ModelSpec = resolved.spec();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED_CONFIG_FILE), resolved.to_json())?;
    let store = init_params::<S>(&spec, resolved.model.seed)?;
    let acc = param_accounting(&store);
    eprintln!(
        "{}: {} params, {} trainable, {} frozen",
        spec.variant(),
        acc.total,
        acc.trainable,
        acc.frozen
    );
    let out = run_training(&spec, data, &resolved.train, store, resolved.to_value(), Some(dir), |r| {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "epoch {:>3}  loss {:.4}  val acc {}  val auc {}",
            r.epoch,
            r.train_loss,
            fmt(r.val_acc),
            fmt(r.val_auc)
        );
    })?;
    println!(
        "test acc {:.4}  test auc {:.4}  ({} and {} in {})",
        out.report.test.acc,
        out.report.test.auc,
        METRICS_FILE,
        CKPT_BEST,
        dir.display()
    );
    Ok(())
}

fn eval<S: Scalar>(resolved: &ResolvedConfig, data: &DatasetBundle, ckpt: &Path, split: &str) -> Result<String> {
    let spec = resolved.spec();
    let store: ParamStore<S> = load_checkpoint(ckpt)?;
    let s = data
        .split(split)
        .ok_or_else(|| Error::invalid(format!("unknown split `{split}`")))?;
    let r = evaluate(&spec, &store, s, resolved.train.batch_size)?;
    let v = serde_json::json!({
        "split": split,
        "acc": r.acc,
        "auc": r.auc,
        "per_class_auc": r.per_class_auc,
        "loss": r.loss,
    });
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
