//! End-to-end tests of the `freeboost` binary.

use std::path::Path;
use std::process::{Command, Output};

use freeboost::data::netpbm::Netpbm;
use serde_json::Value;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freeboost"))
        .args(args)
        .current_dir(cwd)
        .env("FB_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = r#"{
  "model": {
    "backbone": {"preset": "vit-tiny", "depth": 1, "d_model": 32, "n_heads": 2},
    "booster": {"variant": "r-llm"},
    "llm": {"d_llm": 32, "d_ffn": 48},
    "seed": 3
  },
  "train": {"epochs": 2, "batch_size": 16, "seed": 4},
  "data": {"kind": "synthetic", "generator": "blobs2d", "n_per_class": 20, "n_classes": 3, "seed": 5},
  "output_dir": "run"
}
"#;

fn write_config(dir: &Path, text: &str) {
    std::fs::write(dir.join("cfg.json"), text).unwrap();
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn train_eval_gradcam_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, SMOKE);

    let o = run(&["train", "cfg.json", "--set", "train.lr=1e-3"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let run_dir = d.join("run");
    for f in ["resolved_config.json", "metrics.json", "ckpt_best.rlbk", "ckpt_last.rlbk"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let resolved = json(&run_dir.join("resolved_config.json"));
    assert_eq!(resolved["train"]["lr"], 1e-3);
    assert_eq!(resolved["train"]["weight_decay"], 0.05);
    assert_eq!(resolved["model"]["backbone"]["n_classes"], 3);
    let metrics = json(&run_dir.join("metrics.json"));
    assert_eq!(metrics["epochs"].as_array().unwrap().len(), 2);

    // eval of the selected checkpoint reproduces the reported test metrics
    let o = run(&["eval", "cfg.json", "--set", "train.lr=1e-3", "--checkpoint", "run/ckpt_best.rlbk"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["acc"], metrics["test"]["acc"]);
    assert_eq!(eval["auc"], metrics["test"]["auc"]);
    assert_eq!(eval["per_class_auc"], metrics["test"]["per_class_auc"]);

    // same config and seed: identical metrics apart from the wall clock
    let o = run(&["train", "cfg.json", "--set", "train.lr=1e-3", "--out", "run2"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut a = metrics.clone();
    let mut b = json(&d.join("run2/metrics.json"));
    a.as_object_mut().unwrap().remove("wall_clock_s");
    b.as_object_mut().unwrap().remove("wall_clock_s");
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(run_dir.join("ckpt_best.rlbk")).unwrap(),
        std::fs::read(d.join("run2/ckpt_best.rlbk")).unwrap()
    );

    let o = run(&["gradcam", "cfg.json", "--checkpoint", "run/ckpt_best.rlbk", "--index", "2", "--upscale", "4"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = Netpbm::parse(&std::fs::read(run_dir.join("heatmaps/heatmap_test_2.pgm")).unwrap()).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels), (7, 7, 1));
    let ppm = Netpbm::parse(&std::fs::read(run_dir.join("heatmaps/overlay_test_2.ppm")).unwrap()).unwrap();
    assert_eq!((ppm.width, ppm.height, ppm.channels), (28, 28, 3));

    let o = run(&["gradcam", "cfg.json", "--checkpoint", "run/ckpt_best.rlbk", "--layer", "backbone.blocks.9"], d);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("backbone.blocks.0"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, SMOKE);

    let o = run(&["train", "cfg.json", "--set", "model.booster.variant=rllm"], d);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("model.booster.variant"), "{e}");
    for v in ["baseline", "r-llm", "out-r-llm", "hybrid-r-llm", "mlp-control"] {
        assert!(e.contains(v), "{e}");
    }

    write_config(d, &SMOKE.replace("\"seed\": 4}", "\"seed\": 4, \"lr_typo\": 1}"));
    let o = run(&["train", "cfg.json"], d);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("train") && e.contains("lr_typo") && e.contains("line 8"), "{e}");

    write_config(d, SMOKE);
    let o = run(&["train", "cfg.json", "--set", "train.batch_size=0"], d);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("train.batch_size"));

    let o = run(&["train", "missing.json"], d);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["bogus"], d);
    assert_eq!(o.status.code(), Some(2));

    // a missing data file is a runtime failure
    let cfg = SMOKE.replace(
        r#"{"kind": "synthetic", "generator": "blobs2d", "n_per_class": 20, "n_classes": 3, "seed": 5}"#,
        r#"{"kind": "npz", "path": "absent.npz", "n_classes": 3}"#,
    );
    write_config(d, &cfg);
    let o = run(&["train", "cfg.json"], d);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    // params never touches the data
    let o = run(&["params", "cfg.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn params_difference_is_adapters_plus_frozen_block() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, SMOKE);
    let counts = |variant: &str| -> Value {
        let o = run(&["params", "cfg.json", "--json", "--set", &format!("model.booster.variant={variant}")], d);
        assert!(o.status.success(), "{}", stderr(&o));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let base = counts("baseline");
    let rllm = counts("r-llm");
    let (dm, dl, ff) = (32u64, 32u64, 48u64);
    let adapters = 2 * dm * dl + dl + dm;
    let block = 4 * dl * dl + 3 * dl * ff + 2 * dl;
    assert_eq!(rllm["trainable"].as_u64().unwrap() - base["trainable"].as_u64().unwrap(), adapters);
    assert_eq!(rllm["frozen"].as_u64().unwrap() - base["frozen"].as_u64().unwrap(), block);
    assert_eq!(rllm["per_module"]["llm_block"]["frozen"].as_u64().unwrap(), block);

    // full-size block dimensions are counted without materializing weights
    let o = run(&["params", "cfg.json", "--set", "model.llm={\"preset\": \"llama7b\"}"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("202383360"));
}

#[test]
fn gen_fixture_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        let o = run(&["gen-fixture", "--kind", "blobs2d", "--seed", "9", "--n-per-class", "12", "--out", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(d.join("a/blobs2d.npz")).unwrap(), std::fs::read(d.join("b/blobs2d.npz")).unwrap());
    for f in ["train_images.npy", "test_labels.npy"] {
        assert_eq!(
            std::fs::read(d.join("a/blobs2d").join(f)).unwrap(),
            std::fs::read(d.join("b/blobs2d").join(f)).unwrap()
        );
    }
    // the fixture loads through both data kinds
    let cfg = SMOKE.replace(
        r#"{"kind": "synthetic", "generator": "blobs2d", "n_per_class": 20, "n_classes": 3, "seed": 5}"#,
        r#"{"kind": "dir", "path": "a/blobs2d"}"#,
    );
    write_config(d, &cfg);
    let o = run(&["train", "cfg.json", "--set", "train.epochs=1"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(json(&d.join("run/resolved_config.json"))["model"]["backbone"]["n_classes"], 4);
}
