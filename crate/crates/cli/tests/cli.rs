use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lulc_core::nn::{load_checkpoint, TensorKind};
use lulc_core::pipeline::{CHIPS, EVAL, GEOJSON, HISTORY, HTML, INIT_MODEL, MODEL, SPLIT, TRAIN_SUMMARY};

const SMALL: &[&str] = &[
    "--set",
    "synth.scenes=10",
    "--set",
    "synth.width=256",
    "--set",
    "synth.height=128",
    "--set",
    "train.max_epochs=2",
    "--set",
    "bench.warmup_epochs=1",
    "--set",
    "bench.measured_epochs=1",
    "--set",
    "bench.train_batches=2",
    "--set",
    "bench.val_batches=1",
    "--quiet",
];

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn lulc(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lulc"))
        .arg("--work-dir")
        .arg(work)
        .args(SMALL)
        .args(args)
        .env_remove("LULC_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn help_lists_every_config_key() {
    let out = Command::new(env!("CARGO_BIN_EXE_lulc")).arg("--help").output().unwrap();
    let help = ok(&out);
    for key in lulc_core::config::config_keys() {
        assert!(help.contains(&format!("  {key} ")), "`{key}` missing from --help");
    }
    for flag in ["--config", "--seed", "--threads", "--work-dir", "--clock", "--set", "EXIT CODES"] {
        assert!(help.contains(flag), "{flag}");
    }
}

#[test]
fn bundled_config_is_valid_and_quiet() {
    let out = Command::new(env!("CARGO_BIN_EXE_lulc"))
        .arg("--config")
        .arg(repo_root().join("configs/synthetic.toml"))
        .arg("validate")
        .output()
        .unwrap();
    let text = ok(&out);
    assert!(!stderr(&out).contains("warning"), "{}", stderr(&out));
    // defaults are echoed alongside the file's values
    assert!(text.contains("lr = 0.01") && text.contains("[style]"), "{text}");
}

#[test]
fn config_problems_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[inference]\ntau = 1.5\n[train]\nbatch_size = 0\n[style]\nopacity = 2.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lulc")).arg("-c").arg(&cfg).arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("3 problem(s)"), "{err}");
    assert!(err.contains("inference.tau") && err.contains("batch_size") && err.contains("style.opacity"), "{err}");

    fs::write(&cfg, "seed = 1\n[train\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lulc")).arg("-c").arg(&cfg).arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("bad.toml:2:"), "{}", stderr(&out));
}

#[test]
fn missing_input_names_the_producing_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = lulc(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run `lulc tile` first"), "{}", stderr(&out));
    let out = lulc(dir.path(), &["report"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run `lulc bench` first"), "{}", stderr(&out));
}

#[test]
fn smoke_synth_to_eval() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for stage in ["synth", "ingest", "tile", "stats", "split", "train", "eval"] {
        let text = ok(&lulc(w, &[stage]));
        assert!(text.starts_with(&format!("{stage}: ")), "{text}");
    }
    for rel in [CHIPS, SPLIT, INIT_MODEL, MODEL, HISTORY, TRAIN_SUMMARY, EVAL] {
        assert!(w.join(rel).exists(), "{rel}");
    }
    let history = fs::read_to_string(w.join(HISTORY)).unwrap();
    let mut lines = history.lines();
    assert_eq!(lines.next(), Some(lulc_core::train::HISTORY_HEADER));
    assert_eq!(lines.count(), 2);

    let split: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join(SPLIT)).unwrap()).unwrap();
    let n: usize = ["train_idx", "val_idx", "test_idx"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    assert_eq!(n, 80);

    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.join(EVAL)).unwrap()).unwrap();
    let acc = eval["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(eval["per_class_accuracy"].as_object().unwrap().len(), 10);
    assert!(load_checkpoint(&w.join(MODEL), None).is_ok());
}

#[test]
fn zero_learning_rate_keeps_the_initial_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    ok(&lulc(w, &["run", "--to", "split"]));
    ok(&lulc(w, &["train", "--lr", "0"]));
    let init = load_checkpoint(&w.join(INIT_MODEL), None).unwrap().network;
    let trained = load_checkpoint(&w.join(MODEL), None).unwrap().network;
    let params = |n: &lulc_core::nn::Network| -> Vec<(String, Vec<f32>)> {
        n.tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == TensorKind::Param)
            .map(|(name, _, t)| (name, t.data().to_vec()))
            .collect()
    };
    let (a, b) = (params(&init), params(&trained));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn seed_flag_and_environment_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&lulc(&a, &["--seed", "5", "synth"]));
    let out = Command::new(env!("CARGO_BIN_EXE_lulc"))
        .arg("--work-dir")
        .arg(&b)
        .args(SMALL)
        .arg("synth")
        .env("LULC_SEED", "5")
        .output()
        .unwrap();
    ok(&out);
    ok(&lulc(&c, &["--seed", "6", "synth"]));
    let catalog = |d: &Path| fs::read(d.join("scenes/catalog.csv")).unwrap();
    assert_eq!(catalog(&a), catalog(&b));
    assert_ne!(catalog(&a), catalog(&c));
}

#[test]
fn full_pipeline_replays_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["one", "two"].iter().map(|n| dir.path().join(n)).collect();
    for w in &runs {
        ok(&lulc(w, &["--clock", "tick", "--seed", "11", "run"]));
    }
    for rel in [HISTORY, "report/bench_report.csv", GEOJSON, HTML] {
        let a = fs::read(runs[0].join(rel)).unwrap();
        let b = fs::read(runs[1].join(rel)).unwrap();
        assert!(!a.is_empty(), "{rel}");
        assert!(a == b, "{rel} differs between runs");
    }
}
