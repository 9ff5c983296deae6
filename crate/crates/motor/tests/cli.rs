//! End-to-end CLI tests: exit codes (0 success, 2 usage/input, 3
//! state/shape) and byte-identical artifacts on rerun.

use std::path::{Path, PathBuf};
use std::process::Output;

use motor::config::RunConfig;
use motor::synthetic::{generate, write_bundle, SyntheticConfig};

fn run_motor(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_motor"))
        .args(args)
        .env("MOTOR_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Write a small bundle plus a config JSON under `dir`; returns the config
/// path. `edit` tweaks the config before it is written.
fn setup(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> PathBuf {
    let synth = SyntheticConfig {
        num_users: 120,
        num_items: 40,
        num_clusters: 4,
        vision_dim: 16,
        text_dim: 8,
        interactions_per_user: 12,
        seed: 11,
        ..Default::default()
    };
    let bundle = generate(&synth).unwrap();
    let (interactions, vision, text) = write_bundle(dir, &bundle).unwrap();
    let mut cfg = RunConfig {
        interactions,
        vision_features: Some(vision),
        text_features: Some(text),
        output_dir: dir.join("out"),
        seed: 3,
        ..Default::default()
    };
    cfg.quantizer.slots_vision = 4;
    cfg.quantizer.slots_text = 4;
    cfg.quantizer.codebook_size = 8;
    cfg.quantizer.kmeans_iters = 8;
    cfg.model.dim = 8;
    cfg.train.max_epochs = 2;
    cfg.train.batch_size = 256;
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn quantize_missing_interactions_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |c| c.interactions = dir.path().join("nope.tsv"));
    let out = run_motor(&["--config", config.to_str().unwrap(), "quantize"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn quantize_rejects_non_dividing_slot_count() {
    let dir = tempfile::tempdir().unwrap();
    // vision_dim is 16; 5 slots cannot tile it.
    let config = setup(dir.path(), |c| c.quantizer.slots_vision = 5);
    let out = run_motor(&["--config", config.to_str().unwrap(), "quantize"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("not divisible"), "stderr: {}", stderr(&out));
}

#[test]
fn quantize_emits_both_modalities_and_reruns_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |_| {});
    let config = config.to_str().unwrap();
    let out = run_motor(&["--config", config, "quantize"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let vision = dir.path().join("out/tokens_vision.tsv");
    let text = dir.path().join("out/tokens_text.tsv");
    let first = (std::fs::read(&vision).unwrap(), std::fs::read(&text).unwrap());
    let out = run_motor(&["--config", config, "quantize"]);
    assert_eq!(exit_code(&out), 0);
    assert_eq!(std::fs::read(&vision).unwrap(), first.0);
    assert_eq!(std::fs::read(&text).unwrap(), first.1);
}

#[test]
fn train_id_free_without_token_files_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |_| {});
    let out = run_motor(&["--config", config.to_str().unwrap(), "train"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn train_id_based_single_epoch_writes_one_log_line() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |c| {
        c.model.mode = motor::backbones::Mode::IdBased;
        c.train.max_epochs = 1;
    });
    // No quantize stage: ID-based training must not need token files.
    let out = run_motor(&["--config", config.to_str().unwrap(), "train"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("out/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1, "log: {log}");
    assert!(dir.path().join("out/checkpoint.motr").exists());
}

#[test]
fn evaluate_shape_mismatch_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |_| {});
    let config = config.to_str().unwrap();
    let out = run_motor(&["--config", config, "run-all"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    // Same checkpoint, wider model: parameter shapes no longer line up.
    let mut cfg = RunConfig::load(Path::new(config)).unwrap();
    cfg.model.dim = 16;
    let wide = dir.path().join("wide.json");
    std::fs::write(&wide, cfg.to_json()).unwrap();
    let out = run_motor(&["--config", wide.to_str().unwrap(), "evaluate"]);
    assert_eq!(exit_code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn evaluate_reports_k10_and_k20_metrics() {
    let dir = tempfile::tempdir().unwrap();
    // Keep the token tables small enough that the item side undercuts an
    // N x d ID table even at this toy item count.
    let config = setup(dir.path(), |c| {
        c.quantizer.slots_vision = 2;
        c.quantizer.slots_text = 2;
        c.quantizer.codebook_size = 4;
        c.model.tcn_variant = motor::tcn::TcnVariant::Mean;
    });
    let out = run_motor(&["--config", config.to_str().unwrap(), "run-all"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/report.json")).unwrap())
            .unwrap();
    let metrics = report["test"]["metrics"].as_object().unwrap();
    let keys: Vec<&String> = metrics.keys().collect();
    assert_eq!(keys, ["ndcg@10", "ndcg@20", "recall@10", "recall@20"]);
    // ID-free parameter budget sits below the ID-based baseline.
    let ratio = report["parameter_audit"]["ratio"].as_f64().unwrap();
    assert!(ratio < 1.0, "ratio {ratio}");
}

#[test]
fn retrieve_unknown_item_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |_| {});
    let config = config.to_str().unwrap();
    let out = run_motor(&["--config", config, "quantize"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let out = run_motor(&["--config", config, "retrieve", "--item", "no-such-item"]);
    assert_eq!(exit_code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn retrieve_lists_items_and_top_n_zero_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), |_| {});
    let config = config.to_str().unwrap();
    let out = run_motor(&["--config", config, "quantize"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let items = std::fs::read_to_string(dir.path().join("out/items.tsv")).unwrap();
    let item = items.lines().next().unwrap().split('\t').next().unwrap();
    let out = run_motor(&["--config", config, "retrieve", "--item", item, "--top-n", "5"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let listing = String::from_utf8_lossy(&out.stdout);
    assert_eq!(listing.lines().count(), 5, "listing: {listing}");
    for line in listing.lines() {
        let (id, overlap) = line.split_once('\t').unwrap();
        assert!(!id.is_empty());
        // Two modalities at 4 slots each cap the overlap score at 8.
        assert!(overlap.parse::<usize>().unwrap() <= 8);
    }
    let out = run_motor(&["--config", config, "retrieve", "--item", item, "--top-n", "0"]);
    assert_eq!(exit_code(&out), 0);
    assert!(out.stdout.is_empty());
}
