//! End-to-end tests of the `tail` binary: artifact round-trips,
//! determinism, and the documented exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tail_core::adapters::AdapterSpec;
use tail_core::config::{CurriculumConfig, CurriculumStageConfig, ExperimentConfig};
use tail_core::bench::SuiteKind;
use tail_core::harness::TrainConfig;
use tail_core::policy::PolicySpec;

/// A configuration small enough that full commands finish in seconds.
fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.policy = PolicySpec {
        embed_dim: 16,
        decoder_layers: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        perception_layers: 1,
        percep_dim: 8,
        state_dim: 3,
        action_dim: 3,
        max_seq_len: 2,
        gmm_modes: 1,
        gmm_min_std: 0.05,
        dropout: 0.0,
        film_layers: 1,
        fusion_hidden: 8,
        pretrain_adapter_rank: 2,
    };
    cfg.bench.embed_dim = 16;
    cfg.bench.percep_dim = 8;
    cfg.bench.horizon = 40;
    let mut adapter = AdapterSpec::lora(2, 4.0);
    adapter.bottleneck_size = 4;
    adapter.roboadapter_size = 4;
    adapter.roboadapter_layer_mask = [0].into_iter().collect();
    adapter.prefix_len = 2;
    adapter.prefix_rank = 2;
    adapter.decoder_rank_multiplier = 1;
    cfg.adapter = adapter;
    cfg.train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 0,
        eval_every_epochs: 1,
        fisher_samples: 8,
        ..TrainConfig::desk()
    };
    cfg.curriculum = CurriculumConfig {
        pretrain_tasks: 2,
        demos_per_task: 3,
        stages: vec![
            CurriculumStageConfig {
                suite: SuiteKind::Spatial,
                n_tasks: 2,
            },
            CurriculumStageConfig {
                suite: SuiteKind::Goal,
                n_tasks: 2,
            },
        ],
    };
    cfg.eval.episodes = 2;
    cfg
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    tiny_config().to_file(&path).unwrap();
    path
}

fn tail(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tail"))
        .args(args)
        .env("TAIL_DETERMINISTIC", "1")
        .output()
        .expect("spawn tail binary")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn gen_data_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("d1");
    let out2 = dir.path().join("d2");
    assert_code(&tail(&["gen-data", "--config", &s(&cfg), "--out", &s(&out1)]), 0);
    assert_code(&tail(&["gen-data", "--config", &s(&cfg), "--out", &s(&out2)]), 0);
    let mut names: Vec<String> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec![
            "manifest.json",
            "pretrain.json",
            "stage1-spatial.json",
            "stage2-goal.json"
        ]
    );
    for name in &names {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn pretrain_adapt_eval_metrics_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let base = dir.path().join("base-run");
    assert_code(&tail(&["pretrain", "--config", &s(&cfg), "--out", &s(&base)]), 0);
    assert!(base.join("base.json").exists());
    assert!(base.join("base.bin").exists());
    assert!(base.join("ledger.json").exists());
    assert!(base.join("metrics.csv").exists());

    // resume on a finished checkpoint is a no-op success
    assert_code(
        &tail(&["pretrain", "--config", &s(&cfg), "--out", &s(&base), "--resume"]),
        0,
    );

    let lora = dir.path().join("lora-run");
    assert_code(
        &tail(&[
            "adapt", "--config", &s(&cfg), "--base", &s(&base), "--strategy", "lora",
            "--out", &s(&lora),
        ]),
        0,
    );
    assert!(lora.join("bundle-stage1.json").exists());
    assert!(lora.join("bundle-stage2.bin").exists());

    // identical rerun produces a bit-identical ledger
    let lora2 = dir.path().join("lora-run2");
    assert_code(
        &tail(&[
            "adapt", "--config", &s(&cfg), "--base", &s(&base), "--strategy", "lora",
            "--out", &s(&lora2),
        ]),
        0,
    );
    assert_eq!(
        std::fs::read(lora.join("ledger.json")).unwrap(),
        std::fs::read(lora2.join("ledger.json")).unwrap()
    );

    let fft = dir.path().join("fft-run");
    assert_code(
        &tail(&[
            "adapt", "--config", &s(&cfg), "--base", &s(&base), "--strategy", "fft",
            "--out", &s(&fft),
        ]),
        0,
    );
    assert!(fft.join("checkpoint-stage1.json").exists());
    assert!(!fft.join("bundle-stage1.json").exists());

    // evaluate the stage-1 bundle against the base
    assert_code(
        &tail(&[
            "eval", "--config", &s(&cfg), "--base", &s(&base), "--bundle",
            &s(&lora.join("bundle-stage1")), "--stage", "1",
        ]),
        0,
    );

    // aggregate both strategies; write and round-trip the CSV
    let csv = dir.path().join("agg.csv");
    let out = tail(&["metrics", &s(&lora), &s(&fft), "--out", &s(&csv)]);
    assert_code(&out, 0);
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(table.contains("tail-lora"), "missing strategy row:\n{table}");
    assert!(table.contains("fft"));
    let roundtrip = tail(&["metrics", &s(&csv)]);
    assert_code(&roundtrip, 0);
    assert_eq!(String::from_utf8_lossy(&roundtrip.stdout), table);

    // inspect: fft trains everything, lora a small fraction
    let out = tail(&["inspect", &s(&base), "--strategy", "fft"]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("1.0000 (100.00%)"), "{text}");
    let out = tail(&["inspect", &s(&base), "--strategy", "lora", "--config", &s(&cfg)]);
    assert_code(&out, 0);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("tail-lora"), "{text}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    // config error: unknown key in the config document
    let bad = dir.path().join("bad.json");
    let mut doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&cfg).unwrap()).unwrap();
    doc["trian"] = serde_json::json!({});
    std::fs::write(&bad, serde_json::to_vec(&doc).unwrap()).unwrap();
    assert_code(
        &tail(&["pretrain", "--config", &s(&bad), "--out", &s(&dir.path().join("x"))]),
        2,
    );

    // config error: unknown strategy name
    assert_code(
        &tail(&[
            "adapt", "--config", &s(&cfg), "--base", &s(&dir.path().join("nope")),
            "--strategy", "lorra", "--out", &s(&dir.path().join("x")),
        ]),
        2,
    );

    // config error: rank exceeding the hidden width, caught before training
    assert_code(
        &tail(&[
            "sweep-rank", "--config", &s(&cfg), "--ranks", "99",
            "--out", &s(&dir.path().join("x")),
        ]),
        2,
    );
    // config error: empty rank list
    assert_code(
        &tail(&[
            "sweep-rank", "--config", &s(&cfg), "--ranks", "",
            "--out", &s(&dir.path().join("x")),
        ]),
        2,
    );

    // data error: missing base checkpoint
    assert_code(
        &tail(&[
            "adapt", "--config", &s(&cfg), "--base", &s(&dir.path().join("nope")),
            "--strategy", "lora", "--out", &s(&dir.path().join("x")),
        ]),
        3,
    );
    // data error: metrics on a directory without a ledger
    assert_code(&tail(&["metrics", &s(dir.path())]), 3);

    // numerical abort: divergent learning rate
    let mut diverge = tiny_config();
    diverge.train.lr = 1e12;
    let div_path = dir.path().join("diverge.json");
    diverge.to_file(&div_path).unwrap();
    assert_code(
        &tail(&["pretrain", "--config", &s(&div_path), "--out", &s(&dir.path().join("x"))]),
        4,
    );
}

#[test]
fn metrics_rejects_incompatible_ledgers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("seed0");
    let b = dir.path().join("seed1");
    assert_code(
        &tail(&["pretrain", "--config", &s(&cfg), "--out", &s(&a), "--seed", "0"]),
        0,
    );
    assert_code(
        &tail(&["pretrain", "--config", &s(&cfg), "--out", &s(&b), "--seed", "1"]),
        0,
    );
    assert_code(&tail(&["metrics", &s(&a), &s(&b)]), 2);
}

#[test]
fn sweep_rank_writes_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("sweep");
    assert_code(
        &tail(&["sweep-rank", "--config", &s(&cfg), "--ranks", "2", "--out", &s(&out_dir)]),
        0,
    );
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3, "{csv}");
    assert_eq!(lines[0], "method,rank,fwt_stage1,fwt_stage2,fwt_mean");
    assert!(lines[1].starts_with("lora,2,"));
    assert!(lines[2].starts_with("bottleneck,2,"));
}
