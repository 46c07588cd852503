use std::path::Path;
use std::process::{Command, Output};

use ivfg::pipeline::KeyMode;
use ivfg_cli::commands::{ablation_table, cmd_evaluate, cmd_generate, cmd_plot_features, cmd_pretrain, cmd_synth_data, cmd_train, Layout};
use ivfg_cli::RunConfig;

fn ivfg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivfg")).args(args).output().unwrap()
}

fn small_overrides(work: &Path) -> Vec<String> {
    [
        format!("--work_dir={}", work.display()),
        "--data.identity_count=20".into(),
        "--data.images_per_identity=3".into(),
        "--data.resolution=8".into(),
        "--pretrain_data.identity_count=12".into(),
        "--pretrain_data.images_per_identity=3".into(),
        "--pretrain_data.resolution=8".into(),
        "--pretrain.backbone.resolution=8".into(),
        "--pretrain.backbone.widths=4".into(),
        "--pretrain.backbone.feature_dim=6".into(),
        "--pretrain.backbone.recognizer_dim=6".into(),
        "--pretrain.backbone.latent_dim=6".into(),
        "--pretrain.recognizer_epochs=1".into(),
        "--pretrain.autoencoder_epochs=1".into(),
        "--pretrain.min_accuracy=0".into(),
        "--pretrain.max_reconstruction_error=2".into(),
        "--train.epochs=1".into(),
        "--train.key_bits=4".into(),
        "--train.hidden_width=8".into(),
        "--train.mean_latent_samples=32".into(),
    ]
    .into()
}

#[test]
fn missing_artifacts_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let work = format!("--work_dir={}", dir.path().display());
    for cmd in [vec!["evaluate", work.as_str()], vec!["train", work.as_str()], vec!["generate", "--mode", "set-b", work.as_str()]] {
        let out = ivfg(&cmd);
        assert!(!out.status.success(), "{cmd:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.contains("missing artifact") || err.contains("No such file"), "{err}");
    }
}

#[test]
fn config_errors_exit_nonzero() {
    let out = ivfg(&["show-config", "--no_such_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("unknown config key"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "train.epochs = 4\n").unwrap();
    let out = ivfg(&["show-config", "--config", path.to_str().unwrap(), "--train.key_bits=16"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train.epochs = 4\n"));
    assert!(text.contains("train.key_bits = 16\n"));
    assert!(text.contains("# hash "));
}

#[test]
fn small_pipeline_runs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::load(None, &small_overrides(dir.path())).unwrap();
    let layout = Layout::new(dir.path());

    cmd_synth_data(&cfg).unwrap();
    let pre = cmd_pretrain(&cfg).unwrap();
    let trained = cmd_train(&cfg, &mut |_| {}).unwrap();
    assert_eq!(trained.log.len(), 1);
    assert!(layout.train_log().is_file());
    assert!(cmd_evaluate(&cfg, KeyMode::SetA).is_err());

    cmd_generate(&cfg, KeyMode::SetA).unwrap();
    let report = cmd_evaluate(&cfg, KeyMode::SetA).unwrap();
    for v in [report.original_eer, report.eer, report.auc, report.protection_rate, report.diversity, report.recoverability, report.fid] {
        assert!(v.is_some());
    }
    assert_eq!(report.provenance.config_hash, cfg.hash());
    let saved = std::fs::read(layout.metrics(KeyMode::SetA)).unwrap();
    assert_eq!(cmd_evaluate(&cfg, KeyMode::SetA).unwrap(), report);
    assert_eq!(std::fs::read(layout.metrics(KeyMode::SetA)).unwrap(), saved);
    assert!(cmd_plot_features(&cfg).unwrap().is_file());

    // The binary drives the same library calls.
    let mut args = vec!["evaluate".to_string(), "--mode".into(), "set-a".into()];
    args.extend(small_overrides(dir.path()));
    let out = Command::new(env!("CARGO_BIN_EXE_ivfg")).args(&args).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["provenance"]["config_hash"], serde_json::json!(cfg.hash()));
    assert_eq!(pre.checksums, ivfg::backends::BackendBundle::load(&layout.backends()).unwrap().checksums());

    let table = ablation_table(&[]);
    assert!(table.starts_with("run\tprotection\tdiversity\teer_same_key\teer_different_keys\tfid"));
}
