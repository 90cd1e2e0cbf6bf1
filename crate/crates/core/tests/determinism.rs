use std::fs;

use cegppo_core::objectives::ObjectiveSpec;
use cegppo_core::policy::Checkpoint;
use cegppo_core::trainer::{train, RunConfig, CSV_COLUMNS};

fn run_into(dir: &std::path::Path, config: &RunConfig) -> (Vec<u8>, Checkpoint) {
    let c = RunConfig {
        output_dir: Some(dir.to_path_buf()),
        ..config.clone()
    };
    train(&c).unwrap();
    (
        fs::read(dir.join("metrics.csv")).unwrap(),
        Checkpoint::load(&dir.join("checkpoint.json")).unwrap(),
    )
}

#[test]
fn same_seed_same_bytes_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let base = RunConfig {
        total_steps: 15,
        prompts_per_batch: 8,
        objective: ObjectiveSpec::dapo(),
        dynamic_sampling: true,
        seed: 42,
        ..RunConfig::default()
    };
    let (a, ca) = run_into(&tmp.path().join("a"), &RunConfig { threads: 1, ..base.clone() });
    let (b, cb) = run_into(&tmp.path().join("b"), &RunConfig { threads: 3, ..base.clone() });
    assert_eq!(a, b);
    assert_eq!(ca, cb);

    let (c, _) = run_into(&tmp.path().join("c"), &RunConfig { seed: 43, ..base });
    assert_ne!(a, c);
}

#[test]
fn csv_header_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        total_steps: 3,
        prompts_per_batch: 4,
        log_rollouts: true,
        ..RunConfig::default()
    };
    let (csv, checkpoint) = run_into(tmp.path(), &config);
    let text = String::from_utf8(csv).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header, CSV_COLUMNS.join(","));
    assert_eq!(text.lines().count(), 4);
    assert_eq!(checkpoint.step, 3);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    let reloaded = RunConfig::load(&tmp.path().join("config.json")).unwrap();
    assert_eq!(manifest["config_hash"], reloaded.hash().unwrap());
    assert_eq!(manifest["seed"], 0);
    assert!(manifest["halted"].is_null());

    let log = fs::read_to_string(tmp.path().join("rollouts.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3 * 4 * 8);
}

#[test]
fn stability_alarm_keeps_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let config = RunConfig {
        total_steps: 50,
        prompts_per_batch: 4,
        learning_rate: 1e308,
        output_dir: Some(tmp.path().to_path_buf()),
        ..RunConfig::default()
    };
    let err = train(&config).unwrap_err();
    assert!(matches!(err, cegppo_core::LabError::StabilityAlarm { .. }), "{err}");
    let checkpoint = Checkpoint::load(&tmp.path().join("checkpoint.json")).unwrap();
    let policy = checkpoint.to_policy().unwrap();
    assert!(policy.logits().iter().all(|z| z.is_finite()));
    let manifest = fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("stability alarm"));
}
