use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const FAST: &[&str] = &[
    "--set", "data.pretrain_per_class=20",
    "--set", "data.test_per_class=3",
    "--set", "pretrain.epochs=10",
    "--set", "sapt.epochs=1",
    "--set", "aug.n_views=5",
    "--set", "stss.top_r=2",
    "--set", "stss.m_perturb=2",
    "--set", "separability.n=30",
    "--set", "landscape.resolution=3",
];

fn tlla(args: &[&str], out: &Path, env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tlla"));
    cmd.args(args).args(FAST).arg("--out").arg(out).env_remove("TLLA_SEED");
    if let Some(s) = env_seed {
        cmd.env("TLLA_SEED", s);
    }
    cmd.output().unwrap()
}

fn json_file(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn adapt_writes_artifacts_and_echoes_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlla(&["adapt", "--set", "stss.rho_prime=0.7", "--seed", "4"], dir.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["command"], "adapt");
    assert_eq!(summary["seed"], 4);
    let resolved = json_file(&dir.path().join("config.resolved.json"));
    assert_eq!(resolved["stss"]["rho_prime"], 0.7);
    assert_eq!(resolved["seed"], 4);
    let metrics = json_file(&dir.path().join("metrics.json"));
    assert_eq!(metrics["seed"], 4);
    assert_eq!(metrics["domains"].as_array().unwrap().len(), 5);
    for name in ["train_log.jsonl", "samples_source.jsonl", "samples_rot4.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let first = std::fs::read_to_string(dir.path().join("samples_rot1.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    for key in ["sample_id", "true_label", "final_prediction", "selected_indices", "scores"] {
        assert!(rec.get(key).is_some(), "{key}");
    }
}

#[test]
fn seed_comes_from_flag_then_env_then_default() {
    let dir = tempfile::tempdir().unwrap();
    let seed_of = |args: &[&str], env: Option<&str>| {
        let out = tlla(args, dir.path(), env);
        assert_eq!(out.status.code(), Some(0));
        serde_json::from_slice::<Value>(&out.stdout).unwrap()["seed"].clone()
    };
    assert_eq!(seed_of(&["gen-data"], None), 0);
    assert_eq!(seed_of(&["gen-data"], Some("17")), 17);
    assert_eq!(seed_of(&["gen-data", "--set", "seed=8"], Some("17")), 8);
    assert_eq!(seed_of(&["gen-data", "--seed", "2", "--set", "seed=8"], Some("17")), 2);
    let bad = tlla(&["gen-data"], dir.path(), Some("minus one"));
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(stderr_json(&bad)["error"], "InvalidConfig");
}

#[test]
fn gen_data_round_trips_through_the_loader() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tlla(&["gen-data", "--seed", "3"], dir.path(), None).status.code(), Some(0));
    let ds = tlla::datagen::load_csv(&dir.path().join("data/rot2.csv")).unwrap();
    assert_eq!(ds.len(), 30);
    assert_eq!(ds.spec.rot_theta, 0.6);
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlla(&["adapt", "--config", "/no/such/config.json"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["path"], "/no/such/config.json");
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_subcommand_and_bad_override_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlla(&["teleport"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "UsageError");
    let out = tlla(&["adapt", "--set", "stss.no_such_field=1"], dir.path(), None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "InvalidConfig");
}

#[test]
fn sweep_and_landscape_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlla(&["sweep", "--set", "sweep.values=[0.1,0.5]", "--set", "sweep.output=\"rho.csv\""], dir.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rho.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("param_value,domain,accuracy,mean_score\n"));

    let out = tlla(&["landscape", "--seed", "6"], dir.path(), None);
    assert_eq!(out.status.code(), Some(0));
    let grid = tlla::landscape::read_grid_csv(&dir.path().join("landscape_tuned_6.csv")).unwrap();
    assert_eq!(grid.len(), 9);
}

#[test]
fn tuned_checkpoint_feeds_later_runs() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tlla(&["pretrain"], dir.path(), None).status.code(), Some(0));
    let ck = dir.path().join("checkpoint.json");
    let loaded = tlla::clipette::load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.pretrained.model.sizes.k_classes, 10);
    let other = tempfile::tempdir().unwrap();
    let arg = format!("checkpoint=\"{}\"", ck.display());
    let out = tlla(&["tune", "--set", &arg], other.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(other.path().join("tuned_checkpoint.json").exists());
    assert!(!other.path().join("checkpoint.json").exists());
}

#[test]
fn help_and_version_exit_cleanly() {
    for flag in ["--help", "--version"] {
        let out = Command::new(env!("CARGO_BIN_EXE_tlla")).arg(flag).output().unwrap();
        assert_eq!(out.status.code(), Some(0));
        assert!(!out.stdout.is_empty());
    }
}
