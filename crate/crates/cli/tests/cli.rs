//! End-to-end CLI tests: artifact contracts, exit codes, overrides, and
//! deterministic repeats, all against the built `rce` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rce() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rce"))
}

fn tiny_config() -> String {
    r#"
seed = 3

[train]
max_steps = 30
batch_size = 6
eval_interval = 15
early_stop_patience = 50
source_prototypes_per_class = 3
target_prototypes_per_class = 1

[augmentation]
kind = "crop_rotate"
views_per_set = 1

[data]
kind = "synth"
shots_per_class = 3
val_fraction = 0.5

[data.synth]
n_classes = 2
samples_per_class = 16
target_samples_per_class = 10
shift = { kind = "invert" }

[eval]
rule = { kind = "top_k", k = 1 }
fidelity_pairs_per_class = 50
"#
    .to_string()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

fn run_dirs(out: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(out)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with(prefix))
                })
                .collect()
        })
        .unwrap_or_default();
    v.sort();
    v
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_produces_run_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out_root = dir.path().join("runs");
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let dirs = run_dirs(&out_root, "train-");
    assert_eq!(dirs.len(), 1);
    for artifact in [
        "config.resolved.toml",
        "metrics.jsonl",
        "evals.jsonl",
        "best_model.ckpt",
        "codebook.rcb",
        "train_state.rcs",
        "summary.json",
    ] {
        assert!(dirs[0].join(artifact).is_file(), "missing {artifact}");
    }
    // Metrics log has one record per step with the breakdown fields.
    let metrics = std::fs::read_to_string(dirs[0].join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 30);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "lr", "pred", "rec", "ssl", "grnd", "fid", "total"] {
        assert!(first.get(key).is_some(), "metrics record lacks {key}");
    }
}

#[test]
fn unknown_config_key_is_config_error_without_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{}\nnot_a_key = 1\n", tiny_config()));
    let out_root = dir.path().join("runs");
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 2);
    assert!(!out_root.exists(), "config error must not create a run dir");
}

#[test]
fn overrides_are_applied_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out_root = dir.path().join("runs");
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "train.max_steps=10", "--set", "seed=9"])
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let dirs = run_dirs(&out_root, "train-");
    let resolved = std::fs::read_to_string(dirs[0].join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("max_steps = 10"), "{resolved}");
    assert!(resolved.contains("seed = 9"), "{resolved}");
    let metrics = std::fs::read_to_string(dirs[0].join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 10);
    let overrides = std::fs::read_to_string(dirs[0].join("overrides.txt")).unwrap();
    assert!(overrides.contains("train.max_steps=10"));
}

#[test]
fn eval_rejects_mismatched_checkpoint_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out_root = dir.path().join("runs");
    // Train a 2-class model.
    let cfg = write_config(dir.path(), &tiny_config());
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let ckpt = run_dirs(&out_root, "train-")[0].join("best_model.ckpt");

    // Evaluate it against a 3-class synthetic task: config error (exit 2).
    let eval_cfg = write_config(
        &dir.path().join("."),
        &format!(
            "{}\n",
            tiny_config()
                .replace("n_classes = 2", "n_classes = 3")
                .replace("[eval]", "[eval]\ncheckpoint = 'CKPT'")
                .replace("CKPT", &ckpt.display().to_string().replace('\\', "/"))
        ),
    );
    let out = rce()
        .args(["eval", "--config"])
        .arg(&eval_cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 2);

    // Matching task evaluates fine.
    let good_cfg = write_config(
        dir.path(),
        &tiny_config()
            .replace("[eval]", "[eval]\ncheckpoint = 'CKPT'")
            .replace("CKPT", &ckpt.display().to_string().replace('\\', "/")),
    );
    let out = rce()
        .args(["eval", "--config"])
        .arg(&good_cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let eval_dir = &run_dirs(&out_root, "eval-")[0];
    let results = std::fs::read_to_string(eval_dir.join("results.json")).unwrap();
    assert!(results.contains("accuracy"));

    // Fidelity and explain consume the same checkpoint.
    let out = rce()
        .args(["fidelity", "--config"])
        .arg(&good_cfg)
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let out = rce()
        .args(["explain", "--config"])
        .arg(&good_cfg)
        .args(["--set", "eval.write_grid=true", "--set", "eval.top_k=3"])
        .arg("--out")
        .arg(&out_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    let explain_dir = &run_dirs(&out_root, "explain-")[0];
    assert!(explain_dir.join("explanation.json").is_file());
    assert!(explain_dir.join("prototypes.png").is_file());
}

#[test]
fn missing_idx_file_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{}\n[data.idx]\nsource_images = \"/nonexistent/i.idx\"\nsource_labels = \"/nonexistent/l.idx\"\ntarget_images = \"/nonexistent/ti.idx\"\ntarget_labels = \"/nonexistent/tl.idx\"\n",
        tiny_config().replace("kind = \"synth\"", "kind = \"idx\"")
    );
    let cfg = write_config(dir.path(), &body);
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert_code(&out, 3);
}

#[test]
fn ablate_covers_all_modes_and_repeats_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out_root = dir.path().join("runs");
    for _ in 0..2 {
        let out = rce()
            .args(["ablate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_root)
            .output()
            .unwrap();
        assert_code(&out, 0);
    }
    let dirs = run_dirs(&out_root, "ablate-");
    assert_eq!(dirs.len(), 2);
    let t1 = std::fs::read_to_string(dirs[0].join("ablation_results.json")).unwrap();
    let t2 = std::fs::read_to_string(dirs[1].join("ablation_results.json")).unwrap();
    assert_eq!(t1, t2, "repeated ablation must be identical");
    let table = std::fs::read_to_string(dirs[0].join("ablation_table.txt")).unwrap();
    for mode in ["rce", "rcepcg", "rcepcgccl"] {
        assert!(table.contains(mode), "{table}");
    }
}

#[test]
fn out_root_env_variable_is_honored() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let env_root = dir.path().join("env-runs");
    let out = rce()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--set", "train.max_steps=5"])
        .env("RCE_OUT_ROOT", &env_root)
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert_eq!(run_dirs(&env_root, "train-").len(), 1);
}
