//! End-to-end runs of the `hapo-lab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hapo-lab"))
        .args(args)
        .env("HAPO_LAB_OUT", out)
        .current_dir(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

const SMALL: &[&str] = &[
    "--set",
    "task.kind=lock",
    "--set",
    "task.vocab_size=3",
    "--set",
    "task.seq_len=2",
    "--set",
    "task.n_prompts=2",
    "--set",
    "train.steps=20",
    "--set",
    "train.batch_prompts=2",
    "--set",
    "train.group_size=4",
    "--set",
    "eval.n_samples=16",
];

fn with(base: &[&'static str], extra: &[&'static str]) -> Vec<&'static str> {
    base.iter().chain(extra).copied().collect()
}

#[test]
fn train_writes_run_directory_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(&["train"], &with(SMALL, &["--set", "train.seed=7", "--set", "output_dir=r"]));
    let o = lab(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = tmp.path().join("r");
    let resolved = std::fs::read_to_string(dir.join("config.resolved.toml")).unwrap();
    let parsed: toml::Table = resolved.parse().unwrap();
    assert_eq!(parsed["train"]["seed"].as_integer(), Some(7));
    assert_eq!(parsed["train"]["steps"].as_integer(), Some(20));
    for f in ["metrics.csv", "gates.csv", "task.json", "eval.json", "checkpoint/state.json", "curves"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let rows = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().filter(|l| !l.starts_with('#')).count(), 21);
}

#[test]
fn missing_task_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = lab(tmp.path(), &["train", "--set", "task.kind=file", "--set", "task.path=nope.json"]);
    assert_eq!(code(&o), 2);
    let o = lab(tmp.path(), &["train", "--set", "train.bogus=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn numeric_blow_up_aborts_with_report() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(
        &["train"],
        &with(
            SMALL,
            &[
                "--set",
                "output_dir=boom",
                "--set",
                "train.optimizer={kind=\"adam\", beta1=0.9, beta2=0.999, eps=1e-8}",
                "--set",
                "train.lr={kind=\"constant\", eta0=1e308}",
            ],
        ),
    );
    let o = lab(tmp.path(), &args);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("boom/abort.json")).unwrap()).unwrap();
    assert!(report["step"].as_u64().is_some());
}

#[test]
fn compare_skips_finished_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(
        &["compare"],
        &with(SMALL, &["--set", "output_dir=cmp", "--set", "compare.seeds=[0, 1]"]),
    );
    let o = lab(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cmp = tmp.path().join("cmp");
    let cells: Vec<_> = ["grpo", "sft", "static_mix_0.5", "static_mix", "static_mix_2", "hapo"]
        .iter()
        .flat_map(|m| (0..2).map(move |s| format!("{m}/seed_{s}")))
        .collect();
    for c in &cells {
        assert!(cmp.join(c).join("summary.json").exists(), "{c}");
    }
    let kept = cmp.join("hapo/seed_0/metrics.csv");
    let before = std::fs::metadata(&kept).unwrap().modified().unwrap();
    std::fs::remove_dir_all(cmp.join("grpo/seed_1")).unwrap();
    let o = lab(tmp.path(), &args);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::metadata(&kept).unwrap().modified().unwrap(), before);
    assert!(cmp.join("grpo/seed_1/summary.json").exists());
    assert!(cmp.join("separation.json").exists());
}

#[test]
fn check_bounds_catches_mutated_confidence() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = ["check-bounds", "--set", "bounds.grid.group_sizes=[8, 16]", "--set", "bounds.grid.n_groups=2000"];
    let o = lab(tmp.path(), &grid);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(tmp.path().join("runs/default/bounds_report.json").exists());
    let o = lab(tmp.path(), &with(&grid, &["--mutate-confidence"]));
    assert_eq!(code(&o), 3);
}

#[test]
fn gradcheck_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gradcheck", "--set", "gradcheck.instances=10", "--set", "output_dir=g"];
    assert_eq!(code(&lab(tmp.path(), &args)), 0);
    let a = std::fs::read(tmp.path().join("g/gradcheck_report.json")).unwrap();
    assert_eq!(code(&lab(tmp.path(), &args)), 0);
    let b = std::fs::read(tmp.path().join("g/gradcheck_report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_reads_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let args = with(&["train"], &with(SMALL, &["--set", "output_dir=e"]));
    assert_eq!(code(&lab(tmp.path(), &args)), 0);
    let args = with(&["eval"], &with(SMALL, &["--set", "output_dir=e"]));
    let o = lab(tmp.path(), &args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}
