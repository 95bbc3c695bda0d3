//! Run logs audited against raw trajectories, and the lock task's base rate.

use hapo_core::baselines::Method;
use hapo_core::env::make_lock_task;
use hapo_core::metrics::{read_metrics_csv, recompute_from_dump};
use hapo_core::policy::{sample_trajectory, PolicyParams};
use hapo_core::trainer::{run, RunOptions, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn step_aggregates_match_trajectory_dump() {
    let task = make_lock_task(3, 4, 3, 2, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        steps: 60,
        batch_prompts: 4,
        group_size: 6,
        log_trajectories: true,
        ..TrainConfig::default()
    };
    let opts = RunOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..RunOptions::default()
    };
    run(&Method::Hapo, &task, &cfg, &opts).unwrap();
    let logged = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    let recomputed = recompute_from_dump(&dir.path().join("trajectories.jsonl")).unwrap();
    assert_eq!(logged.len(), recomputed.len());
    let mut injected = 0;
    for (m, (step, reward, len, inj)) in logged.iter().zip(&recomputed) {
        assert_eq!(m.step, *step);
        assert!((m.mean_reward - reward).abs() < 1e-12, "step {step}");
        assert!((m.mean_gen_length - len).abs() < 1e-12, "step {step}");
        assert_eq!(m.teacher_injection_count, *inj);
        injected += inj;
    }
    assert!(injected > 0, "audit should cover injected groups");
}

#[test]
fn uniform_policy_hits_base_rate() {
    let (vocab, len, solutions) = (3u32, 4usize, 5usize);
    let task = make_lock_task(vocab, 2, len, solutions, 1).unwrap();
    let params = PolicyParams::for_task(&task, None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 100_000;
    let hits: u64 = (0..n)
        .map(|i| u64::from(sample_trajectory(&params, &task, (i % 2) as u32, &mut rng).unwrap().reward))
        .sum();
    let p = solutions as f64 / f64::from(vocab).powi(len as i32);
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let rate = hits as f64 / n as f64;
    assert!((rate - p).abs() < 3.0 * se, "rate {rate} vs {p} (se {se})");
}
