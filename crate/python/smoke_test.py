"""Smoke test for the hapo_lab extension.

Build and install first:
    pip install --no-build-isolation ./crates/python
then run:
    python3 python/smoke_test.py
"""

import math

import hapo_lab


def main():
    task = hapo_lab.lock_task(4, 4, 2, n_solutions=1, seed=3)
    assert task.vocab_size == 4 and task.max_len == 2
    demo = task.teacher_demo(0)
    assert task.verify(0, demo) == 1

    assert hapo_lab.confidence(3, 4) == 4 / 6
    assert hapo_lab.success_threshold(0.8, 8) == 7.0

    policy = hapo_lab.Policy(task)
    assert math.isclose(policy.logp(0, [], 1), -math.log(4))
    assert math.isclose(sum(policy.probs(0, [2])), 1.0)
    rollouts = policy.sample(task, 0, n=50, seed=1)
    assert len(rollouts) == 50 and all(len(t) == 2 for t, _ in rollouts)
    assert rollouts == policy.sample(task, 0, n=50, seed=1)

    run = hapo_lab.train("hapo", task, steps=200, seed=0, batch_prompts=4)
    assert len(run["mean_reward"]) == 200
    assert run["intervention_rate"][0] > 0
    assert sum(run["mean_reward"][-20:]) / 20 > sum(run["mean_reward"][:20]) / 20
    trained = run["policy"]
    assert trained.sequence_logp(0, demo) > policy.sequence_logp(0, demo)

    report = hapo_lab.check_hoeffding([8] * 90 + [6] * 10, 8, 0.9, 0.8)
    assert report["k_gamma"] == 7.0
    assert math.isclose(report["empirical_frequency"], 0.1)
    assert report["passed"]

    try:
        hapo_lab.train("nope", task)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method accepted")

    print("hapo_lab smoke test passed")


if __name__ == "__main__":
    main()
