import json
import os

import numpy as np
import pytest
import torch

from generator import builtin_task
from rl_trainer import (
    ActorCritic,
    CheckpointError,
    LayoutMismatchError,
    RunningMeanStd,
    TrainConfig,
    collect_component_stats,
    evaluate,
    gae_advantages,
    init_policy,
    load_policy,
    policy_act,
    ppo_loss,
    render_component_table,
    save_policy,
    step_reward,
    trace_steps,
    train,
)
from simulator import ScriptedController, SimConfig, builtin_ground_truth, builtin_scene, random_policy, reset
from task_dsl import ContractViolation, RewardComponent, RewardProgram, SuccessProgram, parse_expr

RUN_SLOW_TESTS = os.getenv("RUN_SLOW_TESTS", "").strip().lower() in {"1", "true", "yes"}
slow = pytest.mark.skipif(not RUN_SLOW_TESTS, reason="Set RUN_SLOW_TESTS=1 to run training benchmarks.")


def _lift():
    scene = builtin_scene("lift")
    return builtin_task("lift", scene), scene


def _reward(text, weight=1.0, penalty=0.0):
    return RewardProgram((RewardComponent("r", parse_expr(text), weight),), penalty)


def _tiny_config(**kw):
    base = dict(hidden=(16,), rollout_length=8, total_env_steps=64, epochs_per_update=2, minibatches=2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------
# Config
# ---------------------------
def test_train_config_defaults_and_validation():
    cfg = TrainConfig()
    assert cfg.lambda_success == 100.0
    assert (cfg.gamma, cfg.gae_lambda, cfg.clip_ratio) == (0.99, 0.95, 0.2)
    assert (cfg.epochs_per_update, cfg.minibatches, cfg.rollout_length) == (5, 4, 32)
    assert (cfg.eval_episodes, cfg.eval_seeds) == (10, 3)
    assert cfg.hidden == (256, 256)
    with pytest.raises(ValueError):
        TrainConfig(lambda_success=-1)
    with pytest.raises(ValueError):
        TrainConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig(clip_ratio=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1e-3})
    assert TrainConfig.from_dict(TrainConfig(seed=9).to_dict()) == TrainConfig(seed=9)


# ---------------------------
# Rewards
# ---------------------------
def test_success_bonus_is_lambda_times_indicator():
    task, scene = _lift()
    task = task.with_reward(_reward("1.0", 0.3, 0.01)).with_success(SuccessProgram(parse_expr("1.0 < 2.0")))
    states = reset(task.reset, scene, SimConfig(num_envs=3), seed=0)
    r, comps, ok = step_reward(task, np.zeros((3, 7)), states, 100.0)
    assert r == pytest.approx([100.29] * 3)
    assert ok.all()
    assert comps["total_reward"] == pytest.approx([0.29] * 3)


def test_trace_decomposition_is_exact():
    task, scene = _lift()
    sim = SimConfig(num_envs=4)
    trace = trace_steps(ScriptedController("lift", sim), task, scene, sim, sim.horizon, seed=1, lambda_success=100.0)
    names = sorted(task.reward.names)
    total = np.zeros_like(trace.training_reward)
    for n in names:
        total = total + trace.components[n]
    total = total - trace.components["step_penalty"]
    assert np.array_equal(total, trace.components["total_reward"])
    assert np.array_equal(trace.components["total_reward"] + 100.0 * trace.success, trace.training_reward)
    assert trace.success.any()


# ---------------------------
# GAE
# ---------------------------
def _gae_oracle(r, v, d, gamma, lam, last):
    T = len(r)
    out = np.zeros(T)
    for t in range(T):
        coef, acc = 1.0, 0.0
        for k in range(t, T):
            nv = last if k == T - 1 else v[k + 1]
            delta = r[k] + gamma * nv * (1 - d[k]) - v[k]
            acc += coef * delta
            if d[k]:
                break
            coef *= gamma * lam
        out[t] = acc
    return out


def test_gae_lambda_zero_is_td_residual():
    r = np.array([1.0, 0.5, -0.2])
    v = np.array([0.3, 0.1, 0.7])
    adv = gae_advantages(r, v, np.zeros(3), 0.9, 0.0, last_value=np.array(0.4))
    expected = [1.0 + 0.9 * 0.1 - 0.3, 0.5 + 0.9 * 0.7 - 0.1, -0.2 + 0.9 * 0.4 - 0.7]
    assert adv == pytest.approx(expected, abs=1e-12)


def test_gae_full_lambda_is_reward_to_go():
    r = np.array([1.0, 2.0, 3.0, 4.0])
    adv = gae_advantages(r, np.zeros(4), np.zeros(4), 1.0, 1.0)
    assert adv.tolist() == [10.0, 9.0, 7.0, 4.0]


def test_gae_matches_brute_force_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(200):
        T = int(rng.integers(1, 101))
        r, v = rng.normal(size=T), rng.normal(size=T)
        d = (rng.random(T) < 0.05).astype(float)
        last = float(rng.normal())
        gamma, lam = float(rng.uniform(0.8, 1.0)), float(rng.uniform(0.0, 1.0))
        got = gae_advantages(r, v, d, gamma, lam, last_value=np.array(last))
        assert np.allclose(got, _gae_oracle(r, v, d, gamma, lam, last), rtol=0, atol=1e-8)


def test_gae_is_batched_along_trailing_axis():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(20, 3)), rng.normal(size=(20, 3))
    d = np.zeros((20, 3))
    d[9] = 1
    batch = gae_advantages(r, v, d, 0.99, 0.95, last_value=np.zeros(3))
    for col in range(3):
        assert np.allclose(batch[:, col], _gae_oracle(r[:, col], v[:, col], d[:, col], 0.99, 0.95, 0.0), atol=1e-12)


# ---------------------------
# PPO surrogate
# ---------------------------
def _frozen_batch(model, n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    obs = torch.randn(n, 3, generator=g, dtype=torch.float64)
    actions = torch.randn(n, 7, generator=g, dtype=torch.float64)
    with torch.no_grad():
        dist, _ = model.dist(obs)
        logp = dist.log_prob(actions).sum(-1)
    old_logp = logp + 0.05 * (torch.rand(n, generator=g, dtype=torch.float64) - 0.5)
    adv = torch.randn(n, generator=g, dtype=torch.float64)
    returns = torch.randn(n, generator=g, dtype=torch.float64)
    return obs, actions, old_logp, adv, returns


def test_ppo_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = ActorCritic(3, (8, 8), dtype=torch.float64)
    with torch.no_grad():
        model.log_std.copy_(torch.tensor([0.1, -0.2, 0.0, 0.3, -0.1, 0.2, 0.05], dtype=torch.float64))
    batch = _frozen_batch(model)
    loss, _ = ppo_loss(model, *batch, clip_ratio=0.2)
    model.zero_grad()
    loss.backward()
    params = [model.mean.weight, model.log_std, model.trunk[0].weight, model.value.bias]
    eps = 1e-6
    for p in params:
        analytic = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        for i in range(min(5, flat.numel())):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(ppo_loss(model, *batch, clip_ratio=0.2)[0])
            flat[i] = orig - eps
            down = float(ppo_loss(model, *batch, clip_ratio=0.2)[0])
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(numeric - float(analytic[i])) <= 1e-7 + 1e-4 * abs(numeric)


def test_zero_advantage_gives_zero_policy_gradient():
    torch.manual_seed(0)
    model = ActorCritic(3, (8, 8), dtype=torch.float64)
    obs, actions, old_logp, _, _ = _frozen_batch(model)
    with torch.no_grad():
        _, value = model.dist(obs)
    loss, _ = ppo_loss(model, obs, actions, old_logp, torch.zeros(6, dtype=torch.float64), value.clone(), clip_ratio=0.2)
    model.zero_grad()
    loss.backward()
    for p in model.parameters():
        assert p.grad is None or float(p.grad.abs().max()) == 0.0


# ---------------------------
# Policy
# ---------------------------
def test_policy_act_modes_and_width_check():
    params = init_policy(5, hidden=(8,), seed=0)
    with torch.no_grad():
        for p in params.model.mean.parameters():
            p.zero_()
    obs = np.random.default_rng(0).normal(size=(4, 5))
    assert np.array_equal(policy_act(params, obs), np.zeros((4, 7)))
    assert np.array_equal(policy_act(params, obs), policy_act(params, obs))
    with pytest.raises(ContractViolation):
        policy_act(params, np.zeros((4, 6)))

    n = 100_000
    draws = policy_act(params, np.zeros((n, 5)), deterministic=False, rng=np.random.default_rng(1))
    assert np.all(np.abs(draws.mean(axis=0)) < 4.0 / np.sqrt(n))
    assert np.allclose(draws.std(axis=0), 1.0, atol=0.02)


def test_running_mean_std_merges_batches():
    rng = np.random.default_rng(2)
    x = rng.normal(3.0, 2.0, size=(1000, 4))
    rms = RunningMeanStd(4, eps=1e-12)
    rms.update(x[:300])
    rms.update(x[300:])
    assert np.allclose(rms.mean, x.mean(axis=0), atol=1e-9)
    assert np.allclose(rms.var, x.var(axis=0), atol=1e-6)
    assert np.abs(rms.normalize(x)).max() <= 10.0


def test_checkpoint_round_trip_and_layout_guard(tmp_path):
    params = init_policy(20, hidden=(16, 16), seed=4)
    params.normalizer.update(np.random.default_rng(0).normal(size=(50, 20)))
    path = save_policy(params, tmp_path / "policy.bin")
    meta = json.loads((tmp_path / "policy.json").read_text(encoding="utf-8"))
    assert meta["obs_dim"] == 20 and meta["action_dim"] == 7 and meta["hidden"] == [16, 16]
    back = load_policy(path)
    obs = np.random.default_rng(1).normal(size=(3, 20))
    assert np.array_equal(policy_act(back, obs), policy_act(params, obs))

    meta["obs_layout"] = "other-layout"
    (tmp_path / "policy.json").write_text(json.dumps(meta), encoding="utf-8")
    with pytest.raises(LayoutMismatchError):
        load_policy(path)
    (tmp_path / "policy.json").unlink()
    with pytest.raises(CheckpointError):
        load_policy(path)


# ---------------------------
# Component statistics
# ---------------------------
def test_component_stats_split_by_outcome():
    streams = {"reach": np.full((4, 10), 0.1)}
    stats = collect_component_stats(streams, np.array([True, False, True, False]))
    st = stats["reach"]
    assert st.success.mean == pytest.approx(1.0) and st.failure.mean == pytest.approx(1.0)
    assert st.success_exceeds is False
    assert st.spread() == pytest.approx(0.0)

    none_ok = collect_component_stats({"reach": np.array([0.5, 0.2])}, np.array([False, False]))["reach"]
    assert none_ok.success is None and none_ok.success_exceeds is None
    assert none_ok.failure.min == 0.2 and none_ok.failure.last == 0.2

    table = render_component_table({"reach": st, "grasp": none_ok})
    assert "| reach | 1.0000 |" in table
    assert "| grasp | n/a | n/a | n/a | n/a | 0.2000 | 0.5000 |" in table


def test_component_stats_reject_mismatched_lengths():
    with pytest.raises(ValueError):
        collect_component_stats({"a": np.zeros(3)}, np.zeros(2, dtype=bool))


# ---------------------------
# Training / evaluation
# ---------------------------
def test_zero_budget_returns_initial_policy():
    task, scene = _lift()
    policy, logs = train(task, scene, TrainConfig(total_env_steps=0, hidden=(8,)), SimConfig(num_envs=2))
    assert logs.updates == [] and not logs.diverged
    fresh = init_policy(task.observation_dim, (8,), seed=0)
    for a, b in zip(policy.model.parameters(), fresh.model.parameters()):
        assert torch.equal(a, b)


def test_tiny_training_run_is_deterministic_and_logged(tmp_path):
    task, scene = _lift()
    sim = SimConfig(num_envs=4, horizon=8)
    p1, logs1 = train(task, scene, _tiny_config(), sim, log_path=tmp_path / "logs.jsonl")
    p2, logs2 = train(task, scene, _tiny_config(), sim)
    assert len(logs1.updates) == 2
    assert logs1.to_dict() == logs2.to_dict()
    for a, b in zip(p1.model.parameters(), p2.model.parameters()):
        assert torch.equal(a, b)
    assert set(logs1.component_stats) == set(task.reward.names) | {"step_penalty", "total_reward"}
    assert logs1.episodes == 8
    assert all(0.0 <= r <= 1.0 for r in logs1.success_curve)
    lines = (tmp_path / "logs.jsonl").read_text(encoding="utf-8").splitlines()
    assert [json.loads(l)["update"] for l in lines] == [0, 1]


def test_non_finite_loss_marks_run_diverged():
    task, scene = _lift()
    task = task.with_reward(_reward("exp(100.0)", 1e10))
    _, logs = train(task, scene, _tiny_config(), SimConfig(num_envs=4, horizon=8))
    assert logs.diverged
    assert logs.final_success_rate == 0.0


def test_evaluate_protocol_shape_and_always_true():
    task, scene = _lift()
    cfg = TrainConfig(eval_episodes=10, eval_seeds=3)
    sim = SimConfig(num_envs=10, horizon=5)
    always = SuccessProgram(parse_expr("1.0 < 2.0"))
    rep = evaluate(random_policy(0), always, task, scene, cfg, sim)
    assert rep.mean_success == 1.0
    assert len(rep.per_seed) == 3 and rep.episodes_per_seed == 10
    assert [len(o) for o in rep.outcomes] == [10, 10, 10]


def test_evaluate_is_invariant_to_batching():
    task, scene = _lift()
    cfg = TrainConfig(eval_episodes=6, eval_seeds=2)
    sim = SimConfig(num_envs=6)
    gt = builtin_ground_truth("lift")
    ctrl = ScriptedController("lift", sim)
    whole = evaluate(ctrl, gt, task, scene, cfg, sim)
    chunked = evaluate(ctrl, gt, task, scene, cfg, sim, batch_size=4)
    assert whole.outcomes == chunked.outcomes
    assert whole.mean_success == pytest.approx(np.mean(whole.per_seed))
    assert whole.mean_success == 1.0


def test_random_policy_rarely_lifts():
    task, scene = _lift()
    rep = evaluate(random_policy(7), builtin_ground_truth("lift"), task, scene, TrainConfig(), SimConfig(num_envs=10, horizon=30))
    assert rep.mean_success < 0.1


def test_final_step_success_counts_last_state_only():
    task, scene = _lift()
    sim = SimConfig(num_envs=4, horizon=10)
    first_steps = SuccessProgram(parse_expr("obj.pos[2] > -1.0 & gripper.width > 0.5"))

    def close_late(states, obs):
        a = np.zeros((states.batch_size, 7))
        a[:, 6] = np.where(states.step_count >= 5, 1.0, -1.0)
        return a

    any_step = evaluate(close_late, first_steps, task, scene, TrainConfig(eval_episodes=4, eval_seeds=1), sim)
    last_only = evaluate(close_late, first_steps, task, scene, TrainConfig(eval_episodes=4, eval_seeds=1, final_step_success=True), sim)
    assert any_step.mean_success == 1.0
    assert last_only.mean_success == 0.0


@slow
def test_one_step_bandit_return_improves():
    scene = builtin_scene("reach")
    task = builtin_task("reach", scene).with_reward(_reward("0.0 - norm(eef.pos - obj.pos)"))
    task = task.with_success(SuccessProgram(parse_expr("1.0 > 2.0")))
    sim = SimConfig(num_envs=64, horizon=1)
    cfg = TrainConfig(hidden=(64, 64), rollout_length=8, total_env_steps=50 * 8 * 64, learning_rate=1e-3, seed=0)
    _, logs = train(task, scene, cfg, sim)
    returns = [u.mean_return for u in logs.updates]
    assert len(returns) == 50
    assert np.mean(returns[-5:]) > np.mean(returns[:5])
