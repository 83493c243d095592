import json

import numpy as np
import pytest

from simulator import (
    ACTION_DIM,
    FAMILIES,
    TARGET_FAMILIES,
    EnvStateBatch,
    EpisodeRecord,
    ScriptedController,
    SimConfig,
    UnknownFamilyError,
    builtin_ground_truth,
    builtin_scene,
    default_reset,
    dump_trajectories,
    is_terminal,
    load_trajectory,
    random_policy,
    random_states,
    read_records,
    reset,
    step,
    write_records,
)
from task_dsl import ContractViolation, Placement, ResetSpec, eval_success, feature_table, print_expr


def _fixed(name="obj", x=0.4, y=0.0, yaw=0.0):
    return ResetSpec((Placement(name, "fixed", pos=(x, y), yaw=yaw),))


def _zeros(states):
    return np.zeros((states.batch_size, ACTION_DIM))


def _run(states, policy, cfg, steps):
    history = [states]
    for _ in range(steps):
        states = step(states, policy(states), cfg)
        history.append(states)
    return history


def _assert_same(a: EnvStateBatch, b: EnvStateBatch, skip=()):
    for name in ("eef_pos", "eef_euler", "eef_vel", "gripper_width", "obj_pos", "obj_quat", "obj_vel", "obj_size", "held", "upright"):
        if name in skip:
            continue
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


# ---------------------------
# Config
# ---------------------------
def test_sim_config_defaults_and_validation():
    cfg = SimConfig()
    assert cfg.dt == pytest.approx(1 / 60)
    assert cfg.horizon == 300
    assert cfg.action_rotation_scale == 0.2
    with pytest.raises(ValueError):
        SimConfig(dt=0.0)
    with pytest.raises(ValueError):
        SimConfig(workspace=(0.5, 0.1, -0.3, 0.3, 0.0, 0.5))
    with pytest.raises(ValueError):
        SimConfig.from_dict({"horizon": 10, "warp": 2})
    assert SimConfig.from_dict(SimConfig(num_envs=8).to_dict()) == SimConfig(num_envs=8)


# ---------------------------
# Reset
# ---------------------------
def test_fixed_placement_gives_identical_envs():
    scene = builtin_scene("lift")
    s = reset(_fixed(), scene, SimConfig(num_envs=5), seed=1)
    assert np.all(s.obj_pos == s.obj_pos[0])
    assert s.obj_pos[0, 0].tolist() == [0.4, 0.0, 0.02]
    assert np.all(s.step_count == 0)


def test_uniform_placement_mean_over_many_envs():
    scene = builtin_scene("lift")
    spec = ResetSpec((Placement("obj", "uniform", (0.3, 0.5), (-0.1, 0.1)),))
    s = reset(spec, scene, SimConfig(num_envs=10_000), seed=42)
    x = s.obj_pos[:, 0, 0]
    assert abs(x.mean() - 0.4) < 0.01
    assert x.min() >= 0.3 and x.max() <= 0.5


def test_reset_is_deterministic_and_partition_independent():
    scene = builtin_scene("push_next_to")
    spec = default_reset("push_next_to")
    cfg = SimConfig(num_envs=8)
    a = reset(spec, scene, cfg, seed=7)
    b = reset(spec, scene, cfg, seed=7)
    _assert_same(a, b)
    part = reset(spec, scene, cfg, seed=7, env_ids=[4, 5, 6, 7])
    assert np.array_equal(part.obj_pos, a.obj_pos[4:])
    other = reset(spec, scene, cfg, seed=8)
    assert not np.array_equal(other.obj_pos, a.obj_pos)


def test_relative_placement_reads_anchor_and_rejects_unplaced_anchor():
    scene = builtin_scene("uncover")
    s = reset(default_reset("uncover"), scene, SimConfig(num_envs=4), seed=0)
    t, o = s.index("target"), s.index("obj")
    assert np.allclose(s.obj_pos[:, o, :2], s.obj_pos[:, t, :2])
    assert np.allclose(s.obj_pos[:, o, 2], 0.04 + 0.015)
    bad = ResetSpec(
        (
            Placement("obj", "relative", (0.0, 0.0), (0.0, 0.0), anchor="target"),
            Placement("target", "uniform", (0.3, 0.4), (0.0, 0.1)),
        )
    )
    with pytest.raises(ContractViolation):
        reset(bad, scene, SimConfig(num_envs=2), seed=0)


# ---------------------------
# Step
# ---------------------------
def test_zero_action_on_resting_objects_only_advances_step_count():
    cfg = SimConfig(num_envs=3)
    s0 = reset(default_reset("cover"), builtin_scene("cover"), cfg, seed=3)
    s1 = step(s0, _zeros(s0), cfg)
    _assert_same(s0, s1)
    assert s1.step_count.tolist() == [1, 1, 1]
    assert s0.step_count.tolist() == [0, 0, 0]


def test_ballistic_flight_matches_closed_form():
    cfg = SimConfig(num_envs=1)
    s = reset(_fixed(x=0.15, y=0.3), builtin_scene("lift"), cfg, seed=0)
    s.obj_pos[0, 0] = (0.15, 0.3, 0.5)
    s.obj_vel[0, 0] = (1.0, 0.0, 2.0)
    g = cfg.gravity
    for n in range(1, 31):
        s = step(s, _zeros(s), cfg)
        t = n * cfg.dt
        assert s.obj_pos[0, 0, 2] == pytest.approx(0.5 + 2.0 * t - 0.5 * g * t * t, abs=1e-6)
        assert s.obj_pos[0, 0, 0] == pytest.approx(0.15 + t, abs=1e-9)
        assert s.obj_vel[0, 0, 0] == 1.0


def test_horizon_terminates_episode():
    cfg = SimConfig(num_envs=2, horizon=300)
    s = reset(default_reset("reach"), builtin_scene("reach"), cfg, seed=0)
    for _ in range(300):
        assert not is_terminal(s, cfg).any()
        s = step(s, _zeros(s), cfg)
    assert is_terminal(s, cfg).all()
    with pytest.raises(ContractViolation):
        step(s, _zeros(s), cfg)


def test_actions_are_checked_and_clipped():
    cfg = SimConfig(num_envs=2)
    s = reset(default_reset("reach"), builtin_scene("reach"), cfg, seed=0)
    bad = _zeros(s)
    bad[1, 0] = np.nan
    with pytest.raises(ContractViolation) as e:
        step(s, bad, cfg)
    assert "env 1" in str(e.value)
    with pytest.raises(ContractViolation):
        step(s, np.zeros((2, 6)), cfg)
    big = _zeros(s)
    big[:, 0] = 5.0
    s1 = step(s, big, cfg)
    assert np.allclose(s1.eef_pos[:, 0] - s.eef_pos[:, 0], cfg.max_step_translation)


def test_rotation_command_uses_rotation_scale():
    cfg = SimConfig(num_envs=1)
    s = reset(default_reset("reach"), builtin_scene("reach"), cfg, seed=0)
    a = _zeros(s)
    a[0, 5] = 1.0
    s1 = step(s, a, cfg)
    assert s1.eef_euler[0, 2] == pytest.approx(cfg.max_step_rotation * cfg.action_rotation_scale)


def test_high_fast_push_topples_tall_box():
    cfg = SimConfig(num_envs=1)
    s = reset(_fixed(x=0.4, y=0.0), builtin_scene("tip_over"), cfg, seed=0)
    s.eef_pos[0] = (0.4 - 0.045, 0.0, 0.85 * 0.12)
    a = _zeros(s)
    a[0, 0] = 1.0
    s1 = step(s, a, cfg)
    assert s1.upright[0, 0] == 0.0
    assert s1.obj_pos[0, 0, 0] > 0.4
    assert np.linalg.norm(s1.obj_quat[0, 0]) == pytest.approx(1.0, abs=1e-9)
    assert s1.obj_pos[0, 0, 2] == pytest.approx(0.015)
    assert s1.obj_size[0, 0].tolist() == [0.03, 0.03, 0.12]


def test_low_push_slides_without_toppling():
    cfg = SimConfig(num_envs=1)
    s = reset(_fixed(x=0.4, y=0.0), builtin_scene("tip_over"), cfg, seed=0)
    s.eef_pos[0] = (0.4 - 0.045, 0.0, 0.2 * 0.12)
    a = _zeros(s)
    a[0, 0] = 1.0
    s1 = step(s, a, cfg)
    assert s1.upright[0, 0] == 1.0
    assert s1.obj_pos[0, 0, 0] > 0.4
    assert s1.obj_vel[0, 0, 0] > 0.0


def test_step_is_partition_independent():
    cfg = SimConfig(num_envs=6)
    s = reset(default_reset("push_next_to"), builtin_scene("push_next_to"), cfg, seed=11)
    policy = random_policy(5)
    full = _run(s, policy, cfg, 20)[-1]
    part = _run(s.take([1, 3, 5]), policy, cfg, 20)[-1]
    assert np.array_equal(part.obj_pos, full.obj_pos[[1, 3, 5]])
    assert np.array_equal(part.eef_pos, full.eef_pos[[1, 3, 5]])


def test_random_actions_keep_objects_above_table_and_one_held():
    cfg = SimConfig(num_envs=384)
    scene = builtin_scene("push_next_to")
    s = reset(default_reset("push_next_to"), scene, cfg, seed=2)
    policy = random_policy(9)
    for _ in range(cfg.horizon):
        s = step(s, policy(s), cfg)
        floor = s.table_height + s.obj_extent[:, :, 2] / 2 - 1e-6
        assert (s.obj_pos[:, :, 2] >= floor).all()
        assert (s.held.sum(axis=1) <= 1).all()
        q = np.linalg.norm(s.obj_quat, axis=2)
        assert np.abs(q - 1.0).max() < 1e-5


# ---------------------------
# Features / families
# ---------------------------
def test_features_expose_the_closed_namespace():
    scene = builtin_scene("push_next_to")
    s = reset(default_reset("push_next_to"), scene, SimConfig(num_envs=4), seed=0)
    binding = s.features()
    assert set(binding) == set(feature_table(scene.object_names).features)
    for obj in scene.objects:
        assert np.all(binding[f"{obj.name}.size"] == np.array(obj.size))
    assert "obj.init_pos" in s.features(include_evaluation=True)


def test_held_flag_tracks_grasp_rule():
    cfg = SimConfig(num_envs=4)
    scene = builtin_scene("grasp")
    s = reset(default_reset("grasp"), scene, cfg, seed=0)
    ctrl = ScriptedController("grasp", cfg)
    history = _run(s, ctrl, cfg, 150)
    was_held = np.zeros(4, dtype=bool)
    for prev, cur in zip(history, history[1:]):
        held = cur.held[:, 0] > 0.5
        assert np.all(cur.gripper_width[held] == 0.0)
        newly = held & ~(prev.held[:, 0] > 0.5)
        if newly.any():
            dist = np.linalg.norm(prev.obj_pos[newly, 0] - cur.eef_pos[newly], axis=1)
            assert (dist < 0.02 + cfg.grasp_margin + 1e-9).all()
        was_held |= held
    assert was_held.all()
    assert eval_success(builtin_ground_truth("grasp"), history[-1]).all()


def test_grasp_and_release_never_apply_in_the_same_step():
    cfg = SimConfig(num_envs=4)
    s = reset(_fixed(), builtin_scene("grasp"), cfg, seed=0)
    s.eef_pos[:] = s.obj_pos[:, 0]
    s.held[:2, 0] = 1.0
    s.held_offset[:2] = 0.0
    s.gripper_width[:2] = 0.0
    a = _zeros(s)
    a[[0, 2], 6] = 1.0
    a[[1, 3], 6] = -1.0
    nxt = step(s, a, cfg)
    # held + close stays held, held + open releases, free + close grasps, free + open stays free
    assert nxt.held[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]
    assert nxt.gripper_width.tolist() == [0.0, 1.0, 0.0, 1.0]


@pytest.mark.parametrize("family", ["push_left", "lift", "reach"])
def test_scripted_controller_satisfies_ground_truth(family):
    cfg = SimConfig(num_envs=8)
    scene = builtin_scene(family)
    s = reset(default_reset(family), scene, cfg, seed=4)
    gt = builtin_ground_truth(family)
    hit = np.zeros(8, dtype=bool)
    for st in _run(s, ScriptedController(family, cfg), cfg, cfg.horizon):
        hit |= eval_success(gt, st)
    assert hit.all()
    noop_hit = np.zeros(8, dtype=bool)
    for st in _run(s, lambda x: _zeros(x), cfg, 50):
        noop_hit |= eval_success(gt, st)
    assert not noop_hit.any()


def test_builtin_ground_truth_programs():
    assert print_expr(builtin_ground_truth("tip_over", "bottle").expr) == "bottle.upright < 0.5"
    lift = print_expr(builtin_ground_truth("lift", "card").expr)
    assert lift.startswith("card.pos[2] - table.height > max(")
    assert "init_pos" in print_expr(builtin_ground_truth("push_left").expr)
    with pytest.raises(UnknownFamilyError):
        builtin_ground_truth("juggle")
    assert TARGET_FAMILIES < set(FAMILIES)


def test_every_family_has_scene_reset_and_runnable_controller():
    cfg = SimConfig(num_envs=2)
    for family in FAMILIES:
        scene = builtin_scene(family)
        s = reset(default_reset(family), scene, cfg, seed=0)
        actions = ScriptedController(family, cfg)(s)
        assert actions.shape == (2, ACTION_DIM) and np.isfinite(actions).all()
        eval_success(builtin_ground_truth(family), s)


def test_random_states_cover_varied_configurations():
    s = random_states(builtin_scene("lift"), 500, seed=0)
    assert s.batch_size == 500
    assert 0 < (s.held[:, 0] > 0.5).sum() < 500
    assert 0 < (s.upright[:, 0] < 0.5).sum() < 500
    again = random_states(builtin_scene("lift"), 500, seed=0)
    assert np.array_equal(s.obj_pos, again.obj_pos)


def test_random_policy_is_deterministic():
    cfg = SimConfig(num_envs=3)
    s = reset(default_reset("reach"), builtin_scene("reach"), cfg, seed=0)
    a, b = random_policy(1)(s), random_policy(1)(s)
    assert np.array_equal(a, b)
    assert np.abs(a).max() <= 1.0


# ---------------------------
# Trajectory dump
# ---------------------------
def test_trajectory_dump_and_index(tmp_path):
    rng = np.random.default_rng(0)
    ep = EpisodeRecord(
        observations=rng.normal(size=(5, 20)).astype(np.float32),
        actions=rng.uniform(-1, 1, (5, 7)).astype(np.float32),
        success=np.array([False, False, True, True, False]),
        components={"reach": np.arange(5, dtype=np.float32)},
        seed=3,
        env_id=2,
    )
    index = dump_trajectories(tmp_path, [ep], obs_layout="v2p-obs-1")
    meta = json.loads(index.read_text(encoding="utf-8"))
    assert meta["obs_layout"] == "v2p-obs-1"
    assert meta["episodes"][0] == {"file": "ep00000.bin", "steps": 5, "success": True, "seed": 3, "env_id": 2}
    back = load_trajectory(tmp_path / "ep00000.bin")
    assert np.array_equal(back.observations, ep.observations)
    assert back.success.tolist() == ep.success.tolist()
    assert np.array_equal(back.components["reach"], ep.components["reach"])


def test_records_reject_wrong_magic(tmp_path):
    p = write_records(tmp_path / "x.bin", b"V2PT", {"a": np.zeros(3)})
    with pytest.raises(ValueError):
        read_records(p, b"V2PD")
    raw = p.read_bytes()
    assert raw[:4] == b"V2PT"
