import math

import numpy as np
import pytest

import simulator
from scene_model import ObjectSpec, PoseSample, PoseTrack, SceneSpec
from task_dsl import (
    BASE_DIM,
    OBJECT_DIM,
    BoolOp,
    Call,
    Compare,
    Const,
    ContractViolation,
    DSLSyntaxError,
    DSLTypeError,
    EvalDiagnostics,
    Feature,
    FeatureBinding,
    Index,
    Not,
    ObservationSpec,
    Ref,
    RewardComponent,
    RewardProgram,
    Slice,
    SuccessProgram,
    Unary,
    Binary,
    ValueType,
    dsl_reference,
    eval_batch,
    eval_reward,
    eval_success,
    feature_table,
    observation_vector,
    parse_expr,
    print_expr,
    task_from_dict,
    task_to_dict,
    typecheck,
    validate_task_spec,
)


def _scene(*names, sizes=None):
    sizes = sizes or {}
    objs = []
    for n in names:
        size = sizes.get(n, (0.04, 0.04, 0.04))
        objs.append(
            ObjectSpec(
                name=n,
                mesh_diameter=0.07,
                size=size,
                scale_ratio=1.0,
                urdf_path=f"{n}.urdf",
                pose_track=PoseTrack([PoseSample(0, (0.4, 0.0, size[2] / 2), (1.0, 0.0, 0.0, 0.0))]),
            )
        )
    return SceneSpec(task_title="t", caption="c", objects=objs)


LIFT_RULE = "(card.pos[2] - table.height) > max(card.size[0], max(card.size[1], card.size[2])) / 2"


def _lift_task_dict(**overrides):
    d = {
        "task_description": "lift the card off the table",
        "reset": [{"object": "card", "mode": "uniform", "x": [0.3, 0.5], "y": [-0.15, 0.15], "yaw": [-0.5, 0.5]}],
        "success": LIFT_RULE,
        "observation_extras": [],
        "observation_dim": BASE_DIM + OBJECT_DIM,
        "reward": {
            "components": [
                {"name": "reach", "expr": "1 - tanh(8.0 * norm(card.pos - eef.pos))", "weight": 0.15},
                {"name": "grasp", "expr": "card.held", "weight": 0.25},
                {"name": "lift", "expr": "clamp(card.pos[2] - table.height, 0.0, 0.2)", "weight": 0.3},
            ],
            "step_penalty": 0.01,
        },
    }
    d.update(overrides)
    return d


# ---------------------------
# Parser / printer
# ---------------------------
def test_parse_reward_body_keeps_tanh_temperature():
    e = parse_expr("1 - tanh(8.0 * norm(garlic.pos - eef.pos))")
    assert isinstance(e, Binary) and e.op == "-"
    call = e.right
    assert isinstance(call, Call) and call.fn == "tanh"
    inner = call.args[0]
    assert isinstance(inner, Binary) and inner.left == Const(8.0)
    assert inner.right == Call("norm", (Binary("-", Feature("garlic", "pos"), Feature("eef", "pos")),))


def test_parse_xy_distance_rule_is_boolean():
    e = parse_expr("norm((fork.pos - storage_box.pos)[0:2]) < 0.01")
    assert isinstance(e, Compare) and e.op == "<"
    assert isinstance(e.left.args[0], Slice)
    table = feature_table(["fork", "storage_box"])
    assert typecheck(e, table) == ValueType.BOOL


def test_unbalanced_paren_reports_byte_offset():
    with pytest.raises(DSLSyntaxError) as e:
        parse_expr("((x)")
    assert e.value.offset == 4
    assert ")" in e.value.expected


def test_syntax_error_offsets_count_bytes():
    with pytest.raises(DSLSyntaxError) as e:
        parse_expr("é + ")
    assert e.value.offset == 0
    with pytest.raises(DSLSyntaxError) as e:
        parse_expr("1 + ")
    assert e.value.offset == 4


def test_precedence_and_boolean_structure():
    e = parse_expr("!a.held > 0.5 & b.held < 0.5 | gripper.width < 0.1")
    assert isinstance(e, BoolOp) and e.op == "|"
    assert isinstance(e.left, BoolOp) and e.left.op == "&"
    assert isinstance(e.left.left, Not)
    assert parse_expr("1 - 2 - 3") == Binary("-", Binary("-", Const(1.0), Const(2.0)), Const(3.0))
    assert parse_expr("-eef.pos[0]") == Unary("-", Index(Feature("eef", "pos"), 0))


def test_print_constants_and_minimal_parens():
    assert print_expr(Const(1.0)) == "1.0"
    assert print_expr(parse_expr("1 - (2 - 3)")) == "1.0 - (2.0 - 3.0)"
    assert print_expr(parse_expr("(1 - 2) - 3")) == "1.0 - 2.0 - 3.0"
    assert print_expr(parse_expr("(a.pos - b.pos)[0:2]")) == "(a.pos - b.pos)[0:2]"


def test_lift_rule_round_trips():
    e = parse_expr(LIFT_RULE)
    assert parse_expr(print_expr(e)) == e


_VEC_FEATURES = {
    ValueType.VEC3: [Feature("eef", "pos"), Feature("eef", "vel"), Feature("a", "pos"), Feature("b", "size")],
    ValueType.VEC4: [Feature("a", "quat"), Feature("b", "quat")],
}
_SCALAR_FEATURES = [Feature("gripper", "width"), Feature("table", "height"), Feature("a", "held"), Feature("b", "upright")]


def _gen(rng, t, depth):
    """Random well-typed AST of type t."""
    leaf = depth <= 0 or rng.random() < 0.25
    if t == ValueType.BOOL:
        if leaf or rng.random() < 0.5:
            return Compare(str(rng.choice(["<", ">", "<=", ">="])), _gen(rng, ValueType.SCALAR, depth - 1), _gen(rng, ValueType.SCALAR, depth - 1))
        if rng.random() < 0.3:
            return Not(_gen(rng, ValueType.BOOL, depth - 1))
        return BoolOp(str(rng.choice(["&", "|"])), _gen(rng, ValueType.BOOL, depth - 1), _gen(rng, ValueType.BOOL, depth - 1))
    if t == ValueType.SCALAR:
        if leaf:
            if rng.random() < 0.5:
                return Const(float(round(rng.uniform(0, 10), int(rng.integers(0, 4)))))
            return _SCALAR_FEATURES[int(rng.integers(len(_SCALAR_FEATURES)))]
        k = int(rng.integers(7))
        if k == 0:
            return Unary("-", _gen(rng, t, depth - 1))
        if k == 1:
            return Binary(str(rng.choice(["+", "-", "*", "/"])), _gen(rng, t, depth - 1), _gen(rng, t, depth - 1))
        if k == 2:
            vt = ValueType.VEC3 if rng.random() < 0.7 else ValueType.VEC4
            return Call("norm", (_gen(rng, vt, depth - 1),))
        if k == 3:
            return Call(str(rng.choice(["tanh", "exp", "abs", "sqrt"])), (_gen(rng, t, depth - 1),))
        if k == 4:
            fn = str(rng.choice(["min", "max", "clamp"]))
            n = 3 if fn == "clamp" else 2
            return Call(fn, tuple(_gen(rng, t, depth - 1) for _ in range(n)))
        if k == 5:
            return Index(_gen(rng, ValueType.VEC3, depth - 1), int(rng.integers(3)))
        return Call("ind", (_gen(rng, ValueType.BOOL, depth - 1),))
    if t == ValueType.VEC2:
        return Slice(_gen(rng, ValueType.VEC3, depth - 1), 0, 2) if rng.random() < 0.5 else Slice(_gen(rng, ValueType.VEC4, depth - 1), 1, 3)
    if leaf:
        pool = _VEC_FEATURES[t]
        return pool[int(rng.integers(len(pool)))]
    k = int(rng.integers(3))
    if k == 0:
        return Unary("-", _gen(rng, t, depth - 1))
    if k == 1:
        right = _gen(rng, t, depth - 1) if rng.random() < 0.6 else _gen(rng, ValueType.SCALAR, depth - 1)
        return Binary(str(rng.choice(["+", "-", "*", "/"])), _gen(rng, t, depth - 1), right)
    if t == ValueType.VEC3 and rng.random() < 0.5:
        return Slice(_gen(rng, ValueType.VEC4, depth - 1), 0, 3)
    return Binary("*", _gen(rng, ValueType.SCALAR, depth - 1), _gen(rng, t, depth - 1))


def test_print_parse_round_trip_on_random_asts():
    rng = np.random.default_rng(1234)
    table = feature_table(["a", "b"])
    for _ in range(1000):
        t = [ValueType.SCALAR, ValueType.BOOL, ValueType.VEC3, ValueType.VEC2][int(rng.integers(4))]
        e = _gen(rng, t, int(rng.integers(1, 5)))
        assert typecheck(e, table) == t
        assert parse_expr(print_expr(e)) == e


# ---------------------------
# Type checker
# ---------------------------
def test_typecheck_examples():
    table = feature_table(["card"])
    assert typecheck(parse_expr("norm(eef.pos)"), table) == ValueType.SCALAR
    assert typecheck(parse_expr("eef.pos + 1.0"), table) == ValueType.VEC3
    assert typecheck(parse_expr("card.quat[1:4]"), table) == ValueType.VEC3
    with pytest.raises(DSLTypeError) as e:
        typecheck(parse_expr("eef.pos + card.quat"), table)
    assert "3 vs 4" in str(e.value)


def test_typecheck_errors_carry_spans():
    table = feature_table(["card"])
    with pytest.raises(DSLTypeError) as e:
        typecheck(parse_expr("1 - norm(cupp.pos - eef.pos)"), table)
    assert e.value.span == (9, 17)
    with pytest.raises(DSLTypeError) as e:
        typecheck(parse_expr("(card.held > 0.5) + 1"), table)
    assert "boolean" in str(e.value)
    with pytest.raises(DSLTypeError):
        typecheck(parse_expr("eef.pos[3]"), table)
    with pytest.raises(DSLTypeError):
        typecheck(parse_expr("eef.pos[1:2]"), table)


def test_feature_table_size_for_one_object():
    assert len(feature_table(["card"])) == 5 + 6
    assert "card.init_pos" not in feature_table(["card"]).features
    assert "card.init_pos" in feature_table(["card"], include_evaluation=True).features


# ---------------------------
# Evaluation
# ---------------------------
def test_constant_broadcasts_over_batch():
    binding = FeatureBinding({"gripper.width": np.zeros(4)})
    assert eval_batch(parse_expr("2.5"), binding).tolist() == [2.5, 2.5, 2.5, 2.5]
    assert eval_batch(parse_expr("tanh(8.0 * 0)"), binding).tolist() == [0.0] * 4


def test_norm_matches_per_env_reference_bit_for_bit():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(64, 3)), rng.normal(size=(64, 3))
    out = eval_batch(parse_expr("norm(a.pos - b.pos)"), FeatureBinding({"a.pos": a, "b.pos": b}))
    for row in range(64):
        dx, dy, dz = (float(a[row, k]) - float(b[row, k]) for k in range(3))
        assert out[row] == math.sqrt(dx * dx + dy * dy + dz * dz)


def test_sqrt_and_division_never_produce_nan():
    binding = FeatureBinding({"a.held": np.array([-4.0, 0.0, 4.0])})
    diag = EvalDiagnostics()
    assert eval_batch(parse_expr("sqrt(a.held)"), binding, diagnostics=diag).tolist() == [0.0, 0.0, 2.0]
    assert diag.negative_sqrt == 1
    assert eval_batch(parse_expr("1 / a.held"), binding, diagnostics=diag).tolist() == [-0.25, 0.0, 0.25]
    assert diag.zero_division == 1
    big = eval_batch(parse_expr("exp(a.held * 100)"), binding, diagnostics=diag)
    assert np.isfinite(big).all() and diag.exp_clamped == 1


def test_unbound_feature_is_contract_violation():
    with pytest.raises(ContractViolation):
        eval_batch(parse_expr("a.pos[0]"), FeatureBinding({"b.pos": np.zeros((2, 3))}))


def test_well_typed_programs_evaluate_on_random_batches():
    scene = _scene("a", "b")
    table = feature_table(["a", "b"])
    states = simulator.random_states(scene, 16, seed=3)
    rng = np.random.default_rng(99)
    for _ in range(2000):
        t = [ValueType.SCALAR, ValueType.BOOL, ValueType.VEC3][int(rng.integers(3))]
        e = _gen(rng, t, int(rng.integers(1, 5)))
        assert typecheck(e, table) == t
        out = eval_batch(e, states)
        assert out.shape == ((16,) if t != ValueType.VEC3 else (16, 3))
        if t == ValueType.BOOL:
            assert out.dtype == np.bool_


def _eval_row(e, row, binding, refs=None):
    """Single-environment evaluator over numpy float64 scalars, same operation order as eval_batch."""
    f64 = np.float64

    def ev(n):
        if isinstance(n, Const):
            return f64(n.value)
        if isinstance(n, Feature):
            arr = np.asarray(binding[n.key])
            if arr.ndim == 2:
                return tuple(f64(arr[row, k]) for k in range(arr.shape[1]))
            return f64(arr[row])
        if isinstance(n, Ref):
            return ev(refs[n.name])
        if isinstance(n, Unary):
            v = ev(n.child)
            return tuple(np.negative(c) for c in v) if isinstance(v, tuple) else np.negative(v)
        if isinstance(n, Binary):
            op = {"+": np.add, "-": np.subtract, "*": np.multiply, "/": lambda a, b: f64(0) if b == 0 else a / b}[n.op]
            l, r = ev(n.left), ev(n.right)
            if isinstance(l, tuple) and isinstance(r, tuple):
                return tuple(op(a, b) for a, b in zip(l, r))
            if isinstance(l, tuple):
                return tuple(op(a, r) for a in l)
            if isinstance(r, tuple):
                return tuple(op(l, b) for b in r)
            return op(l, r)
        if isinstance(n, Index):
            return ev(n.child)[n.k]
        if isinstance(n, Slice):
            return ev(n.child)[n.a : n.b]
        if isinstance(n, Compare):
            return {"<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal}[n.op](ev(n.left), ev(n.right))
        if isinstance(n, BoolOp):
            return (np.logical_and if n.op == "&" else np.logical_or)(ev(n.left), ev(n.right))
        if isinstance(n, Not):
            return np.logical_not(ev(n.child))
        args = [ev(a) for a in n.args]
        x = args[0]
        if n.fn == "ind":
            return f64(1.0) if x else f64(0.0)
        if n.fn in ("norm", "dot"):
            u, v = x, (args[1] if n.fn == "dot" else x)
            acc = u[0] * v[0]
            for k in range(1, len(u)):
                acc = acc + u[k] * v[k]
            return np.sqrt(acc) if n.fn == "norm" else acc
        if n.fn == "exp":
            return np.exp(min(x, f64(50.0)))
        if n.fn == "sqrt":
            return np.sqrt(f64(0) if x < 0 else x)
        if n.fn == "clamp":
            return np.minimum(np.maximum(x, args[1]), args[2])
        return {"tanh": np.tanh, "abs": np.abs, "min": np.minimum, "max": np.maximum}[n.fn](*args)

    out = ev(e)
    return np.array(out) if isinstance(out, tuple) else out


def test_batched_evaluation_equals_row_by_row_evaluation():
    scene = _scene("a", "b")
    table = feature_table(["a", "b"])
    rng = np.random.default_rng(2024)
    for k in range(500):
        t = [ValueType.SCALAR, ValueType.BOOL, ValueType.VEC3][int(rng.integers(3))]
        e = _gen(rng, t, int(rng.integers(1, 6)))
        assert typecheck(e, table) == t
        states = simulator.random_states(scene, 8, seed=k)
        binding = states.features(include_evaluation=True)
        out = eval_batch(e, states)
        expected = np.stack([_eval_row(e, row, binding) for row in range(8)])
        assert out.dtype == expected.dtype
        np.testing.assert_array_equal(out, expected, err_msg=print_expr(e))


def test_eval_reward_arithmetic_and_components():
    binding = FeatureBinding({"a.held": np.ones(3)})
    prog = RewardProgram((RewardComponent("grasp", parse_expr("a.held"), 0.3),), step_penalty=0.01)
    totals, comps = eval_reward(prog, np.zeros((3, 7)), binding)
    assert totals == pytest.approx([0.29] * 3)
    assert set(comps) == {"grasp", "step_penalty", "total_reward"}
    zero = RewardProgram((RewardComponent("grasp", parse_expr("a.held"), 0.0),), step_penalty=0.01)
    totals, _ = eval_reward(zero, None, binding)
    assert totals.tolist() == [-0.01] * 3


def test_eval_reward_keeps_generated_scales_and_ignores_order():
    task = task_from_dict(_lift_task_dict(), _scene("card"))
    comps = list(task.reward.components) + [RewardComponent("bonus", parse_expr("ind(card.held > 0.5)"), 0.7)]
    prog = RewardProgram(tuple(comps), 0.01)
    states = simulator.random_states(_scene("card"), 32, seed=5)
    totals, parts = eval_reward(prog, None, states)
    assert [c.weight for c in prog.components] == [0.15, 0.25, 0.3, 0.7]
    held = states.held[:, 0]
    assert parts["grasp"].tolist() == (0.25 * held).tolist()
    reordered = RewardProgram(tuple(reversed(comps)), 0.01)
    again, _ = eval_reward(reordered, None, states)
    assert again.tolist() == totals.tolist()


def test_eval_reward_rejects_mismatched_action_batch():
    prog = RewardProgram((RewardComponent("x", parse_expr("a.held"), 1.0),))
    with pytest.raises(ContractViolation):
        eval_reward(prog, np.zeros((2, 7)), FeatureBinding({"a.held": np.ones(3)}))


def test_lift_success_on_grounded_and_raised_card():
    size = np.array([[0.09, 0.06, 0.002]])
    prog = SuccessProgram(parse_expr(LIFT_RULE))
    grounded = FeatureBinding({"card.pos": np.array([[0.4, 0.0, 0.001]]), "card.size": size, "table.height": np.zeros(1)})
    raised = FeatureBinding({"card.pos": np.array([[0.4, 0.0, 1.001]]), "card.size": size, "table.height": np.zeros(1)})
    assert eval_success(prog, grounded).tolist() == [False]
    assert eval_success(prog, raised).tolist() == [True]
    assert eval_success(prog, raised).tolist() == eval_success(prog, raised).tolist()


def test_fork_in_box_conjunction():
    prog = SuccessProgram(
        parse_expr("norm((fork.pos - storage_box.pos)[0:2]) < 0.01 & fork.pos[2] < storage_box.pos[2] + storage_box.size[2] / 2")
    )
    binding = FeatureBinding(
        {
            "fork.pos": np.array([[0.405, 0.1, 0.02], [0.5, 0.1, 0.02]]),
            "storage_box.pos": np.array([[0.4, 0.1, 0.03], [0.4, 0.1, 0.03]]),
            "storage_box.size": np.array([[0.2, 0.1, 0.06], [0.2, 0.1, 0.06]]),
        }
    )
    assert eval_success(prog, binding).tolist() == [True, False]


def test_eval_success_rejects_scalar_program():
    with pytest.raises(ContractViolation):
        eval_success(SuccessProgram(parse_expr("a.held")), FeatureBinding({"a.held": np.ones(2)}))


# ---------------------------
# Observations
# ---------------------------
def test_observation_dimension_and_extras_order():
    scene = simulator.builtin_scene("lift")
    states = simulator.reset(simulator.default_reset("lift"), scene, simulator.SimConfig(num_envs=4), seed=0)
    base = observation_vector(ObservationSpec(), states)
    assert base.shape == (4, 20)
    x1 = ("dist", parse_expr("norm(obj.pos - eef.pos)"))
    x2 = ("height", parse_expr("obj.pos[2] - table.height"))
    two = observation_vector(ObservationSpec((x1, x2)), states)
    swapped = observation_vector(ObservationSpec((x2, x1)), states)
    assert two.shape == (4, 22) and ObservationSpec((x1, x2)).dimension(1) == 22
    assert np.array_equal(two[:, :20], base) and np.array_equal(swapped[:, :20], base)
    assert np.array_equal(two[:, 20], swapped[:, 21]) and np.array_equal(two[:, 21], swapped[:, 20])
    assert np.allclose(base[:, 0:3], states.eef_pos)
    assert np.allclose(base[:, 17:20], np.array(scene.objects[0].size))


def test_extras_may_reference_earlier_extras():
    scene = simulator.builtin_scene("lift")
    states = simulator.reset(simulator.default_reset("lift"), scene, simulator.SimConfig(num_envs=2), seed=0)
    spec = ObservationSpec((("d", parse_expr("norm(obj.pos - eef.pos)")), ("d2", parse_expr("d * d"))))
    obs = observation_vector(spec, states, dtype=np.float64)
    assert np.allclose(obs[:, 21], obs[:, 20] ** 2)


# ---------------------------
# Task files / validation
# ---------------------------
def test_task_dict_round_trip():
    scene = _scene("card")
    task = task_from_dict(_lift_task_dict(), scene)
    again = task_from_dict(task_to_dict(task), scene)
    assert again == task


def test_well_formed_lift_spec_is_runnable_without_flags():
    report = validate_task_spec(_lift_task_dict(), _scene("card", sizes={"card": (0.09, 0.06, 0.002)}))
    assert report.runnable, report.summary()
    assert report.flags == []


def test_trivially_true_success_is_flagged_not_failed():
    report = validate_task_spec(_lift_task_dict(success="1.0 < 2.0"), _scene("card"))
    assert report.runnable
    assert [f.kind for f in report.flags] == ["trivially_true"]


def test_unknown_object_is_hard_failure_with_span():
    d = _lift_task_dict()
    d["reward"]["components"][0]["expr"] = "1 - norm(cupp.pos - eef.pos)"
    report = validate_task_spec(d, _scene("card"))
    assert not report.runnable
    issue = report.failures[0]
    assert issue.kind == "undeclared_object" and issue.span == (9, 17)


def test_validation_collects_structural_failures():
    d = _lift_task_dict(observation_dim=21)
    d["reward"]["components"][1]["weight"] = 0.0
    d["reset"][0]["x"] = [0.0, 2.0]
    report = validate_task_spec(d, _scene("card"))
    kinds = {f.kind for f in report.failures}
    assert {"dimension", "reset"} <= kinds
    assert any(f.kind == "zero_weight" for f in report.flags)
    assert report.score is None


def test_validation_reports_parse_errors_instead_of_raising():
    report = validate_task_spec(_lift_task_dict(success="card.pos[2] >"), _scene("card"))
    assert not report.runnable and report.failures[0].kind == "parse"


def test_dsl_reference_lists_functions_and_features():
    text = dsl_reference()
    for word in ("norm", "clamp", "ind", "eef.pos", ".vel_linear"):
        assert word in text
