# generator.py
from __future__ import annotations

import json
import logging
import os
import re
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable, ClassVar, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import requests

from rl_trainer import ComponentStats, render_component_table
from scene_model import SceneSpec, pose_delta
from simulator import (
    FAMILIES,
    TARGET_FAMILIES,
    EnvStateBatch,
    ScriptedController,
    SimConfig,
    UnknownFamilyError,
    builtin_scene,
    default_reset,
    random_policy,
    reset,
    step,
)
from task_dsl import (
    Binary,
    Call,
    Const,
    Expr,
    ObservationSpec,
    Placement,
    ResetSpec,
    RewardComponent,
    RewardProgram,
    SuccessProgram,
    TaskSpec,
    ValidationReport,
    dsl_reference,
    eval_success,
    format_number,
    parse_expr,
    reward_from_dict,
    reward_to_dict,
    task_from_dict,
    task_to_dict,
    validate_task_spec,
    walk,
)

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 8
DEFAULT_MAX_ATTEMPTS = 4


# ---------------------------
# Errors
# ---------------------------
class LLMTransportError(RuntimeError):
    pass


class LLMTimeoutError(LLMTransportError):
    pass


class LLMStatusError(LLMTransportError):
    def __init__(self, status: int, snippet: str):
        super().__init__(f"LLM endpoint returned HTTP {status}: {snippet}")
        self.status = status


class PickingError(ValueError):
    pass


class GenerationExhaustedError(RuntimeError):
    def __init__(self, partial: "CandidateSet", failed_slots: Sequence[int]):
        super().__init__(f"generation exhausted attempts for slots {list(failed_slots)}")
        self.partial = partial
        self.failed_slots = list(failed_slots)


# ---------------------------
# Prompt context
# ---------------------------
@dataclass(frozen=True)
class Exemplar:
    title: str
    reasoning: str
    task: Dict[str, Any]


@dataclass
class ReflectionFeedback:
    program: RewardProgram
    component_stats: Dict[str, ComponentStats]
    success_curve: List[float]
    directives: Dict[str, List[str]] = field(default_factory=dict)  # component -> flags

    @property
    def program_text(self) -> str:
        return json.dumps(reward_to_dict(self.program), indent=2, sort_keys=True)

    def flagged(self, *kinds: str) -> List[str]:
        return [name for name, flags in self.directives.items() if set(flags) & set(kinds)]


@dataclass
class PromptContext:
    scene: SceneSpec
    family: Optional[str] = None
    examples: Tuple[Exemplar, ...] = ()
    pool: Tuple[Exemplar, ...] = ()
    feedback: Optional[ReflectionFeedback] = None
    base_task: Optional[TaskSpec] = None  # set when only rewards are generated
    visual_info_enabled: bool = True
    grammar: str = field(default_factory=dsl_reference)
    iteration: int = 0


# ---------------------------
# Family inference / roles
# ---------------------------
_FAMILY_KEYWORDS: Tuple[Tuple[str, Tuple[str, ...]], ...] = (
    ("throw_into", ("throw", "toss")),
    ("tip_over", ("tip", "topple", "knock")),
    ("uncover", ("uncover", "remove a lid", "removing a lid", "take the lid", "lid off")),
    ("cover", ("cover",)),
    ("slide_to", ("slide", "sliding")),
    ("drop_in_front", ("in front",)),
    ("push_next_to", ("next to", "beside")),
    ("insert", ("into", "insert", "inside")),
    ("push_left", ("to left", "to the left", "leftward")),
    ("push_right", ("to right", "to the right", "rightward")),
    ("lift", ("lift", "pick up", "picking up", "raise")),
    ("grasp", ("grasp", "grab", "hold")),
    ("reach", ("reach", "touch")),
)


def infer_family(caption: str) -> Optional[str]:
    """Keyword family guess for a caption; None if nothing matches."""
    text = " ".join((caption or "").lower().split())
    for family, words in _FAMILY_KEYWORDS:
        if any(w in text for w in words):
            return family
    return None


def resolve_family(ctx: PromptContext, hint: Optional[str] = None) -> str:
    family = hint or ctx.family or infer_family(ctx.scene.caption)
    if family is None:
        raise UnknownFamilyError(f"cannot infer a task family from caption {ctx.scene.caption!r}")
    if family not in FAMILIES:
        raise UnknownFamilyError(f"unknown task family {family!r}")
    return family


def object_roles(scene: SceneSpec, family: str) -> Tuple[str, Optional[str]]:
    """
    (manipulated object, target object or None).

    Rules:
    - the manipulated object is the one that moves most between the first and
      last frame (ties -> declaration order), excluding containers when others exist
    - the target is a container if one exists, else the next object in order
    """
    names = list(scene.object_names)
    if not names:
        raise ValueError("scene has no objects")
    movable = [o for o in scene.objects if not o.is_container] or list(scene.objects)

    def moved(o: Any) -> float:
        if not o.pose_track.samples:
            return 0.0
        return float(np.linalg.norm(pose_delta(o.pose_track).delta_position))

    best = max(movable, key=lambda o: (moved(o), -names.index(o.name))).name
    if family not in TARGET_FAMILIES:
        return best, None
    others = [o for o in scene.objects if o.name != best]
    if not others:
        raise ValueError(f"family {family!r} needs a second object")
    containers = [o for o in others if o.is_container]
    return best, (containers[0] if containers else others[0]).name


def family_reset(family: str, scene: SceneSpec, obj: str, target: Optional[str], config: Optional[SimConfig] = None) -> ResetSpec:
    """Built-in reset for `family`, renamed to the scene's objects; bystanders are pinned in place."""
    cfg = config or SimConfig()
    rename = {"obj": obj, "target": target or "target"}
    placements = [
        replace(p, obj=rename[p.obj], anchor=rename.get(p.anchor, p.anchor) if p.anchor else None)
        for p in default_reset(family).placements
    ]
    placed = {p.obj for p in placements}
    w = cfg.workspace
    for o in scene.objects:
        if o.name in placed:
            continue
        x, y = (o.pose_track.samples[0].position[:2] if o.pose_track.samples else (0.5 * (w[0] + w[1]), 0.0))
        pos = (float(np.clip(x, w[0], w[1])), float(np.clip(y, w[2], w[3])))
        placements.append(Placement(o.name, "fixed", pos=pos))
    return ResetSpec(tuple(placements))


# ---------------------------
# Mock component library
# ---------------------------
@dataclass(frozen=True)
class ComponentTemplate:
    name: str
    text: str  # {o} object, {t} target, {T} temperature

    @property
    def tempered(self) -> bool:
        return "{T}" in self.text

    def render(self, obj: str, target: Optional[str], temperature: float = 8.0) -> str:
        return self.text.format(o=obj, t=target or "", T=format_number(temperature))


_REACH = ComponentTemplate("reach", "1 - tanh({T} * norm(eef.pos - {o}.pos))")
_GRASP = ComponentTemplate("grasp_bonus", "ind({o}.held > 0.5)")
_TARGET_DIST = ComponentTemplate("target_distance", "1 - tanh({T} * norm(({o}.pos - {t}.pos)[0:2]))")
_TOWARD = ComponentTemplate("toward_target", "tanh({T} * dot({o}.vel_linear[0:2], ({t}.pos - {o}.pos)[0:2]))")
_AT_TARGET = ComponentTemplate("in_region", "ind(norm(({o}.pos - {t}.pos)[0:2]) < 0.05)")
_RELEASED = ComponentTemplate("released_at_target", "ind({o}.held < 0.5) * ind(norm(({o}.pos - {t}.pos)[0:2]) < 0.05)")


def _push_library(sign: str, bound: str, side: str) -> List[ComponentTemplate]:
    return [
        _REACH,
        ComponentTemplate("approach", "1 - tanh({T} * (abs(" + side + " - 0.05) + abs(eef.pos[1] - {o}.pos[1]) + abs(eef.pos[2] - {o}.pos[2])))"),
        ComponentTemplate("direction", "tanh({T} * " + sign + "{o}.vel_linear[0])"),
        ComponentTemplate("in_region", "ind({o}.pos[0] " + bound + ")"),
    ]


_LIBRARY: Dict[str, List[ComponentTemplate]] = {
    "reach": [
        _REACH,
        ComponentTemplate("in_region", "ind(norm(eef.pos - {o}.pos) < 0.03)"),
        ComponentTemplate("slow_down", "1 - tanh({T} * norm(eef.vel))"),
    ],
    "grasp": [
        _REACH,
        _GRASP,
        ComponentTemplate("close_gripper", "ind(norm(eef.pos - {o}.pos) < 0.02) * (1 - gripper.width)"),
    ],
    "lift": [
        _REACH,
        _GRASP,
        ComponentTemplate("height", "tanh({T} * max({o}.pos[2] - table.height - {o}.size[2] / 2, 0))"),
        ComponentTemplate("in_region", "ind({o}.pos[2] - table.height > 0.08)"),
    ],
    "push_left": _push_library("-", "< 0.3", "eef.pos[0] - {o}.pos[0]"),
    "push_right": _push_library("", "> 0.5", "{o}.pos[0] - eef.pos[0]"),
    "tip_over": [
        _REACH,
        ComponentTemplate(
            "approach_top",
            "1 - tanh({T} * (norm((eef.pos - {o}.pos)[0:2]) + abs(eef.pos[2] - {o}.pos[2] - {o}.size[2] / 3)))",
        ),
        ComponentTemplate("topple", "1 - {o}.upright"),
        ComponentTemplate("low", "1 - tanh({T} * max({o}.pos[2] - table.height - {o}.size[0] / 2, 0))"),
    ],
    "uncover": [
        _REACH,
        _GRASP,
        ComponentTemplate("target_distance", "tanh({T} * norm(({o}.pos - {t}.pos)[0:2]))"),
        ComponentTemplate("in_region", "ind(norm(({o}.pos - {t}.pos)[0:2]) > 0.1)"),
    ],
    "drop_in_front": [
        _REACH,
        _GRASP,
        ComponentTemplate("target_distance", "1 - tanh({T} * (abs({t}.pos[0] - 0.12 - {o}.pos[0]) + abs({t}.pos[1] - {o}.pos[1])))"),
        _RELEASED,
    ],
    "push_next_to": [_REACH, _TARGET_DIST, _TOWARD, _AT_TARGET],
    "slide_to": [_REACH, _TARGET_DIST, _TOWARD, _AT_TARGET],
}
for _f in ("cover", "insert", "throw_into"):
    _LIBRARY[_f] = [_REACH, _GRASP, _TARGET_DIST, _TOWARD, _RELEASED]


def component_library(family: str) -> List[ComponentTemplate]:
    if family not in _LIBRARY:
        raise UnknownFamilyError(f"unknown task family {family!r}")
    return list(_LIBRARY[family])


# family -> [(template, threshold range or None)]
_SUCCESS_LIBRARY: Dict[str, List[Tuple[str, Optional[Tuple[float, float]]]]] = {
    "reach": [("norm(eef.pos - {o}.pos) < {a}", (0.02, 0.04))],
    "grasp": [("{o}.held > 0.5", None), ("{o}.held > 0.5 & gripper.width < 0.5", None)],
    "lift": [
        ("{o}.pos[2] - table.height > {a}", (0.05, 0.1)),
        ("{o}.held > 0.5 & {o}.pos[2] - table.height > {a}", (0.04, 0.08)),
    ],
    "push_left": [("{o}.pos[0] < {a}", (0.25, 0.3))],
    "push_right": [("{o}.pos[0] > {a}", (0.5, 0.55))],
    "tip_over": [("{o}.upright < 0.5", None), ("{o}.pos[2] - table.height < {a}", (0.03, 0.05))],
    "cover": [("norm(({o}.pos - {t}.pos)[0:2]) < {a} & {o}.pos[2] > {t}.pos[2] & {o}.held < 0.5", (0.02, 0.04))],
    "uncover": [("norm(({o}.pos - {t}.pos)[0:2]) > {a} & {o}.held < 0.5", (0.08, 0.12))],
    "push_next_to": [("norm(({o}.pos - {t}.pos)[0:2]) < {a} & {o}.held < 0.5", (0.06, 0.09))],
    "drop_in_front": [
        (
            "{t}.pos[0] - {o}.pos[0] > 0.05 & {t}.pos[0] - {o}.pos[0] < {a} & abs({t}.pos[1] - {o}.pos[1]) < 0.05 & {o}.held < 0.5",
            (0.15, 0.25),
        )
    ],
    "insert": [
        (
            "abs({o}.pos[0] - {t}.pos[0]) < {t}.size[0] / 2 & abs({o}.pos[1] - {t}.pos[1]) < {t}.size[1] / 2 & "
            "{o}.pos[2] < {t}.pos[2] + {a} & {o}.held < 0.5",
            (0.02, 0.04),
        )
    ],
    "slide_to": [("norm(({o}.pos - {t}.pos)[0:2]) < {a} & {o}.held < 0.5", (0.04, 0.07))],
}
_SUCCESS_LIBRARY["throw_into"] = _SUCCESS_LIBRARY["insert"]

# runnable but wrong: flagged by validation
_HALLUCINATED_SUCCESS = ("{o}.pos[2] > -1.0", "{o}.pos[2] > 5.0")
# fail validation outright
_BROKEN_SUCCESS = ("{o}.pos > 0.1", "{o}.mass > 0.5", "norm({o}.pos - {o}.quat) < 0.1")


def _temperature(rng: np.random.Generator) -> float:
    return round(float(rng.uniform(1.0, 20.0)), 2)


def _weight(rng: np.random.Generator) -> float:
    return round(float(rng.uniform(0.0, 1.0)), 3)


def mock_sample(rng: np.random.Generator, family: str, obj: str = "obj", target: Optional[str] = "target") -> RewardProgram:
    """Reach shaping plus a random non-empty subset of the family's other components."""
    lib = component_library(family)
    rest = lib[1:]
    k = int(rng.integers(1, len(rest) + 1))
    picked = sorted(rng.choice(len(rest), size=k, replace=False).tolist())
    comps = []
    for tmpl in [lib[0]] + [rest[i] for i in picked]:
        comps.append(RewardComponent(tmpl.name, parse_expr(tmpl.render(obj, target, _temperature(rng))), _weight(rng)))
    penalty = float(rng.choice([0.0, 0.01]))
    return RewardProgram(tuple(comps), penalty)


def _is_temperature(e: Expr) -> bool:
    return (
        isinstance(e, Call)
        and e.fn == "tanh"
        and isinstance(e.args[0], Binary)
        and e.args[0].op == "*"
        and isinstance(e.args[0].left, Const)
    )


def map_temperatures(e: Expr, fn: Callable[[float], float]) -> Expr:
    """Rewrite every tanh(c * x) constant c through fn."""
    changes: Dict[str, Any] = {}
    for f in fields(e):
        v = getattr(e, f.name)
        if isinstance(v, tuple) and v and all(is_dataclass(x) for x in v):
            changes[f.name] = tuple(map_temperatures(x, fn) for x in v)
        elif is_dataclass(v):
            changes[f.name] = map_temperatures(v, fn)
    out = replace(e, **changes) if changes else e
    if _is_temperature(out):
        b = out.args[0]
        c = b.left
        out = replace(out, args=(replace(b, left=replace(c, value=float(fn(c.value)))),))
    return out


def has_temperature(e: Expr) -> bool:
    return any(_is_temperature(n) for n in walk(e))


REWRITE_FLAGS = {"never_achieved", "non_positive_gap"}


def mock_mutate(
    rng: np.random.Generator,
    prior: RewardProgram,
    feedback: Optional[ReflectionFeedback],
    family: str,
    obj: str = "obj",
    target: Optional[str] = "target",
) -> RewardProgram:
    """
    Perturb the best prior program.

    Rules:
    - every temperature: x exp(N(0, 0.3)), clipped to [1, 20]
    - every weight: + N(0, 0.1), clipped to [0, 1]
    - never_achieved / non_positive_gap components are rewritten from unused
      library components (halved weight if none remain)
    - dead components get their temperature doubled, or are rewritten when they
      have none
    """
    directives = feedback.directives if feedback else {}
    library = component_library(family)
    names = set(prior.names)
    comps: List[RewardComponent] = []
    for c in prior.components:
        kinds = set(directives.get(c.name, ()))
        rewrite = bool(kinds & REWRITE_FLAGS) or ("dead" in kinds and not has_temperature(c.expr))
        if rewrite:
            spare = [t for t in library if t.name not in names]
            if spare:
                tmpl = spare[int(rng.integers(len(spare)))]
                names.discard(c.name)
                names.add(tmpl.name)
                comps.append(RewardComponent(tmpl.name, parse_expr(tmpl.render(obj, target, _temperature(rng))), _weight(rng)))
                continue
            comps.append(replace(c, weight=round(c.weight / 2.0, 4)))
            continue
        if "dead" in kinds:
            expr = map_temperatures(c.expr, lambda t: min(20.0, max(1.0, round(t * 2.0, 2))))
        else:
            expr = map_temperatures(c.expr, lambda t: float(np.clip(round(t * float(np.exp(rng.normal(0.0, 0.3))), 2), 1.0, 20.0)))
        weight = float(np.clip(round(c.weight + float(rng.normal(0.0, 0.1)), 4), 0.0, 1.0))
        comps.append(RewardComponent(c.name, expr, weight))
    return RewardProgram(tuple(comps), prior.step_penalty)


def _success_text(rng: np.random.Generator, family: str, obj: str, target: Optional[str]) -> str:
    options = _SUCCESS_LIBRARY[family]
    text, span = options[int(rng.integers(len(options)))]
    a = "" if span is None else format_number(round(float(rng.uniform(*span)), 3))
    return text.format(o=obj, t=target or "", a=a)


def builtin_task(family: str, scene: SceneSpec, obj: Optional[str] = None, target: Optional[str] = None) -> TaskSpec:
    """Hand-written task for a family: first success template at mid threshold, full library at T=8."""
    if family not in FAMILIES:
        raise UnknownFamilyError(f"unknown task family {family!r}")
    if obj is None:
        obj, target = object_roles(scene, family)
    text, span = _SUCCESS_LIBRARY[family][0]
    a = "" if span is None else format_number(round(0.5 * (span[0] + span[1]), 3))
    comps = tuple(
        RewardComponent(t.name, parse_expr(t.render(obj, target, 8.0)), 1.0) for t in component_library(family)
    )
    obs = ObservationSpec()
    return TaskSpec(
        task_description=scene.caption or family,
        reset=family_reset(family, scene, obj, target),
        success=SuccessProgram(parse_expr(text.format(o=obj, t=target or "", a=a))),
        observation=obs,
        observation_dim=obs.dimension(len(scene.objects)),
        reward=RewardProgram(comps, 0.01),
        family=family,
        scene=scene,
    )


# ---------------------------
# Backends
# ---------------------------
@dataclass(frozen=True)
class Request:
    kind: str  # "task" | "reward" | "rank"
    iteration: int
    slot: int
    attempt: int


@dataclass(frozen=True)
class Reply:
    text: str
    request_id: Optional[str] = None


_KIND_CODES = {"task": 1, "reward": 2, "rank": 3}


def _fenced(payload: Mapping[str, Any], note: str) -> str:
    return f"{note}\n```json\n{json.dumps(payload, indent=2, sort_keys=True)}\n```\n"


@dataclass
class MockBackend:
    """Offline stand-in: answers from the component library, fully determined by (seed, request)."""

    seed: int = 0
    family: Optional[str] = None
    invalid_rate: float = 0.0
    malformed_rate: float = 0.0
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    kind: ClassVar[str] = "mock"

    def rng(self, req: Request) -> np.random.Generator:
        return np.random.default_rng([self.seed & ((1 << 63) - 1), req.iteration, req.slot, req.attempt, _KIND_CODES[req.kind]])

    def complete(self, ctx: PromptContext, messages: Sequence[Mapping[str, str]], req: Request) -> Reply:
        rng = self.rng(req)
        family = resolve_family(ctx, self.family)
        if ctx.base_task is not None and req.kind == "reward":
            obj, target = task_roles(ctx.base_task, ctx.scene, family)
        else:
            obj, target = object_roles(ctx.scene, family)
        rid = f"mock-{req.kind}-{req.iteration}-{req.slot}-{req.attempt}"
        if rng.random() < self.malformed_rate:
            if rng.random() < 0.5:
                return Reply('```json\n{"reset": [', rid)
            bad = _BROKEN_SUCCESS[int(rng.integers(len(_BROKEN_SUCCESS)))].format(o=obj)
            payload = {"reward": {"components": [{"name": "bad", "expr": bad, "weight": 1.0}], "step_penalty": 0.0}}
            if req.kind == "task":
                task = task_to_dict(builtin_task(family, ctx.scene, obj, target))
                task["success"] = bad
                payload = task
            else:
                payload = payload["reward"]
            return Reply(_fenced(payload, "Draft:"), rid)

        if req.kind == "reward":
            if ctx.feedback is not None:
                program = mock_mutate(rng, ctx.feedback.program, ctx.feedback, family, obj, target)
            else:
                program = mock_sample(rng, family, obj, target)
            return Reply(_fenced(reward_to_dict(program), "Updated reward:"), rid)

        if rng.random() < self.invalid_rate:
            success = _HALLUCINATED_SUCCESS[int(rng.integers(len(_HALLUCINATED_SUCCESS)))].format(o=obj)
        else:
            success = _success_text(rng, family, obj, target)
        obs = ObservationSpec()
        spec = TaskSpec(
            task_description=ctx.scene.caption or family,
            reset=family_reset(family, ctx.scene, obj, target),
            success=SuccessProgram(parse_expr(success)),
            observation=obs,
            observation_dim=obs.dimension(len(ctx.scene.objects)),
            reward=mock_sample(rng, family, obj, target),
            family=family,
        )
        return Reply(_fenced(task_to_dict(spec), f"Task for {family}:"), rid)


def task_roles(task: TaskSpec, scene: SceneSpec, family: str) -> Tuple[str, Optional[str]]:
    rel = [p for p in task.reset.placements if p.mode == "relative"]
    obj, target = object_roles(scene, family)
    if family in TARGET_FAMILIES and rel and rel[0].anchor:
        # the anchored placement names the pair the base task was built around
        return rel[0].obj, rel[0].anchor
    return obj, target


def _dig(data: Any, path: Sequence[Union[str, int]]) -> Any:
    cur = data
    for key in path:
        try:
            cur = cur[key]
        except (KeyError, IndexError, TypeError):
            raise LLMTransportError(f"LLM response has no {'/'.join(str(p) for p in path)}") from None
    return cur


@dataclass
class LLMBackend:
    endpoint: str
    model: str = "gpt-4o"
    temperature: float = 0.7
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    timeout: float = 60.0
    api_key: str = ""
    response_path: Tuple[Union[str, int], ...] = ("choices", 0, "message", "content")
    kind: ClassVar[str] = "llm"

    @classmethod
    def from_env(cls, **overrides: Any) -> "LLMBackend":
        endpoint = (os.getenv("V2P_LLM_ENDPOINT") or "").strip()
        if not endpoint and "endpoint" not in overrides:
            raise RuntimeError("V2P_LLM_ENDPOINT is not configured")
        timeout_raw = (os.getenv("V2P_LLM_TIMEOUT") or "").strip()
        try:
            timeout = float(timeout_raw) if timeout_raw else 60.0
        except ValueError:
            raise ValueError(f"V2P_LLM_TIMEOUT must be a number, got {timeout_raw!r}") from None
        kwargs: Dict[str, Any] = {
            "endpoint": endpoint,
            "model": (os.getenv("V2P_LLM_MODEL") or "gpt-4o").strip() or "gpt-4o",
            "timeout": timeout,
            "api_key": (os.getenv("V2P_LLM_KEY") or "").strip(),
        }
        kwargs.update(overrides)
        return cls(**kwargs)

    def complete(self, ctx: PromptContext, messages: Sequence[Mapping[str, str]], req: Request) -> Reply:
        return llm_request(self, messages)


GeneratorBackend = Union[LLMBackend, MockBackend]


def llm_request(backend: LLMBackend, messages: Sequence[Mapping[str, str]]) -> Reply:
    """
    One chat-completion round trip. The generated text is returned verbatim.

    Raises LLMTimeoutError, LLMStatusError (HTTP >= 400) or LLMTransportError.
    """
    headers = {"Content-Type": "application/json"}
    if backend.api_key:
        headers["Authorization"] = f"Bearer {backend.api_key}"
    payload = {"model": backend.model, "messages": [dict(m) for m in messages], "temperature": backend.temperature}
    try:
        r = requests.post(backend.endpoint, headers=headers, json=payload, timeout=backend.timeout)
    except requests.Timeout as e:
        raise LLMTimeoutError(f"LLM request timed out after {backend.timeout}s") from e
    except requests.RequestException as e:
        raise LLMTransportError(f"LLM request failed: {e}") from e
    if r.status_code >= 400:
        # keep it readable; never echo headers or the key
        raise LLMStatusError(r.status_code, (r.text or "")[:500])
    try:
        data = r.json()
    except ValueError:
        raise LLMTransportError("LLM response is not JSON") from None
    text = _dig(data, backend.response_path)
    if not isinstance(text, str):
        raise LLMTransportError("LLM response text is not a string")
    request_id = (r.headers or {}).get("x-request-id") or (data.get("id") if isinstance(data, dict) else None)
    return Reply(text, request_id)


# ---------------------------
# Prompt assembly
# ---------------------------
_SYSTEM = (
    "You write robot manipulation tasks for a tabletop simulator. "
    "Programs are written in the task DSL described below, never in Python. "
    "Answer with exactly one fenced ```json block."
)

_TASK_FORMAT = """Output format: one ```json block holding an object with keys
  task_description (string), reset (list of placements), success (DSL bool expression),
  observation_extras (list of {name, expr}), observation_dim (integer), and
  reward ({components: [{name, expr, weight}], step_penalty}).
A placement is {object, mode: uniform|fixed|relative, x: [lo, hi], y: [lo, hi], yaw: [lo, hi],
  pos: [x, y], anchor, on_top, beyond_reach}.
observation_dim = 7 + 13 * number_of_objects + len(observation_extras)."""

_REWARD_FORMAT = """Output format: one ```json block holding
  {"components": [{"name": ..., "expr": ..., "weight": ...}], "step_penalty": ...}.
Only the reward may change; the reset, success and observation stay fixed."""


def _fmt_vec(v: Sequence[float]) -> str:
    return "[" + ", ".join(f"{float(x):.3f}" for x in v) + "]"


def _scene_section(ctx: PromptContext) -> List[str]:
    s = ctx.scene
    lines = ["## Scene", f"Title: {s.task_title}", f"Caption: {s.caption}", f"Table height: {s.table_height:.3f}", "Objects:"]
    for o in s.objects:
        if ctx.visual_info_enabled:
            tag = " (container)" if o.is_container else ""
            lines.append(f"- {o.name}{tag}: size {_fmt_vec(o.size)} m")
        else:
            lines.append(f"- {o.name}")
    if ctx.visual_info_enabled:
        lines.append("")
        lines.append("## Object poses (first frame -> last frame)")
        for o in s.objects:
            if not o.pose_track.samples:
                continue
            d = pose_delta(o.pose_track)
            lines.append(
                f"- {o.name}: {_fmt_vec(d.first.position)} -> {_fmt_vec(d.last.position)}; "
                f"delta {_fmt_vec(d.delta_position)}, yaw change {d.delta_yaw:.3f} rad"
            )
    return lines


def _exemplar_lines(title: str, items: Sequence[Exemplar]) -> List[str]:
    if not items:
        return []
    lines = ["", f"## {title}"]
    for ex in items:
        lines += [f"### {ex.title}", ex.reasoning, "```json", json.dumps(ex.task, indent=2, sort_keys=True), "```"]
    return lines


def _feedback_lines(fb: ReflectionFeedback) -> List[str]:
    lines = ["", "## Feedback on the best reward so far", "```json", fb.program_text, "```", ""]
    lines.append("Accumulated reward per component, split by episode outcome:")
    lines.append(render_component_table(fb.component_stats))
    lines.append("")
    for name, st in fb.component_stats.items():
        if st.success is None or st.failure is None:
            lines.append(f"- {name}: only one outcome group observed")
            continue
        rel = "exceeds" if st.success_exceeds else "does not exceed"
        lines.append(
            f"- {name}: success-episode accumulation {st.success.mean:.4f} {rel} failure-episode accumulation {st.failure.mean:.4f}"
        )
    curve = ", ".join(f"{v:.2f}" for v in fb.success_curve)
    lines.append(f"Success rate per update: [{curve}]")
    if fb.directives:
        lines.append("Directives:")
        for name in sorted(fb.directives):
            for flag in fb.directives[name]:
                lines.append(f"- {name}: {_DIRECTIVE_TEXT.get(flag, flag)}")
    lines.append(
        "Prioritize components whose accumulation on successful episodes exceeds failed ones; "
        "rescale or rewrite the rest."
    )
    return lines


_DIRECTIVE_TEXT = {
    "dead": "value never changes; rescale it (for example raise the tanh temperature) or rewrite it",
    "never_achieved": "bonus was never earned; replace it with a shaped term",
    "non_positive_gap": "does not separate successful from failed episodes; rewrite it",
    "positive_gap": "separates outcomes; keep it",
}


def build_prompt(ctx: PromptContext) -> List[Dict[str, str]]:
    """system + user messages; a pure function of ctx."""
    user: List[str] = ["# DSL", ctx.grammar, ""]
    user += _scene_section(ctx)
    user += _exemplar_lines("Worked examples", ctx.examples)
    user += _exemplar_lines("Solved tasks", ctx.pool)
    if ctx.base_task is not None:
        user += ["", "## Current task", "```json", json.dumps(task_to_dict(ctx.base_task), indent=2, sort_keys=True), "```"]
    if ctx.feedback is not None:
        user += _feedback_lines(ctx.feedback)
    user += ["", _REWARD_FORMAT if ctx.base_task is not None else _TASK_FORMAT]
    return [{"role": "system", "content": _SYSTEM}, {"role": "user", "content": "\n".join(user)}]


def render_messages(messages: Sequence[Mapping[str, str]]) -> str:
    return "\n\n".join(f"[{m['role']}]\n{m['content']}" for m in messages)


def default_examples() -> Tuple[Exemplar, ...]:
    """Reach/grasp worked examples on a one-block scene."""
    out = []
    for fam, why in (
        ("reach", "The gripper must end near the block, so success thresholds the eef-to-block distance and the reward shapes it with 1 - tanh(T * distance)."),
        ("grasp", "Grasping needs the gripper at the block first, so reach shaping stays and a held bonus is added."),
    ):
        scene = builtin_scene(fam)
        out.append(Exemplar(f"{fam} a block", why, task_to_dict(builtin_task(fam, scene))))
    return tuple(out)


# ---------------------------
# Parsing
# ---------------------------
_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.DOTALL)


def extract_json(text: str) -> Any:
    """First fenced block (or the whole reply) decoded as JSON."""
    m = _FENCE_RE.search(text or "")
    body = m.group(1) if m else (text or "")
    return json.loads(body)


# ---------------------------
# Candidate sets
# ---------------------------
@dataclass
class Provenance:
    slot: int
    backend: str
    attempts: int = 0
    request_ids: List[Optional[str]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slot": self.slot,
            "backend": self.backend,
            "attempts": self.attempts,
            "request_ids": list(self.request_ids),
            "errors": list(self.errors),
        }


@dataclass
class Candidate:
    index: int
    task: TaskSpec
    report: ValidationReport
    provenance: Provenance
    response: str = ""

    @property
    def reward(self) -> RewardProgram:
        return self.task.reward


@dataclass
class CandidateSet:
    kind: str  # "task" | "reward"
    backend: str
    candidates: List[Candidate] = field(default_factory=list)
    prompt: str = ""

    def __len__(self) -> int:
        return len(self.candidates)

    @property
    def tasks(self) -> List[TaskSpec]:
        return [c.task for c in self.candidates]

    @property
    def programs(self) -> List[RewardProgram]:
        return [c.task.reward for c in self.candidates]

    @property
    def provenance(self) -> List[Provenance]:
        return [c.provenance for c in self.candidates]


def write_candidate_artifacts(cand_dir: str | Path, candidate: Optional[Candidate], prompt: str, provenance: Provenance, response: str) -> Path:
    """task.json (when runnable), prompt.txt, response.txt and provenance.json for one slot."""
    d = Path(cand_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "prompt.txt").write_text(prompt, encoding="utf-8")
    (d / "response.txt").write_text(response, encoding="utf-8")
    (d / "provenance.json").write_text(json.dumps(provenance.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if candidate is not None:
        (d / "task.json").write_text(json.dumps(task_to_dict(candidate.task), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def _generate(
    kind: str,
    ctx: PromptContext,
    n: int,
    backend: GeneratorBackend,
    parse: Callable[[Any], TaskSpec],
    *,
    sim_config: Optional[SimConfig],
    validation_states: int,
    artifact_dir: Optional[Path],
) -> CandidateSet:
    if n < 1:
        raise ValueError("n must be >= 1")
    messages = build_prompt(ctx)
    prompt = render_messages(messages)
    cset = CandidateSet(kind=kind, backend=backend.kind, prompt=prompt)
    failed: List[int] = []
    for slot in range(n):
        prov = Provenance(slot=slot, backend=backend.kind)
        found: Optional[Candidate] = None
        last_text = ""
        for attempt in range(backend.max_attempts):
            prov.attempts = attempt + 1
            req = Request(kind, ctx.iteration, slot, attempt)
            try:
                reply = backend.complete(ctx, messages, req)
            except LLMTransportError as e:
                logger.warning("slot %d attempt %d: %s", slot, attempt + 1, e)
                prov.errors.append(str(e))
                continue
            prov.request_ids.append(reply.request_id)
            last_text = reply.text
            try:
                spec = parse(extract_json(reply.text))
            except (ValueError, TypeError) as e:
                logger.warning("slot %d attempt %d: unparseable candidate: %s", slot, attempt + 1, e)
                prov.errors.append(f"parse: {e}")
                continue
            report = validate_task_spec(spec, ctx.scene, sim_config=sim_config, n_states=validation_states)
            if not report.runnable:
                logger.warning("slot %d attempt %d: not runnable: %s", slot, attempt + 1, report.failures[0])
                prov.errors.append("; ".join(str(i) for i in report.failures))
                continue
            found = Candidate(len(cset.candidates), replace(spec, scene=ctx.scene), report, prov, reply.text)
            break
        if artifact_dir is not None:
            write_candidate_artifacts(Path(artifact_dir) / f"cand{slot:02d}", found, prompt, prov, last_text)
        if found is None:
            failed.append(slot)
        else:
            cset.candidates.append(found)
    logger.info("%s generation: %d/%d runnable candidates (%s backend)", kind, len(cset.candidates), n, backend.kind)
    if failed:
        raise GenerationExhaustedError(cset, failed)
    return cset


def generate_task_candidates(
    ctx: PromptContext,
    n: int = DEFAULT_SAMPLES,
    backend: Optional[GeneratorBackend] = None,
    *,
    sim_config: Optional[SimConfig] = None,
    validation_states: int = 1000,
    artifact_dir: Optional[str | Path] = None,
) -> CandidateSet:
    """n runnable TaskSpecs, one request per slot, up to max_attempts per slot."""
    backend = backend or MockBackend()
    scene = ctx.scene
    return _generate(
        "task",
        ctx,
        n,
        backend,
        lambda d: task_from_dict(d, scene),
        sim_config=sim_config,
        validation_states=validation_states,
        artifact_dir=Path(artifact_dir) if artifact_dir else None,
    )


def generate_reward_candidates(
    ctx: PromptContext,
    n: int = DEFAULT_SAMPLES,
    backend: Optional[GeneratorBackend] = None,
    *,
    sim_config: Optional[SimConfig] = None,
    validation_states: int = 1000,
    artifact_dir: Optional[str | Path] = None,
) -> CandidateSet:
    """n runnable reward programs on top of ctx.base_task (reset/success/observation frozen)."""
    base = ctx.base_task
    if base is None:
        raise ValueError("reward generation needs ctx.base_task")
    backend = backend or MockBackend()
    return _generate(
        "reward",
        ctx,
        n,
        backend,
        lambda d: base.with_reward(reward_from_dict(d)),
        sim_config=sim_config,
        validation_states=validation_states,
        artifact_dir=Path(artifact_dir) if artifact_dir else None,
    )


# ---------------------------
# Picking
# ---------------------------
Scorer = Callable[[Candidate], Optional[float]]


def validation_score(c: Candidate) -> Optional[float]:
    return c.report.score


def pick_base_index(cset: CandidateSet, scorer: Optional[Scorer] = None, votes: Optional[Sequence[float]] = None) -> int:
    """
    Index of the best candidate by (score, vote, fewer components, lower index).
    A None score disqualifies.
    """
    if not cset.candidates:
        raise PickingError("no candidates to pick from")
    scorer = scorer or validation_score
    best: Optional[Tuple[Tuple[float, float, int, int], int]] = None
    for i, c in enumerate(cset.candidates):
        s = scorer(c)
        if s is None:
            continue
        v = float(votes[i]) if votes is not None else 0.0
        key = (float(s), v, -len(c.task.reward.components), -i)
        if best is None or key > best[0]:
            best = (key, i)
    if best is None:
        raise PickingError("every candidate is disqualified")
    return best[1]


def pick_base_candidate(cset: CandidateSet, scorer: Optional[Scorer] = None, votes: Optional[Sequence[float]] = None) -> TaskSpec:
    return cset.candidates[pick_base_index(cset, scorer, votes)].task


def rank_by_model(backend: GeneratorBackend, ctx: PromptContext, cset: CandidateSet) -> List[float]:
    """
    Ask the model which candidate is most correct and efficient; returns a
    one-hot vote. The mock backend abstains (all zeros).
    """
    votes = [0.0] * len(cset)
    if not isinstance(backend, LLMBackend) or len(cset) < 2:
        return votes
    listing = "\n\n".join(
        f"Candidate {i}:\n```json\n{json.dumps(task_to_dict(c.task), indent=2, sort_keys=True)}\n```" for i, c in enumerate(cset.candidates)
    )
    messages = [
        {"role": "system", "content": "You review robot task programs for correctness, reasonability and efficiency."},
        {
            "role": "user",
            "content": f"Caption: {ctx.scene.caption}\n\n{listing}\n\nReply with the number of the best candidate only.",
        },
    ]
    try:
        reply = llm_request(backend, messages)
    except LLMTransportError as e:
        logger.warning("model ranking skipped: %s", e)
        return votes
    m = re.search(r"\d+", reply.text)
    if m and int(m.group(0)) < len(votes):
        votes[int(m.group(0))] = 1.0
    return votes


@dataclass
class ProbeSet:
    """Labeled probe rollouts: per batch, the states after every step plus one label per env."""

    batches: List[List[EnvStateBatch]] = field(default_factory=list)
    labels: List[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return int(sum(len(lab) for lab in self.labels))


def _rollout(policy: Callable[[EnvStateBatch, Any], np.ndarray], task: TaskSpec, scene: SceneSpec, sim: SimConfig, seed: int) -> List[EnvStateBatch]:
    states = reset(task.reset, scene, sim, seed)
    out = []
    for _ in range(sim.horizon):
        states = step(states, policy(states, None), sim)
        out.append(states)
    return out


def build_probe_set(
    task: TaskSpec,
    scene: SceneSpec,
    family: str,
    sim_config: Optional[SimConfig] = None,
    *,
    episodes: int = 8,
    seed: int = 0,
) -> ProbeSet:
    """Positives from the family's scripted expert, negatives from a random policy."""
    sim = replace(sim_config or SimConfig(), num_envs=episodes)
    obj, target = task_roles(task, scene, family)
    expert = ScriptedController(family, sim, obj=obj, target=target or "target")
    probes = ProbeSet()
    probes.batches.append(_rollout(expert, task, scene, sim, seed))
    probes.labels.append(np.ones(episodes, dtype=bool))
    probes.batches.append(_rollout(random_policy(seed + 1), task, scene, sim, seed + 1))
    probes.labels.append(np.zeros(episodes, dtype=bool))
    return probes


def success_agreement(program: SuccessProgram, probes: ProbeSet, refs: Optional[Mapping[str, Expr]] = None) -> float:
    """Fraction of probe episodes whose any-step outcome under `program` matches the label."""
    if len(probes) == 0:
        raise PickingError("probe set is empty")
    hits = 0
    for batch, labels in zip(probes.batches, probes.labels):
        seen = np.zeros(len(labels), dtype=bool)
        for states in batch:
            seen |= eval_success(program, states, refs=refs)
        hits += int((seen == labels).sum())
    return hits / len(probes)


def pick_success_function(
    candidates: Sequence[SuccessProgram],
    probes: ProbeSet,
    refs: Optional[Mapping[str, Expr]] = None,
) -> SuccessProgram:
    """Candidate with the highest probe agreement; ties -> lowest index."""
    if not candidates:
        raise PickingError("no success candidates")
    scores = [success_agreement(c, probes, refs) for c in candidates]
    best = int(np.argmax(scores))
    logger.info("success picking: agreements %s -> %d", [round(s, 3) for s in scores], best)
    return candidates[best]
