# evolution.py
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

import db
from generator import (
    DEFAULT_SAMPLES,
    CandidateSet,
    Exemplar,
    GeneratorBackend,
    MockBackend,
    PromptContext,
    ReflectionFeedback,
    build_probe_set,
    builtin_task,
    default_examples,
    generate_reward_candidates,
    generate_task_candidates,
    infer_family,
    pick_base_index,
    pick_success_function,
    rank_by_model,
    task_roles,
)
from rl_trainer import (
    EvalReport,
    PolicyLike,
    PolicyParams,
    TrainConfig,
    TrainLogs,
    evaluate,
    render_component_table,
    save_policy,
    train,
)
from scene_model import SceneSpec, save_scene
from simulator import SimConfig, builtin_ground_truth, builtin_scene
from task_dsl import (
    Binary,
    BoolOp,
    Call,
    Compare,
    Expr,
    Index,
    Not,
    Ref,
    RewardProgram,
    Slice,
    SuccessProgram,
    TaskSpec,
    Unary,
    reward_to_dict,
    task_to_dict,
    validate_task_spec,
    walk,
)

logger = logging.getLogger(__name__)

DEAD_SPREAD = 1e-6
POOL_THRESHOLD = 0.8


class UndefinedCorrelationError(ValueError):
    pass


# ---------------------------
# Config
# ---------------------------
PRESETS: Dict[str, Dict[str, Any]] = {
    "v2p": {},
    "eureka": {"no_visual_info": True},
    "robogen": {"no_success_picking": True, "no_iteration": True},
    "8x2": {"samples_per_iteration": 8, "iterations": 2},
    "16x1": {"samples_per_iteration": 16, "iterations": 1},
}


@dataclass
class EvolutionConfig:
    iterations: int = 5
    samples_per_iteration: int = DEFAULT_SAMPLES
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    no_success_picking: bool = False
    no_iteration: bool = False
    single_sample: bool = False
    no_visual_info: bool = False
    model_vote: bool = False
    seed: int = 0
    pool_threshold: float = POOL_THRESHOLD
    validation_states: int = 1000
    probe_episodes: int = 8
    use_registry: bool = False

    def __post_init__(self) -> None:
        if isinstance(self.train, Mapping):
            self.train = TrainConfig.from_dict(self.train)
        if isinstance(self.sim, Mapping):
            self.sim = SimConfig.from_dict(self.sim)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.samples_per_iteration < 1:
            raise ValueError("samples_per_iteration must be >= 1")
        if not (0.0 <= self.pool_threshold <= 1.0):
            raise ValueError("pool_threshold must be in [0, 1]")
        if self.single_sample:
            self.samples_per_iteration = 1
        if self.no_iteration:
            self.iterations = 1

    def to_dict(self) -> Dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["train"] = self.train.to_dict()
        d["sim"] = self.sim.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvolutionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown evolution config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "EvolutionConfig":
        """v2p (full loop), eureka, robogen, 8x2, 16x1."""
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown evolution config keys: {sorted(unknown)}")
        kwargs = dict(PRESETS[name])
        kwargs.update(overrides)
        return cls(**kwargs)


def candidate_seed(seed: int, iteration: int, slot: int) -> int:
    return int(np.random.SeedSequence([seed & ((1 << 63) - 1), iteration, slot]).generate_state(1, dtype=np.uint32)[0])


# ---------------------------
# Records
# ---------------------------
@dataclass
class CandidateResult:
    slot: int
    task: TaskSpec
    logs: TrainLogs
    eval: Optional[EvalReport] = None
    runnable: bool = True
    policy: Optional[PolicyParams] = field(default=None, repr=False, compare=False)

    @property
    def diverged(self) -> bool:
        return self.logs.diverged

    @property
    def trained(self) -> bool:
        return self.runnable

    @property
    def score(self) -> float:
        if not self.runnable or self.diverged or self.eval is None:
            return 0.0
        return self.eval.mean_success

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slot": self.slot,
            "runnable": self.runnable,
            "diverged": self.diverged,
            "success": self.score,
            "per_seed": self.eval.per_seed if self.eval else [],
            "final_train_success": self.logs.final_success_rate,
            "reward": reward_to_dict(self.task.reward),
        }


@dataclass
class IterationRecord:
    iteration: int
    candidates: List[CandidateResult]
    selected: int
    feedback: Optional[ReflectionFeedback] = None
    base_index: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {
            "iteration": self.iteration,
            "selected": self.selected,
            "candidates": [c.to_dict() for c in self.candidates],
        }
        if self.base_index is not None:
            d["base_index"] = self.base_index
        if self.feedback is not None:
            d["feedback"] = {
                "directives": {k: list(v) for k, v in sorted(self.feedback.directives.items())},
                "success_curve": list(self.feedback.success_curve),
            }
        return d


@dataclass
class EvolutionResult:
    best_task: TaskSpec
    best_policy: Optional[PolicyParams]
    best_curve: List[float]
    records: List[IterationRecord]
    best_location: Tuple[int, int]
    family: Optional[str] = None
    gt_curve: List[Optional[float]] = field(default_factory=list)

    @property
    def best_reward(self) -> RewardProgram:
        return self.best_task.reward

    @property
    def training_runs(self) -> int:
        return sum(1 for r in self.records for c in r.candidates if c.trained)

    def to_dict(self) -> Dict[str, Any]:
        it, slot = self.best_location
        return {
            "family": self.family,
            "best": {
                "iteration": it,
                "slot": slot,
                "success": self.best_curve[-1] if self.best_curve else 0.0,
                "task": task_to_dict(self.best_task),
            },
            "best_curve": list(self.best_curve),
            "gt_curve": list(self.gt_curve),
            "training_runs": self.training_runs,
            "iterations": [r.to_dict() for r in self.records],
        }


# ---------------------------
# Task pool
# ---------------------------
@dataclass
class PoolEntry:
    title: str
    caption: str
    task: Dict[str, Any]
    success_rate: float

    def exemplar(self) -> Exemplar:
        return Exemplar(self.title, f"Solved with success rate {self.success_rate:.2f}.", self.task)


@dataclass
class TaskPool:
    entries: List[PoolEntry] = field(default_factory=list)
    threshold: float = POOL_THRESHOLD

    @classmethod
    def seeded(cls, threshold: float = POOL_THRESHOLD) -> "TaskPool":
        """Pool holding the reach-a-block and grasp-a-block primitives."""
        pool = cls(threshold=threshold)
        for family in ("reach", "grasp"):
            scene = builtin_scene(family)
            pool.entries.append(PoolEntry(f"{family} a block", scene.caption, task_to_dict(builtin_task(family, scene)), 1.0))
        return pool

    def __len__(self) -> int:
        return len(self.entries)

    def retrieve(self, caption: str, k: int = 2, *, use_registry: bool = False) -> List[PoolEntry]:
        """k entries most similar to caption; ties -> insertion order."""
        if use_registry:
            try:
                rows = db.search_pool(db.embed_text(caption), k)
                return [PoolEntry(r["title"], r["caption"], r["task"], r["success_rate"]) for r in rows]
            except Exception as e:
                logger.warning("task pool registry search failed, using in-memory pool: %s", e)
        if not self.entries or k <= 0:
            return []
        q = np.asarray(db.embed_text(caption))
        sims = [float(q @ np.asarray(db.embed_text(f"{e.title} {e.caption}"))) for e in self.entries]
        order = sorted(range(len(self.entries)), key=lambda i: (-sims[i], i))
        return [self.entries[i] for i in order[:k]]

    def to_dict(self) -> Dict[str, Any]:
        return {"threshold": self.threshold, "entries": [asdict(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskPool":
        return cls([PoolEntry(**e) for e in d.get("entries", [])], float(d.get("threshold", POOL_THRESHOLD)))

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return p

    @classmethod
    def load(cls, path: str | Path) -> "TaskPool":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def update_task_pool(pool: TaskPool, spec: TaskSpec, success_rate: float, *, title: Optional[str] = None) -> TaskPool:
    """Appends spec iff success_rate >= pool.threshold."""
    if success_rate < pool.threshold:
        logger.info("task %r not admitted to pool (success %.3f < %.2f)", spec.task_description, success_rate, pool.threshold)
        return pool
    caption = spec.scene.caption if spec.scene is not None else spec.task_description
    pool.entries.append(PoolEntry(title or spec.task_description, caption, task_to_dict(spec), float(success_rate)))
    return pool


# ---------------------------
# Selection / feedback
# ---------------------------
def select_best(records: Sequence[Union[CandidateResult, float, None]]) -> int:
    """argmax of success; ties -> lowest index; divergent/None/NaN score 0."""
    if not records:
        raise ValueError("select_best needs at least one candidate")
    best_i, best_v = 0, -math.inf
    for i, r in enumerate(records):
        if isinstance(r, CandidateResult):
            v = r.score
        else:
            v = 0.0 if r is None or not math.isfinite(float(r)) else float(r)
        if v > best_v:
            best_i, best_v = i, v
    return best_i


def build_feedback(logs: TrainLogs, program: RewardProgram) -> ReflectionFeedback:
    """
    Directives per component:
      dead             - accumulated value spread below 1e-6 across all episodes
      never_achieved   - no successful episodes and the component stayed 0
      positive_gap     - success-group mean exceeds failure-group mean
      non_positive_gap - it does not
    """
    stats_ = {name: logs.component_stats[name] for name in program.names if name in logs.component_stats}
    directives: Dict[str, List[str]] = {}
    for name, st in stats_.items():
        flags: List[str] = []
        f, s = st.failure, st.success
        if s is None and f is not None and f.min == 0.0 and f.max == 0.0:
            flags.append("never_achieved")
        elif st.spread() < DEAD_SPREAD:
            flags.append("dead")
        if s is not None and f is not None:
            flags.append("positive_gap" if s.mean > f.mean else "non_positive_gap")
        if flags:
            directives[name] = flags
    return ReflectionFeedback(program, stats_, list(logs.success_curve), directives)


# ---------------------------
# Correlation analysis
# ---------------------------
def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("correlation needs two equal-length series of >= 2 points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation undefined: a series has zero variance")
    r, _ = stats.pearsonr(x, y)
    return float(np.clip(r, -1.0, 1.0))


def success_correlation(
    generated: SuccessProgram,
    ground_truth: SuccessProgram,
    policies: Sequence[PolicyLike],
    task: TaskSpec,
    scene: SceneSpec,
    config: TrainConfig,
    sim_config: Optional[SimConfig] = None,
) -> float:
    """Pearson correlation of per-policy success rates under two success programs."""
    if len(policies) < 3:
        raise ValueError("success_correlation needs at least 3 policies")
    gen = [evaluate(p, generated, task, scene, config, sim_config).mean_success for p in policies]
    gt = [evaluate(p, ground_truth, task, scene, config, sim_config).mean_success for p in policies]
    logger.info("success rates generated=%s ground_truth=%s", gen, gt)
    return pearson(gen, gt)


# ---------------------------
# Loop
# ---------------------------
def _best_effort(fn: Callable[..., Any], *args: Any) -> None:
    try:
        fn(*args)
    except Exception as e:
        logger.warning("registry write %s failed: %s", getattr(fn, "__name__", fn), e)


def _refs_used(expr: Any) -> set:
    return {n.name for n in walk(expr) if isinstance(n, Ref)}


def _rename_refs(e: Expr, mapping: Mapping[str, str]) -> Expr:
    if not mapping:
        return e
    if isinstance(e, Ref):
        return replace(e, name=mapping.get(e.name, e.name))
    if isinstance(e, (Unary, Not, Index, Slice)):
        return replace(e, child=_rename_refs(e.child, mapping))
    if isinstance(e, (Binary, Compare, BoolOp)):
        return replace(e, left=_rename_refs(e.left, mapping), right=_rename_refs(e.right, mapping))
    if isinstance(e, Call):
        return replace(e, args=tuple(_rename_refs(a, mapping) for a in e.args))
    return e


def graft_reward(base: TaskSpec, donor: TaskSpec) -> TaskSpec:
    """
    base with donor's reward. Observation extras the reward needs (directly or
    through other extras) are appended to base's in donor declaration order;
    a donor extra whose name clashes with a different base extra is renamed.
    observation_dim grows by the number of appended extras.
    """
    have = base.refs()
    own = donor.refs()
    needed: set = set()
    todo = sorted(set().union(*(_refs_used(c.expr) for c in donor.reward.components)))
    while todo:
        name = todo.pop()
        if name in needed or name not in own or have.get(name) == own[name]:
            continue
        needed.add(name)
        todo.extend(_refs_used(own[name]))
    mapping: Dict[str, str] = {}
    for name in sorted(needed):
        if name in have:
            k = 1
            while f"{name}_{k}" in have or f"{name}_{k}" in own:
                k += 1
            mapping[name] = f"{name}_{k}"
    added = tuple((mapping.get(n, n), _rename_refs(e, mapping)) for n, e in donor.observation.extras if n in needed)
    reward = replace(
        donor.reward,
        components=tuple(replace(c, expr=_rename_refs(c.expr, mapping)) for c in donor.reward.components),
    )
    if not added:
        return base.with_reward(reward)
    logger.info("grafting observation extras %s with the candidate reward", [n for n, _ in added])
    return replace(
        base,
        reward=reward,
        observation=replace(base.observation, extras=base.observation.extras + added),
        observation_dim=base.observation_dim + len(added),
    )


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train_candidate(
    task: TaskSpec,
    scene: SceneSpec,
    config: EvolutionConfig,
    iteration: int,
    slot: int,
    cand_dir: Optional[Path] = None,
) -> CandidateResult:
    """Train one reward candidate and score it under the task's own success program."""
    report = validate_task_spec(task, scene, sim_config=config.sim, n_states=0)
    if not report.runnable:
        logger.warning("iter %d cand %d is not runnable on the base task: %s", iteration, slot, report.failures[0])
        return CandidateResult(slot, task, TrainLogs(), runnable=False)
    tcfg = replace(config.train, seed=candidate_seed(config.seed, iteration, slot))
    policy, logs = train(task, scene, tcfg, config.sim, log_path=cand_dir / "logs.jsonl" if cand_dir else None)
    ev = None if logs.diverged else evaluate(policy, task.success, task, scene, tcfg, config.sim)
    result = CandidateResult(slot, task, logs, ev, policy=policy)
    logger.info("iter %d cand %d: success %.3f%s", iteration, slot, result.score, " (diverged)" if logs.diverged else "")
    if cand_dir is not None:
        _write_json(cand_dir / "task.json", task_to_dict(task))
        save_policy(policy, cand_dir / "policy.bin")
        _write_json(cand_dir / "eval.json", {"diverged": logs.diverged, "eval": ev.to_dict() if ev else None, "success": result.score})
    return result


def _iteration_zero(
    scene: SceneSpec,
    family: Optional[str],
    ctx: PromptContext,
    config: EvolutionConfig,
    backend: GeneratorBackend,
    it_dir: Optional[Path],
) -> Tuple[CandidateSet, int, List[TaskSpec]]:
    n = config.samples_per_iteration
    cset = generate_task_candidates(
        ctx, n, backend, sim_config=config.sim, validation_states=config.validation_states, artifact_dir=it_dir
    )
    votes = rank_by_model(backend, ctx, cset) if config.model_vote else None
    base_idx = pick_base_index(cset, votes=votes)
    base = cset.candidates[base_idx].task
    fam = family or base.family
    if not config.no_success_picking and len(cset) > 1 and fam:
        refs = set(base.refs())
        pool = [c.task.success for c in cset.candidates if _refs_used(c.task.success.expr) <= refs]
        probes = build_probe_set(base, scene, fam, config.sim, episodes=config.probe_episodes, seed=config.seed)
        base = base.with_success(pick_success_function(pool, probes, base.refs()))
    elif not config.no_success_picking and not fam:
        logger.warning("no task family known; skipping success picking")
    return cset, base_idx, [graft_reward(base, c.task) for c in cset.candidates]


def run_evolution(
    scene: SceneSpec,
    family: Optional[str] = None,
    config: Optional[EvolutionConfig] = None,
    backend: Optional[GeneratorBackend] = None,
    *,
    run_dir: Optional[str | Path] = None,
    pool: Optional[TaskPool] = None,
    run_id: Optional[str] = None,
) -> EvolutionResult:
    """
    Iteration 0 generates full task candidates, picks the base task and its
    success program, and trains every candidate's reward on it. Later
    iterations regenerate rewards only, from feedback on the best-so-far
    candidate. The best candidate is replaced only on strict improvement.
    """
    cfg = config or EvolutionConfig()
    family = family or infer_family(scene.caption)
    backend = backend or MockBackend(seed=cfg.seed, family=family)
    pool = pool if pool is not None else TaskPool.seeded(cfg.pool_threshold)
    run = Path(run_dir) if run_dir else None
    rid = run_id or (run.name if run else f"{scene.task_title}-{cfg.seed}")
    started = datetime.now(timezone.utc).isoformat()
    if run is not None:
        save_scene(scene, run / "scene.json")
    registry = cfg.use_registry and db.registry_enabled()
    if cfg.use_registry and not registry:
        logger.warning("use_registry is set but no registry database is configured; continuing without it")
    if registry:
        _best_effort(db.record_run_start, rid, scene.task_title, cfg.to_dict())

    base_ctx = PromptContext(
        scene=scene,
        family=family,
        examples=default_examples(),
        pool=tuple(e.exemplar() for e in pool.retrieve(scene.caption, 2, use_registry=registry)),
        visual_info_enabled=not cfg.no_visual_info,
    )
    records: List[IterationRecord] = []
    best: Optional[CandidateResult] = None
    best_loc = (0, 0)
    best_curve: List[float] = []
    gt_curve: List[Optional[float]] = []
    gt_cache: Dict[Tuple[int, int], Optional[float]] = {}

    for it in range(cfg.iterations):
        it_dir = run / f"iter{it:02d}" if run else None
        logger.info("iteration %d/%d", it + 1, cfg.iterations)
        feedback: Optional[ReflectionFeedback] = None
        base_idx: Optional[int] = None
        if it == 0:
            _, base_idx, tasks = _iteration_zero(scene, family, replace(base_ctx, iteration=0), cfg, backend, it_dir)
        else:
            assert best is not None
            feedback = build_feedback(best.logs, best.task.reward)
            ctx = replace(base_ctx, iteration=it, base_task=best.task, feedback=feedback)
            cset = generate_reward_candidates(
                ctx, cfg.samples_per_iteration, backend, sim_config=cfg.sim, validation_states=cfg.validation_states, artifact_dir=it_dir
            )
            tasks = cset.tasks

        results = [
            train_candidate(t, scene, cfg, it, slot, it_dir / f"cand{slot:02d}" if it_dir else None) for slot, t in enumerate(tasks)
        ]
        sel = select_best(results)
        if registry:
            for c in results:
                _best_effort(db.record_candidate, rid, it, c.slot, c.score, c.diverged, reward_to_dict(c.task.reward))
        if best is None or results[sel].score > best.score:
            best, best_loc = results[sel], (it, sel)
        # only the best policy is kept in memory
        for c in results:
            if c is not best:
                c.policy = None
        best_curve.append(best.score)
        if best_loc not in gt_cache:
            gt_cache[best_loc] = _ground_truth_success(best, scene, family, cfg)
        gt_curve.append(gt_cache[best_loc])
        records.append(IterationRecord(it, results, sel, feedback, base_idx))
        logger.info("iteration %d: selected %d (%.3f), best so far %.3f", it, sel, results[sel].score, best.score)

    if any(b < a for a, b in zip(best_curve, best_curve[1:])):
        raise RuntimeError(f"best-so-far curve decreased: {best_curve}")
    assert best is not None
    result = EvolutionResult(best.task, best.policy, best_curve, records, best_loc, family, gt_curve)
    update_task_pool(pool, best.task, best.score)
    if registry and best.score >= pool.threshold:
        _best_effort(db.add_pool_entry, rid, best.task.task_description, scene.caption, task_to_dict(best.task), best.score)
    if registry:
        _best_effort(db.record_run_finish, rid, best.score)
    if run is not None:
        write_run_artifacts(run, result, pool, cfg, started)
    return result


def _ground_truth_success(best: CandidateResult, scene: SceneSpec, family: Optional[str], cfg: EvolutionConfig) -> Optional[float]:
    """Reporting only; never feeds selection."""
    if family is None:
        return None
    if best.policy is None:
        return 0.0
    obj, target = task_roles(best.task, scene, family)
    gt = builtin_ground_truth(family, obj, target or "target")
    return evaluate(best.policy, gt, best.task, scene, cfg.train, cfg.sim).mean_success


def mean_std(values: Sequence[float]) -> str:
    """'mean ± std' with population std; one value -> std 0."""
    a = np.asarray(values, dtype=np.float64)
    return f"{a.mean():.2f} ± {a.std():.2f}"


def render_report(result: EvolutionResult) -> str:
    it, slot = result.best_location
    best = result.records[it].candidates[slot]
    lines = [
        "# Evolution report",
        "",
        f"Family: {result.family or 'unknown'}",
        f"Best candidate: iteration {it}, candidate {slot}, success {result.best_curve[-1]:.3f}",
        f"Training runs: {result.training_runs}",
        "",
        "| iteration | selected | selected success | best so far | ground truth |",
        "|---|---|---|---|---|",
    ]
    for r, b, g in zip(result.records, result.best_curve, result.gt_curve):
        gt = "n/a" if g is None else f"{g:.3f}"
        lines.append(f"| {r.iteration} | {r.selected} | {r.candidates[r.selected].score:.3f} | {b:.3f} | {gt} |")
    lines += [
        "",
        "## Candidates",
        "",
        "| iteration | candidate | success | diverged | runnable | selected |",
        "|---|---|---|---|---|---|",
    ]
    for r in result.records:
        for c in r.candidates:
            mark = "*" if c.slot == r.selected else ""
            lines.append(f"| {r.iteration} | {c.slot} | {c.score:.3f} | {'yes' if c.diverged else 'no'} | {'yes' if c.runnable else 'no'} | {mark} |")
    per_seed = best.eval.per_seed if best.eval is not None and best.eval.per_seed else [best.score]
    lines += [
        "",
        "| family | success |",
        "|---|---|",
        f"| {result.family or 'unknown'} | {mean_std(per_seed)} |",
    ]
    if best.logs.component_stats:
        lines += ["", "## Reward components of the best candidate", "", render_component_table(best.logs.component_stats)]
    lines += ["", "## Best task", "", "```json", json.dumps(task_to_dict(result.best_task), indent=2, sort_keys=True), "```", ""]
    return "\n".join(lines)


def write_run_artifacts(run: Path, result: EvolutionResult, pool: TaskPool, config: EvolutionConfig, started: str) -> None:
    """result.json and report.md are byte-stable for a given seed; timestamps go to run_meta.json."""
    run.mkdir(parents=True, exist_ok=True)
    pool.save(run / "pool.json")
    _write_json(run / "result.json", result.to_dict())
    (run / "report.md").write_text(render_report(result), encoding="utf-8")
    _write_json(
        run / "run_meta.json",
        {"started_at": started, "finished_at": datetime.now(timezone.utc).isoformat(), "config": config.to_dict()},
    )
