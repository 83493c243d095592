# cli.py
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
from matplotlib.figure import Figure

import main as stub_server
from bc_pipeline import (
    BCConfig,
    HeldOutTask,
    RandomizationConfig,
    collect_trajectories,
    default_ground_truth,
    evaluate_bc,
    load_bc_policy,
    load_dataset,
    merge_manifest,
    save_bc_policy,
    train_bc,
    write_shard,
)
from evolution import EvolutionConfig, EvolutionResult, mean_std, run_evolution
from generator import (
    GenerationExhaustedError,
    GeneratorBackend,
    LLMBackend,
    LLMTransportError,
    MockBackend,
    infer_family,
    task_roles,
)
from rl_trainer import LayoutMismatchError, evaluate, load_policy
from scene_model import (
    CameraIntrinsics,
    SceneSpec,
    ingest_object,
    load_scene,
    read_depth_bin,
    read_mask_rle,
    read_pose_track,
    read_vertices,
    save_scene,
    write_urdf,
)
from simulator import ScriptedController, builtin_scene
from task_dsl import TaskSpec, dsl_reference, task_from_dict

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_BACKEND = 3
EXIT_LAYOUT = 4


# ---------------------------
# Run config
# ---------------------------
@dataclass
class RunConfig:
    scene: Optional[str] = None
    family: Optional[str] = None
    out: str = "runs/default"
    backend: str = "mock"  # mock | llm
    backend_options: Dict[str, Any] = field(default_factory=dict)
    preset: str = "v2p"
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    randomization: RandomizationConfig = field(default_factory=RandomizationConfig)

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "llm"):
            raise ValueError(f"backend must be 'mock' or 'llm', got {self.backend!r}")
        if isinstance(self.evolution, Mapping):
            self.evolution = EvolutionConfig.preset(self.preset, **dict(self.evolution))
        if isinstance(self.bc, Mapping):
            self.bc = BCConfig.from_dict(self.bc)
        if isinstance(self.randomization, Mapping):
            self.randomization = RandomizationConfig.from_dict(self.randomization)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scene": self.scene,
            "family": self.family,
            "out": self.out,
            "backend": self.backend,
            "backend_options": dict(self.backend_options),
            "preset": self.preset,
            "evolution": self.evolution.to_dict(),
            "bc": self.bc.to_dict(),
            "randomization": self.randomization.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        data = dict(d)
        data.setdefault("evolution", {})
        return cls(**data)


def _decode(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Applies `--section.key=value` flags onto a sparse config dict.

    Rules:
    - every path must exist in the default RunConfig layout (backend_options is free-form)
    - values are decoded as JSON when possible, else kept as strings
    """
    template = RunConfig().to_dict()
    out = copy.deepcopy(data)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ValueError(f"override must look like --section.key=value, got {item!r}")
        key, raw = item[2:].split("=", 1)
        path = [p.replace("-", "_") for p in key.split(".") if p]
        if not path:
            raise ValueError(f"empty override key in {item!r}")
        node_t: Any = template
        for i, part in enumerate(path):
            free = i > 0 and path[0] == "backend_options"
            if not free and (not isinstance(node_t, dict) or part not in node_t):
                raise ValueError(f"unknown config key {'.'.join(path)!r}")
            node_t = node_t.get(part) if isinstance(node_t, dict) else None
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"config key {'.'.join(path)!r} is not a section")
        node[path[-1]] = _decode(raw)
    return out


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    data: Dict[str, Any] = {}
    if path:
        p = Path(path)
        try:
            data = json.loads(p.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValueError(f"config file not found: {p}") from None
        except json.JSONDecodeError as e:
            raise ValueError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None
        if not isinstance(data, dict):
            raise ValueError(f"{p}: config must be a JSON object")
    return RunConfig.from_dict(apply_overrides(data, overrides))


def build_backend(cfg: RunConfig, family: Optional[str]) -> GeneratorBackend:
    opts = dict(cfg.backend_options)
    if cfg.backend == "llm":
        try:
            return LLMBackend.from_env(**opts)
        except RuntimeError as e:
            raise ValueError(str(e)) from None
    opts.setdefault("seed", cfg.evolution.seed)
    opts.setdefault("family", family)
    return MockBackend(**opts)


# ---------------------------
# Helpers
# ---------------------------
def _read_json(path: str | Path) -> Any:
    p = Path(path)
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValueError(f"file not found: {p}") from None
    except json.JSONDecodeError as e:
        raise ValueError(f"{p}:{e.lineno}:{e.colno}: {e.msg}") from None


def _require_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ValueError(f"{what} not found: {p}")
    return p


def _load_task(task_path: str, scene: SceneSpec) -> TaskSpec:
    return task_from_dict(_read_json(task_path), scene)


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_curves(result: EvolutionResult, out_dir: Path) -> Path:
    """curves.csv plus curves.png (best-so-far, selected and ground-truth success per iteration)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "curves.csv"
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "selected_success", "best_success", "ground_truth_success"])
        for r, best, gt in zip(result.records, result.best_curve, result.gt_curve):
            w.writerow([r.iteration, f"{r.candidates[r.selected].score:.6f}", f"{best:.6f}", "" if gt is None else f"{gt:.6f}"])

    its = [r.iteration for r in result.records]
    fig = Figure(figsize=(5, 3.5))
    ax = fig.subplots()
    ax.plot(its, result.best_curve, marker="o", label="best so far")
    ax.plot(its, [r.candidates[r.selected].score for r in result.records], marker="x", linestyle="--", label="selected")
    if all(g is not None for g in result.gt_curve):
        ax.plot(its, result.gt_curve, marker="s", linestyle=":", label="ground truth")
    ax.set_xlabel("iteration")
    ax.set_ylabel("success rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out_dir / "curves.png", dpi=100)
    return csv_path


def aggregate_runs(run_dirs: Sequence[str | Path]) -> str:
    """One markdown row per family: final best success as mean ± std across runs."""
    by_family: Dict[str, List[float]] = {}
    curves: Dict[str, List[List[float]]] = {}
    for d in run_dirs:
        res = _read_json(Path(d) / "result.json")
        fam = res.get("family") or "unknown"
        curve = [float(v) for v in res.get("best_curve", [])]
        if not curve:
            raise ValueError(f"{d}: result.json has an empty best_curve")
        by_family.setdefault(fam, []).append(curve[-1])
        curves.setdefault(fam, []).append(curve)
    lines = ["| task | runs | final success | best-so-far per iteration |", "|---|---|---|---|"]
    for fam in sorted(by_family):
        n_it = min(len(c) for c in curves[fam])
        per_it = " / ".join(f"{np.mean([c[i] for c in curves[fam]]):.2f}" for i in range(n_it))
        lines.append(f"| {fam} | {len(by_family[fam])} | {mean_std(by_family[fam])} | {per_it} |")
    all_final = [v for vals in by_family.values() for v in vals]
    lines.append(f"| **average** | {len(all_final)} | {mean_std(all_final)} | |")
    return "\n".join(lines) + "\n"


# ---------------------------
# Commands
# ---------------------------
def cmd_ingest(args: argparse.Namespace) -> int:
    """
    Ingest manifest (JSON):
      {"task_title", "caption", "table_height", "depth", "intrinsics": {fx, fy, cx, cy},
       "objects": [{"name", "mask", "vertices", "pose_track", "mesh_path"?, "source_frame"?,
                    "is_container"?, "mass"?}]}
    Paths are relative to the manifest.
    """
    manifest_path = _require_file(args.manifest, "ingest manifest")
    base = manifest_path.parent
    m = _read_json(manifest_path)
    out = Path(args.out)
    depth = read_depth_bin(_require_file(base / m["depth"], "depth file"))
    K = CameraIntrinsics.from_dict(m["intrinsics"])
    objects = []
    for o in m.get("objects", []):
        name = o["name"]
        mask = read_mask_rle(_require_file(base / o["mask"], "mask file"), depth.width, depth.height)
        verts = read_vertices(_require_file(base / o["vertices"], "vertex file"))
        track = read_pose_track(_require_file(base / o["pose_track"], "pose track"))
        urdf_rel = f"urdf/{name}.urdf"
        spec = ingest_object(
            name,
            mask,
            depth,
            K,
            verts,
            track,
            urdf_path=urdf_rel,
            mesh_path=o.get("mesh_path"),
            source_frame=o.get("source_frame"),
            is_container=bool(o.get("is_container", False)),
        )
        if "mass" in o:
            spec.extra["mass"] = float(o["mass"])
        write_urdf(spec, out / urdf_rel, mass=float(o.get("mass", 0.1)))
        objects.append(spec)
        d_image = spec.scale_ratio * spec.mesh_diameter
        size = ", ".join(f"{v:.4f}" for v in spec.size)
        print(f"{name}: D_image={d_image:.4f} D_mesh={spec.mesh_diameter:.4f} rho={spec.scale_ratio:.4f} size=({size})")
    scene = SceneSpec(
        task_title=m.get("task_title", ""),
        caption=m.get("caption", ""),
        objects=objects,
        table_height=float(m.get("table_height", 0.0)),
    )
    path = save_scene(scene, out / "scene.json")
    print(f"wrote {path} ({len(objects)} objects)")
    return EXIT_OK


def _resolve_scene(cfg: RunConfig) -> SceneSpec:
    if cfg.scene:
        return load_scene(_require_file(cfg.scene, "scene file"))
    if cfg.family:
        return builtin_scene(cfg.family)
    raise ValueError("either scene or family must be set")


def cmd_evolve(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    cfg = load_run_config(args.config, overrides)
    scene = _resolve_scene(cfg)
    family = cfg.family or infer_family(scene.caption)
    backend = build_backend(cfg, family)
    out = Path(cfg.out)
    result = run_evolution(scene, family, cfg.evolution, backend, run_dir=out)
    write_curves(result, out)
    _write_json(out / "run_config.json", cfg.to_dict())
    it, slot = result.best_location
    print(f"best: iteration {it} candidate {slot} success {result.best_curve[-1]:.3f} ({result.training_runs} training runs)")
    print(f"report: {out / 'report.md'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    cfg = load_run_config(args.config, overrides)
    scene = load_scene(_require_file(args.scene, "scene file"))
    task = _load_task(args.task, scene)
    policy = load_policy(_require_file(args.policy, "policy checkpoint"))
    if task.observation_dim != policy.obs_dim:
        raise LayoutMismatchError(f"task observation_dim {task.observation_dim} != policy obs_dim {policy.obs_dim}")
    success = default_ground_truth(task, scene) if args.ground_truth else task.success
    report = evaluate(policy, success, task, scene, cfg.evolution.train, cfg.evolution.sim)
    payload = {"ground_truth": bool(args.ground_truth), **report.to_dict()}
    if args.out:
        _write_json(Path(args.out), payload)
    print(f"success {report.mean_success:.3f} per seed {[round(s, 3) for s in report.per_seed]}")
    return EXIT_OK


def cmd_collect(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    cfg = load_run_config(args.config, overrides)
    scene = load_scene(_require_file(args.scene, "scene file"))
    task = _load_task(args.task, scene)
    if args.policy == "scripted":
        if not task.family:
            raise ValueError("scripted collection needs a task with a family")
        obj, target = task_roles(task, scene, task.family)
        policy: Any = ScriptedController(task.family, cfg.evolution.sim, obj=obj, target=target or "target")
    else:
        policy = load_policy(_require_file(args.policy, "policy checkpoint"))
    mask_res = cfg.bc.mask_resolution if cfg.bc.observation_mode == "mask" else None
    trajs, stats = collect_trajectories(
        policy,
        task,
        scene,
        args.n,
        cfg.randomization,
        sim_config=cfg.evolution.sim,
        seed=args.seed,
        task_id=args.task_id,
        mask_resolution=mask_res,
    )
    write_shard(args.out, args.task_id, trajs, stats, source_run=args.source_run)
    merge_manifest(args.out, cfg.randomization)
    print(f"{args.task_id}: stored {stats.stored}/{args.n} in {stats.attempts} attempts{' (cap reached)' if stats.capped else ''}")
    return EXIT_OK


def cmd_bc_train(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    cfg = load_run_config(args.config, overrides)
    ds = load_dataset(_require_file(args.dataset, "dataset directory"))
    res = train_bc(ds, cfg.bc)
    out = Path(args.out)
    save_bc_policy(res.policy, out)
    _write_json(out.with_name(out.stem + "_loss.json"), {"loss_curve": res.loss_curve, "batch_size": res.batch_size})
    final = f"{res.loss_curve[-1]:.6f}" if res.loss_curve else "n/a"
    print(f"trained on {len(ds.trajectories)} trajectories; final loss {final}")
    return EXIT_OK


def _held_out(path: str) -> List[HeldOutTask]:
    """JSON list of {"task_id", "task", "scene"} with paths relative to the list file."""
    p = _require_file(path, "held-out task list")
    items = _read_json(p)
    out = []
    for it in items:
        scene = load_scene(_require_file(p.parent / it["scene"], "scene file"))
        out.append(HeldOutTask(it["task_id"], _load_task(str(p.parent / it["task"]), scene), scene))
    return out


def cmd_bc_eval(args: argparse.Namespace, overrides: Sequence[str]) -> int:
    cfg = load_run_config(args.config, overrides)
    policy = load_bc_policy(_require_file(args.policy, "bc checkpoint"))
    report = evaluate_bc(policy, _held_out(args.tasks), cfg.evolution.train, cfg.evolution.sim)
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    for task_id, rate in report.per_task.items():
        print(f"{task_id}: {rate:.3f}")
    mean = report.mean_success
    print(f"mean: {'n/a' if mean is None else f'{mean:.3f}'}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    table = aggregate_runs(args.runs)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_docs_dsl(args: argparse.Namespace) -> int:
    sys.stdout.write(dsl_reference().rstrip("\n") + "\n")
    return EXIT_OK


def cmd_stub_llm(args: argparse.Namespace) -> int:
    responses = stub_server.load_responses(args.responses) if args.responses else []
    stub_server.serve(responses, host=args.host, port=args.port, fail_statuses=args.fail_status or ())
    return EXIT_OK


# ---------------------------
# Entry point
# ---------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2p", description="Video-to-policy task generation and training.")
    parser.add_argument("--log-level", default=None, help="overrides V2P_LOG_LEVEL (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build scene.json and URDFs from perception outputs")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evolve", help="run the task/reward evolution loop")
    p.add_argument("--config", default=None, help="RunConfig JSON; fields overridable with --section.key=value")

    p = sub.add_parser("eval", help="evaluate a policy checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--ground-truth", action="store_true", help="score with the family's built-in success program")
    p.add_argument("--out", default=None)

    p = sub.add_parser("collect", help="collect successful randomized trajectories into a dataset shard")
    p.add_argument("--config", default=None)
    p.add_argument("--policy", required=True, help="policy checkpoint or 'scripted'")
    p.add_argument("--task", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--task-id", default="task")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--source-run", default=None)

    p = sub.add_parser("bc-train", help="behavior cloning on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("bc-eval", help="evaluate a BC policy on held-out tasks")
    p.add_argument("--config", default=None)
    p.add_argument("--policy", required=True)
    p.add_argument("--tasks", required=True, help="JSON list of {task_id, task, scene}")
    p.add_argument("--out", default=None)

    p = sub.add_parser("report", help="aggregate run directories into one markdown table")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", default=None)

    sub.add_parser("docs-dsl", help="print the task DSL reference")

    p = sub.add_parser("stub-llm", help="serve the chat-completion stub")
    p.add_argument("--responses", default=None, help="JSON list of replies or a directory of .txt files")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--fail-status", type=int, action="append")
    return parser


_WITH_OVERRIDES = {
    "evolve": cmd_evolve,
    "eval": cmd_eval,
    "collect": cmd_collect,
    "bc-train": cmd_bc_train,
    "bc-eval": cmd_bc_eval,
}
_PLAIN = {
    "ingest": cmd_ingest,
    "report": cmd_report,
    "docs-dsl": cmd_docs_dsl,
    "stub-llm": cmd_stub_llm,
}


def configure_logging(level: Optional[str]) -> None:
    name = (level or os.getenv("V2P_LOG_LEVEL") or "INFO").strip().upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Exit codes:
      0 success, 2 input error, 3 backend error, 4 layout/compatibility error.
    """
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command in _WITH_OVERRIDES:
            return _WITH_OVERRIDES[args.command](args, extra)
        if extra:
            raise ValueError(f"unrecognized arguments: {' '.join(extra)}")
        return _PLAIN[args.command](args)
    except LayoutMismatchError as e:
        logger.error("%s", e)
        return EXIT_LAYOUT
    except (LLMTransportError, GenerationExhaustedError) as e:
        logger.error("backend error: %s", e)
        return EXIT_BACKEND
    except (ValueError, KeyError, OSError) as e:
        logger.error("input error: %s", e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
