# bc_pipeline.py
from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import DataLoader, TensorDataset

from generator import task_roles
from rl_trainer import (
    CheckpointError,
    LayoutMismatchError,
    PolicyLike,
    RunningMeanStd,
    TrainConfig,
    as_controller,
    evaluate,
)
from scene_model import SceneSpec
from simulator import (
    ACTION_DIM,
    SEED_MASK,
    EnvStateBatch,
    SimConfig,
    builtin_ground_truth,
    object_mass,
    read_records,
    reset,
    step,
    write_records,
)
from task_dsl import (
    BASE_DIM,
    OBS_LAYOUT_VERSION,
    ContractViolation,
    SuccessProgram,
    TaskSpec,
    eval_success,
    observation_vector,
)

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"V2PD"
BC_MAGIC = b"V2PB"
BC_VERSION = 1
ATTEMPT_CAP_FACTOR = 50
MAX_MASK_OBJECTS = 8
MASK_CHANNELS = MAX_MASK_OBJECTS + 1  # objects + eef
_TASK_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


class DatasetError(ValueError):
    pass


# ---------------------------
# Config
# ---------------------------
@dataclass
class RandomizationConfig:
    """Delay bounds are simulator steps (1-2 steps at dt = 1/60)."""

    action_noise_sigma: float = 0.02
    action_delay_steps: Tuple[int, int] = (1, 2)
    size_jitter: float = 0.05
    mass_jitter: float = 0.1

    def __post_init__(self) -> None:
        self.action_delay_steps = tuple(int(v) for v in self.action_delay_steps)  # type: ignore[assignment]
        lo, hi = self.action_delay_steps
        if lo < 0 or hi < lo:
            raise ValueError(f"action_delay_steps must satisfy 0 <= lo <= hi, got {self.action_delay_steps}")
        for name in ("action_noise_sigma", "size_jitter", "mass_jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.size_jitter >= 1 or self.mass_jitter >= 1:
            raise ValueError("size_jitter and mass_jitter must be < 1")

    @classmethod
    def none(cls) -> "RandomizationConfig":
        return cls(0.0, (0, 0), 0.0, 0.0)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["action_delay_steps"] = list(self.action_delay_steps)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RandomizationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown randomization keys: {sorted(unknown)}")
        return cls(**dict(d))


@dataclass
class BCConfig:
    frame_stack: int = 2
    epochs: int = 30
    batch_size: int = 1024
    learning_rate_head: float = 3e-4
    learning_rate_encoder: float = 3e-5
    hidden: Tuple[int, ...] = (512, 512, 512)
    observation_mode: str = "state"  # state | mask
    mask_resolution: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.frame_stack < 1:
            raise ValueError("frame_stack must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.observation_mode not in ("state", "mask"):
            raise ValueError(f"observation_mode must be 'state' or 'mask', got {self.observation_mode!r}")
        if self.mask_resolution < 8:
            raise ValueError("mask_resolution must be >= 8")

    def effective_batch_size(self, n_samples: int) -> int:
        """Scaled down when the dataset holds fewer than 10 batches."""
        if n_samples >= 10 * self.batch_size:
            return self.batch_size
        return max(1, min(self.batch_size, n_samples // 10))

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BCConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bc config keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------
# Randomization
# ---------------------------
def _episode_rng(seed: Any) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def apply_randomization(actions: np.ndarray, config: RandomizationConfig, episode_seed: Any) -> np.ndarray:
    """
    Executed stream for one episode of commanded actions (T, 7).

    The delay is drawn once, then Gaussian noise per step; noisy commands are
    re-clipped to [-1, 1] and executed `delay` steps late behind zero actions.
    """
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != ACTION_DIM:
        raise ValueError(f"actions must be (T, {ACTION_DIM}), got {a.shape}")
    rng = _episode_rng(episode_seed)
    lo, hi = config.action_delay_steps
    delay = int(rng.integers(lo, hi + 1))
    noisy = np.clip(a + rng.normal(0.0, 1.0, a.shape) * config.action_noise_sigma, -1.0, 1.0)
    out = np.zeros_like(noisy)
    if delay < len(a):
        out[delay:] = noisy[: len(a) - delay]
    return out


class BatchActionPerturber:
    """
    Step-wise form of apply_randomization for B envs, each with its own
    episode rng. Draw order matches the whole-episode version.
    """

    def __init__(self, config: RandomizationConfig, rngs: Sequence[np.random.Generator]):
        self.config = config
        self.rngs = list(rngs)
        lo, hi = config.action_delay_steps
        self.delays = np.array([int(r.integers(lo, hi + 1)) for r in self.rngs], dtype=np.int64)
        self._history: List[np.ndarray] = []

    def __call__(self, commanded: np.ndarray) -> np.ndarray:
        cmd = np.asarray(commanded, dtype=np.float64)
        noise = np.stack([r.normal(0.0, 1.0, ACTION_DIM) for r in self.rngs]) * self.config.action_noise_sigma
        self._history.append(np.clip(cmd + noise, -1.0, 1.0))
        t = len(self._history) - 1
        out = np.zeros_like(cmd)
        for b, d in enumerate(self.delays):
            if t - d >= 0:
                out[b] = self._history[t - d][b]
        return out


def physical_jitter(config: RandomizationConfig, rng: np.random.Generator, scene: SceneSpec) -> Tuple[np.ndarray, np.ndarray]:
    """(size_scale (K,), mass (K,)) for one episode."""
    k = len(scene.objects)
    scale = 1.0 + rng.uniform(-config.size_jitter, config.size_jitter, k)
    base = np.array([object_mass(o) for o in scene.objects], dtype=np.float64)
    mass = base * (1.0 + rng.uniform(-config.mass_jitter, config.mass_jitter, k))
    return scale, mass


def collection_rng(seed: int, env_id: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & SEED_MASK, int(env_id), int(episode), 0xB0C])


# ---------------------------
# Mask observations
# ---------------------------
def rasterize_mask_observation(
    states: EnvStateBatch,
    resolution: int = 64,
    config: Optional[SimConfig] = None,
) -> np.ndarray:
    """
    Orthographic top-down masks over the workspace xy rectangle, shape
    (B, MASK_CHANNELS, R, R) uint8. Channel k < K is object k's footprint
    (axis-aligned extent), the last channel is the eef. Rows follow y, columns x.
    A pixel is set when its center lies inside the footprint.
    """
    cfg = config or SimConfig()
    if states.num_objects > MAX_MASK_OBJECTS:
        raise ValueError(f"mask observations support at most {MAX_MASK_OBJECTS} objects, got {states.num_objects}")
    x_lo, x_hi, y_lo, y_hi = cfg.workspace[:4]
    xs = x_lo + (np.arange(resolution) + 0.5) * (x_hi - x_lo) / resolution
    ys = y_lo + (np.arange(resolution) + 0.5) * (y_hi - y_lo) / resolution
    b = states.batch_size
    out = np.zeros((b, MASK_CHANNELS, resolution, resolution), dtype=np.uint8)
    for k in range(states.num_objects):
        c = states.obj_pos[:, k, :2]
        half = states.obj_extent[:, k, :2] / 2
        in_x = np.abs(xs[None, :] - c[:, 0:1]) <= half[:, 0:1]  # (B, R)
        in_y = np.abs(ys[None, :] - c[:, 1:2]) <= half[:, 1:2]
        out[:, k] = in_y[:, :, None] & in_x[:, None, :]
    col = np.clip(((states.eef_pos[:, 0] - x_lo) / (x_hi - x_lo) * resolution).astype(np.int64), 0, resolution - 1)
    row = np.clip(((states.eef_pos[:, 1] - y_lo) / (y_hi - y_lo) * resolution).astype(np.int64), 0, resolution - 1)
    inside = (
        (states.eef_pos[:, 0] >= x_lo) & (states.eef_pos[:, 0] <= x_hi) & (states.eef_pos[:, 1] >= y_lo) & (states.eef_pos[:, 1] <= y_hi)
    )
    out[np.arange(b)[inside], -1, row[inside], col[inside]] = 1
    return out


# ---------------------------
# Trajectories / dataset
# ---------------------------
@dataclass
class Trajectory:
    observations: np.ndarray  # (T, D)
    actions: np.ndarray  # (T, 7) commanded
    executed: np.ndarray  # (T, 7) after noise and delay
    task_id: str
    seed: int
    env_id: int
    episode: int
    size_scale: np.ndarray  # (K,)
    mass: np.ndarray  # (K,)
    success: bool = True
    masks: Optional[np.ndarray] = None  # (T, C, R, R) uint8

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def obs_dim(self) -> int:
        return int(self.observations.shape[1])


@dataclass
class CollectionStats:
    task_id: str
    attempts: int
    stored: int
    capped: bool


@dataclass
class Dataset:
    shards: Dict[str, List[Trajectory]] = field(default_factory=dict)
    manifest: Dict[str, Any] = field(default_factory=dict)

    @property
    def trajectories(self) -> List[Trajectory]:
        return [t for task_id in sorted(self.shards) for t in self.shards[task_id]]

    @property
    def task_ids(self) -> List[str]:
        return sorted(self.shards)

    def subset(self, task_ids: Sequence[str]) -> "Dataset":
        return Dataset({t: self.shards[t] for t in task_ids}, dict(self.manifest))

    def obs_dim(self) -> int:
        dims = {t.obs_dim for t in self.trajectories}
        if len(dims) > 1:
            raise DatasetError(f"observation widths differ across shards: {sorted(dims)}")
        if not dims:
            raise DatasetError("dataset is empty")
        return dims.pop()


def _rollout_collect(
    act: Any,
    task: TaskSpec,
    scene: SceneSpec,
    sim: SimConfig,
    ground_truth: SuccessProgram,
    randomization: RandomizationConfig,
    seed: int,
    episode: int,
    n_envs: int,
    task_id: str,
    mask_resolution: Optional[int],
) -> List[Trajectory]:
    ids = np.arange(n_envs, dtype=np.int64)
    rngs = [collection_rng(seed, int(i), episode) for i in ids]
    jitter = [physical_jitter(randomization, r, scene) for r in rngs]
    scale = np.stack([j[0] for j in jitter])
    mass = np.stack([j[1] for j in jitter])
    perturb = BatchActionPerturber(randomization, rngs)
    states = reset(task.reset, scene, sim, seed, env_ids=ids, episode=episode, size_scale=scale, mass=mass)
    refs = task.refs()
    obs_l, cmd_l, exe_l, mask_l = [], [], [], []
    first_hit = np.full(n_envs, -1, dtype=np.int64)
    for t in range(sim.horizon):
        obs = observation_vector(task.observation, states)
        if mask_resolution:
            mask_l.append(rasterize_mask_observation(states, mask_resolution, sim))
        cmd = np.clip(np.asarray(act(states, obs), dtype=np.float64), -1.0, 1.0)
        exe = perturb(cmd)
        states = step(states, exe, sim)
        ok = eval_success(ground_truth, states, refs=refs)
        first_hit[(first_hit < 0) & ok] = t
        obs_l.append(obs)
        cmd_l.append(cmd)
        exe_l.append(exe)
        if (first_hit >= 0).all():
            break
    obs_a, cmd_a, exe_a = np.stack(obs_l, 1), np.stack(cmd_l, 1), np.stack(exe_l, 1)
    masks_a = np.stack(mask_l, 1) if mask_l else None
    out = []
    for b in range(n_envs):
        end = int(first_hit[b]) + 1
        if end <= 0:
            continue
        out.append(
            Trajectory(
                observations=obs_a[b, :end].astype(np.float32),
                actions=cmd_a[b, :end].astype(np.float32),
                executed=exe_a[b, :end],
                task_id=task_id,
                seed=seed,
                env_id=int(ids[b]),
                episode=episode,
                size_scale=scale[b],
                mass=mass[b],
                masks=None if masks_a is None else masks_a[b, :end],
            )
        )
    return out


def default_ground_truth(task: TaskSpec, scene: SceneSpec) -> SuccessProgram:
    if not task.family:
        raise ValueError("task has no family; pass an explicit ground-truth success program")
    obj, target = task_roles(task, scene, task.family)
    return builtin_ground_truth(task.family, obj, target or "target")


def collect_trajectories(
    policy: PolicyLike,
    task: TaskSpec,
    scene: SceneSpec,
    n_success: int = 100,
    randomization: Optional[RandomizationConfig] = None,
    *,
    sim_config: Optional[SimConfig] = None,
    ground_truth: Optional[SuccessProgram] = None,
    seed: int = 0,
    task_id: str = "task",
    mask_resolution: Optional[int] = None,
) -> Tuple[List[Trajectory], CollectionStats]:
    """
    Roll randomized episodes until n_success ground-truth successes are stored.
    Failed episodes are discarded; each stored trajectory ends at its first
    successful step. Attempts are capped at 50 * n_success.
    """
    if n_success < 0:
        raise ValueError("n_success must be >= 0")
    sim = sim_config or SimConfig()
    rand = randomization or RandomizationConfig()
    gt = ground_truth or default_ground_truth(task, scene)
    act = as_controller(policy)
    cap = ATTEMPT_CAP_FACTOR * n_success
    stored: List[Trajectory] = []
    attempts = 0
    episode = 0
    while len(stored) < n_success and attempts < cap:
        n_envs = min(sim.num_envs, n_success - len(stored), cap - attempts)
        got = _rollout_collect(act, task, scene, sim, gt, rand, seed, episode, n_envs, task_id, mask_resolution)
        stored.extend(got)
        attempts += n_envs
        episode += 1
        logger.debug("collect %s: round %d, %d/%d stored after %d attempts", task_id, episode, len(stored), n_success, attempts)
    capped = len(stored) < n_success
    if capped:
        logger.warning("collect %s: attempt cap %d reached with %d/%d successes", task_id, cap, len(stored), n_success)
    else:
        logger.info("collect %s: %d successes in %d attempts", task_id, len(stored), attempts)
    return stored[:n_success], CollectionStats(task_id, attempts, min(len(stored), n_success), capped)


def replay_trajectory(
    traj: Trajectory,
    task: TaskSpec,
    scene: SceneSpec,
    ground_truth: SuccessProgram,
    sim_config: Optional[SimConfig] = None,
) -> bool:
    """Open-loop replay of the executed actions from the stored seed; True if success is reached."""
    sim = sim_config or SimConfig()
    states = reset(
        task.reset,
        scene,
        sim,
        traj.seed,
        env_ids=[traj.env_id],
        episode=traj.episode,
        size_scale=traj.size_scale[None, :],
        mass=traj.mass[None, :],
    )
    refs = task.refs()
    for a in traj.executed:
        states = step(states, a[None, :], sim)
        if bool(eval_success(ground_truth, states, refs=refs)[0]):
            return True
    return False


def _check_task_id(task_id: str) -> None:
    if not _TASK_ID_RE.match(task_id or ""):
        raise DatasetError(f"task id {task_id!r} must match {_TASK_ID_RE.pattern}")


def write_shard(
    root: str | Path,
    task_id: str,
    trajectories: Sequence[Trajectory],
    stats: Optional[CollectionStats] = None,
    source_run: Optional[str] = None,
) -> Path:
    """<task_id>.bin plus a <task_id>.json sidecar; merge_manifest folds sidecars into manifest.json."""
    _check_task_id(task_id)
    if not trajectories:
        logger.warning("writing empty shard %s", task_id)
    dims = {t.obs_dim for t in trajectories}
    if len(dims) > 1:
        raise DatasetError(f"shard {task_id}: mixed observation widths {sorted(dims)}")
    root_p = Path(root)
    arrays: Dict[str, np.ndarray] = {
        "lengths": np.array([len(t) for t in trajectories], dtype=np.int64),
        "seed": np.array([t.seed for t in trajectories], dtype=np.int64),
        "env_id": np.array([t.env_id for t in trajectories], dtype=np.int64),
        "episode": np.array([t.episode for t in trajectories], dtype=np.int64),
    }
    if trajectories:
        arrays["observations"] = np.concatenate([t.observations for t in trajectories]).astype(np.float32)
        arrays["actions"] = np.concatenate([t.actions for t in trajectories]).astype(np.float32)
        arrays["executed"] = np.concatenate([t.executed for t in trajectories]).astype(np.float64)
        arrays["size_scale"] = np.stack([t.size_scale for t in trajectories]).astype(np.float64)
        arrays["mass"] = np.stack([t.mass for t in trajectories]).astype(np.float64)
        if all(t.masks is not None for t in trajectories):
            arrays["masks"] = np.concatenate([t.masks for t in trajectories]).astype(np.uint8)
    path = write_records(root_p / f"{task_id}.bin", SHARD_MAGIC, arrays)
    meta = {
        "task_id": task_id,
        "file": path.name,
        "trajectories": len(trajectories),
        "steps": int(arrays["lengths"].sum()),
        "obs_dim": dims.pop() if dims else None,
        "attempts": stats.attempts if stats else None,
        "capped": stats.capped if stats else False,
        "source_run": source_run,
    }
    (root_p / f"{task_id}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def merge_manifest(root: str | Path, randomization: RandomizationConfig, obs_layout: str = OBS_LAYOUT_VERSION) -> Path:
    root_p = Path(root)
    shards = []
    for p in sorted(root_p.glob("*.json")):
        if p.name == "manifest.json":
            continue
        shards.append(json.loads(p.read_text(encoding="utf-8")))
    dims = {s["obs_dim"] for s in shards if s.get("obs_dim") is not None}
    if len(dims) > 1:
        raise DatasetError(f"{root_p}: observation widths differ across shards: {sorted(dims)}")
    manifest = {
        "obs_layout": obs_layout,
        "obs_dim": dims.pop() if dims else None,
        "randomization": randomization.to_dict(),
        "shards": shards,
        "total_trajectories": sum(s["trajectories"] for s in shards),
        "total_steps": sum(s["steps"] for s in shards),
    }
    path = root_p / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("dataset %s: %d shards, %d trajectories", root_p, len(shards), manifest["total_trajectories"])
    return path


def _read_shard(path: Path, task_id: str) -> List[Trajectory]:
    try:
        a = read_records(path, SHARD_MAGIC)
    except (OSError, ValueError) as e:
        raise DatasetError(f"{path}: {e}") from None
    lengths = a["lengths"]
    if lengths.size == 0:
        return []
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    if bounds[-1] != a["observations"].shape[0]:
        raise DatasetError(f"{path}: lengths sum {bounds[-1]} != {a['observations'].shape[0]} steps")
    out = []
    for i in range(lengths.size):
        s, e = int(bounds[i]), int(bounds[i + 1])
        out.append(
            Trajectory(
                observations=a["observations"][s:e],
                actions=a["actions"][s:e],
                executed=a["executed"][s:e],
                task_id=task_id,
                seed=int(a["seed"][i]),
                env_id=int(a["env_id"][i]),
                episode=int(a["episode"][i]),
                size_scale=a["size_scale"][i],
                mass=a["mass"][i],
                masks=a["masks"][s:e] if "masks" in a else None,
            )
        )
    return out


def load_dataset(root: str | Path, expected_layout: str = OBS_LAYOUT_VERSION) -> Dataset:
    root_p = Path(root)
    try:
        manifest = json.loads((root_p / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DatasetError(f"{root_p}: missing manifest.json") from None
    except json.JSONDecodeError as e:
        raise DatasetError(f"{root_p / 'manifest.json'}: {e}") from None
    if manifest.get("obs_layout") != expected_layout:
        raise LayoutMismatchError(f"{root_p}: observation layout {manifest.get('obs_layout')!r} != {expected_layout!r}")
    ds = Dataset(manifest=manifest)
    for s in manifest.get("shards", []):
        trajs = _read_shard(root_p / s["file"], s["task_id"])
        if len(trajs) != int(s["trajectories"]):
            raise DatasetError(f"{s['file']}: manifest says {s['trajectories']} trajectories, found {len(trajs)}")
        ds.shards[s["task_id"]] = trajs
    if ds.trajectories:
        ds.obs_dim()
    return ds


# ---------------------------
# Frame stacking
# ---------------------------
def stack_frames(frames: np.ndarray, k: int) -> np.ndarray:
    """
    (T, ...) -> (T, k, ...) with oldest frame first; frames before the start
    repeat frame 0.
    """
    f = np.asarray(frames)
    t = f.shape[0]
    idx = np.arange(t)[:, None] + np.arange(-(k - 1), 1)[None, :]
    return f[np.clip(idx, 0, None)]


# ---------------------------
# Model
# ---------------------------
class MaskEncoder(nn.Module):
    def __init__(self, in_channels: int, resolution: int, out_dim: int = 128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 16, kernel_size=5, stride=2, padding=2),
            nn.ReLU(),
            nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 32, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.net(torch.zeros(1, in_channels, resolution, resolution)).shape[1]
        self.proj = nn.Sequential(nn.Linear(flat, out_dim), nn.ReLU())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(self.net(x))


class BCNet(nn.Module):
    """ReLU MLP head over stacked state features, optionally fed by a mask encoder."""

    def __init__(
        self,
        state_dim: int,
        hidden: Sequence[int] = (512, 512, 512),
        action_dim: int = ACTION_DIM,
        mask_channels: int = 0,
        resolution: int = 64,
    ):
        super().__init__()
        self.encoder = MaskEncoder(mask_channels, resolution) if mask_channels else None
        width = state_dim + (128 if self.encoder is not None else 0)
        layers: List[nn.Module] = []
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU()]
            width = h
        layers.append(nn.Linear(width, action_dim))
        self.head = nn.Sequential(*layers)

    def forward(self, state: torch.Tensor, masks: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.encoder is not None:
            if masks is None:
                raise ContractViolation("mask-mode policy needs mask observations")
            state = torch.cat([state, self.encoder(masks)], dim=-1)
        return self.head(state)


@dataclass
class BCPolicy:
    model: BCNet
    normalizer: RunningMeanStd
    obs_dim: int
    frame_stack: int
    hidden: Tuple[int, ...]
    observation_mode: str = "state"
    mask_resolution: int = 64
    obs_layout: str = OBS_LAYOUT_VERSION

    @property
    def state_dim(self) -> int:
        """Width of one frame fed to the head: full obs, or proprio only in mask mode."""
        return self.obs_dim if self.observation_mode == "state" else BASE_DIM

    def predict(self, obs_stack: np.ndarray, mask_stack: Optional[np.ndarray] = None) -> np.ndarray:
        """obs_stack (N, k, D) -> actions (N, 7), unclipped."""
        x = self._state_input(obs_stack)
        m = None if mask_stack is None else torch.as_tensor(_flatten_masks(mask_stack), dtype=torch.float32)
        self.model.eval()
        with torch.no_grad():
            return self.model(x, m).numpy().astype(np.float64)

    def _state_input(self, obs_stack: np.ndarray) -> torch.Tensor:
        o = np.asarray(obs_stack, dtype=np.float64)
        if o.shape[-1] != self.obs_dim:
            raise ContractViolation(f"observation width {o.shape[-1]} != policy obs_dim {self.obs_dim}")
        o = self.normalizer.normalize(o)
        if self.observation_mode == "mask":
            o = o[..., :BASE_DIM]
        return torch.as_tensor(o.reshape(o.shape[0], -1), dtype=torch.float32)


def _flatten_masks(m: np.ndarray) -> np.ndarray:
    """(N, k, C, R, R) -> (N, k*C, R, R)."""
    a = np.asarray(m)
    return a.reshape(a.shape[0], a.shape[1] * a.shape[2], *a.shape[3:]).astype(np.float32)


class FrameStackPolicy:
    """Closed-loop wrapper: keeps the last k observations per env, reset when step_count is 0."""

    def __init__(self, policy: BCPolicy, sim_config: Optional[SimConfig] = None):
        self.policy = policy
        self.sim = sim_config or SimConfig()
        self._obs: Optional[np.ndarray] = None
        self._masks: Optional[np.ndarray] = None

    def __call__(self, states: EnvStateBatch, obs: np.ndarray) -> np.ndarray:
        k = self.policy.frame_stack
        obs = np.asarray(obs, dtype=np.float64)
        masks = None
        if self.policy.observation_mode == "mask":
            masks = rasterize_mask_observation(states, self.policy.mask_resolution, self.sim)
        fresh = self._obs is None or self._obs.shape[0] != obs.shape[0] or bool((states.step_count == 0).all())
        if fresh:
            self._obs = np.repeat(obs[:, None], k, axis=1)
            self._masks = None if masks is None else np.repeat(masks[:, None], k, axis=1)
        else:
            self._obs = np.concatenate([self._obs[:, 1:], obs[:, None]], axis=1)
            if masks is not None and self._masks is not None:
                self._masks = np.concatenate([self._masks[:, 1:], masks[:, None]], axis=1)
        return np.clip(self.policy.predict(self._obs, self._masks), -1.0, 1.0)


def init_bc_policy(obs_dim: int, config: BCConfig) -> BCPolicy:
    torch.manual_seed(config.seed)
    mask = config.observation_mode == "mask"
    state_dim = (BASE_DIM if mask else obs_dim) * config.frame_stack
    model = BCNet(
        state_dim,
        config.hidden,
        mask_channels=MASK_CHANNELS * config.frame_stack if mask else 0,
        resolution=config.mask_resolution,
    )
    return BCPolicy(model, RunningMeanStd(obs_dim), obs_dim, config.frame_stack, tuple(config.hidden), config.observation_mode, config.mask_resolution)


# ---------------------------
# Training
# ---------------------------
@dataclass
class BCResult:
    policy: BCPolicy
    loss_curve: List[float]
    batch_size: int


def _stacked_arrays(trajs: Sequence[Trajectory], k: int, with_masks: bool) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    obs = np.concatenate([stack_frames(t.observations, k) for t in trajs])
    act = np.concatenate([t.actions for t in trajs]).astype(np.float32)
    masks = None
    if with_masks:
        if any(t.masks is None for t in trajs):
            raise DatasetError("mask observation mode needs trajectories collected with masks")
        masks = np.concatenate([stack_frames(t.masks, k) for t in trajs])
    return obs, act, masks


def train_bc(dataset: Dataset | Sequence[Trajectory], config: Optional[BCConfig] = None) -> BCResult:
    """
    MSE behavior cloning on frame-stacked observations. Deterministic for a
    given seed; epochs = 0 returns the initialized parameters.
    """
    cfg = config or BCConfig()
    trajs = dataset.trajectories if isinstance(dataset, Dataset) else list(dataset)
    if not trajs:
        raise DatasetError("cannot train on an empty dataset")
    dims = {t.obs_dim for t in trajs}
    if len(dims) > 1:
        raise DatasetError(f"observation widths differ across shards: {sorted(dims)}")
    obs_dim = dims.pop()
    policy = init_bc_policy(obs_dim, cfg)
    all_obs = np.concatenate([t.observations for t in trajs]).astype(np.float64)
    policy.normalizer.update(all_obs)

    mask_mode = cfg.observation_mode == "mask"
    obs, act, masks = _stacked_arrays(trajs, cfg.frame_stack, mask_mode)
    batch = cfg.effective_batch_size(obs.shape[0])
    if cfg.epochs == 0:
        return BCResult(policy, [], batch)

    tensors = [policy._state_input(obs), torch.from_numpy(act)]
    if masks is not None:
        tensors.append(torch.from_numpy(_flatten_masks(masks)))
    gen = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(TensorDataset(*tensors), batch_size=batch, shuffle=True, generator=gen)

    groups = [{"params": policy.model.head.parameters(), "lr": cfg.learning_rate_head}]
    if policy.model.encoder is not None:
        groups.append({"params": policy.model.encoder.parameters(), "lr": cfg.learning_rate_encoder})
    opt = torch.optim.Adam(groups)
    criterion = nn.MSELoss()

    curve: List[float] = []
    policy.model.train()
    for epoch in range(cfg.epochs):
        running, seen = 0.0, 0
        for items in loader:
            x, y = items[0], items[1]
            m = items[2] if len(items) > 2 else None
            loss = criterion(policy.model(x, m), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += float(loss.item()) * x.shape[0]
            seen += x.shape[0]
        curve.append(running / max(seen, 1))
        logger.debug("bc epoch %d: loss %.6f", epoch, curve[-1])
    policy.model.eval()
    logger.info("bc trained %d epochs on %d samples (batch %d): loss %.6f", cfg.epochs, obs.shape[0], batch, curve[-1])
    return BCResult(policy, curve, batch)


def action_mse(policy: BCPolicy, trajectories: Sequence[Trajectory]) -> float:
    """Mean squared error of predicted vs recorded commanded actions."""
    if not trajectories:
        raise DatasetError("no trajectories to score")
    obs, act, masks = _stacked_arrays(trajectories, policy.frame_stack, policy.observation_mode == "mask")
    pred = policy.predict(obs, masks)
    return float(np.mean((pred - act.astype(np.float64)) ** 2))


# ---------------------------
# Evaluation
# ---------------------------
@dataclass
class HeldOutTask:
    task_id: str
    task: TaskSpec
    scene: SceneSpec
    ground_truth: Optional[SuccessProgram] = None

    def success(self) -> SuccessProgram:
        return self.ground_truth or default_ground_truth(self.task, self.scene)


@dataclass
class BCEvalReport:
    per_task: Dict[str, float] = field(default_factory=dict)
    per_seed: Dict[str, List[float]] = field(default_factory=dict)

    @property
    def mean_success(self) -> Optional[float]:
        if not self.per_task:
            return None
        return float(np.mean(list(self.per_task.values())))

    def to_dict(self) -> Dict[str, Any]:
        return {"per_task": dict(self.per_task), "per_seed": dict(self.per_seed), "mean_success": self.mean_success}


def evaluate_bc(
    policy: BCPolicy,
    tasks: Sequence[HeldOutTask],
    config: Optional[TrainConfig] = None,
    sim_config: Optional[SimConfig] = None,
) -> BCEvalReport:
    """rl_trainer.evaluate per held-out task (eval_episodes x eval_seeds)."""
    cfg = config or TrainConfig()
    sim = sim_config or SimConfig()
    report = BCEvalReport()
    for t in tasks:
        if policy.observation_mode == "state" and t.task.observation_dim != policy.obs_dim:
            raise LayoutMismatchError(f"task {t.task_id}: observation_dim {t.task.observation_dim} != policy obs_dim {policy.obs_dim}")
        ev = evaluate(FrameStackPolicy(policy, sim), t.success(), t.task, t.scene, cfg, sim)
        report.per_task[t.task_id] = ev.mean_success
        report.per_seed[t.task_id] = ev.per_seed
        logger.info("bc eval %s: %.3f", t.task_id, ev.mean_success)
    return report


@dataclass
class SweepPoint:
    n_tasks: int
    mean_success: Optional[float]
    per_task: Dict[str, float]


def scalability_sweep(
    dataset: Dataset,
    task_counts: Sequence[int],
    eval_tasks: Sequence[HeldOutTask],
    config: Optional[BCConfig] = None,
    eval_config: Optional[TrainConfig] = None,
    sim_config: Optional[SimConfig] = None,
) -> List[SweepPoint]:
    """Train on the first N task shards (sorted ids) for each N, evaluate on eval_tasks."""
    ids = dataset.task_ids
    points: List[SweepPoint] = []
    for n in task_counts:
        if not 1 <= n <= len(ids):
            raise ValueError(f"task count {n} outside 1..{len(ids)}")
        res = train_bc(dataset.subset(ids[:n]), config)
        rep = evaluate_bc(res.policy, eval_tasks, eval_config, sim_config)
        points.append(SweepPoint(n, rep.mean_success, dict(rep.per_task)))
    return points


# ---------------------------
# Checkpoints
# ---------------------------
def save_bc_policy(policy: BCPolicy, path: str | Path) -> Path:
    p = Path(path)
    arrays: Dict[str, np.ndarray] = {f"param/{k}": v.detach().cpu().numpy() for k, v in policy.model.state_dict().items()}
    arrays["normalizer/mean"] = policy.normalizer.mean
    arrays["normalizer/var"] = policy.normalizer.var
    write_records(p, BC_MAGIC, arrays)
    meta = {
        "format_version": BC_VERSION,
        "obs_dim": policy.obs_dim,
        "frame_stack": policy.frame_stack,
        "hidden": list(policy.hidden),
        "observation_mode": policy.observation_mode,
        "mask_resolution": policy.mask_resolution,
        "obs_layout": policy.obs_layout,
        "normalizer_count": float(policy.normalizer.count),
    }
    p.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def load_bc_policy(path: str | Path, expected_layout: str = OBS_LAYOUT_VERSION) -> BCPolicy:
    p = Path(path)
    try:
        meta = json.loads(p.with_suffix(".json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{p.with_suffix('.json')}: missing checkpoint sidecar") from None
    if meta.get("format_version") != BC_VERSION:
        raise CheckpointError(f"{p}: unsupported bc checkpoint version {meta.get('format_version')}")
    if meta.get("obs_layout") != expected_layout:
        raise LayoutMismatchError(f"{p}: observation layout {meta.get('obs_layout')!r} != {expected_layout!r}")
    try:
        arrays = read_records(p, BC_MAGIC)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{p}: {e}") from None
    cfg = BCConfig(
        frame_stack=int(meta["frame_stack"]),
        hidden=tuple(meta["hidden"]),
        observation_mode=meta["observation_mode"],
        mask_resolution=int(meta["mask_resolution"]),
    )
    policy = init_bc_policy(int(meta["obs_dim"]), cfg)
    state = {k.split("/", 1)[1]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    try:
        policy.model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{p}: {e}") from None
    policy.normalizer.mean = arrays["normalizer/mean"]
    policy.normalizer.var = arrays["normalizer/var"]
    policy.normalizer.count = float(meta.get("normalizer_count", 1.0))
    policy.model.eval()
    return policy
