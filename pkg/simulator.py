# simulator.py
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from scene_model import DEFAULT_MASS_KG, ObjectSpec, PoseSample, PoseTrack, SceneSpec
from task_dsl import (
    ContractViolation,
    FeatureBinding,
    Placement,
    ResetSpec,
    SuccessProgram,
    parse_expr,
)

logger = logging.getLogger(__name__)

ACTION_DIM = 7
HOME_OFFSET = (0.4, 0.0, 0.3)  # eef home: (x, y, table + z)
SEED_MASK = (1 << 64) - 1


class UnknownFamilyError(ValueError):
    pass


# ---------------------------
# Config
# ---------------------------
@dataclass
class SimConfig:
    """
    workspace = (x_lo, x_hi, y_lo, y_hi, z_lo, z_hi); z bounds are relative to
    the table surface. The eef is clamped to it, objects are not.
    """

    dt: float = 1.0 / 60.0
    horizon: int = 300
    num_envs: int = 256
    workspace: Tuple[float, float, float, float, float, float] = (0.1, 0.7, -0.35, 0.35, 0.0, 0.6)
    gravity: float = 9.81
    grasp_margin: float = 0.02
    friction_decay: float = 8.0
    max_step_translation: float = 0.05
    max_step_rotation: float = 0.1
    action_rotation_scale: float = 0.2
    eef_radius: float = 0.01
    max_grasp_mass: float = 1.0
    container_floor: float = 0.005

    def __post_init__(self) -> None:
        self.workspace = tuple(float(v) for v in self.workspace)  # type: ignore[assignment]
        if len(self.workspace) != 6:
            raise ValueError("workspace must have 6 bounds")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        w = self.workspace
        if not (w[0] < w[1] and w[2] < w[3] and w[4] < w[5]):
            raise ValueError(f"degenerate workspace {list(w)}")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["workspace"] = list(self.workspace)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------
# State
# ---------------------------
@dataclass
class EnvStateBatch:
    """
    Struct-of-arrays state for B environments and K objects.

    obj_size is the nominal (possibly randomized) box size exposed as the `size`
    feature; obj_extent is the axis-aligned extent used for contact, which
    differs from obj_size after a topple.
    """

    object_names: Tuple[str, ...]
    table_height: float
    env_ids: np.ndarray  # (B,) int64
    episode: int
    eef_pos: np.ndarray  # (B, 3)
    eef_euler: np.ndarray  # (B, 3)
    eef_vel: np.ndarray  # (B, 3)
    gripper_width: np.ndarray  # (B,)
    step_count: np.ndarray  # (B,) int64
    obj_pos: np.ndarray  # (B, K, 3)
    obj_quat: np.ndarray  # (B, K, 4) w, x, y, z
    obj_vel: np.ndarray  # (B, K, 3)
    obj_size: np.ndarray  # (B, K, 3)
    obj_extent: np.ndarray  # (B, K, 3)
    held: np.ndarray  # (B, K) float 0/1
    upright: np.ndarray  # (B, K) float 0/1
    init_pos: np.ndarray  # (B, K, 3)
    mass: np.ndarray  # (B, K)
    held_offset: np.ndarray  # (B, 3)
    is_container: np.ndarray  # (K,) bool

    @property
    def batch_size(self) -> int:
        return int(self.eef_pos.shape[0])

    @property
    def num_objects(self) -> int:
        return len(self.object_names)

    def index(self, name: str) -> int:
        try:
            return self.object_names.index(name)
        except ValueError:
            raise ContractViolation(f"unknown object {name!r}") from None

    def copy(self) -> "EnvStateBatch":
        return replace(self, **{f.name: getattr(self, f.name).copy() for f in fields(self) if _is_array(getattr(self, f.name))})

    def take(self, rows: Sequence[int] | np.ndarray) -> "EnvStateBatch":
        rows = np.asarray(rows, dtype=np.int64)
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if _is_array(v) and f.name != "is_container":
                out[f.name] = v[rows].copy()
        return replace(self, **out)

    @classmethod
    def concat(cls, parts: Sequence["EnvStateBatch"]) -> "EnvStateBatch":
        first = parts[0]
        out = {}
        for f in fields(first):
            v = getattr(first, f.name)
            if _is_array(v) and f.name != "is_container":
                out[f.name] = np.concatenate([getattr(p, f.name) for p in parts], axis=0)
        return replace(first, **out)

    def features(self, include_evaluation: bool = False) -> FeatureBinding:
        """
        The closed DSL namespace. `init_pos` is only bound for evaluation programs.
        """
        b = self.batch_size
        d: Dict[str, np.ndarray] = {
            "eef.pos": self.eef_pos,
            "eef.euler": self.eef_euler,
            "eef.vel": self.eef_vel,
            "gripper.width": self.gripper_width,
            "table.height": np.full(b, self.table_height),
        }
        for k, name in enumerate(self.object_names):
            d[f"{name}.pos"] = self.obj_pos[:, k]
            d[f"{name}.quat"] = self.obj_quat[:, k]
            d[f"{name}.vel_linear"] = self.obj_vel[:, k]
            d[f"{name}.size"] = self.obj_size[:, k]
            d[f"{name}.held"] = self.held[:, k]
            d[f"{name}.upright"] = self.upright[:, k]
            if include_evaluation:
                d[f"{name}.init_pos"] = self.init_pos[:, k]
        return FeatureBinding(d, self.object_names)


def _is_array(v: Any) -> bool:
    return isinstance(v, np.ndarray)


# ---------------------------
# Quaternions (w, x, y, z)
# ---------------------------
def quat_from_yaw(yaw: np.ndarray) -> np.ndarray:
    half = np.asarray(yaw, dtype=np.float64) * 0.5
    z = np.zeros_like(half)
    return np.stack([np.cos(half), z, z, np.sin(half)], axis=-1)


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


_HALF_SQRT2 = math.sqrt(0.5)


def _topple_quat(axis: str, sign: np.ndarray) -> np.ndarray:
    """90 degree rotation about x or y, direction given by sign (+1/-1)."""
    n = sign.shape[0]
    q = np.zeros((n, 4))
    q[:, 0] = _HALF_SQRT2
    q[:, 1 if axis == "x" else 2] = _HALF_SQRT2 * sign
    return q


# ---------------------------
# Reset
# ---------------------------
def _env_rng(seed: int, env_id: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & SEED_MASK, int(env_id), int(episode)])


def object_mass(obj: ObjectSpec) -> float:
    m = obj.extra.get("mass", DEFAULT_MASS_KG)
    return float(m)


def _rest_z(support: np.ndarray | float, extent_z: np.ndarray | float) -> np.ndarray:
    return np.asarray(support) + np.asarray(extent_z) / 2


def reset(
    spec: ResetSpec,
    scene: SceneSpec,
    config: SimConfig,
    seed: int,
    *,
    env_ids: Optional[Sequence[int]] = None,
    episode: int = 0,
    size_scale: Optional[np.ndarray] = None,
    mass: Optional[np.ndarray] = None,
) -> EnvStateBatch:
    """
    Sample a batch of initial states.

    Env b draws from default_rng([seed, env_ids[b], episode]), so an env's state
    does not depend on which batch it is reset in. Placements are resolved in
    declaration order; relative placements read their anchor's sampled pose.
    size_scale / mass are optional (B, K) overrides used by randomization.
    """
    names = tuple(scene.object_names)
    k_count = len(names)
    ids = np.arange(config.num_envs, dtype=np.int64) if env_ids is None else np.asarray(env_ids, dtype=np.int64)
    b = ids.shape[0]
    table = float(scene.table_height)

    nominal = np.array([o.size for o in scene.objects], dtype=np.float64).reshape(k_count, 3)
    scale = np.ones((b, k_count)) if size_scale is None else np.asarray(size_scale, dtype=np.float64).reshape(b, k_count)
    sizes = nominal[None, :, :] * scale[:, :, None]
    masses = (
        np.tile(np.array([object_mass(o) for o in scene.objects], dtype=np.float64), (b, 1))
        if mass is None
        else np.asarray(mass, dtype=np.float64).reshape(b, k_count)
    )

    pos = np.zeros((b, k_count, 3))
    yaw = np.zeros((b, k_count))
    index = {n: i for i, n in enumerate(names)}
    for row, env_id in enumerate(ids):
        rng = _env_rng(seed, int(env_id), episode)
        placed: set = set()
        for p in spec.placements:
            k = index.get(p.obj)
            if k is None:
                raise ContractViolation(f"placement for unknown object {p.obj!r}")
            height = sizes[row, k, 2]
            if p.mode == "fixed":
                x, y, th = p.pos[0], p.pos[1], p.yaw
                z = _rest_z(table, height)
            elif p.mode == "uniform":
                x = rng.uniform(*p.x_range)
                y = rng.uniform(*p.y_range)
                th = rng.uniform(*p.yaw_range)
                z = _rest_z(table, height)
            else:
                a = index.get(p.anchor or "")
                if a is None or p.anchor not in placed:
                    raise ContractViolation(f"anchor {p.anchor!r} of {p.obj!r} is not placed yet")
                x = pos[row, a, 0] + rng.uniform(*p.x_range)
                y = pos[row, a, 1] + rng.uniform(*p.y_range)
                th = rng.uniform(*p.yaw_range)
                if p.on_top:
                    z = _rest_z(pos[row, a, 2] + sizes[row, a, 2] / 2, height)
                else:
                    z = _rest_z(table, height)
            pos[row, k] = (x, y, z)
            yaw[row, k] = th
            placed.add(p.obj)
        missing = set(names) - placed
        if missing:
            raise ContractViolation(f"objects without placement: {sorted(missing)}")

    home = np.array([HOME_OFFSET[0], HOME_OFFSET[1], table + HOME_OFFSET[2]])
    return EnvStateBatch(
        object_names=names,
        table_height=table,
        env_ids=ids.copy(),
        episode=int(episode),
        eef_pos=np.tile(home, (b, 1)),
        eef_euler=np.zeros((b, 3)),
        eef_vel=np.zeros((b, 3)),
        gripper_width=np.ones(b),
        step_count=np.zeros(b, dtype=np.int64),
        obj_pos=pos,
        obj_quat=quat_from_yaw(yaw),
        obj_vel=np.zeros((b, k_count, 3)),
        obj_size=sizes,
        obj_extent=sizes.copy(),
        held=np.zeros((b, k_count)),
        upright=np.ones((b, k_count)),
        init_pos=pos.copy(),
        mass=masses,
        held_offset=np.zeros((b, 3)),
        is_container=np.array([bool(o.is_container) for o in scene.objects], dtype=bool),
    )


# ---------------------------
# Step
# ---------------------------
def _support(s: EnvStateBatch, k: int, cfg: SimConfig) -> Tuple[np.ndarray, np.ndarray]:
    """
    Height of the surface object k rests on, per env, and whether it is a
    container floor. Candidates: the table, the top of any free object whose
    footprint contains k's center and whose top is at or below k's bottom,
    the floor of any free container whose footprint contains k's center.
    """
    b = s.batch_size
    sup = np.full(b, s.table_height)
    in_container = np.zeros(b, dtype=bool)
    c = s.obj_pos[:, k]
    bottom = c[:, 2] - s.obj_extent[:, k, 2] / 2
    for j in range(s.num_objects):
        if j == k:
            continue
        free = s.held[:, j] < 0.5
        he = s.obj_extent[:, j] / 2
        inside = free & (np.abs(c[:, 0] - s.obj_pos[:, j, 0]) < he[:, 0]) & (np.abs(c[:, 1] - s.obj_pos[:, j, 1]) < he[:, 1])
        if s.is_container[j]:
            floor = (s.obj_pos[:, j, 2] - he[:, 2]) + cfg.container_floor
            sup = np.where(inside, np.maximum(sup, floor), sup)
            in_container |= inside
        else:
            top = s.obj_pos[:, j, 2] + he[:, 2]
            on = inside & (top <= bottom + 1e-6)
            sup = np.where(on, np.maximum(sup, top), sup)
    return sup, in_container


def _check_actions(states: EnvStateBatch, actions: Any, cfg: SimConfig) -> np.ndarray:
    a = np.asarray(actions, dtype=np.float64)
    if a.shape != (states.batch_size, ACTION_DIM):
        raise ContractViolation(f"actions must be ({states.batch_size}, {ACTION_DIM}), got {a.shape}")
    bad = ~np.isfinite(a).all(axis=1)
    if bad.any():
        raise ContractViolation(f"non-finite action in env {int(np.flatnonzero(bad)[0])}")
    if (states.step_count >= cfg.horizon).any():
        env = int(np.flatnonzero(states.step_count >= cfg.horizon)[0])
        raise ContractViolation(f"env {env} is past the horizon; reset first")
    return np.clip(a, -1.0, 1.0)


def _push(
    s: EnvStateBatch,
    pusher: np.ndarray,
    prev_pusher: np.ndarray,
    half: np.ndarray,
    active: np.ndarray,
    skip: Optional[np.ndarray],
    cfg: SimConfig,
) -> None:
    """
    Displace free boxes overlapped by a pusher box along the horizontal axis
    of minimum penetration. Only pushers that were outside the footprint on
    the previous step push, so grasping from above never shoves the target.
    """
    for k in range(s.num_objects):
        free = active & (s.held[:, k] < 0.5)
        if skip is not None:
            free &= ~skip[:, k]
        if not free.any():
            continue
        c = s.obj_pos[:, k]
        lim = s.obj_extent[:, k] / 2 + half
        d = c - pusher
        overlap = free & (np.abs(d) < lim).all(axis=1)
        pd = c - prev_pusher
        out_x = np.abs(pd[:, 0]) >= lim[:, 0]
        out_y = np.abs(pd[:, 1]) >= lim[:, 1]
        hit = overlap & (out_x | out_y)
        if not hit.any():
            continue
        # the side the pusher came from decides the direction, even if it has
        # already passed the center this step
        sign_x = np.where(pd[:, 0] >= 0, 1.0, -1.0)
        sign_y = np.where(pd[:, 1] >= 0, 1.0, -1.0)
        need_x = sign_x * lim[:, 0] - d[:, 0]
        need_y = sign_y * lim[:, 1] - d[:, 1]
        use_x = out_x & (~out_y | (np.abs(need_x) <= np.abs(need_y)))
        disp_x = np.where(hit & use_x, need_x, 0.0)
        disp_y = np.where(hit & ~use_x, need_y, 0.0)
        s.obj_pos[:, k, 0] += disp_x
        s.obj_pos[:, k, 1] += disp_y
        s.obj_vel[:, k, 0] = np.where(hit & use_x, disp_x / cfg.dt, s.obj_vel[:, k, 0])
        s.obj_vel[:, k, 1] = np.where(hit & ~use_x, disp_y / cfg.dt, s.obj_vel[:, k, 1])

        # topple: high contact and a fast shove on a standing box
        ext = s.obj_extent[:, k]
        contact_h = pusher[:, 2] - (c[:, 2] - ext[:, 2] / 2)
        width = np.where(use_x, ext[:, 0], ext[:, 1])
        moved = np.abs(disp_x) + np.abs(disp_y)
        tip = hit & (s.upright[:, k] > 0.5) & (contact_h > 0.7 * ext[:, 2]) & (moved > 0.25 * width)
        if tip.any():
            _topple(s, k, tip, use_x, np.where(use_x, sign_x, sign_y), cfg)


def _topple(s: EnvStateBatch, k: int, tip: np.ndarray, along_x: np.ndarray, sign: np.ndarray, cfg: SimConfig) -> None:
    ext = s.obj_extent[:, k]
    new_ext = ext.copy()
    new_ext[:, 0] = np.where(along_x, ext[:, 2], ext[:, 0])
    new_ext[:, 1] = np.where(along_x, ext[:, 1], ext[:, 2])
    new_ext[:, 2] = np.where(along_x, ext[:, 0], ext[:, 1])
    # push along x rotates about +y; push along y rotates about -x
    q_y = _topple_quat("y", sign)
    q_x = _topple_quat("x", -sign)
    q_rot = np.where(along_x[:, None], q_y, q_x)
    new_q = _normalize_quat(quat_mul(q_rot, s.obj_quat[:, k]))
    s.obj_extent[:, k] = np.where(tip[:, None], new_ext, ext)
    s.obj_quat[:, k] = np.where(tip[:, None], new_q, s.obj_quat[:, k])
    s.upright[:, k] = np.where(tip, 0.0, s.upright[:, k])
    sup, _ = _support(s, k, cfg)
    s.obj_pos[:, k, 2] = np.where(tip, _rest_z(sup, s.obj_extent[:, k, 2]), s.obj_pos[:, k, 2])
    s.obj_vel[:, k, 2] = np.where(tip, 0.0, s.obj_vel[:, k, 2])


def step(states: EnvStateBatch, actions: Any, config: SimConfig) -> EnvStateBatch:
    """
    Advance every env by one control step. Returns a new batch.

    Order: clip; move eef (clamped to the workspace); set gripper; release held
    objects on open (they inherit the eef velocity); carry still-held objects;
    grasp on close; integrate free objects under gravity with table / stack /
    container support and friction; push and topple; step_count += 1.
    """
    cfg = config
    a = _check_actions(states, actions, cfg)
    s = states.copy()
    dt = cfg.dt
    w = cfg.workspace
    table = s.table_height

    # eef
    prev_eef = s.eef_pos.copy()
    lo = np.array([w[0], w[2], table + w[4]])
    hi = np.array([w[1], w[3], table + w[5]])
    s.eef_pos = np.clip(s.eef_pos + a[:, :3] * cfg.max_step_translation, lo, hi)
    s.eef_vel = (s.eef_pos - prev_eef) / dt
    prev_euler = s.eef_euler
    s.eef_euler = np.clip(s.eef_euler + a[:, 3:6] * (cfg.max_step_rotation * cfg.action_rotation_scale), -math.pi, math.pi)
    dyaw = s.eef_euler[:, 2] - prev_euler[:, 2]

    close = a[:, 6] > 0
    s.gripper_width = np.where(close, 0.0, 1.0)

    held_mask = s.held > 0.5  # (B, K)
    prev_obj = s.obj_pos.copy()

    # release; grasp runs after carry. Release rows are open, grasp rows closed, so
    # their relative order never changes the state.
    release = ~close & held_mask.any(axis=1)
    if release.any():
        rel = held_mask & release[:, None]
        s.obj_vel = np.where(rel[:, :, None], s.eef_vel[:, None, :], s.obj_vel)
        s.held = np.where(rel, 0.0, s.held)
        held_mask = s.held > 0.5

    # carry
    if held_mask.any():
        cos_t, sin_t = np.cos(dyaw), np.sin(dyaw)
        off = s.held_offset
        rot_off = np.stack([cos_t * off[:, 0] - sin_t * off[:, 1], sin_t * off[:, 0] + cos_t * off[:, 1], off[:, 2]], axis=1)
        qz = quat_from_yaw(dyaw)
        for k in range(s.num_objects):
            m = held_mask[:, k]
            if not m.any():
                continue
            target = s.eef_pos + rot_off
            sup, _ = _support(s, k, cfg)
            target[:, 2] = np.maximum(target[:, 2], _rest_z(sup, s.obj_extent[:, k, 2]))
            s.obj_vel[:, k] = np.where(m[:, None], (target - s.obj_pos[:, k]) / dt, s.obj_vel[:, k])
            s.obj_pos[:, k] = np.where(m[:, None], target, s.obj_pos[:, k])
            s.obj_quat[:, k] = np.where(m[:, None], _normalize_quat(quat_mul(qz, s.obj_quat[:, k])), s.obj_quat[:, k])
            s.held_offset = np.where(m[:, None], target - s.eef_pos, s.held_offset)

    # grasp
    can = close & ~held_mask.any(axis=1)
    if can.any() and s.num_objects:
        dist = np.linalg.norm(s.obj_pos - s.eef_pos[:, None, :], axis=2)
        radius = s.obj_extent.max(axis=2) / 2 + cfg.grasp_margin
        eligible = can[:, None] & (dist < radius) & (s.mass <= cfg.max_grasp_mass)
        masked = np.where(eligible, dist, np.inf)
        k_best = np.argmin(masked, axis=1)
        got = np.isfinite(masked[np.arange(s.batch_size), k_best])
        if got.any():
            rows = np.flatnonzero(got)
            cols = k_best[rows]
            s.held[rows, cols] = 1.0
            s.obj_vel[rows, cols] = 0.0
            s.held_offset[rows] = s.obj_pos[rows, cols] - s.eef_pos[rows]
            held_mask = s.held > 0.5

    # free flight + support
    decay = math.exp(-cfg.friction_decay * dt)
    g = cfg.gravity
    for k in range(s.num_objects):
        free = ~held_mask[:, k]
        if not free.any():
            continue
        sup, in_cont = _support(s, k, cfg)
        p = s.obj_pos[:, k]
        v = s.obj_vel[:, k]
        z_new = p[:, 2] + v[:, 2] * dt - 0.5 * g * dt * dt
        vz_new = v[:, 2] - g * dt
        x_new = p[:, 0] + v[:, 0] * dt
        y_new = p[:, 1] + v[:, 1] * dt
        rest = _rest_z(sup, s.obj_extent[:, k, 2])
        contact = z_new <= rest
        z_new = np.where(contact, rest, z_new)
        vz_new = np.where(contact, 0.0, vz_new)
        vx = np.where(contact, v[:, 0] * decay, v[:, 0])
        vy = np.where(contact, v[:, 1] * decay, v[:, 1])
        stop = contact & (in_cont | (np.hypot(vx, vy) < 1e-3))
        vx = np.where(stop, 0.0, vx)
        vy = np.where(stop, 0.0, vy)
        s.obj_pos[:, k] = np.where(free[:, None], np.stack([x_new, y_new, z_new], axis=1), p)
        s.obj_vel[:, k] = np.where(free[:, None], np.stack([vx, vy, vz_new], axis=1), v)

    # push: eef sphere, then the held box
    if s.num_objects:
        all_envs = np.ones(s.batch_size, dtype=bool)
        _push(s, s.eef_pos, prev_eef, np.full((s.batch_size, 3), cfg.eef_radius), all_envs, None, cfg)
        carrying = held_mask.any(axis=1)
        if carrying.any():
            kh = np.argmax(held_mask, axis=1)
            rows = np.arange(s.batch_size)
            _push(
                s,
                s.obj_pos[rows, kh],
                prev_obj[rows, kh],
                s.obj_extent[rows, kh] / 2,
                carrying,
                held_mask,
                cfg,
            )

    s.step_count = s.step_count + 1
    return s


def is_terminal(states: EnvStateBatch, config: SimConfig) -> np.ndarray:
    return states.step_count >= config.horizon


# ---------------------------
# Random states (validation sampling)
# ---------------------------
def random_states(scene: SceneSpec, n: int, seed: int = 0, config: Optional[SimConfig] = None) -> EnvStateBatch:
    """
    States spread over the reachable workspace: eef anywhere, objects resting
    or raised, occasionally toppled, held, or displaced from their start.
    """
    cfg = config or SimConfig()
    rng = np.random.default_rng([int(seed) & SEED_MASK, 0x5EED])
    w = cfg.workspace
    table = float(scene.table_height)
    names = tuple(scene.object_names)
    k_count = len(names)

    def xy(shape: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
        return rng.uniform(w[0], w[1], shape), rng.uniform(w[2], w[3], shape)

    ex, ey = xy((n,))
    eef = np.stack([ex, ey, table + rng.uniform(w[4], w[5], n)], axis=1)
    nominal = np.array([o.size for o in scene.objects], dtype=np.float64).reshape(k_count, 3)
    sizes = np.tile(nominal, (n, 1, 1))
    extent = sizes.copy()
    upright = np.ones((n, k_count))
    quat = quat_from_yaw(rng.uniform(-math.pi, math.pi, (n, k_count)))
    toppled = rng.random((n, k_count)) < 0.1
    if toppled.any():
        extent[toppled] = extent[toppled][:, [2, 1, 0]]
        upright[toppled] = 0.0
        quat[toppled] = quat_mul(_topple_quat("y", np.ones(int(toppled.sum()))), quat[toppled])

    ox, oy = xy((n, k_count))
    raised = rng.random((n, k_count)) < 0.5
    oz = table + extent[:, :, 2] / 2 + np.where(raised, rng.uniform(0.0, 0.4, (n, k_count)), 0.0)
    pos = np.stack([ox, oy, oz], axis=2)
    vel = np.where(rng.random((n, k_count, 1)) < 0.3, rng.normal(0.0, 0.1, (n, k_count, 3)), 0.0)

    held = np.zeros((n, k_count))
    if k_count:
        holding = rng.random(n) < 0.2
        which = rng.integers(0, k_count, n)
        rows = np.flatnonzero(holding)
        held[rows, which[rows]] = 1.0
        pos[rows, which[rows]] = eef[rows]

    ix, iy = xy((n, k_count))
    init = np.stack([ix, iy, table + sizes[:, :, 2] / 2], axis=2)
    same = rng.random((n, k_count)) < 0.3
    init = np.where(same[:, :, None], pos, init)

    return EnvStateBatch(
        object_names=names,
        table_height=table,
        env_ids=np.arange(n, dtype=np.int64),
        episode=0,
        eef_pos=eef,
        eef_euler=rng.normal(0.0, 0.3, (n, 3)),
        eef_vel=rng.normal(0.0, 0.2, (n, 3)),
        gripper_width=rng.integers(0, 2, n).astype(np.float64),
        step_count=np.zeros(n, dtype=np.int64),
        obj_pos=pos,
        obj_quat=quat,
        obj_vel=vel,
        obj_size=sizes,
        obj_extent=extent,
        held=held,
        upright=upright,
        init_pos=init,
        mass=np.tile(np.array([object_mass(o) for o in scene.objects], dtype=np.float64), (n, 1)),
        held_offset=np.zeros((n, 3)),
        is_container=np.array([bool(o.is_container) for o in scene.objects], dtype=bool),
    )


# ---------------------------
# Built-in task families
# ---------------------------
FAMILIES = (
    "reach",
    "grasp",
    "lift",
    "push_left",
    "push_right",
    "tip_over",
    "cover",
    "uncover",
    "push_next_to",
    "drop_in_front",
    "insert",
    "slide_to",
    "throw_into",
)
TARGET_FAMILIES = {"cover", "uncover", "push_next_to", "drop_in_front", "insert", "slide_to", "throw_into"}

_GROUND_TRUTH = {
    "reach": "norm(eef.pos - {o}.pos) < 0.03",
    "grasp": "{o}.held > 0.5",
    "lift": "({o}.pos[2] - table.height) > max({o}.size[0], max({o}.size[1], {o}.size[2])) / 2",
    "push_left": "{o}.pos[0] - {o}.init_pos[0] < -0.1",
    "push_right": "{o}.pos[0] - {o}.init_pos[0] > 0.1",
    "tip_over": "{o}.upright < 0.5",
    "cover": "norm(({o}.pos - {t}.pos)[0:2]) < 0.03 & {o}.pos[2] > {t}.pos[2] & {o}.held < 0.5",
    "uncover": "norm(({o}.pos - {t}.pos)[0:2]) > 0.1 & {o}.held < 0.5 & {o}.pos[2] - table.height < {o}.size[2]",
    "push_next_to": "norm(({o}.pos - {t}.pos)[0:2]) < 0.08 & {o}.held < 0.5 & {o}.pos[2] < {t}.pos[2] + {t}.size[2] / 2",
    "drop_in_front": (
        "{t}.pos[0] - {o}.pos[0] > 0.05 & {t}.pos[0] - {o}.pos[0] < 0.2 & "
        "abs({t}.pos[1] - {o}.pos[1]) < 0.05 & {o}.held < 0.5"
    ),
    "insert": (
        "abs({o}.pos[0] - {t}.pos[0]) < {t}.size[0] / 2 & abs({o}.pos[1] - {t}.pos[1]) < {t}.size[1] / 2 & "
        "{o}.pos[2] < {t}.pos[2] + {t}.size[2] / 2 & {o}.held < 0.5"
    ),
    "slide_to": "norm(({o}.pos - {t}.pos)[0:2]) < 0.06 & {o}.held < 0.5",
}
_GROUND_TRUTH["throw_into"] = _GROUND_TRUTH["insert"]


def _require_family(family: str) -> None:
    if family not in FAMILIES:
        raise UnknownFamilyError(f"unknown task family {family!r}; expected one of {list(FAMILIES)}")


def builtin_ground_truth(family: str, obj: str = "obj", target: str = "target") -> SuccessProgram:
    """
    Human-authored success programs used for evaluation only. They may read
    `<obj>.init_pos`, which generated programs cannot.
    """
    _require_family(family)
    return SuccessProgram(parse_expr(_GROUND_TRUTH[family].format(o=obj, t=target)))


# name -> (size, is_container)
_SCENE_OBJECTS: Dict[str, List[Tuple[str, Tuple[float, float, float], bool]]] = {
    "reach": [("obj", (0.04, 0.04, 0.04), False)],
    "grasp": [("obj", (0.04, 0.04, 0.04), False)],
    "lift": [("obj", (0.04, 0.04, 0.04), False)],
    "push_left": [("obj", (0.05, 0.05, 0.05), False)],
    "push_right": [("obj", (0.05, 0.05, 0.05), False)],
    "tip_over": [("obj", (0.03, 0.03, 0.12), False)],
    "cover": [("target", (0.04, 0.04, 0.04), False), ("obj", (0.06, 0.06, 0.05), False)],
    "uncover": [("target", (0.04, 0.04, 0.04), False), ("obj", (0.06, 0.06, 0.03), False)],
    "push_next_to": [("target", (0.04, 0.04, 0.04), False), ("obj", (0.04, 0.04, 0.04), False)],
    "drop_in_front": [("target", (0.05, 0.05, 0.05), False), ("obj", (0.04, 0.04, 0.04), False)],
    "insert": [("target", (0.15, 0.15, 0.06), True), ("obj", (0.04, 0.04, 0.04), False)],
    "slide_to": [("target", (0.10, 0.10, 0.005), False), ("obj", (0.04, 0.04, 0.04), False)],
    "throw_into": [("obj", (0.04, 0.04, 0.04), False), ("target", (0.15, 0.15, 0.06), True)],
}

_CAPTIONS = {
    "reach": "Reaching toward a block",
    "grasp": "Grasping a block",
    "lift": "Lifting a block up",
    "push_left": "Pushing a box from right to left",
    "push_right": "Pushing a box from left to right",
    "tip_over": "Tipping a bottle over",
    "cover": "Covering a block with a cup",
    "uncover": "Removing a lid from a block",
    "push_next_to": "Pushing a block next to another block",
    "drop_in_front": "Dropping a block in front of a box",
    "insert": "Putting a block into a bowl",
    "slide_to": "Sliding a block onto a mat",
    "throw_into": "Throwing a block into a bowl",
}


def builtin_scene(family: str) -> SceneSpec:
    """A small synthetic scene per family, as a stand-in for an ingested video."""
    _require_family(family)
    objects = []
    for name, size, container in _SCENE_OBJECTS[family]:
        diameter = float(np.linalg.norm(size))
        first = PoseSample(0, (0.4, 0.0, size[2] / 2), (1.0, 0.0, 0.0, 0.0))
        objects.append(
            ObjectSpec(
                name=name,
                mesh_diameter=diameter,
                size=size,
                scale_ratio=1.0,
                urdf_path=f"{name}.urdf",
                pose_track=PoseTrack([first, PoseSample(30, _final_position(family, name, first.position), first.orientation)]),
                is_container=container,
            )
        )
    return SceneSpec(task_title=family, caption=_CAPTIONS[family], objects=objects)


def _final_position(family: str, name: str, start: Tuple[float, float, float]) -> Tuple[float, float, float]:
    x, y, z = start
    if name != "obj":
        return start
    moves = {
        "lift": (0.0, 0.0, 0.15),
        "grasp": (0.0, 0.0, 0.02),
        "push_left": (-0.15, 0.0, 0.0),
        "push_right": (0.15, 0.0, 0.0),
        "throw_into": (0.5, 0.0, 0.0),
    }
    dx, dy, dz = moves.get(family, (0.0, 0.1, 0.0))
    return (x + dx, y + dy, z + dz)


_QUARTER = math.pi / 4


def default_reset(family: str, scene: Optional[SceneSpec] = None) -> ResetSpec:
    _require_family(family)
    U, R = "uniform", "relative"
    by_family: Dict[str, List[Placement]] = {
        "reach": [Placement("obj", U, (0.3, 0.5), (-0.15, 0.15), (-_QUARTER, _QUARTER))],
        "push_left": [Placement("obj", U, (0.4, 0.5), (-0.1, 0.1))],
        "push_right": [Placement("obj", U, (0.3, 0.4), (-0.1, 0.1))],
        "tip_over": [Placement("obj", U, (0.35, 0.45), (-0.1, 0.1))],
        "cover": [
            Placement("target", U, (0.3, 0.5), (-0.15, 0.0)),
            Placement("obj", R, (-0.05, 0.05), (0.12, 0.18), anchor="target"),
        ],
        "uncover": [
            Placement("target", U, (0.3, 0.5), (-0.15, 0.0)),
            Placement("obj", R, (0.0, 0.0), (0.0, 0.0), anchor="target", on_top=True),
        ],
        "push_next_to": [
            Placement("target", U, (0.3, 0.5), (0.05, 0.15)),
            Placement("obj", R, (-0.05, 0.05), (-0.25, -0.15), anchor="target"),
        ],
        "drop_in_front": [
            Placement("target", U, (0.45, 0.55), (-0.1, 0.1)),
            Placement("obj", R, (-0.05, 0.05), (0.12, 0.2), anchor="target"),
        ],
        "insert": [
            Placement("target", U, (0.35, 0.5), (0.05, 0.15)),
            Placement("obj", R, (-0.05, 0.05), (-0.25, -0.15), anchor="target"),
        ],
        "slide_to": [
            Placement("target", U, (0.3, 0.5), (0.1, 0.2)),
            Placement("obj", R, (-0.05, 0.05), (-0.3, -0.2), anchor="target"),
        ],
        "throw_into": [
            Placement("obj", U, (0.3, 0.4), (-0.05, 0.05)),
            Placement("target", U, (0.8, 0.9), (-0.03, 0.03), beyond_reach=True),
        ],
    }
    by_family["grasp"] = by_family["reach"]
    by_family["lift"] = by_family["reach"]
    return ResetSpec(tuple(by_family[family]))


# ---------------------------
# Scripted experts
# ---------------------------
class ScriptedController:
    """
    Stateless expert for a task family: actions are a function of the current
    state only, so it can drive any batch at any step.

    Usable as a policy: controller(states, obs=None) -> (B, 7) actions.
    """

    def __init__(self, family: str, config: Optional[SimConfig] = None, obj: str = "obj", target: str = "target"):
        _require_family(family)
        self.family = family
        self.config = config or SimConfig()
        self.obj = obj
        self.target = target

    def __call__(self, states: EnvStateBatch, obs: Any = None) -> np.ndarray:
        f = self.family
        if f in ("reach", "grasp", "lift"):
            return self._pick(states, f)
        if f in ("push_left", "push_right"):
            return self._push(states, 1.0 if f == "push_right" else -1.0, 0.3, 0.5)
        if f == "tip_over":
            return self._push(states, 1.0, 0.85, 1.0)
        if f == "throw_into":
            return self._throw(states)
        return self._pick_place(states)

    # helpers
    def _move(self, eef: np.ndarray, goal: np.ndarray, speed: float = 1.0) -> np.ndarray:
        return np.clip((goal - eef) / self.config.max_step_translation, -speed, speed)

    def _via_above(self, eef: np.ndarray, goal: np.ndarray, safe_z: np.ndarray, tol: float = 0.005) -> np.ndarray:
        """Target point: rise to safe_z, travel at safe_z, then descend onto goal."""
        far = np.hypot(goal[:, 0] - eef[:, 0], goal[:, 1] - eef[:, 1]) > tol
        low = eef[:, 2] < safe_z - 0.005
        rise = np.stack([eef[:, 0], eef[:, 1], safe_z], axis=1)
        travel = np.stack([goal[:, 0], goal[:, 1], safe_z], axis=1)
        return np.where((far & low)[:, None], rise, np.where(far[:, None], travel, goal))

    def _actions(self, move: np.ndarray, grip: np.ndarray) -> np.ndarray:
        out = np.zeros((move.shape[0], ACTION_DIM))
        out[:, :3] = move
        out[:, 6] = grip
        return out

    def _grasp_move(self, s: EnvStateBatch, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Approach object k from above and close on its center once it is still."""
        eef = s.eef_pos
        c = s.obj_pos[:, k]
        safe = c[:, 2] + s.obj_extent[:, k, 2] / 2 + 0.05
        goal = self._via_above(eef, c, safe)
        at = np.linalg.norm(eef - c, axis=1) < 0.01
        slow = np.linalg.norm(s.obj_vel[:, k], axis=1) < 0.05
        return self._move(eef, goal), np.where(at & slow, 1.0, -1.0)

    def _pick(self, s: EnvStateBatch, family: str) -> np.ndarray:
        k = s.index(self.obj)
        move, grip = self._grasp_move(s, k)
        held = s.held[:, k] > 0.5
        if family == "reach":
            return self._actions(move, np.full(s.batch_size, -1.0))
        if family == "grasp":
            move = np.where(held[:, None], 0.0, move)
        else:
            up = np.zeros_like(move)
            up[:, 2] = 1.0
            move = np.where(held[:, None], up, move)
        return self._actions(move, np.where(held, 1.0, grip))

    def _push(self, s: EnvStateBatch, direction: float, contact_frac: float, speed: float) -> np.ndarray:
        k = s.index(self.obj)
        eef = s.eef_pos
        c = s.obj_pos[:, k]
        ext = s.obj_extent[:, k]
        r = self.config.eef_radius
        contact_z = c[:, 2] - ext[:, 2] / 2 + contact_frac * ext[:, 2]
        behind = np.stack([c[:, 0] - direction * (ext[:, 0] / 2 + r + 0.02), c[:, 1], contact_z], axis=1)

        aligned = (np.abs(eef[:, 1] - c[:, 1]) < 0.02) & (np.abs(eef[:, 2] - contact_z) < 0.015)
        rear = direction * (c[:, 0] - eef[:, 0]) > 0
        pushing = aligned & rear

        approach = self._move(eef, self._via_above(eef, behind, c[:, 2] + ext[:, 2] / 2 + 0.05))
        drive = self._move(eef, np.stack([eef[:, 0], c[:, 1], contact_z], axis=1))
        drive[:, 0] = direction * speed
        move = np.where(pushing[:, None], drive, approach)

        if self.family == "tip_over":
            done = s.upright[:, k] < 0.5
        else:
            done = direction * (c[:, 0] - s.init_pos[:, k, 0]) > 0.15
        move = np.where(done[:, None], 0.0, move)
        return self._actions(move, np.full(s.batch_size, -1.0))

    def _place_goal(self, s: EnvStateBatch, k: int, t: int) -> Tuple[np.ndarray, np.ndarray, float]:
        """(goal xy per env, resting center z of the object at the goal, xy tolerance)."""
        tc = s.obj_pos[:, t]
        tex = s.obj_extent[:, t]
        h = s.obj_extent[:, k, 2] / 2
        table = s.table_height
        f = self.family
        if f == "cover":
            return tc[:, :2], tc[:, 2] + tex[:, 2] / 2 + h, 0.01
        if f == "insert":
            floor = tc[:, 2] - tex[:, 2] / 2 + self.config.container_floor
            return tc[:, :2], floor + h, 0.02
        if f == "uncover":
            goal = np.stack([tc[:, 0], tc[:, 1] + 0.15], axis=1)
            return goal, np.full(s.batch_size, table) + h, 0.02
        if f == "push_next_to":
            goal = np.stack([tc[:, 0], tc[:, 1] - 0.06], axis=1)
            return goal, np.full(s.batch_size, table) + h, 0.01
        if f == "drop_in_front":
            goal = np.stack([tc[:, 0] - 0.12, tc[:, 1]], axis=1)
            return goal, np.full(s.batch_size, table) + h + 0.03, 0.015
        # slide_to
        return tc[:, :2], tc[:, 2] + tex[:, 2] / 2 + h, 0.015

    def _pick_place(self, s: EnvStateBatch) -> np.ndarray:
        k = s.index(self.obj)
        t = s.index(self.target)
        eef = s.eef_pos
        c = s.obj_pos[:, k]
        held = s.held[:, k] > 0.5
        goal_xy, place_z, tol = self._place_goal(s, k, t)

        carry_z = np.maximum(place_z, s.obj_pos[:, t, 2] + s.obj_extent[:, t, 2] / 2 + s.obj_extent[:, k, 2]) + 0.06
        obj_goal = np.stack([goal_xy[:, 0], goal_xy[:, 1], place_z], axis=1)
        offset = c - eef
        carry_target = self._via_above(c, obj_goal, carry_z, tol=0.004) - offset
        carry_move = self._move(eef, carry_target)
        over_goal = np.hypot(c[:, 0] - goal_xy[:, 0], c[:, 1] - goal_xy[:, 1]) < 0.004
        low_enough = c[:, 2] - place_z < 0.01
        release = held & over_goal & low_enough

        grasp_move, grasp_grip = self._grasp_move(s, k)
        placed = ~held & (np.hypot(c[:, 0] - goal_xy[:, 0], c[:, 1] - goal_xy[:, 1]) < tol)
        retreat = np.zeros_like(eef)
        retreat[:, 2] = 1.0

        move = np.where(held[:, None], carry_move, np.where(placed[:, None], retreat, grasp_move))
        grip = np.where(held, np.where(release, -1.0, 1.0), np.where(placed, -1.0, grasp_grip))
        return self._actions(move, grip)

    def _throw(self, s: EnvStateBatch) -> np.ndarray:
        k = s.index(self.obj)
        t = s.index(self.target)
        cfg = self.config
        eef = s.eef_pos
        c = s.obj_pos[:, k]
        tc = s.obj_pos[:, t]
        held = s.held[:, k] > 0.5
        speed = 0.5
        throw_z = s.table_height + 0.15
        start = np.stack([np.full(s.batch_size, 0.35), tc[:, 1], np.full(s.batch_size, throw_z)], axis=1)

        at_start_line = (np.abs(eef[:, 1] - tc[:, 1]) < 0.005) & (np.abs(eef[:, 2] - throw_z) < 0.005) & (eef[:, 0] >= 0.345)
        # predicted landing x if released after the next step at full throw speed
        vx = speed * cfg.max_step_translation / cfg.dt
        floor = tc[:, 2] - s.obj_extent[:, t, 2] / 2 + cfg.container_floor
        drop = np.maximum(c[:, 2] - (floor + s.obj_extent[:, k, 2] / 2), 0.0)
        land_x = c[:, 0] + speed * cfg.max_step_translation + vx * np.sqrt(2.0 * drop / cfg.gravity)
        let_go = at_start_line & (land_x >= tc[:, 0] - 0.01)

        windup = self._move(eef, start)
        swing = np.zeros_like(eef)
        swing[:, 0] = speed
        carry = np.where(at_start_line[:, None], swing, windup)

        grasp_move, grasp_grip = self._grasp_move(s, k)
        thrown = ~held & (c[:, 0] > 0.6)
        move = np.where(held[:, None], carry, np.where(thrown[:, None], 0.0, grasp_move))
        grip = np.where(held, np.where(let_go, -1.0, 1.0), np.where(thrown, -1.0, grasp_grip))
        return self._actions(move, grip)


def random_policy(seed: int) -> Any:
    """Uniform random actions; env rows draw from independent substreams."""

    def act(states: EnvStateBatch, obs: Any = None) -> np.ndarray:
        out = np.empty((states.batch_size, ACTION_DIM))
        for row, (env_id, t) in enumerate(zip(states.env_ids, states.step_count)):
            rng = np.random.default_rng([int(seed) & SEED_MASK, int(env_id), states.episode, int(t)])
            out[row] = rng.uniform(-1.0, 1.0, ACTION_DIM)
        return out

    return act


# ---------------------------
# Binary records
# ---------------------------
_DTYPE_CODES = {"<f4": 0, "<f8": 1, "<i8": 2, "|u1": 3, "|b1": 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def pack_array(arr: np.ndarray) -> bytes:
    """dtype code (u8), ndim (u8), shape (u64 each), raw little-endian data."""
    a = np.asarray(arr)
    if a.dtype == np.bool_:
        key = "|b1"
    else:
        key = a.dtype.newbyteorder("<").str if a.dtype.byteorder not in ("|",) else a.dtype.str
    if key not in _DTYPE_CODES:
        raise ValueError(f"unsupported dtype {a.dtype}")
    a = np.ascontiguousarray(a, dtype=np.dtype(key))
    return struct.pack("<BB", _DTYPE_CODES[key], a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def unpack_array(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    code, ndim = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", buf, offset)
    offset += 8 * ndim
    dt = np.dtype(_CODE_DTYPES[code])
    n = int(np.prod(shape)) if ndim else 1
    end = offset + n * dt.itemsize
    if end > len(buf):
        raise ValueError("truncated array record")
    arr = np.frombuffer(buf[offset:end], dtype=dt).reshape(shape).copy()
    return arr, end


RECORD_VERSION = 1


def write_records(path: str | Path, magic: bytes, arrays: Mapping[str, np.ndarray]) -> Path:
    """Named arrays in insertion order behind a 4-byte magic and version."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    chunks = [magic, struct.pack("<II", RECORD_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(pack_array(arr))
    p.write_bytes(b"".join(chunks))
    return p


def read_records(path: str | Path, magic: bytes) -> Dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != RECORD_VERSION:
        raise ValueError(f"{path}: unsupported record version {version}")
    offset = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = buf[offset : offset + n].decode("utf-8")
        offset += n
        out[name], offset = unpack_array(buf, offset)
    return out


# ---------------------------
# Trajectory dump
# ---------------------------
TRAJECTORY_MAGIC = b"V2PT"


@dataclass
class EpisodeRecord:
    observations: np.ndarray  # (T, D)
    actions: np.ndarray  # (T, 7)
    success: np.ndarray  # (T,) bool
    components: Dict[str, np.ndarray] = field(default_factory=dict)  # name -> (T,)
    seed: int = 0
    env_id: int = 0

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {
            "observations": np.asarray(self.observations, dtype=np.float32),
            "actions": np.asarray(self.actions, dtype=np.float32),
            "success": np.asarray(self.success, dtype=bool),
        }
        for name in sorted(self.components):
            out[f"reward/{name}"] = np.asarray(self.components[name], dtype=np.float32)
        return out


def dump_trajectories(out_dir: str | Path, episodes: Iterable[EpisodeRecord], obs_layout: str) -> Path:
    """One binary record per episode plus index.json."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ep in enumerate(episodes):
        name = f"ep{i:05d}.bin"
        write_records(root / name, TRAJECTORY_MAGIC, ep.arrays())
        entries.append(
            {
                "file": name,
                "steps": int(np.asarray(ep.actions).shape[0]),
                "success": bool(np.asarray(ep.success).any()),
                "seed": int(ep.seed),
                "env_id": int(ep.env_id),
            }
        )
    index = {"obs_layout": obs_layout, "episodes": entries}
    path = root / "index.json"
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote %d trajectories to %s", len(entries), root)
    return path


def load_trajectory(path: str | Path) -> EpisodeRecord:
    arrays = read_records(path, TRAJECTORY_MAGIC)
    comps = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("reward/")}
    return EpisodeRecord(arrays["observations"], arrays["actions"], arrays["success"], comps)
