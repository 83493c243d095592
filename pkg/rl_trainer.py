# rl_trainer.py
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torch.distributions.normal import Normal

from scene_model import SceneSpec
from simulator import (
    ACTION_DIM,
    EnvStateBatch,
    SimConfig,
    read_records,
    reset,
    step,
    write_records,
)
from task_dsl import (
    OBS_LAYOUT_VERSION,
    ContractViolation,
    SuccessProgram,
    TaskSpec,
    eval_reward,
    eval_success,
    observation_vector,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"V2PC"
CHECKPOINT_VERSION = 1
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0


class CheckpointError(ValueError):
    pass


class LayoutMismatchError(CheckpointError):
    pass


# ---------------------------
# Config
# ---------------------------
@dataclass
class TrainConfig:
    lambda_success: float = 100.0
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    epochs_per_update: int = 5
    minibatches: int = 4
    rollout_length: int = 32  # steps per env per update
    total_env_steps: int = 200_000
    eval_episodes: int = 10
    eval_seeds: int = 3
    seed: int = 0
    hidden: Tuple[int, ...] = (256, 256)
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    final_step_success: bool = False  # count success at the last step only (eval + logs)

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lambda_success < 0:
            raise ValueError("lambda_success must be >= 0")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (0 <= self.gae_lambda <= 1):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be > 0")
        if self.rollout_length < 1 or self.minibatches < 1 or self.epochs_per_update < 0:
            raise ValueError("rollout_length and minibatches must be >= 1, epochs >= 0")
        if self.total_env_steps < 0:
            raise ValueError("total_env_steps must be >= 0")
        if self.eval_episodes < 1 or self.eval_seeds < 1:
            raise ValueError("eval_episodes and eval_seeds must be >= 1")
        if not self.hidden:
            raise ValueError("hidden must name at least one layer")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**dict(d))


# ---------------------------
# Policy
# ---------------------------
class ActorCritic(nn.Module):
    """Shared tanh trunk, Gaussian mean head, state-independent log-std, value head."""

    def __init__(self, obs_dim: int, hidden: Sequence[int] = (256, 256), action_dim: int = ACTION_DIM, dtype: torch.dtype = torch.float32):
        super().__init__()
        layers: List[nn.Module] = []
        width = obs_dim
        for h in hidden:
            layers += [nn.Linear(width, h, dtype=dtype), nn.Tanh()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.mean = nn.Linear(width, action_dim, dtype=dtype)
        self.log_std = nn.Parameter(torch.zeros(action_dim, dtype=dtype))
        self.value = nn.Linear(width, 1, dtype=dtype)
        nn.init.orthogonal_(self.mean.weight, 0.01)
        nn.init.zeros_(self.mean.bias)

    def forward(self, obs: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        h = self.trunk(obs)
        log_std = torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)
        return self.mean(h), log_std.expand(obs.shape[0], -1), self.value(h).squeeze(-1)

    def dist(self, obs: torch.Tensor) -> Tuple[Normal, torch.Tensor]:
        mean, log_std, value = self(obs)
        return Normal(mean, torch.exp(log_std)), value


class RunningMeanStd:
    """Observation normalizer (parallel mean/var merge); frozen outside training."""

    def __init__(self, dim: int, eps: float = 1e-4):
        self.mean = np.zeros(dim, dtype=np.float64)
        self.var = np.ones(dim, dtype=np.float64)
        self.count = eps

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        b_mean = x.mean(axis=0)
        b_var = x.var(axis=0)
        b_count = x.shape[0]
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean = self.mean + delta * b_count / total
        m2 = self.var * self.count + b_var * b_count + delta**2 * self.count * b_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -10.0, 10.0)

    def state(self) -> Dict[str, Any]:
        return {"mean": self.mean.tolist(), "var": self.var.tolist(), "count": float(self.count)}


@dataclass
class PolicyParams:
    model: ActorCritic
    normalizer: RunningMeanStd
    obs_dim: int
    hidden: Tuple[int, ...]
    obs_layout: str = OBS_LAYOUT_VERSION
    action_dim: int = ACTION_DIM

    @property
    def dtype(self) -> torch.dtype:
        return self.model.log_std.dtype

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(p).all()) for p in self.model.parameters())


def init_policy(obs_dim: int, hidden: Sequence[int] = (256, 256), seed: int = 0, dtype: torch.dtype = torch.float32) -> PolicyParams:
    torch.manual_seed(seed)
    model = ActorCritic(obs_dim, hidden, dtype=dtype)
    return PolicyParams(model, RunningMeanStd(obs_dim), obs_dim, tuple(hidden))


def policy_act(
    params: PolicyParams,
    obs: np.ndarray,
    deterministic: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    deterministic: mean head clipped to [-1, 1].
    stochastic: mean + std * N(0, 1), unclipped (the simulator clips).
    """
    obs = np.asarray(obs)
    if obs.ndim != 2 or obs.shape[1] != params.obs_dim:
        raise ContractViolation(f"observation width {obs.shape[-1]} != policy obs_dim {params.obs_dim}")
    x = torch.as_tensor(params.normalizer.normalize(obs), dtype=params.dtype)
    with torch.no_grad():
        mean, log_std, _ = params.model(x)
    m = mean.cpu().numpy().astype(np.float64)
    if deterministic:
        return np.clip(m, -1.0, 1.0)
    rng = rng or np.random.default_rng()
    return m + np.exp(log_std.cpu().numpy().astype(np.float64)) * rng.standard_normal(m.shape)


PolicyLike = Union[PolicyParams, Callable[[EnvStateBatch, np.ndarray], np.ndarray]]


def as_controller(policy: PolicyLike) -> Callable[[EnvStateBatch, np.ndarray], np.ndarray]:
    if isinstance(policy, PolicyParams):
        return lambda states, obs: policy_act(policy, obs, deterministic=True)
    return policy


# ---------------------------
# Advantages / loss
# ---------------------------
def gae_advantages(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    last_value: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Generalized advantage estimates along axis 0.

    dones[t] = 1 when the episode ended after step t; nothing is bootstrapped
    across it. last_value bootstraps the step after the final row.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    nxt = np.zeros_like(r[0]) if last_value is None else np.asarray(last_value, dtype=np.float64)
    adv = np.zeros_like(r)
    last = np.zeros_like(r[0])
    for t in reversed(range(r.shape[0])):
        next_v = nxt if t == r.shape[0] - 1 else v[t + 1]
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * next_v * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


def ppo_loss(
    model: ActorCritic,
    obs: torch.Tensor,
    actions: torch.Tensor,
    old_logp: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    clip_ratio: float,
    value_coef: float = 1.0,
    entropy_coef: float = 0.0,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    dist, value = model.dist(obs)
    logp = dist.log_prob(actions).sum(-1)
    ratio = torch.exp(logp - old_logp)
    surr1 = ratio * advantages
    surr2 = torch.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages
    pg_loss = -torch.min(surr1, surr2).mean()
    v_loss = 0.5 * ((value - returns) ** 2).mean()
    entropy = dist.entropy().sum(-1).mean()
    loss = pg_loss + value_coef * v_loss - entropy_coef * entropy
    with torch.no_grad():
        approx_kl = ((ratio - 1) - (logp - old_logp)).mean()
    return loss, {
        "policy_loss": float(pg_loss.detach()),
        "value_loss": float(v_loss.detach()),
        "entropy": float(entropy.detach()),
        "approx_kl": float(approx_kl),
    }


# ---------------------------
# Logs
# ---------------------------
@dataclass
class GroupStats:
    min: float
    max: float
    mean: float
    last: float

    def render(self) -> str:
        return f"min {self.min:.4f}, max {self.max:.4f}, mean {self.mean:.4f}, last {self.last:.4f}"


@dataclass
class ComponentStats:
    success: Optional[GroupStats]
    failure: Optional[GroupStats]
    success_exceeds: Optional[bool]

    def spread(self) -> float:
        groups = [g for g in (self.success, self.failure) if g is not None]
        if not groups:
            return 0.0
        return max(g.max for g in groups) - min(g.min for g in groups)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "success": asdict(self.success) if self.success else None,
            "failure": asdict(self.failure) if self.failure else None,
            "success_exceeds": self.success_exceeds,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ComponentStats":
        return cls(
            GroupStats(**d["success"]) if d.get("success") else None,
            GroupStats(**d["failure"]) if d.get("failure") else None,
            d.get("success_exceeds"),
        )


def _group(vals: np.ndarray) -> Optional[GroupStats]:
    if vals.size == 0:
        return None
    return GroupStats(float(vals.min()), float(vals.max()), float(vals.mean()), float(vals[-1]))


def collect_component_stats(streams: Mapping[str, np.ndarray], success_mask: np.ndarray) -> Dict[str, ComponentStats]:
    """
    streams: name -> per-episode accumulated values (E,), or per-step values
    (E, T) that are summed first. Groups with no episodes are None, not zero.
    """
    mask = np.asarray(success_mask, dtype=bool)
    out: Dict[str, ComponentStats] = {}
    for name, raw in streams.items():
        arr = np.asarray(raw, dtype=np.float64)
        sums = arr.sum(axis=1) if arr.ndim == 2 else arr
        if sums.shape[0] != mask.shape[0]:
            raise ValueError(f"component {name}: {sums.shape[0]} episodes vs {mask.shape[0]} success flags")
        s, f = _group(sums[mask]), _group(sums[~mask])
        exceeds = None if (s is None or f is None) else bool(s.mean > f.mean)
        out[name] = ComponentStats(s, f, exceeds)
    return out


@dataclass
class UpdateRecord:
    update: int
    env_steps: int
    mean_return: Optional[float]
    success_rate: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float


@dataclass
class TrainLogs:
    updates: List[UpdateRecord] = field(default_factory=list)
    component_stats: Dict[str, ComponentStats] = field(default_factory=dict)
    final_success_rate: float = 0.0
    diverged: bool = False
    episodes: int = 0

    @property
    def success_curve(self) -> List[float]:
        return [u.success_rate for u in self.updates]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "updates": [asdict(u) for u in self.updates],
            "component_stats": {k: v.to_dict() for k, v in self.component_stats.items()},
            "final_success_rate": self.final_success_rate,
            "diverged": self.diverged,
            "episodes": self.episodes,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrainLogs":
        return cls(
            updates=[UpdateRecord(**u) for u in d.get("updates", [])],
            component_stats={k: ComponentStats.from_dict(v) for k, v in d.get("component_stats", {}).items()},
            final_success_rate=float(d.get("final_success_rate", 0.0)),
            diverged=bool(d.get("diverged", False)),
            episodes=int(d.get("episodes", 0)),
        )

    def write_jsonl(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("w", encoding="utf-8") as f:
            for u in self.updates:
                f.write(json.dumps(asdict(u), sort_keys=True) + "\n")
        return p


@dataclass
class EvalReport:
    mean_success: float
    per_seed: List[float]
    episodes_per_seed: int
    outcomes: List[List[bool]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


# ---------------------------
# Rollouts
# ---------------------------
def step_reward(
    task: TaskSpec,
    actions: np.ndarray,
    states: EnvStateBatch,
    lambda_success: float,
) -> Tuple[np.ndarray, Dict[str, np.ndarray], np.ndarray]:
    """
    Training reward for one step: eval_reward total + lambda * success, where
    success is the task's own success program (never ground truth).
    Returns (training_reward, components, success).
    """
    refs = task.refs()
    totals, comps = eval_reward(task.reward, actions, states, refs=refs)
    ok = eval_success(task.success, states, refs=refs)
    return totals + lambda_success * ok.astype(np.float64), comps, ok


@dataclass
class Trace:
    observations: np.ndarray  # (T, B, D)
    actions: np.ndarray  # (T, B, 7)
    components: Dict[str, np.ndarray]  # name -> (T, B)
    success: np.ndarray  # (T, B)
    training_reward: np.ndarray  # (T, B)
    lambda_success: float


def trace_steps(
    policy: PolicyLike,
    task: TaskSpec,
    scene: SceneSpec,
    sim_config: SimConfig,
    steps: int,
    *,
    seed: int = 0,
    lambda_success: float = 100.0,
) -> Trace:
    """Roll a policy from reset and record the per-step reward decomposition."""
    act = as_controller(policy)
    states = reset(task.reset, scene, sim_config, seed)
    obs_l, act_l, ok_l, rew_l = [], [], [], []
    comps: Dict[str, List[np.ndarray]] = {}
    for _ in range(min(steps, sim_config.horizon)):
        obs = observation_vector(task.observation, states)
        a = np.asarray(act(states, obs), dtype=np.float64)
        states = step(states, a, sim_config)
        r, c, ok = step_reward(task, a, states, lambda_success)
        obs_l.append(obs)
        act_l.append(a)
        ok_l.append(ok)
        rew_l.append(r)
        for k, v in c.items():
            comps.setdefault(k, []).append(v)
    return Trace(
        np.asarray(obs_l),
        np.asarray(act_l),
        {k: np.asarray(v) for k, v in comps.items()},
        np.asarray(ok_l),
        np.asarray(rew_l),
        lambda_success,
    )


def _ppo_update(
    policy: PolicyParams,
    opt: torch.optim.Optimizer,
    batch: Dict[str, torch.Tensor],
    config: TrainConfig,
    gen: torch.Generator,
) -> Optional[Dict[str, float]]:
    """One PPO update over a flattened rollout. Returns None on a non-finite loss."""
    model = policy.model
    n = batch["obs"].shape[0]
    mb = max(1, n // config.minibatches)
    adv = batch["adv"]
    adv = (adv - adv.mean()) / (adv.std(unbiased=False) + 1e-8)
    stats: Dict[str, float] = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0}
    count = 0
    for _ in range(config.epochs_per_update):
        perm = torch.randperm(n, generator=gen)
        for start in range(0, n, mb):
            idx = perm[start : start + mb]
            loss, info = ppo_loss(
                model,
                batch["obs"][idx],
                batch["actions"][idx],
                batch["logp"][idx],
                adv[idx],
                batch["returns"][idx],
                config.clip_ratio,
                config.value_coef,
                config.entropy_coef,
            )
            if not torch.isfinite(loss):
                return None
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            opt.step()
            for k in stats:
                stats[k] += info[k]
            count += 1
    if not policy.is_finite():
        return None
    return {k: v / max(count, 1) for k, v in stats.items()}


def train(
    task: TaskSpec,
    scene: SceneSpec,
    config: TrainConfig,
    sim_config: Optional[SimConfig] = None,
    *,
    log_path: Optional[str | Path] = None,
) -> Tuple[PolicyParams, TrainLogs]:
    """
    PPO on the task's reward plus lambda * success every step the task's
    success program holds. All envs run synchronized episodes; the horizon
    ends an episode (no bootstrap across it).

    A non-finite loss or parameter aborts the run with logs.diverged = True.
    """
    sim = sim_config or SimConfig()
    obs_dim = task.observation_dim
    policy = init_policy(obs_dim, config.hidden, seed=config.seed)
    logs = TrainLogs()
    steps_per_update = config.rollout_length * sim.num_envs
    n_updates = config.total_env_steps // steps_per_update
    if n_updates == 0:
        logger.info("zero update budget (%d env steps); returning initial policy", config.total_env_steps)
        return policy, logs

    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(policy.model.parameters(), lr=config.learning_rate, eps=1e-5)
    names = list(task.reward.names) + ["step_penalty", "total_reward"]
    b = sim.num_envs
    T = config.rollout_length

    episode = 0
    states = reset(task.reset, scene, sim, config.seed, episode=episode)
    ep_return = np.zeros(b)
    ep_success = np.zeros(b, dtype=bool)
    ep_last_success = np.zeros(b, dtype=bool)
    ep_comp = {n: np.zeros(b) for n in names}
    done_sums: Dict[str, List[np.ndarray]] = {n: [] for n in names}
    done_success: List[np.ndarray] = []
    recent_rate = 0.0

    for u in range(n_updates):
        obs_buf = np.zeros((T, b, obs_dim), dtype=np.float32)
        act_buf = np.zeros((T, b, ACTION_DIM), dtype=np.float32)
        logp_buf = np.zeros((T, b))
        val_buf = np.zeros((T, b))
        rew_buf = np.zeros((T, b))
        done_buf = np.zeros((T, b))
        finished_returns: List[float] = []
        finished_success: List[np.ndarray] = []

        for t in range(T):
            raw = observation_vector(task.observation, states)
            policy.normalizer.update(raw)
            obs = policy.normalizer.normalize(raw).astype(np.float32)
            with torch.no_grad():
                dist, value = policy.model.dist(torch.from_numpy(obs))
                noise = torch.randn(dist.mean.shape, generator=gen, dtype=dist.mean.dtype)
                action = dist.mean + dist.stddev * noise
                logp = dist.log_prob(action).sum(-1)
            a = action.numpy().astype(np.float64)
            states = step(states, a, sim)
            r, comps, ok = step_reward(task, a, states, config.lambda_success)

            obs_buf[t] = obs
            act_buf[t] = action.numpy()
            logp_buf[t] = logp.numpy()
            val_buf[t] = value.numpy()
            rew_buf[t] = r
            ep_return += r
            ep_success |= ok
            ep_last_success = ok
            for n in names:
                ep_comp[n] += comps[n]

            done = states.step_count >= sim.horizon
            done_buf[t] = done
            if done.all():
                final = ep_last_success if config.final_step_success else ep_success
                finished_returns.extend(ep_return.tolist())
                finished_success.append(final.copy())
                done_success.append(final.copy())
                for n in names:
                    done_sums[n].append(ep_comp[n].copy())
                    ep_comp[n][:] = 0.0
                ep_return[:] = 0.0
                ep_success[:] = False
                episode += 1
                states = reset(task.reset, scene, sim, config.seed, episode=episode)

        raw = observation_vector(task.observation, states)
        with torch.no_grad():
            _, last_value = policy.model.dist(torch.from_numpy(policy.normalizer.normalize(raw).astype(np.float32)))
        adv = gae_advantages(rew_buf, val_buf, done_buf, config.gamma, config.gae_lambda, last_value.numpy())
        ret = adv + val_buf
        batch = {
            "obs": torch.from_numpy(obs_buf.reshape(T * b, obs_dim)),
            "actions": torch.from_numpy(act_buf.reshape(T * b, ACTION_DIM)),
            "logp": torch.from_numpy(logp_buf.reshape(-1).astype(np.float32)),
            "adv": torch.from_numpy(adv.reshape(-1).astype(np.float32)),
            "returns": torch.from_numpy(ret.reshape(-1).astype(np.float32)),
        }
        stats = _ppo_update(policy, opt, batch, config, gen)
        if stats is None:
            logger.warning("PPO diverged at update %d; aborting run", u)
            logs.diverged = True
            break

        if finished_success:
            recent_rate = float(np.concatenate(finished_success).mean())
        else:
            recent_rate = float(ep_success.mean())
        rec = UpdateRecord(
            update=u,
            env_steps=(u + 1) * steps_per_update,
            mean_return=float(np.mean(finished_returns)) if finished_returns else None,
            success_rate=recent_rate,
            **stats,
        )
        logs.updates.append(rec)
        logger.debug(
            "update %d: success=%.3f pg=%.4f vf=%.4f kl=%.5f", u, rec.success_rate, rec.policy_loss, rec.value_loss, rec.approx_kl
        )

    if done_success:
        mask = np.concatenate(done_success)
        logs.component_stats = collect_component_stats({n: np.concatenate(done_sums[n]) for n in names}, mask)
        logs.episodes = int(mask.shape[0])
    logs.final_success_rate = 0.0 if logs.diverged else recent_rate
    if log_path is not None:
        logs.write_jsonl(log_path)
    return policy, logs


def _eval_seed(config: TrainConfig, index: int) -> int:
    return int(np.random.SeedSequence([config.seed, 0xE7A1, index]).generate_state(1, dtype=np.uint64)[0])


def evaluate(
    policy: PolicyLike,
    success: SuccessProgram,
    task: TaskSpec,
    scene: SceneSpec,
    config: TrainConfig,
    sim_config: Optional[SimConfig] = None,
    *,
    batch_size: Optional[int] = None,
) -> EvalReport:
    """
    eval_seeds x eval_episodes deterministic rollouts; an episode succeeds if
    `success` holds at any step (or at the last step with final_step_success).
    Episode e of seed s always uses env id e, so batching does not change
    outcomes.
    """
    sim = sim_config or SimConfig()
    act = as_controller(policy)
    refs = task.refs()
    n = config.eval_episodes
    chunk = batch_size or n
    per_seed: List[float] = []
    outcomes: List[List[bool]] = []
    for s_idx in range(config.eval_seeds):
        seed = _eval_seed(config, s_idx)
        results = np.zeros(n, dtype=bool)
        for start in range(0, n, chunk):
            ids = np.arange(start, min(n, start + chunk))
            states = reset(task.reset, scene, sim, seed, env_ids=ids)
            hit = np.zeros(ids.shape[0], dtype=bool)
            ok = hit
            for _ in range(sim.horizon):
                obs = observation_vector(task.observation, states)
                states = step(states, act(states, obs), sim)
                ok = eval_success(success, states, refs=refs)
                hit |= ok
            results[ids] = ok if config.final_step_success else hit
        outcomes.append(results.tolist())
        per_seed.append(float(results.mean()))
    return EvalReport(float(np.mean(per_seed)), per_seed, n, outcomes)


# ---------------------------
# Checkpoints
# ---------------------------
def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def save_policy(policy: PolicyParams, path: str | Path) -> Path:
    """policy.bin (named little-endian arrays) + policy.json sidecar."""
    p = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    for name, tensor in policy.model.state_dict().items():
        arrays[f"param/{name}"] = tensor.detach().cpu().numpy()
    arrays["normalizer/mean"] = policy.normalizer.mean
    arrays["normalizer/var"] = policy.normalizer.var
    write_records(p, CHECKPOINT_MAGIC, arrays)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "obs_dim": policy.obs_dim,
        "action_dim": policy.action_dim,
        "hidden": list(policy.hidden),
        "obs_layout": policy.obs_layout,
        "dtype": str(policy.dtype).replace("torch.", ""),
        "normalizer_count": float(policy.normalizer.count),
    }
    _sidecar(p).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def load_policy(path: str | Path, expected_layout: str = OBS_LAYOUT_VERSION) -> PolicyParams:
    p = Path(path)
    try:
        meta = json.loads(_sidecar(p).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"{_sidecar(p)}: missing checkpoint sidecar") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{_sidecar(p)}: {e}") from None
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{p}: unsupported checkpoint version {meta.get('format_version')}")
    if meta.get("obs_layout") != expected_layout:
        raise LayoutMismatchError(f"{p}: observation layout {meta.get('obs_layout')!r} != {expected_layout!r}")
    try:
        arrays = read_records(p, CHECKPOINT_MAGIC)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{p}: {e}") from None
    dtype = torch.float64 if meta.get("dtype") == "float64" else torch.float32
    model = ActorCritic(int(meta["obs_dim"]), tuple(meta["hidden"]), int(meta["action_dim"]), dtype=dtype)
    state = {k.split("/", 1)[1]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{p}: {e}") from None
    norm = RunningMeanStd(int(meta["obs_dim"]))
    norm.mean = arrays["normalizer/mean"]
    norm.var = arrays["normalizer/var"]
    norm.count = float(meta.get("normalizer_count", 1.0))
    return PolicyParams(model, norm, int(meta["obs_dim"]), tuple(meta["hidden"]), meta["obs_layout"], int(meta["action_dim"]))


def render_component_table(stats: Mapping[str, ComponentStats]) -> str:
    """Markdown table of per-component accumulated reward, split by episode outcome."""
    lines = [
        "| component | success min | success max | success mean | success last | failure min | failure max | failure mean | failure last | success > failure |",
        "|---|---|---|---|---|---|---|---|---|---|",
    ]

    def cells(g: Optional[GroupStats]) -> List[str]:
        if g is None:
            return ["n/a"] * 4
        return [f"{g.min:.4f}", f"{g.max:.4f}", f"{g.mean:.4f}", f"{g.last:.4f}"]

    for name, st in stats.items():
        flag = "n/a" if st.success_exceeds is None else ("yes" if st.success_exceeds else "no")
        lines.append("| " + " | ".join([name, *cells(st.success), *cells(st.failure), flag]) + " |")
    return "\n".join(lines)
