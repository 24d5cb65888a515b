"""Batched 2-D particle worlds: cooperative navigation and predator-prey.

All state arrays carry a leading batch axis ``E`` so several episodes can be
stepped in lockstep; a single environment is simply ``E == 1``. Every batch
member is seeded independently, so an episode's layout depends only on its own
seed and never on which batch it ran in.

Observation layout, per agent, in order:

* own velocity (2), own position (2)
* relative positions of the nearest ``k_l`` landmarks (2 each)
* coop_nav: relative positions of the nearest ``k_a`` other agents
* predator_prey: relative positions of the nearest ``k_t`` teammates, then of
  the nearest ``k_o`` opponents, then those opponents' velocities

Slot counts are ``min(nearest_k, available)``; unfilled slots are zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .tensor_nn import ConfigError


class EnvAbort(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    task: str = "coop_nav"
    n_agents: int = 3
    n_predators: int = 4
    n_preys: int = 2
    n_landmarks: int = 3
    episode_len: int = 25
    dt: float = 0.1
    damping: float = 0.25
    max_speed: float = 1.0
    predator_max_speed: float = 0.75
    prey_max_speed: float = 1.0
    accel: float = 1.0
    predator_accel: float = 3.0
    prey_accel: float = 4.0
    agent_radius: float = 0.1
    landmark_radius: float = 0.05
    collision_penalty: float = -1.0
    catch_bonus: float = 10.0
    group_dist_coef: float = 0.1
    nearest_k: int | None = 3
    world_bound: float = 1.0

    def __post_init__(self):
        if self.task not in ("coop_nav", "predator_prey"):
            raise ConfigError(f"env.task: unknown task {self.task!r}")
        counts = ["n_landmarks"] + (["n_agents"] if self.task == "coop_nav" else ["n_predators", "n_preys"])
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"env.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("dt", "agent_radius", "landmark_radius", "world_bound", "max_speed",
                     "predator_max_speed", "prey_max_speed"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"env.{name} must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ConfigError("env.damping must lie in [0, 1)")
        if self.episode_len < 0:
            raise ConfigError("env.episode_len must be >= 0")
        if self.nearest_k is not None and self.nearest_k < 1:
            raise ConfigError("env.nearest_k must be >= 1 or 'all'")
        if self.task == "coop_nav" and self.collision_penalty > 0:
            raise ConfigError("env.collision_penalty must be <= 0")

    @classmethod
    def from_mapping(cls, cfg: dict) -> EnvConfig:
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, val in cfg.items():
            if key not in known:
                raise ConfigError(f"env.{key}: unknown key")
            if key == "nearest_k":
                kw[key] = None if str(val) == "all" else int(val)
            elif key == "task":
                kw[key] = str(val)
            elif isinstance(known[key].default, int) and not isinstance(known[key].default, bool):
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)

    def to_mapping(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = "all" if (f.name == "nearest_k" and v is None) else v
        return out

    # derived layout -------------------------------------------------------

    @property
    def n(self) -> int:
        return self.n_agents if self.task == "coop_nav" else self.n_predators + self.n_preys

    @property
    def groups(self) -> list[list[int]]:
        """Agents that share a reward and a scheduler."""
        if self.task == "coop_nav":
            return [list(range(self.n_agents))]
        return [list(range(self.n_predators)), list(range(self.n_predators, self.n))]

    @property
    def group_names(self) -> list[str]:
        return ["agents"] if self.task == "coop_nav" else ["predator", "prey"]

    def _k(self, available: int) -> int:
        return available if self.nearest_k is None else min(self.nearest_k, available)

    @property
    def slots(self) -> dict:
        if self.task == "coop_nav":
            return {"landmark": self._k(self.n_landmarks), "other": self._k(self.n_agents - 1)}
        team = max(self.n_predators, self.n_preys) - 1
        opp = max(self.n_predators, self.n_preys)
        return {"landmark": self._k(self.n_landmarks), "team": self._k(team), "opp": self._k(opp)}

    @property
    def obs_dim(self) -> int:
        s = self.slots
        if self.task == "coop_nav":
            return 4 + 2 * (s["landmark"] + s["other"])
        return 4 + 2 * (s["landmark"] + s["team"] + 2 * s["opp"])

    def role_array(self, base: str, pred: str, prey: str) -> np.ndarray:
        if self.task == "coop_nav":
            return np.full(self.n, getattr(self, base))
        return np.array([getattr(self, pred)] * self.n_predators + [getattr(self, prey)] * self.n_preys)


@dataclass
class WorldState:
    pos: np.ndarray        # (E, n, 2)
    vel: np.ndarray        # (E, n, 2)
    landmarks: np.ndarray  # (E, L, 2)
    step: int = 0
    seeds: list = field(default_factory=list)

    @property
    def batch(self) -> int:
        return self.pos.shape[0]


def reset(config: EnvConfig, seed) -> tuple[WorldState, np.ndarray]:
    """Fresh episodes for one seed or a list of seeds. Returns the state and ``(E, n, obs_dim)`` observations."""
    seeds = [int(seed)] if np.ndim(seed) == 0 else [int(s) for s in seed]
    wb = config.world_bound
    pos = np.empty((len(seeds), config.n, 2))
    lms = np.empty((len(seeds), config.n_landmarks, 2))
    for e, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        pos[e] = rng.uniform(-wb, wb, size=(config.n, 2))
        lms[e] = rng.uniform(-wb, wb, size=(config.n_landmarks, 2))
    state = WorldState(pos, np.zeros_like(pos), lms, 0, seeds)
    return state, observe(config, state)


def step(config: EnvConfig, state: WorldState, actions) -> tuple[WorldState, np.ndarray, np.ndarray, bool]:
    """Advance every batch member one tick. Returns ``(state', obs, rewards (E, n), done)``."""
    a = np.asarray(actions, dtype=np.float64)
    if a.shape != state.pos.shape:
        raise ConfigError(f"actions must have shape {state.pos.shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise EnvAbort(f"non-finite action at step {state.step} for seeds {state.seeds}")
    if state.step >= config.episode_len:
        raise EnvAbort("episode already finished")
    a = np.clip(a, -1.0, 1.0)
    accel = config.role_array("accel", "predator_accel", "prey_accel")[None, :, None]
    vmax = config.role_array("max_speed", "predator_max_speed", "prey_max_speed")[None, :, None]
    vel = (1.0 - config.damping) * state.vel + accel * a * config.dt
    speed = np.sqrt(np.sum(vel * vel, axis=-1, keepdims=True))
    vel = np.where(speed > vmax, vel * (vmax / np.maximum(speed, 1e-300)), vel)
    pos = state.pos + vel * config.dt
    new = WorldState(pos, vel, state.landmarks, state.step + 1, state.seeds)
    return new, observe(config, new), rewards(config, new), new.step >= config.episode_len


def _nearest(rel: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Pick the ``k`` nearest valid entries of ``rel`` (…, m, 2); invalid/missing slots are zero."""
    if k == 0:
        return np.zeros(rel.shape[:-2] + (0, 2))
    d = np.sum(rel * rel, axis=-1)
    d = np.where(valid, d, np.inf)
    order = np.argsort(d, axis=-1, kind="stable")[..., :k]
    picked = np.take_along_axis(rel, order[..., None], axis=-2)
    ok = np.take_along_axis(valid, order, axis=-1)
    return np.where(ok[..., None], picked, 0.0)


def observe(config: EnvConfig, state: WorldState) -> np.ndarray:
    E, n = state.pos.shape[:2]
    s = config.slots
    own = [state.vel, state.pos]
    rel_lm = state.landmarks[:, None, :, :] - state.pos[:, :, None, :]
    lm = _nearest(rel_lm, np.ones(rel_lm.shape[:-1], bool), s["landmark"])
    rel_ag = state.pos[:, None, :, :] - state.pos[:, :, None, :]
    not_self = ~np.eye(n, dtype=bool)[None].repeat(E, axis=0)
    if config.task == "coop_nav":
        parts = own + [lm.reshape(E, n, -1), _nearest(rel_ag, not_self, s["other"]).reshape(E, n, -1)]
        return np.concatenate(parts, axis=-1)
    team_id = np.array([0] * config.n_predators + [1] * config.n_preys)
    same = (team_id[:, None] == team_id[None, :])[None]
    mates = _nearest(rel_ag, not_self & same, s["team"])
    opp_valid = np.broadcast_to(~same, rel_ag.shape[:-1])
    # opponent velocities ride along with positions so both use the same ordering
    both = np.concatenate([rel_ag, np.broadcast_to(state.vel[:, None, :, :], rel_ag.shape)], axis=-1)
    k = s["opp"]
    d = np.where(opp_valid, np.sum(rel_ag * rel_ag, axis=-1), np.inf)
    order = np.argsort(d, axis=-1, kind="stable")[..., :k]
    picked = np.take_along_axis(both, order[..., None], axis=-2)
    picked = np.where(np.take_along_axis(opp_valid, order, axis=-1)[..., None], picked, 0.0)
    parts = own + [lm.reshape(E, n, -1), mates.reshape(E, n, -1),
                   picked[..., :2].reshape(E, n, -1), picked[..., 2:].reshape(E, n, -1)]
    return np.concatenate(parts, axis=-1)


def _pair_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, :, None, :] - b[:, None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def reward_coop_nav(config: EnvConfig, state: WorldState) -> np.ndarray:
    """Shared reward per batch member, shape (E,)."""
    d_lm = _pair_dist(state.landmarks, state.pos)           # (E, L, n)
    r = -d_lm.min(axis=2).sum(axis=1)
    d_ag = _pair_dist(state.pos, state.pos)
    iu = np.triu_indices(config.n_agents, k=1)
    hits = (d_ag[:, iu[0], iu[1]] < 2.0 * config.agent_radius).sum(axis=1)
    return r + config.collision_penalty * hits


def boundary_penalty(x: np.ndarray) -> np.ndarray:
    """Penalty for one coordinate magnitude, in units of the world bound."""
    lin = (x - 0.9) * 10.0
    expo = np.minimum(np.exp(2.0 * np.minimum(x, 10.0) - 2.0), 10.0)
    return np.where(x < 0.9, 0.0, np.where(x < 1.0, lin, expo))


def reward_predator_prey(config: EnvConfig, state: WorldState) -> tuple[np.ndarray, np.ndarray]:
    """Shared (predator, prey) rewards, each shape (E,)."""
    npred = config.n_predators
    d = _pair_dist(state.pos[:, :npred], state.pos[:, npred:])  # (E, npred, nprey)
    catches = (d < 2.0 * config.agent_radius).sum(axis=(1, 2))
    catch_term = config.catch_bonus * catches
    pred = catch_term - config.group_dist_coef * d.min(axis=(1, 2))
    out_of_bounds = boundary_penalty(np.abs(state.pos[:, npred:]) / config.world_bound).sum(axis=(1, 2))
    prey = -catch_term - out_of_bounds
    return pred, prey


def rewards(config: EnvConfig, state: WorldState) -> np.ndarray:
    """Per-agent rewards (E, n); every agent gets its group's shared value."""
    E = state.batch
    if config.task == "coop_nav":
        return np.repeat(reward_coop_nav(config, state)[:, None], config.n, axis=1)
    pred, prey = reward_predator_prey(config, state)
    out = np.empty((E, config.n))
    out[:, :config.n_predators] = pred[:, None]
    out[:, config.n_predators:] = prey[:, None]
    return out


TRAJECTORY_HEADER = ["episode", "step", "entity_id", "x", "y", "vx", "vy", "reward"]


def trajectory_rows(episode: int, state: WorldState, rew=None, batch_index: int = 0):
    """CSV rows for one batch member at the current tick; landmarks are listed at step 0 only."""
    rows = []
    if state.step == 0:
        for k, (x, y) in enumerate(state.landmarks[batch_index]):
            rows.append([episode, 0, f"landmark{k}", x, y, 0.0, 0.0, 0.0])
    for i in range(state.pos.shape[1]):
        x, y = state.pos[batch_index, i]
        vx, vy = state.vel[batch_index, i]
        r = 0.0 if rew is None else rew[batch_index, i]
        rows.append([episode, state.step, f"agent{i}", x, y, vx, vy, r])
    return rows


def write_trajectory(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for row in rows:
            w.writerow([row[0], row[1], row[2]] + [repr(float(v)) for v in row[3:]])


def with_overrides(config: EnvConfig, **kw) -> EnvConfig:
    return replace(config, **kw)
