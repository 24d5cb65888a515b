"""Centralized training / decentralized execution with an information-bottleneck penalty.

Three algorithms share this loop:

* ``imac``   - communication, actor loss carries ``beta * KL(protocol || prior)``
* ``comm``   - communication, no KL term (MADDPG with communication)
* ``nocomm`` - scheduled messages are always zero
"""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import particle_env as pe
from .agents import AgentNets, GaussianPrior, critic_input, kl_to_prior
from .channel import RunningStats, gaussian_entropy_bound, limit_message
from .tensor_nn import AdamState, ConfigError, NonFiniteError, adam_step, clip_by_global_norm

log = logging.getLogger(__name__)

ALGOS = ("imac", "comm", "nocomm")
COMPONENTS = ("policy", "protocol", "scheduler", "critic")


def stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def sub_seed(seed: int, name: str) -> int:
    """Derived seed for a named component: ``seed XOR sha256(name)[:8]`` (little-endian)."""
    return (int(seed) ^ stable_hash(name)) & 0xFFFFFFFFFFFFFFFF


@dataclass
class TrainConfig:
    algo: str = "imac"
    episodes: int = 1000
    seed: int = 0
    gamma: float = 0.95
    tau: float = 0.01
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    beta: float = 0.01
    prior_var: float = 1.0
    prior_mean: float = 0.0
    sched_beta: float = 0.0
    batch_size: int = 256
    buffer_size: int = 100_000
    update_every: int = 100
    warmup: int = 1024
    explore_start: float = 0.3
    explore_end: float = 0.05
    explore_frac: float = 0.5
    msg_dim: int = 4
    hidden: str = "64,64"
    activation: str = "relu"
    key_dim: int = 16
    n_envs: int = 8
    grad_clip: float = 0.5
    policy_reg: float = 1e-3
    bootstrap_timeout: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError(f"train.algo must be one of {ALGOS}, got {self.algo!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("train.gamma must lie in [0, 1)")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("train.tau must lie in (0, 1]")
        if self.beta < 0 or self.sched_beta < 0:
            raise ConfigError("train.beta and train.sched_beta must be >= 0")
        if not self.prior_var > 0:
            raise ConfigError("train.prior_var must be positive")
        for name in ("batch_size", "buffer_size", "update_every", "msg_dim", "n_envs", "key_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name} must be >= 1")
        if self.episodes < 0:
            raise ConfigError("train.episodes must be >= 0")
        if self.batch_size > self.buffer_size:
            raise ConfigError("train.batch_size cannot exceed train.buffer_size")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(h) for h in str(self.hidden).split(",") if h.strip())

    @property
    def comm(self) -> bool:
        return self.algo != "nocomm"

    @property
    def prior(self) -> GaussianPrior:
        return GaussianPrior(self.prior_mean, self.prior_var)

    @classmethod
    def from_mapping(cls, cfg: dict) -> TrainConfig:
        kinds = {f.name: type(f.default) for f in fields(cls)}
        kw = {}
        for key, val in cfg.items():
            if key not in kinds:
                raise ConfigError(f"train.{key}: unknown key")
            kind = kinds[key]
            if kind is bool:
                kw[key] = val if isinstance(val, bool) else str(val).lower() in ("1", "true", "yes", "on")
            else:
                kw[key] = kind(val)
        return cls(**kw)

    def to_mapping(self) -> dict:
        return asdict(self)


class ReplayBuffer:
    """Fixed-capacity ring buffer of joint transitions."""

    FIELDS = ("obs", "c_in", "c", "m_mean", "m_log_var", "noise", "c_noise", "act", "rew", "obs_next", "done")

    def __init__(self, capacity: int, n: int, obs_dim: int, msg_dim: int):
        self.capacity = capacity
        shapes = {"obs": (n, obs_dim), "obs_next": (n, obs_dim), "act": (n, 2), "rew": (n,), "done": ()}
        for name in ("c_in", "c", "m_mean", "m_log_var", "noise", "c_noise"):
            shapes[name] = (n, msg_dim)
        self.data = {k: np.zeros((capacity,) + shapes[k]) for k in self.FIELDS}
        self.cursor = 0
        self.size = 0
        self.inserted = 0

    def __len__(self):
        return self.size

    def add(self, **batch) -> None:
        """Insert ``k`` transitions at once; each field has a leading axis of length ``k``."""
        k = len(batch["rew"])
        idx = (self.cursor + np.arange(k)) % self.capacity
        for name in self.FIELDS:
            self.data[name][idx] = batch[name]
        self.cursor = int((self.cursor + k) % self.capacity)
        self.size = min(self.size + k, self.capacity)
        self.inserted += k

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict:
        if batch_size > self.size:
            raise ValueError(f"cannot sample {batch_size} from {self.size} transitions")
        idx = rng.choice(self.size, size=batch_size, replace=False)
        return {k: v[idx] for k, v in self.data.items()}


class System:
    """All agents of one run plus their optimizers and message statistics."""

    def __init__(self, env: pe.EnvConfig, cfg: TrainConfig, nets: list[AgentNets] | None = None):
        self.env = env
        self.cfg = cfg
        self.n = env.n
        self.obs_dim = env.obs_dim
        self.d = cfg.msg_dim
        self.prior = cfg.prior
        if nets is None:
            rng = np.random.default_rng(sub_seed(cfg.seed, "init"))
            nets = [AgentNets.init(self.obs_dim, self.d, self.n, rng, hidden=cfg.hidden_sizes,
                                   key_dim=cfg.key_dim, activation=cfg.activation,
                                   sched_var=cfg.sched_beta > 0)
                    for _ in range(self.n)]
        self.nets = nets
        self.actor_opt = [AdamState.for_params(self.actor_params(i), lr=cfg.lr_actor) for i in range(self.n)]
        self.critic_opt = [AdamState.for_params(nets[i].critic.params(), lr=cfg.lr_critic) for i in range(self.n)]
        # per-group switch so cross-play can pair a no-comm team with a comm team
        self.group_comm = [cfg.comm] * len(env.groups)
        self.msg_stats = [RunningStats(self.d) for _ in range(self.n)]
        self.sched_stats = [RunningStats(self.d) for _ in range(self.n)]
        self.skipped_updates = 0

    def actor_params(self, i: int) -> list[np.ndarray]:
        """Blocks updated by the actor step of agent ``i``."""
        nets = self.nets[i]
        if not self.cfg.comm:
            return nets.policy.params()
        return nets.policy.params() + nets.protocol.params() + nets.scheduler.params()

    def comm_agents(self) -> list[int]:
        return [i for g, on in zip(self.env.groups, self.group_comm) if on for i in g]

    def has_stats(self) -> bool:
        return all(self.msg_stats[i].count >= 2 and self.sched_stats[i].count >= 2 for i in self.comm_agents())

    def entropy_bound(self) -> float | None:
        """Worst-case (max over agents) Gaussian entropy bound of recorded messages, bits."""
        agents = self.comm_agents()
        if not agents or any(self.msg_stats[i].count < 2 for i in agents):
            return None
        return max(gaussian_entropy_bound(self.msg_stats[i]) for i in agents)


# --- acting ----------------------------------------------------------------------

def _group_local(env: pe.EnvConfig):
    for group in env.groups:
        yield group, np.asarray(group)


def communicate(system: System, obs, c_prev, noise, c_noise, target=False, mode="train", target_var=None):
    """One round of message passing for a batch ``(B, n, ·)``.

    Returns ``(m_mean, m_log_var, m, c)``; with ``mode='train'`` the message
    statistics are updated, with ``mode='exec'`` and a ``target_var`` every
    message and scheduled message is run through the limiter.
    """
    B, n = obs.shape[:2]
    d = system.d
    mean = np.zeros((B, n, d))
    log_var = np.zeros((B, n, d))
    c = np.zeros((B, n, d))
    m = np.zeros((B, n, d))
    senders = system.comm_agents()
    for j in senders:
        nets = system.nets[j]
        head = nets.targets["protocol"] if target else nets.protocol
        mean[:, j], log_var[:, j] = head.forward(np.concatenate([obs[:, j], c_prev[:, j]], axis=1))
        m[:, j] = mean[:, j] + np.exp(0.5 * log_var[:, j]) * noise[:, j]
        if mode == "train":
            system.msg_stats[j].update(m[:, j])
        elif target_var is not None:
            m[:, j] = limit_message(m[:, j], system.msg_stats[j], target_var)
    for (group, gidx), on in zip(_group_local(system.env), system.group_comm):
        if not on:
            continue
        msgs = m[:, gidx]
        for li, i in enumerate(group):
            sched = system.nets[i].targets["scheduler"] if target else system.nets[i].scheduler
            c[:, i], _ = sched.forward(obs[:, i], msgs, np.arange(len(group)) != li)
            if sched.log_var is not None and not target:
                c[:, i] = c[:, i] + np.exp(0.5 * sched.log_var) * c_noise[:, i]
            if mode == "train":
                system.sched_stats[i].update(c[:, i])
            elif target_var is not None:
                c[:, i] = limit_message(c[:, i], system.sched_stats[i], target_var)
    return mean, log_var, m, c


def act(system: System, obs, c, noise_scale=0.0, noise=None, target=False):
    B, n = obs.shape[:2]
    a = np.empty((B, n, 2))
    for i, nets in enumerate(system.nets):
        net = nets.targets["policy"] if target else nets.policy
        a[:, i] = np.tanh(net.forward(np.concatenate([obs[:, i], c[:, i]], axis=1)))
    if noise_scale > 0.0 and noise is not None:
        a = np.clip(a + noise_scale * noise, -1.0, 1.0)
    return a


@dataclass
class EpisodeResult:
    seed: int
    returns: np.ndarray   # (n,) undiscounted per-agent return
    kl: float             # mean per-message KL to the prior, nats
    steps: int

    def group_returns(self, env: pe.EnvConfig) -> list[float]:
        return [float(np.mean(self.returns[g])) for g in env.groups]


def rollout_episodes(system: System, seeds, rng: np.random.Generator, mode: str = "train",
                     noise_scale: float = 0.0, target_var: float | None = None,
                     buffer: ReplayBuffer | None = None, on_tick=None, sample_messages: bool = True):
    """Run one episode per seed in lockstep and return a list of EpisodeResult.

    ``on_tick`` is called after every tick (used to interleave updates).
    """
    if mode not in ("train", "exec"):
        raise ConfigError(f"mode must be 'train' or 'exec', got {mode!r}")
    env = system.env
    seeds = list(seeds)
    if not seeds:
        return []
    if mode == "exec" and target_var is not None:
        if not system.has_stats():
            raise ConfigError("execution limiter requires recorded message statistics")
    E, n, d = len(seeds), system.n, system.d
    state, obs = pe.reset(env, seeds)
    c_prev = np.zeros((E, n, d))
    returns = np.zeros((E, n))
    kl_sum = np.zeros(E)
    comm = bool(system.comm_agents())
    sched_var = comm and system.nets[0].scheduler.log_var is not None
    for _ in range(env.episode_len):
        noise = rng.standard_normal((E, n, d)) if comm and sample_messages else np.zeros((E, n, d))
        c_noise = rng.standard_normal((E, n, d)) if sched_var else np.zeros((E, n, d))
        mean, log_var, _, c = communicate(system, obs, c_prev, noise, c_noise, mode=mode, target_var=target_var)
        if comm:
            senders = system.comm_agents()
            kl_sum += kl_to_prior(mean[:, senders], log_var[:, senders], system.prior)[0].mean(axis=1)
        explore = rng.standard_normal((E, n, 2)) if mode == "train" else None
        a = act(system, obs, c, noise_scale if mode == "train" else 0.0, explore)
        state, obs_next, rew, done = pe.step(env, state, a)
        returns += rew
        if buffer is not None and mode == "train":
            stored_done = np.zeros(E) if system.cfg.bootstrap_timeout else np.full(E, float(done))
            buffer.add(obs=obs, c_in=c_prev, c=c, m_mean=mean, m_log_var=log_var, noise=noise,
                       c_noise=c_noise, act=a, rew=rew, obs_next=obs_next, done=stored_done)
        obs, c_prev = obs_next, c
        if on_tick is not None:
            on_tick(E)
    steps = env.episode_len
    return [EpisodeResult(seeds[e], returns[e].copy(), float(kl_sum[e] / steps) if steps else 0.0, steps)
            for e in range(E)]


# --- losses and gradients ----------------------------------------------------------

def target_values(system: System, batch: dict) -> np.ndarray:
    """TD targets ``y`` (B, n); next scheduled messages come from the target protocol/scheduler."""
    cfg = system.cfg
    obs2 = batch["obs_next"]
    zeros = np.zeros_like(batch["c"])
    _, _, _, c2 = communicate(system, obs2, batch["c"], zeros, zeros, target=True, mode="none")
    a2 = act(system, obs2, c2, target=True)
    x2 = critic_input(obs2, c2, a2)
    y = np.empty_like(batch["rew"])
    for i, nets in enumerate(system.nets):
        q2 = nets.targets["critic"].forward(x2)[:, 0]
        y[:, i] = batch["rew"][:, i] + cfg.gamma * (1.0 - batch["done"]) * q2
    return y


def critic_loss_and_grads(system: System, i: int, batch: dict, y: np.ndarray):
    x = critic_input(batch["obs"], batch["c"], batch["act"])
    q, cache = system.nets[i].critic.forward(x, cache=True)
    err = q[:, 0] - y[:, i]
    B = len(err)
    grads, _ = system.nets[i].critic.backward(cache, (2.0 * err / B)[:, None])
    return float(np.mean(err * err)), grads


def actor_loss_and_grads(system: System, batch: dict, group: list[int], with_kl: bool | None = None,
                         need_grads: bool = True):
    """Joint actor-side loss of one group and its gradients.

    loss = sum_i [ -mean Q_i + reg * mean(pre_i^2) ] + beta * sum_j mean KL_j  (+ scheduler KL)

    Messages are rebuilt from stored reparameterization noise so that every
    sender's protocol receives gradient through the scheduler, the
    recipients' policies and all critics. Other groups' scheduled messages and
    all other agents' actions come from the batch.

    Returns ``(loss, {agent: {"policy": [...], "protocol": [...], "scheduler": [...]}}, parts)``;
    the grads dict is None when ``need_grads`` is false.
    """
    cfg = system.cfg
    if with_kl is None:
        with_kl = cfg.algo == "imac"
    obs, B = batch["obs"], batch["obs"].shape[0]
    od = system.obs_dim
    G = len(group)
    grads = {i: {} for i in group}
    c_full = batch["c"].copy() if cfg.comm else np.zeros_like(batch["c"])
    kl_total = 0.0
    sched_kl_total = 0.0
    if cfg.comm:
        heads, means, lvs = [], [], []
        msgs = np.empty((B, G, system.d))
        for lj, j in enumerate(group):
            mu, lv, hc = system.nets[j].protocol.forward(
                np.concatenate([obs[:, j], batch["c_in"][:, j]], axis=1), cache=True)
            heads.append(hc)
            means.append(mu)
            lvs.append(lv)
            msgs[:, lj] = mu + np.exp(0.5 * lv) * batch["noise"][:, j]
        scaches, cbars = [], []
        for li, i in enumerate(group):
            sched = system.nets[i].scheduler
            cbar, _, sc = sched.forward(obs[:, i], msgs, np.arange(G) != li, cache=True)
            scaches.append(sc)
            cbars.append(cbar)
            if sched.log_var is not None:
                c_full[:, i] = cbar + np.exp(0.5 * sched.log_var) * batch["c_noise"][:, i]
                kl_c = kl_to_prior(cbar, np.broadcast_to(sched.log_var, cbar.shape), system.prior)[0]
                sched_kl_total += float(np.mean(kl_c))
            else:
                c_full[:, i] = cbar
        if with_kl:
            for lj in range(G):
                kl_total += float(np.mean(kl_to_prior(means[lj], lvs[lj], system.prior)[0]))
    q_total = 0.0
    reg_total = 0.0
    pcaches, pres, qcaches = [], [], []
    for i in group:
        pre, pc = system.nets[i].policy.forward(np.concatenate([obs[:, i], c_full[:, i]], axis=1), cache=True)
        pcaches.append(pc)
        pres.append(pre)
        acts = batch["act"].copy()
        acts[:, i] = np.tanh(pre)
        q, qc = system.nets[i].critic.forward(critic_input(obs, c_full, acts), cache=True)
        qcaches.append((qc, acts[:, i]))
        q_total += float(np.mean(q))
        reg_total += float(np.mean(pre * pre))
    loss = -q_total + cfg.policy_reg * reg_total
    if with_kl:
        loss += cfg.beta * kl_total
    if cfg.comm:
        loss += cfg.sched_beta * sched_kl_total
    parts = {"q": q_total, "kl": kl_total, "reg": reg_total, "sched_kl": sched_kl_total}
    if not need_grads:
        return loss, None, parts

    # backward
    n = system.n
    dc_full = np.zeros_like(c_full)
    for k, i in enumerate(group):
        qc, a_i = qcaches[k]
        _, dx = system.nets[i].critic.backward(qc, np.full((B, 1), -1.0 / B))
        dh = dx[:, : n * (od + system.d)].reshape(B, n, od + system.d)
        dc_full += dh[:, :, od:]
        da = dx[:, n * (od + system.d):].reshape(B, n, 2)[:, i]
        dpre = da * (1.0 - a_i * a_i) + cfg.policy_reg * 2.0 * pres[k] / pres[k].size
        pg, dxin = system.nets[i].policy.backward(pcaches[k], dpre)
        grads[i]["policy"] = pg
        dc_full[:, i] += dxin[:, od:]
    if cfg.comm:
        dmsgs = np.zeros_like(msgs)
        for li, i in enumerate(group):
            sched = system.nets[i].scheduler
            dc = dc_full[:, i]
            dlv_s = None
            if sched.log_var is not None:
                _, kdm, kdl = kl_to_prior(cbars[li], np.broadcast_to(sched.log_var, cbars[li].shape), system.prior)
                dlv_s = np.sum(dc * batch["c_noise"][:, i] * 0.5 * np.exp(0.5 * sched.log_var), axis=0)
                dlv_s = dlv_s + cfg.sched_beta * kdl.sum(axis=0) / B
                dc = dc + cfg.sched_beta * kdm / B
            sg, _, dm = sched.backward(scaches[li], dc)
            if sg is None:
                sg = [np.zeros_like(p) for p in sched.params()[:4]]
            else:
                dmsgs += dm
            grads[i]["scheduler"] = sg + ([dlv_s if dlv_s is not None else np.zeros_like(sched.log_var)]
                                          if sched.log_var is not None else [])
        for lj, j in enumerate(group):
            dm = dmsgs[:, lj]
            dmean = dm
            dlv = dm * batch["noise"][:, j] * 0.5 * np.exp(0.5 * lvs[lj])
            if with_kl:
                _, kdm, kdl = kl_to_prior(means[lj], lvs[lj], system.prior)
                dmean = dmean + cfg.beta * kdm / B
                dlv = dlv + cfg.beta * kdl / B
            pg, _ = system.nets[j].protocol.backward(heads[lj], dmean, dlv)
            grads[j]["protocol"] = pg
    return loss, grads, parts


# --- update steps ------------------------------------------------------------------

def _apply(params, grads, state, clip, what):
    grads = clip_by_global_norm(grads, clip)
    try:
        adam_step(params, grads, state)
        return True
    except NonFiniteError as exc:
        log.warning("skipping %s update: %s", what, exc)
        return False


def critic_update(system: System, batch: dict) -> list[float]:
    y = target_values(system, batch)
    losses = []
    for i in range(system.n):
        loss, grads = critic_loss_and_grads(system, i, batch, y)
        if not np.isfinite(loss):
            log.warning("skipping critic %d update: non-finite loss", i)
            system.skipped_updates += 1
            losses.append(float("nan"))
            continue
        if not _apply(system.nets[i].critic.params(), grads, system.critic_opt[i], system.cfg.grad_clip, f"critic {i}"):
            system.skipped_updates += 1
        losses.append(loss)
    return losses


def actor_update(system: System, batch: dict) -> list[float]:
    losses = []
    for group in system.env.groups:
        loss, grads, _ = actor_loss_and_grads(system, batch, group)
        if not np.isfinite(loss):
            log.warning("skipping actor update of group %s: non-finite loss", group)
            system.skipped_updates += 1
            losses.append(float("nan"))
            continue
        for i in group:
            g = grads[i]["policy"] + (grads[i]["protocol"] + grads[i]["scheduler"] if system.cfg.comm else [])
            if not _apply(system.actor_params(i), g, system.actor_opt[i], system.cfg.grad_clip, f"actor {i}"):
                system.skipped_updates += 1
        losses.append(loss)
    return losses


def soft_update(system: System, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must lie in (0, 1]")
    for nets in system.nets:
        for name in COMPONENTS:
            for tp, p in zip(nets.targets[name].params(), getattr(nets, name).params()):
                tp *= 1.0 - tau
                tp += tau * p


def update(system: System, buffer: ReplayBuffer, rng: np.random.Generator):
    batch = buffer.sample(system.cfg.batch_size, rng)
    c_losses = critic_update(system, batch)
    a_losses = actor_update(system, batch)
    soft_update(system, system.cfg.tau)
    return float(np.mean(c_losses)), float(np.mean(a_losses))


# --- the training driver -------------------------------------------------------------

def metrics_header(env: pe.EnvConfig) -> list[str]:
    return (["episode", "reward"] + [f"reward_{g}" for g in env.group_names]
            + ["kl", "entropy_bound", "critic_loss", "actor_loss"])


def fmt(x) -> str:
    if x is None or (isinstance(x, float) and np.isnan(x)):
        return ""
    return repr(float(x))


def exploration_scale(cfg: TrainConfig, episode: int) -> float:
    horizon = cfg.explore_frac * cfg.episodes
    if horizon <= 0:
        return cfg.explore_end
    frac = min(episode / horizon, 1.0)
    return cfg.explore_start + (cfg.explore_end - cfg.explore_start) * frac


def episode_seeds(seed: int, count: int, stream: str = "env") -> np.ndarray:
    return np.random.default_rng(sub_seed(seed, stream)).integers(0, 2**62, size=count)


def train(env: pe.EnvConfig, cfg: TrainConfig, metrics_path=None, checkpoint_path=None,
          system: System | None = None, progress=None) -> System:
    """Run ``cfg.episodes`` training episodes; write one metrics CSV row per episode.

    Returns the trained System. Wall-clock time is logged, never written to
    the metrics file, so identical seeds give identical bytes.
    """
    from .checkpoint import save_system

    system = system or System(env, cfg)
    buffer = ReplayBuffer(cfg.buffer_size, system.n, system.obs_dim, system.d)
    act_rng = np.random.default_rng(sub_seed(cfg.seed, "noise"))
    replay_rng = np.random.default_rng(sub_seed(cfg.seed, "replay"))
    seeds = episode_seeds(cfg.seed, cfg.episodes)
    pending = [0]
    losses = []

    def on_tick(k):
        pending[0] += k
        while pending[0] >= cfg.update_every:
            pending[0] -= cfg.update_every
            if len(buffer) >= max(cfg.batch_size, cfg.warmup):
                losses.append(update(system, buffer, replay_rng))

    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh, lineterminator="\n") if fh else None
    if writer:
        writer.writerow(metrics_header(env))
    t0 = time.perf_counter()
    try:
        done = 0
        while done < cfg.episodes:
            chunk = seeds[done: done + cfg.n_envs]
            scale = exploration_scale(cfg, done)
            losses.clear()
            results = rollout_episodes(system, chunk, act_rng, mode="train", noise_scale=scale,
                                       buffer=buffer, on_tick=on_tick)
            closs = float(np.mean([l[0] for l in losses])) if losses else None
            aloss = float(np.mean([l[1] for l in losses])) if losses else None
            bound = system.entropy_bound()
            for k, res in enumerate(results):
                row = [done + k, fmt(float(np.mean(res.returns)))]
                row += [fmt(v) for v in res.group_returns(env)]
                row += [fmt(res.kl) if cfg.comm else "", fmt(bound), fmt(closs), fmt(aloss)]
                if writer:
                    writer.writerow(row)
            done += len(chunk)
            if checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every < len(chunk) and done < cfg.episodes:
                save_system(checkpoint_path, system, episode=done)
            if progress:
                progress(done, results)
        log.info("trained %d episodes in %.1fs (%d skipped updates)", cfg.episodes,
                 time.perf_counter() - t0, system.skipped_updates)
    finally:
        if fh:
            fh.close()
    if checkpoint_path:
        save_system(checkpoint_path, system, episode=cfg.episodes)
    return system


def evaluate(system: System, seeds, target_var: float | None = None, n_envs: int = 50,
             stream_seed: int = 0) -> list[EpisodeResult]:
    """Execution-mode episodes (no exploration, optional limiter)."""
    rng = np.random.default_rng(sub_seed(stream_seed, "exec-noise"))
    out = []
    seeds = list(seeds)
    for k in range(0, len(seeds), n_envs):
        out += rollout_episodes(system, seeds[k: k + n_envs], rng, mode="exec", target_var=target_var)
    return out
