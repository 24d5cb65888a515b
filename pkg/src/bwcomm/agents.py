"""Per-agent function approximators: policy, Gaussian protocol, scheduler, critic.

Message timing within one environment tick::

    m_t = protocol(o_t, c_{t-1})       # c_{-1} = 0
    c_t = scheduler(m_t of teammates)
    a_t = policy(o_t, c_t)

Schedulers only mix messages from the recipient's own group, and never the
recipient's own message.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_nn import (ConfigError, DenseNet, GaussianHead, LOG_VAR_MAX, LOG_VAR_MIN,
                        sample_reparam)


@dataclass
class GaussianPrior:
    mean: float | np.ndarray = 0.0
    var: float = 1.0

    def __post_init__(self):
        if not self.var > 0:
            raise ConfigError("prior variance must be positive")


def kl_to_prior(mean, log_var, prior: GaussianPrior):
    """KL(N(mean, exp(log_var)) || N(prior.mean, prior.var)) in nats, summed over the last axis.

    Returns ``(kl, d_mean, d_log_var)`` where the gradients are of ``kl`` itself.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_var = np.asarray(log_var, dtype=np.float64)
    var = np.exp(log_var)
    diff = mean - prior.mean
    kl = 0.5 * np.sum((var + diff * diff) / prior.var - 1.0 - log_var + np.log(prior.var), axis=-1)
    return np.maximum(kl, 0.0), diff / prior.var, 0.5 * (var / prior.var - 1.0)


class Scheduler:
    """Dot-product scorer: query from the recipient's observation, key from each message.

    With ``learn_var`` the scheduled message also gets a learned per-dimension
    log-variance so it can carry its own bottleneck penalty.
    """

    def __init__(self, obs_dim: int, msg_dim: int, key_dim: int, rng: np.random.Generator,
                 learn_var: bool = False):
        bq = 1.0 / np.sqrt(obs_dim)
        bk = 1.0 / np.sqrt(msg_dim)
        self.wq = rng.uniform(-bq, bq, size=(obs_dim, key_dim))
        self.bq = np.zeros(key_dim)
        self.wk = rng.uniform(-bk, bk, size=(msg_dim, key_dim))
        self.bk = np.zeros(key_dim)
        self.log_var = np.zeros(msg_dim) if learn_var else None

    def params(self) -> list[np.ndarray]:
        p = [self.wq, self.bq, self.wk, self.bk]
        return p + [self.log_var] if self.log_var is not None else p

    def param_names(self) -> list[str]:
        return ["Wq", "bq", "Wk", "bk"] + (["log_var"] if self.log_var is not None else [])

    def copy(self) -> Scheduler:
        new = object.__new__(Scheduler)
        new.wq, new.bq, new.wk, new.bk = (a.copy() for a in (self.wq, self.bq, self.wk, self.bk))
        new.log_var = None if self.log_var is None else self.log_var.copy()
        return new

    def forward(self, obs, msgs, senders, cache=False):
        """Aggregate ``msgs`` (B, G, d) for one recipient.

        ``senders`` is a boolean (G,) mask of messages allowed into the mix.
        Returns ``c`` (B, d) and weights (B, G).
        """
        B, G, d = msgs.shape
        senders = np.asarray(senders, dtype=bool)
        if not senders.any():
            c = np.zeros((B, d))
            w = np.zeros((B, G))
            return (c, w, None) if cache else (c, w)
        scale = 1.0 / np.sqrt(self.wq.shape[1])
        q = obs @ self.wq + self.bq
        k = msgs @ self.wk + self.bk
        s = np.einsum("bk,bgk->bg", q, k) * scale
        s = np.where(senders[None, :], s, -np.inf)
        s = s - s.max(axis=1, keepdims=True)
        e = np.exp(s)
        w = e / e.sum(axis=1, keepdims=True)
        c = np.einsum("bg,bgd->bd", w, msgs)
        if cache:
            return c, w, (obs, msgs, q, k, w, scale)
        return c, w

    def backward(self, cache, dc):
        """Return ``(param_grads, d_obs, d_msgs)``; ``param_grads`` excludes ``log_var``."""
        if cache is None:
            return None, None, None
        obs, msgs, q, k, w, scale = cache
        dw = np.einsum("bd,bgd->bg", dc, msgs)
        dmsgs = w[:, :, None] * dc[:, None, :]
        ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        dq = np.einsum("bg,bgk->bk", ds, k) * scale
        dk = ds[:, :, None] * q[:, None, :] * scale
        dwk = np.einsum("bgd,bgk->dk", msgs, dk)
        dbk = dk.sum(axis=(0, 1))
        dmsgs = dmsgs + dk @ self.wk.T
        dwq = obs.T @ dq
        dbq = dq.sum(axis=0)
        return [dwq, dbq, dwk, dbk], dq @ self.wq.T, dmsgs


@dataclass
class AgentNets:
    policy: DenseNet
    protocol: GaussianHead
    scheduler: Scheduler
    critic: DenseNet
    targets: dict = field(default_factory=dict)

    @classmethod
    def init(cls, obs_dim: int, msg_dim: int, n_agents: int, rng: np.random.Generator,
             hidden=(64, 64), key_dim: int = 16, activation="relu", sched_var: bool = False):
        h = list(hidden)
        policy = DenseNet.init([obs_dim + msg_dim] + h + [2], rng, hidden=activation)
        protocol = GaussianHead.init([obs_dim + msg_dim] + h + [msg_dim], rng, hidden=activation)
        sched = Scheduler(obs_dim, msg_dim, key_dim, rng, learn_var=sched_var)
        critic_in = n_agents * (obs_dim + msg_dim + 2)
        critic = DenseNet.init([critic_in] + h + [1], rng, hidden=activation)
        nets = cls(policy, protocol, sched, critic)
        nets.targets = {name: getattr(nets, name).copy() for name in ("policy", "protocol", "scheduler", "critic")}
        return nets

    def blocks(self, name: str, target: bool = False) -> list[np.ndarray]:
        net = self.targets[name] if target else getattr(self, name)
        return net.params()


# --- single-component operations -------------------------------------------------

def protocol_forward(nets: AgentNets, obs, c_prev, noise, target: bool = False):
    """Return ``(mean, log_var, message)`` for a batch of (obs, previous scheduled message)."""
    head = nets.targets["protocol"] if target else nets.protocol
    mean, log_var = head.forward(np.concatenate([obs, c_prev], axis=-1))
    return mean, log_var, sample_reparam(mean, log_var, noise)


def schedule(messages, recipient: int, nets: AgentNets, obs, senders=None, target: bool = False):
    """Scheduled message for ``recipient`` from group messages (B, G, d).

    ``senders`` defaults to every group member except the recipient.
    Returns ``(c, weights)``.
    """
    msgs = np.asarray(messages, dtype=np.float64)
    if msgs.ndim == 2:
        msgs = msgs[None]
    if senders is None:
        senders = np.arange(msgs.shape[1]) != recipient
    sched = nets.targets["scheduler"] if target else nets.scheduler
    return sched.forward(np.atleast_2d(obs), msgs, senders)


def policy_forward(nets: AgentNets, obs, c, noise_scale: float = 0.0, noise=None, target: bool = False):
    """Tanh-squashed force in [-1, 1]; exploration noise is added then clipped."""
    net = nets.targets["policy"] if target else nets.policy
    a = np.tanh(net.forward(np.concatenate([obs, c], axis=-1)))
    if noise_scale > 0.0 and noise is not None:
        a = np.clip(a + noise_scale * noise, -1.0, 1.0)
    return a


def critic_input(obs, c, actions):
    """Concatenate (B, n, obs), (B, n, d), (B, n, 2) into the fixed critic layout."""
    B = obs.shape[0]
    return np.concatenate([np.concatenate([obs, c], axis=-1).reshape(B, -1), actions.reshape(B, -1)], axis=1)


def critic_forward(nets: AgentNets, obs, c, actions, target: bool = False):
    net = nets.targets["critic"] if target else nets.critic
    return net.forward(critic_input(obs, c, actions))[:, 0]


def check_dims(nets: AgentNets, obs_dim: int, msg_dim: int, n_agents: int) -> None:
    if nets.policy.in_dim != obs_dim + msg_dim:
        raise ConfigError(f"policy input {nets.policy.in_dim} != obs {obs_dim} + msg {msg_dim}")
    if nets.protocol.dim != msg_dim:
        raise ConfigError(f"protocol emits {nets.protocol.dim}-d messages, run uses {msg_dim}")
    if nets.critic.in_dim != n_agents * (obs_dim + msg_dim + 2):
        raise ConfigError(f"critic input {nets.critic.in_dim} does not match {n_agents} agents")


__all__ = ["GaussianPrior", "kl_to_prior", "Scheduler", "AgentNets", "protocol_forward", "schedule",
           "policy_forward", "critic_input", "critic_forward", "check_dims", "LOG_VAR_MIN", "LOG_VAR_MAX"]
