"""Independent oracles for the closed-form and hand-derived pieces.

Each suite returns ``{"ok": bool, ...details}``. The oracles deliberately avoid
the code paths they check: formulas are recomputed with ``math``, Huffman
lengths are compared with an exhaustive search over prefix codes, the KL is
estimated by sampling, and gradients by central differences.
"""

from __future__ import annotations

import itertools
import math
import time

import numpy as np
from scipy import stats as sstats
from scipy.stats import qmc

from . import channel as ch
from .agents import GaussianPrior, critic_input, kl_to_prior
from .particle_env import EnvConfig
from .tensor_nn import DenseNet, grad_check


# --- formulas ------------------------------------------------------------------

def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def suite_entropy_formulas(trials: int = 10, seed: int = 0, tol: float = 1e-12) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        B = float(rng.uniform(1.0, 1e4))
        K = int(rng.integers(2, 64))
        n = float(rng.uniform(0.5, 100.0))
        delta = float(rng.uniform(0.01, 2.0))
        d = int(rng.integers(1, 9))
        var = rng.uniform(0.05, 5.0, size=d)
        rate = 2 * B * math.log(K) / math.log(2)
        worst = max(worst, _rel(ch.max_data_rate(B, K), rate))
        budget = ch.BandwidthBudget(B, K, n, delta, d)
        worst = max(worst, _rel(ch.entropy_budget(budget), rate / n + d * math.log(delta) / math.log(2)))
        rs = ch.RunningStats(d, count=10, mean=np.zeros(d), m2=var * 10)
        det = 1.0
        for v in rs.variance:
            det *= v
        hand = 0.5 * math.log((2 * math.pi * math.e) ** d * det) / math.log(2)
        worst = max(worst, _rel(ch.gaussian_entropy_bound(rs), hand))
    return {"ok": worst <= tol, "max_rel_err": worst}


def suite_quantizer(samples: int = 100_000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for delta in (1.0, 0.5, 0.25, 0.1, 0.037):
        x = rng.uniform(-10.0, 10.0, size=samples)
        _, recon = ch.quantize(x, delta, 10.0)
        worst = max(worst, float(np.max(np.abs(recon - x))) / (delta / 2))
    return {"ok": worst <= 1.0 + 1e-9, "max_err_over_half_delta": worst}


def suite_remark1(samples: int = 1_000_000, seed: int = 0, tol: float = 0.1,
                  deltas=(1.0, 0.5, 0.25)) -> dict:
    """Discrete entropy of a quantized N(0,1) stream vs differential entropy minus log2(delta)."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(samples)
    h_diff = 0.5 * math.log2(2 * math.pi * math.e)
    gaps = {}
    for delta in deltas:
        idx, _ = ch.quantize(x, delta, 10.0)
        counts = np.bincount(idx - idx.min())
        gaps[delta] = abs(ch.discrete_entropy(counts) - (h_diff - math.log2(delta)))
    return {"ok": all(g <= tol for g in gaps.values()), "abs_gap_bits": {str(k): v for k, v in gaps.items()}}


# --- source coding -----------------------------------------------------------------

def brute_force_min_length(probs) -> float:
    """Minimum expected length over all prefix codes, by enumerating Kraft-feasible length vectors."""
    n = len(probs)
    if n == 1:
        return float(probs[0]) * 1.0
    best = math.inf
    for lengths in itertools.product(range(1, n), repeat=n):
        if sum(2.0 ** -l for l in lengths) <= 1.0:
            best = min(best, sum(p * l for p, l in zip(probs, lengths)))
    return best


def grid_distributions(max_symbols: int = 4, step: float = 0.05):
    units = int(round(1 / step))
    for k in range(2, max_symbols + 1):
        for cuts in itertools.combinations_with_replacement(range(units + 1), k - 1):
            parts = [b - a for a, b in zip((0,) + cuts, cuts + (units,))]
            yield [p / units for p in parts]


def is_prefix_free(words) -> bool:
    return not any(a != b and b.startswith(a) for a in words for b in words)


def suite_huffman(random_trials: int = 1000, seed: int = 0, grid_step: float = 0.05) -> dict:
    rng = np.random.default_rng(seed)
    sandwich_fail = 0
    for _ in range(random_trials):
        k = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(k))
        p = p / p.sum()
        code = ch.huffman_build(p)
        L = ch.huffman_avg_len(code)
        H = ch.discrete_entropy(p)
        if not (H <= L + 1e-12 and L < H + 1) or not is_prefix_free(code.codewords):
            sandwich_fail += 1
    grid_fail, grid_total = 0, 0
    for p in grid_distributions(4, grid_step):
        grid_total += 1
        L = ch.huffman_avg_len(ch.huffman_build(p))
        if abs(L - brute_force_min_length(p)) > 1e-12:
            grid_fail += 1
    return {"ok": sandwich_fail == 0 and grid_fail == 0, "sandwich_failures": sandwich_fail,
            "grid_failures": grid_fail, "grid_total": grid_total}


# --- KL ----------------------------------------------------------------------------

def kl_monte_carlo(mu, var, prior_var, samples: int = 2**17, seed: int = 0) -> float:
    """E_q[log q - log p] with q = N(mu, var), p = N(0, prior_var), via scrambled Sobol draws."""
    u = qmc.Sobol(1, scramble=True, seed=seed).random(samples)[:, 0]
    x = mu + math.sqrt(var) * sstats.norm.ppf(u)
    return float(np.mean(sstats.norm.logpdf(x, mu, math.sqrt(var)) - sstats.norm.logpdf(x, 0.0, math.sqrt(prior_var))))


def suite_kl(triples: int = 20, seed: int = 0, tol: float = 0.01, kl_fn=kl_to_prior) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(triples):
        mu = float(rng.uniform(-2, 2))
        var = float(rng.uniform(0.1, 4.0))
        pvar = float(rng.uniform(0.25, 5.0))
        closed = float(kl_fn(np.array([mu]), np.array([math.log(var)]), GaussianPrior(0.0, pvar))[0])
        mc = kl_monte_carlo(mu, var, pvar, seed=seed * 1000 + t)
        worst = max(worst, abs(closed - mc) / max(abs(mc), 1e-12))
    return {"ok": worst <= tol, "max_rel_err": worst}


# --- gradients ---------------------------------------------------------------------

def actor_grad_error(task: str, seed: int, algo: str = "imac", hidden: str = "8,8", batch: int = 6,
                     sched_beta: float = 0.0) -> dict:
    """Max relative FD error for every parameter block touched by the actor loss and critic loss."""
    from .training import (ReplayBuffer, System, TrainConfig, actor_loss_and_grads, critic_loss_and_grads,
                           rollout_episodes, target_values)

    env = EnvConfig(task=task, episode_len=4)
    cfg = TrainConfig(algo=algo, seed=seed, hidden=hidden, batch_size=batch, buffer_size=64, beta=0.5,
                      prior_var=1.5, sched_beta=sched_beta)
    system = System(env, cfg)
    buf = ReplayBuffer(64, system.n, system.obs_dim, system.d)
    rng = np.random.default_rng(seed)
    rollout_episodes(system, [seed, seed + 1, seed + 2], rng, noise_scale=0.3, buffer=buf)
    b = buf.sample(batch, rng)
    errs = {}
    for group in env.groups:
        _, grads, _ = actor_loss_and_grads(system, b, group)
        f = lambda: actor_loss_and_grads(system, b, group, need_grads=False)[0]
        for i in group:
            comps = ("policy", "protocol", "scheduler") if cfg.comm else ("policy",)
            for comp in comps:
                errs[f"agent{i}/{comp}"] = grad_check(f, getattr(system.nets[i], comp).params(), grads[i][comp])
    y = target_values(system, b)
    x = critic_input(b["obs"], b["c"], b["act"])
    for i in range(system.n):
        _, g = critic_loss_and_grads(system, i, b, y)
        critic = system.nets[i].critic
        q0 = critic.forward(x)[:, 0]

        # L(theta) - L(theta0) written without forming (q - y)^2: same gradient,
        # but catch rewards make y large and the plain loss drowns small
        # coordinates in round-off at eps=1e-5
        def delta_loss():
            q = critic.forward(x)[:, 0]
            return float(np.mean((q - q0) * (q + q0 - 2.0 * y[:, i])))

        errs[f"agent{i}/critic"] = grad_check(delta_loss, critic.params(), g)
    return errs


def suite_gradients(seeds=(0,), tol: float = 1e-4, tasks=("coop_nav",)) -> dict:
    worst = 0.0
    rng = np.random.default_rng(0)
    net = DenseNet.init([5, 7, 3], rng, hidden="tanh")
    x = rng.standard_normal((4, 5))
    up = rng.standard_normal((4, 3))
    _, cache = net.forward(x, cache=True)
    g, _ = net.backward(cache, up)
    worst = max(worst, grad_check(lambda: float(np.sum(net.forward(x) * up)), net.params(), g))
    for task in tasks:
        for s in seeds:
            worst = max(worst, max(actor_grad_error(task, s).values()))
    return {"ok": worst <= tol, "max_rel_err": worst}


SUITES = {
    "entropy_formulas": suite_entropy_formulas,
    "quantizer_bounds": suite_quantizer,
    "remark1_consistency": lambda: suite_remark1(samples=200_000),
    "huffman_bruteforce": lambda: suite_huffman(random_trials=300),
    "kl_montecarlo": suite_kl,
    "fd_gradients": suite_gradients,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def run_selftest(kl_fn=None) -> dict:
    """Run every suite; ``kl_fn`` replaces the KL under test (used to prove the oracle bites)."""
    results = {}
    for name, fn in SUITES.items():
        t0 = time.perf_counter()
        try:
            res = suite_kl(kl_fn=kl_fn) if (name == "kl_montecarlo" and kl_fn is not None) else fn()
        except Exception as exc:  # a crashing oracle is a failing oracle
            res = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        res["seconds"] = round(time.perf_counter() - t0, 3)
        results[name] = _plain(res)
    return {"ok": all(r["ok"] for r in results.values()), "suites": results}
