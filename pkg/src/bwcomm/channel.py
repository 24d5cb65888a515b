"""Channel model: quantizer, source coder, rate/entropy budgets and the message limiter.

Entropies are in bits throughout.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from itertools import count

import numpy as np

from .tensor_nn import ConfigError

VAR_FLOOR = 1e-12
LOG2_2PIE = math.log2(2.0 * math.pi * math.e)


class ChannelDomainError(ValueError):
    pass


@dataclass(frozen=True)
class BandwidthBudget:
    bandwidth_hz: float
    signal_levels: int
    msgs_per_sec: float
    quant_interval: float
    message_dim: int

    def __post_init__(self):
        if self.signal_levels < 2 or int(self.signal_levels) != self.signal_levels:
            raise ChannelDomainError(f"signal_levels must be an integer >= 2, got {self.signal_levels}")
        for name in ("bandwidth_hz", "msgs_per_sec", "quant_interval", "message_dim"):
            if not getattr(self, name) > 0:
                raise ChannelDomainError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def from_mapping(cls, cfg: dict) -> BandwidthBudget:
        return cls(float(cfg["bandwidth_hz"]), int(cfg["signal_levels"]), float(cfg["msgs_per_sec"]),
                   float(cfg["quant_interval"]), int(cfg["message_dim"]))


def max_data_rate(bandwidth_hz: float, signal_levels: int) -> float:
    """Nyquist rate of a noiseless channel in bits per second."""
    if signal_levels < 2:
        raise ChannelDomainError(f"need at least 2 signal levels, got {signal_levels}")
    if bandwidth_hz <= 0:
        raise ChannelDomainError(f"bandwidth must be positive, got {bandwidth_hz}")
    return 2.0 * bandwidth_hz * math.log2(signal_levels)


def entropy_budget(budget: BandwidthBudget) -> float:
    """Largest message entropy the channel can carry: R_max / n + d log2(delta).

    Can be negative when the quantization interval is tiny.
    """
    rate = max_data_rate(budget.bandwidth_hz, budget.signal_levels)
    return rate / budget.msgs_per_sec + budget.message_dim * math.log2(budget.quant_interval)


def target_var_for_budget(budget: BandwidthBudget) -> float:
    """Per-dimension variance whose Gaussian entropy bound equals the budget."""
    h = entropy_budget(budget)
    return 2.0 ** (2.0 * h / budget.message_dim - LOG2_2PIE)


def quantization_levels(delta: float, max_amp: float) -> int:
    return int(math.ceil(2.0 * max_amp / delta)) + 1


def quantize(x, delta: float, max_amp: float = 10.0):
    """Uniform mid-tread quantizer. Works on scalars and arrays.

    Returns ``(level_index, reconstructed)`` where ``reconstructed = index * delta``.
    """
    if delta <= 0 or max_amp <= 0:
        raise ChannelDomainError("delta and max_amp must be positive")
    clamped = np.clip(x, -max_amp, max_amp)
    idx = np.rint(clamped / delta)
    recon = idx * delta
    if np.ndim(idx) == 0:
        return int(idx), float(recon)
    return idx.astype(np.int64), recon


def discrete_entropy(counts) -> float:
    c = np.asarray(counts, dtype=np.float64).ravel()
    if c.size == 0 or c.sum() <= 0:
        raise ChannelDomainError("histogram is empty")
    if np.any(c < 0):
        raise ChannelDomainError("negative count in histogram")
    p = c[c > 0] / c.sum()
    return float(-np.sum(p * np.log2(p))) + 0.0


@dataclass
class HuffmanCode:
    probs: list[float]
    codewords: list[str]

    def avg_len(self) -> float:
        return float(sum(p * len(w) for p, w in zip(self.probs, self.codewords)))

    def encode(self, symbols) -> str:
        return "".join(self.codewords[s] for s in symbols)

    def decode(self, bits: str) -> list[int]:
        table = {w: s for s, w in enumerate(self.codewords)}
        out, cur = [], ""
        for b in bits:
            cur += b
            if cur in table:
                out.append(table[cur])
                cur = ""
        if cur:
            raise ChannelDomainError("trailing bits do not form a codeword")
        return out


def huffman_build(probs) -> HuffmanCode:
    probs = [float(p) for p in probs]
    if not probs:
        raise ChannelDomainError("need at least one symbol")
    if any(p < 0 for p in probs):
        raise ChannelDomainError("negative probability")
    if abs(sum(probs) - 1.0) > 1e-9:
        raise ChannelDomainError(f"probabilities sum to {sum(probs)}, not 1")
    if len(probs) == 1:
        return HuffmanCode(probs, ["0"])
    tie = count()
    heap = [(p, next(tie), [s]) for s, p in enumerate(probs)]
    heapq.heapify(heap)
    codes = [""] * len(probs)
    while len(heap) > 1:
        p0, _, s0 = heapq.heappop(heap)
        p1, _, s1 = heapq.heappop(heap)
        for s in s0:
            codes[s] = "0" + codes[s]
        for s in s1:
            codes[s] = "1" + codes[s]
        heapq.heappush(heap, (p0 + p1, next(tie), s0 + s1))
    return HuffmanCode(probs, codes)


def huffman_avg_len(code: HuffmanCode) -> float:
    return code.avg_len()


@dataclass
class RunningStats:
    """Streaming per-dimension mean and population variance (Chan/Welford merge)."""

    dim: int
    count: int = 0
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.m2 is None:
            self.m2 = np.zeros(self.dim)

    @property
    def variance(self) -> np.ndarray:
        if self.count <= 1:
            return np.zeros(self.dim)
        return np.maximum(self.m2 / self.count, 0.0)

    def update(self, m) -> RunningStats:
        """Fold one message ``(d,)`` or a batch ``(k, d)`` into the record."""
        x = np.asarray(m, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ConfigError(f"message dimension {x.shape[-1]} != stats dimension {self.dim}")
        k = x.shape[0]
        if k == 0:
            return self
        if k == 1:
            self.count += 1
            delta = x[0] - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (x[0] - self.mean)
            return self
        bmean = x.mean(axis=0)
        bm2 = ((x - bmean) ** 2).sum(axis=0)
        n = self.count + k
        delta = bmean - self.mean
        self.mean = self.mean + delta * (k / n)
        self.m2 = self.m2 + bm2 + delta * delta * (self.count * k / n)
        self.count = n
        return self

    def copy(self) -> RunningStats:
        return RunningStats(self.dim, self.count, self.mean.copy(), self.m2.copy())


def update_stats(stats: RunningStats, m) -> RunningStats:
    return stats.update(m)


def gaussian_entropy_bound(stats: RunningStats) -> float:
    """Max-entropy bound 0.5*log2((2*pi*e)^d * prod(var)) with a diagonal covariance."""
    if stats.count < 2:
        raise ChannelDomainError("need at least two recorded messages")
    return gaussian_entropy_bound_from_var(stats.variance)


def gaussian_entropy_bound_from_var(variance) -> float:
    var = np.maximum(np.asarray(variance, dtype=np.float64), VAR_FLOOR)
    return 0.5 * (var.size * LOG2_2PIE + float(np.sum(np.log2(var))))


def limit_message(m, stats: RunningStats, target_var: float):
    """Shrink deviations from the recorded mean so each dimension's variance is at most ``target_var``.

    Dimensions already within the target are returned bit-for-bit unchanged.
    """
    if stats.count < 2:
        raise ChannelDomainError("limiter needs at least two recorded messages")
    if not target_var > 0:
        raise ChannelDomainError("target_var must be positive")
    m = np.asarray(m, dtype=np.float64)
    scale = np.sqrt(target_var / np.maximum(stats.variance, VAR_FLOOR))
    shrink = scale < 1.0
    if not np.any(shrink):
        return m
    return np.where(shrink, stats.mean + (m - stats.mean) * np.minimum(scale, 1.0), m)


def verify_bandwidth(stats: RunningStats, budget: BandwidthBudget) -> dict:
    bound = gaussian_entropy_bound(stats)
    cap = entropy_budget(budget)
    return {"ok": bound <= cap, "bound_bits": bound, "cap_bits": cap}
