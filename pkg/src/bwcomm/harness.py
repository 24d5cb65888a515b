"""Experiment commands behind the CLI: train, sweep, crossplay, entropy report, selftest.

Every command writes its primary output as CSV (``,`` delimiter, LF line
endings, header row). Output bytes depend only on inputs and seeds.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .channel import (BandwidthBudget, entropy_budget, gaussian_entropy_bound, gaussian_entropy_bound_from_var,
                      target_var_for_budget, verify_bandwidth)
from .checkpoint import CheckpointError, load_system, save_system
from .config import build_run, dump_config, parse_list, section
from .tensor_nn import ConfigError
from .training import System, episode_seeds, evaluate, fmt, train

CODE_VERSION = f"bwcomm {__version__}"


def code_hash() -> str:
    """Git-style blob hash of the code version string."""
    data = CODE_VERSION.encode("utf-8")
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat()


def _write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


class Manifest:
    """Run manifest, written when the run starts and finalized when it ends."""

    def __init__(self, out_dir: Path, command: str, config: dict, seed, argv=None):
        self.path = out_dir / "manifest.json"
        self.data = {"command": command, "argv": list(argv if argv is not None else sys.argv),
                     "config": config, "seed": seed, "code_version": CODE_VERSION, "code_hash": code_hash(),
                     "started": _now(), "finished": None, "status": "running", "artifacts": {}}
        _write_json_atomic(self.path, self.data)

    def finish(self, status: str, **artifacts) -> None:
        self.data["artifacts"].update({k: str(v) for k, v in artifacts.items()})
        self.data["status"] = status
        self.data["finished"] = _now()
        _write_json_atomic(self.path, self.data)


# --- train -------------------------------------------------------------------------

def cmd_train(cfg: dict, out_dir, seed=None, argv=None) -> Path:
    env, tcfg = build_run(cfg, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    effective = dict(cfg)
    effective["seed"] = str(tcfg.seed)
    (out / "config.txt").write_text(dump_config(effective), encoding="utf-8")
    manifest = Manifest(out, "train", effective, tcfg.seed, argv)
    try:
        train(env, tcfg, metrics_path=out / "metrics.csv", checkpoint_path=out / "checkpoint.bwck")
    except BaseException:
        manifest.finish("failed")
        raise
    manifest.finish("completed", metrics=out / "metrics.csv", checkpoint=out / "checkpoint.bwck",
                    config=out / "config.txt")
    return out


# --- sweep -------------------------------------------------------------------------

def parse_setting(token: str, msg_dim: int):
    """``none`` (no limiter), a target variance, or ``bw:B:K:n:delta`` (a channel budget)."""
    token = token.strip()
    if token == "none":
        return "none", None
    if token.startswith("bw:"):
        parts = token.split(":")[1:]
        if len(parts) != 4:
            raise ConfigError(f"budget setting {token!r} must look like bw:B:K:n:delta")
        budget = BandwidthBudget(float(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), msg_dim)
        return token, target_var_for_budget(budget)
    try:
        value = float(token)
    except ValueError:
        raise ConfigError(f"sweep setting {token!r} is not a number, 'none' or 'bw:...'") from None
    if not value > 0:
        raise ConfigError(f"sweep target variance must be positive, got {value}")
    return token, value


def limited_bound(system: System, target_var) -> float | None:
    """Gaussian bound of the message stream after limiting (max over agents), bits."""
    agents = system.comm_agents()
    if not agents:
        return None
    out = []
    for i in agents:
        var = system.msg_stats[i].variance
        if target_var is not None:
            var = np.minimum(var, target_var)
        out.append(gaussian_entropy_bound_from_var(var))
    return max(out)


def _sweep_cell(args):
    ckpt, label, target_var, seed, episodes = args
    system, _ = load_system(ckpt)
    res = evaluate(system, episode_seeds(seed, episodes, "exec"), target_var=target_var, stream_seed=seed)
    return (label, seed), [float(np.mean(r.returns)) for r in res], limited_bound(system, target_var)


def _run_cells(fn, cells, workers):
    if workers <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, cells))


def cmd_sweep(checkpoint, settings, episodes: int, seeds, out_dir, workers: int = 1, argv=None) -> Path:
    if not settings:
        raise ConfigError("sweep needs at least one setting")
    if episodes < 1:
        raise ConfigError("sweep episodes must be >= 1")
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    system, meta = load_system(checkpoint)
    if not system.comm_agents():
        raise CheckpointError(f"{checkpoint}: checkpoint has no communicating agents to limit")
    if not system.has_stats():
        raise CheckpointError(f"{checkpoint}: no recorded message statistics; retrain to record them")
    parsed = [parse_setting(s, system.d) for s in settings]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "sweep", {"checkpoint": str(checkpoint), "settings": list(settings),
                                       "episodes": episodes, "seeds": list(seeds)}, list(seeds), argv)
    cells = [(str(checkpoint), label, tv, int(s), episodes) for label, tv in parsed for s in seeds]
    results = _run_cells(_sweep_cell, cells, workers)
    order = {label: k for k, (label, _) in enumerate(parsed)}
    results.sort(key=lambda r: (order[r[0][0]], r[0][1]))
    tv_of = dict(parsed)
    with open(out / "sweep.csv", "w", newline="") as fh, open(out / "sweep_episodes.csv", "w", newline="") as fe:
        w, we = _csv_writer(fh), _csv_writer(fe)
        w.writerow(["setting", "target_var", "seed", "mean_reward", "reward_std", "entropy_bound"])
        we.writerow(["setting", "seed", "episode", "reward"])
        for (label, seed), rewards, bound in results:
            w.writerow([label, fmt(tv_of[label]), seed, fmt(np.mean(rewards)), fmt(np.std(rewards)), fmt(bound)])
            for k, r in enumerate(rewards):
                we.writerow([label, seed, k, fmt(r)])
    manifest.finish("completed", results=out / "sweep.csv", episodes=out / "sweep_episodes.csv")
    return out


# --- crossplay ---------------------------------------------------------------------

def combine(pred_ckpt, prey_ckpt) -> System:
    """A predator_prey System whose predators come from one checkpoint and preys from another."""
    pred, pm = load_system(pred_ckpt)
    prey, qm = load_system(prey_ckpt)
    for sysm, path in ((pred, pred_ckpt), (prey, prey_ckpt)):
        if sysm.env.task != "predator_prey":
            raise ConfigError(f"{path}: crossplay needs predator_prey checkpoints, got {sysm.env.task}")
    if (pred.env.n_predators, pred.env.n_preys, pred.obs_dim, pred.d) != \
            (prey.env.n_predators, prey.env.n_preys, prey.obs_dim, prey.d):
        raise ConfigError(f"{pred_ckpt} and {prey_ckpt} have incompatible agent counts or dimensions")
    npred = pred.env.n_predators
    combo = System(pred.env, pred.cfg, nets=pred.nets[:npred] + prey.nets[npred:])
    combo.group_comm = [pred.cfg.comm, prey.cfg.comm]
    combo.msg_stats = pred.msg_stats[:npred] + prey.msg_stats[npred:]
    combo.sched_stats = pred.sched_stats[:npred] + prey.sched_stats[npred:]
    return combo


def _cross_cell(args):
    a, b, episodes, seed, target_var = args
    system = combine(a, b)
    if target_var is not None and not system.has_stats():
        raise CheckpointError("limiter requested but a checkpoint lacks message statistics")
    res = evaluate(system, episode_seeds(seed, episodes, "exec"), target_var=target_var, stream_seed=seed)
    groups = [r.group_returns(system.env) for r in res]
    return float(np.mean([g[0] for g in groups])), float(np.mean([g[1] for g in groups]))


def cmd_crossplay(checkpoints, episodes: int, seed: int, out_dir, target_var=None, labels=None,
                  workers: int = 1, argv=None) -> Path:
    if len(checkpoints) < 2:
        raise ConfigError("crossplay needs at least two checkpoints")
    if episodes < 1:
        raise ConfigError("crossplay episodes must be >= 1")
    labels = labels or [Path(c).parent.name or Path(c).stem for c in checkpoints]
    if len(set(labels)) != len(labels):
        labels = [f"{k}:{lab}" for k, lab in enumerate(labels)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(out, "crossplay", {"checkpoints": [str(c) for c in checkpoints], "episodes": episodes,
                                           "target_var": target_var}, seed, argv)
    cells = [(str(a), str(b), episodes, seed, target_var) for a in checkpoints for b in checkpoints]
    scores = _run_cells(_cross_cell, cells, workers)
    k = len(checkpoints)
    with open(out / "crossplay.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["predator", "prey", "predator_reward", "prey_reward"])
        for idx, (p, q) in enumerate(scores):
            w.writerow([labels[idx // k], labels[idx % k], fmt(p), fmt(q)])
    with open(out / "crossplay_matrix.csv", "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["predator\\prey"] + [f"{lab}:{side}" for lab in labels for side in ("predator", "prey")])
        for r in range(k):
            row = [labels[r]]
            for c in range(k):
                p, q = scores[r * k + c]
                row += [fmt(p), fmt(q)]
            w.writerow(row)
    manifest.finish("completed", results=out / "crossplay.csv", matrix=out / "crossplay_matrix.csv")
    return out


# --- entropy report ----------------------------------------------------------------

def entropy_report(checkpoint, budget: BandwidthBudget | None = None) -> dict:
    system, _ = load_system(checkpoint)
    agents = system.comm_agents()
    if not agents or any(system.msg_stats[i].count < 2 for i in agents):
        raise CheckpointError(f"{checkpoint}: no recorded message statistics")
    rows = []
    cap = entropy_budget(budget) if budget is not None else None
    for i in agents:
        st = system.msg_stats[i]
        row = {"agent": i, "count": st.count, "variance": st.variance.tolist(),
               "bound_bits": gaussian_entropy_bound(st)}
        if budget is not None:
            row["ok"] = bool(verify_bandwidth(st, budget)["ok"])
        rows.append(row)
    report = {"checkpoint": str(checkpoint), "agents": rows,
              "bound_bits": max(r["bound_bits"] for r in rows)}
    if budget is not None:
        report["cap_bits"] = cap
        report["ok"] = all(r["ok"] for r in rows)
    return report


def format_report(rep: dict) -> str:
    lines = []
    for r in rep["agents"]:
        var = ", ".join(f"{v:.4f}" for v in r["variance"])
        line = f"agent {r['agent']}: bound {r['bound_bits']:.4f} bits  variance [{var}]  (n={r['count']})"
        if "ok" in r:
            line += "  ok" if r["ok"] else "  EXCEEDS"
        lines.append(line)
    lines.append(f"gaussian_entropy_bound (max over agents): {rep['bound_bits']:.4f} bits")
    if "cap_bits" in rep:
        lines.append(f"entropy_budget: {rep['cap_bits']:.4f} bits")
        lines.append(f"verdict: {'ok' if rep['ok'] else 'NOT OK'} "
                     f"(bound {rep['bound_bits']:.4f} vs cap {rep['cap_bits']:.4f})")
    return "\n".join(lines)


def budget_from(cfg: dict | None, flag: str | None, msg_dim: int) -> BandwidthBudget | None:
    if flag:
        parts = parse_list(flag, str)
        if len(parts) not in (4, 5):
            raise ConfigError("--budget expects B,K,n,delta[,d]")
        d = int(parts[4]) if len(parts) == 5 else msg_dim
        return BandwidthBudget(float(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), d)
    sec = section(cfg or {}, "budget")
    if not sec:
        return None
    sec.setdefault("message_dim", msg_dim)
    missing = [k for k in ("bandwidth_hz", "signal_levels", "msgs_per_sec", "quant_interval") if k not in sec]
    if missing:
        raise ConfigError(f"missing required key: budget.{missing[0]}")
    return BandwidthBudget.from_mapping(sec)


__all__ = ["cmd_train", "cmd_sweep", "cmd_crossplay", "entropy_report", "format_report", "budget_from",
           "combine", "code_hash", "parse_setting", "save_system"]
