"""Portable checkpoint files.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"BWCKPT01"
    offset 8   8 bytes   uint64 H, length of the JSON header
    offset 16  H bytes   UTF-8 JSON: {"meta": {...}, "blocks": [{"name", "shape", "offset"}, ...]}
    offset 16+H          float64 little-endian data, C order; block offsets are
                         byte offsets from the start of this region

Block names used by ``save_system``::

    agent{i}/{policy|protocol|scheduler|critic}/{param}
    agent{i}/target/{component}/{param}
    agent{i}/optim/{actor|critic}/{m|v}/{k}     (plus .../step as a 1-element block)
    stats/agent{i}/{message|scheduled}/{count|mean|m2}
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .channel import RunningStats
from .tensor_nn import ConfigError

MAGIC = b"BWCKPT01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_blocks(path, blocks: dict[str, np.ndarray], meta: dict) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in blocks.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "blocks": entries}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_blocks(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    base = 16 + hlen
    blocks = {}
    for e in header["blocks"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=start).astype(np.float64)
        blocks[e["name"]] = arr.reshape(e["shape"])
    return blocks, header["meta"]


def _component_params(nets, name, target=False):
    net = nets.targets[name] if target else getattr(nets, name)
    names = net.trunk.param_names() if name == "protocol" else net.param_names()
    return list(zip(names, net.params()))


def system_blocks(system) -> dict[str, np.ndarray]:
    blocks = {}
    for i, nets in enumerate(system.nets):
        for comp in ("policy", "protocol", "scheduler", "critic"):
            for pname, p in _component_params(nets, comp):
                blocks[f"agent{i}/{comp}/{pname}"] = p
            for pname, p in _component_params(nets, comp, target=True):
                blocks[f"agent{i}/target/{comp}/{pname}"] = p
        for kind, st in (("actor", system.actor_opt[i]), ("critic", system.critic_opt[i])):
            blocks[f"agent{i}/optim/{kind}/step"] = np.array([float(st.step)])
            for k, (m, v) in enumerate(zip(st.m, st.v)):
                blocks[f"agent{i}/optim/{kind}/m/{k}"] = m
                blocks[f"agent{i}/optim/{kind}/v/{k}"] = v
        for kind, st in (("message", system.msg_stats[i]), ("scheduled", system.sched_stats[i])):
            blocks[f"stats/agent{i}/{kind}/count"] = np.array([float(st.count)])
            blocks[f"stats/agent{i}/{kind}/mean"] = st.mean
            blocks[f"stats/agent{i}/{kind}/m2"] = st.m2
    return blocks


def save_system(path, system, episode: int | None = None, extra: dict | None = None) -> None:
    meta = {"format_version": FORMAT_VERSION, "env": system.env.to_mapping(),
            "train": system.cfg.to_mapping(), "episode": episode, "n_agents": system.n}
    if extra:
        meta.update(extra)
    write_blocks(path, system_blocks(system), meta)


def load_system(path, train_overrides: dict | None = None):
    """Rebuild a System from a checkpoint, restoring nets, targets, optimizers and stats."""
    from .particle_env import EnvConfig
    from .training import System, TrainConfig

    blocks, meta = read_blocks(path)
    env = EnvConfig.from_mapping(meta["env"])
    tcfg = dict(meta["train"])
    tcfg.update(train_overrides or {})
    system = System(env, TrainConfig.from_mapping(tcfg))
    for i, nets in enumerate(system.nets):
        for comp in ("policy", "protocol", "scheduler", "critic"):
            for prefix, target in ((f"agent{i}/{comp}", False), (f"agent{i}/target/{comp}", True)):
                for pname, p in _component_params(nets, comp, target):
                    _assign(blocks, f"{prefix}/{pname}", p)
        for kind, st in (("actor", system.actor_opt[i]), ("critic", system.critic_opt[i])):
            if f"agent{i}/optim/{kind}/step" in blocks:
                st.step = int(blocks[f"agent{i}/optim/{kind}/step"][0])
                for k in range(len(st.m)):
                    _assign(blocks, f"agent{i}/optim/{kind}/m/{k}", st.m[k])
                    _assign(blocks, f"agent{i}/optim/{kind}/v/{k}", st.v[k])
        for kind, lst in (("message", system.msg_stats), ("scheduled", system.sched_stats)):
            key = f"stats/agent{i}/{kind}"
            if f"{key}/count" in blocks:
                lst[i] = RunningStats(system.d, int(blocks[f"{key}/count"][0]),
                                      blocks[f"{key}/mean"].copy(), blocks[f"{key}/m2"].copy())
    return system, meta


def _assign(blocks, name, dest):
    if name not in blocks:
        raise CheckpointError(f"checkpoint lacks block {name}")
    src = blocks[name]
    if src.shape != dest.shape:
        raise ConfigError(f"block {name}: checkpoint shape {src.shape} != model shape {dest.shape}")
    dest[...] = src


def has_stats(system) -> bool:
    return all(s.count >= 2 for s in system.msg_stats + system.sched_stats)
