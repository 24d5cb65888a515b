"""Flat ``key = value`` config files.

One assignment per line, ``#`` starts a comment, sections are dotted key
prefixes (``env.n_agents = 3``). Values stay strings here; each consumer
converts its own section.
"""

from __future__ import annotations

from .tensor_nn import ConfigError

REQUIRED_TRAIN_KEYS = ("seed", "env.task", "train.algo", "train.episodes")


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def load_config(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def section(cfg: dict, name: str) -> dict[str, str]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def require(cfg: dict, keys) -> None:
    for key in keys:
        if key not in cfg:
            raise ConfigError(f"missing required key: {key}")


def dump_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def parse_list(value, kind=float) -> list:
    if isinstance(value, (list, tuple)):
        return [kind(v) for v in value]
    return [kind(v.strip()) for v in str(value).split(",") if v.strip()]


def build_run(cfg: dict, seed_override=None):
    """EnvConfig and TrainConfig from a flat config mapping."""
    from .particle_env import EnvConfig
    from .training import TrainConfig

    require(cfg, REQUIRED_TRAIN_KEYS)
    env = EnvConfig.from_mapping(section(cfg, "env"))
    tsec = section(cfg, "train")
    if "seed" in tsec:
        raise ConfigError("train.seed: set the top-level 'seed' key instead")
    try:
        seed = int(cfg["seed"] if seed_override is None else seed_override)
    except ValueError as exc:
        raise ConfigError(f"seed: {exc}") from None
    try:
        train = TrainConfig.from_mapping({**tsec, "seed": seed})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return env, train
