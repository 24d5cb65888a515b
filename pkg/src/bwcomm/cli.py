"""Command-line entry point: ``bwcomm {train,sweep,crossplay,entropy-report,selftest}``.

Exit codes: 0 success, 1 validation error (bad config, failed self-test),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .channel import ChannelDomainError
from .checkpoint import CheckpointError
from .config import load_config, parse_list
from .tensor_nn import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="override the config's seed")
    p.add_argument("--out-dir", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel cells for sweep/crossplay")
    p.add_argument("--deterministic", action="store_true", help="force a single worker")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bwcomm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents from a config file")
    _common(p)

    p = sub.add_parser("sweep", help="execution-stage limiter sweep over a trained checkpoint")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--settings", help="comma list: target variances, 'none', or bw:B:K:n:delta")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", help="comma list of evaluation seeds")

    p = sub.add_parser("crossplay", help="predator/prey tournament between checkpoints")
    _common(p)
    p.add_argument("--checkpoints", help="comma list of checkpoint files")
    p.add_argument("--labels", help="comma list of names for the checkpoints")
    p.add_argument("--episodes", type=int)
    p.add_argument("--target-var", type=float, help="apply the execution limiter")

    p = sub.add_parser("entropy-report", help="message entropy bound vs a bandwidth budget")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--budget", help="B,K,n,delta[,d]; overrides budget.* config keys")

    p = sub.add_parser("selftest", help="run every oracle suite")
    _common(p)
    return parser


def _pick(flag, cfg, key, default=None):
    if flag is not None:
        return flag
    return cfg.get(key, default)


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = 1 if args.deterministic else max(1, args.workers)
    full_argv = ["bwcomm"] + argv
    from . import harness

    try:
        cfg = load_config(args.config) if args.config else {}
        if args.command == "train":
            if not args.config:
                raise ConfigError("train requires --config")
            out = harness.cmd_train(cfg, args.out_dir or cfg.get("run.out_dir", "runs/train"), args.seed, full_argv)
            print(out)
        elif args.command == "sweep":
            ckpt = _pick(args.checkpoint, cfg, "sweep.checkpoint")
            if ckpt is None:
                raise ConfigError("missing required key: sweep.checkpoint (or --checkpoint)")
            settings = parse_list(_pick(args.settings, cfg, "sweep.settings", ""), str)
            episodes = int(_pick(args.episodes, cfg, "sweep.episodes", 100))
            seeds = parse_list(_pick(args.seeds, cfg, "sweep.seeds", str(args.seed if args.seed is not None
                                                                           else cfg.get("seed", 0))), int)
            out = harness.cmd_sweep(ckpt, settings, episodes, seeds, args.out_dir or "runs/sweep", workers, full_argv)
            print(out / "sweep.csv")
        elif args.command == "crossplay":
            ckpts = parse_list(_pick(args.checkpoints, cfg, "crossplay.checkpoints", ""), str)
            labels = parse_list(_pick(args.labels, cfg, "crossplay.labels", ""), str) or None
            episodes = int(_pick(args.episodes, cfg, "crossplay.episodes", 1000))
            seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
            tv = _pick(args.target_var, cfg, "crossplay.target_var")
            out = harness.cmd_crossplay(ckpts, episodes, seed, args.out_dir or "runs/crossplay",
                                        None if tv is None else float(tv), labels, workers, full_argv)
            print(out / "crossplay_matrix.csv")
        elif args.command == "entropy-report":
            from .checkpoint import read_blocks
            _, meta = read_blocks(args.checkpoint)
            budget = harness.budget_from(cfg, args.budget, int(meta["train"]["msg_dim"]))
            rep = harness.entropy_report(args.checkpoint, budget)
            print(harness.format_report(rep))
            if args.out_dir:
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
                (Path(args.out_dir) / "entropy_report.json").write_text(
                    json.dumps(rep, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        elif args.command == "selftest":
            from .selftest import run_selftest
            summary = run_selftest()
            text = json.dumps(summary, indent=2, sort_keys=True)
            print(text)
            if args.out_dir:
                Path(args.out_dir).mkdir(parents=True, exist_ok=True)
                (Path(args.out_dir) / "selftest.json").write_text(text + "\n", encoding="utf-8")
            return EXIT_OK if summary["ok"] else EXIT_INVALID
    except (ConfigError, ChannelDomainError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - map anything else onto the runtime-failure code
        logging.getLogger("bwcomm").exception("runtime failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
