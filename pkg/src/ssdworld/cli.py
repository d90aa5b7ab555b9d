"""Command-line entry point: ``ssdworld <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    # all overrides land together so interdependent fields are validated once
    cfg = RunConfig.from_text("\n".join(args.set or []), base=cfg)
    return cfg.replace(seed=args.seed, mode=args.mode, sampler=getattr(args, "sampler", None))


def _summary(result: dict) -> str:
    keep = {k: v for k, v in result.items() if isinstance(v, (int, float, str))}
    return json.dumps(keep, indent=2, sort_keys=True)


def cmd_train_gridworld(args) -> int:
    from .train import train_gridworld

    result = train_gridworld(_config(args), args.out)
    print(_summary(result))
    return 0


def cmd_train_agent(args) -> int:
    from .train import train_agent

    result = train_agent(_config(args), args.out)
    print(_summary(result))
    return 0


def cmd_bench_scaling(args) -> int:
    from .bench import bench_scaling

    result = bench_scaling(_config(args), args.out)
    for r in result["rows"]:
        print(f"{r['mode']:<10} l={r['seq_len']:<5} {r['ms_per_step']:10.2f} ms "
              f"{r['peak_bytes'] / 2**20:10.2f} MB  {r['status']}")
    for mode, e in result["exponents"].items():
        print(f"{mode:<10} time exponent {e['time']:.3f}  memory exponent {e['memory']:.3f}")
    return 0


def cmd_verify(args) -> int:
    from .verify import report, run_checks

    results = run_checks()
    print(report(results))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssdworld", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, sampler: bool = False):
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("recurrent", "chunked", "quadratic", "gru"))
        p.add_argument("--out", type=Path, default=Path("runs") / p.prog.split()[-1])
        if sampler:
            p.add_argument("--sampler", choices=("dfs", "uniform"))

    common(sub.add_parser("train-gridworld", help="token grid-world prediction benchmark"))
    common(sub.add_parser("train-agent", help="world model + imagined actor-critic on pixels"),
           sampler=True)
    common(sub.add_parser("bench-scaling", help="time/memory versus sequence length"))
    sub.add_parser("verify", help="run the named invariant checks")
    return parser


COMMANDS = {"train-gridworld": cmd_train_gridworld, "train-agent": cmd_train_agent,
            "bench-scaling": cmd_bench_scaling, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as err:
        print(f"ssdworld: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
