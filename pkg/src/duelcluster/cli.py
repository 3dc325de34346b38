"""Command-line entry point.

    duelcluster run --algo coldb --env linear --users 50 --clusters 2 \
        --arms 10 --dim 10 --gamma 0.8 --horizon 5000 --seeds 1,2,3 \
        --out traces.csv [--summary] [--config params.json]

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError
from .harness import (
    ExperimentConfig,
    config_from_dict,
    run_experiment,
    write_csv,
    write_summary_csv,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duelcluster")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write a regret CSV")
    run.add_argument("--algo", choices=("coldb", "condb", "ldb_ind", "ndb_ind"))
    run.add_argument("--env", help="linear | square | file:PATH")
    run.add_argument("--users", type=int)
    run.add_argument("--clusters", type=int)
    run.add_argument("--arms", type=int)
    run.add_argument("--dim", type=int)
    run.add_argument("--gamma", type=float)
    run.add_argument("--horizon", type=int)
    run.add_argument("--seeds", help="comma-separated trial seeds, e.g. 1,2,3")
    run.add_argument("--out", help="output CSV path")
    run.add_argument("--summary", action="store_true", default=None,
                     help="also write <out>.summary.csv with mean +- stderr")
    run.add_argument("--allow-misspecified", action="store_true", default=None,
                     help="permit linear algorithms on the square environment")
    run.add_argument("--config", help="JSON file mirroring the experiment config; "
                                      "explicit flags override file values")
    return parser


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}") from None


def _assemble_config(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {
        "algo": args.algo,
        "env": args.env,
        "users": args.users,
        "clusters": args.clusters,
        "arms": args.arms,
        "dim": args.dim,
        "gamma": args.gamma,
        "horizon": args.horizon,
        "out": args.out,
        "summary": args.summary,
        "allow_misspecified": args.allow_misspecified,
    }
    if args.seeds is not None:
        overrides["seeds"] = _parse_seeds(args.seeds)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    for required in ("algo", "env", "horizon", "seeds"):
        if required not in raw:
            raise ConfigError(f"missing required option --{required}")
    return config_from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _assemble_config(args)
        config.validate()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        traces = run_experiment(config)
        if config.out:
            write_csv(traces, config.out)
            if config.summary:
                write_summary_csv(traces, f"{config.out}.summary.csv")
        final = ", ".join(f"seed {tr.seed}: {tr.cum[-1]:.4g}" for tr in traces)
        print(f"{config.algo} on {config.env}: final cumulative regret {final}")
        return 0
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
