"""Command line entry point: ``multibalance {train,throughput,theory,sweep}``.

Exit codes: 0 success, 1 configuration error, 2 divergence, 3 theory-suite failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .harness import DivergenceError, measure_throughput, run_sweep, train
from .suite import run_theory_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_THEORY = 0, 1, 2, 3


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = yaml.safe_load(raw)
    try:
        return cfg.replace(**overrides) if overrides else cfg
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad override: {exc}") from exc


def _print(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_train(args) -> int:
    cfg = _load(args)
    try:
        man = train(cfg, vanilla=args.vanilla, records_path=args.records, manifest_path=args.manifest)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    _print({k: man[k] for k in ("status", "balancer", "steps", "records") if k in man} | {"eval": man.get("eval")})
    return EXIT_OK


def cmd_throughput(args) -> int:
    cfg = _load(args)
    names = args.compare.split(",") if args.compare else [None]
    out = {}
    for name in names:
        run_cfg = cfg
        if name in ("mgda", "moco") and args.parameter_mode:
            run_cfg = cfg.replace(**{"balancer.name": name, "gradient_source": "parameter"})
        elif name is not None:
            run_cfg = cfg.replace(**{"balancer.name": name, "gradient_source": "representation"})
        res = measure_throughput(run_cfg, args.warmup, args.timed)
        out[name or cfg.balancer.name] = res.__dict__ | {"gradient_source": run_cfg.gradient_source}
    _print(out)
    return EXIT_OK


def cmd_theory(args) -> int:
    cfg = _load(args)
    summary = run_theory_suite(cfg, out=args.out, inject_bug=args.inject_bug)
    _print(summary)
    return EXIT_OK if summary["passed"] else EXIT_THEORY


def cmd_sweep(args) -> int:
    cfg = _load(args)
    betas = [float(b) for b in args.betas.split(",")] if args.betas else None
    summary = run_sweep(cfg, betas=betas, out_dir=args.out_dir, workers=args.workers)
    _print(summary)
    return EXIT_DIVERGED if summary["diverged"] else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multibalance", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("-c", "--config", help="YAML experiment file (defaults used when omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. balancer.beta=2")

    t = sub.add_parser("train", help="run one configuration, write records and a manifest")
    common(t)
    t.add_argument("--vanilla", action="store_true", help="ignore the balancer and train on the summed loss")
    t.add_argument("--records")
    t.add_argument("--manifest")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("throughput", help="time training steps on pre-generated batches")
    common(q)
    q.add_argument("--warmup", type=int, default=20)
    q.add_argument("--timed", type=int, default=200)
    q.add_argument("--compare", help="comma-separated balancer names timed on the same data")
    q.add_argument("--parameter-mode", action="store_true", help="time mgda/moco with per-task backward passes")
    q.set_defaults(func=cmd_throughput)

    th = sub.add_parser("theory", help="run the numerical theory checks")
    common(th)
    th.add_argument("--out", help="report path (JSON lines)")
    th.add_argument("--inject-bug", action="store_true", help="negate the residual to confirm the checker fails")
    th.set_defaults(func=cmd_theory)

    s = sub.add_parser("sweep", help="vanilla baseline plus one run per weight learning rate")
    common(s)
    s.add_argument("--betas", help="comma-separated values (default from the config)")
    s.add_argument("--out-dir")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        if args.command == "throughput" and "timed_steps" in str(exc):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
