"""Command-line entry point: ``fedtan run|compare|verify|comm``."""
from __future__ import annotations

import argparse
import logging
import sys

from .comm import (ModelSizeSpec, export_csv, format_mb, per_iteration_bytes,
                   per_iteration_rounds)
from .config import ConfigError, build_experiment, load_config
from .sim import Simulation

log = logging.getLogger("fedtan")


def _run_one(cfg):
    spec, client_data, test = build_experiment(cfg)
    sim = Simulation(spec, client_data, cfg.scheme_config(), epsilon=cfg.scheme.epsilon)
    name = cfg.scheme.name

    def progress(rec):
        log.info("%s iteration %d: loss %.4f accuracy %.4f", name, rec.iteration,
                 rec.train_loss, rec.test_accuracy)

    log.info("running %s on %d clients for %d iterations", name, len(client_data),
             cfg.scheme.iterations)
    return sim.run(test, progress)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    history = _run_one(cfg)
    out = args.output or cfg.run.output
    export_csv(history, out)
    log.info("wrote %d rows to %s", len(history), out)
    return 0


def cmd_compare(args) -> int:
    configs = [load_config(p) for p in args.configs]
    history = []
    for cfg in configs:
        history.extend(_run_one(cfg))
    out = args.output or configs[0].run.output
    export_csv(history, out)
    log.info("wrote %d rows to %s", len(history), out)
    return 0


def cmd_verify(args) -> int:
    from .checks import run_all
    results = run_all()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_comm(args) -> int:
    try:
        size = ModelSizeSpec(args.total_params, args.stat_params, args.clients)
        nbytes = per_iteration_bytes(size, args.scheme)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{args.scheme}: {format_mb(nbytes)} per iteration ({nbytes} bytes)")
    if args.bn_layers is not None:
        rounds = per_iteration_rounds(args.scheme, args.bn_layers)
        print(f"{args.scheme}: {rounds} communication rounds per iteration")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedtan", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write a CSV")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="CSV path (default: run.output)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs into one CSV")
    p.add_argument("configs", nargs="+")
    p.add_argument("-o", "--output", help="CSV path (default: first config's run.output)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("verify", help="run the built-in correctness checks")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("comm", help="per-iteration communication cost")
    p.add_argument("total_params", type=int)
    p.add_argument("stat_params", type=int)
    p.add_argument("clients", type=int)
    p.add_argument("scheme")
    p.add_argument("--bn-layers", type=int, help="also print rounds per iteration")
    p.set_defaults(func=cmd_comm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
