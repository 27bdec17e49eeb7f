"""Command line: run, sweep, eval, demo-fig3, validate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import engine
from .config import BUNDLED, ConfigError, load_config, resolve_path, validate_config
from .evaluation import fig3_demo, kl_grid


class CliError(Exception):
    pass


def _int_list(text: str) -> list:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("rates must be integers >= 1")
    return vals


def _strategies(text: str) -> list:
    vals = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in vals if v not in ("selective", "baseline", "full", "none")]
    if not vals or bad:
        raise argparse.ArgumentTypeError(f"unknown strategy: {', '.join(bad) or text!r}")
    return vals


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decfusion", description="Decentralised target-tracking simulator.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True,
                            help=f"scenario YAML path or bundled name ({', '.join(BUNDLED)})")
            sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")

    r = sub.add_parser("run", help="simulate one scenario, write per-step metrics")
    common(r)
    r.add_argument("--oracle", choices=("on", "off"), help="compute KL against the reference")
    r.add_argument("--parallel", action="store_true", help="sense phase on a thread pool")

    s = sub.add_parser("sweep", help="strategy x rate grid, averaged over repeats")
    common(s)
    s.add_argument("--rates", type=_int_list, default=[1, 2, 3, 6, 9])
    s.add_argument("--strategies", type=_strategies, default=["selective", "baseline"])
    s.add_argument("--repeats", type=_positive, default=6)
    s.add_argument("--parallel", action="store_true")

    e = sub.add_parser("eval", help="KL of a run's final marginals against the scenario oracle")
    common(e)
    e.add_argument("--metrics", required=True, help="metrics CSV written by 'run'")

    d = sub.add_parser("demo-fig3", help="naive marginal product vs exact posterior")
    common(d, config=False)
    d.add_argument("--config", default="fig3-corridor", help=argparse.SUPPRESS)

    v = sub.add_parser("validate", help="check a scenario config without running it")
    v.add_argument("--config", required=True)
    return p


def _load(args):
    try:
        cfg = load_config(args.config)
    except OSError as e:
        raise CliError(f"cannot read {e.filename or args.config}: {e.strerror}")
    except yaml.YAMLError as e:
        raise ConfigError([f"config: YAML parse error: {e}"])
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _emit(text: str, out):
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as e:
        raise CliError(f"cannot write {out}: {e.strerror}")


def _read_metrics(path: str) -> list:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise CliError(f"cannot read {path}: {e.strerror}")
    if not lines or tuple(lines[0].split(",")) != engine.METRICS_HEADER:
        raise CliError(f"{path}: not a metrics CSV")
    return [line.split(",") for line in lines[1:]]


def cmd_run(args) -> str:
    cfg = _load(args)
    if args.oracle == "off":
        cfg = cfg.with_overrides(oracle="off")
    elif args.oracle == "on" and cfg.oracle == "off":
        cfg = cfg.with_overrides(oracle="reference")
    log = engine.run(cfg, parallel=args.parallel or None)
    _emit(log.to_json() if args.format == "json" else log.to_csv(), args.out)
    s = log.summary()
    return f"mean_kl={s['mean_kl']:.6g} total_bandwidth={s['total_bandwidth']}"


def cmd_sweep(args) -> str:
    cfg = _load(args)
    rows = engine.sweep(cfg, args.rates, args.strategies, args.repeats, parallel=args.parallel or None)
    _emit(engine.sweep_to_json(rows) if args.format == "json" else engine.sweep_to_csv(rows), args.out)
    best = min(rows, key=lambda r: r.kl_mean)
    return f"rows={len(rows)} best={best.strategy}@{best.rate} mean_kl={best.kl_mean:.6g}"


def cmd_eval(args) -> str:
    """Re-run the logged scenario and compare the summary in the file with a fresh oracle."""
    cfg = _load(args)
    rows = _read_metrics(args.metrics)
    kls = [float(r[2]) for r in rows if r[2] != engine.ABSENT]
    log = engine.run(cfg.with_overrides(oracle="reference" if cfg.oracle == "off" else cfg.oracle),
                     keep_marginals=True)
    ref = log.reference[-1]
    final = [kl_grid(ref, m) for m in log.marginals[-1]]
    result = {
        "logged_mean_kl": float(np.mean(kls)) if kls else None,
        "final_kl_per_agent": final,
        "mean_kl": log.mean_kl,
        "total_bandwidth": log.total_scalars,
    }
    if args.format == "json":
        _emit(json.dumps(result, indent=1, sort_keys=True) + "\n", args.out)
    else:
        lines = ["agent,final_kl"] + [f"{i},{v!r}" for i, v in enumerate(final)]
        _emit("\n".join(lines) + "\n", args.out)
    return f"mean_kl={log.mean_kl:.6g} total_bandwidth={log.total_scalars}"


def cmd_demo(args) -> str:
    cfg = _load(args)
    d = fig3_demo(cfg)
    if args.format == "json":
        text = json.dumps({"exact_mass": d["exact_mass"], "product_mass": d["product_mass"]},
                          indent=1, sort_keys=True) + "\n"
    else:
        rows = ["x,y,exact,product"]
        for (x, y), a, b in zip(cfg.grid.coords, d["exact"].mass, d["product"].mass):
            rows.append(f"{x},{y},{a!r},{b!r}")
        text = "\n".join(rows) + "\n"
    _emit(text, args.out)
    return f"slipped_mass exact={d['exact_mass']:.4g} product={d['product_mass']:.4g}"


def cmd_validate(args) -> str:
    try:
        errors = validate_config(args.config)
    except OSError as e:
        raise CliError(f"cannot read {resolve_path(args.config)}: {e.strerror}")
    if errors:
        raise ConfigError(errors)
    return "ok"


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "eval": cmd_eval, "demo-fig3": cmd_demo,
            "validate": cmd_validate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        print(COMMANDS[args.command](args))
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        for err in e.errors:
            print(f"error: {err}", file=sys.stderr)
        return 2
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
