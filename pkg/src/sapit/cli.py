"""Command-line entry point: ``python3 -m sapit <subcommand>``."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .channel import dump_channels, gen_channels
from .core import RngStream
from .experiments import (ConfigError, NumericalFailure, get_preset, list_presets, parse_config,
                          run_experiment, to_ini, validate_config)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="experiment INI file")
    p.add_argument("--preset", metavar="NAME", help="named preset (see `presets`)")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--trials", type=int, help="Monte Carlo trials per point")
    p.add_argument("--out", metavar="DIR", default="results", help="output directory")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")


def build_parser():
    ap = argparse.ArgumentParser(prog="sapit", description="RIS-aided joint active/passive information transfer toolkit")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "run the experiment described by a config or preset"),
                       ("se", "state-evolution trajectory only"),
                       ("rate", "achievable-rate analysis"),
                       ("channels", "draw one channel realization and dump it")):
        _add_common(sub.add_parser(name, help=text))
    p = sub.add_parser("presets", help="list presets or print one as INI")
    p.add_argument("name", nargs="?")
    return ap


def load_config(args):
    """Resolve --preset/--config plus flag overrides.  Raises ConfigError with every problem found."""
    if args.preset and args.config:
        raise ConfigError(["use either --preset or --config, not both"])
    if args.preset:
        cfg = get_preset(args.preset)
    elif args.config:
        cfg, errs = validate_config(args.config)
        if errs:
            raise ConfigError(errs)
    else:
        raise ConfigError(["need --config or --preset"])
    over = {k: getattr(args, k) for k in ("seed", "trials") if getattr(args, k) is not None}
    if over:
        warnings = [w for w in cfg.warnings if not ("seed" in over and w.startswith("seed"))]
        cfg = dataclasses.replace(cfg, **over)
        cfg.warnings = warnings
    _, errs = parse_config("", base=cfg)
    if errs:
        raise ConfigError(errs)
    return cfg


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "presets":
        if args.name:
            try:
                print(to_ini(get_preset(args.name)), end="")
            except ConfigError as e:
                print(f"error: {e}", file=sys.stderr)
                return EXIT_CONFIG
        else:
            print("\n".join(list_presets()))
        return EXIT_OK
    try:
        cfg = load_config(args)
        if args.command == "se":
            cfg = dataclasses.replace(cfg, kind="se-only")
        elif args.command == "rate" and cfg.kind not in ("rate-vs-N", "rate-only"):
            cfg = dataclasses.replace(cfg, kind="rate-vs-N" if cfg.N_grid else "rate-only")
        if args.command == "channels":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            ch = gen_channels((cfg.N, cfg.M, cfg.K), cfg.geometry, rng=RngStream(cfg.seed))
            path = out / f"{cfg.name}_channels.bin"
            dump_channels(ch, path)
            print(path)
            return EXIT_OK
        for w in cfg.warnings:
            print(f"warning: {w}", file=sys.stderr)
        for f in run_experiment(cfg, args.out, args.threads):
            print(f)
    except ConfigError as e:
        for msg in e.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
