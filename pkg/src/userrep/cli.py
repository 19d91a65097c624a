"""Command-line entry point: ``userrep <command> --config run.json``.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 stale artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .pipeline import (STAGES, ConfigError, DataError, Pipeline, StaleArtifact, get_param, load_config, numerics,
                       report, run_sweep)

log = logging.getLogger("userrep")


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _parse_values(text: str) -> list:
    """``50,200,500`` or ``{"M":1,"H":640},{"M":10,"H":64}``: the body of a JSON array."""
    try:
        return json.loads(f"[{text}]")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--values must be comma-separated JSON values: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="userrep", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (unknown keys are rejected)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key, value parsed as JSON (repeatable)")
    common.add_argument("--artifact-dir", help="override artifact_dir")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--threads", type=int, help="BLAS threads when not in deterministic mode")
    common.add_argument("--force", action="store_true", help="re-run even if outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order, skipping up-to-date ones")
    sw = sub.add_parser("sweep", parents=[common], help="re-run affected stages for each value of one key")
    sw.add_argument("--param", help="dotted config key (default: sweep.param)")
    sw.add_argument("--values", help="comma-separated JSON values, e.g. 50,200 or '{\"M\":1}' "
                                     "(default: sweep.values)")
    rp = sub.add_parser("report", parents=[common], help="aggregate all probe metrics")
    rp.add_argument("--out", help="output directory (default: <artifact_dir>/report)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        overrides = _parse_set(args.set)
        if args.artifact_dir:
            overrides["artifact_dir"] = args.artifact_dir
        if args.seed is not None:
            overrides["seed"] = args.seed
        cfg = load_config(args.config, overrides)
        with numerics(cfg, args.threads):
            if args.command == "report":
                rows = report(cfg["artifact_dir"], args.out)
                print(f"{len(rows)} summary rows")
            elif args.command == "sweep":
                param = args.param or cfg["sweep"]["param"]
                if not param:
                    raise ConfigError("sweep needs --param or sweep.param")
                values = _parse_values(args.values) if args.values else cfg["sweep"]["values"]
                if not values:
                    raise ConfigError("sweep needs --values or sweep.values")
                get_param(cfg, param)
                run_sweep(cfg, param, values, force=args.force)
                report(cfg["artifact_dir"])
            elif args.command == "run":
                Pipeline(cfg).run_all(force=args.force)
            else:
                Pipeline(cfg).run_stage(args.command, force=args.force)
    except (ConfigError, DataError, StaleArtifact) as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        log.error("data error: %s", exc)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
