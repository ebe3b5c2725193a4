"""Command line: ``paranls run|selftest|emit-plots``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import runner
from .config import ConfigError, RunConfig, apply_overrides, load

ENV_OUTPUT = "PARANLS_OUTPUT"


def _output_dir(args, cfg: RunConfig, default_name: str) -> Path:
    if args.output:
        return Path(args.output)
    if cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(ENV_OUTPUT, "runs")) / default_name


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="paranls", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for independent solves")
        sp.add_argument("--output", help=f"output directory (default ${ENV_OUTPUT}/<name>)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="section.key=value, value in TOML syntax; repeatable")

    r = sub.add_parser("run", help="run the experiment described by a TOML config")
    r.add_argument("config")
    common(r)
    s = sub.add_parser("selftest", help="run the invariant suites of all modules")
    s.add_argument("config", nargs="?")
    common(s)
    e = sub.add_parser("emit-plots", help="write long-format plot CSVs for a run directory")
    e.add_argument("run_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "emit-plots":
        try:
            produced = runner.emit_plotdata(args.run_dir)
        except runner.MissingArtifact as exc:
            print(f"error: {exc}", file=sys.stderr)
            return runner.EXIT_CONFIG
        for name in sorted(produced):
            print(produced[name])
        return runner.EXIT_OK
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return runner.EXIT_CONFIG
    try:
        if args.config:
            cfg = load(args.config)
            base = Path(args.config).resolve().parent
            name = Path(args.config).stem
        else:
            cfg, base, name = RunConfig(experiment="selftest"), None, "selftest"
        cfg = apply_overrides(cfg, args.override)
        if args.command == "selftest" and cfg.experiment != "selftest":
            cfg = apply_overrides(cfg, ["run.experiment=selftest"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return runner.EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return runner.EXIT_CONFIG
    result = runner.run(cfg, _output_dir(args, cfg, name), jobs=args.jobs, base=base)
    print(json.dumps({"status": result.status, "output": str(result.out_dir),
                      "summary": runner._clean(result.summary)}, indent=2, sort_keys=True))
    return result.status


if __name__ == "__main__":
    sys.exit(main())
