"""Command line entry point: ``r2bsde <verb> --config run.yaml [overrides]``."""
from __future__ import annotations

import argparse
import json
import sys

from . import config as cf
from .engine import SolverError
from .pipeline import VERBS, run
from .report import write_all


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="r2bsde", description="Robust quadratic BSDE solver and utility desk")
    p.add_argument("verb", choices=VERBS, help="pipeline stage to run (each stage includes the earlier ones)")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides outputs.report)")
    p.add_argument("--seed", type=int)
    p.add_argument("--time-steps", type=int, dest="time_steps")
    p.add_argument("--scenarios", type=int)
    p.add_argument("--paths", type=int, help="Monte Carlo paths for the robustness simulation")
    p.add_argument("--no-figures", action="store_true")
    return p


def _fail(kind, items, code):
    json.dump({"status": "error", "kind": kind, "failures": items}, sys.stderr, indent=2)
    sys.stderr.write("\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cf.load(args.config)
        cfg = cf.override(cfg, seed=args.seed, time_steps=args.time_steps, scenarios=args.scenarios,
                          paths=args.paths, out=args.out)
    except cf.ConfigError as exc:
        return _fail("config", exc.violations, 2)
    except (OSError, ValueError) as exc:
        return _fail("config", [str(exc)], 2)
    try:
        result = run(cfg, args.verb)
    except cf.ConfigError as exc:
        return _fail("config", exc.violations, 2)
    except (SolverError, ValueError, RuntimeError) as exc:
        return _fail("solver", [f"{type(exc).__module__}.{type(exc).__name__}: {exc}"], 3)
    figs = cfg.outputs.figures and not args.no_figures
    files = write_all(result, cfg.outputs.report, cfg.outputs.csv, figs, cfg.outputs.surface_time_stride)
    for c in result.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['module']}.{c['name']}  measured={c['measured']}  limit={c['limit']}")
    print(f"report: {files['report']}")
    if not result.passed:
        summary = [{"name": c["name"], "module": c["module"], "measured": c["measured"], "limit": c["limit"]}
                   for c in result.failures()]
        with open(f"{cfg.outputs.report}/failures.json", "w") as fh:
            json.dump({"status": "failed", "failures": summary}, fh, indent=2)
        return _fail("checks", summary, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
