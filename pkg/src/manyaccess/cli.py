"""Command line: sweep, analyze, validate, single."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, format_config, load_config
from .validation import validate

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="manyaccess", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sw = sub.add_parser("sweep", help="Monte Carlo sweep over Es/N0")
    sw.add_argument("--config", required=True)
    sw.add_argument("--algo", required=True, choices=harness.ALGORITHMS)
    sw.add_argument("--snr", required=True, help="start:step:stop in dB (stop included), or a comma list")
    sw.add_argument("--trials", type=int, default=500)
    sw.add_argument("--out", required=True)
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--seed", type=int)

    an = sub.add_parser("analyze", help="analytical GUDSR bound and SER curves only")
    an.add_argument("--config", required=True)
    an.add_argument("--snr", required=True)
    an.add_argument("--out", required=True)

    va = sub.add_parser("validate", help="run the cross-check oracles")
    va.add_argument("--fast", action="store_true", help="reduced trial counts")
    va.add_argument("--seed", type=int, default=20240601)

    si = sub.add_parser("single", help="one trial with a full recovery dump")
    si.add_argument("--config", required=True)
    si.add_argument("--snr", required=True, type=float)
    si.add_argument("--algo", default="nbomp", choices=harness.ALGORITHMS)
    si.add_argument("--trial", type=int, default=0)
    si.add_argument("--seed", type=int)
    si.add_argument("--dump", action="store_true", help="print the full recovery result as JSON")
    return p


def _complex_list(v) -> list:
    return [[float(z.real), float(z.imag)] for z in np.asarray(v).ravel()]


def _dump(cfg, metrics, result, draw) -> dict:
    out = {
        "config": format_config(cfg).splitlines(),
        "active": [int(u) for u in draw.active],
        "metrics": {k: v for k, v in vars(metrics).items() if k != "wall_time"},
        "wall_time": metrics.wall_time,
    }
    out["metrics"]["blocks_updated"] = list(metrics.blocks_updated)
    if result is not None:
        out["selected"] = [int(u) for u in result.selected]
        out["final_set"] = [int(u) for u in result.final_set]
        out["cancelled_at"] = {str(u): k for u, k in result.cancelled_at.items()}
        out["blocks_updated_per_iteration"] = list(result.blocks_updated)
        out["residual_norms"] = result.residual_norms
        out["decoded"] = {str(u): {"status": o.status.value, "bit_errors": o.num_bit_errors}
                          for u, o in result.decoded.items()}
        out["estimates"] = {str(u): _complex_list(e) for u, e in result.estimates.items()}
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "validate":
            report = validate(fast=args.fast, seed=args.seed, echo=print)
            print(report.text().splitlines()[-1])
            return EXIT_OK if report.passed else EXIT_VALIDATION

        overrides = {"seed": getattr(args, "seed", None)}
        cfg = load_config(args.config, **overrides)

        if args.command == "single":
            cfg = cfg.with_(snr_db=args.snr)
            metrics, result, draw = harness.run_trial(cfg, args.algo, args.trial, keep_result=True)
            if args.dump:
                print(json.dumps(_dump(cfg, metrics, result, draw), indent=1))
            else:
                print(f"active={metrics.n_active} detected={metrics.detected_active} "
                      f"false={metrics.false_selected} symbol_errors={metrics.symbol_errors}/"
                      f"{metrics.symbols_total}")
            return EXIT_OK

        grid = harness.parse_snr_grid(args.snr)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "analyze":
            rows = [harness.analytic_row(cfg.with_(snr_db=s)) for s in grid]
            stem = "analysis"
        else:
            rows = harness.run_sweep(cfg, grid, args.trials, args.algo, workers=args.workers,
                                     progress=lambda m: print(m, file=sys.stderr))
            stem = args.algo
        harness.emit_csv(rows, out / f"{stem}.csv")
        harness.emit_svg(rows, out / f"{stem}.svg")
        print(f"wrote {out / (stem + '.csv')} and {out / (stem + '.svg')}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:                      # unwritable --out counts as a bad invocation
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
