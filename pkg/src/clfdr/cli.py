"""Command line interface.

    clfdr analyze counts.csv --method clfdr --components 3 --out-dir out/
    clfdr thresholds --pi0 0.5 --gamma1 1 --lambda 0.2 --out-dir out/
    clfdr simulate config.json --out-dir out/

Exit codes: 0 success, 2 input error, 3 numerical warning (outputs are
still written and the summary says why).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import WHEAT_BIOMASS, Covariate, DataError, load_counts
from .fdr import bh_procedure, lfdr_stepup
from .loglinear import p_value, simulate_null, z_scores
from .mixture import FitError, clfdr_stats, fit_em
from .normal_mixture import fit_normal_mixture, lfdr_stats
from .sim import ConfigError, SimConfig, run_simulation
from .threshold import (
    SizePMF,
    TwoGroupModel,
    boundary_table,
    default_size_pmf,
    frontier_table,
    lfdr_threshold,
    power_difference_table,
    theorem2_min_n,
)

log = logging.getLogger("clfdr")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


def _clean(obj):
    """Make ``obj`` strict-JSON safe (NaN/inf become null)."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, allow_nan=False) + "\n", encoding="utf-8")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return ""
        return repr(f)
    return str(v)


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _manifest(args, command: str, inputs: list[str]) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    return {
        "command": command,
        "inputs": inputs,
        "parameters": params,
        "version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _exact_pvalues(z, n, x, reps: int, seed: int) -> np.ndarray:
    p = np.full(z.size, np.nan)
    for nv in np.unique(n[n > 0]):
        idx = n == nv
        f0 = simulate_null(x, int(nv), reps, seed + int(nv))
        p[idx] = p_value(z[idx], f0)
    return p


def cmd_analyze(args) -> int:
    if not 0 < args.alpha <= 1:
        raise InputError("--alpha must lie in (0, 1]")
    if args.components < 2:
        raise InputError("--components must be >= 2 (null plus at least one effect)")
    try:
        ds = load_counts(args.counts)
    except (DataError, OSError) as e:
        raise InputError(f"{args.counts}: {e}") from None
    out = _out_dir(args)
    n = ds.totals
    t, z = z_scores(ds.counts, ds.x)
    if args.exact_null:
        p = _exact_pvalues(z, n, ds.x, args.null_reps, args.seed)
    else:
        p = p_value(z)

    summary: dict = {"method": args.method, "alpha": args.alpha, "tests": ds.M,
                     "skipped": int((n == 0).sum())}
    warning = None
    if args.method == "bh":
        stat = p
    elif args.method == "lfdr-normal":
        ok = np.isfinite(z)
        fit = fit_normal_mixture(z[ok], args.components, tol=args.tol, max_iter=args.max_iter,
                                 seed=args.seed, restarts=args.restarts)
        stat = np.full(ds.M, np.nan)
        stat[ok] = lfdr_stats(z[ok], fit.params)
        summary["fit"] = fit.to_dict()
        if not fit.converged:
            warning = f"normal mixture EM did not converge in {args.max_iter} iterations"
        elif fit.flagged:
            warning = f"variance collapse in components {fit.flagged}"
    else:
        try:
            fit = fit_em(ds, args.components - 1, seed=args.seed, tol=args.tol,
                         max_iter=args.max_iter, restarts=args.restarts)
        except FitError as e:
            raise InputError(str(e)) from None
        stat = clfdr_stats(ds, fit.params)
        summary["fit"] = fit.to_dict()
        if not fit.converged:
            warning = f"EM did not converge in {args.max_iter} iterations"

    if np.all(np.isnan(stat)):
        raise InputError("every row has a zero total")
    res = bh_procedure(stat, args.alpha) if args.method == "bh" else lfdr_stepup(stat, args.alpha)
    summary.update(k=res.k, **{"lambda": res.lam})
    summary["warning"] = warning

    rows = [
        {"id": i, "n": int(nm), "T": float(tm) if nm else math.nan, "Z": float(zm),
         "p": float(pm), "statistic": float(sm), "decision": d}
        for i, nm, tm, zm, pm, sm, d in zip(ds.ids(), n, t, z, p, stat, res.delta)
    ]
    _write_csv(out / "tests.csv", rows)
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(args, "analyze", [str(args.counts)]))
    log.info("%d of %d tests rejected (lambda=%.4g)", res.k, ds.M, res.lam)
    if warning:
        log.warning(warning)
        return EXIT_NUMERIC
    return EXIT_OK


def _parse_floats(text: str, name: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def cmd_thresholds(args) -> int:
    if not 0 < args.lam < 1:
        raise InputError("--lambda must lie in (0, 1)")
    try:
        cov = Covariate(_parse_floats(args.covariate, "--covariate"))
        pmf = SizePMF.read_csv(args.size_pmf) if args.size_pmf else default_size_pmf()
        model = TwoGroupModel(args.pi0, args.gamma1, cov, pmf)
    except (ValueError, OSError) as e:
        raise InputError(str(e)) from None
    out = _out_dir(args)
    ns = range(1, args.n_max + 1)
    _write_csv(out / "boundaries.csv", boundary_table(model, args.lam, ns))
    support = [int(v) for v in pmf.ns if v <= args.n_max]
    _write_csv(out / "power.csv", power_difference_table(model, args.lam, support))
    gammas = sorted(set(np.round(np.arange(0.1, 2.01, 0.1), 10).tolist()) | {args.gamma1})
    lams = sorted({0.1, 0.2, args.lam})
    pi0s = sorted({0.5, 0.8, args.pi0})
    _write_csv(out / "frontier.csv", frontier_table(lams, pi0s, gammas, cov))
    summary = {
        "pi0": args.pi0,
        "gamma1": args.gamma1,
        "lambda": args.lam,
        "sigma": model.sigma,
        "mu1": model.mu1,
        "lfdr_threshold": lfdr_threshold(model, args.lam),
        "min_n_increasing": theorem2_min_n(model, args.lam),
    }
    _write_json(out / "summary.json", summary)
    inputs = [str(args.size_pmf)] if args.size_pmf else []
    _write_json(out / "manifest.json", _manifest(args, "thresholds", inputs))
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        config = SimConfig.from_json(args.config)
    except (ConfigError, ValueError, OSError) as e:
        raise InputError(f"{args.config}: {e}") from None
    out = _out_dir(args)
    report = run_simulation(config, workers=args.workers)
    _write_json(out / "report.json", report.to_dict())
    _write_csv(out / "histogram.csv", report.histogram_rows(),
               ["procedure", "n", "tests", "alternatives", "rejections",
                "true_rejections", "false_rejections"])
    _write_json(out / "manifest.json", _manifest(args, "simulate", [str(args.config)]))
    flagged = {k: v.reps_flagged for k, v in report.procedures.items() if v.reps_flagged}
    if flagged:
        log.warning("replicates with non-converged fits: %s", flagged)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clfdr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="test every row of a count table")
    a.add_argument("counts", help="CSV: covariate header row, then one row of counts per test")
    a.add_argument("--method", choices=["clfdr", "lfdr-normal", "bh"], default="clfdr")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--components", type=int, default=3,
                   help="mixture components including the null (default 3)")
    a.add_argument("--tol", type=float, default=1e-8)
    a.add_argument("--max-iter", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--restarts", type=int, default=5)
    a.add_argument("--exact-null", action="store_true",
                   help="Monte Carlo p-values instead of the normal approximation")
    a.add_argument("--null-reps", type=int, default=100_000)
    a.add_argument("--out-dir", default=".")
    a.set_defaults(func=cmd_analyze)

    t = sub.add_parser("thresholds", help="two-group rejection boundaries and power tables")
    t.add_argument("--pi0", type=float, default=0.5)
    t.add_argument("--gamma1", type=float, default=1.0)
    t.add_argument("--lambda", dest="lam", type=float, default=0.2)
    t.add_argument("--covariate", default=",".join(str(v) for v in WHEAT_BIOMASS))
    t.add_argument("--size-pmf", default=None, help="CSV of n,prob (default: synthetic)")
    t.add_argument("--n-max", type=int, default=1000)
    t.add_argument("--out-dir", default=".")
    t.set_defaults(func=cmd_thresholds)

    s = sub.add_parser("simulate", help="Monte Carlo FDR/MDR study from a JSON config")
    s.add_argument("config")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"clfdr: error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
