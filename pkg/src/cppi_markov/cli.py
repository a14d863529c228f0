"""Batch front end: ``cppi-markov {price,density,study,converge} --config run.yaml``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time

import numpy as np
import yaml

from . import closed_form
from .config import STUDY_PARAMETERS, ConfigError, RunConfig, load_config
from .features import FeatureError, banded_rebalance_price, lockin_price, open_ended_price
from .grid import GridError
from .kernel import KernelError
from .models import ModelError
from .montecarlo import McConfig, McError, mc_price
from .operators import CompositionError, GridCoverageError, price
from .product import ProductError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

REPORT_FIELDS = ("price", "delta", "gamma", "vega", "gap_proportion", "conditional_loss", "expected_loss")
GAP_FIELDS = ("gap_proportion", "conditional_loss", "expected_loss")


class NumericalFailure(ArithmeticError):
    pass


NUMERICAL_ERRORS = (NumericalFailure, KernelError, GridCoverageError, GridError, CompositionError,
                    np.linalg.LinAlgError, FloatingPointError, OverflowError)
# checked after NUMERICAL_ERRORS; remaining ValueErrors come from invalid inputs
CONFIG_ERRORS = (ConfigError, ProductError, ModelError, FeatureError, McError, yaml.YAMLError, ValueError)


# ---------------------------------------------------------------------------
# pricing dispatch


def _markov(cfg: RunConfig, greeks: bool | None = None, convention: str | None = None):
    eng = cfg.engine
    spec, model, market, payoff = cfg.product(), cfg.model(), cfg.market(), cfg.payoff()
    greeks = eng["greeks"] if greeks is None else greeks
    p = cfg.doc["product"]
    if "open_ended" in p:
        return open_ended_price(spec, model, p["open_ended"]["horizon"], market, payoff, n_points=eng["grid_size"],
                                eps=eng["eps"], american=eng["american"])
    if "band" in p:
        return banded_rebalance_price(spec, model, p["band"]["width"], market, payoff, n_points=eng["grid_size"],
                                      n_y=p["band"]["points"], eps=eng["eps"])
    kw = dict(n_points=eng["grid_size"], tolerance=eng["tolerance"], strategy=eng["strategy"], eps=eng["eps"],
              greeks=greeks)
    if spec.lock_in is not None:
        return lockin_price(spec, model, market, payoff, convention or eng["convention"], **kw)
    return price(spec, model, market, payoff, **kw)


def _mc_config(cfg: RunConfig, paths: int | None = None) -> McConfig:
    mc = cfg.doc["montecarlo"]
    return McConfig(n_paths=paths or mc["paths"], seed=mc["seed"], sampler=mc["sampler"],
                    replicates=mc["replicates"], brownian_bridge=mc["brownian_bridge"],
                    convention=cfg.engine["convention"])


def _montecarlo(cfg: RunConfig, paths: int | None = None):
    return mc_price(cfg.product(), cfg.model(), cfg.market(), cfg.payoff(), _mc_config(cfg, paths))


def _finite(values: dict) -> dict:
    for key, v in values.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise NumericalFailure(f"non-finite {key} in the result")
    return values


def _report(cfg: RunConfig) -> dict:
    eng = cfg.engine
    if eng["method"] == "montecarlo":
        res = _montecarlo(cfg)
        out = {k: float(v) for k, v in res.as_dict().items()}
        out["method"] = "montecarlo"
        return _finite(out)
    rep = _markov(cfg)
    out = rep.as_dict()
    _finite(out)
    out["method"] = "markov"
    out["grid_size"] = eng["grid_size"]
    out["tolerance"] = eng["tolerance"]
    diag = rep.diagnostics
    for conv in ("locked", "initial"):
        if conv in diag:
            out[f"{conv}_guarantee"] = {k: float(v) for k, v in diag[conv].items()}
    for key in ("buckets", "guarantee_growth", "coupon_value", "diverging", "relative_change"):
        if key in diag:
            v = diag[key]
            if isinstance(v, (bool, np.bool_)):
                out[key] = bool(v)
            elif isinstance(v, (int, np.integer)):
                out[key] = int(v)
            else:
                out[key] = float(v)
    return out


# ---------------------------------------------------------------------------
# output


def _write(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    directory = os.path.dirname(os.path.abspath(out))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(out))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# commands


def cmd_price(cfg: RunConfig, args) -> str:
    return json.dumps(_report(cfg), indent=2, sort_keys=True) + "\n"


def density_table(cfg: RunConfig) -> list[tuple]:
    """Rows of (state, mass, mass at or below, mass at or above) for the final value density.

    States are final values in guarantee units.
    """
    rep = _markov(cfg, greeks=False)
    if rep.terminal_density is None or rep.grid is None:
        raise FeatureError("this product does not expose a final value density")
    dens = rep.diagnostics.get("final_value_density", rep.terminal_density)
    dens = np.asarray(dens, float)
    x = rep.grid.points
    total = float(dens.sum())
    if not math.isfinite(total):
        raise NumericalFailure("non-finite density")
    left = np.cumsum(dens)
    right = np.cumsum(dens[::-1])[::-1]
    return list(zip(x.tolist(), dens.tolist(), left.tolist(), right.tolist()))


def cmd_density(cfg: RunConfig, args) -> str:
    return _csv(("x", "mass", "left_cumulative", "right_cumulative"), density_table(cfg))


def study_table(cfg: RunConfig) -> tuple[list[str], list[list]]:
    study = cfg.doc.get("study")
    if study is None:
        raise ConfigError("study: section missing")
    name = study["parameter"]
    path = STUDY_PARAMETERS[name]
    lock = "lock_in" in cfg.doc["product"]
    if name == "lock_in" and not lock:
        raise ConfigError("study.parameter: a lock_in sweep needs a product.lock_in section giving the lock dates")
    header = ["parameter", "value", "price"]
    if lock:
        header += [f"{k}_{c}" for c in ("locked", "initial") for k in GAP_FIELDS]
    else:
        header += list(GAP_FIELDS)
    rows = []
    for value in study["values"]:
        run = cfg.with_value(path, value)
        label = f"{value['kind']}:{value['sigma']}" if name == "model" else value
        if lock:
            rep = _markov(run, greeks=False, convention="initial")
            row = [name, label, rep.price]
            for conv in ("locked", "initial"):
                row += [rep.diagnostics[conv][k] for k in GAP_FIELDS]
        else:
            rep = _markov(run, greeks=False)
            row = [name, label, rep.price] + [getattr(rep, k) for k in GAP_FIELDS]
        _finite({str(i): v for i, v in enumerate(row[2:])})
        rows.append(row)
    return header, rows


def cmd_study(cfg: RunConfig, args) -> str:
    header, rows = study_table(cfg)
    return _csv(header, rows)


def converge_table(cfg: RunConfig) -> tuple[list[str], list[list]]:
    conv = cfg.doc.get("converge") or {"grid_sizes": [50, 100, 250, 500, 1000], "tolerances": [0.0],
                                       "reference": "largest", "mc_paths": []}
    results = []
    for n in conv["grid_sizes"]:
        for tol in conv["tolerances"]:
            run = cfg.with_engine(grid_size=n, tolerance=tol)
            t0 = time.perf_counter()
            rep = _markov(run, greeks=False)
            results.append(["markov", n, tol, rep.price, time.perf_counter() - t0])
    ref = conv["reference"]
    if ref == "closed_form":
        try:
            ref_price, _ = closed_form.vanilla_reference(cfg.product(), cfg.model(), cfg.market())
        except ValueError as exc:
            raise ConfigError(f"converge.reference: {exc}") from exc
    elif ref == "largest":
        exact = [r for r in results if r[2] == 0.0] or results
        ref_price = max(exact, key=lambda r: r[1])[3]
    else:
        ref_price = float(ref)
    for paths in conv["mc_paths"]:
        t0 = time.perf_counter()
        res = _montecarlo(cfg, paths)
        results.append(["montecarlo", paths, "", res.price, time.perf_counter() - t0, res.price_se])
    header = ["method", "size", "tolerance", "price", "rel_error", "seconds", "std_error"]
    rows = []
    for r in results:
        rel = r[3] / ref_price - 1.0 if ref_price else float("nan")
        rows.append([r[0], r[1], r[2], r[3], rel, r[4], r[5] if len(r) > 5 else ""])
    return header, rows


def cmd_converge(cfg: RunConfig, args) -> str:
    header, rows = converge_table(cfg)
    return _csv(header, rows)


COMMANDS = {"price": cmd_price, "density": cmd_density, "study": cmd_study, "converge": cmd_converge}


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="YAML run configuration")
    common.add_argument("--out", metavar="PATH", help="output file (default: standard output)")
    common.add_argument("--grid-size", type=int, metavar="N", help="override engine.grid_size")
    common.add_argument("--tolerance", type=float, metavar="PCT", help="bucket tolerance in percent")
    common.add_argument("--threads", type=int, metavar="K", help="worker threads for numba and BLAS")
    common.add_argument("--seed", type=int, metavar="S", help="override montecarlo.seed")
    parser = argparse.ArgumentParser(prog="cppi-markov", description="Price CPPI strategies with Markov operators.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("price", parents=[common], help="price and risk indicators as JSON")
    sub.add_parser("density", parents=[common], help="final value density as CSV")
    sub.add_parser("study", parents=[common], help="gap indicators over a parameter sweep as CSV")
    sub.add_parser("converge", parents=[common], help="errors and timings over grid sizes as CSV")
    return parser


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.grid_size is not None:
        cfg = cfg.with_engine(grid_size=args.grid_size)
    if args.tolerance is not None:
        if not math.isfinite(args.tolerance) or args.tolerance < 0:
            raise ConfigError("--tolerance: must be a non-negative percentage")
        cfg = cfg.with_engine(tolerance=args.tolerance / 100.0)
    if args.seed is not None:
        cfg = cfg.with_value(("montecarlo", "seed"), args.seed)
    return cfg


def _set_threads(k: int | None):
    if k is None:
        return None
    if k < 1:
        raise ConfigError("--threads: must be at least 1")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))
    return threadpool_limits(limits=k)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        limiter = _set_threads(args.threads)
        cfg = _apply_overrides(load_config(args.config), args)
        text = COMMANDS[args.command](cfg, args)
        _write(text, args.out)
        if limiter is not None:
            limiter.restore_original_limits()
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
