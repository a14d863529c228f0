"""Run configuration: a YAML document with product, model, market, payoff and engine sections.

Parsing normalizes the document (defaults filled in, dates as ISO strings),
so ``dump_config(load_config(text))`` parses back to the same configuration.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from datetime import date

import numpy as np
import yaml

from .models import ModelError, ProcessModel
from .operators import Payoff
from .product import (
    CouponSchedule, Fees, LockInRule, Market, ProductError, ProductSpec, RateCurve, year_fraction,
)


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the offending field."""


MIN_GRID_SIZE = 50

SECTIONS = ("product", "model", "market", "payoff", "engine", "study", "converge", "montecarlo")

ENGINE_DEFAULTS = {
    "method": "markov",
    "grid_size": 500,
    "eps": 1e-8,
    "tolerance": 0.0,
    "strategy": "auto",
    "convention": "locked",
    "greeks": True,
    "american": True,
}

MC_DEFAULTS = {"paths": 100_000, "sampler": "sobol", "replicates": 8, "seed": 0, "brownian_bridge": True}

# sweepable study parameters and the configuration path they set
STUDY_PARAMETERS = {
    "multiplier": ("product", "multiplier"),
    "max_exposure": ("product", "max_exposure"),
    "min_exposure": ("product", "min_exposure"),
    "cushion_limit": ("product", "cushion_limit"),
    "lock_in": ("product", "lock_in", "proportion"),
    "threshold_spread": ("product", "threshold", "spread"),
    "model": ("model",),
}


def _fail(field: str, msg: str):
    raise ConfigError(f"{field}: {msg}")


def _number(value, field: str, positive: bool = False, allow_none: bool = False):
    if value is None and allow_none:
        return None
    if isinstance(value, str):
        # YAML 1.1 reads exponents without a dot (1e-8) as strings
        try:
            value = float(value)
        except ValueError:
            pass
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(field, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        _fail(field, "must be finite")
    if positive and not value > 0:
        _fail(field, "must be positive")
    return float(value)


def _integer(value, field: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        _fail(field, f"expected an integer >= {minimum}, got {value!r}")
    return value


def _iso(value, field: str) -> str:
    if isinstance(value, date):
        return value.isoformat()
    if isinstance(value, str):
        try:
            return date.fromisoformat(value).isoformat()
        except ValueError:
            pass
    _fail(field, f"expected an ISO-8601 date, got {value!r}")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        _fail(name, "expected a mapping")
    return dict(sec)


def _check_keys(sec: dict, allowed, where: str):
    for key in sec:
        if key not in allowed:
            _fail(f"{where}.{key}", "unknown field")


# ---------------------------------------------------------------------------
# normalization


def _norm_schedule(sec: dict) -> dict:
    where = "product.schedule"
    if not isinstance(sec, dict):
        _fail(where, "expected a mapping")
    _check_keys(sec, ("start", "maturity", "step_days", "periods", "period_length", "times"), where)
    if "times" in sec:
        times = [_number(t, f"{where}.times") for t in sec["times"]]
        if len(times) < 2 or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
            _fail(f"{where}.times", "must start at 0 and increase strictly")
        return {"times": times}
    if "start" in sec or "maturity" in sec:
        start = _iso(sec.get("start"), f"{where}.start")
        maturity = _iso(sec.get("maturity"), f"{where}.maturity")
        if date.fromisoformat(maturity) <= date.fromisoformat(start):
            _fail(f"{where}.maturity", "dates must be strictly increasing")
        return {"start": start, "maturity": maturity, "step_days": _integer(sec.get("step_days", 7), f"{where}.step_days", 1)}
    if "periods" in sec:
        return {"periods": _integer(sec["periods"], f"{where}.periods", 1),
                "period_length": _number(sec.get("period_length"), f"{where}.period_length", positive=True)}
    _fail(where, "give times, start/maturity dates, or periods with period_length")


def _norm_product(sec: dict) -> dict:
    where = "product"
    allowed = ("schedule", "multiplier", "max_exposure", "min_exposure", "cushion_limit", "nominal", "guarantee",
               "initial_value", "spread_plus", "spread_minus", "threshold", "fees", "coupons", "lock_in",
               "open_ended", "band")
    _check_keys(sec, allowed, where)
    if "schedule" not in sec:
        _fail("product.schedule", "missing")
    out = {"schedule": _norm_schedule(sec["schedule"])}
    out["multiplier"] = _number(sec.get("multiplier", 4.0), "product.multiplier", positive=True)
    for key in ("max_exposure", "min_exposure", "cushion_limit"):
        out[key] = _number(sec.get(key), f"product.{key}", allow_none=True)
    nominal = _number(sec.get("nominal", 1.0), "product.nominal", positive=True)
    out["nominal"] = nominal
    out["guarantee"] = _number(sec.get("guarantee", nominal), "product.guarantee", positive=True)
    out["initial_value"] = _number(sec.get("initial_value", nominal), "product.initial_value", positive=True)
    out["spread_plus"] = _number(sec.get("spread_plus", 0.0), "product.spread_plus")
    out["spread_minus"] = _number(sec.get("spread_minus", 0.0), "product.spread_minus")

    thr = sec.get("threshold") or {}
    _check_keys(thr, ("spread", "levels", "linear_from"), "product.threshold")
    if len(thr) > 1:
        _fail("product.threshold", "give one of spread, levels or linear_from")
    if "linear_from" in thr:
        out["threshold"] = {"linear_from": _number(thr["linear_from"], "product.threshold.linear_from", positive=True)}
    elif "levels" in thr:
        out["threshold"] = {"levels": [_number(v, "product.threshold.levels", positive=True) for v in thr["levels"]]}
    else:
        out["threshold"] = {"spread": _number(thr.get("spread", 0.0), "product.threshold.spread")}

    fees = sec.get("fees") or {}
    _check_keys(fees, ("proportional", "defeasance", "risky", "fixed"), "product.fees")
    out["fees"] = {k: _number(fees.get(k, 0.0), f"product.fees.{k}") for k in ("proportional", "defeasance", "risky", "fixed")}

    cs = sec.get("coupons")
    if cs is not None:
        _check_keys(cs, ("dates", "participation", "fixed_amount"), "product.coupons")
        out["coupons"] = {
            "dates": [_integer(d, "product.coupons.dates", 1) for d in cs.get("dates", [])],
            "participation": _number(cs.get("participation", 0.0), "product.coupons.participation"),
            "fixed_amount": _number(cs.get("fixed_amount", 0.0), "product.coupons.fixed_amount"),
        }
    li = sec.get("lock_in")
    if li is not None:
        _check_keys(li, ("proportion", "kind", "every", "dates", "excess_only"), "product.lock_in")
        kind = li.get("kind", "periodic")
        if kind not in ("periodic", "continuous"):
            _fail("product.lock_in.kind", f"expected periodic or continuous, got {kind!r}")
        norm = {"proportion": _number(li.get("proportion", 0.0), "product.lock_in.proportion"), "kind": kind,
                "excess_only": bool(li.get("excess_only", False))}
        if kind == "periodic":
            if "every" in li:
                norm["every"] = _integer(li["every"], "product.lock_in.every", 1)
            else:
                norm["dates"] = [_integer(d, "product.lock_in.dates", 1) for d in li.get("dates", [])]
        out["lock_in"] = norm
    oe = sec.get("open_ended")
    if oe is not None:
        _check_keys(oe, ("horizon",), "product.open_ended")
        out["open_ended"] = {"horizon": _number(oe.get("horizon"), "product.open_ended.horizon", positive=True)}
    band = sec.get("band")
    if band is not None:
        _check_keys(band, ("width", "points"), "product.band")
        out["band"] = {"width": _number(band.get("width"), "product.band.width", positive=True),
                       "points": _integer(band.get("points", 5), "product.band.points", 1)}
    return out


def _norm_model(sec: dict) -> dict:
    _check_keys(sec, ("kind", "sigma", "lambda_plus", "lambda_minus", "eta_plus", "eta_minus"), "model")
    kind = sec.get("kind", "bs")
    if kind not in ("bs", "kou"):
        _fail("model.kind", f"expected bs or kou, got {kind!r}")
    sigma = sec.get("sigma", 0.2)
    if isinstance(sigma, list):
        sigma = [_number(s, "model.sigma", positive=True) for s in sigma]
    else:
        sigma = _number(sigma, "model.sigma", positive=True)
    out = {"kind": kind, "sigma": sigma}
    if kind == "kou":
        for key in ("lambda_plus", "lambda_minus", "eta_plus", "eta_minus"):
            out[key] = _number(sec.get(key, 0.0), f"model.{key}")
    return out


def _norm_market(sec: dict) -> dict:
    _check_keys(sec, ("rate", "curve", "valuation_time", "valuation_date", "spot", "spot_at_start"), "market")
    out = {}
    if "curve" in sec:
        cv = sec["curve"]
        _check_keys(cv, ("times", "dates", "discounts", "forward_rates"), "market.curve")
        if "dates" in cv:
            out["curve"] = {"dates": [_iso(d, "market.curve.dates") for d in cv["dates"]]}
        else:
            out["curve"] = {"times": [_number(t, "market.curve.times") for t in cv.get("times", [])]}
        key = "discounts" if "discounts" in cv else "forward_rates"
        if key not in cv:
            _fail("market.curve", "give discounts or forward_rates")
        out["curve"][key] = [_number(v, f"market.curve.{key}", positive=key == "discounts") for v in cv[key]]
        n_pillars = len(out["curve"].get("dates", out["curve"].get("times")))
        if n_pillars != len(out["curve"][key]):
            _fail(f"market.curve.{key}", "needs one value per pillar")
    else:
        out["rate"] = _number(sec.get("rate", 0.0), "market.rate")
    if "valuation_date" in sec:
        out["valuation_date"] = _iso(sec["valuation_date"], "market.valuation_date")
    else:
        out["valuation_time"] = _number(sec.get("valuation_time", 0.0), "market.valuation_time")
    out["spot"] = _number(sec.get("spot", 1.0), "market.spot", positive=True)
    out["spot_at_start"] = _number(sec.get("spot_at_start", out["spot"]), "market.spot_at_start", positive=True)
    return out


def _norm_payoff(sec: dict) -> dict:
    _check_keys(sec, ("kind", "strike", "monetary"), "payoff")
    kind = sec.get("kind", "put")
    if kind not in Payoff.KINDS:
        _fail("payoff.kind", f"expected one of {', '.join(Payoff.KINDS)}, got {kind!r}")
    return {"kind": kind, "strike": _number(sec.get("strike", 1.0), "payoff.strike"),
            "monetary": bool(sec.get("monetary", False))}


def _norm_engine(sec: dict) -> dict:
    _check_keys(sec, ENGINE_DEFAULTS, "engine")
    out = {**ENGINE_DEFAULTS, **sec}
    if out["method"] not in ("markov", "montecarlo"):
        _fail("engine.method", f"expected markov or montecarlo, got {out['method']!r}")
    out["grid_size"] = _integer(out["grid_size"], "engine.grid_size", MIN_GRID_SIZE)
    out["eps"] = _number(out["eps"], "engine.eps", positive=True)
    if out["eps"] >= 0.01:
        _fail("engine.eps", "must be below 0.01")
    out["tolerance"] = _number(out["tolerance"], "engine.tolerance")
    if out["tolerance"] < 0:
        _fail("engine.tolerance", "must be non-negative")
    if out["strategy"] not in ("auto", "matvec", "matmat"):
        _fail("engine.strategy", f"expected auto, matvec or matmat, got {out['strategy']!r}")
    if out["convention"] not in ("locked", "initial"):
        _fail("engine.convention", f"expected locked or initial, got {out['convention']!r}")
    out["greeks"] = bool(out["greeks"])
    out["american"] = bool(out["american"])
    return out


def _norm_montecarlo(sec: dict) -> dict:
    _check_keys(sec, MC_DEFAULTS, "montecarlo")
    out = {**MC_DEFAULTS, **sec}
    out["paths"] = _integer(out["paths"], "montecarlo.paths", 1)
    if out["sampler"] not in ("sobol", "pseudo"):
        _fail("montecarlo.sampler", f"expected sobol or pseudo, got {out['sampler']!r}")
    out["replicates"] = _integer(out["replicates"], "montecarlo.replicates", 2)
    out["seed"] = _integer(out["seed"], "montecarlo.seed", 0)
    out["brownian_bridge"] = bool(out["brownian_bridge"])
    return out


def _norm_study(sec: dict) -> dict | None:
    if not sec:
        return None
    _check_keys(sec, ("parameter", "values"), "study")
    name = sec.get("parameter")
    if name not in STUDY_PARAMETERS:
        _fail("study.parameter", f"unknown parameter {name!r}; expected one of {', '.join(STUDY_PARAMETERS)}")
    values = sec.get("values")
    if not isinstance(values, list) or not values:
        _fail("study.values", "expected a non-empty list")
    if name == "model":
        values = [_norm_model(v if isinstance(v, dict) else {}) for v in values]
    else:
        values = [_number(v, "study.values", allow_none=True) for v in values]
    return {"parameter": name, "values": values}


def _norm_converge(sec: dict) -> dict | None:
    if not sec:
        return None
    _check_keys(sec, ("grid_sizes", "tolerances", "reference", "mc_paths"), "converge")
    sizes = sec.get("grid_sizes", [50, 100, 250, 500, 1000])
    sizes = [_integer(n, "converge.grid_sizes", MIN_GRID_SIZE) for n in sizes]
    tols = [_number(t, "converge.tolerances") for t in sec.get("tolerances", [0.0])]
    ref = sec.get("reference", "largest")
    if ref not in ("largest", "closed_form") and not isinstance(ref, (int, float)):
        _fail("converge.reference", "expected largest, closed_form or a number")
    paths = [_integer(n, "converge.mc_paths", 1) for n in sec.get("mc_paths", [])]
    return {"grid_sizes": sizes, "tolerances": tols, "reference": ref, "mc_paths": paths}


def normalize(doc) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError("document: expected a mapping of sections")
    _check_keys(doc, SECTIONS, "document")
    if "product" not in doc:
        _fail("product", "missing section")
    out = {
        "product": _norm_product(_section(doc, "product")),
        "model": _norm_model(_section(doc, "model")),
        "market": _norm_market(_section(doc, "market")),
        "payoff": _norm_payoff(_section(doc, "payoff")),
        "engine": _norm_engine(_section(doc, "engine")),
        "montecarlo": _norm_montecarlo(_section(doc, "montecarlo")),
    }
    study = _norm_study(_section(doc, "study"))
    if study is not None:
        out["study"] = study
    conv = _norm_converge(_section(doc, "converge"))
    if conv is not None:
        out["converge"] = conv
    return out


# ---------------------------------------------------------------------------
# object construction


@dataclass(frozen=True)
class RunConfig:
    """Normalized configuration document plus builders for the pricing objects."""

    doc: dict

    def with_value(self, path: tuple, value) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        node = doc
        for key in path[:-1]:
            if not isinstance(node.get(key), dict):
                _fail(".".join(path), "section missing from the configuration")
            node = node[key]
        node[path[-1]] = value
        return RunConfig(normalize(doc))

    def with_engine(self, **changes) -> "RunConfig":
        doc = copy.deepcopy(self.doc)
        doc["engine"].update({k: v for k, v in changes.items() if v is not None})
        return RunConfig(normalize(doc))

    @property
    def engine(self) -> dict:
        return self.doc["engine"]

    @property
    def start_date(self) -> date | None:
        sched = self.doc["product"]["schedule"]
        return date.fromisoformat(sched["start"]) if "start" in sched else None

    def _times(self) -> tuple:
        sched = self.doc["product"]["schedule"]
        if "times" in sched:
            return tuple(sched["times"])
        if "start" in sched:
            return ProductSpec.from_dates(date.fromisoformat(sched["start"]), date.fromisoformat(sched["maturity"]),
                                          sched["step_days"]).times
        return ProductSpec.regular(sched["periods"], sched["period_length"]).times

    def product(self) -> ProductSpec:
        p = self.doc["product"]
        times = self._times()
        n = len(times) - 1
        kw = {k: p[k] for k in ("multiplier", "max_exposure", "min_exposure", "cushion_limit", "nominal",
                                "guarantee", "initial_value", "spread_plus", "spread_minus")}
        kw["fees"] = Fees(**p["fees"])
        thr = p["threshold"]
        if "levels" in thr:
            kw["threshold_levels"] = tuple(thr["levels"])
        elif "linear_from" in thr:
            # threshold level moving linearly in time from the given level to 1 at maturity
            t = np.asarray(times)
            kw["threshold_levels"] = tuple((thr["linear_from"] + (1.0 - thr["linear_from"]) * t / t[-1]).tolist())
        else:
            kw["spread_threshold"] = p["threshold"]["spread"]
        if "coupons" in p:
            kw["coupons"] = _build("product.coupons", CouponSchedule, tuple(p["coupons"]["dates"]),
                                   p["coupons"]["participation"], p["coupons"]["fixed_amount"])
        if "lock_in" in p:
            li = p["lock_in"]
            if li["kind"] == "continuous":
                kw["lock_in"] = _build("product.lock_in", LockInRule, li["proportion"], "continuous",
                                       excess_only=li["excess_only"])
            elif "every" in li:
                kw["lock_in"] = _build("product.lock_in", LockInRule.every, li["proportion"], li["every"], n,
                                       excess_only=li["excess_only"])
            else:
                kw["lock_in"] = _build("product.lock_in", LockInRule, li["proportion"], "periodic", tuple(li["dates"]),
                                       li["excess_only"])
        kw["open_ended"] = "open_ended" in p
        return _build("product", ProductSpec, times=times, start_date=self.start_date, **kw)

    def model(self) -> ProcessModel:
        m = dict(self.doc["model"])
        if isinstance(m["sigma"], list):
            m["sigma"] = tuple(m["sigma"])
        return _build("model", ProcessModel, **m)

    def market(self) -> Market:
        mk = self.doc["market"]
        start = self.start_date
        if "curve" in mk:
            cv = mk["curve"]
            if "dates" in cv:
                if start is None:
                    _fail("market.curve.dates", "dated pillars need a dated schedule (product.schedule.start)")
                times = [year_fraction(start, date.fromisoformat(d)) for d in cv["dates"]]
            else:
                times = cv["times"]
            if "discounts" in cv:
                curve = _build("market.curve", RateCurve, 0.0, tuple(times), tuple(cv["discounts"]))
            else:
                curve = _build("market.curve", RateCurve.from_forward_rates, times, cv["forward_rates"])
        else:
            curve = RateCurve(mk["rate"])
        if "valuation_date" in mk:
            if start is None:
                _fail("market.valuation_date", "needs a dated schedule (product.schedule.start)")
            tv = year_fraction(start, date.fromisoformat(mk["valuation_date"]))
        else:
            tv = mk["valuation_time"]
        if tv < 0:
            _fail("market.valuation_time", "must not precede the strategy start")
        return _build("market", Market, curve, tv, mk["spot"], mk["spot_at_start"])

    def payoff(self) -> Payoff:
        return _build("payoff", Payoff, **self.doc["payoff"])


def _build(field: str, factory, *args, **kw):
    try:
        return factory(*args, **kw)
    except (ProductError, ModelError, ValueError) as exc:
        raise ConfigError(f"{field}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"document: not valid YAML ({exc})") from exc
    cfg = RunConfig(normalize(doc))
    # build once so that cross-field errors surface at load time
    spec = cfg.product()
    cfg.model()
    market = cfg.market()
    cfg.payoff()
    if market.valuation_time >= spec.maturity and "open_ended" not in cfg.doc["product"]:
        _fail("market.valuation_time", "must precede maturity")
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"--config: cannot read {path} ({exc.strerror})") from exc
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.doc, sort_keys=True, default_flow_style=False)
