"""Monte-Carlo reference pricer.

Simulates the rescaled strategy value with the same one-period map as the
transition kernels (X' = a(X) F + b(X)), so both pricers share every
convention on spreads, fees, thresholds, coupons and lock-ins.  Gaussian
increments come either from scrambled Sobol points arranged by a Brownian
bridge, or from a pseudo-random generator.  Jump counts and sizes are
always pseudo-random.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

from .kernel import PeriodTerms
from .models import ProcessModel
from .operators import Payoff, schedule_periods
from .product import ExposureRule, Market, ProductSpec, exposure_from_cushion

SOBOL_MAX_DIM = 21201


class McError(ValueError):
    """Unsupported Monte-Carlo request."""


@dataclass(frozen=True)
class McConfig:
    n_paths: int = 100_000
    seed: int | None = 0
    sampler: str = "sobol"
    replicates: int = 8
    batch: int = 16_384
    brownian_bridge: bool = True
    convention: str = "locked"

    def __post_init__(self):
        if self.n_paths < 1:
            raise McError("n_paths must be at least 1")
        if self.sampler not in ("sobol", "pseudo"):
            raise McError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "sobol" and self.replicates < 2:
            raise McError("standard errors with Sobol points need at least two replicates")
        if self.convention not in ("locked", "initial"):
            raise McError(f"unknown guarantee convention {self.convention!r}")


@dataclass(frozen=True)
class McResult:
    price: float
    price_se: float
    gap_proportion: float
    gap_se: float
    conditional_loss: float
    expected_loss: float
    expected_loss_se: float
    coupon_value: float
    n_paths: int

    def as_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}


def bridge_plan(variances: np.ndarray) -> list[tuple[int, int, int, float, float]]:
    """Construction order (target, left, right, left weight, std) of a Brownian bridge.

    Index 0 is the origin; index i is the cumulative variance after i periods.
    The first entry fixes the end point from the origin.
    """
    v = np.concatenate(([0.0], np.cumsum(variances)))
    n = len(variances)
    plan = [(n, 0, -1, 1.0, math.sqrt(v[n]))]
    stack = [(0, n)]
    while stack:
        lo, hi = stack.pop(0)
        if hi - lo < 2:
            continue
        mid = (lo + hi) // 2
        span = v[hi] - v[lo]
        wl = (v[hi] - v[mid]) / span
        std = math.sqrt(max((v[mid] - v[lo]) * (v[hi] - v[mid]) / span, 0.0))
        plan.append((mid, lo, hi, wl, std))
        stack.extend([(lo, mid), (mid, hi)])
    return plan


def bridge_increments(normals: np.ndarray, plan, n: int) -> np.ndarray:
    """Increments of the bridged path; column c of ``normals`` feeds step c of the plan."""
    w = np.zeros((normals.shape[0], n + 1))
    for c, (target, left, right, wl, std) in enumerate(plan):
        if right < 0:
            w[:, target] = w[:, left] + std * normals[:, c]
        else:
            w[:, target] = wl * w[:, left] + (1.0 - wl) * w[:, right] + std * normals[:, c]
    return np.diff(w, axis=1)


class _Draws:
    """Per-batch Gaussian increments (already scaled) for all periods."""

    def __init__(self, config: McConfig, variances: np.ndarray, replicate: int):
        self.config = config
        self.variances = variances
        self.n = len(variances)
        self.rng = np.random.default_rng(None if config.seed is None else (config.seed, replicate))
        self.plan = bridge_plan(variances) if config.brownian_bridge else None
        if config.sampler == "sobol":
            if self.n > SOBOL_MAX_DIM:
                raise McError(f"Sobol points support at most {SOBOL_MAX_DIM} periods")
            self.sobol = qmc.Sobol(self.n, scramble=True, seed=self.rng)

    def gaussian(self, size: int) -> np.ndarray:
        if self.config.sampler == "sobol":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # balance warning for non powers of two
                u = self.sobol.random(size)
            z = ndtri(np.clip(u, 1e-16, 1 - 1e-16))
        else:
            z = self.rng.standard_normal((size, self.n))
        if self.plan is not None:
            return bridge_increments(z, self.plan, self.n)
        return z * np.sqrt(self.variances)


def _jumps(rng, size: int, tau: float, model: ProcessModel) -> np.ndarray:
    out = np.zeros(size)
    for lam, eta, sign in ((model.lambda_plus, model.eta_plus, 1.0), (model.lambda_minus, model.eta_minus, -1.0)):
        if lam > 0:
            k = rng.poisson(lam * tau, size)
            hit = k > 0
            out[hit] += sign * rng.gamma(k[hit], eta)
    return out


def _drift(model: ProcessModel, sigma: float) -> float:
    if model.kind == "kou":
        return model.kou_params(sigma).gamma
    return -0.5 * sigma * sigma


def cushion_step(c, rule: ExposureRule, terms: PeriodTerms, growth):
    """New cushion X' - 1 for cushion ``c`` and risky gross return ``growth``.

    Algebraically the kernel map X' = a F + b, rearranged so that a cushion
    close to zero is scaled rather than cancelled: the vanilla case reduces
    to c (1 + m (F - 1)).
    """
    w = np.asarray(exposure_from_cushion(c, rule), float)
    x = 1.0 + c
    wx = w * x
    tau = terms.tau
    f = terms.fees
    spread = np.where(w <= 1.0, terms.spread_plus, terms.spread_minus)
    log_eh = -terms.spread_threshold * tau
    cash_growth = np.exp(log_eh + spread * tau)
    fee_rate = f.proportional * (w > 0) + f.defeasance * (w == 0) + f.risky * w
    fee_x = tau * (fee_rate * np.maximum(x, 0.0) + f.fixed * terms.guarantee_over_threshold)
    eh = math.exp(log_eh)
    return (eh * wx * (terms.forward_ratio * growth - np.exp(spread * tau)) + cash_growth * c
            + np.expm1(log_eh + spread * tau) - eh * terms.zc_ratio * fee_x)


def draw_growths(size: int, model: ProcessModel, periods, random_taus, draws: _Draws) -> np.ndarray:
    """Risky gross returns F over each remaining period, one row per path."""
    dw = draws.gaussian(size)
    out = np.empty_like(dw)
    for col, per in enumerate(periods):
        tau = random_taus[col]
        logf = _drift(model, per.sigma) * tau + dw[:, col]
        if model.kind == "kou":
            logf = logf + _jumps(draws.rng, size, tau, model)
        out[:, col] = np.exp(logf)
    return out


def path_outcomes(spec: ProductSpec, market: Market, periods, growths: np.ndarray, payoff: Payoff,
                  convention: str = "locked"):
    """Payoff, gap indicator, shortfall and capitalized coupons of each path.

    ``growths`` holds the risky gross returns of the periods in ``periods``
    (the last ones of the schedule).  Amounts are in initial guarantee units.
    """
    curve = market.curve
    growths = np.atleast_2d(np.asarray(growths, float))
    size = growths.shape[0]
    t = np.asarray(spec.times, float)
    k = spec.n_periods - len(periods)
    rule = spec.rule
    x0 = spec.initial_value / (spec.guarantee * float(spec.threshold_accrual(curve, t[k])))
    c = np.full(size, x0 - 1.0)  # cushion in rescaled units
    ratio = np.ones(size)  # current guarantee / initial guarantee
    coupons = np.zeros(size)
    lock = spec.lock_in
    lock_dates = set()
    if lock is not None:
        lock_dates = set(range(1, spec.n_periods)) if lock.kind == "continuous" else set(lock.dates)
    cs = spec.coupons
    coupon_dates = set(cs.dates) if cs is not None else set()
    c_ref, acc_ref = c.copy(), float(spec.threshold_accrual(curve, t[k]))
    for col, per in enumerate(periods):
        c_new = cushion_step(c, rule, per.terms, growths[:, col])
        d = k + col + 1
        acc1 = float(spec.threshold_accrual(curve, t[d]))
        if d in coupon_dates:
            active = np.asarray(exposure_from_cushion(c_ref, rule), float) > 0
            perf = np.maximum((1.0 + c_new) * acc1 - (1.0 + c_ref) * acc_ref, 0.0)
            amount = cs.participation * perf * active + cs.fixed_amount
            zc = float(curve.discount(t[d], spec.maturity))
            coupons += ratio * amount / zc
            c_new = c_new - amount / acc1
        if d in lock_dates and lock.proportion > 0:
            x_new, x_ref = 1.0 + c_new, 1.0 + c_ref
            if lock.kind == "continuous":
                f = np.maximum(1.0, lock.proportion * x_new * acc1)
            elif lock.excess_only:
                f = 1.0 + lock.proportion * np.maximum(acc1 * (c_new - c_ref), 0.0)
            else:
                f = 1.0 + lock.proportion * np.maximum(x_new * acc1 - x_ref * acc_ref, 0.0)
            c_new = (c_new + 1.0 - f) / f
            ratio = ratio * f
        c = c_new
        if d in lock_dates or d in coupon_dates:
            c_ref, acc_ref = c.copy(), acc1
    x = 1.0 + c
    if payoff.monetary:
        pay = payoff.vector(x * ratio, spec.guarantee)
    elif payoff.kind == "digital":
        pay = payoff.vector(x)
    else:
        pay = ratio * payoff.vector(x)
    if convention == "initial":
        z_short = -(c * ratio + (ratio - 1.0))  # 1 - x ratio
        below = z_short > 0
        loss = np.maximum(z_short, 0.0)
    else:
        below = c < 0
        loss = ratio * np.maximum(-c, 0.0)
    return pay, below.astype(float), loss, coupons


def mc_price(spec: ProductSpec, model: ProcessModel, market: Market | None = None, payoff: Payoff | None = None,
             config: McConfig | None = None) -> McResult:
    """Monte-Carlo price and risk indicators with standard errors."""
    if spec.open_ended:
        raise McError("open-ended products are priced by backward induction only")
    payoff = payoff or Payoff()
    if payoff.monetary and payoff.kind == "guaranteed":
        raise McError("a guaranteed payoff with a currency strike is not defined")
    market = market or Market()
    config = config or McConfig()
    curve = market.curve
    t = np.asarray(spec.times, float)
    tv = market.valuation_time
    if tv >= spec.maturity:
        raise McError("valuation time must precede maturity")
    k = max(int(np.searchsorted(t, tv, side="right")) - 1, 0)
    periods = schedule_periods(spec, model, curve, k)
    remaining = periods[0].terms.tau - max(tv - t[k], 0.0)
    first_terms = replace(periods[0].terms, forward_ratio=market.forward_ratio())
    # the first period keeps its full accrual terms; only its remaining part is random
    periods[0] = replace(periods[0], terms=first_terms)
    taus = np.array([p.terms.tau for p in periods])
    taus[0] = remaining
    sig = np.array([p.sigma for p in periods])
    variances = sig**2 * taus
    scale = spec.guarantee * float(math.exp(-curve.integral(tv, spec.maturity)))

    n_rep = config.replicates if config.sampler == "sobol" else 1
    per_rep = max(config.n_paths // n_rep, 1)
    sums = np.zeros((n_rep, 4))
    sq = np.zeros((n_rep, 4))
    for rep in range(n_rep):
        draws = _Draws(config, variances, rep)
        done = 0
        while done < per_rep:
            size = min(config.batch, per_rep - done)
            growths = draw_growths(size, model, periods, taus, draws)
            cols = path_outcomes(spec, market, periods, growths, payoff, config.convention)
            for c, v in enumerate(cols):
                sums[rep, c] += v.sum()
                sq[rep, c] += (v * v).sum()
            done += size
    total = n_rep * per_rep
    means = sums.sum(axis=0) / total
    if n_rep > 1:
        rep_means = sums / per_rep
        se = rep_means.std(axis=0, ddof=1) / math.sqrt(n_rep)
    elif total > 1:
        var = sq[0] / total - means**2
        se = np.sqrt(np.maximum(var, 0.0) / (total - 1))
    else:
        se = np.full(4, np.nan)
    gap = float(means[1])
    el = float(means[2])
    return McResult(price=scale * float(means[0]), price_se=scale * float(se[0]), gap_proportion=gap,
                    gap_se=float(se[1]), conditional_loss=el / gap if gap > 0 else 0.0, expected_loss=el,
                    expected_loss_se=float(se[2]), coupon_value=scale * float(means[3]), n_paths=total)
