"""Composition of period kernels into product prices and risk indicators.

A pricing run propagates a handful of start rows (the valuation state and its
spot-bumped neighbours) forward through the period matrices.  Matrices are
built on demand, one per bucket of similar periods, and discarded after use,
so memory stays at a few N x N blocks whatever the number of periods.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .grid import StateGrid, build_grid
from .kernel import KernelError, PeriodTerms, build_period_matrix, build_rows
from .models import ProcessModel
from .product import Market, ProductSpec

SPOT_BUMP = 1e-4
VEGA_BUMP = 1e-4


class CompositionError(ValueError):
    """Operators that cannot be composed."""


class GridCoverageError(ValueError):
    """Start value outside the state grid."""


# ---------------------------------------------------------------------------
# payoffs


@dataclass(frozen=True)
class Payoff:
    """Terminal payoff.

    ``kind`` is one of strategy, guaranteed, call, put, digital.  The strike
    is a fraction of the final guarantee unless ``monetary`` is set, in which
    case it is a currency amount.
    """

    kind: str = "put"
    strike: float = 1.0
    monetary: bool = False

    KINDS = ("strategy", "guaranteed", "call", "put", "digital")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown payoff kind {self.kind!r}")

    def relative_strike(self, guarantee: float) -> float:
        return self.strike / guarantee if self.monetary else self.strike

    def vector(self, x: np.ndarray, guarantee: float = 1.0) -> np.ndarray:
        """Payoff in guarantee units at rescaled terminal values ``x``."""
        k = self.relative_strike(guarantee)
        if self.kind == "strategy":
            return np.asarray(x, float).copy()
        if self.kind == "guaranteed":
            return np.maximum(x, 1.0)
        if self.kind == "call":
            return np.maximum(x - k, 0.0)
        if self.kind == "put":
            return np.maximum(k - x, 0.0)
        return (x < k).astype(float)


def gap_vectors(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indicator of ending below the guarantee and the shortfall (1 - x)^+."""
    return (x < 1.0).astype(float), np.maximum(1.0 - x, 0.0)


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class PricingReport:
    price: float
    delta: float = 0.0
    gamma: float = 0.0
    vega: float = 0.0
    gap_proportion: float = 0.0
    conditional_loss: float = 0.0
    expected_loss: float = 0.0
    terminal_density: np.ndarray | None = field(default=None, repr=False)
    grid: StateGrid | None = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def gap_fields(gap: float, loss: float) -> dict:
        gap = min(max(float(gap), 0.0), 1.0)
        cond = float(loss) / gap if gap > 1e-300 else 0.0
        return dict(gap_proportion=gap, conditional_loss=cond, expected_loss=gap * cond)

    def as_dict(self) -> dict:
        keys = ("price", "delta", "gamma", "vega", "gap_proportion", "conditional_loss", "expected_loss")
        return {k: float(getattr(self, k)) for k in keys}


# ---------------------------------------------------------------------------
# schedule and buckets


@dataclass(frozen=True)
class Period:
    terms: PeriodTerms
    sigma: float

    @property
    def variance(self) -> float:
        return self.sigma**2 * self.terms.tau


@dataclass(frozen=True)
class Bucket:
    period: Period
    count: int
    first: int


@dataclass(frozen=True)
class CompositionPlan:
    buckets: tuple
    strategy: str = "auto"
    tolerance: float = 0.0

    @property
    def n_periods(self) -> int:
        return sum(b.count for b in self.buckets)


def schedule_periods(spec: ProductSpec, model: ProcessModel, curve, first: int = 0) -> list[Period]:
    """Period descriptions for rebalancing periods ``first`` .. n-1."""
    t = np.asarray(spec.times, float)
    taus = np.diff(t)
    zcs = np.exp(-curve.integral(t[:-1], t[1:]))
    s_h = spec.period_threshold_spreads(curve)
    acc = spec.threshold_accrual(curve, t)
    out = []
    for i in range(first, spec.n_periods):
        terms = PeriodTerms(
            tau=float(taus[i]), zc_ratio=float(zcs[i]), spread_plus=spec.spread_plus,
            spread_minus=spec.spread_minus, spread_threshold=float(s_h[i]), fees=spec.fees,
            guarantee_over_threshold=float(1.0 / acc[i]))
        out.append(Period(terms, model.period_sigma(i)))
    return out


def _features(p: Period) -> np.ndarray:
    t = p.terms
    # the guarantee/threshold ratio only enters through fixed fees
    goh = t.guarantee_over_threshold if t.fees.fixed else 0.0
    return np.array([t.tau, -math.log(t.zc_ratio) / t.tau, t.spread_threshold, p.variance / t.tau, goh])


# parameters equal up to rounding noise belong to one "distinct" period
SAME_PERIOD_RTOL = 1e-10
SAME_PERIOD_ATOL = 1e-12


def _close(a: np.ndarray, b: np.ndarray, tol: float) -> bool:
    tol = max(tol, SAME_PERIOD_RTOL)
    return bool(np.all(np.abs(a - b) <= tol * np.abs(b) + SAME_PERIOD_ATOL))


def _representative(periods: Sequence[Period]) -> Period:
    """Arithmetic mean of variances, geometric mean of discount-type ratios."""
    if len(periods) == 1:
        return periods[0]
    taus = np.array([p.terms.tau for p in periods])
    tau = float(taus.mean())
    var = float(np.mean([p.variance for p in periods]))
    log_zc = np.mean([math.log(p.terms.zc_ratio) for p in periods])
    log_eh = np.mean([-p.terms.spread_threshold * p.terms.tau for p in periods])
    log_goh = np.mean([math.log(p.terms.guarantee_over_threshold) for p in periods])
    terms = replace(periods[0].terms, tau=tau, zc_ratio=float(math.exp(log_zc)),
                    spread_threshold=float(-log_eh / tau), guarantee_over_threshold=float(math.exp(log_goh)))
    return Period(terms, math.sqrt(var / tau))


def plan_buckets(periods: Sequence[Period], tolerance: float = 0.0, strategy: str = "auto") -> CompositionPlan:
    """Group consecutive periods whose parameters stay within ``tolerance`` (relative) of the bucket start."""
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    if strategy not in ("auto", "matvec", "matmat"):
        raise ValueError(f"unknown strategy {strategy!r}")
    buckets = []
    i = 0
    n = len(periods)
    while i < n:
        ref = _features(periods[i])
        j = i + 1
        while j < n and periods[j].terms.fees == periods[i].terms.fees and _close(_features(periods[j]), ref, tolerance):
            j += 1
        buckets.append(Bucket(_representative(periods[i:j]), j - i, i))
        i = j
    return CompositionPlan(tuple(buckets), strategy, tolerance)


# ---------------------------------------------------------------------------
# composition


def matrix_power(m: np.ndarray, k: int) -> np.ndarray:
    """M^k by binary exponentiation."""
    if k < 0:
        raise CompositionError("negative matrix power")
    result = None
    base = m
    while k:
        if k & 1:
            result = base.copy() if result is None else result @ base
        k >>= 1
        if k:
            base = base @ base
    return np.eye(m.shape[0]) if result is None else result


def choose_strategy(count: int, size: int, n_vectors: int) -> str:
    matvec = count * size * size * n_vectors
    matmat = max(math.log2(max(count, 1)), 1.0) * size**3 + size * size * n_vectors
    return "matmat" if matmat < matvec else "matvec"


def _entries(m) -> np.ndarray:
    return m.entries if hasattr(m, "entries") else np.asarray(m, float)


def compose(matrices: Sequence, values: np.ndarray | None = None, strategy: str = "matvec"):
    """Apply M_0 M_1 ... M_{k-1} to ``values`` (backward), or return the product.

    With ``matmat`` runs of the same matrix object are raised to their power
    by binary exponentiation.
    """
    mats = [_entries(m) for m in matrices]
    if not mats:
        raise CompositionError("nothing to compose")
    size = mats[0].shape[0]
    for m in mats:
        if m.shape != (size, size):
            raise CompositionError("matrices must be square and of equal size")
    runs = []
    for raw, m in zip(matrices, mats):
        if runs and runs[-1][0] is raw:
            runs[-1][2] += 1
        else:
            runs.append([raw, m, 1])
    if values is None:
        out = np.eye(size)
        for _, m, c in runs:
            out = out @ (matrix_power(m, c) if strategy == "matmat" else np.linalg.matrix_power(m, c))
        return out
    v = np.asarray(values, float)
    if v.shape[0] != size:
        raise CompositionError(f"vector of length {v.shape[0]} does not match matrices of size {size}")
    for _, m, c in reversed(runs):
        if strategy == "matmat" and c > 1:
            v = matrix_power(m, c) @ v
        else:
            for _ in range(c):
                v = m @ v
    return v


def propagate_rows(rows: np.ndarray, plan: CompositionPlan, build: Callable[[Period], np.ndarray]) -> np.ndarray:
    """Forward propagation of start rows (densities) through every bucket."""
    d = np.atleast_2d(np.asarray(rows, float))
    for b in plan.buckets:
        m = build(b.period)
        strategy = plan.strategy
        if strategy == "auto":
            strategy = choose_strategy(b.count, m.shape[0], d.shape[0])
        if strategy == "matmat" and b.count > 1:
            d = d @ matrix_power(m, b.count)
        else:
            for _ in range(b.count):
                d = d @ m
        if not np.all(np.isfinite(d)):
            raise KernelError("non-finite values during propagation")
    return d


def propagate_values(values: np.ndarray, plan: CompositionPlan, build: Callable[[Period], np.ndarray],
                     step: Callable[[int, np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Backward propagation of value vectors; ``step(i, v)`` runs after period i is applied."""
    v = np.asarray(values, float)
    for b in reversed(plan.buckets):
        m = build(b.period)
        if step is None and plan.strategy == "matmat" and b.count > 1:
            v = matrix_power(m, b.count) @ v
            continue
        for k in reversed(range(b.count)):
            v = m @ v
            if step is not None:
                v = step(b.first + k, v)
    return v


# ---------------------------------------------------------------------------
# pricing


@dataclass
class PricingContext:
    """Everything shared by the vanilla pricing path and the feature pricers."""

    spec: ProductSpec
    model: ProcessModel
    market: Market
    grid: StateGrid
    first_index: int
    started: bool
    x_start: float
    first_period: Period
    first_law: object
    rest: CompositionPlan

    @property
    def discount_to_maturity(self) -> float:
        c = self.market.curve
        return float(math.exp(-c.integral(self.market.valuation_time, self.spec.maturity)))

    def build(self, period: Period) -> np.ndarray:
        law = self.model.law(period.sigma, period.terms.tau)
        return build_period_matrix(self.grid, law, self.spec.rule, period.terms).entries

    def start_rows(self, spot_factors: Sequence[float] = (1.0,)) -> np.ndarray:
        fr = self.market.forward_ratio()
        rows = []
        for f in spot_factors:
            terms = replace(self.first_period.terms, forward_ratio=fr * f)
            rows.append(build_rows([self.x_start], self.grid, self.first_law, self.spec.rule, terms)[0])
        return np.array(rows)


def pricing_context(spec: ProductSpec, model: ProcessModel, market: Market | None = None, n_points: int = 500,
                    tolerance: float = 0.0, strategy: str = "auto", grid: StateGrid | None = None,
                    eps: float = 1e-8) -> PricingContext:
    market = market or Market()
    curve = market.curve
    grid = grid or build_grid(spec, model, n_points, eps=eps, curve=curve)
    t = np.asarray(spec.times, float)
    tv = market.valuation_time
    if tv >= spec.maturity:
        raise ValueError("valuation time must precede maturity")
    k = max(int(np.searchsorted(t, tv, side="right")) - 1, 0)
    started = tv > t[k] or (tv == t[k] and k > 0)
    acc = float(spec.threshold_accrual(curve, t[k]))
    x_start = spec.initial_value / (spec.guarantee * acc)
    if not (grid.lower <= x_start <= grid.upper):
        raise GridCoverageError(f"start value {x_start:.6g} outside grid [{grid.lower:.6g}, {grid.upper:.6g}]")
    periods = schedule_periods(spec, model, curve, k)
    first = periods[0]
    remaining = first.terms.tau - max(tv - t[k], 0.0)
    first_law = model.law(first.sigma, remaining)
    rest = plan_buckets(periods[1:], tolerance, strategy)
    return PricingContext(spec, model, market, grid, k, started, x_start, first, first_law, rest)


def _price_forward(ctx: PricingContext, payoff: Payoff, with_spot_greeks: bool):
    factors = (1.0, 1.0 + SPOT_BUMP, 1.0 - SPOT_BUMP) if with_spot_greeks else (1.0,)
    rows = ctx.start_rows(factors)
    dens = propagate_rows(rows, ctx.rest, ctx.build) if ctx.rest.buckets else rows
    x = ctx.grid.points
    pay = payoff.vector(x, ctx.spec.guarantee)
    below, shortfall = gap_vectors(x)
    return dens, dens @ pay, float(dens[0] @ below), float(dens[0] @ shortfall)


def price(spec: ProductSpec, model: ProcessModel, market: Market | None = None, payoff: Payoff | None = None,
          n_points: int = 500, tolerance: float = 0.0, strategy: str = "auto", grid: StateGrid | None = None,
          eps: float = 1e-8, greeks: bool = True) -> PricingReport:
    """Price ``payoff`` on the strategy and report its risk indicators.

    Lock-ins and coupons are routed to the feature pricers.
    """
    payoff = payoff or Payoff()
    if spec.lock_in is not None or spec.coupons is not None:
        from . import features

        return features.price_with_features(spec, model, market, payoff, n_points=n_points, tolerance=tolerance,
                                            strategy=strategy, grid=grid, eps=eps, greeks=greeks)
    market = market or Market()
    ctx = pricing_context(spec, model, market, n_points, tolerance, strategy, grid, eps)
    spot_greeks = greeks and ctx.started
    dens, vals, gap, loss = _price_forward(ctx, payoff, spot_greeks)
    scale = spec.guarantee * ctx.discount_to_maturity
    value = scale * float(vals[0])
    delta = gamma = vega = 0.0
    if spot_greeks:
        h = SPOT_BUMP * market.spot
        up, dn = scale * float(vals[1]), scale * float(vals[2])
        delta = (up - dn) / (2 * h)
        gamma = (up - 2 * value + dn) / (h * h)
    if greeks:
        vega = vega_by_bump(spec, model, market, payoff, ctx)
    return PricingReport(price=value, delta=delta, gamma=gamma, vega=vega, terminal_density=dens[0],
                         grid=ctx.grid, diagnostics={"buckets": len(ctx.rest.buckets) + 1},
                         **PricingReport.gap_fields(gap, loss))


def vega_by_bump(spec, model, market, payoff, ctx: PricingContext, bump: float = VEGA_BUMP) -> float:
    """Central difference in volatility on the same grid, per volatility point."""
    out = []
    for s in (bump, -bump):
        r = price(spec, model.bumped(s), market, payoff, tolerance=ctx.rest.tolerance, strategy=ctx.rest.strategy,
                  grid=ctx.grid, greeks=False)
        out.append(r.price)
    return (out[0] - out[1]) / (2 * bump) * 0.01


def greeks(spec, model, market, payoff=None, **kw) -> tuple[float, float, float]:
    r = price(spec, model, market, payoff, greeks=True, **kw)
    return r.delta, r.gamma, r.vega
