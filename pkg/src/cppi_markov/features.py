"""Coupons, profit lock-in, banded rebalancing and open-ended products.

All features act at event dates on kernels that span a whole event period,
so the period matrices between events are multiplied together first
(matrix-matrix).  Off-grid destinations produced by a coupon or a lock-in
are split linearly between the two neighbouring grid points on the same side
of the threshold, which keeps mass and mean and never moves mass across
X = 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from numba import njit

from .grid import StateGrid, build_grid
from .kernel import build_rows
from .models import ProcessModel
from .operators import (
    SPOT_BUMP, Payoff, PricingContext, PricingReport, gap_vectors, matrix_power, pricing_context,
)
from .product import LockInRule, Market, ProductSpec, exposure


class FeatureError(ValueError):
    """Unsupported or inconsistent feature request."""


# ---------------------------------------------------------------------------
# re-binning of off-grid destinations


@njit(cache=True)
def _split(g, j1, y):
    """Index k and weight u so that y ~ (1-u) g[k] + u g[k+1], on y's side of X = 1."""
    n = g.shape[0]
    if y == 1.0:
        return j1, 0.0
    if y < 1.0:
        lo, hi = 0, j1 - 1
    else:
        lo, hi = j1 + 1, n - 1
    if y <= g[lo]:
        return lo, 0.0
    if y >= g[hi]:
        return hi, 0.0
    a, b = lo, hi
    while b - a > 1:
        mid = (a + b) // 2
        if g[mid] <= y:
            a = mid
        else:
            b = mid
    return a, (y - g[a]) / (g[a + 1] - g[a])


@njit(cache=True)
def _deposit(out, r, g, j1, y, mass):
    k, u = _split(g, j1, y)
    out[r, k] += mass * (1.0 - u)
    if u > 0.0:
        out[r, k + 1] += mass * u


@njit(cache=True)
def _lock_factor(kind, p, x, z, acc0, acc1, excess):
    if kind == 1:  # continuous
        return max(1.0, p * z * acc1)
    if excess:
        gain = acc1 * (z - x)
    else:
        gain = z * acc1 - x * acc0
    return 1.0 + p * max(gain, 0.0)


@njit(cache=True)
def _lockin_remap(K, g, j1, xs, kind, p, acc0, acc1, excess):
    rows, n = K.shape
    v0 = np.zeros((rows, n))
    v1 = np.zeros((rows, n))
    for r in range(rows):
        for k in range(n):
            m = K[r, k]
            if m == 0.0:
                continue
            f = _lock_factor(kind, p, xs[r], g[k], acc0, acc1, excess)
            y = g[k] / f
            _deposit(v0, r, g, j1, y, m)
            _deposit(v1, r, g, j1, y, m * f)
    return v0, v1


@njit(cache=True)
def _coupon_remap(K, g, j1, xs, active, q, ratio, fixed_x):
    rows, n = K.shape
    out = np.zeros((rows, n))
    for r in range(rows):
        for k in range(n):
            m = K[r, k]
            if m == 0.0:
                continue
            y = g[k] - fixed_x
            if active[r]:
                y -= q * max(g[k] - xs[r] * ratio, 0.0)
            _deposit(out, r, g, j1, y, m)
    return out


LEVEL_RTOL = 1e-12


@njit(cache=True)
def _add_scaled_row(out_row, g, q_row, p1_row, weight, s):
    """out_row[j] += weight * P(Z <= g[j]) with Z = s * X, X distributed on the nodes.

    ``q_row`` and ``p1_row`` are the cumulative masses and cumulative first
    moments of X.  Values of Z between two nodes are split linearly between
    them (mean-preserving), so expectations of functions that are linear
    between nodes, like the shortfall below a node, stay exact.
    """
    n = g.shape[0]
    a = -1  # last i with s g[i] <= g[j]
    b = -1  # last i with s g[i] < g[j+1]
    for j in range(n):
        lev = g[j] + LEVEL_RTOL * abs(g[j])  # atoms on the level count as below it despite rounding
        while a + 1 < n and s * g[a + 1] <= lev:
            a += 1
        if j == n - 1:
            out_row[j] += weight * q_row[n - 1]
            continue
        top = g[j + 1]
        if b < a:
            b = a
        while b + 1 < n and s * g[b + 1] < top:
            b += 1
        qa = q_row[a] if a >= 0 else 0.0
        pa = p1_row[a] if a >= 0 else 0.0
        v = qa
        if b > a:
            v += ((q_row[b] - qa) * top - s * (p1_row[b] - pa)) / (top - g[j])
        out_row[j] += weight * v


@njit(cache=True)
def _cumulative_step(K, g, j1, xs, Q, kind, p, acc0, acc1, excess):
    """Q_I(x, y) = sum_z K(x, z) Q_{I+1}(z/f, y/f).

    The final-value law from the off-grid start z/f is taken from the two
    neighbouring nodes with values rescaled proportionally, which is exact
    for paths without risky exposure (their value no longer moves relative
    to the guarantee).  In old guarantee units the rescaled value from node
    ``kz`` is (z / g[kz]) X_n.
    """
    rows, n = K.shape
    out = np.zeros((rows, n))
    P1 = np.empty_like(Q)
    for i in range(n):
        acc = 0.0
        prev = 0.0
        for j in range(n):
            acc += (Q[i, j] - prev) * g[j]
            prev = Q[i, j]
            P1[i, j] = acc
    for r in range(rows):
        for k in range(n):
            m = K[r, k]
            if m == 0.0:
                continue
            f = _lock_factor(kind, p, xs[r], g[k], acc0, acc1, excess)
            if f == 1.0:
                for j in range(n):
                    out[r, j] += m * Q[k, j]
                continue
            kz, uz = _split(g, j1, g[k] / f)
            for node, w in ((kz, 1.0 - uz), (kz + 1, uz)):
                if w <= 0.0:
                    continue
                if g[node] != 0.0 and g[node] * g[k] > 0.0:
                    scale = g[k] / g[node]
                else:
                    scale = f
                _add_scaled_row(out[r], g, Q[node], P1[node], m * w, scale)
    return out


def rebin(values: np.ndarray, grid: StateGrid) -> np.ndarray:
    """Masses on the grid of unit Diracs at ``values`` (one row per value)."""
    v = np.atleast_1d(np.asarray(values, float))
    out = np.zeros((v.size, grid.size))
    for r, y in enumerate(v):
        _deposit(out, r, grid.points, grid.threshold_index, float(y), 1.0)
    return out


# ---------------------------------------------------------------------------
# semi-direct product


@dataclass(frozen=True)
class AugmentedMatrix:
    """Pair (operator, function) stored as the block matrix [[O, f], [0, 1]]."""

    entries: np.ndarray

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1] or e.shape[0] < 2:
            raise FeatureError("augmented matrix must be square with size >= 2")
        bottom = np.zeros(e.shape[1])
        bottom[-1] = 1.0
        if not np.array_equal(e[-1], bottom):
            raise FeatureError("bottom row of an augmented matrix must be (0, ..., 0, 1)")

    @classmethod
    def from_pair(cls, operator, function=None) -> "AugmentedMatrix":
        op = np.asarray(operator, float)
        n = op.shape[0]
        if op.shape != (n, n):
            raise FeatureError("operator must be square")
        f = np.zeros(n) if function is None else np.asarray(function, float)
        if f.shape != (n,):
            raise FeatureError("function length does not match the operator")
        e = np.zeros((n + 1, n + 1))
        e[:n, :n] = op
        e[:n, n] = f
        e[n, n] = 1.0
        return cls(e)

    @classmethod
    def identity(cls, n: int) -> "AugmentedMatrix":
        return cls.from_pair(np.eye(n))

    @property
    def operator(self) -> np.ndarray:
        return self.entries[:-1, :-1]

    @property
    def function(self) -> np.ndarray:
        return self.entries[:-1, -1]

    def apply(self, g: np.ndarray) -> np.ndarray:
        """Action on a function: O g + f."""
        return self.operator @ np.asarray(g, float) + self.function

    def __matmul__(self, other: "AugmentedMatrix") -> "AugmentedMatrix":
        return semidirect_product(self, other)


def semidirect_product(a: AugmentedMatrix, b: AugmentedMatrix) -> AugmentedMatrix:
    """(O1, f1)(O2, f2) = (O1 O2, O1 f2 + f1)."""
    if a.entries.shape != b.entries.shape:
        raise FeatureError("augmented matrices of different sizes")
    return AugmentedMatrix(a.entries @ b.entries)


# ---------------------------------------------------------------------------
# coupon and lock-in kernels


def coupon_rescaled_matrix(base: np.ndarray, grid: StateGrid, starts, q: float, ratio: float,
                           active=None, fixed: float = 0.0) -> np.ndarray:
    """Kernel over a coupon period after detaching the coupon.

    Destination z becomes z - q (z - x ratio)^+ on rows where the start value
    carries risky exposure, and every destination is lowered by the fixed
    coupon ``fixed`` (rescaled units).  ``ratio`` is H_{I-1}/H_I.
    """
    if not (0 <= q < 1):
        raise FeatureError("coupon participation must lie in [0, 1)")
    base = np.atleast_2d(np.asarray(base, float))
    xs = np.broadcast_to(np.asarray(starts, float), (base.shape[0],)).astype(float)
    act = np.ones(base.shape[0], bool) if active is None else np.asarray(active, bool)
    if q == 0 and fixed == 0:
        return base.copy()
    return _coupon_remap(base, grid.points, grid.threshold_index, xs, act, float(q), float(ratio), float(fixed))


def coupon_value_vector(base: np.ndarray, grid: StateGrid, starts, q: float, acc_start: float, acc_end: float,
                        zc_to_maturity: float, active=None, fixed: float = 0.0) -> np.ndarray:
    """Coupon paid at the end of the period, in guarantee units, capitalized to maturity."""
    base = np.atleast_2d(np.asarray(base, float))
    xs = np.broadcast_to(np.asarray(starts, float), (base.shape[0],)).astype(float)
    act = np.ones(base.shape[0], bool) if active is None else np.asarray(active, bool)
    perf = np.maximum(grid.points[None, :] * acc_end - xs[:, None] * acc_start, 0.0)
    perf_value = np.einsum("rk,rk->r", base, perf)
    return (q * act * perf_value + fixed) / zc_to_maturity


def _lock_kind(rule: LockInRule) -> int:
    return 1 if rule.kind == "continuous" else 0


def lockin_kernels(base: np.ndarray, grid: StateGrid, rule: LockInRule, acc_start: float, acc_end: float,
                   starts=None) -> tuple[np.ndarray, np.ndarray]:
    """(V0, V1): the period kernel with destinations divided by the lock-in factor f,
    V1 additionally weighting each destination by f."""
    base = np.atleast_2d(np.asarray(base, float))
    xs = grid.points if starts is None else np.broadcast_to(np.asarray(starts, float), (base.shape[0],)).astype(float)
    if rule.proportion == 0:
        return base.copy(), base.copy()
    return _lockin_remap(base, grid.points, grid.threshold_index, np.asarray(xs, float), _lock_kind(rule),
                         float(rule.proportion), float(acc_start), float(acc_end), bool(rule.excess_only))


def lock_factor(rule: LockInRule, x, z, acc_start: float, acc_end: float):
    """Guarantee growth factor G_{I+1}/G_I."""
    x = np.asarray(x, float)
    z = np.asarray(z, float)
    p = rule.proportion
    if rule.kind == "continuous":
        return np.maximum(1.0, p * z * acc_end)
    gain = acc_end * (z - x) if rule.excess_only else z * acc_end - x * acc_start
    return 1.0 + p * np.maximum(gain, 0.0)


# ---------------------------------------------------------------------------
# event-period kernels


class _Segments:
    """Products of period matrices between event dates, with cached powers."""

    def __init__(self, ctx: PricingContext):
        self.ctx = ctx
        self._mats: dict = {}
        self._pows: dict = {}

    def _power(self, bi: int, count: int) -> np.ndarray:
        key = (bi, count)
        if key not in self._pows:
            if bi not in self._mats:
                self._mats[bi] = self.ctx.build(self.ctx.rest.buckets[bi].period)
            self._pows[key] = matrix_power(self._mats[bi], count)
        return self._pows[key]

    def product(self, a: int, b: int) -> np.ndarray | None:
        """M_a ... M_{b-1} for whole periods after the first one."""
        k = self.ctx.first_index
        out = None
        for bi, bk in enumerate(self.ctx.rest.buckets):
            s = k + 1 + bk.first
            lo, hi = max(a, s), min(b, s + bk.count)
            if lo < hi:
                m = self._power(bi, hi - lo)
                out = m if out is None else out @ m
        return out

    def first(self, rows: np.ndarray, b: int) -> np.ndarray:
        p = self.product(self.ctx.first_index + 1, b)
        return rows if p is None else rows @ p

    def full(self, a: int, b: int) -> np.ndarray:
        p = self.product(a, b)
        return np.eye(self.ctx.grid.size) if p is None else p


def _boundaries(first_index: int, n: int, dates) -> list[int]:
    return sorted({d for d in dates if first_index < d < n} | {n})


def _lock_dates(spec: ProductSpec) -> tuple:
    rule = spec.lock_in
    if rule.kind == "continuous":
        return tuple(range(1, spec.n_periods))
    return tuple(rule.dates)


def _factors(ctx: PricingContext, greeks: bool) -> tuple:
    return (1.0, 1.0 + SPOT_BUMP, 1.0 - SPOT_BUMP) if greeks and ctx.started else (1.0,)


def _spot_greeks(values: np.ndarray, scale: float, spot: float) -> tuple[float, float]:
    if values.size < 3:
        return 0.0, 0.0
    h = SPOT_BUMP * spot
    v, up, dn = scale * values[:3]
    return (up - dn) / (2 * h), (up - 2 * v + dn) / (h * h)


# ---------------------------------------------------------------------------
# lock-in pricing


def _lockin_forward(ctx: PricingContext, seg: _Segments, rule: LockInRule, rows: np.ndarray):
    """Forward densities of X_n under V0 (plain) and V1 (guarantee-weighted)."""
    spec, curve = ctx.spec, ctx.market.curve
    t = np.asarray(spec.times, float)
    lock = set(_lock_dates(spec))
    bounds = _boundaries(ctx.first_index, spec.n_periods, lock)
    a = ctx.first_index
    d0 = d1 = None
    for b in bounds:
        if d0 is None:
            s0 = s1 = seg.first(rows, b)
            starts = np.full(rows.shape[0], ctx.x_start)
        else:
            m = seg.full(a, b)
            s0, s1 = d0 @ m, d1 @ m
        if b in lock:
            acc0 = float(spec.threshold_accrual(curve, t[a]))
            acc1 = float(spec.threshold_accrual(curve, t[b]))
            if d0 is None:
                s0, s1 = lockin_kernels(s0, ctx.grid, rule, acc0, acc1, starts)
            else:
                v0, v1 = lockin_kernels(m, ctx.grid, rule, acc0, acc1)
                s0, s1 = d0 @ v0, d1 @ v1
        d0, d1 = s0, s1
        a = b
    return d0, d1


def _cumulative_rows(ctx: PricingContext, seg: _Segments, rule: LockInRule, rows: np.ndarray) -> np.ndarray:
    """Rows of Q_0(x_start, y): distribution function of Z_n = C_n/G_0 on the grid."""
    spec, curve, grid = ctx.spec, ctx.market.curve, ctx.grid
    g, j1 = grid.points, grid.threshold_index
    t = np.asarray(spec.times, float)
    lock = set(_lock_dates(spec))
    bounds = _boundaries(ctx.first_index, spec.n_periods, lock)
    starts = [ctx.first_index] + bounds[:-1]
    Q = (g[:, None] <= g[None, :]).astype(float)
    kind, p, ex = _lock_kind(rule), float(rule.proportion), bool(rule.excess_only)
    for idx in reversed(range(len(bounds))):
        a, b = starts[idx], bounds[idx]
        if idx == 0:
            K, xs = seg.first(rows, b), np.full(rows.shape[0], ctx.x_start)
        else:
            K, xs = seg.full(a, b), g
        if b in lock and p > 0:
            acc0 = float(spec.threshold_accrual(curve, t[a]))
            acc1 = float(spec.threshold_accrual(curve, t[b]))
            Q = _cumulative_step(K, g, j1, np.asarray(xs, float), Q, kind, p, acc0, acc1, ex)
        else:
            Q = K @ Q
    return Q


def _masses_from_cdf(cdf_rows: np.ndarray) -> np.ndarray:
    m = np.diff(cdf_rows, axis=1, prepend=0.0)
    m[:, -1] += 1.0 - cdf_rows[:, -1]  # tail beyond the grid sits on the last point
    return m


def _monetary_values(masses, g, payoff: Payoff, guarantee: float) -> np.ndarray:
    """Payoffs on Z = C_n / G_0 given its masses on the nodes."""
    if payoff.kind == "guaranteed":
        raise FeatureError("a guaranteed payoff with a currency strike is not defined under lock-in")
    return masses @ payoff.vector(g, guarantee)


def lockin_price(spec: ProductSpec, model: ProcessModel, market: Market | None = None, payoff: Payoff | None = None,
                 convention: str = "locked", n_points: int = 500, tolerance: float = 0.0, strategy: str = "auto",
                 grid: StateGrid | None = None, eps: float = 1e-8, greeks: bool = True) -> PricingReport:
    """Price with a guarantee ratchet.

    Guarantee-scaled payoffs use the weighted kernel product, digitals the
    plain one, and monetary strikes the cumulative recursion.  ``convention``
    selects the guarantee the gap indicators refer to: the final locked-in
    guarantee or the initial one.
    """
    if spec.lock_in is None:
        raise FeatureError("lockin_price needs a lock-in rule")
    if spec.coupons is not None:
        raise FeatureError("coupons combined with lock-in are not supported")
    if convention not in ("locked", "initial"):
        raise FeatureError(f"unknown guarantee convention {convention!r}")
    payoff = payoff or Payoff()
    market = market or Market()
    rule = spec.lock_in
    ctx = pricing_context(spec, model, market, n_points, tolerance, strategy, grid, eps)
    seg = _Segments(ctx)
    rows = ctx.start_rows(_factors(ctx, greeks))
    x = ctx.grid.points
    scale = spec.guarantee * ctx.discount_to_maturity
    below, shortfall = gap_vectors(x)

    d0, d1 = _lockin_forward(ctx, seg, rule, rows)
    need_cum = convention == "initial" or payoff.monetary
    cum = _cumulative_rows(ctx, seg, rule, rows) if need_cum else None

    if payoff.monetary:
        values = _monetary_values(_masses_from_cdf(cum), x, payoff, spec.guarantee)
    elif payoff.kind == "digital":
        values = d0 @ payoff.vector(x)
    else:
        values = d1 @ payoff.vector(x)
    price_value = scale * float(values[0])
    delta, gamma = _spot_greeks(values, scale, market.spot)

    locked = PricingReport.gap_fields(d0[0] @ below, d1[0] @ shortfall)
    diagnostics = {"locked": locked, "guarantee_growth": float(d1[0].sum())}
    if cum is not None:
        masses = _masses_from_cdf(cum[:1])[0]
        diagnostics["initial"] = PricingReport.gap_fields(masses @ below, masses @ shortfall)
        diagnostics["final_value_density"] = masses
    fields = diagnostics[convention]
    vega = 0.0
    if greeks:
        vega = _feature_vega(lambda m: lockin_price(spec, m, market, payoff, convention, tolerance=tolerance,
                                                    strategy=strategy, grid=ctx.grid, greeks=False).price, model)
    return PricingReport(price=price_value, delta=delta, gamma=gamma, vega=vega, terminal_density=d0[0],
                         grid=ctx.grid, diagnostics=diagnostics, **fields)


def absolute_strike_price(spec: ProductSpec, model: ProcessModel, strike: float, kind: str = "put",
                          market: Market | None = None, **kw) -> PricingReport:
    """Option on the final strategy value with a strike in currency."""
    payoff = Payoff(kind, strike, monetary=True)
    if spec.lock_in is None:
        from .operators import price

        return price(spec, model, market, payoff, **kw)
    return lockin_price(spec, model, market, payoff, **kw)


def _feature_vega(reprice, model: ProcessModel, bump: float = 1e-4) -> float:
    up = reprice(model.bumped(bump))
    dn = reprice(model.bumped(-bump))
    return (up - dn) / (2 * bump) * 0.01


# ---------------------------------------------------------------------------
# coupon pricing


def coupon_price(spec: ProductSpec, model: ProcessModel, market: Market | None = None, payoff: Payoff | None = None,
                 n_points: int = 500, tolerance: float = 0.0, strategy: str = "auto", grid: StateGrid | None = None,
                 eps: float = 1e-8, greeks: bool = True) -> PricingReport:
    """Price with coupons; the present value of all coupons goes to ``diagnostics['coupon_value']``."""
    if spec.coupons is None:
        raise FeatureError("coupon_price needs a coupon schedule")
    if spec.lock_in is not None:
        raise FeatureError("coupons combined with lock-in are not supported")
    payoff = payoff or Payoff()
    market = market or Market()
    ctx = pricing_context(spec, model, market, n_points, tolerance, strategy, grid, eps)
    seg = _Segments(ctx)
    curve, grid = market.curve, ctx.grid
    t = np.asarray(spec.times, float)
    cs = spec.coupons
    dates = set(cs.dates)
    bounds = _boundaries(ctx.first_index, spec.n_periods, dates)
    rows = ctx.start_rows(_factors(ctx, greeks))
    n_rows = rows.shape[0]
    aug_rows = None  # (rows, N+1): density followed by the accumulated coupon value
    a = ctx.first_index
    for b in bounds:
        first = aug_rows is None
        if first:
            base = seg.first(rows, b)
            starts = np.full(n_rows, ctx.x_start)
        else:
            base = seg.full(a, b)
            starts = grid.points
        op, fn = base, np.zeros(base.shape[0])
        if b in dates:
            acc0 = float(spec.threshold_accrual(curve, t[a]))
            acc1 = float(spec.threshold_accrual(curve, t[b]))
            active = exposure(starts, spec.rule) > 0
            fixed_x = cs.fixed_amount / acc1
            zc = float(curve.discount(t[b], spec.maturity))
            op = coupon_rescaled_matrix(base, grid, starts, cs.participation, acc0 / acc1, active, fixed_x)
            fn = coupon_value_vector(base, grid, starts, cs.participation, acc0, acc1, zc, active, cs.fixed_amount)
        if first:
            aug_rows = np.hstack([op, fn[:, None]])
        else:
            aug_rows = aug_rows @ AugmentedMatrix.from_pair(op, fn).entries
        a = b
    dens = aug_rows[:, :-1]
    coupons = aug_rows[:, -1]
    x = grid.points
    scale = spec.guarantee * ctx.discount_to_maturity
    values = dens @ payoff.vector(x, spec.guarantee)
    below, shortfall = gap_vectors(x)
    delta, gamma = _spot_greeks(values, scale, market.spot)
    vega = 0.0
    if greeks:
        vega = _feature_vega(lambda m: coupon_price(spec, m, market, payoff, tolerance=tolerance, strategy=strategy,
                                                    grid=grid, greeks=False).price, model)
    return PricingReport(price=scale * float(values[0]), delta=delta, gamma=gamma, vega=vega,
                         terminal_density=dens[0], grid=grid,
                         diagnostics={"coupon_value": scale * float(coupons[0])},
                         **PricingReport.gap_fields(dens[0] @ below, dens[0] @ shortfall))


def price_with_features(spec, model, market=None, payoff=None, **kw) -> PricingReport:
    if spec.lock_in is not None:
        return lockin_price(spec, model, market, payoff, **kw)
    return coupon_price(spec, model, market, payoff, **kw)


# ---------------------------------------------------------------------------
# banded rebalancing


def band_levels(beta: float, n_y: int) -> np.ndarray:
    if n_y == 1:
        return np.zeros(1)
    if n_y < 3 or n_y % 2 == 0:
        raise FeatureError("the band grid needs an odd number of points, at least 3 (or 1 for no band)")
    if not (beta > 0):
        raise FeatureError("band width must be positive")
    return np.linspace(-beta, beta, n_y)


def banded_transition(grid: StateGrid, law, rule, terms, ys: np.ndarray) -> np.ndarray:
    """Transition matrix on the product grid, state index i * n_y + j for (x_i, y_j)."""
    g = grid.points
    n, n_y = g.size, ys.size
    beta = float(ys[-1])
    w_grid = np.atleast_1d(exposure(g, rule))
    T = np.zeros((n * n_y, n * n_y))
    for j, y in enumerate(ys):
        M = build_rows(g, grid, law, rule, terms, weights=w_grid / (1.0 + y))
        for i in range(n):
            row = M[i]
            w0 = w_grid[i] / (1.0 + y)
            if w0 > 0:
                alpha = w_grid / w0 - 1.0
                keep = np.abs(alpha) <= beta
            else:
                alpha = np.zeros(n)
                keep = np.zeros(n, bool)
            y_new = np.where(keep, alpha, 0.0)
            if n_y == 1:
                T[i * n_y, np.arange(n) * n_y] = row
                continue
            pos = np.clip((y_new - ys[0]) / (ys[1] - ys[0]), 0.0, n_y - 1.0)
            lo = np.minimum(pos.astype(int), n_y - 2)
            u = pos - lo
            cols = np.arange(n) * n_y
            np.add.at(T[i * n_y + j], cols + lo, row * (1.0 - u))
            np.add.at(T[i * n_y + j], cols + lo + 1, row * u)
    return T


def banded_rebalance_price(spec: ProductSpec, model: ProcessModel, beta: float, market: Market | None = None,
                           payoff: Payoff | None = None, n_points: int = 200, n_y: int = 5,
                           grid: StateGrid | None = None, eps: float = 1e-8) -> PricingReport:
    """Price when the exposure is only reset once it drifts more than ``beta`` (relative) from target."""
    if spec.lock_in is not None or spec.coupons is not None:
        raise FeatureError("banded rebalancing is not combined with coupons or lock-in")
    payoff = payoff or Payoff()
    market = market or Market()
    ys = band_levels(beta, n_y)
    ctx = pricing_context(spec, model, market, n_points, 0.0, "matvec", grid, eps)
    grid = ctx.grid
    n, ny = grid.size, ys.size
    j0 = int(np.argmin(np.abs(ys)))
    # start row: Y_0 = 0, then the band update after the first period
    first_rows = build_rows([ctx.x_start], grid, ctx.first_law, spec.rule,
                            replace(ctx.first_period.terms, forward_ratio=market.forward_ratio()))
    w_start = float(exposure(ctx.x_start, spec.rule))
    w_grid = np.atleast_1d(exposure(grid.points, spec.rule))
    dens = np.zeros(n * ny)
    if w_start > 0 and ny > 1:
        alpha = w_grid / w_start - 1.0
        y_new = np.where(np.abs(alpha) <= ys[-1], alpha, 0.0)
        pos = np.clip((y_new - ys[0]) / (ys[1] - ys[0]), 0.0, ny - 1.0)
        lo = np.minimum(pos.astype(int), ny - 2)
        u = pos - lo
        np.add.at(dens, np.arange(n) * ny + lo, first_rows[0] * (1 - u))
        np.add.at(dens, np.arange(n) * ny + lo + 1, first_rows[0] * u)
    else:
        dens[np.arange(n) * ny + j0] = first_rows[0]
    for b in ctx.rest.buckets:
        law = model.law(b.period.sigma, b.period.terms.tau)
        T = banded_transition(grid, law, spec.rule, b.period.terms, ys)
        for _ in range(b.count):
            dens = dens @ T
    dx = dens.reshape(n, ny).sum(axis=1)
    x = grid.points
    below, shortfall = gap_vectors(x)
    scale = spec.guarantee * ctx.discount_to_maturity
    return PricingReport(price=scale * float(dx @ payoff.vector(x, spec.guarantee)), terminal_density=dx, grid=grid,
                         diagnostics={"band_density": dens.reshape(n, ny)},
                         **PricingReport.gap_fields(dx @ below, dx @ shortfall))


# ---------------------------------------------------------------------------
# open-ended product


DIVERGENCE_WINDOW = 0.1
DIVERGENCE_RTOL = 0.01


def open_ended_price(spec: ProductSpec, model: ProcessModel, horizon: float | None, market: Market | None = None,
                     payoff: Payoff | None = None, n_points: int = 500, eps: float = 1e-8,
                     american: bool = True) -> PricingReport:
    """Open-ended product with continuous lock-in, exercisable on rebalancing dates.

    The threshold equals the guarantee (flat between dates), the maturity is
    forced to ``horizon`` years.  ``diagnostics['diverging']`` flags a value
    still moving by more than 1 % over the last tenth of the horizon.
    """
    if horizon is None or not (horizon > 0):
        raise FeatureError("an open-ended product needs a forced horizon")
    if spec.lock_in is None or spec.lock_in.kind != "continuous":
        raise FeatureError("an open-ended product needs a continuous lock-in rule")
    payoff = payoff or Payoff("put")
    if payoff.monetary:
        raise FeatureError("open-ended pricing supports payoffs relative to the guarantee only")
    market = market or Market()
    tau = float(spec.taus[0])
    n = max(int(round(horizon / tau)), 1)
    times = tuple(np.arange(n + 1) * tau)
    flat = replace(spec, times=times, threshold_levels=(1.0,) * (n + 1), spread_threshold=0.0,
                   coupons=None, open_ended=True)
    ctx = pricing_context(flat, model, market, n_points, 0.0, "matvec", None, eps)
    grid, rule = ctx.grid, flat.lock_in
    x = grid.points
    curve = market.curve
    t = np.asarray(times, float)
    ex = payoff.vector(x)
    scale_payoff = payoff.kind != "digital"
    start_x = ctx.x_start
    start_ex = float(payoff.vector(np.array([start_x]))[0])
    mats: dict = {}
    v = ex.copy()
    history = []
    for i in reversed(range(ctx.first_index, n)):
        disc = float(curve.discount(t[i], t[i + 1]))
        if i == ctx.first_index:
            rows = ctx.start_rows()
            v0, v1 = lockin_kernels(rows, grid, rule, 1.0, 1.0, [start_x])
            cont = disc * float(((v1 if scale_payoff else v0) @ v)[0])
            value = max(start_ex, cont) if american else cont
            history.append(value)
            break
        b = ctx.rest.buckets[[k for k, bk in enumerate(ctx.rest.buckets)
                              if bk.first <= i - ctx.first_index - 1 < bk.first + bk.count][0]]
        key = id(b)
        if key not in mats:
            m = ctx.build(b.period)
            mats[key] = lockin_kernels(m, grid, rule, 1.0, 1.0)
        v0, v1 = mats[key]
        v = disc * ((v1 if scale_payoff else v0) @ v)
        if american:
            v = np.maximum(v, ex)
        history.append(grid.interpolate(v, start_x))
    value = history[-1]
    k = max(int(round(DIVERGENCE_WINDOW * len(history))), 1)
    ref = history[-1 - k] if len(history) > k else history[0]
    change = abs(value - ref) / max(abs(value), 1e-300)
    diverging = bool(change > DIVERGENCE_RTOL and abs(value - ref) > 1e-12)
    return PricingReport(price=flat.guarantee * value, grid=grid,
                         diagnostics={"diverging": diverging, "horizon_values": np.array(history[::-1]),
                                      "relative_change": change})
