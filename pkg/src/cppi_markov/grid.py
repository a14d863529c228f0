"""Discretization of the rescaled CPPI value X = C/H.

The grid is fixed for the whole life of the product.  It is built in
sections: a stretched lower tail, a core around the threshold clustered
towards X=1, an optional geometric section between the threshold and the
cushion-limit level, and a stretched upper tail reaching a lognormal
quantile of the cushion.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtri

# Distance from X=1 to its two neighbours.  Mass ending just under the
# threshold keeps an exactly representable conditional mean, and mass just
# above it keeps a positive exposure instead of freezing on X=1.
THRESHOLD_GAP = 1e-9
CORE_LOW = 0.8
CORE_HIGH = 1.5
# smallest cushion resolved above the threshold
CUSHION_FLOOR = 1e-6


class GridError(ValueError):
    """Grid too small or inconsistent."""


@dataclass(frozen=True)
class StateGrid:
    points: np.ndarray
    separators: np.ndarray
    threshold_index: int
    cushion_limit_index: int | None = None

    def __post_init__(self):
        g, s = self.points, self.separators
        if len(g) < 2 or len(s) != len(g) - 1:
            raise GridError("a grid needs at least two points and n-1 separators")
        if np.any(np.diff(g) <= 0) or np.any(np.diff(s) <= 0):
            raise GridError("points and separators must increase strictly")
        if np.any(s < g[:-1]) or np.any(s > g[1:]):
            raise GridError("separators must interleave with points")
        if g[self.threshold_index] != 1.0:
            raise GridError("X=1 must be a grid point")

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def threshold_level(self) -> float:
        return 1.0

    @property
    def cushion_limit_level(self) -> float | None:
        if self.cushion_limit_index is None:
            return None
        return float(self.points[self.cushion_limit_index])

    @property
    def lower(self) -> float:
        return float(self.points[0])

    @property
    def upper(self) -> float:
        return float(self.points[-1])

    def bin_masses(self, cdf) -> np.ndarray:
        """Masses of the bins (s_{l-1}, s_l] for a distribution function ``cdf``."""
        c = np.concatenate(([0.0], np.asarray(cdf(self.separators), float), [1.0]))
        return np.diff(c)

    def locate(self, x: float) -> tuple[int, float]:
        """Index ``k`` and weight ``u`` with x = (1-u) g_k + u g_{k+1}."""
        g = self.points
        if x <= g[0]:
            return 0, 0.0
        if x >= g[-1]:
            return len(g) - 2, 1.0
        k = int(np.searchsorted(g, x, side="right") - 1)
        return k, (x - g[k]) / (g[k + 1] - g[k])

    def interpolate(self, values: np.ndarray, x: float) -> float:
        k, u = self.locate(x)
        return float((1 - u) * values[k] + u * values[k + 1])


def default_separators(points, geometric=None) -> np.ndarray:
    """Midpoints between consecutive points.

    ``geometric`` is an optional boolean mask over the n-1 gaps selecting
    geometric midpoints (both ends must be positive there).
    """
    g = np.asarray(points, dtype=float)
    if g.ndim != 1 or len(g) < 2:
        raise GridError("a partition needs at least two points")
    if np.any(np.diff(g) <= 0):
        raise GridError("points must increase strictly")
    s = 0.5 * (g[:-1] + g[1:])
    if geometric is not None:
        geometric = np.asarray(geometric, bool)
        if np.any(geometric & (g[:-1] <= 0)):
            raise GridError("geometric midpoints need positive points")
        s = np.where(geometric, np.sqrt(np.abs(g[:-1] * g[1:])), s)
    return s


def _stretched(start: float, end: float, n: int, first_step: float) -> np.ndarray:
    """``n`` points after ``start`` reaching ``end``, steps growing geometrically from ``first_step``."""
    if n <= 0:
        return np.empty(0)
    span = abs(end - start)
    direction = math.copysign(1.0, end - start)
    if n * first_step >= span or n == 1:
        return start + direction * span * np.arange(1, n + 1) / n

    def excess(ratio):
        growth = n * math.log(ratio)
        if growth > 700:
            return math.inf
        return first_step * math.expm1(growth) / (ratio - 1) - span

    hi = 1.5
    while excess(hi) < 0:
        hi = 1 + 2 * (hi - 1)
    ratio = brentq(excess, 1 + 1e-12, hi, xtol=1e-14)
    steps = first_step * ratio ** np.arange(n)
    pts = start + direction * np.cumsum(steps)
    pts[-1] = end
    return pts


def _clustered(a: float, b: float, n: int, toward_b: bool, strength: float = 2.0) -> np.ndarray:
    """``n`` points in (a, b] or [a, b) clustered toward one end by a sinh map."""
    u = np.arange(1, n + 1) / (n + 1) if n else np.empty(0)
    z = np.sinh(strength * u) / math.sinh(strength)
    return b - (b - a) * z if toward_b else a + (b - a) * z


def grid_bounds(max_weight: float, atm_vol: float, horizon: float, cushion0: float, eps: float) -> tuple[float, float]:
    """Upper bound from a lognormal quantile of the cushion, lower bound (1 - w_max) U.

    The cushion is a martingale whose mean is carried by its far right tail,
    so the quantile is taken under the cushion-weighted law (drift +s^2/2):
    the mass left above U then holds at most ``eps`` of the expected cushion.
    """
    s = max_weight * atm_vol
    z = float(ndtri(1 - eps))
    cushion0 = max(cushion0, 0.05)
    upper = 1.0 + cushion0 * math.exp(0.5 * s * s * horizon + s * math.sqrt(horizon) * z)
    upper = max(upper, 2.0 * CORE_HIGH)
    lower = min((1.0 - max_weight) * upper, 0.0)
    return lower, upper


def make_grid(
    n_points: int,
    lower: float,
    upper: float,
    cushion_limit_level: float | None = None,
    extra_anchors=(),
) -> StateGrid:
    """Assemble a grid from explicit bounds."""
    if n_points < 50:
        raise GridError(f"n_points must be at least 50, got {n_points}")
    if not (lower < CORE_LOW and upper > CORE_HIGH):
        raise GridError("bounds must bracket the core region around the threshold")
    n = n_points
    has_cl = cushion_limit_level is not None and cushion_limit_level > 1.0
    n_low_core = max(4, int(round(0.15 * n)))
    n_up_core = max(6, int(round(0.25 * n)))
    n_exp = max(5, int(round(0.08 * n))) if has_cl else 0
    n_anchor = 3  # 1 - gap, 1, 1 + gap
    rest = n - n_low_core - n_up_core - n_exp - n_anchor - 3  # bounds and core top
    if rest < 6:
        raise GridError(f"n_points={n_points} too small for the mandatory sections")
    n_low_tail = max(3, int(round(0.3 * rest)))
    n_up_tail = rest - n_low_tail

    below = _clustered(CORE_LOW, 1.0 - THRESHOLD_GAP, n_low_core, toward_b=True)[::-1]
    parts = [np.array([lower]), _stretched(CORE_LOW, lower, n_low_tail, below[1] - below[0])[::-1][1:],
             np.array([CORE_LOW]), below, np.array([1.0 - THRESHOLD_GAP, 1.0, 1.0 + THRESHOLD_GAP])]
    geometric_from = geometric_to = None
    top_of_exp = 1.0
    if has_cl:
        x_cl = float(cushion_limit_level)
        ratio = x_cl ** (1.0 / n_exp)
        exp_pts = ratio ** np.arange(1, n_exp + 1)
        exp_pts[-1] = x_cl
        parts.append(exp_pts)
        geometric_from, geometric_to = 1.0, x_cl
        top_of_exp = x_cl
    core_top = max(CORE_HIGH, top_of_exp * 1.2)
    # the cushion X - 1 evolves multiplicatively: geometric spacing in it
    c_lo = max(top_of_exp - 1.0, CUSHION_FLOOR)
    up_core = 1.0 + np.geomspace(c_lo, core_top - 1.0, n_up_core + 2)[1:-1]
    parts.append(up_core)
    parts.append(np.array([core_top]))
    first = core_top - up_core[-1]
    parts.append(_stretched(core_top, upper, n_up_tail + 1, first))
    g = np.concatenate(parts)
    for x in extra_anchors:
        if lower < x < upper and not np.any(np.isclose(g, x, rtol=0, atol=1e-12)):
            k = int(np.argmin(np.abs(g - x)))
            if g[k] not in (1.0, 1.0 - THRESHOLD_GAP, 1.0 + THRESHOLD_GAP, cushion_limit_level):
                g[k] = x
    g = np.unique(g)
    geometric = None
    if geometric_from is not None:
        geometric = (g[:-1] >= geometric_from) & (g[1:] <= geometric_to)
    seps = default_separators(g, geometric)
    j1 = int(np.searchsorted(g, 1.0))
    seps[j1 - 1] = 1.0  # mass at or below the threshold stays below it
    cl_index = int(np.searchsorted(g, cushion_limit_level)) if has_cl else None
    return StateGrid(g, seps, j1, cl_index)


def build_grid(spec, model, n_points: int = 500, eps: float = 1e-8, curve=None) -> StateGrid:
    """Grid for ``spec`` under ``model``; bounds from a lognormal cushion quantile."""
    from .product import RateCurve

    if not (0 < eps < 0.01):
        raise GridError("eps must lie in (0, 0.01)")
    curve = curve or RateCurve()
    x0 = spec.initial_state(curve)
    rule = spec.rule
    w_max = rule.max_weight
    horizon = spec.maturity
    lower, upper = grid_bounds(w_max, model.atm_volatility, horizon, x0 - 1.0, eps)
    if spec.lock_in is not None or spec.coupons is not None:
        upper = max(upper, 2.0 * x0)
    return make_grid(n_points, lower, upper, rule.cushion_limit_level)
