"""One-period transition matrices for the rescaled CPPI value.

Over one period the end value is affine in the gross forward return F:
``X' = a F + b`` with ``a`` and ``b`` depending on the start value, the
weighting and the period terms.  Rows with a positive weighting are filled
with bin probabilities of that affine law and then corrected so that, on
each side of the threshold, the row carries the exact probability, mean and
variance.  Rows without risky exposure are deterministic and use a five-point
stencil with small negative weights that keeps both mean and variance exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .grid import StateGrid
from .models import ReturnLaw
from .product import ExposureRule, Fees, exposure

STENCIL_ALPHA = 0.1
STENCIL_MAX_NEGATIVE = 0.05
SEGMENT_MASS_FLOOR = 1e-13


class KernelError(ArithmeticError):
    """Non-finite or otherwise unusable transition probabilities."""


@dataclass(frozen=True)
class PeriodTerms:
    """Deterministic inputs of one rebalancing period.

    ``zc_ratio`` is exp(-int r) over the period.  ``guarantee_over_threshold``
    converts fixed fees into rescaled units.  ``forward_ratio`` is F_t/F_0 when
    the period has already started at valuation.
    """

    tau: float
    zc_ratio: float = 1.0
    spread_plus: float = 0.0
    spread_minus: float = 0.0
    spread_threshold: float = 0.0
    fees: Fees = field(default_factory=Fees)
    guarantee_over_threshold: float = 1.0
    forward_ratio: float = 1.0

    def __post_init__(self):
        if not (self.tau > 0):
            raise KernelError("period length must be positive")
        if not (0 < self.zc_ratio <= 1 + 1e-12) and self.zc_ratio <= 0:
            raise KernelError("zero-coupon ratio must be positive")

    def key(self) -> tuple:
        return (self.tau, self.zc_ratio, self.spread_plus, self.spread_minus, self.spread_threshold,
                self.fees, self.guarantee_over_threshold, self.forward_ratio)


def row_coefficients(x, w, terms: PeriodTerms):
    """Coefficients (a, b) of X' = a F + b for start value ``x`` and weighting ``w``."""
    x = np.asarray(x, float)
    w = np.asarray(w, float)
    tau = terms.tau
    f = terms.fees
    eh = math.exp(-terms.spread_threshold * tau)
    spread = np.where(w <= 1.0, terms.spread_plus, terms.spread_minus)
    fee_rate = f.proportional * (w > 0) + f.defeasance * (w == 0) + f.risky * w
    fee_x = tau * (fee_rate * np.maximum(x, 0.0) + f.fixed * terms.guarantee_over_threshold)
    a = eh * w * x * terms.forward_ratio
    b = eh * ((1.0 - w) * x * np.exp(spread * tau) - terms.zc_ratio * fee_x)
    return a, b


def level_function(x: float, y, w: float, terms: PeriodTerms):
    """Gross-return strike L(x, y) such that X' <= y exactly when F <= L."""
    if not (w > 0) or not (x > 0):
        raise KernelError("the level function needs a positive weighting and start value")
    a, b = row_coefficients(x, w, terms)
    return (np.asarray(y, float) - b) / a


def analytic_row_moments(x: float, law: ReturnLaw, rule: ExposureRule, terms: PeriodTerms) -> tuple[float, float]:
    """Mean and variance of X' given X = x."""
    w = exposure(x, rule)
    a, b = row_coefficients(x, w, terms)
    a, b = float(a), float(b)
    if a == 0:
        return b, 0.0
    return a + b, a * a * (law.second_moment - 1.0)


@dataclass(frozen=True)
class TransitionMatrix:
    entries: np.ndarray
    grid: StateGrid = field(repr=False)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def row_sums(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.entries @ values

    def __matmul__(self, other):
        if isinstance(other, TransitionMatrix):
            return TransitionMatrix(self.entries @ other.entries, self.grid)
        return self.entries @ other


# ---------------------------------------------------------------------------
# moment control on one segment of one row


@njit(cache=True)
def _shift_mean(q, g, lo, hi, target):
    """Move fractions of mass one point up or down until sum q g = target."""
    if hi <= lo:
        return
    for _ in range(200):
        cur = 0.0
        size = 0.0
        for l in range(lo, hi + 1):
            cur += q[l] * g[l]
            size += q[l] * abs(g[l])
        delta = target - cur
        if abs(delta) <= 1e-15 * size + 1e-300:
            return
        if delta > 0:
            d = 0.0
            for l in range(lo, hi):
                d += q[l] * (g[l + 1] - g[l])
            if d <= 0:
                return
            theta = min(1.0, delta / d)
            for l in range(hi - 1, lo - 1, -1):
                m = theta * q[l]
                q[l] -= m
                q[l + 1] += m
        else:
            d = 0.0
            for l in range(lo + 1, hi + 1):
                d += q[l] * (g[l] - g[l - 1])
            if d <= 0:
                return
            theta = min(1.0, -delta / d)
            for l in range(lo + 1, hi + 1):
                m = theta * q[l]
                q[l] -= m
                q[l - 1] += m


@njit(cache=True)
def _fix_variance(q, g, lo, hi, mu, var_target):
    """Mean-preserving spread or contraction of the segment masses."""
    if hi <= lo:
        return
    mass = 0.0
    for l in range(lo, hi + 1):
        mass += q[l]
    target = var_target * mass
    q0 = np.empty(hi - lo + 1)
    for _ in range(200):
        cur = 0.0
        for l in range(lo, hi + 1):
            cur += q[l] * (g[l] - mu) ** 2
        dv = target - cur
        if abs(dv) <= 1e-13 * max(target, cur) + 1e-300:
            return
        if dv > 0:
            # local mean-preserving spread of interior points to both neighbours
            gain = 0.0
            for l in range(lo + 1, hi):
                gain += q[l] * (g[l + 1] - g[l]) * (g[l] - g[l - 1])
            if gain <= 0:
                return
            phi = min(1.0, dv / gain)
            for l in range(lo, hi + 1):
                q0[l - lo] = q[l]
            for l in range(lo + 1, hi):
                up = g[l + 1] - g[l]
                dn = g[l] - g[l - 1]
                m = phi * q0[l - lo]
                q[l] -= m
                q[l + 1] += m * dn / (up + dn)
                q[l - 1] += m * up / (up + dn)
            if phi < 1.0:
                return
        else:
            a1 = 0.0
            a2 = 0.0
            b1 = 0.0
            b2 = 0.0
            for l in range(lo, hi + 1):
                if g[l] > mu and l > lo:
                    a1 += q[l] * (g[l] - g[l - 1])
                    a2 += q[l] * ((g[l] - mu) ** 2 - (g[l - 1] - mu) ** 2)
                elif g[l] < mu and l < hi:
                    b1 += q[l] * (g[l + 1] - g[l])
                    b2 += q[l] * ((g[l] - mu) ** 2 - (g[l + 1] - mu) ** 2)
            if a1 <= 0 or b1 <= 0:
                return
            ratio = a1 / b1
            red = a2 + ratio * b2
            if red <= 0:
                return
            pa = -dv / red
            pb = pa * ratio
            s = max(pa, pb)
            if s > 1.0:
                pa /= s
                pb /= s
            for l in range(lo, hi + 1):
                q0[l - lo] = q[l]
            for l in range(lo, hi + 1):
                if g[l] > mu and l > lo:
                    m = pa * q0[l - lo]
                    q[l] -= m
                    q[l - 1] += m
                elif g[l] < mu and l < hi:
                    m = pb * q0[l - lo]
                    q[l] -= m
                    q[l + 1] += m
            if s <= 1.0:
                return


@njit(cache=True)
def _stencil_indices(lo, hi, i, downward):
    """Five-point stencil around the cell (g[i-1], g[i]), far points downstream."""
    idx = np.empty(5, np.int64)
    if downward:
        if i - 3 < lo or i + 1 > hi:
            idx[0] = -1
            return idx
        idx[0] = i - 3
        idx[1] = i - 2
        idx[2] = i - 1
        idx[3] = i
        idx[4] = i + 1
    else:
        if i + 2 > hi or i - 2 < lo:
            idx[0] = -1
            return idx
        idx[0] = i + 2
        idx[1] = i + 1
        idx[2] = i
        idx[3] = i - 1
        idx[4] = i - 2
    return idx


@njit(cache=True)
def _subgrid_segment(q, g, lo, hi, mass, mu, var, start):
    """Replace the segment by a stencil when its variance is below the cell's two-point spread.

    Nonnegative weights cannot hold less variance than the split between the
    two points around the mean; that excess acts as numerical diffusion where
    the cushion is small and the dynamics are nearly a pure drift.
    """
    i = lo + 1
    while i <= hi and g[i] < mu:
        i += 1
    if i > hi or g[i - 1] >= mu or g[i] == mu:
        return False
    if var >= (g[i] - mu) * (mu - g[i - 1]):
        return False
    idx = _stencil_indices(lo, hi, i, mu < start)
    if idx[0] < 0:
        return False
    p, w = _solve_stencil(g, idx, mu, var, STENCIL_ALPHA, STENCIL_MAX_NEGATIVE)
    if p < 0:
        return False
    for l in range(lo, hi + 1):
        q[l] = 0.0
    q[idx[0]] += mass * STENCIL_ALPHA * w
    q[idx[1]] -= mass * w
    q[idx[2]] += mass * p
    q[idx[3]] += mass * (1 - p + (2 - STENCIL_ALPHA) * w)
    q[idx[4]] -= mass * w
    return True


@njit(cache=True)
def _control_segment(q, g, lo, hi, mass, mu, var, fix_var, start):
    if hi < lo:
        return
    cur = 0.0
    for l in range(lo, hi + 1):
        cur += q[l]
    if mass <= SEGMENT_MASS_FLOOR or cur <= 0:
        return
    if fix_var and g[lo] < mu < g[hi] and _subgrid_segment(q, g, lo, hi, mass, mu, max(var, 0.0), start):
        return
    # the bins already carry the exact segment mass; only rounding remains
    if cur != mass:
        for l in range(lo, hi + 1):
            q[l] *= mass / cur
    mu_c = min(max(mu, g[lo]), g[hi])
    _shift_mean(q, g, lo, hi, mass * mu_c)
    if fix_var and mu_c == mu:
        _fix_variance(q, g, lo, hi, mu, max(var, 0.0))
    for l in range(lo, hi + 1):
        if q[l] < 0:
            q[l] = 0.0


@njit(cache=True)
def _control_rows(P, g, j1, starts, center, mass_b, ey_b, ey2_b, mass_a, ey_a, ey2_a, fix_var):
    n_rows, n = P.shape
    for r in range(n_rows):
        q = P[r]
        if mass_b[r] > SEGMENT_MASS_FLOOR:
            mu = center[r] + ey_b[r] / mass_b[r]
            var = ey2_b[r] / mass_b[r] - (ey_b[r] / mass_b[r]) ** 2
            _control_segment(q, g, 0, j1 - 1, mass_b[r], mu, var, fix_var and mass_b[r] > 1e-10, starts[r])
        # X=1 itself carries no exposure; mass strictly above it starts at 1 + gap
        q[j1 + 1] += q[j1]
        q[j1] = 0.0
        if mass_a[r] > SEGMENT_MASS_FLOOR:
            mu = center[r] + ey_a[r] / mass_a[r]
            var = ey2_a[r] / mass_a[r] - (ey_a[r] / mass_a[r]) ** 2
            _control_segment(q, g, j1 + 1, n - 1, mass_a[r], mu, var, fix_var and mass_a[r] > 1e-10, starts[r])


# ---------------------------------------------------------------------------
# deterministic rows


@njit(cache=True)
def _solve_stencil(g, idx, target, var_target, alpha, qmax):
    """Weights (p, q) of the five-point stencil on indices ``idx`` or (-1, -1).

    idx = (far, second, near, anchor, opposite); weights
    (alpha q, -q, p, 1 - p + (2 - alpha) q, -q).
    """
    d_far = g[idx[0]] - target
    d_sec = g[idx[1]] - target
    d_near = g[idx[2]] - target
    d_anc = g[idx[3]] - target
    d_opp = g[idx[4]] - target
    c1 = alpha * d_far - d_sec + (2 - alpha) * d_anc - d_opp
    c2 = alpha * d_far**2 - d_sec**2 + (2 - alpha) * d_anc**2 - d_opp**2
    e1 = d_near - d_anc
    e2 = d_near**2 - d_anc**2
    r1 = -d_anc
    r2 = var_target - d_anc**2
    det = e1 * c2 - c1 * e2
    if det == 0.0 or e1 == 0.0:
        return -1.0, -1.0
    p = (r1 * c2 - c1 * r2) / det
    q = (e1 * r2 - e2 * r1) / det
    if q < 0:
        return -1.0, -1.0
    if q > qmax:
        q = qmax
        p = (r1 - q * c1) / e1
    if p < 0 or p > 1 or 1 - p + (2 - alpha) * q < 0:
        return -1.0, -1.0
    return p, q


@njit(cache=True)
def _deterministic_row(row, g, j1, start, target, alpha, qmax):
    """Fill ``row`` for a move from ``start`` to ``target`` with no randomness."""
    n = g.shape[0]
    for l in range(n):
        row[l] = 0.0
    if abs(target - 1.0) <= 1e-14:
        row[j1] = 1.0
        return 0
    if target < 1.0:
        lo, hi = 0, j1 - 1
    else:
        lo, hi = j1 + 1, n - 1
    if target <= g[lo]:
        row[lo] = 1.0
        return 1
    if target >= g[hi]:
        row[hi] = 1.0
        return 1 if target > g[n - 1] else 0
    i = lo + 1
    while g[i] < target:
        i += 1
    tol = 1e-14 * max(1.0, abs(target))
    if abs(g[i] - target) <= tol:
        row[i] = 1.0
        return 0
    if abs(g[i - 1] - target) <= tol:
        row[i - 1] = 1.0
        return 0
    idx = np.empty(5, np.int64)
    ok = False
    if target < start:
        if i - 3 >= lo and i + 1 <= hi:
            idx[0] = i - 3
            idx[1] = i - 2
            idx[2] = i - 1
            idx[3] = i
            idx[4] = i + 1
            ok = True
    else:
        if i + 2 <= hi and i - 2 >= lo:
            idx[0] = i + 2
            idx[1] = i + 1
            idx[2] = i
            idx[3] = i - 1
            idx[4] = i - 2
            ok = True
    if ok:
        p, q = _solve_stencil(g, idx, target, 0.0, alpha, qmax)
        if p >= 0:
            row[idx[0]] += alpha * q
            row[idx[1]] -= q
            row[idx[2]] += p
            row[idx[3]] += 1 - p + (2 - alpha) * q
            row[idx[4]] -= q
            return 0
    # three-point Lagrange weights keep mean and zero variance when the
    # five-point stencil does not fit (grid ends, next to the threshold)
    best = -1.0e300
    best_k = -1
    for k0 in (i - 2, i - 1):
        if k0 < lo or k0 + 2 > hi:
            continue
        wmin = 0.0
        for a in range(3):
            w = 1.0
            for c in range(3):
                if c != a:
                    w *= (target - g[k0 + c]) / (g[k0 + a] - g[k0 + c])
            wmin = min(wmin, w)
        if wmin > best:
            best = wmin
            best_k = k0
    if best_k >= 0 and best >= -qmax:
        for a in range(3):
            w = 1.0
            for c in range(3):
                if c != a:
                    w *= (target - g[best_k + c]) / (g[best_k + a] - g[best_k + c])
            row[best_k + a] += w
        return 0
    u = (target - g[i - 1]) / (g[i] - g[i - 1])
    row[i - 1] = 1 - u
    row[i] = u
    return 0


@njit(cache=True)
def _deterministic_rows(out, rows, g, j1, starts, targets, alpha, qmax):
    clamped = 0
    for k in range(rows.shape[0]):
        clamped += _deterministic_row(out[rows[k]], g, j1, starts[k], targets[k], alpha, qmax)
    return clamped


# ---------------------------------------------------------------------------


def build_rows(xs, grid: StateGrid, law: ReturnLaw, rule: ExposureRule, terms: PeriodTerms,
               moment_control: bool = True, weights=None) -> np.ndarray:
    """Transition rows from arbitrary start values ``xs`` onto ``grid``.

    ``weights`` overrides the exposure rule (one risky weighting per start value).
    """
    xs = np.atleast_1d(np.asarray(xs, float))
    g = grid.points
    n = g.size
    j1 = grid.threshold_index
    if weights is None:
        w = np.atleast_1d(exposure(xs, rule))
    else:
        w = np.broadcast_to(np.asarray(weights, float), xs.shape).copy()
        if np.any(w < 0):
            raise KernelError("risky weightings must be non-negative")
    a, b = row_coefficients(xs, w, terms)
    out = np.zeros((xs.size, n))
    active = np.nonzero(a > 0)[0]
    if active.size:
        aa = a[active][:, None]
        bb = b[active][:, None]
        cdf = law.p1((grid.separators[None, :] - bb) / aa)
        P = np.diff(cdf, axis=1, prepend=0.0, append=1.0)
        aa = aa[:, 0]
        bb = bb[:, 0]
        k1 = (1.0 - bb) / aa
        p1 = law.p1(k1)
        p2 = law.p2(k1)
        ey_b = aa * (p2 - p1)
        ey_a = -ey_b
        mass_a = 1.0 - p1
        fix_var = bool(law.has_second_moment)
        if fix_var:
            p3 = law.p3(k1)
            ey2_b = aa * aa * (p3 - 2 * p2 + p1)
            ey2_a = aa * aa * (law.second_moment - 1.0) - ey2_b
        else:
            ey2_b = ey2_a = np.zeros_like(p1)
        if moment_control:
            _control_rows(P, g, j1, xs[active], aa + bb, p1, ey_b, ey2_b, mass_a, ey_a, ey2_a, fix_var)
        if not np.all(np.isfinite(P)):
            raise KernelError("non-finite transition probabilities")
        out[active] = P
    idle = np.nonzero(~(a > 0))[0]
    if idle.size:
        _deterministic_rows(out, idle, g, j1, xs[idle], b[idle], STENCIL_ALPHA, STENCIL_MAX_NEGATIVE)
    return out


def build_period_matrix(grid: StateGrid, law: ReturnLaw, rule: ExposureRule, terms: PeriodTerms,
                        moment_control: bool = True) -> TransitionMatrix:
    """Discretized one-period kernel on ``grid``."""
    return TransitionMatrix(build_rows(grid.points, grid, law, rule, terms, moment_control), grid)
