"""Contract and market description of a CPPI product.

Times are year fractions from the strategy start (ACT/365 when built from
calendar dates).  Rates and spreads are continuously compounded per year.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Sequence

import numpy as np


class ProductError(ValueError):
    """Inconsistent product or market description."""


def year_fraction(start: date, end: date) -> float:
    return (end - start).days / 365.0


@dataclass(frozen=True)
class RateCurve:
    """Zero-coupon curve: flat continuous ``rate`` or pillar discount factors.

    Pillars are ``(time, discount factor)`` pairs measured from the strategy
    start; log-discount factors are interpolated linearly, which means flat
    forward rates between pillars and flat extrapolation outside.
    """

    rate: float = 0.0
    pillar_times: tuple = ()
    pillar_discounts: tuple = ()

    def __post_init__(self):
        if not math.isfinite(self.rate):
            raise ProductError("rate must be finite")
        if len(self.pillar_times) != len(self.pillar_discounts):
            raise ProductError("pillar times and discount factors differ in length")
        if self.pillar_times:
            t = np.asarray(self.pillar_times, float)
            d = np.asarray(self.pillar_discounts, float)
            if np.any(np.diff(t) <= 0):
                raise ProductError("pillar times must be strictly increasing")
            if np.any(~(d > 0)):
                raise ProductError("discount factors must be positive")

    @classmethod
    def from_forward_rates(cls, times: Sequence[float], rates: Sequence[float]) -> "RateCurve":
        """Curve with piecewise-constant forward ``rates[k]`` on ``(times[k-1], times[k]]``."""
        t = np.asarray(times, float)
        r = np.asarray(rates, float)
        steps = np.diff(np.concatenate(([0.0], t)))
        logd = -np.cumsum(r * steps)
        return cls(rate=float(r[0]), pillar_times=(0.0, *t.tolist()), pillar_discounts=(1.0, *np.exp(logd).tolist()))

    def _log_discount(self, t):
        t = np.asarray(t, float)
        if not self.pillar_times:
            return -self.rate * t
        pt = np.asarray(self.pillar_times, float)
        ld = np.log(np.asarray(self.pillar_discounts, float))
        if len(pt) == 1:
            return ld[0] - self.rate * (t - pt[0])
        lo_slope = (ld[1] - ld[0]) / (pt[1] - pt[0])
        hi_slope = (ld[-1] - ld[-2]) / (pt[-1] - pt[-2])
        out = np.interp(t, pt, ld)
        out = np.where(t < pt[0], ld[0] + lo_slope * (t - pt[0]), out)
        return np.where(t > pt[-1], ld[-1] + hi_slope * (t - pt[-1]), out)

    def integral(self, t0, t1):
        """Integral of the short rate over ``[t0, t1]``."""
        return self._log_discount(t0) - self._log_discount(t1)

    def discount(self, t0, t1):
        return np.exp(-self.integral(t0, t1))


@dataclass(frozen=True)
class Fees:
    """Annual fee rates charged on the start-of-period value.

    ``fixed`` is a yearly amount expressed as a fraction of the guarantee.
    """

    proportional: float = 0.0
    defeasance: float = 0.0
    risky: float = 0.0
    fixed: float = 0.0

    @property
    def any(self) -> bool:
        return any((self.proportional, self.defeasance, self.risky, self.fixed))


@dataclass(frozen=True)
class ExposureRule:
    """Risky weighting w(x) = m ((x-1)/x)^+ with optional cap, floor and cushion limit."""

    multiplier: float
    max_exposure: float | None = None
    min_exposure: float | None = None
    cushion_limit: float | None = None

    def __post_init__(self):
        if not (self.multiplier > 0):
            raise ProductError(f"multiplier must be positive, got {self.multiplier!r}")
        if self.max_exposure is not None and self.max_exposure <= 0:
            raise ProductError("max_exposure must be positive")
        if self.min_exposure is not None and self.min_exposure < 0:
            raise ProductError("min_exposure must be non-negative")
        if (self.max_exposure is not None and self.min_exposure is not None
                and self.min_exposure > self.max_exposure):
            raise ProductError("min_exposure exceeds max_exposure")
        if self.cushion_limit is not None and not (0 <= self.cushion_limit < 1):
            raise ProductError("cushion_limit must lie in [0, 1)")

    @property
    def max_weight(self) -> float:
        top = self.multiplier
        if self.max_exposure is not None:
            top = min(top, self.max_exposure)
        if self.min_exposure is not None:
            top = max(top, self.min_exposure)
        return top

    @property
    def cushion_limit_level(self) -> float | None:
        if not self.cushion_limit:
            return None
        return 1.0 / (1.0 - self.cushion_limit)

    def __call__(self, x):
        return exposure(x, self)


def exposure(x, rule: ExposureRule):
    """Risky weighting as a function of the rescaled value ``x``.

    Non-positive values carry no exposure.  The floor applies to every
    positive value and the cushion limit overrides it.
    """
    x = np.asarray(x, dtype=float)
    return exposure_from_cushion(x - 1.0, rule)


def exposure_from_cushion(c, rule: ExposureRule):
    """Same weighting with the state given as the cushion c = x - 1 (keeps precision near x = 1)."""
    c = np.asarray(c, dtype=float)
    x = 1.0 + c
    pos = x > 0
    safe = np.where(pos, x, 1.0)
    cushion = np.where(pos, c / safe, 0.0)
    w = rule.multiplier * np.maximum(cushion, 0.0)
    if rule.max_exposure is not None:
        w = np.minimum(w, rule.max_exposure)
    if rule.min_exposure is not None:
        w = np.maximum(w, rule.min_exposure)
    if rule.cushion_limit:
        w = np.where(cushion < rule.cushion_limit, 0.0, w)
    w = np.where(pos, w, 0.0)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class CouponSchedule:
    """Coupons paid on rebalancing dates, given as schedule indices (1..n)."""

    dates: tuple
    participation: float = 0.0
    fixed_amount: float = 0.0

    def __post_init__(self):
        if not (0 <= self.participation < 1):
            raise ProductError("coupon participation must lie in [0, 1)")
        if any(d < 1 for d in self.dates):
            raise ProductError("coupon dates must be schedule indices >= 1")


@dataclass(frozen=True)
class LockInRule:
    """Guarantee ratchet.

    ``periodic`` locks a proportion of the performance since the previous
    lock-in date; ``continuous`` guarantees a proportion of the running
    maximum on every rebalancing date.  ``excess_only`` measures periodic
    performance in excess of the threshold accrual, so a lock-in never drives
    the cushion negative by itself.
    """

    proportion: float
    kind: str = "periodic"
    dates: tuple = ()
    excess_only: bool = False

    def __post_init__(self):
        if not (0 <= self.proportion <= 1):
            raise ProductError("lock-in proportion must lie in [0, 1]")
        if self.kind not in ("periodic", "continuous"):
            raise ProductError(f"unknown lock-in kind {self.kind!r}")
        if self.kind == "periodic" and any(d < 1 for d in self.dates):
            raise ProductError("lock-in dates must be schedule indices >= 1")

    @classmethod
    def every(cls, proportion: float, step: int, n_periods: int, **kw) -> "LockInRule":
        """Periodic lock-in every ``step`` periods, strictly before maturity."""
        return cls(proportion, "periodic", tuple(range(step, n_periods, step)), **kw)


@dataclass(frozen=True)
class ProductSpec:
    """A CPPI contract.

    ``times`` are the rebalancing dates t_0 = 0 < ... < t_n = T.  The
    threshold is the guarantee discounted at the risk-free rate plus
    ``spread_threshold``.
    """

    times: tuple
    multiplier: float = 4.0
    max_exposure: float | None = None
    min_exposure: float | None = None
    cushion_limit: float | None = None
    nominal: float = 1.0
    guarantee: float = 1.0
    initial_value: float = 1.0
    spread_plus: float = 0.0
    spread_minus: float = 0.0
    spread_threshold: float = 0.0
    fees: Fees = field(default_factory=Fees)
    coupons: CouponSchedule | None = None
    lock_in: LockInRule | None = None
    open_ended: bool = False
    start_date: date | None = None
    threshold_levels: tuple | None = None

    def __post_init__(self):
        t = np.asarray(self.times, float)
        if t.ndim != 1 or len(t) < 2:
            raise ProductError("schedule needs at least two dates")
        if abs(t[0]) > 1e-14 or np.any(np.diff(t) <= 0):
            raise ProductError("schedule times must start at 0 and increase strictly")
        if not (self.guarantee > 0 and self.nominal > 0 and self.initial_value > 0):
            raise ProductError("nominal, guarantee and initial value must be positive")
        self.rule  # validates exposure parameters
        if self.lock_in is not None and self.lock_in.kind == "periodic":
            if any(d > self.n_periods for d in self.lock_in.dates):
                raise ProductError("lock-in date beyond maturity")
        if self.coupons is not None and any(d > self.n_periods for d in self.coupons.dates):
            raise ProductError("coupon date beyond maturity")
        if self.threshold_levels is not None:
            h = np.asarray(self.threshold_levels, float)
            if h.shape != t.shape:
                raise ProductError("threshold_levels needs one level per schedule date")
            if np.any(~(h > 0)) or abs(h[-1] - 1.0) > 1e-12:
                raise ProductError("threshold levels must be positive and end at 1")

    @classmethod
    def regular(cls, n_periods: int, tau: float, **kw) -> "ProductSpec":
        return cls(times=tuple(np.arange(n_periods + 1) * tau), **kw)

    @classmethod
    def from_dates(cls, start: date, maturity: date, step_days: int = 7, **kw) -> "ProductSpec":
        """Rebalancing every ``step_days`` from ``start``; the last period ends at maturity."""
        total = (maturity - start).days
        if total <= 0:
            raise ProductError("maturity must follow the start date")
        days = list(range(0, total, step_days)) + [total]
        return cls(times=tuple(d / 365.0 for d in days), start_date=start, **kw)

    @property
    def rule(self) -> ExposureRule:
        return ExposureRule(self.multiplier, self.max_exposure, self.min_exposure, self.cushion_limit)

    @property
    def n_periods(self) -> int:
        return len(self.times) - 1

    @property
    def maturity(self) -> float:
        return float(self.times[-1])

    @property
    def taus(self) -> np.ndarray:
        return np.diff(np.asarray(self.times, float))

    def threshold_accrual(self, curve: RateCurve, t) -> np.ndarray:
        """H(t)/G: exp(-int_t^T (r + s_H)), or the explicit levels (log-linear between dates)."""
        t = np.asarray(t, float)
        if self.threshold_levels is not None:
            logh = np.log(np.asarray(self.threshold_levels, float))
            return np.exp(np.interp(t, np.asarray(self.times, float), logh))
        return np.exp(-curve.integral(t, self.maturity) - self.spread_threshold * (self.maturity - t))

    def period_threshold_spreads(self, curve: RateCurve) -> np.ndarray:
        """Per-period spread of the threshold growth over the risk-free rate."""
        t = np.asarray(self.times, float)
        if self.threshold_levels is None:
            return np.full(self.n_periods, float(self.spread_threshold))
        acc = np.log(self.threshold_accrual(curve, t))
        rates = curve.integral(t[:-1], t[1:])
        return (np.diff(acc) - rates) / np.diff(t)

    def initial_state(self, curve: RateCurve) -> float:
        """Rescaled value C_0 / H_0 at the strategy start."""
        return self.initial_value / (self.guarantee * float(self.threshold_accrual(curve, 0.0)))


@dataclass(frozen=True)
class Market:
    """Valuation state.  ``valuation_time`` is in years from the strategy start."""

    curve: RateCurve = field(default_factory=RateCurve)
    valuation_time: float = 0.0
    spot: float = 1.0
    spot_at_start: float = 1.0

    def __post_init__(self):
        if not (self.spot > 0 and self.spot_at_start > 0):
            raise ProductError("spot values must be positive")

    def forward_ratio(self) -> float:
        """F_t / F_0 for a valuation inside the first period."""
        if self.valuation_time <= 0:
            return 1.0
        return self.spot / self.spot_at_start * float(np.exp(-self.curve.integral(0.0, self.valuation_time)))

    def with_spot(self, spot: float) -> "Market":
        return Market(self.curve, self.valuation_time, spot, self.spot_at_start)
