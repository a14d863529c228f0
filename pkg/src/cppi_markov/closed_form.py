"""Exact formulas for a vanilla CPPI (no spreads, fees, caps or lock-ins).

With the standard exposure and equally spaced rebalancing, the cushion
X - 1 is multiplied each period by m F + 1 - m while it stays positive and is
frozen once it is not.  Every quantity below follows from one-period
expectations of the gross forward return at the strike (m - 1)/m.

All prices are undiscounted (payable at maturity) and in guarantee units
times ``guarantee``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .models import ReturnLaw


@dataclass(frozen=True)
class VanillaSpec:
    multiplier: float
    n_periods: int
    tau: float
    x0: float
    guarantee: float = 1.0

    def __post_init__(self):
        if self.multiplier <= 0 or self.n_periods < 1 or self.tau <= 0:
            raise ValueError("invalid vanilla specification")


def _strike(m: float) -> float:
    return (m - 1.0) / m


def local_shortfall(law: ReturnLaw, m: float) -> float:
    """Probability that one period ends below the threshold when it started above."""
    if m <= 1:
        return 0.0
    return float(law.p1(_strike(m)))


def gap_proportion(law: ReturnLaw, m: float, n_periods: int) -> float:
    return 1.0 - (1.0 - local_shortfall(law, m)) ** n_periods


def survival_factor(law: ReturnLaw, m: float) -> float:
    """A = E[(m F - m + 1) 1{F > (m-1)/m}]."""
    if m <= 1:
        return 1.0
    k = _strike(m)
    b = m * float(law.p2(k)) + (1.0 - m) * float(law.p1(k))
    return 1.0 - b


def vanilla_put(spec: VanillaSpec, law: ReturnLaw) -> float:
    """Put on the strategy struck at the guarantee, valued at the start."""
    if spec.x0 <= 1:
        return spec.guarantee * (1.0 - spec.x0)
    a = survival_factor(law, spec.multiplier)
    return spec.guarantee * (1.0 - spec.x0) * (1.0 - a**spec.n_periods)


def vanilla_put_midperiod(spec: VanillaSpec, law: ReturnLaw, forward_ratio: float,
                          first_law: ReturnLaw | None = None) -> float:
    """Put valued inside the first period.

    ``forward_ratio`` is F_t/F_0 and ``first_law`` the return law over the
    remainder of the first period (``law`` when the period has not started).
    """
    first_law = first_law or law
    m, x0, g = spec.multiplier, spec.x0, spec.guarantee
    if x0 <= 1:
        return g * (1.0 - x0)
    w0 = m * (x0 - 1.0) / x0
    k = _strike(m) / forward_ratio
    p1 = float(first_law.p1(k))
    p2 = float(first_law.p2(k))
    below = p1 - w0 * x0 * forward_ratio * p2 - (1.0 - w0) * x0 * p1
    total = 1.0 - w0 * x0 * forward_ratio - (1.0 - w0) * x0
    a = survival_factor(law, m)
    rest = a ** (spec.n_periods - 1)
    return g * (below * rest + total * (1.0 - rest))


def vanilla_gap_midperiod(spec: VanillaSpec, law: ReturnLaw, forward_ratio: float,
                          first_law: ReturnLaw | None = None) -> float:
    """Probability of ending below the guarantee, valued inside the first period."""
    first_law = first_law or law
    if spec.x0 <= 1:
        return 1.0
    first = float(first_law.p1(_strike(spec.multiplier) / forward_ratio)) if spec.multiplier > 1 else 0.0
    return 1.0 - (1.0 - first) * (1.0 - local_shortfall(law, spec.multiplier)) ** (spec.n_periods - 1)


def vanilla_reference(spec, model, market) -> tuple[float, float]:
    """Discounted put price and gap proportion for a plain product.

    Accepts a ``ProductSpec`` with equal periods, a flat rate, constant
    Black-Scholes volatility and no caps, spreads, fees or features; anything
    else raises ``ValueError``.
    """
    import math

    import numpy as np

    from .models import LognormalLaw

    taus = spec.taus
    plain = (
        model.kind == "bs" and np.ndim(model.sigma) == 0 and not market.curve.pillar_times
        and np.allclose(taus, taus[0], rtol=1e-12, atol=0.0)
        and spec.max_exposure is None and spec.min_exposure is None and spec.cushion_limit is None
        and spec.spread_plus == 0 and spec.spread_minus == 0 and spec.spread_threshold == 0
        and spec.threshold_levels is None and not spec.fees.any
        and spec.coupons is None and spec.lock_in is None and not spec.open_ended
    )
    if not plain:
        raise ValueError("closed forms cover only the plain Black-Scholes product")
    tau, tv, sigma = float(taus[0]), market.valuation_time, float(model.sigma)
    if tv >= tau:
        raise ValueError("closed forms need the valuation time inside the first period")
    vs = VanillaSpec(spec.multiplier, spec.n_periods, tau, spec.initial_state(market.curve))
    law = LognormalLaw(sigma, tau)
    first = LognormalLaw(sigma, tau - tv) if tv > 0 else law
    fr = market.forward_ratio()
    disc = math.exp(-market.curve.integral(tv, spec.maturity))
    put = spec.guarantee * disc * vanilla_put_midperiod(vs, law, fr, first)
    return put, vanilla_gap_midperiod(vs, law, fr, first)
