import math

import pytest

from cppi_markov import Fees, Market, ProcessModel, ProductSpec, RateCurve
from cppi_markov.closed_form import (
    VanillaSpec, gap_proportion, local_shortfall, survival_factor, vanilla_gap_midperiod, vanilla_put,
    vanilla_put_midperiod, vanilla_reference,
)
from cppi_markov.models import LognormalLaw

WEEK = 1 / 52


def oracle_greeks(spec, model, market, h=1e-4, dsigma=1e-6):
    def put(m, mk):
        return vanilla_reference(spec, m, mk)[0]

    s = market.spot
    delta = (put(model, market.with_spot(s * (1 + h))) - put(model, market.with_spot(s * (1 - h)))) / (2 * s * h)
    sig = model.sigma
    vega = (put(ProcessModel("bs", sig + dsigma), market) - put(ProcessModel("bs", sig - dsigma), market)) / (2 * dsigma)
    return delta, vega * 0.01


def test_benchmark_reproduced_to_printed_precision(vanilla):
    spec, model, market = vanilla
    put, gap = vanilla_reference(spec, model, market)
    delta, vega = oracle_greeks(spec, model, market)
    assert round(put, 4) == 170.5530
    assert round(delta, 4) == 0.2177
    assert round(gap, 7) == 0.0097989


def test_benchmark_vega_to_printed_precision(vanilla):
    # exact derivative is 68.25486; the reference value sits 6.4e-6 (relative) higher
    spec, model, market = vanilla
    _, vega = oracle_greeks(spec, model, market)
    assert round(vega, 4) == 68.2553


def test_midperiod_formula_reduces_to_start_formula():
    law = LognormalLaw(0.3, WEEK)
    vs = VanillaSpec(4, 52, WEEK, 1.05)
    assert vanilla_put_midperiod(vs, law, 1.0) == pytest.approx(vanilla_put(vs, law), rel=1e-14)
    assert vanilla_gap_midperiod(vs, law, 1.0) == pytest.approx(gap_proportion(law, 4, 52), rel=1e-14)


def test_no_cushion_means_no_protection():
    law = LognormalLaw(0.3, WEEK)
    assert vanilla_put(VanillaSpec(4, 52, WEEK, 0.9), law) == pytest.approx(0.1)
    assert vanilla_gap_midperiod(VanillaSpec(4, 52, WEEK, 1.0), law, 1.0) == 1.0


def test_unit_multiplier_never_gaps():
    law = LognormalLaw(0.3, WEEK)
    assert local_shortfall(law, 1.0) == 0.0
    assert survival_factor(law, 1.0) == 1.0
    assert vanilla_put(VanillaSpec(1, 52, WEEK, 1.05), law) == 0.0


def test_survival_factor_is_expected_cushion_growth():
    # E[(m F - m + 1)^+] for a lognormal forward, by direct quadrature
    from scipy import integrate, stats

    sigma, m = 0.4, 5.0
    law = LognormalLaw(sigma, WEEK)
    dist = stats.lognorm(s=sigma * math.sqrt(WEEK), scale=math.exp(-0.5 * sigma**2 * WEEK))
    k = (m - 1) / m
    expect, _ = integrate.quad(lambda f: (m * f - m + 1) * dist.pdf(f), k, 5.0, epsabs=1e-14)
    assert survival_factor(law, m) == pytest.approx(expect, abs=1e-12)


def test_reference_rejects_products_outside_its_scope():
    model, mk = ProcessModel("bs", 0.2), Market(RateCurve(0.05))
    for kw in (dict(max_exposure=2.0), dict(fees=Fees(0.01)), dict(spread_threshold=0.01)):
        with pytest.raises(ValueError):
            vanilla_reference(ProductSpec.regular(10, 0.1, **kw), model, mk)
    with pytest.raises(ValueError):
        vanilla_reference(ProductSpec.regular(10, 0.1), ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1), mk)
