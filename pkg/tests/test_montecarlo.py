import itertools
import math

import numpy as np
import pytest

from cppi_markov import LockInRule, Market, McConfig, Payoff, ProcessModel, ProductSpec, RateCurve, price
from cppi_markov.montecarlo import McError, bridge_increments, bridge_plan, mc_price, path_outcomes
from cppi_markov.operators import schedule_periods

R = 0.05
TAU = 0.25


def hand_recursion(forward_growths, m, r, tau, guarantee=1.0, value=1.0, w_max=None, lock=0.0, lock_dates=()):
    """Portfolio value and guarantee, written directly in currency units.

    Growths are measured against the zero-coupon bond, so the risky asset
    returns F exp(r tau) in currency over a period.
    """
    n = len(forward_growths)
    T = n * tau
    g, v = guarantee, value
    v_ref = value
    for i, f in enumerate(forward_growths):
        floor = g * math.exp(-r * (T - i * tau))
        e = m * max(v - floor, 0.0)
        if w_max is not None:
            e = min(e, w_max * v)
        v = (e * f + (v - e)) * math.exp(r * tau)
        if i + 1 in lock_dates:
            g = g * (1 + lock * max(v - v_ref, 0.0) / g)
            v_ref = v
    return v, g


@pytest.mark.parametrize("kw, hand", [
    (dict(multiplier=4), dict(m=4)),
    (dict(multiplier=6, max_exposure=1.5), dict(m=6, w_max=1.5)),
    (dict(multiplier=4, lock_in=LockInRule(0.5, "periodic", (1, 2))), dict(m=4, lock=0.5, lock_dates=(1, 2))),
])
def test_exhaustive_two_outcome_paths_match_enumeration(kw, hand):
    up, down, p_up = 1.3, 0.65, 0.4
    spec = ProductSpec.regular(3, TAU, **kw)
    market = Market(RateCurve(R))
    periods = schedule_periods(spec, ProcessModel("bs", 0.2), market.curve)
    paths = np.array(list(itertools.product((up, down), repeat=3)))
    probs = np.prod(np.where(paths == up, p_up, 1 - p_up), axis=1)
    pay, below, loss, _ = path_outcomes(spec, market, periods, paths, Payoff("put"), "initial")
    expect_put = expect_gap = expect_loss = 0.0
    for path, prob in zip(paths, probs):
        value, g = hand_recursion(path, r=R, tau=TAU, **hand)
        expect_put += prob * max(g - value, 0.0)
        expect_gap += prob * (value < 1.0)
        expect_loss += prob * max(1.0 - value, 0.0)
    assert expect_gap > 0
    assert probs @ pay == pytest.approx(expect_put, rel=1e-12, abs=1e-15)
    assert probs @ below == pytest.approx(expect_gap, abs=1e-15)
    assert probs @ loss == pytest.approx(expect_loss, rel=1e-12, abs=1e-15)


def test_lock_in_guarantee_follows_enumeration():
    spec = ProductSpec.regular(3, TAU, multiplier=4, lock_in=LockInRule(0.5, "periodic", (1, 2)))
    market = Market(RateCurve(R))
    periods = schedule_periods(spec, ProcessModel("bs", 0.2), market.curve)
    path = np.array([[1.2, 1.1, 0.9]])
    pay, _, _, _ = path_outcomes(spec, market, periods, path, Payoff("strategy"))
    value, g = hand_recursion(path[0], m=4, r=R, tau=TAU, lock=0.5, lock_dates=(1, 2))
    assert pay[0] == pytest.approx(value, rel=1e-12)
    guaranteed, _, _, _ = path_outcomes(spec, market, periods, path, Payoff("guaranteed"))
    assert guaranteed[0] == pytest.approx(max(value, g), rel=1e-12)


def test_zero_volatility_gives_the_deterministic_forward():
    spec = ProductSpec.regular(52, 1 / 52, multiplier=4, initial_value=1.1)
    market = Market(RateCurve(R))
    res = mc_price(spec, ProcessModel("bs", 1e-12), market, Payoff("strategy"),
                   McConfig(n_paths=1, sampler="pseudo"))
    assert res.price == pytest.approx(1.1, rel=1e-10)
    put = mc_price(spec, ProcessModel("bs", 1e-12), market, Payoff("put"), McConfig(n_paths=1, sampler="pseudo"))
    assert put.price == 0.0 and put.gap_proportion == 0.0


def test_standard_error_scales_like_inverse_root_paths():
    spec = ProductSpec.regular(52, 1 / 52, multiplier=4)
    model, market = ProcessModel("bs", 0.3), Market(RateCurve(R))
    small = mc_price(spec, model, market, Payoff("call"), McConfig(n_paths=10_000, sampler="pseudo", seed=1))
    large = mc_price(spec, model, market, Payoff("call"), McConfig(n_paths=160_000, sampler="pseudo", seed=2))
    assert small.price_se / large.price_se == pytest.approx(4.0, rel=0.15)


def test_sobol_and_pseudo_agree_with_markov_engine_on_a_call():
    spec = ProductSpec.regular(52, 1 / 52, multiplier=4)
    model, market = ProcessModel("bs", 0.3), Market(RateCurve(R))
    engine = price(spec, model, market, Payoff("call"), n_points=400, greeks=False).price
    for sampler in ("sobol", "pseudo"):
        res = mc_price(spec, model, market, Payoff("call"), McConfig(n_paths=65_536, sampler=sampler, seed=3))
        assert abs(res.price - engine) < 4 * res.price_se


def test_kou_gap_agrees_with_markov_engine():
    spec = ProductSpec.regular(520, 1 / 52, multiplier=4)
    model, market = ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1), Market(RateCurve(R))
    engine = price(spec, model, market, n_points=500, greeks=False)
    res = mc_price(spec, model, market, config=McConfig(n_paths=100_000, sampler="pseudo", seed=4))
    assert abs(res.gap_proportion - engine.gap_proportion) < 3 * res.gap_se


def test_same_seed_same_result():
    spec = ProductSpec.regular(26, 1 / 52, multiplier=4)
    model, market = ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1), Market(RateCurve(R))
    cfg = McConfig(n_paths=5_000, seed=9)
    assert mc_price(spec, model, market, config=cfg) == mc_price(spec, model, market, config=cfg)


def test_bridge_reproduces_increment_variances():
    variances = np.array([0.5, 0.1, 0.3, 0.2, 0.4])
    plan = bridge_plan(variances)
    rng = np.random.default_rng(0)
    z = rng.standard_normal((200_000, 5))
    inc = bridge_increments(z, plan, 5)
    assert np.allclose(inc.var(axis=0), variances, rtol=0.02)
    cov = np.cov(inc.T)
    assert np.max(np.abs(cov - np.diag(np.diag(cov)))) < 0.01


def test_unsupported_requests():
    with pytest.raises(McError):
        McConfig(n_paths=0)
    with pytest.raises(McError):
        McConfig(sampler="halton")
    open_spec = ProductSpec.regular(10, 0.1, open_ended=True)
    with pytest.raises(McError):
        mc_price(open_spec, ProcessModel("bs", 0.2), Market(RateCurve(R)))
