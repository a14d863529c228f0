import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cppi_markov import Fees, ProcessModel, ProductSpec, RateCurve
from cppi_markov.grid import build_grid
from cppi_markov.kernel import (
    STENCIL_MAX_NEGATIVE, KernelError, PeriodTerms, build_period_matrix, build_rows, row_coefficients,
)
from cppi_markov.product import exposure

WEEK = 1 / 52
ZC = float(np.exp(-0.05 * WEEK))

CASES = {
    "bs": (ProcessModel("bs", 0.2), {}),
    "kou": (ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1), {}),
    "caps": (ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1), dict(max_exposure=1.5, min_exposure=0.05)),
    "cushion-limit": (ProcessModel("bs", 0.3), dict(cushion_limit=0.08)),
    "fees-spreads": (ProcessModel("bs", 0.2), dict(fees=Fees(0.01, 0.002, 0.003, 0.001), spread_plus=0.002,
                                                    spread_minus=0.01, max_exposure=2.0)),
}


def _setup(name, n=300):
    model, kw = CASES[name]
    spec = ProductSpec.regular(520, WEEK, multiplier=4, **kw)
    grid = build_grid(spec, model, n, curve=RateCurve(0.05))
    terms = PeriodTerms(WEEK, ZC, spec.spread_plus, spec.spread_minus, 0.0, spec.fees)
    return spec, model, grid, terms


@pytest.mark.parametrize("name", sorted(CASES))
def test_rows_sum_to_one(name):
    spec, model, grid, terms = _setup(name)
    m = build_period_matrix(grid, model.law(model.period_sigma(0), WEEK), spec.rule, terms)
    assert np.max(np.abs(m.row_sums() - 1.0)) < 1e-12
    assert m.entries.min() >= -STENCIL_MAX_NEGATIVE


def _row_targets(law, xs, a, b):
    k1 = (1.0 - b) / a
    p1, p2, p3 = law.p1(k1), law.p2(k1), law.p3(k1)
    m2_below = a * a * p3 + 2 * a * b * p2 + b * b * p1
    m2 = a * a * law.second_moment + 2 * a * b + b * b
    return p1, a * p2 + b * p1, m2_below, m2


@pytest.mark.parametrize("name", sorted(CASES))
def test_risky_rows_carry_exact_side_masses_and_means(name):
    spec, model, grid, terms = _setup(name, 500)
    law = model.law(model.period_sigma(0), WEEK)
    g, j1 = grid.points, grid.threshold_index
    xs = np.array([1.0001, 1.001, 1.01, 1.05, 1.3, 2.0, 5.0])
    w = exposure(xs, spec.rule)
    keep = w > 0
    xs, w = xs[keep], w[keep]
    rows = build_rows(xs, grid, law, spec.rule, terms)
    a, b = row_coefficients(xs, w, terms)
    p1, mean_below, _, _ = _row_targets(law, xs, a, b)
    assert np.allclose(rows[:, :j1].sum(axis=1), p1, rtol=1e-10, atol=1e-14)
    assert np.allclose(rows[:, :j1] @ g[:j1], mean_below, rtol=1e-10, atol=1e-14)
    assert np.allclose(rows @ g, a + b, rtol=1e-12)


@pytest.mark.parametrize("name", sorted(CASES))
def test_resolved_rows_carry_exact_second_moments(name):
    spec, model, grid, terms = _setup(name, 500)
    law = model.law(model.period_sigma(0), WEEK)
    g, j1 = grid.points, grid.threshold_index
    xs = np.array([1.3, 2.0, 5.0])
    rows = build_rows(xs, grid, law, spec.rule, terms)
    a, b = row_coefficients(xs, exposure(xs, spec.rule), terms)
    _, _, m2_below, m2 = _row_targets(law, xs, a, b)
    assert np.allclose(rows[:, :j1] @ g[:j1] ** 2, m2_below, rtol=1e-8, atol=1e-14)
    assert np.allclose(rows @ g**2, m2, rtol=1e-10)


def test_unresolved_rows_overstate_variance_by_at_most_the_cell_spread():
    spec, model, grid, terms = _setup("cushion-limit", 500)
    law = model.law(model.period_sigma(0), WEEK)
    g = grid.points
    xs = np.array([1.001, 1.01, 1.05])
    rows = build_rows(xs, grid, law, spec.rule, terms)
    a, b = row_coefficients(xs, exposure(xs, spec.rule), terms)
    var_target = a * a * (law.second_moment - 1.0)
    var_row = rows @ g**2 - (rows @ g) ** 2
    mean = a + b
    k = np.searchsorted(g, mean)
    spread = (g[k] - g[k - 1]) ** 2 / 4
    assert np.all(var_row >= var_target - 1e-15)
    assert np.all(var_row - var_target <= spread)


def _deterministic_rows_check(spec, grid, rows, xs, terms):
    g = grid.points
    w = exposure(xs, spec.rule)
    assert np.all(w == 0)
    _, b = row_coefficients(xs, w, terms)
    inside = (b > g[0]) & (b < g[-1])
    assert np.allclose(rows.sum(axis=1), 1.0, atol=1e-12)
    r, t = rows[inside], b[inside]
    scale = np.maximum(1.0, np.abs(t))
    assert np.all(np.abs(r @ g - t) <= 1e-12 * scale)
    var = np.einsum("ij,ij->i", r, (g[None, :] - t[:, None]) ** 2)
    assert np.all(np.abs(var) <= 1e-12 * scale**2)
    assert rows.min() >= -STENCIL_MAX_NEGATIVE


@pytest.mark.parametrize("name", sorted(CASES))
def test_deterministic_matrix_rows_are_exact_stencils(name):
    spec, model, grid, terms = _setup(name, 400)
    law = model.law(model.period_sigma(0), WEEK)
    g = grid.points
    xs = g[exposure(g, spec.rule) == 0]
    rows = build_rows(xs, grid, law, spec.rule, terms)
    _deterministic_rows_check(spec, grid, rows, xs, terms)


def _off_grid_check(grid, row, target):
    """Mean exact; variance zero or at most the two-point spread of the enclosing cell."""
    g = grid.points
    scale = max(1.0, abs(target))
    assert abs(row.sum() - 1.0) < 1e-12
    assert abs(row @ g - target) <= 1e-12 * scale
    var = row @ (g - target) ** 2
    k = int(np.clip(np.searchsorted(g, target), 1, g.size - 1))
    u = (target - g[k - 1]) / (g[k] - g[k - 1])
    assert -1e-12 * scale**2 <= var <= u * (1 - u) * (g[k] - g[k - 1]) ** 2 + 1e-12 * scale**2
    assert row.min() >= -STENCIL_MAX_NEGATIVE


def test_deterministic_off_grid_rows():
    spec, model, grid, terms = _setup("fees-spreads", 400)
    xs = np.array([-3.0, -0.5, 0.0, 0.3, 0.9, 0.99999, 1.0])
    rows = build_rows(xs, grid, model.law(0.2, WEEK), spec.rule, terms)
    _, b = row_coefficients(xs, np.zeros_like(xs), terms)
    for row, t in zip(rows, b):
        _off_grid_check(grid, row, t)


@settings(max_examples=40, deadline=None)
@given(st.floats(-50.0, 1.0))
def test_deterministic_row_property(x):
    spec, model, grid, terms = _setup("bs", 200)
    rows = build_rows([x], grid, model.law(0.2, WEEK), spec.rule, terms)
    _, b = row_coefficients(np.array([x]), np.array([0.0]), terms)
    _off_grid_check(grid, rows[0], b[0])


def test_without_moment_control_rows_still_sum_to_one():
    spec, model, grid, terms = _setup("bs")
    m = build_period_matrix(grid, model.law(0.2, WEEK), spec.rule, terms, moment_control=False)
    assert np.max(np.abs(m.row_sums() - 1.0)) < 1e-12


def test_affine_coefficients_of_plain_period():
    terms = PeriodTerms(WEEK, ZC)
    a, b = row_coefficients(np.array([1.4]), np.array([0.5]), terms)
    assert a[0] == pytest.approx(0.7)
    assert b[0] == pytest.approx(0.7)


def test_invalid_period_terms():
    with pytest.raises(KernelError):
        PeriodTerms(0.0)
    with pytest.raises(KernelError):
        PeriodTerms(WEEK, -1.0)
