import warnings
from datetime import date

import pytest

from cppi_markov import Market, ProcessModel, ProductSpec, RateCurve


@pytest.fixture(autouse=True)
def _quiet_heavy_tail_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="eta_plus >= 1/2")
        yield


@pytest.fixture(scope="session")
def vanilla():
    """Weekly product over ten years, valued four days in with the spot below its start fixing."""
    spec = ProductSpec.from_dates(date(2008, 11, 12), date(2018, 11, 7), multiplier=4,
                                  nominal=1e6, guarantee=1e6, initial_value=1e6)
    market = Market(RateCurve(0.05), 4 / 365, 3190.0, 3207.0)
    return spec, ProcessModel("bs", 0.5), market


@pytest.fixture(scope="session")
def kou():
    return ProcessModel("kou", 0.2, 0.1, 0.1, 0.05, 0.1)


@pytest.fixture(scope="session")
def study_market():
    return Market(RateCurve(0.05))


def study_spec(**kw):
    """Ten years of weekly rebalancing with multiplier 4 unless overridden."""
    return ProductSpec.regular(520, 1 / 52, **{"multiplier": 4, **kw})
