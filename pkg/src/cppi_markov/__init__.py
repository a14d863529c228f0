"""Pricing of CPPI strategies and their options with Markov transition operators."""
from .closed_form import VanillaSpec, vanilla_reference
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .features import (
    FeatureError, banded_rebalance_price, coupon_price, lockin_price, open_ended_price, price_with_features,
)
from .grid import StateGrid, build_grid
from .kernel import KernelError, PeriodTerms, build_period_matrix
from .models import ModelError, ProcessModel
from .montecarlo import McConfig, McError, McResult, mc_price
from .operators import Payoff, PricingReport, greeks, price
from .product import CouponSchedule, Fees, LockInRule, Market, ProductError, ProductSpec, RateCurve

__all__ = [
    "ConfigError", "CouponSchedule", "FeatureError", "Fees", "KernelError", "LockInRule", "Market", "McConfig",
    "McError", "McResult", "ModelError", "Payoff", "PeriodTerms", "PricingReport", "ProcessModel", "ProductError",
    "ProductSpec", "RateCurve", "RunConfig", "StateGrid", "VanillaSpec", "banded_rebalance_price",
    "build_grid", "build_period_matrix", "coupon_price", "dump_config", "greeks", "load_config", "lockin_price",
    "mc_price", "open_ended_price", "parse_config", "price", "price_with_features", "vanilla_reference",
]
