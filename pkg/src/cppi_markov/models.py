"""Laws of the one-period gross forward return F_{i+1}/F_i.

The transition kernel only ever asks three questions of the risky asset
model, all at a gross-return strike ``K``:

* ``p1(K) = P[F1/F0 < K]``
* ``p2(K) = E[F1/F0 ; F1/F0 < K]``
* ``p3(K) = E[(F1/F0)^2 ; F1/F0 < K]``

Black-Scholes answers them in closed form.  For the Kou double-exponential
jump-diffusion the three functions are tabulated once per period length by
FFT, each as the cumulative distribution of an exponentially tilted Kou
process (tilt order 0, 1, 2).
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr


class ModelError(ValueError):
    """Invalid model parameters (non-martingale or ill-defined law)."""


def _validate_bs(sigma: float, tau: float) -> None:
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ModelError(f"sigma must be positive, got {sigma!r}")
    if not (tau > 0 and math.isfinite(tau)):
        raise ModelError(f"tau must be positive, got {tau!r}")


def _d_plus(K, sigma, tau):
    K = np.asarray(K, dtype=float)
    sd = sigma * math.sqrt(tau)
    with np.errstate(divide="ignore"):
        logk = np.where(K > 0, np.log(np.where(K > 0, K, 1.0)), -np.inf)
    return (logk + 0.5 * sd * sd) / sd, sd


def bs_p1(K, sigma: float, tau: float):
    """P[F1/F0 < K] for a driftless lognormal forward."""
    _validate_bs(sigma, tau)
    d, _ = _d_plus(K, sigma, tau)
    return ndtr(d)


def bs_p2(K, sigma: float, tau: float):
    """E[F1/F0 ; F1/F0 < K] for a driftless lognormal forward."""
    _validate_bs(sigma, tau)
    d, sd = _d_plus(K, sigma, tau)
    return ndtr(d - sd)


def bs_p3(K, sigma: float, tau: float):
    """E[(F1/F0)^2 ; F1/F0 < K] for a driftless lognormal forward."""
    _validate_bs(sigma, tau)
    d, sd = _d_plus(K, sigma, tau)
    return math.exp(sd * sd) * ndtr(d - 2.0 * sd)


@dataclass(frozen=True)
class BsParams:
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ModelError(f"sigma must be positive, got {self.sigma!r}")


@dataclass(frozen=True)
class KouParams:
    """Kou jump-diffusion for ln F.

    ``eta_plus``/``eta_minus`` are mean jump sizes in log-return units and the
    intensities are per year.  ``drift`` is normally left as ``None`` so the
    martingale drift is used; tilted parameter sets carry an explicit drift.
    """

    sigma: float
    lambda_plus: float = 0.0
    lambda_minus: float = 0.0
    eta_plus: float = 0.0
    eta_minus: float = 0.0
    drift: float | None = None

    def __post_init__(self):
        if not (self.sigma > 0):
            raise ModelError(f"sigma must be positive, got {self.sigma!r}")
        if self.lambda_plus < 0 or self.lambda_minus < 0:
            raise ModelError("jump intensities must be non-negative")
        if self.lambda_plus > 0 and not (self.eta_plus > 0):
            raise ModelError(f"eta_plus must be positive, got {self.eta_plus!r}")
        # tilted sets carry their own drift; the bound applies to the model itself
        if self.drift is None and self.lambda_plus > 0 and not (self.eta_plus < 1):
            raise ModelError(
                f"eta_plus must lie in (0, 1) for the forward to be a martingale, got {self.eta_plus!r}"
            )
        if self.lambda_minus > 0 and not (self.eta_minus > 0):
            raise ModelError(f"eta_minus must be positive, got {self.eta_minus!r}")

    @property
    def gamma(self) -> float:
        return kou_martingale_drift(self) if self.drift is None else self.drift

    @property
    def total_volatility(self) -> float:
        return math.sqrt(
            self.sigma**2
            + 2 * self.lambda_plus * self.eta_plus**2
            + 2 * self.lambda_minus * self.eta_minus**2
        )

    @property
    def has_jumps(self) -> bool:
        return self.lambda_plus > 0 or self.lambda_minus > 0

    def tilted(self, k: int) -> "KouParams":
        """Parameters of ln F under the measure with density F^k / E[F^k]."""
        if k == 0:
            return replace(self, drift=self.gamma)
        if self.lambda_plus > 0 and k * self.eta_plus >= 1:
            raise ModelError(f"E[F^{k}] diverges for eta_plus={self.eta_plus}")
        lp = self.lambda_plus / (1 - k * self.eta_plus) if self.lambda_plus > 0 else 0.0
        ep = self.eta_plus / (1 - k * self.eta_plus) if self.lambda_plus > 0 else 0.0
        lm = self.lambda_minus / (1 + k * self.eta_minus) if self.lambda_minus > 0 else 0.0
        em = self.eta_minus / (1 + k * self.eta_minus) if self.lambda_minus > 0 else 0.0
        return KouParams(self.sigma, lp, lm, ep, em, drift=self.gamma + k * self.sigma**2)


def kou_martingale_drift(params: KouParams) -> float:
    """Drift of ln F making F a martingale."""
    g = -0.5 * params.sigma**2
    if params.lambda_plus > 0:
        if params.eta_plus >= 1:
            raise ModelError("eta_plus must be lower than 1")
        g -= params.eta_plus / (1 - params.eta_plus) * params.lambda_plus
    if params.lambda_minus > 0:
        g += params.eta_minus / (1 + params.eta_minus) * params.lambda_minus
    return g


def kou_char_exponent(u, params: KouParams):
    """psi(u) with E[exp(iu ln(F_t/F_0))] = exp(t psi(u))."""
    u = np.asarray(u, dtype=complex)
    iu = 1j * u
    out = iu * params.gamma - 0.5 * params.sigma**2 * u * u
    if params.lambda_plus > 0:
        out = out + iu * params.eta_plus / (1 - iu * params.eta_plus) * params.lambda_plus
    if params.lambda_minus > 0:
        out = out - iu * params.eta_minus / (1 + iu * params.eta_minus) * params.lambda_minus
    return out


def kou_moment(params: KouParams, k: int, tau: float) -> float:
    """E[(F_tau/F_0)^k]; infinite when k * eta_plus >= 1."""
    if params.lambda_plus > 0 and k * params.eta_plus >= 1:
        return math.inf
    return math.exp(tau * kou_char_exponent(-1j * k, params).real)


def _log_mean_var(params: KouParams, tau: float) -> tuple[float, float]:
    mean = tau * (params.gamma + params.lambda_plus * params.eta_plus - params.lambda_minus * params.eta_minus)
    var = tau * (
        params.sigma**2 + 2 * params.lambda_plus * params.eta_plus**2 + 2 * params.lambda_minus * params.eta_minus**2
    )
    return mean, var


@dataclass(frozen=True)
class LogCdfTable:
    """CDF of ln F on a uniform grid: Gaussian CDF plus an FFT-recovered correction."""

    mean: float
    sd: float
    x0: float
    dx: float
    correction: CubicSpline = field(repr=False)

    @property
    def lower(self) -> float:
        return self.x0

    @property
    def upper(self) -> float:
        return self.x0 + self.dx * (len(self.correction.x) - 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty_like(x)
        lo = x < self.lower
        hi = x > self.upper
        mid = ~(lo | hi)
        xm = x[mid]
        out[mid] = ndtr((xm - self.mean) / self.sd) + self.correction(xm)
        out[lo] = 0.0
        out[hi] = 1.0
        return np.clip(out, 0.0, 1.0)


def _tabulate_log_cdf(params: KouParams, tau: float, n_fft: int, half_width: float | None) -> LogCdfTable:
    mean, var = _log_mean_var(params, tau)
    sd = math.sqrt(var)
    if half_width is None:
        half_width = 12 * sd
        eta = max(params.eta_plus if params.lambda_plus > 0 else 0.0, params.eta_minus if params.lambda_minus > 0 else 0.0)
        # jump tails decay like exp(-x/eta); 45 eta leaves < 1e-19 of mass outside
        half_width = max(half_width, 45 * eta)
    x0 = mean - half_width
    dx = 2 * half_width / n_fft
    du = 2 * math.pi / (n_fft * dx)
    k = np.arange(n_fft)
    u = (k - n_fft // 2) * du
    phi = np.exp(tau * kou_char_exponent(u, params))
    phi_g = np.exp(1j * u * mean - 0.5 * var * u * u)
    dhat = np.zeros(n_fft, dtype=complex)
    nz = u != 0
    dhat[nz] = (phi[nz] - phi_g[nz]) / (-1j * u[nz])
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    vals = (du / (2 * math.pi)) * sign * np.fft.fft(np.exp(-1j * u * x0) * dhat)
    xs = x0 + dx * k
    corr = vals.real
    # enforce a monotone tabulated CDF before interpolating the correction
    total = np.clip(ndtr((xs - mean) / sd) + corr, 0.0, 1.0)
    total = np.maximum.accumulate(total)
    corr = total - ndtr((xs - mean) / sd)
    return LogCdfTable(mean, sd, x0, dx, CubicSpline(xs, corr))


class ReturnLaw:
    """Distribution of the gross forward return over one period of length ``tau``."""

    tau: float
    second_moment: float
    log_variance: float

    def p1(self, K):
        raise NotImplementedError

    def p2(self, K):
        raise NotImplementedError

    def p3(self, K):
        raise NotImplementedError

    @property
    def has_second_moment(self) -> bool:
        return math.isfinite(self.second_moment)


@dataclass(frozen=True)
class LognormalLaw(ReturnLaw):
    sigma: float
    tau: float

    def __post_init__(self):
        _validate_bs(self.sigma, self.tau)

    @property
    def second_moment(self) -> float:
        return math.exp(self.sigma**2 * self.tau)

    @property
    def log_variance(self) -> float:
        return self.sigma**2 * self.tau

    def p1(self, K):
        return bs_p1(K, self.sigma, self.tau)

    def p2(self, K):
        return bs_p2(K, self.sigma, self.tau)

    def p3(self, K):
        return bs_p3(K, self.sigma, self.tau)


@dataclass(frozen=True)
class KouLaw(ReturnLaw):
    params: KouParams
    tau: float
    cdf0: LogCdfTable = field(repr=False)
    cdf1: LogCdfTable = field(repr=False)
    cdf2: LogCdfTable | None = field(repr=False)
    second_moment: float = math.inf
    infinite_variance: bool = False

    @property
    def log_variance(self) -> float:
        return _log_mean_var(self.params, self.tau)[1]

    @staticmethod
    def _log(K):
        K = np.asarray(K, dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(K > 0, np.log(np.where(K > 0, K, 1.0)), -np.inf)

    def p1(self, K):
        return self.cdf0(self._log(K))

    def p2(self, K):
        return self.cdf1(self._log(K))

    def p3(self, K):
        if self.cdf2 is None:
            raise ModelError("second moment of the return diverges (eta_plus >= 1/2)")
        return self.second_moment * self.cdf2(self._log(K))


def kou_tabulate_law(params: KouParams, tau: float, n_fft: int = 2**14, domain_width: float | None = None) -> KouLaw:
    """Tabulate p1/p2/p3 of the Kou law over one period by FFT."""
    if not (tau > 0):
        raise ModelError(f"tau must be positive, got {tau!r}")
    if n_fft < 2**10 or n_fft & (n_fft - 1):
        raise ModelError("n_fft must be a power of two >= 1024")
    cdf0 = _tabulate_log_cdf(params.tilted(0), tau, n_fft, domain_width)
    cdf1 = _tabulate_log_cdf(params.tilted(1), tau, n_fft, domain_width)
    infinite = params.lambda_plus > 0 and params.eta_plus >= 0.5
    if infinite:
        warnings.warn("eta_plus >= 1/2: the second moment of the return diverges", stacklevel=2)
        cdf2, m2 = None, math.inf
    else:
        cdf2 = _tabulate_log_cdf(params.tilted(2), tau, n_fft, domain_width)
        m2 = kou_moment(params, 2, tau)
    return KouLaw(params, tau, cdf0, cdf1, cdf2, m2, infinite)


def law_p1(law: ReturnLaw, K):
    return law.p1(K)


def law_p2(law: ReturnLaw, K):
    return law.p2(K)


@dataclass(frozen=True)
class ProcessModel:
    """Risky-underlying law with optional per-period volatilities.

    ``sigma`` is either a scalar or an array with one entry per period.
    """

    kind: str = "bs"
    sigma: float | tuple = 0.2
    lambda_plus: float = 0.0
    lambda_minus: float = 0.0
    eta_plus: float = 0.0
    eta_minus: float = 0.0
    n_fft: int = 2**14

    def __post_init__(self):
        if self.kind not in ("bs", "kou"):
            raise ModelError(f"unknown model kind {self.kind!r}")
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if np.any(~(sig > 0)):
            raise ModelError("sigma must be positive")
        if self.kind == "kou":
            self.kou_params(float(sig[0]))

    def period_sigma(self, i: int) -> float:
        sig = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        return float(sig[min(i, len(sig) - 1)]) if sig.size > 1 else float(sig[0])

    def kou_params(self, sigma: float) -> KouParams:
        return KouParams(sigma, self.lambda_plus, self.lambda_minus, self.eta_plus, self.eta_minus)

    @property
    def atm_volatility(self) -> float:
        sig = float(np.sqrt(np.mean(np.atleast_1d(np.asarray(self.sigma, dtype=float)) ** 2)))
        if self.kind == "kou":
            return self.kou_params(sig).total_volatility
        return sig

    def law(self, sigma: float, tau: float) -> ReturnLaw:
        return _cached_law(self.kind, float(sigma), float(tau), self.lambda_plus, self.lambda_minus,
                           self.eta_plus, self.eta_minus, self.n_fft)

    def bumped(self, dsigma: float) -> "ProcessModel":
        sig = self.sigma
        if isinstance(sig, (tuple, list, np.ndarray)):
            sig = tuple(float(s) + dsigma for s in sig)
        else:
            sig = float(sig) + dsigma
        return replace(self, sigma=sig)


_LAW_CACHE: dict = {}


def _cached_law(kind, sigma, tau, lp, lm, ep, em, n_fft) -> ReturnLaw:
    key = (kind, sigma, tau, lp, lm, ep, em, n_fft)
    law = _LAW_CACHE.get(key)
    if law is None:
        if kind == "bs" or (lp == 0 and lm == 0):
            law = LognormalLaw(sigma, tau)
        else:
            law = kou_tabulate_law(KouParams(sigma, lp, lm, ep, em), tau, n_fft)
        if len(_LAW_CACHE) > 4096:
            _LAW_CACHE.clear()
        _LAW_CACHE[key] = law
    return law
