"""Normal distribution truncated from below at zero.

The density of ``N0(mu, sigma**2)`` is ``phi((x - mu) / sigma) / (sigma * Phi(mu / sigma))``
for ``x >= 0`` and zero otherwise.  Every function here broadcasts over numpy
arrays; :class:`TruncatedNormal` is a thin scalar-friendly wrapper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Below this point phi(t)/Phi(t) is taken from the asymptotic series.
MILLS_ASYMPTOTIC_CUTOFF = -30.0


def std_normal_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def std_normal_cdf(x):
    """Standard normal CDF (``scipy.special.ndtr``, accurate in both tails)."""
    return special.ndtr(x)


def std_normal_logcdf(x):
    return special.log_ndtr(x)


def _mills_asymptotic(t):
    # Phi(t) ~ phi(t)/(-t) * sum_n (-1)^n (2n-1)!! / t^(2n); valid for t << 0.
    t2 = t * t
    total = np.ones_like(t)
    term = np.ones_like(t)
    for n in range(1, 9):
        term = -term * (2 * n - 1) / t2
        total = total + term
    return -t / total


def mills_ratio(t):
    """Return ``phi(t) / Phi(t)`` without 0/0 for very negative ``t``.

    Enters the truncated-normal mean and variance and every EM location or
    scale update.  For ``t <= -30`` the ratio is evaluated from the
    asymptotic expansion of the normal tail; elsewhere directly.
    """
    t = np.asarray(t, dtype=float)
    direct = t > MILLS_ASYMPTOTIC_CUTOFF
    safe_t = np.where(direct, t, 0.0)
    out = std_normal_pdf(safe_t) / special.ndtr(safe_t)
    if not np.all(direct):
        tail_t = np.where(direct, MILLS_ASYMPTOTIC_CUTOFF - 1.0, t)
        out = np.where(direct, out, _mills_asymptotic(tail_t))
    return out[()] if out.ndim == 0 else out


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValueError("sigma must be strictly positive")
    return sigma


def logpdf(x, mu, sigma):
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = _check_sigma(sigma)
    z = (x - mu) / sigma
    val = -0.5 * z * z - _LOG_SQRT_2PI - np.log(sigma) - special.log_ndtr(mu / sigma)
    return np.where(x >= 0, val, -np.inf)


def pdf(x, mu, sigma):
    """Density of ``N0(mu, sigma**2)`` at ``x``; zero below the cut-off."""
    return np.exp(logpdf(x, mu, sigma))


def cdf(x, mu, sigma):
    """CDF of ``N0(mu, sigma**2)``.

    Uses ``(Phi(z) - Phi(-t)) / Phi(t)`` in the lower half of a component with
    nonnegative location and the survival form ``1 - Phi(-z) / Phi(t)``
    otherwise, so neither branch subtracts two numbers close to one.  The
    survival ratio is formed in log space because ``Phi(t)`` underflows for
    very negative ``t``.
    """
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma = _check_sigma(sigma)
    t = mu / sigma
    z = (x - mu) / sigma
    # each branch may overflow where the other one is selected
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        lower = (special.ndtr(z) - special.ndtr(-t)) / special.ndtr(t)
        upper = -np.expm1(special.log_ndtr(-z) - special.log_ndtr(t))
    out = np.where((z <= 0) & (t >= 0), lower, upper)
    out = np.clip(out, 0.0, 1.0)
    return np.where(x > 0, out, 0.0)


def mean(mu, sigma):
    """Mean ``mu + sigma * phi(mu/sigma) / Phi(mu/sigma)``."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    return mu + sigma * mills_ratio(mu / sigma)


def variance(mu, sigma):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t = mu / sigma
    lam = mills_ratio(t)
    return sigma * sigma * (1.0 - t * lam - lam * lam)


def quantile(p, mu, sigma):
    """Inverse CDF in closed form.

    The target is ``Phi(-t) + p * Phi(t)`` on the lower side; when that is
    above one half the complementary tail ``(1 - p) * Phi(t)`` is inverted
    instead.
    """
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie strictly between 0 and 1")
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t = mu / sigma
    mass = special.ndtr(t)
    lower = special.ndtr(-t) + p * mass
    upper = (1.0 - p) * mass
    x = np.where(
        lower <= 0.5,
        mu + sigma * special.ndtri(np.minimum(lower, 0.5)),
        mu - sigma * special.ndtri(np.minimum(upper, 0.5)),
    )
    return np.maximum(x, 0.0)


def sample(mu, sigma, rng: np.random.Generator, size=None):
    """Inverse-CDF draws from ``N0(mu, sigma**2)``."""
    if size is None:
        size = np.broadcast(np.asarray(mu), np.asarray(sigma)).shape
    u = rng.random(size)
    # rng.random() can return exactly 0.
    u = np.where(u > 0, u, np.nextafter(0.0, 1.0))
    return quantile(u, mu, sigma)


@dataclass(frozen=True)
class TruncatedNormal:
    """``N0(mu, sigma**2)``: normal with location ``mu`` and scale ``sigma``, cut off at zero."""

    mu: float
    sigma: float

    def __post_init__(self):
        if not (self.sigma > 0) or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma!r}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu!r}")

    def pdf(self, x):
        return pdf(x, self.mu, self.sigma)

    def cdf(self, x):
        return cdf(x, self.mu, self.sigma)

    def quantile(self, p):
        return quantile(p, self.mu, self.sigma)

    def mean(self) -> float:
        return float(mean(self.mu, self.sigma))

    def variance(self) -> float:
        return float(variance(self.mu, self.sigma))

    def sample(self, rng: np.random.Generator, size=None):
        return sample(self.mu, self.sigma, rng, size)
