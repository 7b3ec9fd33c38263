"""Closed-form CRPS for truncated-normal BMA mixtures and point-forecast scores.

With ``X, X'`` independent draws from the predictive distribution,
``CRPS(F, x) = E|X - x| - E|X - X'| / 2``.  For a mixture of zero-truncated
normals both expectations reduce to pairwise component terms: ``S1`` for a
single component against the observation, ``S2`` for a pair of components.
``S2`` contains a correction integral that has no elementary closed form and
is evaluated with :mod:`tnbma.quadrature`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import quadrature
from .mixture import BmaModel, ForecastCase, MissingMembersError
from .truncnorm import std_normal_cdf as Phi
from .truncnorm import std_normal_logcdf as log_Phi
from .truncnorm import std_normal_pdf as phi

# Upper limit of the correction integral is |mu_d|/sigma_d + TAIL_SPAN.
TAIL_SPAN = 12.0
# Floor for the mass-scaled tolerance of C; below this rounding dominates.
MIN_ATOL = 1e-13
# Below this retained mass the closed forms cancel catastrophically and the
# expectations are integrated from the CDFs instead.
MASS_FALLBACK = 1e-3
# Batch size for the pairwise S2 evaluation; bounds peak memory.
_CHUNK = 4096


@dataclass(frozen=True)
class DifferenceParams:
    """Location, scale and cross term of ``X1 - X2`` for two truncated normals."""

    mu_d: np.ndarray
    sigma_d: np.ndarray
    rho_d: np.ndarray

    @classmethod
    def of(cls, mu1, mu2, sigma1, sigma2) -> "DifferenceParams":
        mu1, mu2, sigma1, sigma2 = (np.asarray(v, dtype=float) for v in (mu1, mu2, sigma1, sigma2))
        if np.any(~(sigma1 > 0)) or np.any(~(sigma2 > 0)):
            raise ValueError("scales must be positive")
        sigma_d = np.sqrt(sigma1 ** 2 + sigma2 ** 2)
        rho_d = (mu1 * sigma2 ** 2 + mu2 * sigma1 ** 2) / (sigma1 * sigma2 * sigma_d)
        return cls(mu1 - mu2, sigma_d, rho_d)


def abs_moment_A(mu, sigma):
    """``E|Y|`` for ``Y ~ N(mu, sigma**2)`` (note: ``sigma`` is the standard deviation)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    t = mu / sigma
    return mu * (2.0 * Phi(t) - 1.0) + 2.0 * sigma * phi(t)


def _survival(y, mu, sigma):
    # P(X > y) for X ~ N0(mu, sigma**2) and y >= 0, formed in log space
    return np.minimum(np.exp(log_Phi((mu - y) / sigma) - log_Phi(mu / sigma)), 1.0)


def _support_end(mu, sigma):
    # Point beyond which P(X > y) < 1e-17.  A heavily truncated component
    # decays like exp(-|t| y / sigma), so its support shrinks as 1/|t|.
    t = mu / sigma
    return np.maximum(mu, 0.0) + sigma * np.minimum(10.0, 40.0 / np.maximum(-t, 1e-300))


def _integrate_pieces(f, edges, atol):
    # Sum of integrals over consecutive edges (each an array of shape (n,)).
    total = np.zeros_like(edges[0])
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += quadrature.integrate(f, lo, np.maximum(hi, lo), atol=atol)[0]
    return total


def _s1_by_cdf(x, mu, sigma, atol):
    # E|X - x| = int_0^x F + int_x^inf (1 - F)
    end = _support_end(mu, sigma)
    mid = np.minimum(end, x)
    below = lambda u, idx: 1.0 - _survival(u, mu[idx, None], sigma[idx, None])
    above = lambda u, idx: _survival(u, mu[idx, None], sigma[idx, None])
    return _integrate_pieces(below, [np.zeros_like(x), mid, x], atol) + _integrate_pieces(
        above, [x, np.maximum(end, x)], atol
    )


def _s2_by_cdf(mu1, mu2, sigma1, sigma2, atol):
    # E|X1 - X2| = int_0^inf F1 (1 - F2) + F2 (1 - F1)
    e1, e2 = _support_end(mu1, sigma1), _support_end(mu2, sigma2)

    def f(u, idx):
        q1 = _survival(u, mu1[idx, None], sigma1[idx, None])
        q2 = _survival(u, mu2[idx, None], sigma2[idx, None])
        return (1.0 - q1) * q2 + (1.0 - q2) * q1

    return _integrate_pieces(f, [np.zeros_like(e1), np.minimum(e1, e2), np.maximum(e1, e2)], atol)


def crps_term_S1(x, mu, sigma, atol=1e-9):
    """``E|X - x|`` for ``X ~ N0(mu, sigma**2)`` and ``x >= 0``.

    Components retaining less than ``MASS_FALLBACK`` of their untruncated mass
    are integrated from the CDF to ``atol``; the closed form is used otherwise.
    """
    x, mu, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, mu, sigma)))
    t = mu / sigma
    mass = Phi(t)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = (abs_moment_A(x - mu, sigma) + (x - mu) * (mass - 1.0) - sigma * phi(t)) / mass
    tiny = mass < MASS_FALLBACK
    if np.any(tiny):
        out = np.array(out, dtype=float)
        out[tiny] = _s1_by_cdf(x[tiny], mu[tiny], sigma[tiny], atol)
    return out[()] if out.ndim == 0 else out


def _correction_integrand(a, rho, r12, r21):
    # Integrand of C after substituting x = sigma_d * u; a = mu_d / sigma_d,
    # r12 = sigma2 / sigma1, r21 = sigma1 / sigma2.
    def f(u, idx):
        a_, rho_ = a[idx, None], rho[idx, None]
        return u * (
            phi(u - a_) * Phi(r12[idx, None] * u - rho_)
            + phi(u + a_) * Phi(r21[idx, None] * u - rho_)
        )

    return f


def crps_correction_C(mu1, mu2, sigma1, sigma2, atol=1e-9):
    """Correction integral ``C`` entering ``S2``.

    ``C = int_0^inf u [phi(u - mu_d/sigma_d) Phi(sigma2/sigma1 u - rho_d)
    + phi(u + mu_d/sigma_d) Phi(sigma1/sigma2 u - rho_d)] du``, integrated on
    ``[0, |mu_d|/sigma_d + 12]`` with adaptive Gauss-Kronrod refinement.
    ``atol`` may be a scalar or one tolerance per parameter set.

    Raises :class:`tnbma.quadrature.QuadratureError` (carrying the offending
    parameters) when refinement fails.
    """
    mu1, mu2, sigma1, sigma2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu1, mu2, sigma1, sigma2))
    )
    shape = mu1.shape
    mu1, mu2, sigma1, sigma2 = (v.reshape(-1) for v in (mu1, mu2, sigma1, sigma2))
    d = DifferenceParams.of(mu1, mu2, sigma1, sigma2)
    atol = np.broadcast_to(np.asarray(atol, dtype=float), shape).reshape(-1)
    a = d.mu_d / d.sigma_d
    upper = np.abs(a) + TAIL_SPAN
    out = np.empty(mu1.shape)
    for start in range(0, mu1.size, _CHUNK):
        sl = slice(start, start + _CHUNK)
        f = _correction_integrand(a[sl], d.rho_d[sl], sigma2[sl] / sigma1[sl], sigma1[sl] / sigma2[sl])
        try:
            out[sl], _ = quadrature.integrate(f, np.zeros_like(upper[sl]), upper[sl], atol=atol[sl])
        except quadrature.QuadratureError as exc:
            i = start + exc.failed_index[0]
            raise quadrature.QuadratureError(
                f"{exc} (first failure at mu1={mu1[i]!r}, mu2={mu2[i]!r}, "
                f"sigma1={sigma1[i]!r}, sigma2={sigma2[i]!r})",
                failed_index=exc.failed_index + start,
            ) from None
    return out.reshape(shape)[()] if shape == () else out.reshape(shape)


def crps_term_S2(mu1, mu2, sigma1, sigma2, atol=1e-9):
    """``E|X1 - X2|`` for independent ``X_i ~ N0(mu_i, sigma_i**2)``.

    The error in ``C`` is divided by the retained mass ``Phi(t1) Phi(t2)``,
    so ``C`` is integrated to ``atol`` times that mass (never below
    ``MIN_ATOL``).  Pairs whose joint mass is below ``MASS_FALLBACK`` lose too
    many digits to cancellation and are integrated from the CDFs instead.
    """
    mu1, mu2, sigma1, sigma2 = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu1, mu2, sigma1, sigma2))
    )
    sigma_d = np.sqrt(sigma1 ** 2 + sigma2 ** 2)
    mass = Phi(mu1 / sigma1) * Phi(mu2 / sigma2)
    tiny = mass < MASS_FALLBACK
    out = np.empty(mu1.shape)
    ok = ~tiny
    if np.any(ok):
        c = crps_correction_C(
            mu1[ok], mu2[ok], sigma1[ok], sigma2[ok], atol=np.maximum(atol * np.minimum(mass[ok], 1.0), MIN_ATOL)
        )
        out[ok] = (abs_moment_A(mu1[ok] - mu2[ok], sigma_d[ok]) - sigma_d[ok] * c) / mass[ok]
    if np.any(tiny):
        out[tiny] = _s2_by_cdf(mu1[tiny], mu2[tiny], sigma1[tiny], sigma2[tiny], atol)
    return out[()] if out.ndim == 0 else out


def crps_components(weights, locations, sigma, x, atol=1e-9):
    """CRPS of truncated-normal mixtures with a common scale.

    ``weights`` and ``locations`` have shape (n, M) (weights summing to one
    along the last axis) and ``x`` has shape (n,).  S2 is symmetric, so only
    the upper triangle of component pairs is evaluated.
    """
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    loc = np.atleast_2d(np.asarray(locations, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n, m = loc.shape
    first = np.sum(w * crps_term_S1(x[:, None], loc, sigma, atol=atol), axis=1)
    iu, ju = np.triu_indices(m)
    pair_factor = np.where(iu == ju, 1.0, 2.0)
    s2 = crps_term_S2(loc[:, iu], loc[:, ju], sigma, sigma, atol=atol)
    second = np.sum(pair_factor * w[:, iu] * w[:, ju] * s2, axis=1)
    return first - 0.5 * second


def crps_mixture(model: BmaModel, case, x=None, allow_missing: bool = False):
    """CRPS of the BMA predictive distribution at observation ``x``.

    ``case`` is a :class:`ForecastCase` (``x`` defaults to its observation)
    or a member array of shape (M,) or (n, M) with ``x`` given explicitly.
    Returns a float for a single case and an array otherwise.
    """
    if isinstance(case, ForecastCase):
        members = case.members
        if x is None:
            x = case.observation
    else:
        members = np.asarray(case, dtype=float)
    if x is None:
        raise ValueError("observation x is required")
    single = members.ndim == 1
    members = np.atleast_2d(members)
    if not allow_missing and np.any(np.isnan(members)):
        raise MissingMembersError("forecast case has missing ensemble members")
    x = np.broadcast_to(np.asarray(x, dtype=float), members.shape[:1])
    if np.any(~(x >= 0)):
        raise ValueError("observations must be nonnegative and finite")
    w = model.component_weights(members)
    loc = model.locations(np.nan_to_num(members, nan=0.0))
    out = crps_components(w, loc, model.sigma, x)
    return float(out[0]) if single else out


def mae_rmse(point_forecasts, observations) -> tuple[float, float]:
    f = np.asarray(point_forecasts, dtype=float).reshape(-1)
    o = np.asarray(observations, dtype=float).reshape(-1)
    if f.shape != o.shape:
        raise ValueError(f"length mismatch: {f.size} forecasts vs {o.size} observations")
    if f.size == 0:
        raise ValueError("need at least one forecast")
    err = f - o
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))
