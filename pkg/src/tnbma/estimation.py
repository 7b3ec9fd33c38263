"""EM fitting of truncated-normal BMA models from a training window.

Three schemes are provided and differ in how the component locations are
obtained:

``naive``
    Locations ``alpha_k + beta_k f`` come from least squares of the
    observations on the forecasts and stay fixed; EM updates the weights and
    the common scale.
``mean-corrected``
    The regression line is read as the component *mean*.  Per-case locations
    are iterated so that the truncated-normal mean matches it; the final
    locations are regressed on the forecasts to give ``alpha_k, beta_k``.
``full-ml``
    ``alpha_k`` and ``beta_k`` are updated inside EM together with the weights
    and the scale.

All three share the E step and the weight update.  The scale update is a
fixed-point step on the complete-data score equation, so the likelihood is
not guaranteed to increase at every iteration.

Members of an exchangeable group share parameters: responsibilities are
computed per member and summed over the group, and the group total divided
by the member count gives the per-member weight.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from . import truncnorm
from .mixture import BmaModel, ForecastCase, GroupSpec

log = logging.getLogger(__name__)

VARIANTS = ("naive", "mean-corrected", "full-ml")
ANCHORS = ("current", "initial")


class FitError(ArithmeticError):
    """Non-finite likelihood or another unrecoverable numerical failure."""


@dataclass(frozen=True)
class TrainingSet:
    """Complete (forecast, observation) cases pooled over stations and days.

    ``forecasts`` has shape (N, M) with members in group order and
    ``observations`` has shape (N,).
    """

    spec: GroupSpec
    forecasts: np.ndarray
    observations: np.ndarray
    min_cases: int | None = None

    def __post_init__(self):
        f = np.array(self.forecasts, dtype=float)
        x = np.array(self.observations, dtype=float).reshape(-1)
        if f.ndim != 2 or f.shape[1] != self.spec.n_members:
            raise ValueError(f"forecasts must have shape (N, {self.spec.n_members}), got {f.shape}")
        if f.shape[0] != x.shape[0]:
            raise ValueError("forecasts and observations disagree on the number of cases")
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(x))):
            raise ValueError("training cases must be complete (no missing members or observations)")
        if np.any(f < 0) or np.any(x < 0):
            raise ValueError("forecasts and observations must be nonnegative")
        minimum = 2 * self.spec.n_groups if self.min_cases is None else self.min_cases
        if f.shape[0] < minimum:
            raise ValueError(f"training set has {f.shape[0]} cases, need at least {minimum}")
        f.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "forecasts", f)
        object.__setattr__(self, "observations", x)

    @classmethod
    def from_cases(cls, spec: GroupSpec, cases: Iterable[ForecastCase], min_cases: int | None = None):
        cases = list(cases)
        f = np.array([c.members for c in cases], dtype=float).reshape(len(cases), spec.n_members)
        x = np.array([c.observation for c in cases], dtype=float)
        return cls(spec, f, x, min_cases)

    @property
    def n_cases(self) -> int:
        return self.observations.shape[0]

    def group_columns(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.spec.member_group == k)


@dataclass(frozen=True)
class EmConfig:
    """EM settings.

    ``tol`` bounds the relative log-likelihood change that ends the
    iteration.  ``full_ml_anchor`` selects the mean-correction anchor of the
    full-ML scheme (see :func:`fit_full_ml`).
    """

    variant: str = "full-ml"
    tol: float = 1e-7
    max_iter: int = 500
    min_sigma: float = 1e-4
    full_ml_anchor: str = "current"
    check_signs: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.min_sigma > 0:
            raise ValueError("min_sigma must be positive")
        if self.full_ml_anchor not in ANCHORS:
            raise ValueError(f"full_ml_anchor must be one of {ANCHORS}")


@dataclass
class FitDiagnostics:
    variant: str
    iterations: int = 0
    converged: bool = False
    loglik_initial: float = math.nan
    loglik_final: float = math.nan
    sigma_floor_hit: bool = False
    degenerate_regression: tuple[str, ...] = ()
    degenerate_update: tuple[str, ...] = ()
    trace: list[float] = field(default_factory=list, repr=False)

    def to_text(self) -> str:
        rows = [
            ("variant", self.variant),
            ("iterations", str(self.iterations)),
            ("converged", str(self.converged).lower()),
            ("loglik_initial", f"{self.loglik_initial:.17g}"),
            ("loglik_final", f"{self.loglik_final:.17g}"),
            ("sigma_floor_hit", str(self.sigma_floor_hit).lower()),
            ("degenerate_regression", ",".join(self.degenerate_regression)),
            ("degenerate_update", ",".join(self.degenerate_update)),
        ]
        return "".join(f"{k}={v}\n" for k, v in rows)


class FitResult(NamedTuple):
    model: BmaModel
    diagnostics: FitDiagnostics


# --- shared pieces ------------------------------------------------------


def _ols(f: np.ndarray, x: np.ndarray) -> tuple[float, float, bool]:
    f = f.reshape(-1)
    x = x.reshape(-1)
    fbar = f.mean()
    xbar = x.mean()
    df = f - fbar
    sxx = float(df @ df)
    if np.all(f == f[0]) or sxx == 0.0:
        return float(xbar), 0.0, True
    b = float(df @ (x - xbar)) / sxx
    return float(xbar - b * fbar), b, False


def regress_location(training: TrainingSet, group: str | int) -> tuple[float, float]:
    """Least-squares intercept and slope of observations on one group's members.

    All members of the group are pooled, each paired with its case
    observation.  When every forecast value is identical the fallback is
    ``(mean(x), 0)``.
    """
    k = training.spec.index(group) if isinstance(group, str) else int(group)
    a, b, _ = _regress_group(training, k, training.observations)
    return a, b


def _regress_group(training: TrainingSet, k: int, target: np.ndarray):
    cols = training.group_columns(k)
    f = training.forecasts[:, cols]
    y = target if target.ndim == 2 else np.broadcast_to(target[:, None], f.shape)
    if y.shape[1] != f.shape[1]:
        y = y[:, cols]
    return _ols(f, y)


def _regress_all(training: TrainingSet, target=None):
    target = training.observations if target is None else target
    alpha = np.empty(training.spec.n_groups)
    beta = np.empty(training.spec.n_groups)
    degenerate = []
    for k, label in enumerate(training.spec.labels):
        alpha[k], beta[k], singular = _regress_group(training, k, target)
        if singular:
            degenerate.append(label)
    return alpha, beta, tuple(degenerate)


def _member_locations(training: TrainingSet, alpha, beta) -> np.ndarray:
    g = training.spec.member_group
    return alpha[g] + beta[g] * training.forecasts


def _initial_sigma(training: TrainingSet, loc: np.ndarray, min_sigma: float) -> float:
    resid = training.observations[:, None] - loc
    with np.errstate(over="ignore"):
        s = float(np.sqrt(np.mean(resid * resid)))
    if not math.isfinite(s):
        bad = int(np.nanargmax(np.max(np.abs(resid), axis=1)))
        raise FitError(
            f"non-finite initial residual scale; largest residual at training case {bad} "
            f"(observation {training.observations[bad]!r})"
        )
    return max(s, min_sigma)


def _posterior(training: TrainingSet, member_weights, loc, sigma):
    """Member-level responsibilities (N, M) and the log-likelihood."""
    with np.errstate(divide="ignore"):
        logw = np.log(member_weights)
    logp = logw + truncnorm.logpdf(training.observations[:, None], loc, sigma)
    per_case = logsumexp(logp, axis=1)
    if not np.all(np.isfinite(per_case)):
        bad = int(np.flatnonzero(~np.isfinite(per_case))[0])
        raise FitError(
            f"non-finite likelihood at training case {bad} "
            f"(observation {training.observations[bad]!r}, members {training.forecasts[bad].tolist()})"
        )
    z = np.exp(logp - per_case[:, None])
    return z, float(per_case.sum())


def responsibilities(model: BmaModel, training: TrainingSet) -> np.ndarray:
    """Member-level responsibilities of ``model`` on ``training`` (rows sum to one)."""
    loc = model.locations(training.forecasts)
    z, _ = _posterior(training, model.member_weights, loc, model.sigma)
    return z


def log_likelihood(model: BmaModel, training: TrainingSet) -> float:
    """Sum over cases of the log predictive density at the observation.

    Returns ``-inf`` when some observation has zero density.
    """
    loc = model.locations(training.forecasts)
    with np.errstate(divide="ignore"):
        logp = np.log(model.member_weights) + truncnorm.logpdf(
            training.observations[:, None], loc, model.sigma
        )
    return float(np.sum(logsumexp(logp, axis=1)))


def _weight_update(training: TrainingSet, z: np.ndarray) -> np.ndarray:
    spec = training.spec
    totals = np.bincount(spec.member_group, weights=z.sum(axis=0), minlength=spec.n_groups)
    w = totals / (training.n_cases * spec.counts)
    # Renormalize against rounding so the simplex constraint holds tightly.
    return w / float(w @ spec.counts)


def _sigma_update(training, z, loc, sigma, config: EmConfig, diag: FitDiagnostics) -> float:
    """Fixed-point scale step: mean weighted squared residual plus truncation term."""
    n = training.n_cases
    resid = training.observations[:, None] - loc
    first = float(np.sum(z * resid * resid)) / n
    second = sigma * float(np.sum(z * loc * truncnorm.mills_ratio(loc / sigma))) / n
    if config.check_signs and second < 0:
        log.debug("negative truncation term %.3g in scale update", second)
    s2 = first + second
    if not s2 > config.min_sigma ** 2:
        diag.sigma_floor_hit = True
        return config.min_sigma
    return math.sqrt(s2)


def _check_variant(config: EmConfig, variant: str) -> EmConfig:
    if config.variant != variant:
        config = replace(config, variant=variant)
    return config


def _finish(diag: FitDiagnostics, it: int, converged: bool):
    diag.iterations = it
    diag.converged = converged
    if not converged:
        log.info("%s EM stopped after %d iterations without converging", diag.variant, it)


def _converged(ll_new: float, ll_old: float, tol: float) -> bool:
    return abs(ll_new - ll_old) <= tol * abs(ll_old)


# --- the three schemes ----------------------------------------------------


def fit_naive(training: TrainingSet, config: EmConfig | None = None) -> FitResult:
    """Regression locations held fixed; EM over weights and scale."""
    config = _check_variant(config or EmConfig(), "naive")
    spec = training.spec
    diag = FitDiagnostics("naive")
    alpha, beta, diag.degenerate_regression = _regress_all(training)
    loc = _member_locations(training, alpha, beta)
    weights = np.full(spec.n_groups, 1.0 / spec.n_members)
    sigma = _initial_sigma(training, loc, config.min_sigma)

    z, ll = _posterior(training, weights[spec.member_group], loc, sigma)
    diag.loglik_initial = ll
    diag.trace.append(ll)
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        weights = _weight_update(training, z)
        sigma = _sigma_update(training, z, loc, sigma, config, diag)
        z, ll_new = _posterior(training, weights[spec.member_group], loc, sigma)
        diag.trace.append(ll_new)
        converged = _converged(ll_new, ll, config.tol)
        ll = ll_new
        if converged:
            break
    _finish(diag, it, converged)
    model = BmaModel(spec, weights, alpha, beta, sigma)
    diag.loglik_final = ll
    return FitResult(model, diag)


def fit_mean_corrected(training: TrainingSet, config: EmConfig | None = None) -> FitResult:
    """Regression line taken as the component mean; per-case locations corrected.

    Each iteration moves the per-case location towards the value whose
    truncated-normal mean equals the regression prediction,
    ``mu <- anchor - sigma * phi(mu/sigma) / Phi(mu/sigma)``.  After EM stops,
    ``alpha_k, beta_k`` come from least squares of the final locations on the
    forecasts.
    """
    config = _check_variant(config or EmConfig(), "mean-corrected")
    spec = training.spec
    diag = FitDiagnostics("mean-corrected")
    a, b, diag.degenerate_regression = _regress_all(training)
    anchor = _member_locations(training, a, b)
    mu = anchor
    weights = np.full(spec.n_groups, 1.0 / spec.n_members)
    sigma = _initial_sigma(training, anchor, config.min_sigma)
    diag.loglik_initial = log_likelihood(BmaModel(spec, weights, a, b, sigma), training)

    z, ll = _posterior(training, weights[spec.member_group], mu, sigma)
    diag.trace.append(ll)
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        weights = _weight_update(training, z)
        mu = anchor - sigma * truncnorm.mills_ratio(mu / sigma)
        sigma = _sigma_update(training, z, mu, sigma, config, diag)
        z, ll_new = _posterior(training, weights[spec.member_group], mu, sigma)
        diag.trace.append(ll_new)
        converged = _converged(ll_new, ll, config.tol)
        ll = ll_new
        if converged:
            break
    _finish(diag, it, converged)
    alpha, beta, degenerate = _regress_all(training, target=mu)
    diag.degenerate_update = degenerate
    model = BmaModel(spec, weights, alpha, beta, sigma)
    diag.loglik_final = log_likelihood(model, training)
    return FitResult(model, diag)


def fit_full_ml(training: TrainingSet, config: EmConfig | None = None) -> FitResult:
    """All of weights, intercepts, slopes and scale updated inside EM.

    One iteration runs, in order: responsibilities, weights, intercepts
    (using the previous slopes), slopes (using the new intercepts), the
    mean-corrected locations, and the scale.  The intercept and slope steps
    solve the complete-data score equations with the truncation term
    ``sigma * phi(mu/sigma) / Phi(mu/sigma)`` frozen at the current
    locations.

    The location step is ``mu <- anchor - sigma * phi(m/sigma) / Phi(m/sigma)``
    with ``m = alpha + beta f``.  With ``full_ml_anchor="current"`` (default)
    the anchor is the truncated-normal mean of the current fit,
    ``m + sigma * phi(m/sigma) / Phi(m/sigma)``, so the step returns ``m`` and
    the E step always sees the locations of the returned model.  With
    ``"initial"`` the anchor stays at the starting regression prediction for
    the whole run; the E step then uses locations that the returned
    ``alpha, beta`` do not reproduce.
    """
    config = _check_variant(config or EmConfig(), "full-ml")
    spec = training.spec
    diag = FitDiagnostics("full-ml")
    alpha, beta, diag.degenerate_regression = _regress_all(training)
    anchor = _member_locations(training, alpha, beta)
    mu = anchor
    weights = np.full(spec.n_groups, 1.0 / spec.n_members)
    sigma = _initial_sigma(training, anchor, config.min_sigma)
    x = training.observations[:, None]
    f = training.forecasts
    cols = [training.group_columns(k) for k in range(spec.n_groups)]
    degenerate: set[str] = set()

    z, ll = _posterior(training, weights[spec.member_group], mu, sigma)
    diag.loglik_initial = ll
    diag.trace.append(ll)
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        weights = _weight_update(training, z)
        shift = sigma * truncnorm.mills_ratio(mu / sigma)
        alpha = alpha.copy()
        beta = beta.copy()
        for k, c in enumerate(cols):
            zk, fk, sk = z[:, c], f[:, c], shift[:, c]
            ztot = float(zk.sum())
            if not ztot > 0:
                degenerate.add(spec.labels[k])
                continue
            alpha[k] = float(np.sum(zk * (x - beta[k] * fk - sk))) / ztot
            denom = float(np.sum(zk * fk * fk))
            if not denom > 0:
                degenerate.add(spec.labels[k])
                continue
            beta[k] = float(np.sum(zk * fk * (x - alpha[k] - sk))) / denom
        m = _member_locations(training, alpha, beta)
        if config.full_ml_anchor == "current":
            mu = m
        else:
            mu = anchor - sigma * truncnorm.mills_ratio(m / sigma)
        sigma = _sigma_update(training, z, mu, sigma, config, diag)
        z, ll_new = _posterior(training, weights[spec.member_group], mu, sigma)
        diag.trace.append(ll_new)
        converged = _converged(ll_new, ll, config.tol)
        ll = ll_new
        if converged:
            break
    _finish(diag, it, converged)
    diag.degenerate_update = tuple(sorted(degenerate))
    model = BmaModel(spec, weights, alpha, beta, sigma)
    diag.loglik_final = log_likelihood(model, training)
    return FitResult(model, diag)


FITTERS = {"naive": fit_naive, "mean-corrected": fit_mean_corrected, "full-ml": fit_full_ml}


def fit(training: TrainingSet, config: EmConfig | None = None) -> FitResult:
    """Dispatch on ``config.variant``."""
    config = config or EmConfig()
    return FITTERS[config.variant](training, config)
