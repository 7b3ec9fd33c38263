"""BMA predictive distribution built from zero-truncated normal components.

Members are split into exchangeable groups.  Every member of group ``k``
carries weight ``omega_k`` and contributes the component
``N0(alpha_k + beta_k * f, sigma**2)``; the scale is shared by all groups.
Member values of a case are stored as a flat array in group order (all
members of the first group, then the second, and so on).
"""

from __future__ import annotations

import datetime as _dt
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import truncnorm


class MissingMembersError(ValueError):
    """Raised when an operation needs a complete ensemble."""


@dataclass(frozen=True)
class GroupSpec:
    """Ordered exchangeable-group layout, e.g. ``(("control", 1), ("perturbed", 10))``."""

    groups: tuple[tuple[str, int], ...]

    def __post_init__(self):
        groups = tuple((str(label), int(count)) for label, count in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ValueError("a group spec needs at least one group")
        labels = [label for label, _ in groups]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate group labels in {labels}")
        for label, count in groups:
            if count < 1:
                raise ValueError(f"group {label!r} must have at least one member")
            if not label or any(c in label for c in ".,:= \t"):
                raise ValueError(f"invalid group label {label!r}")

    @classmethod
    def from_counts(cls, **counts: int) -> "GroupSpec":
        return cls(tuple(counts.items()))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.groups)

    @property
    def counts(self) -> np.ndarray:
        return np.array([count for _, count in self.groups], dtype=int)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_members(self) -> int:
        return int(self.counts.sum())

    @property
    def member_group(self) -> np.ndarray:
        """Group index of each member column."""
        return np.repeat(np.arange(self.n_groups), self.counts)

    def member_columns(self) -> list[str]:
        return [f"{label}.{i}" for label, count in self.groups for i in range(1, count + 1)]

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown group label {label!r}") from None

    def __str__(self) -> str:
        return ",".join(f"{label}:{count}" for label, count in self.groups)

    @classmethod
    def parse(cls, text: str) -> "GroupSpec":
        """Parse ``"control:1,perturbed:10"`` (commas or newlines, ``:`` or ``=``)."""
        groups = []
        for chunk in text.replace("\n", ",").split(","):
            chunk = chunk.split("#", 1)[0].strip()
            if not chunk:
                continue
            sep = ":" if ":" in chunk else "="
            label, _, count = chunk.partition(sep)
            try:
                groups.append((label.strip(), int(count)))
            except ValueError:
                raise ValueError(f"bad group entry {chunk!r}") from None
        return cls(tuple(groups))


TWO_GROUP = GroupSpec((("control", 1), ("perturbed", 10)))
THREE_GROUP = GroupSpec((("control", 1), ("odd", 5), ("even", 5)))

PRESETS = {"two-group": TWO_GROUP, "three-group": THREE_GROUP}


@dataclass(frozen=True)
class ForecastCase:
    """One (station, date) record.

    ``members`` holds the member values in group order with ``nan`` marking a
    missing member; ``observation`` is ``nan`` when not yet observed.
    """

    station: str
    date: _dt.date
    members: np.ndarray
    observation: float = math.nan

    def __post_init__(self):
        members = np.array(self.members, dtype=float)
        members.setflags(write=False)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "observation", float(self.observation))
        if members.ndim != 1:
            raise ValueError("members must be one-dimensional")
        if np.any(members[~np.isnan(members)] < 0):
            raise ValueError(f"negative member value in case {self.station} {self.date}")
        if self.observation < 0:
            raise ValueError(f"negative observation in case {self.station} {self.date}")

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.members)

    @property
    def complete_ensemble(self) -> bool:
        return bool(np.all(self.present))

    @property
    def observed(self) -> bool:
        return not math.isnan(self.observation)

    def __eq__(self, other):
        if not isinstance(other, ForecastCase):
            return NotImplemented
        same_obs = (self.observation == other.observation) or (
            math.isnan(self.observation) and math.isnan(other.observation)
        )
        return (
            self.station == other.station
            and self.date == other.date
            and same_obs
            and np.array_equal(self.members, other.members, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class BmaModel:
    """Fitted truncated-normal BMA model.

    Attributes
    ----------
    spec : GroupSpec
    weights : per-group weight carried by *each* member of the group
    alpha, beta : per-group intercept and slope of the location link
    sigma : common scale
    """

    spec: GroupSpec
    weights: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    sigma: float

    def __post_init__(self):
        m = self.spec.n_groups
        for name in ("weights", "alpha", "beta"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (m,):
                raise ValueError(f"{name} needs {m} entries, got {arr.shape[0]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sigma", float(self.sigma))
        if not (self.sigma > 0) or not math.isfinite(self.sigma):
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        total = float(self.weights @ self.spec.counts)
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"member weights sum to {total!r}, expected 1")

    @classmethod
    def normalized(cls, spec, weights, alpha, beta, sigma) -> "BmaModel":
        """Build a model after rescaling ``weights`` so that sum(M_k * w_k) = 1."""
        w = np.asarray(weights, dtype=float)
        w = w / float(w @ spec.counts)
        return cls(spec, w, alpha, beta, sigma)

    @property
    def member_weights(self) -> np.ndarray:
        return self.weights[self.spec.member_group]

    def locations(self, members) -> np.ndarray:
        """Component locations ``alpha_k + beta_k * f`` for member values (..., M)."""
        members = np.asarray(members, dtype=float)
        g = self.spec.member_group
        return self.alpha[g] + self.beta[g] * members

    def component_weights(self, members) -> np.ndarray:
        """Member weights for (..., M) member arrays.

        Missing members get zero weight and the remaining weights are
        rescaled to sum to one.
        """
        members = np.asarray(members, dtype=float)
        w = np.broadcast_to(self.member_weights, members.shape)
        w = np.where(np.isnan(members), 0.0, w)
        # summing sorted weights keeps the total independent of member order
        total = np.sort(w, axis=-1).sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise MissingMembersError("no members with positive weight are present")
        return w / total

    def __eq__(self, other):
        if not isinstance(other, BmaModel):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.beta, other.beta)
            and self.sigma == other.sigma
        )

    __hash__ = None

    # --- serialization -------------------------------------------------

    def dumps(self) -> str:
        lines = []
        for k, (label, count) in enumerate(self.spec.groups):
            lines.append(f"group.{label}.members={count}")
            lines.append(f"group.{label}.weight={self.weights[k]:.17g}")
            lines.append(f"group.{label}.alpha={self.alpha[k]:.17g}")
            lines.append(f"group.{label}.beta={self.beta[k]:.17g}")
        lines.append(f"sigma={self.sigma:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, spec: GroupSpec | None = None) -> "BmaModel":
        """Inverse of :meth:`dumps`.

        ``group.<id>.members`` lines are optional when ``spec`` is given.
        """
        values = parse_key_values(text)
        groups: dict[str, dict[str, str]] = {}
        sigma = None
        for key, value in values.items():
            if key == "sigma":
                sigma = float(value)
                continue
            parts = key.split(".")
            if len(parts) != 3 or parts[0] != "group":
                raise ValueError(f"unknown model key {key!r}")
            groups.setdefault(parts[1], {})[parts[2]] = value
        if sigma is None:
            raise ValueError("model text has no sigma")
        if spec is None:
            try:
                spec = GroupSpec(tuple((g, int(p["members"])) for g, p in groups.items()))
            except KeyError:
                raise ValueError("model text lacks member counts; pass a GroupSpec") from None
        if set(groups) != set(spec.labels):
            raise ValueError(f"model groups {sorted(groups)} do not match {list(spec.labels)}")
        cols = {}
        for name in ("weight", "alpha", "beta"):
            try:
                cols[name] = [float(groups[g][name]) for g in spec.labels]
            except KeyError as exc:
                raise ValueError(f"missing model parameter {exc}") from None
        for label, count in spec.groups:
            if "members" in groups[label] and int(groups[label]["members"]) != count:
                raise ValueError(f"member count mismatch for group {label!r}")
        return cls(spec, cols["weight"], cols["alpha"], cols["beta"], sigma)


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _members_of(case_or_members) -> np.ndarray:
    if isinstance(case_or_members, ForecastCase):
        return case_or_members.members
    return np.asarray(case_or_members, dtype=float)


def _require_complete(members: np.ndarray, allow_missing: bool):
    if not allow_missing and np.any(np.isnan(members)):
        raise MissingMembersError("forecast case has missing ensemble members")


def canonical_order(w, loc):
    """Sort components by (location, weight) along the last axis.

    Sums over the sorted components do not depend on member order, so
    permuting exchangeable members leaves every result bit-identical.
    """
    order = np.lexsort((w, loc), axis=-1)
    return np.take_along_axis(w, order, axis=-1), np.take_along_axis(loc, order, axis=-1)


def _components(model: BmaModel, members, allow_missing: bool):
    members = _members_of(members)
    _require_complete(members, allow_missing)
    w = model.component_weights(members)
    loc = model.locations(np.nan_to_num(members, nan=0.0))
    return canonical_order(w, loc)


def predictive_pdf(model: BmaModel, case, x, allow_missing: bool = False):
    """Mixture density ``sum_i w_i g(x | alpha_k + beta_k f_i, sigma)``.

    ``case`` is a :class:`ForecastCase` or a member array of shape (..., M);
    ``x`` broadcasts against the leading axes.
    """
    w, loc = _components(model, case, allow_missing)
    x = np.asarray(x, dtype=float)[..., None]
    return np.sum(w * truncnorm.pdf(x, loc, model.sigma), axis=-1)


def predictive_cdf(model: BmaModel, case, x, allow_missing: bool = False):
    w, loc = _components(model, case, allow_missing)
    x = np.asarray(x, dtype=float)[..., None]
    return np.clip(np.sum(w * truncnorm.cdf(x, loc, model.sigma), axis=-1), 0.0, 1.0)


def _mixture_cdf(w, loc, sigma, x):
    return np.sum(w * truncnorm.cdf(x[..., None], loc, sigma), axis=-1)


def bisect_mixture_quantile(w, loc, sigma, p, xtol=1e-12, max_iter=200):
    """Vectorized bisection for the mixture quantile.

    ``w`` and ``loc`` have shape (..., M) and ``p`` broadcasts against the
    leading shape.  The initial bracket is ``[0, max(max loc, 0) + 12 sigma]``
    and is widened until it contains the target.  Iteration stops once every
    bracket is narrower than ``tol`` relative to ``1 + hi`` or after
    ``max_iter`` halvings.
    """
    w = np.asarray(w, dtype=float)
    loc = np.asarray(loc, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie strictly between 0 and 1")
    shape = np.broadcast_shapes(w.shape[:-1], p.shape)
    w = np.broadcast_to(w, shape + w.shape[-1:])
    loc = np.broadcast_to(loc, shape + loc.shape[-1:])
    p = np.broadcast_to(p, shape)
    lo = np.zeros(shape)
    hi = np.maximum(loc.max(axis=-1), 0.0) + 12.0 * sigma
    for _ in range(60):
        short = _mixture_cdf(w, loc, sigma, hi) < p
        if not np.any(short):
            break
        hi = np.where(short, 2.0 * hi, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = _mixture_cdf(w, loc, sigma, mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= xtol * (1.0 + hi)):
            break
    return 0.5 * (lo + hi)


def predictive_quantile(model: BmaModel, case, p, allow_missing: bool = False):
    """Quantile of the predictive mixture found by bisection on its CDF."""
    w, loc = _components(model, case, allow_missing)
    return bisect_mixture_quantile(w, loc, model.sigma, p)


def predictive_median(model: BmaModel, case, allow_missing: bool = False):
    return predictive_quantile(model, case, 0.5, allow_missing)


def central_interval(model: BmaModel, case, level: float, allow_missing: bool = False):
    """Central prediction interval ``(q((1-level)/2), q(1-(1-level)/2))``."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level!r}")
    a = 0.5 * (1.0 - level)
    w, loc = _components(model, case, allow_missing)
    lo = bisect_mixture_quantile(w, loc, model.sigma, a)
    hi = bisect_mixture_quantile(w, loc, model.sigma, 1.0 - a)
    return lo, hi


def stack_members(cases: Iterable[ForecastCase]) -> np.ndarray:
    return np.array([c.members for c in cases], dtype=float)


def uniform_model(spec: GroupSpec, alpha: Sequence[float], beta: Sequence[float], sigma: float) -> BmaModel:
    """Model with equal weight ``1/M`` on every member."""
    return BmaModel(spec, np.full(spec.n_groups, 1.0 / spec.n_members), alpha, beta, sigma)
