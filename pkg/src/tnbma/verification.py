"""Calibration and sharpness diagnostics for BMA and raw-ensemble forecasts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import mixture, scoring, truncnorm
from .mixture import BmaModel, ForecastCase

DEFAULT_LEVELS = (0.667, 0.90)


# --- single-case primitives --------------------------------------------------


def pit(model: BmaModel, case: ForecastCase, allow_missing: bool = False) -> float:
    """Predictive CDF at the verifying observation."""
    if not case.observed:
        raise ValueError(f"case {case.station} {case.date} has no observation")
    return float(mixture.predictive_cdf(model, case, case.observation, allow_missing))


def hyndman_fan_quantile(sample, p):
    """Sample quantile of Hyndman and Fan's definition 7 along the last axis.

    With ``h = (n - 1) p + 1`` the result interpolates linearly between the
    order statistics ``floor(h)`` and ``floor(h) + 1``.  ``nan`` entries are
    ignored.
    """
    sample = np.asarray(sample, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("p must lie strictly between 0 and 1")
    if sample.shape[-1] == 0 or np.any(np.all(np.isnan(sample), axis=-1)):
        raise ValueError("empty sample")
    s = np.sort(sample, axis=-1)  # nan sorts last
    n = np.sum(~np.isnan(s), axis=-1)
    h = (n - 1) * p  # zero-based position
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = h - lo
    x_lo = np.take_along_axis(s, np.asarray(lo)[..., None], axis=-1)[..., 0]
    x_hi = np.take_along_axis(s, np.asarray(hi)[..., None], axis=-1)[..., 0]
    out = x_lo + frac * (x_hi - x_lo)
    return out[()] if out.ndim == 0 else out


def crps_raw_ensemble(members, x):
    """CRPS of the empirical ensemble CDF: ``E|X - x| - E|X - X'| / 2``.

    ``members`` has shape (M,) or (n, M); missing members (``nan``) are
    dropped from the empirical distribution.
    """
    m = np.asarray(members, dtype=float)
    single = m.ndim == 1
    m = np.atleast_2d(m)
    x = np.broadcast_to(np.asarray(x, dtype=float), m.shape[:1])
    present = ~np.isnan(m)
    count = present.sum(axis=1)
    if np.any(count == 0):
        raise ValueError("ensemble has no members")
    v = np.where(present, m, 0.0)
    first = np.sum(np.where(present, np.abs(v - x[:, None]), 0.0), axis=1) / count
    pair = np.abs(v[:, :, None] - v[:, None, :])
    pair_mask = present[:, :, None] & present[:, None, :]
    second = np.sum(np.where(pair_mask, pair, 0.0), axis=(1, 2)) / (count * count)
    out = first - 0.5 * second
    return float(out[0]) if single else out


def rank_histogram(cases: Iterable[ForecastCase], rng: np.random.Generator | int = 0):
    """Counts of the observation's rank among the members.

    Rank 1 means below every member; rank ``M + 1`` above every member.  Ties
    get a uniformly drawn rank among the tied positions.  Incomplete or
    unobserved cases are skipped.

    Returns
    -------
    counts : ndarray of shape (M + 1,)
    skipped : int
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    counts = None
    skipped = 0
    for c in cases:
        if counts is None:
            counts = np.zeros(c.members.size + 1, dtype=int)
        if not (c.complete_ensemble and c.observed):
            skipped += 1
            continue
        below = int(np.sum(c.members < c.observation))
        ties = int(np.sum(c.members == c.observation))
        counts[below + (int(rng.integers(0, ties + 1)) if ties else 0)] += 1
    if counts is None:
        counts = np.zeros(0, dtype=int)
    return counts, skipped


def ensemble_containment(cases: Iterable[ForecastCase]) -> float:
    """Percent of complete, observed cases whose ensemble range covers the observation.

    For an M-member calibrated ensemble the nominal value is (M - 1)/(M + 1).
    """
    inside = total = 0
    for c in cases:
        if not (c.complete_ensemble and c.observed):
            continue
        total += 1
        inside += bool(c.members.min() <= c.observation <= c.members.max())
    if total == 0:
        raise ValueError("no complete observed cases")
    return 100.0 * inside / total


def pit_histogram(values, bins: int = 10) -> np.ndarray:
    """Counts of PIT values in ``bins`` equal bins on [0, 1]."""
    counts, _ = np.histogram(np.asarray(values, dtype=float), bins=bins, range=(0.0, 1.0))
    return counts


# --- Kolmogorov-Smirnov -----------------------------------------------------------


def kolmogorov_sf(lam, eps: float = 1e-12) -> float:
    """Limiting Kolmogorov survival function ``P(K > lam)``.

    Uses ``2 sum (-1)^(k-1) exp(-2 k^2 lam^2)`` for ``lam >= 1`` and the
    theta-function form ``1 - sqrt(2 pi)/lam sum exp(-(2k-1)^2 pi^2 / (8 lam^2))``
    below, stopping once a term drops under ``eps``.
    """
    lam = float(lam)
    if lam <= 0:
        return 1.0
    if lam >= 1.0:
        total, k = 0.0, 1
        while True:
            term = math.exp(-2.0 * k * k * lam * lam)
            total += term if k % 2 else -term
            if term < eps:
                break
            k += 1
        return min(max(2.0 * total, 0.0), 1.0)
    total, k = 0.0, 1
    c = math.pi * math.pi / (8.0 * lam * lam)
    while True:
        term = math.exp(-(2 * k - 1) ** 2 * c)
        total += term
        if term < eps or k > 1000:
            break
        k += 1
    return min(max(1.0 - math.sqrt(2.0 * math.pi) / lam * total, 0.0), 1.0)


def ks_statistic(values) -> float:
    u = np.sort(np.asarray(values, dtype=float).reshape(-1))
    n = u.size
    if n == 0:
        raise ValueError("empty PIT sample")
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - u), np.max(u - (i - 1) / n)))


def ks_uniform_test(values) -> tuple[float, float]:
    """One-sample KS test against Uniform(0, 1) with the asymptotic p-value."""
    d = ks_statistic(values)
    n = np.asarray(values).size
    return d, kolmogorov_sf(math.sqrt(n) * d)


def pit_discrepancy(values) -> float:
    """Mean absolute gap between sorted PIT values and uniform plotting positions ``i/(n+1)``."""
    u = np.sort(np.asarray(values, dtype=float).reshape(-1))
    n = u.size
    return float(np.mean(np.abs(u - np.arange(1, n + 1) / (n + 1))))


# --- per-case scores and reports --------------------------------------------------


@dataclass
class CaseScores:
    """Per-case verification quantities for one forecast method."""

    crps: np.ndarray
    median: np.ndarray
    observation: np.ndarray
    intervals: dict[float, tuple[np.ndarray, np.ndarray]]
    pit: np.ndarray | None = None
    renormalized: np.ndarray | None = None

    @property
    def n_cases(self) -> int:
        return int(self.observation.size)

    @classmethod
    def concat(cls, parts: Sequence["CaseScores"]) -> "CaseScores":
        if not parts:
            raise ValueError("nothing to concatenate")
        levels = parts[0].intervals.keys()
        cat = np.concatenate
        return cls(
            crps=cat([p.crps for p in parts]),
            median=cat([p.median for p in parts]),
            observation=cat([p.observation for p in parts]),
            intervals={
                lv: (cat([p.intervals[lv][0] for p in parts]), cat([p.intervals[lv][1] for p in parts]))
                for lv in levels
            },
            pit=None if parts[0].pit is None else cat([p.pit for p in parts]),
            renormalized=None if parts[0].renormalized is None else cat([p.renormalized for p in parts]),
        )


def _check_levels(levels):
    levels = tuple(float(lv) for lv in levels)
    for lv in levels:
        if not 0 < lv < 1:
            raise ValueError(f"interval level {lv!r} not in (0, 1)")
    return levels


def _unpack(cases_or_members, observations=None):
    if observations is None:
        cases = list(cases_or_members)
        members = np.array([c.members for c in cases], dtype=float)
        observations = np.array([c.observation for c in cases], dtype=float)
    else:
        members = np.atleast_2d(np.asarray(cases_or_members, dtype=float))
        observations = np.asarray(observations, dtype=float).reshape(-1)
    if members.shape[0] != observations.size:
        raise ValueError("members and observations disagree on case count")
    if np.any(np.isnan(observations)):
        raise ValueError("verification cases need observations")
    return members, observations


def score_bma(model: BmaModel, cases, observations=None, levels=DEFAULT_LEVELS) -> CaseScores:
    """Score ``model`` on cases (a list of :class:`ForecastCase`, or members + observations).

    Cases with missing members are scored with renormalized weights and
    flagged in ``renormalized``.
    """
    members, obs = _unpack(cases, observations)
    levels = _check_levels(levels)
    w = model.component_weights(members)
    loc = model.locations(np.nan_to_num(members, nan=0.0))
    w, loc = mixture.canonical_order(w, loc)
    sigma = model.sigma
    median = mixture.bisect_mixture_quantile(w, loc, sigma, 0.5)
    intervals = {}
    for lv in levels:
        a = 0.5 * (1.0 - lv)
        intervals[lv] = (
            mixture.bisect_mixture_quantile(w, loc, sigma, a),
            mixture.bisect_mixture_quantile(w, loc, sigma, 1.0 - a),
        )
    pit_values = np.clip(np.sum(w * _component_cdf(obs, loc, sigma), axis=1), 0.0, 1.0)
    return CaseScores(
        crps=scoring.crps_components(w, loc, sigma, obs),
        median=median,
        observation=obs,
        intervals=intervals,
        pit=pit_values,
        renormalized=np.any(np.isnan(members), axis=1),
    )


def _component_cdf(obs, loc, sigma):
    return truncnorm.cdf(obs[:, None], loc, sigma)


def score_raw_ensemble(cases, observations=None, levels=DEFAULT_LEVELS) -> CaseScores:
    """Score the raw ensemble as an empirical distribution."""
    members, obs = _unpack(cases, observations)
    levels = _check_levels(levels)
    intervals = {}
    for lv in levels:
        a = 0.5 * (1.0 - lv)
        intervals[lv] = (hyndman_fan_quantile(members, a), hyndman_fan_quantile(members, 1.0 - a))
    return CaseScores(
        crps=np.atleast_1d(crps_raw_ensemble(members, obs)),
        median=np.atleast_1d(hyndman_fan_quantile(members, 0.5)),
        observation=obs,
        intervals=intervals,
        renormalized=np.any(np.isnan(members), axis=1),
    )


def coverage_and_width(scores: CaseScores) -> dict[float, tuple[float, float]]:
    """Coverage (percent) and average width for each interval level."""
    out = {}
    for lv, (lo, hi) in scores.intervals.items():
        inside = (lo <= scores.observation) & (scores.observation <= hi)
        out[lv] = (100.0 * float(np.mean(inside)), float(np.mean(hi - lo)))
    return out


def interval_scores(model: BmaModel | None, cases, levels=DEFAULT_LEVELS, observations=None):
    """Coverage (percent) and average width of central intervals per level.

    ``model=None`` scores the raw ensemble (Hyndman-Fan quantiles); otherwise
    the BMA predictive intervals of ``model`` are used.
    """
    if model is None:
        scores = score_raw_ensemble(cases, observations, levels)
    else:
        scores = score_bma(model, cases, observations, levels)
    return coverage_and_width(scores)


@dataclass
class VerificationReport:
    mean_crps: float
    mae: float
    rmse: float
    coverage: dict[float, float]
    width: dict[float, float]
    case_count: int
    ks_statistic: float = math.nan
    ks_pvalue: float = math.nan
    renormalized_cases: int = 0

    def metrics(self) -> list[tuple[str, float]]:
        rows = [("mean_crps", self.mean_crps), ("mae", self.mae), ("rmse", self.rmse)]
        for lv in sorted(self.width):
            rows.append((f"width_{level_label(lv)}", self.width[lv]))
        for lv in sorted(self.coverage):
            rows.append((f"coverage_{level_label(lv)}", self.coverage[lv]))
        rows += [
            ("ks_statistic", self.ks_statistic),
            ("ks_pvalue", self.ks_pvalue),
            ("case_count", float(self.case_count)),
            ("renormalized_cases", float(self.renormalized_cases)),
        ]
        return rows


def level_label(level: float) -> str:
    """``0.667 -> '66.7'``, ``0.9 -> '90.0'``."""
    return f"{100.0 * level:.1f}"


def assemble_report(scores: CaseScores) -> VerificationReport:
    """Aggregate per-case scores into a report (means over all cases)."""
    if scores.n_cases == 0:
        raise ValueError("no verification cases")
    mae, rmse = scoring.mae_rmse(scores.median, scores.observation)
    iv = coverage_and_width(scores)
    ks_d = ks_p = math.nan
    if scores.pit is not None:
        ks_d, ks_p = ks_uniform_test(scores.pit)
    return VerificationReport(
        mean_crps=float(np.mean(scores.crps)),
        mae=mae,
        rmse=rmse,
        coverage={lv: c for lv, (c, _) in iv.items()},
        width={lv: w for lv, (_, w) in iv.items()},
        case_count=scores.n_cases,
        ks_statistic=ks_d,
        ks_pvalue=ks_p,
        renormalized_cases=0 if scores.renormalized is None else int(np.sum(scores.renormalized)),
    )


def _g6(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6g}"


def reports_to_csv(reports: Mapping[str, VerificationReport]) -> str:
    """One row per (forecast, metric), values to 6 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["forecast", "metric", "value"])
    for name, rep in reports.items():
        for metric, value in rep.metrics():
            w.writerow([name, metric, _g6(value)])
    return buf.getvalue()


def format_report_table(reports: Mapping[str, VerificationReport]) -> str:
    """Plain-text comparison table: scores, interval widths and coverages."""
    levels = sorted(next(iter(reports.values())).width) if reports else []
    head = ["Forecast", "Mean CRPS", "MAE", "RMSE"]
    head += [f"Width {level_label(lv)}%" for lv in levels]
    head += [f"Cover {level_label(lv)}%" for lv in levels]
    head += ["Cases"]
    rows = []
    for name, r in reports.items():
        rows.append(
            [name, f"{r.mean_crps:.4f}", f"{r.mae:.4f}", f"{r.rmse:.4f}"]
            + [f"{r.width[lv]:.4f}" for lv in levels]
            + [f"{r.coverage[lv]:.2f}" for lv in levels]
            + [str(r.case_count)]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


def format_ks_summary(reports: Mapping[str, VerificationReport]) -> str:
    """CSV of KS statistic and p-value for every forecast with a PIT sample."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["forecast", "ks_statistic", "ks_pvalue", "cases"])
    for name, r in reports.items():
        if not math.isnan(r.ks_statistic):
            w.writerow([name, _g6(r.ks_statistic), _g6(r.ks_pvalue), r.case_count])
    return buf.getvalue()


def histogram_csv(counts, label: str = "bin") -> str:
    counts = np.asarray(counts)
    n = len(counts)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if label == "pit":
        w.writerow(["bin", "lower", "upper", "count"])
        for i, c in enumerate(counts):
            w.writerow([i + 1, _g6(i / n), _g6((i + 1) / n), int(c)])
    else:
        w.writerow(["rank", "count"])
        for i, c in enumerate(counts):
            w.writerow([i + 1, int(c)])
    return buf.getvalue()
