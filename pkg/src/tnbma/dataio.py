"""Archive CSV ingestion, sliding training windows and synthetic archives.

CSV layout (UTF-8, dot decimal separator, empty field = missing)::

    station,date,control.1,perturbed.1,...,perturbed.10,obs
    BUD,2010-10-01,4.1,3.9,...,3.7

Member columns are ``<group>.<index>`` in group order; the group layout of
an archive is read off the header.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import truncnorm
from .mixture import (
    PRESETS,
    THREE_GROUP,
    TWO_GROUP,
    BmaModel,
    ForecastCase,
    GroupSpec,
    parse_key_values,
)

INCOMPLETE = "incomplete-ensemble"
UNOBSERVED = "missing-observation"


class ArchiveError(ValueError):
    """Malformed archive content; ``lineno`` points at the offending line."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


@dataclass(frozen=True)
class Archive:
    """Forecast cases keyed by (station, date), sorted by date then station."""

    spec: GroupSpec
    cases: tuple[ForecastCase, ...]

    def __post_init__(self):
        cases = tuple(sorted(self.cases, key=lambda c: (c.date, c.station)))
        seen = set()
        for c in cases:
            key = (c.station, c.date)
            if key in seen:
                raise ArchiveError(f"duplicate case for station {c.station!r} on {c.date}")
            seen.add(key)
            if c.members.shape != (self.spec.n_members,):
                raise ArchiveError(
                    f"case {c.station} {c.date} has {c.members.size} members, "
                    f"layout {self.spec} needs {self.spec.n_members}"
                )
        object.__setattr__(self, "cases", cases)

    def __len__(self):
        return len(self.cases)

    @property
    def dates(self) -> list[dt.date]:
        return sorted({c.date for c in self.cases})

    @property
    def stations(self) -> list[str]:
        return sorted({c.station for c in self.cases})

    @property
    def date_range(self) -> tuple[dt.date, dt.date] | None:
        if not self.cases:
            return None
        return self.cases[0].date, self.cases[-1].date

    def on(self, date: dt.date) -> list[ForecastCase]:
        return [c for c in self.cases if c.date == date]

    def between(self, first: dt.date, last: dt.date) -> list[ForecastCase]:
        """Cases with ``first <= date <= last``."""
        return [c for c in self.cases if first <= c.date <= last]

    def forecasts(self) -> np.ndarray:
        return np.array([c.members for c in self.cases], dtype=float).reshape(-1, self.spec.n_members)

    def observations(self) -> np.ndarray:
        return np.array([c.observation for c in self.cases], dtype=float)

    def regroup(self, spec: GroupSpec, order: Sequence[int] | None = None) -> "Archive":
        """Same cases under another group layout.

        ``order[j]`` is the current column feeding new column ``j``.  Without
        an explicit order, the two-group and three-group presets are mapped
        onto each other (odd perturbed members form the ``odd`` group, even
        ones the ``even`` group); any other layout of equal size keeps the
        column order.
        """
        if order is None:
            order = preset_order(self.spec, spec)
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(self.spec.n_members)) or spec.n_members != order.size:
            raise ValueError(f"cannot map layout {self.spec} onto {spec}")
        cases = tuple(
            ForecastCase(c.station, c.date, c.members[order], c.observation) for c in self.cases
        )
        return Archive(spec, cases)


def preset_order(source: GroupSpec, target: GroupSpec) -> np.ndarray:
    """Column order that maps ``source`` member columns onto ``target``."""
    m = source.n_members
    if m != target.n_members:
        raise ValueError(f"layouts {source} and {target} have different ensemble sizes")
    if (source, target) == (TWO_GROUP, THREE_GROUP):
        return np.array([0, 1, 3, 5, 7, 9, 2, 4, 6, 8, 10])
    if (source, target) == (THREE_GROUP, TWO_GROUP):
        return np.array([0, 1, 6, 2, 7, 3, 8, 4, 9, 5, 10])
    return np.arange(m)


# --- CSV ------------------------------------------------------------------


def _format_value(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def format_archive(archive: Archive) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["station", "date", *archive.spec.member_columns(), "obs"])
    for c in archive.cases:
        writer.writerow(
            [c.station, c.date.isoformat(), *(_format_value(v) for v in c.members), _format_value(c.observation)]
        )
    return buf.getvalue()


def write_archive(archive: Archive, path) -> None:
    Path(path).write_text(format_archive(archive), encoding="utf-8")


def _spec_from_header(columns: Sequence[str], lineno: int = 1) -> GroupSpec:
    groups: list[list] = []
    for col in columns:
        label, sep, idx = col.rpartition(".")
        if not sep or not label:
            raise ArchiveError(f"member column {col!r} is not of the form <group>.<index>", lineno)
        try:
            idx = int(idx)
        except ValueError:
            raise ArchiveError(f"member column {col!r} has a non-integer index", lineno) from None
        if groups and groups[-1][0] == label:
            groups[-1][1] += 1
        elif any(g[0] == label for g in groups):
            raise ArchiveError(f"members of group {label!r} are not contiguous", lineno)
        else:
            groups.append([label, 1])
        if idx != groups[-1][1]:
            raise ArchiveError(f"column {col!r} out of order (expected index {groups[-1][1]})", lineno)
    if not groups:
        raise ArchiveError("header has no member columns", lineno)
    return GroupSpec(tuple((g, n) for g, n in groups))


def _parse_float(text: str, what: str, lineno: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise ArchiveError(f"cannot parse {what} value {text!r}", lineno) from None
    if not math.isfinite(v) or v < 0:
        raise ArchiveError(f"{what} value {text!r} must be finite and nonnegative", lineno)
    return v


def parse_archive_text(text: str, spec: GroupSpec | None = None) -> Archive:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ArchiveError("archive is empty", 1) from None
    if len(header) < 4 or header[0] != "station" or header[1] != "date" or header[-1] != "obs":
        raise ArchiveError("header must be station,date,<group>.<idx>...,obs", 1)
    found = _spec_from_header(header[2:-1])
    if spec is not None and found != spec:
        unknown = [label for label in found.labels if label not in spec.labels]
        if unknown:
            raise ArchiveError(f"unknown group label(s) {unknown} for layout {spec}", 1)
        raise ArchiveError(f"header layout {found} does not match {spec}", 1)
    width = len(header)
    cases = []
    seen: dict[tuple[str, dt.date], int] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != width:
            raise ArchiveError(f"expected {width} fields, found {len(row)}", lineno)
        station = row[0].strip()
        if not station:
            raise ArchiveError("empty station id", lineno)
        try:
            date = dt.date.fromisoformat(row[1].strip())
        except ValueError:
            raise ArchiveError(f"bad ISO date {row[1]!r}", lineno) from None
        key = (station, date)
        if key in seen:
            raise ArchiveError(f"duplicate station/date {station},{date} (first on line {seen[key]})", lineno)
        seen[key] = lineno
        members = [_parse_float(v, "member", lineno) for v in row[2:-1]]
        obs = _parse_float(row[-1], "observation", lineno)
        cases.append(ForecastCase(station, date, np.array(members), obs))
    return Archive(found, tuple(cases))


def parse_archive(path, spec: GroupSpec | None = None) -> Archive:
    """Read an archive CSV; missing member cells become ``nan``."""
    return parse_archive_text(Path(path).read_text(encoding="utf-8"), spec)


# --- missing data and windows ---------------------------------------------


def filter_complete(cases: Iterable[ForecastCase]) -> tuple[list[ForecastCase], Counter]:
    """Keep cases usable for training; tally the others by reason.

    A case with missing members is tallied as ``incomplete-ensemble`` even
    if its observation is also missing.
    """
    usable = []
    skipped: Counter = Counter()
    for c in cases:
        if not c.complete_ensemble:
            skipped[INCOMPLETE] += 1
        elif not c.observed:
            skipped[UNOBSERVED] += 1
        else:
            usable.append(c)
    return usable, skipped


@dataclass(frozen=True)
class WindowPlan:
    """Verification dates and the calendar training window feeding each.

    The window for date ``d`` is the ``training_length`` calendar days
    ``d - training_length .. d - 1``; days without usable data simply
    contribute no cases.
    """

    training_length: int
    verification_dates: tuple[dt.date, ...]
    omitted: tuple[tuple[dt.date, str], ...] = ()
    explanation: str = ""

    def window(self, date: dt.date) -> tuple[dt.date, dt.date]:
        return date - dt.timedelta(days=self.training_length), date - dt.timedelta(days=1)

    def __len__(self):
        return len(self.verification_dates)


def training_cases(archive: Archive, date: dt.date, training_length: int) -> tuple[list[ForecastCase], Counter]:
    first = date - dt.timedelta(days=training_length)
    last = date - dt.timedelta(days=1)
    return filter_complete(archive.between(first, last))


def plan_windows(archive: Archive, training_length: int = 28, min_cases: int | None = None) -> WindowPlan:
    """Verification dates with at least ``min_cases`` usable training cases.

    Candidates are every calendar day from ``start + training_length`` to the
    end of the archive.  Days with no forecasts, or whose window holds too
    few complete cases, are listed in ``omitted``.
    """
    if training_length < 1:
        raise ValueError("training_length must be positive")
    minimum = 2 * archive.spec.n_groups if min_cases is None else min_cases
    span = archive.date_range
    if span is None:
        return WindowPlan(training_length, (), (), "archive is empty")
    start, end = span
    n_days = (end - start).days + 1
    if n_days < training_length + 1:
        return WindowPlan(
            training_length, (), (),
            f"archive spans {n_days} day(s); need at least {training_length + 1} "
            f"for a {training_length}-day training window",
        )
    by_date: dict[dt.date, list[ForecastCase]] = {}
    for c in archive.cases:
        by_date.setdefault(c.date, []).append(c)
    dates = []
    omitted = []
    day = start + dt.timedelta(days=training_length)
    while day <= end:
        if day not in by_date:
            omitted.append((day, "no-forecasts"))
        else:
            n_usable = 0
            for k in range(1, training_length + 1):
                n_usable += len(filter_complete(by_date.get(day - dt.timedelta(days=k), ()))[0])
            if n_usable < minimum:
                omitted.append((day, "insufficient-training"))
            else:
                dates.append(day)
        day += dt.timedelta(days=1)
    explanation = "" if dates else "no date has enough usable training data"
    return WindowPlan(training_length, tuple(dates), tuple(omitted), explanation)


# --- synthetic archives -------------------------------------------------------


def default_truth(spec: GroupSpec = TWO_GROUP) -> BmaModel:
    """A plausible wind-speed truth; two-group weights are 0.6 / 0.04."""
    if spec == TWO_GROUP:
        return BmaModel(spec, [0.6, 0.04], [0.5, 0.2], [0.9, 1.0], 1.0)
    m = spec.n_groups
    return BmaModel.normalized(spec, np.ones(m), np.full(m, 0.3), np.full(m, 0.95), 1.0)


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic archive settings.

    Each (station, day) draws a latent wind signal from a gamma distribution
    with the given mean and standard deviation.  Member ``l`` of group ``k``
    is ``N0(offset_k + scale_k * signal, member_noise**2)``; the observation
    is drawn from the truth BMA mixture evaluated at those members.
    ``missing_days`` (0-based day indices) get no forecasts at all and
    ``partial_days`` lose their last ``partial_count`` members.
    """

    n_stations: int = 10
    n_days: int = 176
    spec: GroupSpec = TWO_GROUP
    truth: BmaModel | None = None
    member_noise: float = 1.0
    signal_mean: float = 5.0
    signal_sd: float = 2.5
    member_offset: tuple[float, ...] | None = None
    member_scale: tuple[float, ...] | None = None
    start: dt.date = dt.date(2010, 10, 1)
    missing_days: tuple[int, ...] = ()
    partial_days: tuple[int, ...] = ()
    partial_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_stations < 1 or self.n_days < 1:
            raise ValueError("station and day counts must be positive")
        if self.member_noise < 0:
            raise ValueError("member_noise must be nonnegative")
        if not (self.signal_mean > 0 and self.signal_sd > 0):
            raise ValueError("signal mean and sd must be positive")
        if self.truth is None:
            object.__setattr__(self, "truth", default_truth(self.spec))
        if self.truth.spec != self.spec:
            raise ValueError("truth model layout does not match spec")
        m = self.spec.n_groups
        for name, default in (("member_offset", 0.0), ("member_scale", 1.0)):
            val = getattr(self, name)
            val = (default,) * m if val is None else tuple(float(v) for v in val)
            if len(val) != m:
                raise ValueError(f"{name} needs one entry per group")
            object.__setattr__(self, name, val)
        if not 0 <= self.partial_count < self.spec.n_members:
            raise ValueError("partial_count must leave at least one member")

    def dumps(self) -> str:
        lines = [
            f"stations={self.n_stations}",
            f"days={self.n_days}",
            f"start={self.start.isoformat()}",
            f"groups={self.spec}",
            f"member_noise={self.member_noise!r}",
            f"signal_mean={self.signal_mean!r}",
            f"signal_sd={self.signal_sd!r}",
            f"member_offset={','.join(repr(v) for v in self.member_offset)}",
            f"member_scale={','.join(repr(v) for v in self.member_scale)}",
            f"missing_days={','.join(str(d) for d in self.missing_days)}",
            f"partial_days={','.join(str(d) for d in self.partial_days)}",
            f"partial_count={self.partial_count}",
            f"seed={self.seed}",
        ]
        truth = "".join(
            line + "\n" for line in self.truth.dumps().splitlines() if ".members=" not in line
        )
        return "\n".join(lines) + "\n" + truth

    @classmethod
    def loads(cls, text: str) -> "SynthConfig":
        """Parse the flat ``key=value`` format written by :meth:`dumps`.

        Every key is optional; truth parameters (``group.<id>.weight`` etc.
        and ``sigma``) must be given all together or not at all.
        """
        kv = parse_key_values(text)
        spec = GroupSpec.parse(kv.pop("groups")) if "groups" in kv else TWO_GROUP
        model_keys = {k: v for k, v in kv.items() if k.startswith("group.") or k == "sigma"}
        for k in model_keys:
            kv.pop(k)
        truth = BmaModel.loads("\n".join(f"{k}={v}" for k, v in model_keys.items()), spec) if model_keys else None

        def floats(s):
            return tuple(float(v) for v in s.split(",") if v.strip())

        def ints(s):
            return tuple(int(v) for v in s.split(",") if v.strip())

        conv = {
            "stations": ("n_stations", int),
            "days": ("n_days", int),
            "start": ("start", dt.date.fromisoformat),
            "member_noise": ("member_noise", float),
            "signal_mean": ("signal_mean", float),
            "signal_sd": ("signal_sd", float),
            "member_offset": ("member_offset", floats),
            "member_scale": ("member_scale", floats),
            "missing_days": ("missing_days", ints),
            "partial_days": ("partial_days", ints),
            "partial_count": ("partial_count", int),
            "seed": ("seed", int),
        }
        args = {}
        for key, value in kv.items():
            if key not in conv:
                raise ValueError(f"unknown synthetic-config key {key!r}")
            name, fn = conv[key]
            try:
                args[name] = fn(value)
            except ValueError:
                raise ValueError(f"bad value for {key}: {value!r}") from None
        return cls(spec=spec, truth=truth, **args)


def station_ids(n: int) -> list[str]:
    width = max(2, len(str(n)))
    return [f"ST{i:0{width}d}" for i in range(1, n + 1)]


def generate_synthetic(config: SynthConfig) -> Archive:
    """Draw a synthetic archive; identical configs give identical archives."""
    rng = np.random.default_rng(config.seed)
    spec, truth = config.spec, config.truth
    d, s, m = config.n_days, config.n_stations, spec.n_members
    shape = config.signal_mean ** 2 / config.signal_sd ** 2
    scale = config.signal_sd ** 2 / config.signal_mean
    signal = rng.gamma(shape, scale, size=(d, s))

    g = spec.member_group
    offset = np.asarray(config.member_offset)[g]
    mscale = np.asarray(config.member_scale)[g]
    centre = offset + mscale * signal[..., None]
    if config.member_noise > 0:
        members = truncnorm.sample(centre, config.member_noise, rng)
    else:
        members = np.maximum(centre, 0.0)

    comp = rng.choice(m, size=(d, s), p=truth.member_weights)
    picked = np.take_along_axis(members, comp[..., None], axis=-1)[..., 0]
    loc = truth.alpha[g[comp]] + truth.beta[g[comp]] * picked
    obs = truncnorm.sample(loc, truth.sigma, rng)

    missing = set(config.missing_days)
    partial = set(config.partial_days)
    stations = station_ids(s)
    cases = []
    for i in range(d):
        if i in missing:
            continue
        date = config.start + dt.timedelta(days=i)
        for j, station in enumerate(stations):
            row = members[i, j].copy()
            if i in partial and config.partial_count:
                row[-config.partial_count:] = np.nan
            cases.append(ForecastCase(station, date, row, obs[i, j]))
    return Archive(spec, tuple(cases))


def resolve_groups(name_or_path: str) -> GroupSpec:
    """Map a preset name (``two-group``/``three-group``) or a spec file path to a layout."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    path = Path(name_or_path)
    if not path.exists():
        raise ValueError(f"unknown group preset or file {name_or_path!r}")
    return GroupSpec.parse(path.read_text(encoding="utf-8"))
