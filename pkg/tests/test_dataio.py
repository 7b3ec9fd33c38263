import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tnbma import dataio, mixture, verification
from tnbma.dataio import INCOMPLETE, UNOBSERVED, Archive, ArchiveError, SynthConfig
from tnbma.mixture import THREE_GROUP, TWO_GROUP, BmaModel, ForecastCase, GroupSpec

HEADER = "station,date," + ",".join(TWO_GROUP.member_columns()) + ",obs\n"
D0 = dt.date(2010, 10, 1)


def _row(station, date, members, obs):
    cells = ["" if v is None else str(v) for v in members]
    return f"{station},{date},{','.join(cells)},{'' if obs is None else obs}\n"


# --- parsing ------------------------------------------------------------------------------


def test_parse_example_row():
    members = [4.1, 3.9, 4.0, 4.3, 3.8, 4.4, 4.2, 3.6, 4.5, 3.9, 3.7]
    arch = dataio.parse_archive_text(HEADER + _row("BUD", "2010-10-01", members, 3.7))
    assert arch.spec == TWO_GROUP
    (case,) = arch.cases
    assert case.station == "BUD" and case.date == D0
    assert case.members.tolist() == members
    assert case.observation == 3.7
    assert case.complete_ensemble and case.observed


def test_empty_fields_are_missing():
    members = [4.1] * 8 + [None] * 3
    arch = dataio.parse_archive_text(HEADER + _row("BUD", "2010-10-01", members, None))
    case = arch.cases[0]
    assert case.present.tolist() == [True] * 8 + [False] * 3
    assert not case.complete_ensemble and not case.observed


@pytest.mark.parametrize(
    "body,lineno,needle",
    [
        (_row("BUD", "2010-10-01", [1.0] * 11, 2.0) + _row("BUD", "2010-10-01", [1.0] * 11, 2.0), 3, "duplicate"),
        (_row("BUD", "2010-10-01", [1.0] * 10, 2.0), 2, "expected 14 fields, found 13"),
        (_row("BUD", "2010-13-01", [1.0] * 11, 2.0), 2, "bad ISO date"),
        (_row("BUD", "2010-10-01", [1.0] * 10 + ["x"], 2.0), 2, "cannot parse"),
        (_row("BUD", "2010-10-01", [1.0] * 11, -2.0), 2, "nonnegative"),
        (_row("BUD", "2010-10-01", [1.0] * 11, "nan"), 2, "finite"),
        (_row("", "2010-10-01", [1.0] * 11, 2.0), 2, "empty station"),
    ],
)
def test_malformed_rows_report_line_numbers(body, lineno, needle):
    with pytest.raises(ArchiveError, match=needle) as exc:
        dataio.parse_archive_text(HEADER + body)
    assert exc.value.lineno == lineno
    assert str(exc.value).startswith(f"line {lineno}:")


def test_header_errors():
    with pytest.raises(ArchiveError, match="empty"):
        dataio.parse_archive_text("")
    with pytest.raises(ArchiveError, match="header"):
        dataio.parse_archive_text("site,date,a.1,obs\n")
    with pytest.raises(ArchiveError, match="not contiguous"):
        dataio.parse_archive_text("station,date,a.1,b.1,a.2,obs\n")
    with pytest.raises(ArchiveError, match="out of order"):
        dataio.parse_archive_text("station,date,a.2,obs\n")
    with pytest.raises(ArchiveError, match="unknown group"):
        dataio.parse_archive_text(HEADER, spec=THREE_GROUP)
    with pytest.raises(ArchiveError, match="does not match"):
        dataio.parse_archive_text("station,date,control.1,perturbed.1,obs\n", spec=TWO_GROUP)


def test_blank_lines_are_ignored_and_header_defines_layout():
    text = "station,date,x.1,x.2,y.1,obs\n\nA,2011-01-02,1,2,3,4\n,,,,,\n"
    arch = dataio.parse_archive_text(text)
    assert arch.spec == GroupSpec((("x", 2), ("y", 1)))
    assert len(arch) == 1


def test_write_parse_round_trip_is_bit_exact(tmp_path):
    arch = dataio.generate_synthetic(SynthConfig(n_stations=3, n_days=5, seed=4, partial_days=(2,)))
    path = tmp_path / "a.csv"
    dataio.write_archive(arch, path)
    back = dataio.parse_archive(path)
    assert back.spec == arch.spec
    assert back.cases == arch.cases
    for a, b in zip(arch.cases, back.cases):
        assert np.array_equal(a.members, b.members, equal_nan=True)
        assert a.observation == b.observation or (math.isnan(a.observation) and math.isnan(b.observation))
    assert dataio.format_archive(back) == path.read_text()


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(
            st.lists(st.one_of(st.none(), st.floats(0, 1e6, allow_nan=False)), min_size=3, max_size=3),
            st.one_of(st.none(), st.floats(0, 1e6, allow_nan=False)),
        ),
        min_size=1,
        max_size=6,
    )
)
def test_round_trip_property(rows):
    spec = GroupSpec.from_counts(a=1, b=2)
    cases = tuple(
        ForecastCase(f"S{i}", D0, np.array([math.nan if v is None else v for v in m]), math.nan if o is None else o)
        for i, (m, o) in enumerate(rows)
    )
    arch = Archive(spec, cases)
    back = dataio.parse_archive_text(dataio.format_archive(arch))
    assert dataio.format_archive(back) == dataio.format_archive(arch)
    for a, b in zip(arch.cases, back.cases):
        assert np.array_equal(a.members, b.members, equal_nan=True)


def test_archive_invariants_and_queries():
    spec = GroupSpec.from_counts(g=2)
    c = lambda s, d, o=1.0: ForecastCase(s, D0 + dt.timedelta(days=d), np.array([1.0, 2.0]), o)
    arch = Archive(spec, (c("B", 1), c("A", 1), c("A", 0)))
    assert [(x.station, x.date.day) for x in arch.cases] == [("A", 1), ("A", 2), ("B", 2)]
    assert arch.stations == ["A", "B"]
    assert arch.date_range == (D0, D0 + dt.timedelta(days=1))
    assert len(arch.on(D0 + dt.timedelta(days=1))) == 2
    assert len(arch.between(D0, D0)) == 1
    with pytest.raises(ArchiveError, match="duplicate"):
        Archive(spec, (c("A", 0), c("A", 0)))
    with pytest.raises(ArchiveError, match="members"):
        Archive(GroupSpec.from_counts(g=3), (c("A", 0),))


def test_regroup_presets():
    arch = dataio.generate_synthetic(SynthConfig(n_stations=2, n_days=2, seed=0))
    three = arch.regroup(THREE_GROUP)
    f2, f3 = arch.cases[0].members, three.cases[0].members
    assert f3[0] == f2[0]
    assert f3[1:6].tolist() == f2[[1, 3, 5, 7, 9]].tolist()
    assert f3[6:].tolist() == f2[[2, 4, 6, 8, 10]].tolist()
    assert three.regroup(TWO_GROUP).cases == arch.cases
    with pytest.raises(ValueError):
        arch.regroup(GroupSpec.from_counts(g=3))


# --- missing data and windows ------------------------------------------------------------------


def test_filter_complete_tallies_reasons():
    full = ForecastCase("A", D0, np.ones(3), 1.0)
    partial = ForecastCase("B", D0, np.array([1.0, np.nan, 1.0]), 1.0)
    both = ForecastCase("C", D0, np.array([1.0, np.nan, 1.0]), math.nan)
    unobserved = ForecastCase("D", D0, np.ones(3), math.nan)
    usable, skipped = dataio.filter_complete([full, partial, both, unobserved])
    assert usable == [full]
    assert skipped == {INCOMPLETE: 2, UNOBSERVED: 1}


def test_window_plan_on_paper_shaped_archive():
    arch = dataio.generate_synthetic(SynthConfig(seed=1))
    plan = dataio.plan_windows(arch, 28)
    assert plan.verification_dates[0] == D0 + dt.timedelta(days=28)  # day 29
    assert len(plan) == 176 - 28
    first, last = plan.window(plan.verification_dates[0])
    assert (first, last) == (D0, D0 + dt.timedelta(days=27))


def test_missing_day_shrinks_window_without_backfill():
    cfg = SynthConfig(n_stations=3, n_days=40, seed=2, missing_days=(10,), partial_days=(12,))
    arch = dataio.generate_synthetic(cfg)
    date = D0 + dt.timedelta(days=30)
    cases, skipped = dataio.training_cases(arch, date, 28)
    dates = {c.date for c in cases}
    assert min(dates) == date - dt.timedelta(days=28)
    assert max(dates) == date - dt.timedelta(days=1)
    assert D0 + dt.timedelta(days=10) not in dates
    assert D0 + dt.timedelta(days=12) not in dates
    assert len(cases) == 3 * (28 - 2)
    assert skipped == {INCOMPLETE: 3}
    plan = dataio.plan_windows(arch, 28)
    assert (D0 + dt.timedelta(days=10), "no-forecasts") not in plan.omitted  # before the first candidate
    assert date in plan.verification_dates


def test_missing_verification_day_is_listed():
    arch = dataio.generate_synthetic(SynthConfig(n_stations=2, n_days=35, seed=2, missing_days=(30,)))
    plan = dataio.plan_windows(arch, 28)
    assert (D0 + dt.timedelta(days=30), "no-forecasts") in plan.omitted
    assert D0 + dt.timedelta(days=30) not in plan.verification_dates


def test_short_or_sparse_archive_gives_empty_plan():
    arch = dataio.generate_synthetic(SynthConfig(n_stations=2, n_days=28, seed=0))
    plan = dataio.plan_windows(arch, 28)
    assert len(plan) == 0 and "29" in plan.explanation
    empty = dataio.plan_windows(Archive(TWO_GROUP, ()), 28)
    assert len(empty) == 0 and empty.explanation
    arch = dataio.generate_synthetic(SynthConfig(n_stations=1, n_days=31, seed=0))
    plan = dataio.plan_windows(arch, 28, min_cases=29)
    assert len(plan) == 0
    assert {reason for _, reason in plan.omitted} == {"insufficient-training"}
    with pytest.raises(ValueError):
        dataio.plan_windows(arch, 0)


@settings(max_examples=30, deadline=None)
@given(
    n_days=st.integers(3, 40),
    length=st.integers(1, 10),
    missing=st.sets(st.integers(0, 39), max_size=8),
    seed=st.integers(0, 10),
)
def test_windows_never_include_verification_date(n_days, length, missing, seed):
    cfg = SynthConfig(n_stations=2, n_days=n_days, seed=seed, missing_days=tuple(m for m in missing if m < n_days - 1))
    arch = dataio.generate_synthetic(cfg)
    plan = dataio.plan_windows(arch, length, min_cases=1)
    for date in plan.verification_dates:
        first, last = plan.window(date)
        assert last < date and (date - first).days == length
        cases, _ = dataio.training_cases(arch, date, length)
        assert cases and all(first <= c.date < date for c in cases)


# --- synthetic archives ------------------------------------------------------------------------


def test_synthetic_default_shape_and_determinism():
    cfg = SynthConfig(seed=5)
    a, b = dataio.generate_synthetic(cfg), dataio.generate_synthetic(cfg)
    assert len(a) == 1760 and len(a.stations) == 10 and len(a.dates) == 176
    assert dataio.format_archive(a) == dataio.format_archive(b)
    assert dataio.format_archive(a) != dataio.format_archive(dataio.generate_synthetic(SynthConfig(seed=6)))
    assert len(dataio.format_archive(a).splitlines()[0].split(",")) == 2 + 11 + 1


def test_synthetic_custom_layout_column_count():
    spec = GroupSpec.from_counts(c=1, p=4, q=2)
    arch = dataio.generate_synthetic(SynthConfig(n_stations=2, n_days=3, spec=spec))
    header = dataio.format_archive(arch).splitlines()[0].split(",")
    assert header == ["station", "date", "c.1", "p.1", "p.2", "p.3", "p.4", "q.1", "q.2", "obs"]


def test_synthetic_pit_uniform_with_noise_free_members():
    cfg = SynthConfig(n_stations=10, n_days=100, member_noise=0.0, seed=8)
    arch = dataio.generate_synthetic(cfg)
    u = mixture.predictive_cdf(cfg.truth, arch.forecasts(), arch.observations())
    assert verification.ks_uniform_test(u)[1] > 0.01
    assert np.all(arch.forecasts() >= 0)


def test_synth_config_round_trip_and_validation():
    truth = BmaModel(TWO_GROUP, [0.5, 0.05], [0.1, 0.2], [1.0, 0.9], 1.5)
    cfg = SynthConfig(n_stations=3, n_days=7, truth=truth, member_noise=0.5, missing_days=(1, 2), seed=9)
    back = SynthConfig.loads(cfg.dumps())
    assert back == cfg
    assert SynthConfig.loads("") == SynthConfig()
    assert SynthConfig.loads("groups=three-group\n".replace("three-group", str(THREE_GROUP))).spec == THREE_GROUP
    for bad in ("stations=0", "days=x", "colour=red", "member_noise=-1"):
        with pytest.raises(ValueError):
            SynthConfig.loads(bad)
    with pytest.raises(ValueError):
        SynthConfig(spec=THREE_GROUP, truth=truth)


def test_resolve_groups(tmp_path):
    assert dataio.resolve_groups("two-group") == TWO_GROUP
    assert dataio.resolve_groups("three-group") == THREE_GROUP
    path = tmp_path / "g.txt"
    path.write_text(str(GroupSpec.from_counts(a=3, b=8)))
    assert dataio.resolve_groups(str(path)).n_members == 11
    with pytest.raises(ValueError):
        dataio.resolve_groups("four-group")
