"""Command-line front end: ``tnbma {fit,predict,verify,simulate}``.

Every command writes into ``--out`` (created if needed).  Exit codes: 0 on
success, 2 for input errors, 3 for numerical failures or EM runs that hit
the iteration limit (diagnostics are still written in that case).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataio, estimation, mixture, verification
from .dataio import Archive, ArchiveError, SynthConfig
from .estimation import EmConfig, FitError, TrainingSet
from .mixture import BmaModel, ForecastCase, GroupSpec
from .quadrature import QuadratureError

log = logging.getLogger("tnbma")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

RAW = "raw-ensemble"


class InputError(Exception):
    """Bad flags, unreadable files or unusable data (exit code 2)."""


@dataclass(frozen=True)
class RunConfig:
    command: str
    archive: Path | None = None
    groups: str | None = None
    variant: str = "full-ml"
    training_days: int = 28
    levels: tuple[float, ...] = (66.7, 90.0)
    seed: int | None = 0
    out: Path = Path("tnbma-out")
    jobs: int | None = None
    tol: float = 1e-7
    max_iter: int = 500
    date: dt.date | None = None
    model: Path | None = None
    config: Path | None = None

    def __post_init__(self):
        for lv in self.levels:
            if not 0 < lv < 100:
                raise InputError(f"interval level {lv} must lie in (0, 100)")
        if self.training_days < 1:
            raise InputError("--training-days must be positive")
        if self.jobs is not None and self.jobs < 1:
            raise InputError("--jobs must be positive")

    @property
    def fractions(self) -> tuple[float, ...]:
        return tuple(lv / 100.0 for lv in self.levels)

    def em_config(self, variant: str) -> EmConfig:
        return EmConfig(variant=variant, tol=self.tol, max_iter=self.max_iter)


# --- helpers -----------------------------------------------------------------


def _load_archive(cfg: RunConfig) -> Archive:
    if cfg.archive is None:
        raise InputError("--archive is required")
    try:
        archive = dataio.parse_archive(cfg.archive)
    except FileNotFoundError:
        raise InputError(f"archive {cfg.archive} not found") from None
    if cfg.groups is not None:
        try:
            spec = dataio.resolve_groups(cfg.groups)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if spec != archive.spec:
            archive = archive.regroup(spec)
    if len(archive) == 0:
        raise InputError(f"archive {cfg.archive} holds no cases")
    return archive


def _plan(archive: Archive, cfg: RunConfig) -> list[dt.date]:
    plan = dataio.plan_windows(archive, cfg.training_days)
    for day, reason in plan.omitted:
        log.info("skipping %s: %s", day, reason)
    dates = list(plan.verification_dates)
    if cfg.date is not None:
        if cfg.date not in dates:
            raise InputError(f"{cfg.date} is not a verification date with enough training data")
        dates = [cfg.date]
    if not dates:
        raise InputError(f"no verification dates: {plan.explanation}")
    return dates


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _pool_map(fn, tasks: Sequence, jobs: int | None):
    """Ordered map, in a process pool when more than one worker is useful."""
    jobs = jobs or os.cpu_count() or 1
    if jobs == 1 or len(tasks) < 2:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


@dataclass(frozen=True)
class _WindowTask:
    date: dt.date
    spec: GroupSpec
    forecasts: np.ndarray
    observations: np.ndarray
    variants: tuple[str, ...]
    em: EmConfig
    test_cases: tuple[ForecastCase, ...] = ()
    levels: tuple[float, ...] = ()


@dataclass
class _WindowResult:
    date: dt.date
    fits: dict  # variant -> (model | None, diagnostics | None, error message | None)
    scores: dict  # forecast name -> CaseScores


def _run_window(task: _WindowTask) -> _WindowResult:
    training = TrainingSet(task.spec, task.forecasts, task.observations)
    fits, scores = {}, {}
    verifiable = [c for c in task.test_cases if c.observed]
    for variant in task.variants:
        try:
            result = estimation.fit(training, replace(task.em, variant=variant))
        except FitError as exc:
            fits[variant] = (None, None, str(exc))
            continue
        fits[variant] = (result.model, result.diagnostics, None)
        if verifiable:
            scores[variant] = verification.score_bma(result.model, verifiable, levels=task.levels)
    if verifiable:
        scores[RAW] = verification.score_raw_ensemble(verifiable, levels=task.levels)
    return _WindowResult(task.date, fits, scores)


def _window_tasks(archive: Archive, dates, cfg: RunConfig, variants, with_cases: bool):
    tasks = []
    for day in dates:
        usable, _ = dataio.training_cases(archive, day, cfg.training_days)
        training = TrainingSet.from_cases(archive.spec, usable)
        tasks.append(
            _WindowTask(
                day,
                archive.spec,
                training.forecasts,
                training.observations,
                tuple(variants),
                cfg.em_config(variants[0]),
                tuple(archive.on(day)) if with_cases else (),
                cfg.fractions,
            )
        )
    return tasks


def _fit_status(results: list[_WindowResult]) -> int:
    failed = [
        (r.date, v, err or "did not converge")
        for r in results
        for v, (_, diag, err) in r.fits.items()
        if err is not None or not diag.converged
    ]
    for day, variant, why in failed:
        log.warning("%s %s: %s", day, variant, why)
    return EXIT_NUMERIC if failed else EXIT_OK


def _diagnostics_csv(results: list[_WindowResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["date", "variant", "converged", "iterations", "loglik_initial", "loglik_final",
                "sigma_floor_hit", "error"])
    for r in results:
        for variant, (_, diag, err) in r.fits.items():
            if diag is None:
                w.writerow([r.date.isoformat(), variant, "false", "", "", "", "", err])
            else:
                w.writerow([
                    r.date.isoformat(), variant, str(diag.converged).lower(), diag.iterations,
                    f"{diag.loglik_initial:.10g}", f"{diag.loglik_final:.10g}",
                    str(diag.sigma_floor_hit).lower(), "",
                ])
    return buf.getvalue()


# --- commands ----------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> int:
    """Fit one model per verification date (or ``--date``) and write them out."""
    archive = _load_archive(cfg)
    dates = _plan(archive, cfg)
    results = _pool_map(_run_window, _window_tasks(archive, dates, cfg, [cfg.variant], False), cfg.jobs)
    for r in results:
        model, diag, err = r.fits[cfg.variant]
        stem = f"{r.date.isoformat()}.{cfg.variant}"
        if model is not None:
            _write(cfg.out / "models" / f"{stem}.model", model.dumps())
            _write(cfg.out / "diagnostics" / f"{stem}.txt", diag.to_text())
        else:
            _write(cfg.out / "diagnostics" / f"{stem}.txt", f"variant={cfg.variant}\nerror={err}\n")
    _write(cfg.out / "fit_summary.csv", _diagnostics_csv(results))
    log.info("fitted %d window(s)", len(results))
    return _fit_status(results)


def _predict_rows(model: BmaModel, cases: list[ForecastCase], levels: Sequence[float]) -> str:
    spec = model.spec
    cols = spec.member_columns()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["station", "date", "median"]
    for lv in levels:
        lab = verification.level_label(lv)
        head += [f"lower_{lab}", f"upper_{lab}"]
    head += ["renormalized"] + [f"weight.{c}" for c in cols] + [f"location.{c}" for c in cols] + ["sigma"]
    w.writerow(head)
    for c in cases:
        if not np.any(c.present):
            log.warning("%s %s has no members; skipped", c.station, c.date)
            continue
        weights = model.component_weights(c.members)
        loc = np.where(c.present, model.locations(np.nan_to_num(c.members, nan=0.0)), np.nan)
        row = [c.station, c.date.isoformat(), repr(float(mixture.predictive_median(model, c, allow_missing=True)))]
        for lv in levels:
            lo, hi = mixture.central_interval(model, c, lv, allow_missing=True)
            row += [repr(float(lo)), repr(float(hi))]
        row.append(str(not c.complete_ensemble).lower())
        row += [repr(float(v)) for v in weights]
        row += ["" if np.isnan(v) else repr(float(v)) for v in loc]
        row.append(repr(model.sigma))
        w.writerow(row)
    return buf.getvalue()


def cmd_predict(cfg: RunConfig) -> int:
    """Predictive medians, intervals and component parameters for one date."""
    archive = _load_archive(cfg)
    if cfg.date is None:
        raise InputError("--date is required for predict")
    cases = archive.on(cfg.date)
    if not cases:
        raise InputError(f"no cases on {cfg.date}")
    if cfg.model is not None:
        try:
            model = BmaModel.loads(Path(cfg.model).read_text(encoding="utf-8"), archive.spec)
        except FileNotFoundError:
            raise InputError(f"model {cfg.model} not found") from None
        status = EXIT_OK
    else:
        usable, _ = dataio.training_cases(archive, cfg.date, cfg.training_days)
        try:
            training = TrainingSet.from_cases(archive.spec, usable)
        except ValueError as exc:
            raise InputError(f"cannot fit a model for {cfg.date}: {exc}") from None
        result = estimation.fit(training, cfg.em_config(cfg.variant))
        model = result.model
        stem = f"{cfg.date.isoformat()}.{cfg.variant}"
        _write(cfg.out / "models" / f"{stem}.model", model.dumps())
        _write(cfg.out / "diagnostics" / f"{stem}.txt", result.diagnostics.to_text())
        status = EXIT_OK if result.diagnostics.converged else EXIT_NUMERIC
    _write(cfg.out / f"predict_{cfg.date.isoformat()}.csv", _predict_rows(model, cases, cfg.fractions))
    return status


def cmd_verify(cfg: RunConfig) -> int:
    """Rolling fit-then-score over the window plan for every variant and the raw ensemble."""
    archive = _load_archive(cfg)
    dates = _plan(archive, cfg)
    variants = estimation.VARIANTS if cfg.variant == "all" else (cfg.variant,)
    tasks = _window_tasks(archive, dates, cfg, list(variants), True)
    results = _pool_map(_run_window, tasks, cfg.jobs)

    names = [v for v in variants] + [RAW]
    reports = {}
    for name in names:
        parts = [r.scores[name] for r in results if name in r.scores]
        if parts:
            reports[name] = verification.assemble_report(verification.CaseScores.concat(parts))
    if not reports:
        raise InputError("no observed cases on any verification date")

    out = cfg.out
    _write(out / "report.txt", verification.format_report_table(reports))
    _write(out / "report.csv", verification.reports_to_csv(reports))
    _write(out / "ks_summary.csv", verification.format_ks_summary(reports))
    _write(out / "fit_summary.csv", _diagnostics_csv(results))
    for name in variants:
        parts = [r.scores[name] for r in results if name in r.scores]
        if parts:
            pit = verification.CaseScores.concat(parts).pit
            _write(out / f"pit_histogram_{name}.csv", verification.histogram_csv(verification.pit_histogram(pit), "pit"))
    verified = [c for day in dates for c in archive.on(day)]
    counts, skipped = verification.rank_histogram(verified, np.random.default_rng(cfg.seed))
    _write(out / "rank_histogram.csv", verification.histogram_csv(counts, "rank"))
    try:
        contain = verification.ensemble_containment(verified)
    except ValueError:
        contain = float("nan")
    m = archive.spec.n_members
    _write(
        out / "ensemble_summary.txt",
        f"verification_dates={len(dates)}\n"
        f"rank_histogram_skipped={skipped}\n"
        f"ensemble_containment_percent={contain:.6g}\n"
        f"nominal_containment_percent={100.0 * (m - 1) / (m + 1):.6g}\n",
    )
    sys.stdout.write(verification.format_report_table(reports))
    return _fit_status(results)


def cmd_simulate(cfg: RunConfig) -> int:
    """Write a synthetic archive (and the config that produced it)."""
    if cfg.config is not None:
        try:
            synth = SynthConfig.loads(Path(cfg.config).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise InputError(f"config {cfg.config} not found") from None
    else:
        synth = SynthConfig()
    if cfg.groups is not None:
        spec = dataio.resolve_groups(cfg.groups)
        if spec != synth.spec:
            synth = replace(synth, spec=spec, truth=None, member_offset=None, member_scale=None)
    if cfg.seed is not None:
        synth = replace(synth, seed=cfg.seed)
    archive = dataio.generate_synthetic(synth)
    _write(cfg.out / "archive.csv", dataio.format_archive(archive))
    _write(cfg.out / "synth.cfg", synth.dumps())
    print(f"seed={synth.seed} cases={len(archive)} -> {cfg.out / 'archive.csv'}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "verify": cmd_verify, "simulate": cmd_simulate}


# --- argument parsing ----------------------------------------------------------


def _levels(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not vals or any(not 0 < v < 100 for v in vals):
        raise argparse.ArgumentTypeError("levels must be percentages in (0, 100)")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tnbma", description="Truncated-normal BMA calibration of wind-speed ensembles.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, variant_default, allow_all=False):
        sp.add_argument("--archive", type=Path, help="archive CSV")
        sp.add_argument("--groups", help="two-group, three-group or a group spec file (default: archive header)")
        choices = list(estimation.VARIANTS) + (["all"] if allow_all else [])
        sp.add_argument("--variant", choices=choices, default=variant_default)
        sp.add_argument("--training-days", type=int, default=28)
        sp.add_argument("--levels", type=_levels, default=(66.7, 90.0), help="comma-separated percentages")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=Path, default=Path("tnbma-out"))
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
        sp.add_argument("--tol", type=float, default=1e-7, help="EM relative log-likelihood tolerance")
        sp.add_argument("--max-iter", type=int, default=500)

    sp = sub.add_parser("fit", help="fit a model for every verification date")
    common(sp, "full-ml")
    sp.add_argument("--date", type=dt.date.fromisoformat, help="fit this date only")

    sp = sub.add_parser("predict", help="predictive summary for one date")
    common(sp, "full-ml")
    sp.add_argument("--date", type=dt.date.fromisoformat, required=True)
    sp.add_argument("--model", type=Path, help="model file (default: fit on the training window)")

    sp = sub.add_parser("verify", help="rolling verification of all variants and the raw ensemble")
    common(sp, "all", allow_all=True)

    sp = sub.add_parser("simulate", help="write a synthetic archive")
    sp.add_argument("--config", type=Path, help="synthetic config file (key=value)")
    sp.add_argument("--groups", help="two-group, three-group or a group spec file")
    sp.add_argument("--seed", type=int, default=None, help="overrides the config seed (default 0)")
    sp.add_argument("--out", type=Path, default=Path("tnbma-out"))
    return p


def _setup_logging() -> None:
    level = os.environ.get("TNBMA_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    fields = {k: v for k, v in vars(args).items() if k in RunConfig.__dataclass_fields__}
    try:
        cfg = RunConfig(**fields)
        return COMMANDS[cfg.command](cfg)
    except (InputError, ArchiveError, mixture.MissingMembersError) as exc:
        print(f"tnbma: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FitError, QuadratureError, FloatingPointError) as exc:
        print(f"tnbma: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"tnbma: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
