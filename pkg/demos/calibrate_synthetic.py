"""Fit the three EM variants on one 28-day window of a synthetic archive and
compare their scores with the raw ensemble on the following day.

    python demos/calibrate_synthetic.py [seed]
"""

import sys

import numpy as np

from tnbma import dataio, estimation, verification
from tnbma.estimation import EmConfig, TrainingSet

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = dataio.SynthConfig(n_stations=10, n_days=60, seed=seed)
archive = dataio.generate_synthetic(cfg)
plan = dataio.plan_windows(archive, 28)
print(f"{len(archive)} cases, {len(plan)} verification dates, truth:\n{cfg.truth.dumps()}")

# score every date after a rolling 28-day fit
scores = {v: [] for v in estimation.VARIANTS}
raw = []
for date in plan.verification_dates:
    usable, _ = dataio.training_cases(archive, date, 28)
    training = TrainingSet.from_cases(archive.spec, usable)
    cases = archive.on(date)
    for variant in estimation.VARIANTS:
        model = estimation.fit(training, EmConfig(variant=variant)).model
        scores[variant].append(verification.score_bma(model, cases))
    raw.append(verification.score_raw_ensemble(cases))

reports = {v: verification.assemble_report(verification.CaseScores.concat(s)) for v, s in scores.items()}
reports["raw-ensemble"] = verification.assemble_report(verification.CaseScores.concat(raw))
print(verification.format_report_table(reports))
print(verification.format_ks_summary(reports))

last = estimation.fit(training, EmConfig()).model
print("last full-ML fit:")
print(last.dumps())
print("member weights sum:", float(np.sum(last.member_weights)))
