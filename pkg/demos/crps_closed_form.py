"""Closed-form CRPS of a truncated-normal mixture against brute-force
integration of the squared CDF gap, including heavily truncated components.

    python demos/crps_closed_form.py
"""

import numpy as np
from scipy import integrate

from tnbma import scoring, truncnorm


def crps_by_integration(w, loc, sigma, x):
    cdf = lambda y: float(np.sum(w * truncnorm.cdf(y, loc, sigma)))
    top = max(float(loc.max()), x) + 40 * sigma
    lo = integrate.quad(lambda y: cdf(y) ** 2, 0, x, limit=400)[0]
    hi = integrate.quad(lambda y: (1 - cdf(y)) ** 2, x, top, limit=400)[0]
    return lo + hi


rng = np.random.default_rng(1)
print(f"{'x':>7} {'closed form':>14} {'integration':>14} {'diff':>9}")
for _ in range(6):
    m = rng.integers(1, 5)
    w = rng.dirichlet(np.ones(m))
    loc = rng.uniform(-4, 8, m)
    sigma = rng.uniform(0.3, 2.0)
    x = rng.uniform(0, 10)
    closed = float(scoring.crps_components(w[None], loc[None], sigma, [x])[0])
    ref = crps_by_integration(w, loc, sigma, x)
    print(f"{x:7.3f} {closed:14.10f} {ref:14.10f} {closed - ref:9.1e}")

# components retaining almost no mass are integrated from their CDFs
for mu in (-3.0, -10.0, -40.0):
    print(f"E|X - 0.05| for N0({mu}, 1): {float(scoring.crps_term_S1(0.05, mu, 1.0)):.12f}")
