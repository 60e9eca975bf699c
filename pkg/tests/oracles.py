"""Independent oracles used by the test suite.

Everything here is implemented from first principles (dynamic programs,
brute-force enumeration, extended precision, closed forms) and never calls
the code paths it is used to check.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

LN2 = math.log(2.0)


def lattice_first_passage(k_units: int, n: int) -> tuple[float, float]:
    """Exact (P(mu > n), E[-S_n; mu > n]) for the +/-1 fair lattice walk.

    The walk starts at -k_units and mu is the first step with position >= 0;
    states are tracked by dynamic programming over the surviving positions.
    E[-S_n; mu > n] is reported in lattice units.
    """
    size = k_units + n + 2
    prob = np.zeros(size)            # prob[j] = mass at position -(j+1)
    prob[k_units - 1] = 1.0
    for _ in range(n):
        nxt = np.zeros_like(prob)
        nxt[1:] += 0.5 * prob[:-1]   # down: -(j+1) -> -(j+2)
        nxt[:-1] += 0.5 * prob[1:]   # up:   -(j+2) -> -(j+1); -1 -> 0 absorbs
        prob = nxt
    survive = float(prob.sum())
    mean_depth = float(prob @ np.arange(1, size + 1))
    return survive, mean_depth


def poisson_survival_along(means: list[float]) -> float:
    """Per-sequence survival 1 - F_n(...F_1(0)) for scalar Poisson laws.

    Straightforward complement iteration in plain Python floats.
    """
    v = 1.0
    for m in means:
        v = -math.expm1(-m * v)
    return v


def bernoulli_survival(n: int) -> float:
    """Survival of the deterministic law (0 or 1 child, prob 1/2): 2^-n."""
    return 0.5**n


def enumerate_scalar_survival(weights, means, n: int) -> float:
    """Brute-force exact survival for a scalar Poisson mixture."""
    total = 0.0
    for seq in itertools.product(range(len(weights)), repeat=n):
        w = math.prod(weights[k] for k in seq)
        total += w * poisson_survival_along([means[k] for k in seq])
    return total


def enumerate_matrix_survival(weights, pgf_complements, p: int, n: int, i: int) -> float:
    """Brute-force exact survival for a finite mixture of multitype laws.

    ``pgf_complements[k]`` is the scenario-k complement map v -> 1 - F(1-v).
    """
    total = 0.0
    for seq in itertools.product(range(len(weights)), repeat=n):
        w = math.prod(weights[k] for k in seq)
        v = np.ones(p)
        for k in seq:
            v = pgf_complements[k](v)
        total += w * v[i - 1]
    return total


def poisson_complement(mean_matrix: np.ndarray):
    """Complement map v -> 1 - F(1-v) of a Poisson-product law (oracle-side)."""
    M = np.asarray(mean_matrix, dtype=float)
    return lambda v: -np.expm1(-(M @ v))


def longdouble_product(mats: list[np.ndarray]) -> np.ndarray:
    """Left product M_n ... M_1 in extended precision."""
    acc = np.eye(mats[0].shape[0], dtype=np.longdouble)
    for m in mats:
        acc = np.asarray(m, dtype=np.longdouble) @ acc
    return acc


def scalar_moment_rate(weights, means, theta: float) -> float:
    """Closed form lam(theta) = E[m^theta] for scalar mixtures."""
    return float(sum(w * m**theta for w, m in zip(weights, means)))


def scalar_slope_at(weights, means, theta: float) -> float:
    """Closed form Lambda'(theta) = E[m^theta log m] / E[m^theta]."""
    num = sum(w * m**theta * math.log(m) for w, m in zip(weights, means))
    den = sum(w * m**theta for w, m in zip(weights, means))
    return float(num / den)
