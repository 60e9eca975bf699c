"""Reference environment models used by tests, configs and docs."""

from __future__ import annotations

import numpy as np

from .env import EnvModel, EnvPoint, OffspringLaw


def reference_scalar() -> EnvModel:
    """Single-type Poisson mixture: means {0.5, 2} with weights (0.8, 0.2).

    Already calibrated: E[M] = 0.8 and E[M log M] = 0, so the growth curve
    has zero slope at 1; under the size-biased tilt the log walk takes
    +/- log 2 steps with probability 1/2 each (a lattice walk with exact
    first-passage and optional-stopping oracles).
    """
    return EnvModel(weights=np.array([0.8, 0.2]),
                    points=(EnvPoint.poisson([[0.5]]), EnvPoint.poisson([[2.0]])),
                    declared_delta=4.0)


def uncalibrated_scalar() -> EnvModel:
    """Single-type Poisson mixture with means {0.25, 1}, equal weights.

    Calibrates with c = exp(E[M log M]/E[M]) ~ 1.31951.
    """
    return EnvModel(weights=np.array([0.5, 0.5]),
                    points=(EnvPoint.poisson([[0.25]]), EnvPoint.poisson([[1.0]])),
                    declared_delta=4.0)


def reference_p2() -> EnvModel:
    """Two-type, two-scenario Poisson model (non-commuting mean matrices)."""
    m_a = [[0.2, 0.35], [0.3, 0.2]]
    m_b = [[1.0, 0.55], [0.6, 0.9]]
    return EnvModel(weights=np.array([0.7, 0.3]),
                    points=(EnvPoint.poisson(m_a), EnvPoint.poisson(m_b)),
                    declared_delta=3.0)


def deterministic_scalar(mean: float) -> EnvModel:
    """One Poisson scenario with scalar mean; a degenerate environment."""
    return EnvModel(weights=np.array([1.0]),
                    points=(EnvPoint.poisson([[mean]]),),
                    declared_delta=2.0)


def bernoulli_control() -> EnvModel:
    """Deterministic single-type law with 0 or 1 child, probability 1/2 each.

    Strongly subcritical negative control: survival equals 2^-n exactly, so
    the scaled statistic p_n * lam^-n * sqrt(n) grows like sqrt(n) and the
    flat-band check must fail.
    """
    law = OffspringLaw.table(support=[[0], [1]], probs=[0.5, 0.5])
    return EnvModel(weights=np.array([1.0]),
                    points=(EnvPoint.table([law]),),
                    declared_delta=2.0)


def rank_one_p(p: int, a: float = 0.3) -> EnvModel:
    """Deterministic all-equal-entries matrix: rank-one projective collapse."""
    return EnvModel(weights=np.array([1.0]),
                    points=(EnvPoint.poisson(np.full((p, p), a)),),
                    declared_delta=2.0)
