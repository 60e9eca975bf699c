"""Offspring laws, environment realizations, and the i.i.d. environment model.

An environment realization (:class:`EnvPoint`) bundles one offspring law per
parent type with its closed-form mean matrix, Hessians and the derived
second-moment scalars.  The environment model (:class:`EnvModel`) is a finite
mixture of realizations: keeping the state space finite makes transfer
operators exact finite sums and enables K^n enumeration oracles downstream.

Two offspring families are supported:

  * ``poisson-product``: given a parent of type i, the numbers of children of
    each type are independent Poissons with means ``mean_row[i]``; the
    generating function is exp(m_i . (s - 1)).
  * ``finite-table``: an explicit finite support of offspring vectors with
    probabilities; the generating function is the finite sum of monomials.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateModelError, DeltaBoundError, DomainError, UnsupportedFamilyError
from .matprod import matrix_norm

POISSON_PRODUCT = "poisson-product"
FINITE_TABLE = "finite-table"

_WEIGHT_TOL = 1e-12


# ---------------------------------------------------------------------------
# offspring laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OffspringLaw:
    """One parent type's offspring distribution on N_0^p."""

    family: str
    mean_row: Optional[np.ndarray] = None     # poisson-product: (p,)
    support: Optional[np.ndarray] = None      # finite-table: (S, p) integer counts
    probs: Optional[np.ndarray] = None        # finite-table: (S,)

    def __post_init__(self):
        if self.family == POISSON_PRODUCT:
            row = np.asarray(self.mean_row, dtype=float)
            if row.ndim != 1 or not np.all(np.isfinite(row)) or np.any(row < 0):
                raise DomainError("poisson-product mean row must be finite and >= 0")
            object.__setattr__(self, "mean_row", row)
        elif self.family == FINITE_TABLE:
            pts = np.asarray(self.support, dtype=np.int64)
            pr = np.asarray(self.probs, dtype=float)
            if pts.ndim != 2 or pts.shape[0] != pr.shape[0]:
                raise DomainError("finite-table support and probs must align")
            if np.any(pts < 0):
                raise DomainError("finite-table support must be nonnegative counts")
            if np.any(pr < 0) or abs(pr.sum() - 1.0) > _WEIGHT_TOL:
                raise DomainError("finite-table masses must be >= 0 and sum to 1")
            object.__setattr__(self, "support", pts)
            object.__setattr__(self, "probs", pr)
        else:
            raise UnsupportedFamilyError(f"unknown offspring family {self.family!r}")

    @property
    def p(self) -> int:
        if self.family == POISSON_PRODUCT:
            return self.mean_row.shape[0]
        return self.support.shape[1]

    @classmethod
    def poisson(cls, mean_row: Sequence[float]) -> "OffspringLaw":
        return cls(family=POISSON_PRODUCT, mean_row=np.asarray(mean_row, dtype=float))

    @classmethod
    def table(cls, support: Sequence[Sequence[int]], probs: Sequence[float]) -> "OffspringLaw":
        return cls(family=FINITE_TABLE, support=np.asarray(support, dtype=np.int64),
                   probs=np.asarray(probs, dtype=float))


def _law_pgf(law: OffspringLaw, s: np.ndarray) -> float:
    """Generating function value, without domain checks (s may exceed 1)."""
    if law.family == POISSON_PRODUCT:
        return float(np.exp(np.dot(law.mean_row, s - 1.0)))
    # finite sum of monomials prod_j s_j^{z_j}  (numpy gives 0**0 == 1)
    terms = np.prod(s[None, :] ** law.support, axis=1)
    return float(np.dot(law.probs, terms))


def _law_complement(law: OffspringLaw, v: np.ndarray) -> float:
    """1 - F(1 - v), cancellation-free (v is the survival-side argument)."""
    if law.family == POISSON_PRODUCT:
        return float(-np.expm1(-np.dot(law.mean_row, v)))
    # 1 - sum_z p_z prod_j (1-v_j)^{z_j} = -sum_z p_z expm1(sum z_j log1p(-v_j))
    with np.errstate(divide="ignore", invalid="ignore"):
        l1p = np.log1p(-np.minimum(v, 1.0))        # <= 0, -inf at v == 1
        expo = np.where(law.support > 0, law.support * l1p[None, :], 0.0).sum(axis=1)
    return float(-np.dot(law.probs, np.expm1(expo)))


def _law_moments(law: OffspringLaw) -> tuple[np.ndarray, np.ndarray]:
    """(mean vector, second factorial-moment matrix) in closed form."""
    if law.family == POISSON_PRODUCT:
        m = law.mean_row
        return m.copy(), np.outer(m, m)
    z = law.support.astype(float)
    pr = law.probs
    mean = pr @ z
    second = np.einsum("s,sk,sl->kl", pr, z, z)
    second[np.diag_indices_from(second)] -= mean   # E[Z_k (Z_k - 1)] on diagonal
    return mean, second


# ---------------------------------------------------------------------------
# environment realizations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvPoint:
    """One environment realization: p offspring laws plus derived moments."""

    laws: tuple[OffspringLaw, ...]
    mean_matrix: np.ndarray = field(init=False)         # (p, p)
    hessians: np.ndarray = field(init=False)            # (p, p, p)
    second_moment_sum: np.ndarray = field(init=False)   # scalar: sum_i |B_i|
    second_moment_ratio: np.ndarray = field(init=False) # scalar: ... / |M|^2

    def __post_init__(self):
        p = self.laws[0].p
        if any(law.p != p for law in self.laws) or len(self.laws) != p:
            raise DomainError("need exactly p offspring laws of dimension p")
        M = np.empty((p, p))
        B = np.empty((p, p, p))
        for i, law in enumerate(self.laws):
            M[i], B[i] = _law_moments(law)
        nM = matrix_norm(M)
        if nM <= 0.0:
            raise DegenerateModelError("mean matrix has zero norm")
        bsum = float(sum(matrix_norm(B[i]) for i in range(p)))
        object.__setattr__(self, "mean_matrix", M)
        object.__setattr__(self, "hessians", B)
        object.__setattr__(self, "second_moment_sum", bsum)
        object.__setattr__(self, "second_moment_ratio", bsum / nM**2)

    @property
    def p(self) -> int:
        return len(self.laws)

    @classmethod
    def poisson(cls, mean_matrix: Sequence[Sequence[float]]) -> "EnvPoint":
        M = np.asarray(mean_matrix, dtype=float)
        return cls(laws=tuple(OffspringLaw.poisson(row) for row in M))

    @classmethod
    def table(cls, laws: Sequence[OffspringLaw]) -> "EnvPoint":
        return cls(laws=tuple(laws))


def pgf_eval(point: EnvPoint, i: int, s: Sequence[float]) -> float:
    """Generating function of type ``i`` (1-based) at s in [0,1]^p."""
    s = np.asarray(s, dtype=float)
    if s.shape != (point.p,) or np.any(s < 0.0) or np.any(s > 1.0):
        raise DomainError("s must lie in [0,1]^p")
    if not 1 <= i <= point.p:
        raise DomainError(f"type index {i} out of range 1..{point.p}")
    return _law_pgf(point.laws[i - 1], s)


def survival_complement_step(point: EnvPoint, v: Sequence[float]) -> np.ndarray:
    """One generation of the survival complement: component i is 1 - F_i(1 - v).

    Evaluated without cancellation, so tiny survival masses keep full
    relative precision.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (point.p,) or np.any(v < 0.0) or np.any(v > 1.0):
        raise DomainError("v must lie in [0,1]^p")
    return np.array([_law_complement(law, v) for law in point.laws])


def complement_step_batch(point: EnvPoint, V: np.ndarray) -> np.ndarray:
    """Vectorized survival-complement step over rows of V (N, p) -> (N, p)."""
    V = np.asarray(V, dtype=float)
    if all(law.family == POISSON_PRODUCT for law in point.laws):
        return -np.expm1(-(V @ point.mean_matrix.T))
    out = np.empty_like(V)
    with np.errstate(divide="ignore", invalid="ignore"):
        l1p = np.log1p(-np.minimum(V, 1.0))
        for i, law in enumerate(point.laws):
            expo = np.where(law.support[None, :, :] > 0,
                            law.support[None, :, :] * l1p[:, None, :], 0.0).sum(axis=2)
            out[:, i] = -(np.expm1(expo) @ law.probs)
    return out


class Moments(tuple):
    """(mean_matrix, hessians, second_moment_sum, second_moment_ratio)."""

    __slots__ = ()

    def __new__(cls, M, B, bsum, ratio):
        return super().__new__(cls, (M, B, bsum, ratio))

    mean_matrix = property(lambda self: self[0])
    hessians = property(lambda self: self[1])
    second_moment_sum = property(lambda self: self[2])
    second_moment_ratio = property(lambda self: self[3])


def moments(point: EnvPoint) -> Moments:
    """Closed-form mean matrix, Hessians and derived scalars of a realization."""
    if matrix_norm(point.mean_matrix) <= 0.0:
        raise DegenerateModelError("mean matrix has zero norm")
    return Moments(point.mean_matrix, point.hessians,
                   point.second_moment_sum, point.second_moment_ratio)


# ---------------------------------------------------------------------------
# the environment model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvModel:
    """Finite-state i.i.d. environment: scenarios with mixture weights.

    ``declared_delta`` is the claimed bound on every scenario's mean-matrix
    entry ratio.  Scenarios with strictly positive entries are checked
    against it at construction; scenarios with zero entries are admitted
    here and flagged as hard failures by :func:`check_conditions`.
    """

    weights: np.ndarray
    points: tuple[EnvPoint, ...]
    declared_delta: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != len(self.points) or w.shape[0] < 1:
            raise DomainError("need one weight per scenario, K >= 1")
        if np.any(w <= 0.0) or abs(w.sum() - 1.0) > _WEIGHT_TOL:
            raise DomainError("weights must be positive and sum to 1")
        if not self.declared_delta > 1.0:
            raise DomainError("declared_delta must exceed 1")
        p = self.points[0].p
        if any(pt.p != p for pt in self.points):
            raise DomainError("all scenarios must share the same type count")
        for k, pt in enumerate(self.points):
            M = pt.mean_matrix
            if M.min() > 0.0:
                ratio = M.max() / M.min()
                if ratio > self.declared_delta * (1.0 + 1e-12):
                    raise DeltaBoundError(
                        f"scenario {k}: entry ratio {ratio:.6g} exceeds "
                        f"declared delta {self.declared_delta:.6g}")
        object.__setattr__(self, "weights", w)

    @property
    def K(self) -> int:
        return len(self.points)

    @property
    def p(self) -> int:
        return self.points[0].p

    @property
    def mean_matrices(self) -> np.ndarray:
        return np.stack([pt.mean_matrix for pt in self.points])

    def all_poisson(self) -> bool:
        return all(law.family == POISSON_PRODUCT
                   for pt in self.points for law in pt.laws)


def sample_scenario(model: EnvModel, rng: np.random.Generator) -> int:
    """Draw one scenario index with the mixture weights."""
    u = rng.random()
    return int(np.searchsorted(np.cumsum(model.weights), u, side="right").clip(0, model.K - 1))


def sample_scenarios(model: EnvModel, size, rng: np.random.Generator) -> np.ndarray:
    """Vectorized scenario draws (same law as repeated sample_scenario)."""
    u = rng.random(size)
    return np.searchsorted(np.cumsum(model.weights), u, side="right").clip(0, model.K - 1)


def scale_means(model: EnvModel, c: float) -> EnvModel:
    """Scale every Poisson mean row by c > 0 (entry ratios are unchanged)."""
    if not c > 0.0:
        raise DomainError("scale factor must be positive")
    if not model.all_poisson():
        raise UnsupportedFamilyError("scale_means requires all-poisson scenarios")
    new_points = tuple(EnvPoint.poisson(c * pt.mean_matrix) for pt in model.points)
    return EnvModel(weights=model.weights.copy(), points=new_points,
                    declared_delta=model.declared_delta)


# ---------------------------------------------------------------------------
# model assumptions report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    note: str = ""


@dataclass(frozen=True)
class ConditionsReport:
    """Assumption checks for the survival asymptotics.

    theta_domain    : finiteness of E|M|^theta (automatic for finite mixtures)
    entry_ratio     : positive entries with max/min ratio within declared_delta
    log_growth      : inf over directions of P(log|Mx| > delta) stays positive
    log_second_moment: every scenario has positive second-moment ratio, with
                      E[|M| * |log ratio|^2] reported
    drift_at_zero / drift_at_one: Lyapunov-curve slopes entering the
                      intermediately subcritical hypotheses.
    """

    theta_domain: CheckResult
    entry_ratio: CheckResult
    log_growth: CheckResult
    log_second_moment: CheckResult
    drift_at_zero: float
    drift_at_one: float
    drift_zero_negative: bool
    drift_one_zero: bool
    passed: bool

    def checks(self) -> list[CheckResult]:
        return [self.theta_domain, self.entry_ratio,
                self.log_growth, self.log_second_moment]


def _simplex_grid(p: int, nodes: int) -> np.ndarray:
    """Deterministic direction probes covering the simplex."""
    if p == 1:
        return np.ones((1, 1))
    if p == 2:
        t = np.linspace(0.0, 1.0, nodes)
        return np.stack([t, 1.0 - t], axis=1)
    # p == 3: triangular lattice with about `nodes` points per edge
    m = max(2, int(np.sqrt(2 * nodes)))
    pts = [(i / m, j / m, (m - i - j) / m)
           for i in range(m + 1) for j in range(m + 1 - i)]
    return np.asarray(pts)


def check_conditions(model: EnvModel,
                     theta_probes: Sequence[float] = (0.5, 1.0, 2.0),
                     delta: float = 0.05,
                     budget: int = 512,
                     direction_nodes: int = 201,
                     rng: Optional[np.random.Generator] = None,
                     drift_tol: float = 1e-6,
                     h_theta: float = 1e-3) -> ConditionsReport:
    """Check the standing assumptions on a finite-state model.

    ``budget`` random simplex directions supplement the deterministic grid
    for the growth check when p >= 2; ``rng`` fixes them (deterministic for
    a given seed).  Slopes of the Lyapunov curve at 0+ and 1 are estimated
    with the spectral module and reported against the subcritical
    hypotheses.
    """
    mats = model.mean_matrices
    w = model.weights

    # finiteness of moments: exact finite sums for a finite mixture
    max_probe = float(max(theta_probes)) if len(theta_probes) else 1.0
    norms = np.array([matrix_norm(M) for M in mats])
    worst = float((w * norms**max_probe).sum())
    theta_domain = CheckResult("theta_domain", True, worst, np.inf,
                               note="finite mixture: E|M|^theta finite for all theta > 0")

    # strict positivity and entry-ratio bound
    min_entry = float(min(M.min() for M in mats))
    if min_entry <= 0.0:
        entry_ratio = CheckResult("entry_ratio", False, np.inf, model.declared_delta,
                                  note="zero or negative mean-matrix entry")
    else:
        worst_ratio = float(max(M.max() / M.min() for M in mats))
        entry_ratio = CheckResult("entry_ratio", worst_ratio <= model.declared_delta,
                                  worst_ratio, model.declared_delta)

    # uniform expansion probability: inf over directions of P(log|Mx| > delta)
    dirs = _simplex_grid(model.p, direction_nodes)
    if model.p >= 2 and budget > 0:
        gen = rng if rng is not None else np.random.default_rng(0)
        extra = gen.dirichlet(np.ones(model.p), size=budget)
        dirs = np.vstack([dirs, extra])
    img_norms = np.einsum("kij,nj->kn", mats, dirs)     # |M_k x| as column sums
    grow = (np.log(np.maximum(img_norms, 1e-300)) > delta).astype(float)
    prob = w @ grow
    inf_prob = float(prob.min())
    log_growth = CheckResult("log_growth", inf_prob > 0.0, inf_prob, 0.0,
                             note=f"delta={delta:g}")

    # positive second-moment ratios with the log-moment reported (exponent 2)
    ratios = np.array([pt.second_moment_ratio for pt in model.points])
    if np.any(ratios <= 0.0):
        log_second = CheckResult("log_second_moment", False, np.inf, np.inf,
                                 note="a scenario has zero second factorial moment")
    else:
        val = float((w * norms * np.abs(np.log(ratios))**2).sum())
        log_second = CheckResult("log_second_moment", True, val, np.inf)

    # Lyapunov slopes (lazy import: spectral builds on this module)
    from . import spectral

    drift0 = drift1 = np.nan
    if entry_ratio.passed:
        grid = spectral.default_grid(model.p)
        drift0 = spectral.lyapunov_slope(model, 0.0, grid=grid, h_theta=h_theta)
        drift1 = spectral.lyapunov_slope(model, 1.0, grid=grid, h_theta=h_theta)

    drift_zero_negative = bool(drift0 < 0.0)
    drift_one_zero = bool(abs(drift1) <= drift_tol)
    passed = all(c.passed for c in (theta_domain, entry_ratio, log_growth, log_second))
    return ConditionsReport(theta_domain, entry_ratio, log_growth, log_second,
                            float(drift0), float(drift1),
                            drift_zero_negative, drift_one_zero, passed)
