"""Numerical checks of the survival-representation machinery.

The reciprocal of the per-sequence survival mass satisfies an exact
telescoping identity: it equals the reciprocal of the linearized (mean
matrix) mass plus one nonnegative correction per generation.  The
correction (the linearization gap) is bounded by delta p^2 times the
scenario's second-moment ratio, which pins the damping factor of the
survival mass away from zero along the whole sequence.  Everything here is
evaluated on explicit sequences in normalized-product form so the checks
stay exact at machine precision for n up to the configured cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import EnvModel, EnvPoint, survival_complement_step
from .errors import BudgetError, DomainError
from .matprod import matrix_norm
from .spectral import SpectralSolution
from .tilted import DEFAULT_CHUNK, HarmonicTable, _scalar_kernel, _step_batch

IDENTITY_N_CAP = 30


# ---------------------------------------------------------------------------
# the linearization gap (per-generation correction)
# ---------------------------------------------------------------------------


def linearization_gap(point: EnvPoint, weight_matrix: np.ndarray,
                      s: Sequence[float]) -> float:
    """|a|/|a (1 - f(s))| - |a|/|a m (1 - s)| for a nonnegative weight matrix a.

    Nonnegative by concavity of generating functions, zero for laws with no
    second factorial moment; scale-invariant in the weight matrix.
    """
    a = np.asarray(weight_matrix, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(s >= 1.0) and np.all(s >= 1.0):
        raise DomainError("s must differ from the all-ones vector")
    v = 1.0 - s
    w = survival_complement_step(point, v)
    return _gap_from_complements(point, a, v, w)


def _gap_from_complements(point: EnvPoint, a: np.ndarray, v_prev: np.ndarray,
                          v_next: np.ndarray) -> float:
    """Gap evaluated from precomputed complements: v_prev = 1-s, v_next = 1-f(s)."""
    norm_a = matrix_norm(a)
    if norm_a <= 0.0:
        raise DomainError("weight matrix must be nonnegative and nonzero")
    exact_mass = float((a @ v_next).sum())
    linear_mass = float((a @ (point.mean_matrix @ v_prev)).sum())
    if exact_mass <= 0.0 or linear_mass <= 0.0:
        raise DomainError("weight matrix annihilates the survival mass")
    return norm_a / exact_mass - norm_a / linear_mass


def gap_bound(point: EnvPoint, declared_delta: float) -> float:
    """Upper envelope delta p^2 * (second-moment ratio) for the gap."""
    return float(declared_delta * point.p**2 * point.second_moment_ratio)


# ---------------------------------------------------------------------------
# normalized prefix/suffix products of a sequence
# ---------------------------------------------------------------------------


def _suffix_products(mats: Sequence[np.ndarray]):
    """Normalized right-growing products: suffix[j] represents the product of
    the last j factors as (unit-norm matrix, log norm)."""
    p = mats[0].shape[0]
    mhat = np.eye(p) / p
    log_norm = float(np.log(p))
    out = [(mhat, log_norm)]
    for m in reversed(mats):
        nxt = out[-1][0] @ m
        s = nxt.sum()
        out.append((nxt / s, out[-1][1] + float(np.log(s))))
    return out


def _prefix_log_norms(mats: Sequence[np.ndarray]) -> np.ndarray:
    """log |M_k ... M_1| for k = 1..n (entrywise-sum norm)."""
    p = mats[0].shape[0]
    mhat = np.eye(p) / p
    log_norm = float(np.log(p))
    logs = np.empty(len(mats))
    for k, m in enumerate(mats):
        mhat = m @ mhat
        s = mhat.sum()
        mhat /= s
        log_norm += float(np.log(s))
        logs[k] = log_norm
    return logs


# ---------------------------------------------------------------------------
# reciprocal-survival identity
# ---------------------------------------------------------------------------


@dataclass
class IdentityReport:
    n: int
    lhs: float                    # 1 / (1 - F^{(i)} of the full composition)
    rhs: float                    # linear term + per-generation corrections
    rel_error: float
    gap_values: np.ndarray        # per-generation corrections (all >= 0)
    gap_bounds: np.ndarray        # delta p^2 T_k envelopes
    linear_term: float


def reciprocal_identity_check(points: Sequence[EnvPoint], i: int,
                              s: Sequence[float],
                              declared_delta: Optional[float] = None,
                              n_cap: int = IDENTITY_N_CAP) -> IdentityReport:
    """Verify the telescoped reciprocal-survival identity on one sequence.

    The left side inverts the iterated survival complement; the right side
    sums the reciprocal linearized mass and one gap term per generation,
    each divided by the norm of the trailing partial product.  Exact
    algebraically; the report carries the relative error.
    """
    n = len(points)
    if n < 1:
        raise DomainError("need at least one environment point")
    if n > n_cap:
        raise BudgetError(f"identity check capped at n={n_cap} (terms grow like lam^-n)")
    p = points[0].p
    if not 1 <= i <= p:
        raise DomainError(f"type index {i} out of range 1..{p}")
    s = np.asarray(s, dtype=float)
    if s.shape != (p,) or np.any(s < 0.0) or np.any(s >= 1.0):
        raise DomainError("s must lie in [0,1)^p")

    # forward complements v_k = 1 - F_k(...F_1(s)), k = 0..n
    comps = [1.0 - s]
    for pt in points:
        comps.append(survival_complement_step(pt, comps[-1]))
    lhs = 1.0 / float(comps[n][i - 1])

    mats = [pt.mean_matrix for pt in points]
    suffix = _suffix_products(mats)          # suffix[j]: product of last j factors
    a_i = np.zeros((p, p))
    a_i[i - 1, i - 1] = 1.0

    full_hat, full_log = suffix[n]
    linear_term = float(np.exp(-full_log) / (a_i @ (full_hat @ comps[0])).sum())

    gaps = np.empty(n)
    bounds = np.empty(n)
    rhs = linear_term
    for k in range(1, n + 1):
        tail_hat, tail_log = suffix[n - k]   # product of factors k+1 .. n
        a_tail = a_i @ tail_hat
        gaps[k - 1] = _gap_from_complements(points[k - 1], a_tail,
                                            comps[k - 1], comps[k])
        bounds[k - 1] = gap_bound(points[k - 1],
                                  declared_delta if declared_delta is not None else np.nan)
        rhs += gaps[k - 1] * float(np.exp(-tail_log) / matrix_norm(a_tail))
    rel = abs(lhs - rhs) / abs(lhs)
    return IdentityReport(n=n, lhs=lhs, rhs=rhs, rel_error=float(rel),
                          gap_values=gaps, gap_bounds=bounds,
                          linear_term=linear_term)


# ---------------------------------------------------------------------------
# damping factor and its lower bound
# ---------------------------------------------------------------------------


@dataclass
class DampingReport:
    n: int
    damping: float                # in (0, 1]
    lower_bound: float            # (1 + delta p^2 sum |L_k1| T_k)^-1
    passed: bool
    row_col_ratio: float          # |e_i L 1| / |L e_i^T|
    row_col_bound: float          # 1 / (p delta^2)
    ratio_ok: bool


def damping_bound_check(points: Sequence[EnvPoint], i: int,
                        declared_delta: float) -> DampingReport:
    """Damping factor of the survival mass along a sequence, with its bound.

    The factor is 1/(1 + sum of weighted gap corrections at s = 0); the
    bound replaces each correction by its envelope |L_{k,1}| delta p^2 T_k.
    Also checks the row/column mass ratio of the full product against the
    distortion bound.
    """
    n = len(points)
    if n < 1:
        raise DomainError("need at least one environment point")
    p = points[0].p
    if not 1 <= i <= p:
        raise DomainError(f"type index {i} out of range 1..{p}")
    zero = np.zeros(p)

    comps = [1.0 - zero]
    for pt in points:
        comps.append(survival_complement_step(pt, comps[-1]))

    mats = [pt.mean_matrix for pt in points]
    suffix = _suffix_products(mats)
    prefix_logs = _prefix_log_norms(mats)
    a_i = np.zeros((p, p))
    a_i[i - 1, i - 1] = 1.0

    full_hat, full_log = suffix[n]
    row_mass = float(full_hat[i - 1].sum())          # |e_i L 1| / |L|
    col_mass = float(full_hat[:, i - 1].sum())       # |L e_i^T| / |L|

    acc = 0.0
    bound_acc = 0.0
    for k in range(1, n + 1):
        tail_hat, tail_log = suffix[n - k]
        a_tail = a_i @ tail_hat
        gap = _gap_from_complements(points[k - 1], a_tail, comps[k - 1], comps[k])
        # |e_i L_{n,1} 1| / |a_i L_{n,k+1}|
        ratio = row_mass * float(np.exp(full_log - tail_log)) / matrix_norm(a_tail)
        acc += ratio * gap
        t_k = points[k - 1].second_moment_ratio
        bound_acc += float(np.exp(prefix_logs[k - 1])) * t_k
    damping = 1.0 / (1.0 + acc)
    lower = 1.0 / (1.0 + declared_delta * p**2 * bound_acc)
    row_col = row_mass / col_mass
    row_col_bound = 1.0 / (p * declared_delta**2)
    return DampingReport(n=n, damping=float(damping), lower_bound=float(lower),
                         passed=bool(0.0 < damping <= 1.0 + 1e-12 and damping >= lower),
                         row_col_ratio=float(row_col),
                         row_col_bound=float(row_col_bound),
                         ratio_ok=bool(row_col >= row_col_bound - 1e-12))


# ---------------------------------------------------------------------------
# conditioned series summability
# ---------------------------------------------------------------------------


@dataclass
class SeriesRow:
    n: int
    partial_sum: float
    se: float


@dataclass
class SeriesTable:
    rows: list[SeriesRow]
    increments: list[tuple[int, float]]   # (N, relative increment from previous)
    final_increment: float
    flattening: bool                      # increments decrease, final <= threshold
    threshold: float


def conditioned_series_partial(model: EnvModel, x: np.ndarray, a: float,
                               n_list: Sequence[int], sp1: SpectralSolution,
                               h_table: HarmonicTable, n_paths: int,
                               rng: np.random.Generator,
                               threshold: float = 0.10,
                               chunk_size: int = DEFAULT_CHUNK) -> SeriesTable:
    """Partial sums of the conditioned series sum_n T_n exp(S_n).

    All partial sums are evaluated on the same paths under the common
    conditioning horizon max(n_list), so they are nondecreasing pathwise;
    the series converges iff the relative increments die out.
    """
    if not a < 0.0:
        raise DomainError("start level a must be negative")
    ns = sorted(set(int(v) for v in n_list))
    n_max = ns[-1]
    x = np.asarray(x, dtype=float)
    t_vals = np.array([pt.second_moment_ratio for pt in model.points])
    h0 = float(h_table.value_at(x[None, :], a)[0])

    sums = {n: 0.0 for n in ns}
    sqs = {n: 0.0 for n in ns}
    total = 0
    kern = _scalar_kernel(model, sp1) if model.p == 1 else None
    remaining = n_paths
    while remaining > 0:
        count = min(chunk_size, remaining)
        remaining -= count
        total += count
        y = np.broadcast_to(x, (count, model.p)).copy()
        s = np.full(count, float(a))
        run_max = s.copy()
        lmass = np.zeros(count)
        partial = np.zeros(count)
        snaps = {}
        for j in range(1, n_max + 1):
            k, y, rho, lm, _ = _step_batch(y, model, sp1, rng, kern)
            s = s + rho
            lmass += lm
            np.maximum(run_max, s, out=run_max)
            alive = run_max < 0.0
            partial += np.where(alive, t_vals[k] * np.exp(np.where(alive, s, 0.0)), 0.0)
            if j in sums:
                snaps[j] = partial.copy()
        h_end = h_table.value_at(y, s)
        w = np.where(run_max < 0.0, h_end * np.exp(lmass), 0.0) / h0
        for n in ns:
            vals = snaps[n] * w
            sums[n] += float(vals.sum())
            sqs[n] += float((vals**2).sum())
    rows = []
    for n in ns:
        mean = sums[n] / total
        var = max(sqs[n] / total - mean**2, 0.0)
        rows.append(SeriesRow(n=n, partial_sum=mean, se=float(np.sqrt(var / total))))
    incs = []
    for prev, cur in zip(rows, rows[1:]):
        incs.append((cur.n, (cur.partial_sum - prev.partial_sum) / prev.partial_sum))
    final_inc = incs[-1][1] if incs else 0.0
    decreasing = all(b[1] <= a_[1] + 1e-12 for a_, b in zip(incs, incs[1:]))
    return SeriesTable(rows=rows, increments=incs, final_increment=float(final_inc),
                       flattening=bool(decreasing and final_inc <= threshold),
                       threshold=threshold)
