"""Size-biased change of measure: tilted walks, first passage, harmonic data.

Under the theta = 1 tilt, environment sequences are reweighted by
|L x| lam^-n r(L.x)/r(x); stepwise this is a Markov kernel over scenarios
whose weights u_k(y) = w_k |M_k y| r(M_k.y) / (lam r(y)) sum to one up to
grid error.  Sampling uses the normalized kernel as a *proposal* and records
exact per-path corrections, so every estimator stays unbiased:

  * ``proposal_log_weight`` corrects expectations back to the plain
    environment law (sum of log(w_k / q_k)),
  * ``log_mass`` (the summed log of the kernel normalizations) corrects to
    the tilted law itself; it vanishes when the eigenfunction is exact.

The associated level walk S_n = a + log|M_{k_n} ... M_{k_1} x| drifts to
zero slope after calibration; its first passage into [0, inf) and the
harmonic function h(x, a) = lim E[-S_n; mu > n] drive the survival
asymptotics.  On single-type models the walk is a +/- log 2 lattice walk
with exact dynamic-programming oracles (see tests).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .env import EnvModel
from .errors import DomainError, UnsupportedDimensionError
from .matprod import project
from .spectral import SpectralSolution

DEFAULT_CHUNK = 65536


# ---------------------------------------------------------------------------
# the tilted step kernel
# ---------------------------------------------------------------------------


def _step_weights(y: np.ndarray, model: EnvModel, sp1: SpectralSolution):
    """Raw tilted weights u_k, candidate directions and log gains, batched.

    y: (N, p) directions.  Returns (U (K,N), DIRS (K,N,p), RHO (K,N)).
    """
    n, p = y.shape
    k_count = model.K
    r_y = sp1.r_at(y)
    U = np.empty((k_count, n))
    DIRS = np.empty((k_count, n, p))
    RHO = np.empty((k_count, n))
    for k, point in enumerate(model.points):
        img = y @ point.mean_matrix.T
        norms = img.sum(axis=1)
        d = img / norms[:, None]
        U[k] = model.weights[k] * norms * sp1.r_at(d) / (sp1.lam * r_y)
        DIRS[k] = d
        RHO[k] = np.log(norms)
    return U, DIRS, RHO


def tilted_step_distribution(y: np.ndarray, model: EnvModel,
                             sp1: SpectralSolution) -> tuple[np.ndarray, float]:
    """Normalized one-step scenario distribution at direction y.

    Returns (probabilities over scenarios, normalization defect |sum u - 1|);
    the defect is a grid-error diagnostic and is zero for exact eigendata.
    """
    y = project(np.asarray(y, dtype=float))
    U, _, _ = _step_weights(y[None, :], model, sp1)
    u = U[:, 0]
    mass = float(u.sum())
    return u / mass, abs(mass - 1.0)


def _scalar_kernel(model: EnvModel, sp1: SpectralSolution):
    """Constant step kernel for single-type models (direction is trivial)."""
    means = np.array([pt.mean_matrix[0, 0] for pt in model.points])
    u = model.weights * means / sp1.lam
    mass = float(u.sum())
    q = u / mass
    return q, np.cumsum(q), np.log(means), float(np.log(mass)), np.log(q)


def _step_batch(y: np.ndarray, model: EnvModel, sp1: SpectralSolution,
                rng: np.random.Generator, scalar_kernel=None):
    """Advance a batch of tilted walks by one step.

    Returns (k (N,), y_next (N,p), rho (N,), log_mass (N,), log_q (N,)).
    """
    n = y.shape[0]
    if model.p == 1:
        if scalar_kernel is None:
            scalar_kernel = _scalar_kernel(model, sp1)
        _, cum_q, log_means, log_mass, log_q = scalar_kernel
        u = rng.random(n)
        k_idx = np.minimum(np.searchsorted(cum_q, u, side="right"), model.K - 1)
        return (k_idx, y, log_means[k_idx],
                np.full(n, log_mass), log_q[k_idx])
    U, DIRS, RHO = _step_weights(y, model, sp1)
    mass = U.sum(axis=0)
    Q = U / mass
    cum = np.cumsum(Q, axis=0)
    u = rng.random(n)
    k_idx = np.minimum((u[None, :] > cum).sum(axis=0), model.K - 1)
    rows = np.arange(n)
    return (k_idx, DIRS[k_idx, rows], RHO[k_idx, rows],
            np.log(mass), np.log(Q[k_idx, rows]))


# ---------------------------------------------------------------------------
# paths
# ---------------------------------------------------------------------------


@dataclass
class TiltedPath:
    """One sampled proposal path with exact correction weights."""

    x0: np.ndarray               # start direction
    a: float                     # start level (< 0)
    scenarios: np.ndarray        # (n,) chosen scenario indices
    directions: np.ndarray       # (n+1, p) y_0 .. y_n
    levels: np.ndarray           # (n+1,) S_0 .. S_n
    mu: Optional[int]            # first step with S >= 0, None if never
    proposal_log_weight: float   # sum log(w_k / q_k): corrects to the plain law
    log_mass: float              # sum log(sum_k u_k): corrects to the tilted law

    @property
    def n(self) -> int:
        return len(self.scenarios)


@dataclass
class PathBatch:
    """Vectorized batch of tilted paths (chunk-sized, see conditioned_expectation)."""

    x0: np.ndarray
    a: float
    scenarios: np.ndarray        # (c, n)
    levels: np.ndarray           # (c, n+1)
    final_dirs: np.ndarray       # (c, p)
    mu: np.ndarray               # (c,) float, np.inf when the walk never crossed
    proposal_log_weight: np.ndarray
    log_mass: np.ndarray


def _sample_batch(x: np.ndarray, a: float, n: int, model: EnvModel,
                  sp1: SpectralSolution, rng: np.random.Generator,
                  count: int) -> PathBatch:
    p = model.p
    y = np.broadcast_to(x, (count, p)).copy()
    levels = np.empty((count, n + 1))
    levels[:, 0] = a
    scen = np.empty((count, n), dtype=np.int64)
    mu = np.full(count, np.inf)
    plw = np.zeros(count)
    lmass = np.zeros(count)
    s = np.full(count, float(a))
    kern = _scalar_kernel(model, sp1) if model.p == 1 else None
    for j in range(n):
        k, y, rho, lm, lq = _step_batch(y, model, sp1, rng, kern)
        s = s + rho
        levels[:, j + 1] = s
        scen[:, j] = k
        plw += np.log(model.weights[k]) - lq
        lmass += lm
        hit = (s >= 0.0) & np.isinf(mu)
        mu[hit] = j + 1
    return PathBatch(x0=np.asarray(x, dtype=float), a=float(a), scenarios=scen,
                     levels=levels, final_dirs=y, mu=mu,
                     proposal_log_weight=plw, log_mass=lmass)


def sample_tilted_path(x: np.ndarray, a: float, n: int, model: EnvModel,
                       sp1: SpectralSolution, rng: np.random.Generator) -> TiltedPath:
    """Sample one proposal path of length n started at (direction x, level a)."""
    if not a < 0.0:
        raise DomainError("start level a must be negative")
    if n < 1:
        raise DomainError("path length must be >= 1")
    x = project(np.asarray(x, dtype=float))
    p = model.p
    dirs = np.empty((n + 1, p))
    dirs[0] = x
    y = x[None, :].copy()
    levels = np.empty(n + 1)
    levels[0] = a
    scen = np.empty(n, dtype=np.int64)
    mu: Optional[int] = None
    plw = 0.0
    lmass = 0.0
    s = float(a)
    kern = _scalar_kernel(model, sp1) if model.p == 1 else None
    for j in range(n):
        k, y, rho, lm, lq = _step_batch(y, model, sp1, rng, kern)
        s += float(rho[0])
        dirs[j + 1] = y[0]
        levels[j + 1] = s
        scen[j] = k[0]
        plw += float(np.log(model.weights[k[0]]) - lq[0])
        lmass += float(lm[0])
        if mu is None and s >= 0.0:
            mu = j + 1
    return TiltedPath(x0=x, a=float(a), scenarios=scen, directions=dirs,
                      levels=levels, mu=mu, proposal_log_weight=plw,
                      log_mass=lmass)


def path_weight(theta: float, x: np.ndarray, path: TiltedPath,
                spectral: SpectralSolution) -> float:
    """Density of the theta-tilted law against the plain law along a path.

    Computed from the recorded levels and the final direction:
    exp(theta (S_n - S_0) - n log lam) * r(y_n) / r(y_0).
    """
    x = project(np.asarray(x, dtype=float))
    n = path.n
    log_gain = float(path.levels[-1] - path.levels[0])
    r_end = float(spectral.r_at(path.directions[-1][None, :])[0])
    r_start = float(spectral.r_at(x[None, :])[0])
    return float(np.exp(theta * log_gain - n * np.log(spectral.lam)) * r_end / r_start)


# ---------------------------------------------------------------------------
# first-passage tail
# ---------------------------------------------------------------------------


@dataclass
class MuTailRow:
    n: int
    p_hat: float
    se: float
    scaled: float                # sqrt(n) * p_hat


@dataclass
class MuTailTable:
    x0: np.ndarray
    a: float
    rows: list[MuTailRow]
    c_fit: float                 # max_n sqrt(n) p_hat / (1 + |a|)
    doubling_ratios: list[tuple[int, float]]   # (n, scaled(2n)/scaled(n))


def mu_tail_estimate(x: np.ndarray, a: float, n_list: Sequence[int],
                     model: EnvModel, sp1: SpectralSolution, n_paths: int,
                     rng: np.random.Generator,
                     chunk_size: int = DEFAULT_CHUNK) -> MuTailTable:
    """Estimate P(mu > n) over n_list from one set of tilted paths.

    Paths are shared across all n (each n reads the running maximum at its
    checkpoint); weights correct the proposal to the tilted law.
    """
    if not a < 0.0:
        raise DomainError("start level a must be negative")
    x = project(np.asarray(x, dtype=float))
    ns = sorted(set(int(v) for v in n_list))
    n_max = ns[-1]
    sums = {n: 0.0 for n in ns}
    sq = {n: 0.0 for n in ns}
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
        for j in range(1, n_max + 1):
            _, y, rho, lm, _ = _step_batch(y, model, sp1, rng, kern)
            s = s + rho
            lmass += lm
            np.maximum(run_max, s, out=run_max)
            if j in sums:
                vals = np.where(run_max < 0.0, np.exp(lmass), 0.0)
                sums[j] += float(vals.sum())
                sq[j] += float((vals**2).sum())
    rows = []
    for n in ns:
        mean = sums[n] / total
        var = max(sq[n] / total - mean**2, 0.0)
        se = float(np.sqrt(var / total))
        rows.append(MuTailRow(n=n, p_hat=mean, se=se, scaled=float(np.sqrt(n) * mean)))
    by_n = {r.n: r for r in rows}
    doubling = [(n, by_n[2 * n].scaled / by_n[n].scaled)
                for n in ns if 2 * n in by_n and by_n[n].scaled > 0.0]
    c_fit = max((r.scaled for r in rows), default=0.0) / (1.0 + abs(a))
    return MuTailTable(x0=x, a=float(a), rows=rows, c_fit=float(c_fit),
                       doubling_ratios=doubling)


# ---------------------------------------------------------------------------
# harmonic function
# ---------------------------------------------------------------------------


@dataclass
class HEstimate:
    h: float
    se: float
    harmonic_residual: float     # |E[h(X_1, S_1); mu > 1] - h|
    residual_se: float
    half_horizon_gap: float      # |h(horizon) - h(horizon/2)| convergence check


def _h_profile(x: np.ndarray, model: EnvModel, sp1: SpectralSolution,
               horizon: int, n_paths: int, rng: np.random.Generator,
               chunk_size: int = DEFAULT_CHUNK):
    """Per-path data for h estimates from one batch started at direction x.

    Because the proposal kernel never looks at the level, one batch of
    increment paths serves every start level a: the walk from (x, a) is the
    walk from (x, 0) shifted by a.  Returns per-path cumulative gains,
    running maxima and tilt weights at horizon and horizon//2.
    """
    half = horizon // 2
    cums, maxes, wts = {}, {}, {}
    parts_c = []
    kern = _scalar_kernel(model, sp1) if model.p == 1 else None
    remaining = n_paths
    while remaining > 0:
        count = min(chunk_size, remaining)
        remaining -= count
        y = np.broadcast_to(x, (count, model.p)).copy()
        cum = np.zeros(count)
        run_max = np.full(count, -np.inf)
        lmass = np.zeros(count)
        snap = {}
        for j in range(1, horizon + 1):
            _, y, rho, lm, _ = _step_batch(y, model, sp1, rng, kern)
            cum = cum + rho
            lmass += lm
            np.maximum(run_max, cum, out=run_max)
            if j in (half, horizon):
                snap[j] = (cum.copy(), run_max.copy(), np.exp(lmass))
        parts_c.append(snap)
    for j in (half, horizon):
        cums[j] = np.concatenate([s[j][0] for s in parts_c])
        maxes[j] = np.concatenate([s[j][1] for s in parts_c])
        wts[j] = np.concatenate([s[j][2] for s in parts_c])
    return cums, maxes, wts, half


def _h_values(cum: np.ndarray, run_max: np.ndarray, w: np.ndarray, a: float) -> np.ndarray:
    """Per-path values of (-S_n) 1{mu > n} for start level a, tilt-corrected."""
    alive = (a + run_max) < 0.0
    return np.where(alive, -(a + cum), 0.0) * w


def estimate_h(x: np.ndarray, a: float, model: EnvModel, sp1: SpectralSolution,
               horizon: int = 512, n_paths: int = 100_000,
               rng: Optional[np.random.Generator] = None,
               chunk_size: int = DEFAULT_CHUNK) -> HEstimate:
    """Monte Carlo harmonic-function estimate h(x, a) ~ E[-S_n; mu > n].

    The harmonicity residual applies the exact one-step kernel at (x, a) and
    re-estimates h at each surviving successor.  For single-type models the
    successors share the main batch (same direction, shifted level), so the
    residual is computed pathwise; otherwise successor batches are drawn
    from spawned substreams and errors combine in quadrature.
    """
    if horizon < 4:
        raise DomainError("horizon must be at least 4")
    if not a < 0.0:
        raise DomainError("start level a must be negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    x = project(np.asarray(x, dtype=float))
    cums, maxes, wts, half = _h_profile(x, model, sp1, horizon, n_paths, rng, chunk_size)

    vals = _h_values(cums[horizon], maxes[horizon], wts[horizon], a)
    h = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(len(vals)))
    vals_half = _h_values(cums[half], maxes[half], wts[half], a)
    half_gap = abs(float(vals_half.mean()) - h)

    # one-step kernel at (x, a)
    q, _ = tilted_step_distribution(x, model, sp1)
    U, DIRS, RHO = _step_weights(x[None, :], model, sp1)
    succ_levels = a + RHO[:, 0]
    surviving = succ_levels < 0.0

    if model.p == 1:
        # successors share the main batch: combine pathwise
        comb = np.zeros_like(vals)
        for k in range(model.K):
            if surviving[k]:
                comb += q[k] * _h_values(cums[horizon], maxes[horizon],
                                         wts[horizon], float(succ_levels[k]))
        diff = comb - vals
        residual = abs(float(diff.mean()))
        residual_se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
    else:
        acc = 0.0
        var = se**2
        subs = rng.spawn(model.K)
        for k in range(model.K):
            if not surviving[k]:
                continue
            c_k, m_k, w_k, _ = _h_profile(DIRS[k, 0], model, sp1, horizon,
                                          n_paths, subs[k], chunk_size)
            v_k = _h_values(c_k[horizon], m_k[horizon], w_k[horizon],
                            float(succ_levels[k]))
            acc += q[k] * float(v_k.mean())
            var += (q[k] * float(v_k.std(ddof=1) / np.sqrt(len(v_k))))**2
        residual = abs(acc - h)
        residual_se = float(np.sqrt(var))
    return HEstimate(h=h, se=se, harmonic_residual=residual,
                     residual_se=residual_se, half_horizon_gap=half_gap)


# ---------------------------------------------------------------------------
# harmonic table
# ---------------------------------------------------------------------------


@dataclass
class HarmonicTable:
    """h estimates on direction nodes x level nodes, with fitted envelopes.

    ``r_fit`` and ``c_fit`` are the smallest constants making the linear
    envelope bounds hold at every table point:

        max(1/C, |a| - R) < h <= C (1 + |a|)  and  1 + |a| <= (R+1)(1+h).

    Levels below the table continue the unit-slope growth h ~ |a| + const
    with the constant read off the deepest node (per direction), so the
    fallback is continuous at the table edge; levels above the shallowest
    node extrapolate linearly (floored at a tiny positive value).
    """

    directions: np.ndarray        # (D, p)
    direction_params: np.ndarray  # (D,) simplex parameter (p <= 2)
    a_values: np.ndarray          # (A,) ascending, all < 0
    h: np.ndarray                 # (D, A)
    se: np.ndarray
    residual: np.ndarray
    residual_se: np.ndarray
    r_fit: float
    c_fit: float
    horizon: int

    _FLOOR = 1e-12

    def _dir_params(self, dirs: np.ndarray) -> np.ndarray:
        dirs = np.atleast_2d(dirs)
        if dirs.shape[1] == 1:
            return np.zeros(dirs.shape[0])
        return dirs[:, 0]

    def value_at(self, dirs: np.ndarray, a) -> np.ndarray:
        """Bilinear table lookup h(direction, level) with fallbacks."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        t = self._dir_params(dirs)
        if t.shape[0] == 1 and a.shape[0] > 1:
            t = np.broadcast_to(t, a.shape)
        d_count = len(self.direction_params)
        if d_count == 1:
            h_of_a = self.h[0]
        else:
            tp = self.direction_params
            pos = np.clip(np.searchsorted(tp, t) - 1, 0, d_count - 2)
            frac = np.clip((t - tp[pos]) / (tp[pos + 1] - tp[pos]), 0.0, 1.0)
            h_of_a = (1 - frac[:, None]) * self.h[pos] + frac[:, None] * self.h[pos + 1]
        av = self.a_values
        n_a = len(av)
        if h_of_a.ndim == 1:
            h_of_a = np.broadcast_to(h_of_a, (len(a), n_a))
        # unit-slope continuation below the deepest node, anchored there
        deep = h_of_a[:, 0] + (np.abs(a) - np.abs(av[0]))
        if n_a == 1:
            out = np.where(a < av[0], deep, h_of_a[:, 0])
            return np.maximum(out, self._FLOOR)
        pos = np.clip(np.searchsorted(av, a) - 1, 0, n_a - 2)
        frac = (a - av[pos]) / (av[pos + 1] - av[pos])   # unclipped: extrapolates above
        rows = np.arange(len(a))
        out = (1 - frac) * h_of_a[rows, pos] + frac * h_of_a[rows, pos + 1]
        out = np.where(a < av[0], deep, out)
        return np.maximum(out, self._FLOOR)

    def bounds_hold(self) -> bool:
        """Check the fitted linear envelopes at every table point."""
        A = np.abs(self.a_values)[None, :]
        lower = np.maximum(1.0 / self.c_fit, A - self.r_fit)
        upper = self.c_fit * (1.0 + A)
        first = np.all(lower < self.h) and np.all(self.h <= upper)
        second = np.all(1.0 + A <= (self.r_fit + 1.0) * (1.0 + self.h))
        return bool(first and second)


def _fit_envelope(a_values: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    A = np.abs(a_values)[None, :]
    pad = 1e-9
    r1 = float(np.max(A - h))
    r2 = float(np.max((1.0 + A) / (1.0 + h) - 1.0))
    r_fit = max(r1, r2, 0.0) + pad
    c1 = float(np.max(h / (1.0 + A)))
    c2 = float(np.max(1.0 / h))
    c_fit = max(c1, c2) + pad
    return r_fit, c_fit


def build_harmonic_table(model: EnvModel, sp1: SpectralSolution,
                         a_values: Sequence[float],
                         directions: Optional[np.ndarray] = None,
                         horizon: int = 512, n_paths: int = 100_000,
                         rng: Optional[np.random.Generator] = None,
                         chunk_size: int = DEFAULT_CHUNK) -> HarmonicTable:
    """Estimate h on direction x level nodes and fit the envelope constants.

    One increment batch per direction node serves all levels (the proposal
    kernel is level-blind).  Harmonicity residuals take the exact one-step
    kernel at each table point and read successor values back from the
    table: pathwise for single-type models, by interpolation otherwise.
    """
    if model.p > 2:
        raise UnsupportedDimensionError("harmonic tables cover p in {1, 2}")
    if horizon < 4:
        raise DomainError("horizon must be at least 4")
    rng = rng if rng is not None else np.random.default_rng(0)
    a_values = np.asarray(sorted(float(a) for a in a_values))
    if np.any(a_values >= 0.0):
        raise DomainError("all level nodes must be negative")
    if directions is None:
        if model.p == 1:
            directions = np.ones((1, 1))
        else:
            t = np.array([0.125, 0.375, 0.625, 0.875])
            directions = np.stack([t, 1.0 - t], axis=1)
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    d_count = directions.shape[0]
    params = directions[:, 0] if model.p == 2 else np.zeros(d_count)

    n_a = len(a_values)
    h = np.empty((d_count, n_a))
    se = np.empty((d_count, n_a))
    profiles = []
    subs = rng.spawn(d_count)
    for d in range(d_count):
        cums, maxes, wts, _ = _h_profile(directions[d], model, sp1, horizon,
                                         n_paths, subs[d], chunk_size)
        profiles.append((cums[horizon], maxes[horizon], wts[horizon]))
        for ai, a in enumerate(a_values):
            vals = _h_values(*profiles[d], float(a))
            h[d, ai] = vals.mean()
            se[d, ai] = vals.std(ddof=1) / np.sqrt(len(vals))

    r_fit, c_fit = _fit_envelope(a_values, h)
    table = HarmonicTable(directions=directions, direction_params=params,
                          a_values=a_values, h=h, se=se,
                          residual=np.zeros_like(h), residual_se=np.zeros_like(h),
                          r_fit=r_fit, c_fit=c_fit, horizon=horizon)

    residual = np.empty((d_count, n_a))
    residual_se = np.empty((d_count, n_a))
    for d in range(d_count):
        q, _ = tilted_step_distribution(directions[d], model, sp1)
        _, DIRS, RHO = _step_weights(directions[d][None, :], model, sp1)
        for ai, a in enumerate(a_values):
            succ_levels = a + RHO[:, 0]
            surviving = succ_levels < 0.0
            if model.p == 1:
                comb = -_h_values(*profiles[d], float(a))
                for k in range(model.K):
                    if surviving[k]:
                        comb = comb + q[k] * _h_values(*profiles[d], float(succ_levels[k]))
                residual[d, ai] = abs(comb.mean())
                residual_se[d, ai] = comb.std(ddof=1) / np.sqrt(len(comb))
            else:
                acc = 0.0
                var = se[d, ai]**2
                for k in range(model.K):
                    if not surviving[k]:
                        continue
                    hk = float(table.value_at(DIRS[k], succ_levels[k])[0])
                    sk = float(np.interp(succ_levels[k], a_values, se[d]))
                    acc += q[k] * hk
                    var += (q[k] * sk)**2
                residual[d, ai] = abs(acc - h[d, ai])
                residual_se[d, ai] = np.sqrt(var)
    table.residual = residual
    table.residual_se = residual_se
    return table


# ---------------------------------------------------------------------------
# diffusion scale of the tilted walk
# ---------------------------------------------------------------------------


@dataclass
class SigmaEstimate:
    sigma: float
    se: float
    drift: float                 # E[S_n - S_0] / n under the tilted law
    drift_se: float
    drift_consistent: bool       # |drift| <= 3 drift_se
    degenerate: bool             # sigma below 1e-6


def estimate_sigma(model: EnvModel, sp1: SpectralSolution, n: int,
                   n_paths: int, rng: np.random.Generator,
                   x: Optional[np.ndarray] = None,
                   chunk_size: int = DEFAULT_CHUNK) -> SigmaEstimate:
    """Diffusion scale sqrt(Var(S_n - S_0)/n) of the tilted level walk."""
    if n < 1:
        raise DomainError("n must be >= 1")
    x = project(np.ones(model.p) if x is None else np.asarray(x, dtype=float))
    gains = []
    weights = []
    kern = _scalar_kernel(model, sp1) if model.p == 1 else None
    remaining = n_paths
    while remaining > 0:
        count = min(chunk_size, remaining)
        remaining -= count
        y = np.broadcast_to(x, (count, model.p)).copy()
        cum = np.zeros(count)
        lmass = np.zeros(count)
        for _ in range(n):
            _, y, rho, lm, _ = _step_batch(y, model, sp1, rng, kern)
            cum += rho
            lmass += lm
        gains.append(cum)
        weights.append(np.exp(lmass))
    g = np.concatenate(gains)
    w = np.concatenate(weights)
    wsum = w.sum()
    mean = float((w * g).sum() / wsum)
    var = float((w * (g - mean)**2).sum() / wsum)
    m4 = float((w * (g - mean)**4).sum() / wsum)
    n_eff = float(wsum**2 / (w**2).sum())
    sigma = float(np.sqrt(var / n))
    var_se = float(np.sqrt(max(m4 - var**2, 0.0) / n_eff))
    sigma_se = var_se / (2.0 * sigma * n) if sigma > 0 else 0.0
    drift = mean / n
    drift_se = float(np.sqrt(var / n_eff) / n)
    return SigmaEstimate(sigma=sigma, se=float(sigma_se), drift=float(drift),
                         drift_se=drift_se,
                         drift_consistent=bool(abs(drift) <= 3.0 * drift_se + 1e-15),
                         degenerate=bool(sigma < 1e-6))


# ---------------------------------------------------------------------------
# conditioned expectations (the h-transform)
# ---------------------------------------------------------------------------


def conditioned_expectation(functional: Callable[[PathBatch], np.ndarray],
                            x: np.ndarray, a: float, n: int, model: EnvModel,
                            sp1: SpectralSolution, h_table: HarmonicTable,
                            n_paths: int, rng: np.random.Generator,
                            chunk_size: int = 8192) -> tuple[float, float]:
    """h-transformed expectation E^[Y_n] = E[Y_n h(X_n, S_n); mu > n] / h(x, a).

    ``functional`` maps a PathBatch to one value per path; h at the endpoint
    comes from the table (with its linear-growth fallback), and the tilt
    correction weight keeps the estimate unbiased under grid error.
    """
    if not a < 0.0:
        raise DomainError("start level a must be negative")
    x = project(np.asarray(x, dtype=float))
    h0 = float(h_table.value_at(x[None, :], a)[0])
    total = 0
    acc = 0.0
    acc_sq = 0.0
    remaining = n_paths
    while remaining > 0:
        count = min(chunk_size, remaining)
        remaining -= count
        batch = _sample_batch(x, a, n, model, sp1, rng, count)
        y_vals = np.asarray(functional(batch), dtype=float)
        if y_vals.shape != (count,):
            raise DomainError("functional must return one value per path")
        if not np.all(np.isfinite(y_vals)):
            raise DomainError("functional returned a non-finite value")
        h_end = h_table.value_at(batch.final_dirs, batch.levels[:, -1])
        alive = np.isinf(batch.mu)
        w = np.where(alive, h_end * np.exp(batch.log_mass), 0.0) / h0
        vals = y_vals * w
        total += count
        acc += float(vals.sum())
        acc_sq += float((vals**2).sum())
    mean = acc / total
    var = max(acc_sq / total - mean**2, 0.0)
    return float(mean), float(np.sqrt(var / total))
