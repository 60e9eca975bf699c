"""Transfer operators on the direction simplex and the moment Lyapunov curve.

The operator (P_theta g)(x) = E[|Mx|^theta g(M.x)] acts on continuous
functions of the direction x; for a finite-state environment the expectation
is an exact K-term sum and only g(M.x) needs grid interpolation.  Its
spectral radius lam(theta) defines the Lyapunov curve Lambda = log lam whose
slopes at 0 and 1 decide the subcritical regime; calibration rescales the
mean matrices so the slope at 1 vanishes.

Grids cover p in {1, 2, 3}: a single node, a uniform parameterization
x = (t, 1-t), and a barycentric triangular lattice.  Interpolation is
piecewise linear, which reproduces affine functions of the direction exactly
(at theta = 1 the dominant eigenfunction is affine, so the discretization is
exact there).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import EnvModel, sample_scenarios, scale_means
from .errors import BudgetError, ConvergenceError, DegenerateModelError, UnsupportedDimensionError
from .matprod import matrix_norm

DEFAULT_GRID_SIZE = {1: 1, 2: 401, 3: 61}
ENUM_CAP = 2**20


# ---------------------------------------------------------------------------
# direction grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DirectionGrid:
    """Piecewise-linear interpolation grid on the direction simplex."""

    p: int
    nodes: np.ndarray            # (N, p) directions
    params: np.ndarray           # (N, p-1) simplex parameters (empty for p=1)
    subdivisions: int            # lattice resolution (p=3), len-1 (p=2)

    def __len__(self) -> int:
        return self.nodes.shape[0]

    @classmethod
    def build(cls, p: int, size: Optional[int] = None) -> "DirectionGrid":
        if p not in (1, 2, 3):
            raise UnsupportedDimensionError(
                f"structured grids support p in {{1,2,3}}, got p={p}")
        size = size or DEFAULT_GRID_SIZE[p]
        if p == 1:
            return cls(1, np.ones((1, 1)), np.zeros((1, 0)), 0)
        if p == 2:
            if size < 3:
                raise UnsupportedDimensionError("p=2 grid needs at least 3 nodes")
            t = np.linspace(0.0, 1.0, size)
            nodes = np.stack([t, 1.0 - t], axis=1)
            return cls(2, nodes, t[:, None], size - 1)
        m = max(2, size - 1)
        pts, prm = [], []
        for i in range(m + 1):
            for j in range(m + 1 - i):
                pts.append((i / m, j / m, (m - i - j) / m))
                prm.append((i / m, j / m))
        return cls(3, np.asarray(pts), np.asarray(prm), m)

    # -- interpolation ------------------------------------------------------

    def weights(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Barycentric interpolation stencil: (indices, weights), row-wise."""
        dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
        n = dirs.shape[0]
        if self.p == 1:
            return np.zeros((n, 1), dtype=np.int64), np.ones((n, 1))
        if self.p == 2:
            t = self.params[:, 0]
            q = dirs[:, 0]
            pos = np.clip(np.searchsorted(t, q) - 1, 0, len(t) - 2)
            h = t[pos + 1] - t[pos]
            w_hi = np.clip((q - t[pos]) / h, 0.0, 1.0)
            idx = np.stack([pos, pos + 1], axis=1)
            wts = np.stack([1.0 - w_hi, w_hi], axis=1)
            return idx, wts
        return self._weights_p3(dirs)

    def _flat_index_p3(self, i: np.ndarray, j: np.ndarray) -> np.ndarray:
        m = self.subdivisions
        # nodes enumerated i = 0..m, j = 0..m-i; offset(i) = i*(m+1) - i(i-1)/2
        return i * (m + 1) - (i * (i - 1)) // 2 + j

    def _weights_p3(self, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = self.subdivisions
        a = np.clip(dirs[:, 0], 0.0, 1.0) * m
        b = np.clip(dirs[:, 1], 0.0, 1.0) * m
        i0 = np.minimum(a.astype(np.int64), m - 1)
        j0 = np.minimum(b.astype(np.int64), m - 1)
        fa = a - i0
        fb = b - j0
        upper = fa + fb > 1.0
        # lower triangle: vertices (i0,j0), (i0+1,j0), (i0,j0+1)
        ii = np.stack([i0, i0 + 1, i0], axis=1)
        jj = np.stack([j0, j0, j0 + 1], axis=1)
        ww = np.stack([1.0 - fa - fb, fa, fb], axis=1)
        # upper triangle: vertices (i0+1,j0+1), (i0,j0+1), (i0+1,j0)
        iu = np.stack([i0 + 1, i0, i0 + 1], axis=1)
        ju = np.stack([j0 + 1, j0 + 1, j0], axis=1)
        wu = np.stack([fa + fb - 1.0, 1.0 - fa, 1.0 - fb], axis=1)
        ii = np.where(upper[:, None], iu, ii)
        jj = np.where(upper[:, None], ju, jj)
        ww = np.where(upper[:, None], wu, ww)
        # off-lattice corner (only reachable with ~zero weight at fa+fb == 1):
        bad = ii + jj > m
        ii = np.where(bad, i0[:, None], ii)
        jj = np.where(bad, j0[:, None], jj)
        ww = np.clip(ww, 0.0, 1.0)
        ww = ww / ww.sum(axis=1, keepdims=True)
        return self._flat_index_p3(ii, jj), ww

    def interp(self, values: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        idx, wts = self.weights(dirs)
        return (np.asarray(values)[idx] * wts).sum(axis=1)

    def probe_directions(self) -> np.ndarray:
        """Nodes plus cell-interior probes, for residual measurement."""
        if self.p == 1:
            return self.nodes
        if self.p == 2:
            t = self.params[:, 0]
            tm = 0.5 * (t[:-1] + t[1:])
            mids = np.stack([tm, 1.0 - tm], axis=1)
            return np.vstack([self.nodes, mids])
        m = self.subdivisions
        cent = []
        for i in range(m):
            for j in range(m - i):
                cent.append(((i + 1 / 3) / m, (j + 1 / 3) / m, 0.0))
                if i + j <= m - 2:
                    cent.append(((i + 2 / 3) / m, (j + 2 / 3) / m, 0.0))
        cent = np.asarray(cent)
        cent[:, 2] = 1.0 - cent[:, 0] - cent[:, 1]
        return np.vstack([self.nodes, cent])


def default_grid(p: int, size: Optional[int] = None) -> DirectionGrid:
    return DirectionGrid.build(p, size)


# ---------------------------------------------------------------------------
# transfer operator
# ---------------------------------------------------------------------------


def transfer_matrix(model: EnvModel, grid: DirectionGrid, theta: float,
                    adjoint: bool = False) -> np.ndarray:
    """Dense discretization of the transfer operator on the grid."""
    n = len(grid)
    A = np.zeros((n, n))
    rows = np.arange(n)
    for wk, point in zip(model.weights, model.points):
        M = point.mean_matrix.T if adjoint else point.mean_matrix
        img = grid.nodes @ M.T                    # (N, p): M x at every node
        norms = img.sum(axis=1)
        if np.any(norms <= 0.0):
            raise DegenerateModelError("a scenario annihilates a grid direction")
        dirs = img / norms[:, None]
        idx, wts = grid.weights(dirs)
        coef = wk * norms**theta
        np.add.at(A, (rows[:, None], idx), coef[:, None] * wts)
    return A


def apply_transfer(theta: float, model: EnvModel, grid: DirectionGrid,
                   g: np.ndarray, adjoint: bool = False) -> np.ndarray:
    """One application of the (adjoint) transfer operator to node values g."""
    g = np.asarray(g, dtype=float)
    if g.shape != (len(grid),) or not np.all(np.isfinite(g)):
        raise DegenerateModelError("g must be finite node values")
    return transfer_matrix(model, grid, theta, adjoint=adjoint) @ g


def _power_iteration(A: np.ndarray, tol: float, max_iter: int) -> tuple[float, np.ndarray, int]:
    """Dominant eigenpair of a nonnegative matrix, sup-norm normalization."""
    x = np.ones(A.shape[0])
    lam = 1.0
    for it in range(1, max_iter + 1):
        y = A @ x
        lam = float(y.max())
        if lam <= 0.0:
            raise DegenerateModelError("transfer operator collapsed to zero")
        y = y / lam
        delta = float(np.abs(y - x).max())
        x = y
        if delta <= tol:
            return lam, x, it
    raise ConvergenceError(
        f"power iteration did not reach tol={tol:g} in {max_iter} iterations",
        last_residual=delta)


@dataclass
class SpectralSolution:
    """Eigen data of the discretized transfer operator at one theta.

    r_values / l_weights solve the primal problem (P r = lam r, l P = lam l)
    with l a probability vector and sum(r * l) = 1; r_star / l_star solve the
    transposed-matrix operator.  ``residual`` is the sup over probe
    directions (nodes and cell interiors) of |(P r)(x) - lam r(x)| with r
    interpolated, i.e. it includes interpolation error, not just the
    iteration tail.
    """

    theta: float
    lam: float
    grid: DirectionGrid
    r_values: np.ndarray
    l_weights: np.ndarray
    r_star: np.ndarray
    l_star: np.ndarray
    residual: float
    iterations: int

    def r_at(self, dirs: np.ndarray) -> np.ndarray:
        return self.grid.interp(self.r_values, dirs)

    def r_star_at(self, dirs: np.ndarray) -> np.ndarray:
        return self.grid.interp(self.r_star, dirs)


def _probe_residual(model: EnvModel, grid: DirectionGrid, theta: float,
                    lam: float, r: np.ndarray) -> float:
    probes = grid.probe_directions()
    acc = np.zeros(probes.shape[0])
    for wk, point in zip(model.weights, model.points):
        img = probes @ point.mean_matrix.T
        norms = img.sum(axis=1)
        acc += wk * norms**theta * grid.interp(r, img / norms[:, None])
    return float(np.abs(acc - lam * grid.interp(r, probes)).max())


def solve_eigen(theta: float, model: EnvModel, grid: Optional[DirectionGrid] = None,
                tol: float = 1e-13, max_iter: int = 20000,
                residual_tol: float = 1e-6) -> SpectralSolution:
    """Power iteration for the eigenpair of the transfer operator at theta.

    Raises ConvergenceError when the iteration stalls and when the measured
    probe residual exceeds ``residual_tol``.
    """
    grid = grid or default_grid(model.p)
    A = transfer_matrix(model, grid, theta)
    lam, r, it_r = _power_iteration(A, tol, max_iter)
    _, l, it_l = _power_iteration(A.T, tol, max_iter)
    l = l / l.sum()
    r = r / float(r @ l)

    A_star = transfer_matrix(model, grid, theta, adjoint=True)
    _, r_s, _ = _power_iteration(A_star, tol, max_iter)
    _, l_s, _ = _power_iteration(A_star.T, tol, max_iter)
    l_s = l_s / l_s.sum()
    r_s = r_s / float(r_s @ l_s)

    residual = _probe_residual(model, grid, theta, lam, r)
    if residual > residual_tol:
        raise ConvergenceError(
            f"probe residual {residual:.3e} exceeds residual_tol={residual_tol:g} "
            f"(theta={theta:g}); refine the grid", last_residual=residual)
    return SpectralSolution(theta=theta, lam=lam, grid=grid, r_values=r,
                            l_weights=l, r_star=r_s, l_star=l_s,
                            residual=residual, iterations=it_r + it_l)


# ---------------------------------------------------------------------------
# subadditive growth-rate oracle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaEstimate:
    value: float
    se_log: Optional[float]    # standard error on the log scale (monte-carlo)
    n: int
    mode: str


def lambda_subadditive(theta: float, model: EnvModel, n: int,
                       mode: str = "enumerate", n_samples: int = 10000,
                       rng: Optional[np.random.Generator] = None,
                       cap: int = ENUM_CAP) -> LambdaEstimate:
    """(E |M_n ... M_1|^theta)^(1/n) by exact enumeration or Monte Carlo.

    Enumeration sums all K^n weighted scenario sequences with normalized
    products; the Monte Carlo mode reports a standard error on the log
    scale.  The n-th root carries the usual subadditive O(1/n) bias of the
    multiplicative constant, so this is a consistency oracle, not a
    high-precision estimate.
    """
    if n < 1:
        raise DegenerateModelError("n must be >= 1")
    mats = model.mean_matrices

    if mode == "enumerate":
        if model.K**n > cap:
            raise BudgetError(f"enumeration of K^n = {model.K}**{n} exceeds cap {cap}")
        prods = np.eye(model.p)[None, :, :] / model.p
        log_norm = np.full(1, np.log(model.p))
        log_w = np.zeros(1)
        for _ in range(n):
            blocks, lns, lws = [], [], []
            for wk, M in zip(model.weights, mats):
                q = np.einsum("ij,njk->nik", M, prods)
                s = q.sum(axis=(1, 2))
                blocks.append(q / s[:, None, None])
                lns.append(log_norm + np.log(s))
                lws.append(log_w + np.log(wk))
            prods = np.concatenate(blocks)
            log_norm = np.concatenate(lns)
            log_w = np.concatenate(lws)
        mean = float(np.exp(log_w + theta * log_norm).sum())
        return LambdaEstimate(value=mean ** (1.0 / n), se_log=None, n=n, mode=mode)

    if mode == "monte-carlo":
        gen = rng if rng is not None else np.random.default_rng(0)
        ks = sample_scenarios(model, (n_samples, n), gen)
        prods = np.broadcast_to(np.eye(model.p) / model.p,
                                (n_samples, model.p, model.p)).copy()
        log_norm = np.full(n_samples, np.log(model.p))
        for j in range(n):
            step = mats[ks[:, j]]
            prods = np.einsum("nij,njk->nik", step, prods)
            s = prods.sum(axis=(1, 2))
            prods /= s[:, None, None]
            log_norm += np.log(s)
        vals = np.exp(theta * log_norm)
        mean = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(n_samples))
        return LambdaEstimate(value=mean ** (1.0 / n), se_log=se / mean / n,
                              n=n, mode=mode)

    raise DegenerateModelError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# Lyapunov curve and calibration
# ---------------------------------------------------------------------------


def lyapunov_slope(model: EnvModel, theta0: float, grid: Optional[DirectionGrid] = None,
                   h_theta: float = 1e-3, **solve_kw) -> float:
    """Central-difference slope of Lambda(theta) = log lam(theta) at theta0.

    Finite mixtures with positive entries extend lam(theta) to negative
    theta, so the slope at 0+ is also taken centrally.
    """
    grid = grid or default_grid(model.p)
    hi = solve_eigen(theta0 + h_theta, model, grid, **solve_kw).lam
    lo = solve_eigen(theta0 - h_theta, model, grid, **solve_kw).lam
    return float((np.log(hi) - np.log(lo)) / (2.0 * h_theta))


@dataclass
class LyapunovCurve:
    thetas: np.ndarray
    lambdas: np.ndarray           # lam(theta)
    log_lambdas: np.ndarray       # Lambda(theta)
    slope_at_zero: float
    slope_at_one: float
    h_theta: float
    min_second_difference: float  # convexity diagnostic
    convex: bool


def lyapunov_curve(model: EnvModel, theta_grid: Sequence[float],
                   h_theta: float = 1e-3, grid: Optional[DirectionGrid] = None,
                   **solve_kw) -> LyapunovCurve:
    """Lambda(theta) on a grid plus slopes at 0+ and 1."""
    grid = grid or default_grid(model.p)
    thetas = np.asarray(sorted(theta_grid), dtype=float)
    lams = np.array([solve_eigen(t, model, grid, **solve_kw).lam for t in thetas])
    logl = np.log(lams)
    d0 = lyapunov_slope(model, 0.0, grid, h_theta, **solve_kw)
    d1 = lyapunov_slope(model, 1.0, grid, h_theta, **solve_kw)
    if len(thetas) >= 3:
        second = np.diff(logl, 2)
        min_second = float(second.min())
    else:
        min_second = 0.0
    return LyapunovCurve(thetas=thetas, lambdas=lams, log_lambdas=logl,
                         slope_at_zero=d0, slope_at_one=d1, h_theta=h_theta,
                         min_second_difference=min_second,
                         convex=bool(min_second >= -1e-8))


@dataclass
class CalibrationResult:
    c: float
    model: EnvModel
    slope_before: float
    slope_after: float
    slope_at_zero_after: float
    degenerate: bool              # slope at 0 >= 0 after scaling


def calibrate(model: EnvModel, grid: Optional[DirectionGrid] = None,
              h_theta: float = 1e-3, drift_tol: float = 1e-3,
              **solve_kw) -> CalibrationResult:
    """Rescale Poisson means so the Lyapunov slope at theta = 1 vanishes.

    Scaling every mean by c shifts Lambda(theta) by theta*log(c) exactly, so
    c = exp(-Lambda'(1)) lands on the zero-slope manifold in one step.  A
    nonnegative slope at 0 after scaling flags a degenerate environment
    (e.g. a single scenario, which calibrates to critical).
    """
    grid = grid or default_grid(model.p)
    before = lyapunov_slope(model, 1.0, grid, h_theta, **solve_kw)
    c = float(np.exp(-before))
    scaled = scale_means(model, c)
    after = lyapunov_slope(scaled, 1.0, grid, h_theta, **solve_kw)
    if abs(after) > drift_tol:
        raise ConvergenceError(
            f"post-calibration slope {after:.3e} exceeds {drift_tol:g}",
            last_residual=abs(after))
    at_zero = lyapunov_slope(scaled, 0.0, grid, h_theta, **solve_kw)
    return CalibrationResult(c=c, model=scaled, slope_before=before,
                             slope_after=after, slope_at_zero_after=at_zero,
                             degenerate=bool(at_zero >= -1e-6))
