"""Projective algebra on the positive part of the l1 sphere.

Directions are nonnegative vectors with unit l1 norm (plain numpy arrays);
matrices act projectively from the row or column side.  Left products of
many factors are held in normalized form (unit-norm matrix plus an
accumulated log of the norm factors) so that long subcritical products
never underflow.

The matrix norm used throughout the package is the entrywise absolute sum,
and all growth rates are measured in it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = [
    "matrix_norm",
    "project",
    "act",
    "NormalizedProduct",
    "extend_product",
    "entry_ratio",
    "entry_ratio_check",
]


def matrix_norm(m: np.ndarray) -> float:
    """Entrywise absolute-sum norm, for both matrices and vectors."""
    return float(np.abs(m).sum())


def project(x: np.ndarray) -> np.ndarray:
    """Normalize a nonnegative vector to unit l1 norm."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("direction components must be nonnegative")
    s = x.sum()
    if s <= 0.0:
        raise DomainError("cannot project the zero vector")
    return x / s


def act(m: np.ndarray, x: np.ndarray, side: str = "col") -> tuple[np.ndarray, float]:
    """Projective action of ``m`` on direction ``x``.

    side="row" returns (x.m, log|xm|) where x.m = xm/|xm|;
    side="col" returns (m.x, log|mx|) where m.x = mx/|mx|.
    The log factor is the additive cocycle of the action.
    """
    m = np.asarray(m, dtype=float)
    x = np.asarray(x, dtype=float)
    if side == "row":
        y = x @ m
    elif side == "col":
        y = m @ x
    else:
        raise DomainError(f"side must be 'row' or 'col', got {side!r}")
    s = y.sum()
    if s <= 0.0:
        raise DomainError("matrix annihilates the direction (zero image norm)")
    return y / s, float(np.log(s))


@dataclass(frozen=True)
class NormalizedProduct:
    """A left product of matrices held as (unit-norm matrix, log norm).

    ``mhat`` has unit entrywise-sum norm; the represented product equals
    exp(log_norm) * mhat.  ``span`` = (first factor index, last factor
    index); an empty product at position k has span (k, k-1).
    """

    mhat: np.ndarray
    log_norm: float
    span: tuple[int, int]

    @classmethod
    def identity(cls, p: int, start: int = 1) -> "NormalizedProduct":
        eye = np.eye(p)
        return cls(mhat=eye / p, log_norm=float(np.log(p)), span=(start, start - 1))

    @property
    def p(self) -> int:
        return self.mhat.shape[0]

    def raw(self) -> np.ndarray:
        """The unnormalized product (may under/overflow for long spans)."""
        return np.exp(self.log_norm) * self.mhat

    def norm_log(self) -> float:
        """log of the entrywise-sum norm of the represented product."""
        return self.log_norm  # |mhat| == 1 by construction


def extend_product(prod: NormalizedProduct, m: np.ndarray) -> NormalizedProduct:
    """Left-multiply the product by a new factor and renormalize."""
    m = np.asarray(m, dtype=float)
    new = m @ prod.mhat
    s = new.sum()
    if s <= 0.0:
        raise DomainError("extending factor annihilates the product")
    k, n = prod.span
    return NormalizedProduct(mhat=new / s, log_norm=prod.log_norm + float(np.log(s)), span=(k, n + 1))


def _entries(obj) -> np.ndarray:
    if isinstance(obj, NormalizedProduct):
        return obj.mhat
    return np.asarray(obj, dtype=float)


def entry_ratio(obj) -> float:
    """max entry / min entry of a positive matrix or normalized product."""
    m = _entries(obj)
    lo = m.min()
    if lo <= 0.0:
        raise DomainError("entry ratio requires strictly positive entries")
    return float(m.max() / lo)


def entry_ratio_check(obj, delta: float) -> tuple[float, bool]:
    """Entry ratio together with the distortion bound ratio <= delta**2.

    The bound applies to products of two or more factors from a model whose
    individual factors have entry ratio at most delta.
    """
    ratio = entry_ratio(obj)
    return ratio, bool(ratio <= delta * delta)
