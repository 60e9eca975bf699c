import math

import numpy as np
import pytest

from bprelab import models
from bprelab.env import sample_scenarios
from bprelab.errors import DomainError
from bprelab.matprod import (
    NormalizedProduct,
    act,
    entry_ratio,
    entry_ratio_check,
    extend_product,
    matrix_norm,
    project,
)
from bprelab.streams import substream

from oracles import longdouble_product


def test_project_basic():
    np.testing.assert_allclose(project([3.0, 1.0]), [0.75, 0.25])
    np.testing.assert_allclose(project([2.0, 2.0]), [0.5, 0.5])
    with pytest.raises(DomainError):
        project([0.0, 0.0])
    with pytest.raises(DomainError):
        project([1.0, -0.5])


def test_act_row_hand_check():
    m = np.array([[1.0, 2.0], [2.0, 1.0]])
    direction, gain = act(m, np.array([0.75, 0.25]), side="row")
    np.testing.assert_allclose(direction, [5 / 12, 7 / 12])
    assert gain == pytest.approx(math.log(3.0), abs=1e-12)


def test_act_col_rank_one_collapse():
    m = np.full((2, 2), 0.3)
    direction, gain = act(m, np.array([0.9, 0.1]), side="col")
    np.testing.assert_allclose(direction, [0.5, 0.5])
    assert gain == pytest.approx(math.log(0.6), abs=1e-12)


def test_act_cocycle_identity(rng):
    for _ in range(50):
        x = project(rng.random(3) + 1e-3)
        m1 = 0.1 + rng.random((3, 3))
        m2 = 0.1 + rng.random((3, 3))
        d1, g1 = act(m1, x, side="row")
        _, g12 = act(m2, d1, side="row")
        _, g_prod = act(m1 @ m2, x, side="row")
        assert g_prod == pytest.approx(g1 + g12, abs=1e-10)


def test_act_idempotent_direction(rng):
    x = project(rng.random(2))
    m = 0.2 + rng.random((2, 2))
    d, _ = act(m, x, side="col")
    np.testing.assert_allclose(project(d), d, atol=1e-15)


def test_extend_product_single_factor():
    prod = NormalizedProduct.identity(2)
    m = np.array([[1.0, 2.0], [2.0, 1.0]])
    out = extend_product(prod, m)
    np.testing.assert_allclose(out.mhat, m / 6.0)
    assert out.log_norm == pytest.approx(math.log(6.0), abs=1e-12)
    assert out.span == (1, 1)


def test_extend_alternating_scalars_cancel():
    prod = NormalizedProduct.identity(1)
    for j in range(30):
        prod = extend_product(prod, np.array([[0.5 if j % 2 else 2.0]]))
    assert prod.log_norm == pytest.approx(0.0, abs=1e-12)
    assert prod.mhat[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_long_product_no_underflow_scalar():
    # raw product would be 0.5^200 ~ 6e-61; the normalized form is exact
    prod = NormalizedProduct.identity(1)
    for _ in range(200):
        prod = extend_product(prod, np.array([[0.5]]))
    assert prod.log_norm == pytest.approx(200 * math.log(0.5), abs=1e-9)
    assert prod.mhat[0, 0] == 1.0


def test_long_product_no_underflow_p2(rng):
    # 200 strongly subcritical factors: log norm goes far below the raw
    # underflow threshold while mhat keeps unit norm and positive entries
    prod = NormalizedProduct.identity(2)
    for _ in range(200):
        m = rng.random((2, 2)) + 0.1
        m = 0.5 * m / matrix_norm(m)
        prod = extend_product(prod, m)
    assert prod.log_norm <= 200 * math.log(0.5) + math.log(2) + 1e-9
    assert prod.log_norm < -138                   # exp would underflow raw doubles
    assert np.all(prod.mhat > 0.0)
    assert matrix_norm(prod.mhat) == pytest.approx(1.0, abs=1e-12)


def test_product_matches_extended_precision(rng):
    for _ in range(5):
        mats = [0.1 + rng.random((2, 2)) for _ in range(30)]
        prod = NormalizedProduct.identity(2)
        for m in mats:
            prod = extend_product(prod, m)
        exact = longdouble_product(mats)
        rebuilt = np.exp(prod.log_norm) * prod.mhat
        np.testing.assert_allclose(rebuilt, np.asarray(exact, dtype=float), rtol=1e-9)


def test_gain_sums_match_log_norm():
    # column-action cocycle sums reproduce the accumulated log norm up to
    # the bounded distortion log(delta^2)
    model = models.reference_p2()
    mats = model.mean_matrices
    x = project(np.array([0.3, 0.7]))
    prod = NormalizedProduct.identity(2)
    y = x.copy()
    gain = 0.0
    for k in sample_scenarios(model, 60, substream(2, "gain")):
        m = mats[k]
        prod = extend_product(prod, m)
        y, g = act(m, y, side="col")
        gain += g
    log_norm_x = prod.log_norm + math.log(float((prod.mhat @ x).sum()))
    assert abs(log_norm_x - gain) <= 1e-9
    # and |L x| stays within delta^2 of |L| (bounded distortion)
    assert abs(prod.log_norm - gain) <= math.log(model.declared_delta**2)


def test_entry_ratio_values():
    assert entry_ratio(np.array([[1.0, 2.0], [3.0, 4.0]])) == pytest.approx(4.0)
    sq = np.array([[1.0, 2.0], [2.0, 1.0]]) @ np.array([[1.0, 2.0], [2.0, 1.0]])
    ratio, ok = entry_ratio_check(sq, delta=2.0)
    assert ratio == pytest.approx(1.25)
    assert ok
    with pytest.raises(DomainError):
        entry_ratio(np.array([[1.0, 0.0], [1.0, 1.0]]))


def test_entry_ratio_bound_on_random_products():
    # distortion bound: products of >= 2 factors from a delta-bounded model
    model = models.reference_p2()   # declared delta 3
    mats = model.mean_matrices
    rng = substream(11, "kers")
    for _ in range(1000):
        n = int(rng.integers(2, 101))
        prod = NormalizedProduct.identity(2)
        for k in sample_scenarios(model, n, rng):
            prod = extend_product(prod, mats[k])
        ratio, ok = entry_ratio_check(prod, model.declared_delta)
        assert ok, f"ratio {ratio} exceeded delta^2 at n={n}"
