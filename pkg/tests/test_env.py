import math

import numpy as np
import pytest

from bprelab import models
from bprelab.env import (
    EnvModel,
    EnvPoint,
    OffspringLaw,
    check_conditions,
    complement_step_batch,
    moments,
    pgf_eval,
    sample_scenario,
    sample_scenarios,
    scale_means,
    survival_complement_step,
)
from bprelab.errors import (
    DegenerateModelError,
    DeltaBoundError,
    DomainError,
    UnsupportedFamilyError,
)
from bprelab.streams import substream


def random_points(rng, count, p=2):
    """Mixed-family random environment realizations for property sweeps."""
    out = []
    for _ in range(count):
        if rng.random() < 0.5:
            out.append(EnvPoint.poisson(0.05 + 2.0 * rng.random((p, p))))
        else:
            laws = []
            for _ in range(p):
                support = rng.integers(0, 4, size=(4, p))
                probs = rng.dirichlet(np.ones(4))
                laws.append(OffspringLaw.table(support, probs))
            out.append(EnvPoint.table(laws))
    return out


# ---------------------------------------------------------------------------
# generating functions
# ---------------------------------------------------------------------------


def test_pgf_poisson_closed_form():
    pt = EnvPoint.poisson([[1.0]])
    assert pgf_eval(pt, 1, [0.0]) == pytest.approx(math.exp(-1.0), abs=1e-15)


def test_pgf_normalization_at_one():
    pt = EnvPoint.poisson([[0.3, 0.7], [1.1, 0.2]])
    assert pgf_eval(pt, 1, [1.0, 1.0]) == 1.0
    assert pgf_eval(pt, 2, [1.0, 1.0]) == 1.0


def test_pgf_finite_table_value():
    law = OffspringLaw.table([[0], [1]], [0.5, 0.5])
    pt = EnvPoint.table([law])
    assert pgf_eval(pt, 1, [0.4]) == pytest.approx(0.7, abs=1e-15)


def test_pgf_domain_errors():
    pt = EnvPoint.poisson([[0.5]])
    with pytest.raises(DomainError):
        pgf_eval(pt, 1, [1.5])
    with pytest.raises(DomainError):
        pgf_eval(pt, 2, [0.5])


def test_pgf_monotone_and_unit_range(rng):
    for pt in random_points(rng, 50):
        s = rng.random(2)
        base = pgf_eval(pt, 1, s)
        assert 0.0 <= base <= 1.0
        for j in range(2):
            bumped = s.copy()
            bumped[j] = min(1.0, bumped[j] + 0.1)
            assert pgf_eval(pt, 1, bumped) >= base - 1e-12
        assert pgf_eval(pt, 1, np.ones(2)) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# survival complement
# ---------------------------------------------------------------------------


def test_complement_full_step():
    pt = EnvPoint.poisson([[0.5]])
    out = survival_complement_step(pt, [1.0])
    assert out[0] == pytest.approx(-math.expm1(-0.5), abs=1e-15)


def test_complement_zero_is_zero():
    pt = EnvPoint.poisson([[0.7, 0.1], [0.2, 0.9]])
    assert np.all(survival_complement_step(pt, np.zeros(2)) == 0.0)


def test_complement_tiny_no_cancellation():
    pt = EnvPoint.poisson([[1.0]])
    out = survival_complement_step(pt, [1e-12])
    assert out[0] == pytest.approx(1e-12, rel=1e-6)
    assert out[0] > 0.0


def test_complement_crosscheck_with_pgf(rng):
    # 1 - F(1-v) + F(1-v) == 1 holds to full precision away from cancellation
    for pt in random_points(rng, 30):
        v = 0.05 + 0.9 * rng.random(2)
        w = survival_complement_step(pt, v)
        for i in (1, 2):
            f = pgf_eval(pt, i, 1.0 - v)
            assert w[i - 1] + f == pytest.approx(1.0, abs=1e-12)


def test_complement_batch_matches_single(rng):
    for pt in random_points(rng, 10):
        V = rng.random((7, 2))
        batch = complement_step_batch(pt, V)
        for r in range(7):
            single = survival_complement_step(pt, V[r])
            np.testing.assert_allclose(batch[r], single, rtol=1e-13, atol=1e-15)


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def test_moments_scalar_poisson():
    mom = moments(EnvPoint.poisson([[0.7]]))
    assert mom.mean_matrix[0, 0] == pytest.approx(0.7)
    assert mom.hessians[0][0, 0] == pytest.approx(0.49)
    assert mom.second_moment_ratio == pytest.approx(1.0, abs=1e-15)


def test_moments_p2_hand_check():
    mom = moments(EnvPoint.poisson([[0.2, 0.3], [0.1, 0.4]]))
    assert np.abs(mom.mean_matrix).sum() == pytest.approx(1.0)
    np.testing.assert_allclose(mom.hessians[0], np.outer([0.2, 0.3], [0.2, 0.3]))
    assert mom.second_moment_sum == pytest.approx(0.5)     # (0.5)^2 + (0.5)^2
    assert mom.second_moment_ratio == pytest.approx(0.5)


def test_moments_one_child_deterministic_is_flat():
    law = OffspringLaw.table([[1]], [1.0])
    mom = moments(EnvPoint.table([law]))
    assert mom.second_moment_sum == 0.0
    assert mom.second_moment_ratio == 0.0


def test_moments_degenerate_zero_matrix():
    law = OffspringLaw.table([[0]], [1.0])
    with pytest.raises(DegenerateModelError):
        EnvPoint.table([law])


def test_mean_matrix_matches_finite_differences(rng):
    # gradient of the generating function at s = 1, one-sided extension
    from bprelab.env import _law_pgf

    h = 1e-5
    for pt in random_points(rng, 100):
        M = pt.mean_matrix
        for i in range(2):
            for j in range(2):
                up = np.ones(2)
                up[j] += h
                dn = np.ones(2)
                dn[j] -= h
                fd = (_law_pgf(pt.laws[i], up) - _law_pgf(pt.laws[i], dn)) / (2 * h)
                if abs(M[i, j]) > 1e-9:
                    assert fd == pytest.approx(M[i, j], rel=1e-6)


# ---------------------------------------------------------------------------
# the environment model
# ---------------------------------------------------------------------------


def test_model_weight_validation():
    with pytest.raises(DomainError):
        EnvModel(weights=np.array([0.5, 0.6]),
                 points=(EnvPoint.poisson([[1.0]]), EnvPoint.poisson([[2.0]])),
                 declared_delta=4.0)


def test_model_rejects_excess_entry_ratio():
    with pytest.raises(DeltaBoundError):
        EnvModel(weights=np.array([1.0]),
                 points=(EnvPoint.poisson([[0.2, 0.8], [0.4, 0.4]]),),
                 declared_delta=1.5)


def test_sample_scenario_trivial_and_deterministic(scalar_model):
    single = models.deterministic_scalar(0.5)
    rng = substream(0, "t")
    assert all(sample_scenario(single, rng) == 0 for _ in range(10))
    a = [sample_scenario(scalar_model, substream(1, "s")) for _ in range(50)]
    b = [sample_scenario(scalar_model, substream(1, "s")) for _ in range(50)]
    assert a == b


def test_sample_scenario_frequency(scalar_model):
    n = 100_000
    ks = sample_scenarios(scalar_model, n, substream(3, "freq"))
    freq = float(np.mean(ks == 0))
    se = math.sqrt(0.8 * 0.2 / n)
    assert abs(freq - 0.8) <= 3 * se


def test_scale_means_cases(scalar_model):
    scaled = scale_means(models.deterministic_scalar(0.5), 2.0)
    assert scaled.points[0].mean_matrix[0, 0] == pytest.approx(1.0)
    same = scale_means(scalar_model, 1.0)
    np.testing.assert_allclose(same.mean_matrices, scalar_model.mean_matrices)
    c = math.exp(0.27726)
    scaled = scale_means(models.uncalibrated_scalar(), c)
    np.testing.assert_allclose(
        sorted(m[0, 0] for m in scaled.mean_matrices), [0.25 * c, 1.0 * c])
    with pytest.raises(UnsupportedFamilyError):
        scale_means(models.bernoulli_control(), 2.0)
    with pytest.raises(DomainError):
        scale_means(scalar_model, -1.0)


# ---------------------------------------------------------------------------
# conditions
# ---------------------------------------------------------------------------


def test_conditions_scalar_reference(scalar_model):
    rep = check_conditions(scalar_model, rng=substream(0, "cond"))
    assert rep.passed
    assert all(c.passed for c in rep.checks())
    assert rep.drift_at_one == pytest.approx(0.0, abs=1e-6)
    assert rep.drift_at_zero == pytest.approx(-0.6 * math.log(2), abs=1e-4)
    assert rep.drift_zero_negative and rep.drift_one_zero


def test_conditions_zero_entry_fails():
    model = EnvModel(weights=np.array([1.0]),
                     points=(EnvPoint.poisson([[0.5, 0.0], [0.3, 0.2]]),),
                     declared_delta=4.0)
    rep = check_conditions(model, rng=substream(0, "cond0"))
    assert not rep.entry_ratio.passed
    assert not rep.passed


def test_conditions_degenerate_critical_flags():
    rep = check_conditions(models.deterministic_scalar(1.0), rng=substream(0, "c1"))
    assert rep.drift_at_zero == pytest.approx(0.0, abs=1e-9)
    assert rep.drift_at_one == pytest.approx(0.0, abs=1e-9)
    assert not rep.drift_zero_negative


def test_conditions_deterministic_given_seed(p2_model):
    r1 = check_conditions(p2_model, rng=substream(5, "cond"))
    r2 = check_conditions(p2_model, rng=substream(5, "cond"))
    assert r1.log_growth.value == r2.log_growth.value
    assert r1.drift_at_one == r2.drift_at_one
