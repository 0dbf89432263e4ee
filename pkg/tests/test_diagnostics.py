import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbgrad.diagnostics import (
    StreamingMoments,
    TableIntegrand,
    check_triplet_law,
    empirical_moments,
    exact_budgeted_moments,
    exact_minibatch_moments,
    exact_moments,
    finite_diff_grad,
    grad_close,
    random_instance,
    rb_identity_residual,
    suite_budget,
    triplet_law,
    two_pass_moments,
    variance_decomposition,
    variance_vs_k_sweep,
    write_sweep_csv,
)
from rbgrad.distributions import SoftmaxCategorical
from rbgrad.errors import DomainError, NumericError
from rbgrad.estimators import (
    REINFORCE,
    REINFORCE_PLUS,
    exact_gradient,
    minibatch,
    rao_blackwellize,
    rb_budgeted,
)
from rbgrad.models import bernoulli_integrand

seeds = st.integers(0, 2**32 - 1)


# moments

def test_streaming_matches_two_pass():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 2.0, size=(10_000, 3)) * np.array([1.0, 1e3, 1e-3])
    acc = StreamingMoments(3)
    for row in x:
        acc.push(row)
    a, b = acc.report(), two_pass_moments(x)
    np.testing.assert_allclose(a.mean, b.mean, rtol=1e-10)
    np.testing.assert_allclose(a.var, b.var, rtol=1e-10)


def test_constant_estimator_has_zero_variance():
    rep = empirical_moments(lambda r: np.array([0.1, -7.3]), 1000, np.random.default_rng(0))
    assert np.all(rep.var == 0.0)


def test_standard_normal_mock():
    M = 100_000
    rep = empirical_moments(lambda r: r.normal(), M, np.random.default_rng(1))
    assert abs(rep.mean[0]) <= 4 / np.sqrt(M)
    assert abs(rep.var[0] - 1) <= 0.1
    assert rep.se[0] == pytest.approx(np.sqrt(rep.var[0] / M))


def test_non_finite_samples_are_excluded_and_counted():
    values = iter([1.0, np.nan, 2.0, np.inf, 3.0])
    rep = empirical_moments(lambda r: next(values), 5, np.random.default_rng(0))
    assert rep.excluded == 2 and rep.M == 3
    assert rep.mean[0] == pytest.approx(2.0)


def test_empirical_moments_needs_two_samples():
    with pytest.raises(DomainError):
        empirical_moments(lambda r: 0.0, 1, np.random.default_rng(0))
    with pytest.raises(NumericError):
        empirical_moments(lambda r: np.nan, 10, np.random.default_rng(0))


def test_rb_full_support_reinforce_is_deterministic():
    inst = random_instance(np.random.default_rng(2))
    K = inst.dist.support_size
    rep = empirical_moments(lambda r: rao_blackwellize(REINFORCE, inst.dist, inst.integrand, inst.eta, K, r),
                            200, np.random.default_rng(3))
    assert rep.total_var == 0.0


# exact enumeration

@pytest.mark.parametrize("seed", range(5))
def test_exact_mean_of_reinforce_is_exact_gradient(seed):
    inst = random_instance(np.random.default_rng(seed))
    rep = exact_moments(REINFORCE, inst.dist, inst.integrand, inst.eta)
    np.testing.assert_allclose(rep.mean, exact_gradient(inst.dist, inst.integrand, inst.eta).grad, atol=1e-12)


@pytest.mark.parametrize("base,k", [(REINFORCE, 0), (REINFORCE, 2), (REINFORCE_PLUS, 0), (REINFORCE_PLUS, 1)])
def test_exact_and_empirical_moments_agree(base, k):
    inst = random_instance(np.random.default_rng(4), K=4)
    d, f, eta = inst.dist, inst.integrand, inst.eta
    exact = exact_moments(base, d, f, eta, k)
    emp = empirical_moments(lambda r: rao_blackwellize(base, d, f, eta, k, r), 100_000, np.random.default_rng(5))
    assert np.all(np.abs(emp.mean - exact.mean) <= 4 * emp.se)
    assert np.all(np.abs(emp.var - exact.var) <= 4 * emp.var_se)


def test_exact_minibatch_and_budgeted_moments_agree_with_sampling():
    inst = random_instance(np.random.default_rng(6), K=5)
    d, f, eta = inst.dist, inst.integrand, inst.eta
    for exact, call in [
        (exact_minibatch_moments(REINFORCE_PLUS, d, f, eta, 3),
         lambda r: minibatch(REINFORCE_PLUS, d, f, eta, 3, r)),
        (exact_budgeted_moments(REINFORCE_PLUS, d, f, eta, 4, 2),
         lambda r: rb_budgeted(REINFORCE_PLUS, d, f, eta, 4, 2, r)),
    ]:
        emp = empirical_moments(call, 40_000, np.random.default_rng(7))
        assert np.all(np.abs(emp.mean - exact.mean) <= 4 * emp.se)
        assert np.all(np.abs(emp.var - exact.var) <= 4 * emp.var_se)


def test_enumeration_too_large():
    rng = np.random.default_rng(8)
    dist = SoftmaxCategorical(rng.normal(size=100))
    f = TableIntegrand(rng.normal(size=100))
    with pytest.raises(DomainError):
        exact_moments(REINFORCE_PLUS, dist, f, np.zeros(100))


# triplet law and decomposition

@pytest.mark.parametrize("k", [0, 5])
def test_triplet_law_endpoints(k):
    dist = SoftmaxCategorical([0.5, -1.0, 2.0, 0.0, 1.0])
    np.testing.assert_allclose(triplet_law(dist, k), dist.probs, atol=1e-15)


@given(seeds, st.data())
def test_triplet_law_property(seed, data):
    inst = random_instance(np.random.default_rng(seed), K=5)
    k = data.draw(st.integers(0, 5))
    assert check_triplet_law(inst.dist, k) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seeds, st.integers(0, 5))
def test_variance_decomposition_property(seed, k):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, K=5)
    aux = REINFORCE_PLUS.draw_aux(inst.dist, inst.integrand, inst.eta, rng)
    for base, a in ((REINFORCE, None), (REINFORCE_PLUS, aux)):
        v_g, v_hat, e_cond = variance_decomposition(base, inst.dist, inst.integrand, inst.eta, k, a)
        assert np.max(np.abs(v_g - v_hat - e_cond)) < 1e-10
        assert rb_identity_residual(base, inst.dist, inst.integrand, inst.eta, k, a) < 1e-10


# finite differences

def test_finite_diff_polynomial():
    np.testing.assert_allclose(finite_diff_grad(lambda e: float(np.sum(e**2)), np.array([1.0, 2.0])),
                               [2.0, 4.0], atol=1e-8)


def test_finite_diff_linear_exact():
    w = np.array([0.5, -3.0, 2.0])
    np.testing.assert_allclose(finite_diff_grad(lambda e: float(w @ e), np.array([0.1, 0.2, 0.3])), w, atol=1e-10)


def test_finite_diff_softmax_score():
    logits = np.array([0.3, -1.2, 2.0])
    fd = finite_diff_grad(lambda e: SoftmaxCategorical(e).log_pmf(1), logits)
    assert grad_close(SoftmaxCategorical(logits).score(1), fd)


def test_finite_diff_errors():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda e: float("nan"), np.zeros(2))
    with pytest.raises(DomainError):
        finite_diff_grad(lambda e: 0.0, np.zeros(2), h=0.0)


# sweep

def test_variance_sweep_decreases_and_writes_csv(tmp_path):
    eta = np.array([-4.0])
    dist, f = bernoulli_integrand(eta)
    rows = variance_vs_k_sweep(dist, f, eta, REINFORCE_PLUS, [0, 1, 2, 8], 5000, np.random.default_rng(9))
    for a, b in zip(rows, rows[1:]):
        assert b.total_variance <= a.total_variance * 1.05 + 3 * (a.total_variance_se + b.total_variance_se)
    assert rows[0].tail_mass == 1.0 and rows[-1].tail_mass == 0.0
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, rows)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert table[0] == ["k", "tail_mass", "total_variance", "var_0"]
    assert [int(r[0]) for r in table[1:]] == [0, 1, 2, 8]


def test_budget_suite_passes():
    assert suite_budget(30, np.random.default_rng(10)).passed
