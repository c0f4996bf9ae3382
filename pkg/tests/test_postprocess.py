from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsml.errors import ContractError
from bsml.postprocess import (bsml, default_penalties, estimate_rank, reduce_rank, select_rows,
                              selection_frequencies, shrink_factors, subgradient_residuals,
                              truncate_svd)


def _column_with_sq_norm(n, value, rng):
    x = rng.standard_normal(n)
    return x * math.sqrt(value / np.sum(x * x))


def random_instance(rng, n=None, p=None, q=None):
    n = n or int(rng.integers(5, 30))
    p = p or int(rng.integers(2, 15))
    q = q or int(rng.integers(1, 8))
    X = rng.standard_normal((n, p)) * rng.uniform(0.2, 3.0, p)
    C = rng.standard_normal((p, q)) * rng.choice([1e-3, 0.05, 0.3, 2.0], size=(p, 1))
    return X, C


# ------------------------------------------------------------------ penalties

def test_default_penalty_power_rule():
    C = np.array([[1.0, 0.0], [0.0, 0.1], [0.0, 0.0], [3e-15, 0.0]])
    mu = default_penalties(C)
    assert mu[0] == pytest.approx(1.0)
    assert mu[1] == pytest.approx(100.0)
    assert np.isinf(mu[2]) and np.isinf(mu[3])


def test_rate_claim_plug_in():
    # ||X_j||^2 = n = 1e4, log q = 2.5, row norm sqrt(log q / n)
    n, logq = 1e4, 2.5
    norm = math.sqrt(logq / n)
    C = np.zeros((1, 2))
    C[0, 0] = norm
    mu = default_penalties(C)[0]
    ratio = mu / (2 * n * norm)
    assert ratio == pytest.approx(0.5 * math.sqrt(n) / logq ** 1.5, rel=1e-12)
    assert ratio == pytest.approx(12.65, abs=0.01)
    X = np.zeros((int(n), 1))
    X[:, 0] = 1.0
    assert select_rows(C, X).selected == ()


# ------------------------------------------------------------------ selection

def test_zero_posterior_mean_selects_nothing(rng):
    X = rng.standard_normal((6, 3))
    est = select_rows(np.zeros((3, 2)), X)
    assert est.selected == () and np.all(est.C_R == 0)


def test_hand_computed_shrinkage(rng):
    X = np.column_stack([_column_with_sq_norm(5, 4.0, rng), rng.standard_normal(5)])
    C = np.array([[1.0, 0.0], [0.0, 0.0]])
    est = select_rows(C, X, mu=np.array([1.0, 1.0]))
    assert est.C_R[0, 0] == 0.875 and est.C_R[0, 1] == 0.0
    assert est.selected == (0,)


def test_default_penalty_kills_small_row(rng):
    X = _column_with_sq_norm(10, 100.0, rng)[:, None]
    C = np.array([[0.06, 0.08]])  # norm 0.1 -> mu = 100
    est = select_rows(C, X)
    assert est.mu[0] == pytest.approx(100.0)
    assert shrink_factors(C, X, est.mu)[0] == 0.0
    assert est.selected == ()


def test_zero_design_column_is_zeroed(rng):
    X = rng.standard_normal((5, 2))
    X[:, 1] = 0.0
    est = select_rows(np.ones((2, 3)), X, mu=np.full(2, 1e-6))
    assert est.selected == (0,)


def test_selection_contracts(rng):
    X = rng.standard_normal((5, 2))
    with pytest.raises(ContractError):
        select_rows(np.ones((3, 2)), X)
    with pytest.raises(ContractError):
        select_rows(np.ones((2, 2)), X, mu=np.array([1.0, -1.0]))
    with pytest.raises(ContractError):
        select_rows(np.ones((2, 2)), X, mu=np.ones(3))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_selection_invariants(seed):
    rng = np.random.default_rng(seed)
    X, C = random_instance(rng)
    est = select_rows(C, X)
    nonzero = tuple(int(j) for j in np.flatnonzero(np.any(est.C_R != 0, axis=1)))
    assert nonzero == est.selected
    for j in est.selected:
        # positive multiple of the posterior-mean row
        k = np.dot(est.C_R[j], C[j]) / np.dot(C[j], C[j])
        assert 0 < k <= 1
        np.testing.assert_allclose(est.C_R[j], k * C[j], rtol=1e-12, atol=1e-300)
    assert np.all((est.mu > 0) | np.isinf(est.mu))


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_subgradient_optimality(seed):
    rng = np.random.default_rng(seed)
    X, C = random_instance(rng)
    est = select_rows(C, X)
    resid, margin = subgradient_residuals(C, X, est)
    assert np.all(resid[list(est.selected)] < 1e-8)
    assert np.all(margin >= -1e-9 * (1 + np.abs(est.mu).clip(max=1e12)))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), bump=st.floats(1.0, 100.0))
def test_penalty_monotonicity_and_independence(seed, bump):
    rng = np.random.default_rng(seed)
    X, C = random_instance(rng)
    mu = rng.uniform(0.01, 5.0, C.shape[0])
    base = select_rows(C, X, mu)
    j = int(rng.integers(C.shape[0]))
    mu2 = mu.copy()
    mu2[j] *= bump
    after = select_rows(C, X, mu2)
    assert np.linalg.norm(after.C_R[j]) <= np.linalg.norm(base.C_R[j]) + 1e-15
    others = np.arange(C.shape[0]) != j
    np.testing.assert_array_equal(after.C_R[others], base.C_R[others])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.1, 10.0))
def test_scale_equivariance_of_test_statistic(seed, c):
    rng = np.random.default_rng(seed)
    X, C = random_instance(rng)
    # statistic 2 ||X_j^T R_j|| with R_j = X_j Cbar^(j)
    col_sq = np.sum(X * X, axis=0)
    stat = 2 * col_sq * np.linalg.norm(C, axis=1)
    stat_c = 2 * col_sq * np.linalg.norm(c * C, axis=1)
    np.testing.assert_allclose(stat_c, c * stat, rtol=1e-12)
    mu = rng.uniform(0.01, 5.0, C.shape[0])
    f = shrink_factors(C, X, mu)
    fc = shrink_factors(c * C, X, c * mu)  # mu scaled alongside: factors unchanged
    np.testing.assert_allclose(fc, f, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------------------ rank

def test_rank_noiseless(rng):
    X = rng.standard_normal((20, 5))
    C = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4))
    rank, omega, s = estimate_rank(C, X, X @ C)
    assert omega < 1e-10 and rank == 2 and s.shape == (4,)
    assert np.all(np.diff(s) <= 0)


def test_rank_of_zero_estimate(rng):
    X = rng.standard_normal((8, 3))
    rank, omega, s = estimate_rank(np.zeros((3, 4)), X, rng.standard_normal((8, 4)))
    assert rank == 0 and np.all(s == 0) and omega > 0


def test_rank_strict_threshold():
    X = np.eye(2)
    C = np.diag([2.0, 1.0])
    Y = C + np.array([[0.0, 0.0], [0.0, 1.0]])  # residual has s_max = 1 = s_2
    rank, omega, s = estimate_rank(C, X, Y)
    assert omega == 1.0 and s[1] == 1.0 and rank == 1


def test_rank_singular_values_padded(rng):
    X = rng.standard_normal((3, 2))
    rank, omega, s = estimate_rank(rng.standard_normal((2, 5)), X, rng.standard_normal((3, 5)))
    assert s.shape == (5,) and np.all(s[3:] == 0)
    with pytest.raises(ContractError):
        estimate_rank(np.ones((2, 5)), X, np.ones((4, 5)))


# ------------------------------------------------------------------- reduction

def test_reduce_rank_noop_when_rank_large(rng):
    C = np.zeros((5, 3))
    C[[1, 3]] = rng.standard_normal((2, 3))
    est = reduce_rank(C, (1, 3), 3)
    assert np.max(np.abs(est.C_RR - C)) <= 1e-10


def test_reduce_rank_matches_dense_svd(rng):
    S = rng.standard_normal((4, 2)) @ rng.standard_normal((2, 3))
    C = np.zeros((6, 3))
    rows = [0, 2, 3, 5]
    C[rows] = S
    est = reduce_rank(C, tuple(rows), 1)
    U, s, Vt = np.linalg.svd(S)
    best = s[0] * np.outer(U[:, 0], Vt[0])
    np.testing.assert_allclose(est.C_RR[rows], best, atol=1e-12)
    assert np.all(est.C_RR[[1, 4]] == 0)
    assert np.linalg.matrix_rank(est.C_RR) <= 1


def test_reduce_rank_empty_and_zero(rng):
    C = rng.standard_normal((3, 2))
    assert np.all(reduce_rank(np.zeros((3, 2)), (), 2).C_RR == 0)
    assert np.all(reduce_rank(C, (0, 1, 2), 0).C_RR == 0)
    with pytest.raises(ContractError):
        reduce_rank(C, (0,), -1)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(0, 6))
def test_eckart_young_identity(seed, k):
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 7))))
    T = truncate_svd(S, k)
    s = np.linalg.svd(S, compute_uv=False)
    assert abs(np.sum((S - T) ** 2) - np.sum(s[k:] ** 2)) < 1e-8
    assert np.linalg.matrix_rank(T) <= k


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_bsml_invariants(seed):
    rng = np.random.default_rng(seed)
    X, C = random_instance(rng)
    Y = X @ C + rng.standard_normal((X.shape[0], C.shape[1]))
    sparse, reduced = bsml(C, X, Y)
    assert 0 <= reduced.rank_hat <= min(C.shape[1], len(sparse.selected))
    assert np.linalg.matrix_rank(reduced.C_RR, tol=1e-9) <= reduced.rank_hat
    zero_rows = np.all(sparse.C_R == 0, axis=1)
    assert np.all(reduced.C_RR[zero_rows] == 0)


def test_selection_frequencies(rng):
    X = rng.standard_normal((10, 3)) * 3
    draws = np.zeros((4, 3, 2))
    draws[:, 0] = 5.0
    draws[:2, 1] = 5.0
    freq = selection_frequencies(draws, X)
    np.testing.assert_array_equal(freq, [1.0, 0.5, 0.0])
    with pytest.raises(ContractError):
        selection_frequencies(np.zeros((3, 2)), X)
