import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ncimpute.lowrank import (
    SparsePlusLowRank,
    SparseTriplets,
    block_power_svd,
    orthonormalize,
    read_triplets,
    stewart_bound_check,
    subspace_distance,
)
from ncimpute.spectral import LowRankFactor


def _random_op(rng, m=8, n=6, r=2, density=0.4, scale=0.7):
    mask = rng.uniform(size=(m, n)) < density
    S = SparseTriplets.from_dense(rng.standard_normal((m, n)), mask)
    L = LowRankFactor.from_dense(rng.standard_normal((m, r)) @ rng.standard_normal((r, n)))
    return SparsePlusLowRank(S, L, scale)


def test_lowrank_only_product():
    rng = np.random.default_rng(0)
    L = LowRankFactor.from_dense(rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4)))
    op = SparsePlusLowRank(SparseTriplets(5, 4, [], [], []), L)
    x = rng.standard_normal(4)
    np.testing.assert_allclose(op.matvec(x), L.left @ (L.singvals * (L.right.T @ x)), atol=1e-13)


def test_matvec_matches_dense():
    rng = np.random.default_rng(1)
    op = _random_op(rng)
    x = rng.standard_normal(6)
    assert np.max(np.abs(op.matvec(x) - op.to_dense() @ x)) <= 1e-12
    X = rng.standard_normal((6, 3))
    assert np.max(np.abs(op.matmat(X) - op.to_dense() @ X)) <= 1e-12


def test_single_entry():
    S = SparseTriplets(4, 3, [2], [1], [5.0])
    op = SparsePlusLowRank(S, LowRankFactor.zeros(4, 3), scale=0.5)
    np.testing.assert_array_equal(op.matvec(np.eye(3)[1]), [0, 0, 2.5, 0])


@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12), st.floats(0.1, 3))
def test_adjoint_consistency(seed, m, n, scale):
    rng = np.random.default_rng(seed)
    op = _random_op(rng, m, n, r=min(m, n, 2), scale=scale)
    x, y = rng.standard_normal(n), rng.standard_normal(m)
    lhs, rhs = op.matvec(x) @ y, x @ op.rmatvec(y)
    assert abs(lhs - rhs) <= 1e-10 * (1 + abs(lhs))


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        SparsePlusLowRank(SparseTriplets(3, 3, [], [], []), LowRankFactor.zeros(3, 4))


def test_triplet_validation():
    with pytest.raises(ValueError):
        SparseTriplets(2, 2, [0, 0], [1, 1], [1.0, 2.0])
    with pytest.raises(ValueError):
        SparseTriplets(2, 2, [2], [0], [1.0])
    with pytest.raises(ValueError):
        SparseTriplets(2, 2, [0], [0], [np.inf])


def test_csv_and_mtx_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    S = SparseTriplets.from_dense(rng.standard_normal((6, 5)), rng.uniform(size=(6, 5)) < 0.5)
    S.to_csv(tmp_path / "a.csv")
    first = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert "np." not in first and first.count(",") == 2
    B = read_triplets(tmp_path / "a.csv", shape=(6, 5))
    np.testing.assert_array_equal(B.to_dense(), S.to_dense())
    S.to_matrix_market(tmp_path / "a.mtx")
    C = read_triplets(tmp_path / "a.mtx")
    assert C.shape == (6, 5)
    np.testing.assert_allclose(C.to_dense(), S.to_dense(), rtol=1e-15)


def test_csv_rejects_fractional_index(tmp_path):
    (tmp_path / "b.csv").write_text("0.5,1,2.0\n")
    with pytest.raises(ValueError):
        read_triplets(tmp_path / "b.csv")


def test_orthonormalize_handles_deficient_block():
    rng = np.random.default_rng(0)
    M = np.zeros((10, 4))
    M[:, 0] = rng.standard_normal(10)
    M[:, 1] = 2 * M[:, 0]
    Q = orthonormalize(M, rng)
    np.testing.assert_allclose(Q.T @ Q, np.eye(4), atol=1e-12)


def test_power_known_spectrum():
    res = block_power_svd(np.diag([5.0, 4, 3, 2, 1]), 2, tol=1e-12, max_iters=50)
    np.testing.assert_allclose(res.factor.singvals, [5, 4], atol=1e-8)
    assert res.n_iter <= 50 and res.converged


def _noisy_rank4(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((50, 4)) @ np.diag([20, 15, 10, 8]) @ rng.standard_normal((4, 30)) / 5
    return A + 0.01 * rng.standard_normal((50, 30))


def test_power_matches_dense_and_warm_start():
    A = _noisy_rank4()
    ref = np.linalg.svd(A, compute_uv=False)[:4]
    res = block_power_svd(A, 4, tol=1e-12, max_iters=500)
    np.testing.assert_allclose(res.factor.singvals, ref, atol=1e-6)
    res.factor.check()
    U = np.linalg.svd(A)[0][:, :4]
    warm = block_power_svd(A, 4, warm=(U, None), tol=1e-10, max_iters=50)
    assert warm.n_iter <= 2


def test_power_rank_errors_and_warning():
    with pytest.raises(ValueError):
        block_power_svd(np.eye(3), 4)
    rng = np.random.default_rng(0)
    A = rng.standard_normal((30, 30))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        res = block_power_svd(A, 10, tol=1e-15, max_iters=2)
    assert not res.converged and any("did not converge" in str(x.message) for x in w)
    res.factor.check()


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_ritz_values_within_tolerance(seed, r):
    rng = np.random.default_rng(seed)
    s = np.sort(rng.uniform(1, 10, size=8))[::-1]
    s[r:] *= 0.5  # spectral gap at position r
    U = np.linalg.qr(rng.standard_normal((12, 8)))[0]
    V = np.linalg.qr(rng.standard_normal((9, 8)))[0]
    A = (U * s) @ V.T
    tol = 1e-8
    res = block_power_svd(A, r, tol=tol, max_iters=5000, seed=seed)
    assert np.max(np.abs(res.factor.singvals - s[:r])) <= tol * s[0] * 10
    res.factor.check()


def test_warm_start_dominance_on_slow_sequence():
    rng = np.random.default_rng(5)
    A = _noisy_rank4(3)
    cold = warm = 0
    prev = None
    for _ in range(8):
        E = rng.standard_normal(A.shape)
        A = A + 0.005 * np.linalg.norm(A) * E / np.linalg.norm(E)
        c = block_power_svd(A, 4, tol=1e-9, max_iters=1000, seed=1)
        w = block_power_svd(A, 4, warm=prev, tol=1e-9, max_iters=1000, seed=1)
        cold += c.n_iter
        warm += w.n_iter
        prev = (w.factor.left, None)
    assert warm <= cold


def test_subspace_distance_examples():
    rng = np.random.default_rng(0)
    F = LowRankFactor.from_dense(rng.standard_normal((5, 2)) @ rng.standard_normal((2, 4)))
    assert subspace_distance(F, F).rho <= 1e-12
    e1 = LowRankFactor(np.array([[1.0], [0]]), np.array([1.0]), np.array([[1.0]]))
    e2 = LowRankFactor(np.array([[0.0], [1]]), np.array([1.0]), np.array([[1.0]]))
    assert subspace_distance(e1, e2, 1).rho == pytest.approx(1.0)
    with pytest.raises(ValueError):
        subspace_distance(F, F, 3)


@given(st.floats(0, np.pi / 2))
def test_subspace_distance_rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    u = np.array([[1.0], [0], [0]])
    one = np.array([[1.0]])
    F1 = LowRankFactor(u, np.array([1.0]), one)
    F2 = LowRankFactor(R @ u, np.array([1.0]), one)
    assert subspace_distance(F1, F2, 1).rho == pytest.approx(np.sin(theta), abs=1e-10)


@given(st.integers(0, 2**32 - 1))
def test_subspace_distance_symmetric_and_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    F1 = LowRankFactor.from_dense(rng.standard_normal((7, 3)) @ rng.standard_normal((3, 5)))
    F2 = LowRankFactor.from_dense(rng.standard_normal((7, 3)) @ rng.standard_normal((3, 5)))
    d12, d21 = subspace_distance(F1, F2, 3), subspace_distance(F2, F1, 3)
    assert d12.rho == pytest.approx(d21.rho, abs=1e-12)
    Q = np.linalg.qr(rng.standard_normal((3, 3)))[0]
    G = LowRankFactor(F1.left @ Q, F1.singvals, F1.right @ Q)
    assert subspace_distance(G, F2, 3).rho == pytest.approx(d12.rho, abs=1e-10)


def test_stewart_examples():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((10, 8))
    same = stewart_bound_check(A, A, 3)
    assert same.applicable and same.rho <= 1e-10 and same.bound <= 1e-10
    rep = stewart_bound_check(A, A + 1e-3 * rng.standard_normal((10, 8)), 3)
    assert rep.applicable and rep.rho <= rep.bound and not rep.violation
    assert not stewart_bound_check(np.zeros((4, 4)), np.zeros((4, 4)), 2).applicable
