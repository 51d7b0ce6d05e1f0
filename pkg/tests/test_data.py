import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ncimpute.data import (
    center,
    coherence,
    gen_coherent,
    gen_nonuniform,
    gen_rom,
    generate,
    lambda_max,
    load_movielens,
    metrics,
    read_instance,
    read_movielens,
    split,
    write_instance,
)
from ncimpute.impute import FitConfig, fit_single
from ncimpute.lowrank import SparseTriplets
from ncimpute.penalty import make_penalty
from ncimpute.spectral import LowRankFactor
from conftest import ml100k_path


def _check_masks(inst):
    m, n = inst.shape
    a, b = inst.observed.mask(), inst.holdout.mask()
    assert not np.any(a & b)
    assert np.all(a | b)
    assert inst.observed.nnz + inst.holdout.nnz == m * n


def test_rom_shape_and_invariants():
    inst = gen_rom(800, 400, 10, 1.0, 0.9, seed=0)
    assert inst.shape == (800, 400) and inst.truth.rank == 10
    assert inst.observed.nnz == 32000
    inst.truth.check()
    assert np.all((inst.truth.singvals >= 0) & (inst.truth.singvals <= 100))
    _check_masks(inst)


def test_noiseless_instance():
    inst = gen_rom(30, 20, 3, math.inf, 0.5, seed=1)
    assert inst.noise_sd == 0.0
    d = inst.observed
    np.testing.assert_array_equal(d.vals, inst.truth.to_dense()[d.rows, d.cols])


def test_coherent_blocks():
    inst = gen_coherent()
    L = inst.truth.left
    assert inst.shape == (800, 400)
    assert np.count_nonzero(L[:160, :2]) == 320 and np.count_nonzero(L[:160, 2:]) == 0
    assert np.count_nonzero(inst.truth.right[:80, :2]) == 160
    inst.truth.check()
    incoherent = gen_rom(800, 400, 10, 1.0, 0.9, seed=0)
    assert coherence(L) > coherence(incoherent.truth.left)
    with pytest.raises(ValueError):
        gen_coherent(m=801)


def test_nonuniform_mask():
    inst = gen_nonuniform()
    assert inst.observed.nnz == 7500
    mask = inst.observed.mask()
    assert not mask[:50, 50:].any() and mask[50:].all() and mask[:, :50].all()
    _check_masks(inst)


@given(st.sampled_from(["rom", "coherent", "nonuniform"]), st.integers(0, 1000))
def test_reproducible_and_disjoint(regime, seed):
    a = generate(regime, 20, 10, 5, 2.0, 0.6, seed)
    b = generate(regime, 20, 10, 5, 2.0, 0.6, seed)
    for x, y in ((a.observed, b.observed), (a.holdout, b.holdout)):
        assert np.array_equal(x.rows, y.rows) and np.array_equal(x.vals, y.vals)
    assert np.array_equal(a.truth.left, b.truth.left)
    _check_masks(a)


def test_realized_snr():
    for snr in (0.5, 1.0, 5.0):
        inst = gen_rom(200, 100, 5, snr, 0.2, seed=3)
        M = inst.truth.to_dense()
        d = inst.observed
        noise = d.vals - M[d.rows, d.cols]
        realized = np.var(M) / np.var(noise)
        assert abs(realized / snr - 1) <= 0.05


def test_bad_generator_arguments():
    with pytest.raises(ValueError):
        gen_rom(10, 10, 11, 1.0, 0.5)
    with pytest.raises(ValueError):
        gen_rom(10, 10, 2, 0.0, 0.5)
    with pytest.raises(ValueError):
        gen_rom(10, 10, 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        generate("spiral", 10, 10, 2, 1.0, 0.5)


def test_metrics_examples():
    inst = gen_rom(30, 20, 3, 1.0, 0.5, seed=2)
    assert metrics(LowRankFactor.zeros(30, 20), inst) == (1.0, 1.0)
    assert metrics(inst.truth, inst)[1] <= 1e-28
    rng = np.random.default_rng(0)
    Xd = rng.standard_normal((30, 2)) @ rng.standard_normal((2, 20))
    train, test = metrics(LowRankFactor.from_dense(Xd), inst)
    Y = inst.observed.to_dense()
    obs = inst.observed.mask()
    M = inst.truth.to_dense()
    assert train == pytest.approx(np.sum((Y - Xd)[obs] ** 2) / np.sum(Y[obs] ** 2), abs=1e-10)
    assert test == pytest.approx(np.sum((M - Xd)[~obs] ** 2) / np.sum(M[~obs] ** 2), abs=1e-10)


def test_instance_round_trip(tmp_path):
    inst = gen_rom(12, 9, 2, math.inf, 0.4, seed=5)
    write_instance(inst, tmp_path / "i")
    back = read_instance(tmp_path / "i")
    assert np.array_equal(back.observed.vals, inst.observed.vals)
    assert np.array_equal(back.holdout.to_dense(), inst.holdout.to_dense())
    assert np.array_equal(back.truth.singvals, inst.truth.singvals)
    assert back.snr == math.inf and back.regime == "rom"


# -- MovieLens ------------------------------------------------------------------


def _write(tmp_path, text, name="u.data"):
    p = tmp_path / name
    p.write_text(text, encoding="latin-1")
    return p


def test_read_small_ml100k(tmp_path):
    p = _write(tmp_path, "1\t1\t5\t881250949\n3\t2\t3\t891717742\n2\t4\t1\t878887116\n")
    d = read_movielens(p)
    assert d.shape == (3, 4) and d.nnz == 3
    assert d.to_dense()[2, 1] == 3.0


def test_read_ml1m_separator(tmp_path):
    p = _write(tmp_path, "1::1193::5::978300760\n2::10::3::978300761\n", "ratings.dat")
    d = read_movielens(p, "ml1m")
    assert d.shape == (2, 1193) and d.nnz == 2


def test_malformed_line_reports_line_number(tmp_path):
    p = _write(tmp_path, "1\t1\t5\t0\n1\tx\t4\t0\n")
    with pytest.raises(ValueError, match=r":2:"):
        read_movielens(p)


def test_duplicate_keeps_last(tmp_path):
    p = _write(tmp_path, "1\t1\t5\t0\n1\t2\t4\t0\n1\t1\t2\t0\n")
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        d = read_movielens(p)
    assert d.nnz == 2 and d.to_dense()[0, 0] == 2.0
    assert any("duplicate" in str(x.message) for x in w)


@given(st.floats(0, 0.95), st.integers(0, 100))
def test_split_sizes(frac, seed):
    rng = np.random.default_rng(seed)
    d = SparseTriplets.from_dense(rng.standard_normal((9, 7)), rng.uniform(size=(9, 7)) < 0.6)
    train, test = split(d, frac, seed)
    assert test.nnz == round(frac * d.nnz) and train.nnz + test.nnz == d.nnz
    assert not np.any(train.mask() & test.mask())
    again = split(d, frac, seed)
    assert np.array_equal(again[1].rows, test.rows)


@pytest.mark.skipif(ml100k_path() is None, reason="ml-100k u.data not available")
def test_full_ml100k_counts():
    train, test = load_movielens(ml100k_path(), "ml100k", 0.2, seed=0)
    assert train.shape == (943, 1682)
    assert train.nnz + test.nnz == 100000 and test.nnz == 20000


# -- centering and lambda_max -----------------------------------------------------


def test_constant_matrix_centering():
    d = SparseTriplets.from_dense(np.full((5, 4), 3.5), np.eye(5, 4, dtype=bool) | np.eye(5, 4, 1, dtype=bool))
    c, info = center(d)
    assert np.max(np.abs(c.vals)) <= 1e-12
    np.testing.assert_allclose(info.predict(LowRankFactor.zeros(5, 4), [0, 4, 2], [3, 0, 1]), 3.5)


def test_centering_removes_row_and_column_means():
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((30, 20)) + rng.standard_normal((30, 1)) * 3 + rng.standard_normal((1, 20))
    d = SparseTriplets.from_dense(Y, rng.uniform(size=Y.shape) < 0.5)
    c, info = center(d, tol=1e-12)
    R = c.to_dense()
    mask = d.mask()
    assert np.max(np.abs(R.sum(axis=1) / np.maximum(mask.sum(axis=1), 1))) <= 1e-10
    assert np.max(np.abs(R.sum(axis=0) / np.maximum(mask.sum(axis=0), 1))) <= 1e-10
    np.testing.assert_allclose(info.uncenter(c).vals, d.vals, atol=1e-12)


def test_lambda_max_examples():
    assert lambda_max(SparseTriplets(3, 3, [0], [0], [3.0])) == pytest.approx(3.0)
    assert lambda_max(SparseTriplets.from_dense(np.diag([5.0, 1.0]))) == pytest.approx(5.0)
    rng = np.random.default_rng(4)
    d = SparseTriplets.from_dense(rng.standard_normal((50, 40)), rng.uniform(size=(50, 40)) < 0.3)
    assert lambda_max(d) == pytest.approx(np.linalg.norm(d.to_dense(), 2), abs=1e-6)


def test_lambda_max_is_zero_threshold():
    inst = gen_rom(40, 30, 3, 2.0, 0.5, seed=6)
    lmax = lambda_max(inst.observed)
    cfg = FitConfig(epsilon=1e-6)
    assert fit_single(inst.observed, make_penalty("l1", 1.001 * lmax), cfg).rank == 0
    assert fit_single(inst.observed, make_penalty("l1", 0.95 * lmax), cfg).rank >= 1
