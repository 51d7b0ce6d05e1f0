"""Synthetic instances, MovieLens ingestion, centering and error metrics."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .impute import error_metrics
from .lowrank import SparseTriplets, block_power_svd
from .spectral import LowRankFactor, load_factor, save_factor

REGIMES = ("rom", "coherent", "nonuniform")


@dataclass(frozen=True)
class SyntheticInstance:
    """Low-rank truth plus noisy observations on Omega.

    ``holdout`` holds the noiseless truth on the unobserved entries, which is
    what the standardized test error compares against.
    """

    truth: LowRankFactor
    observed: SparseTriplets
    holdout: SparseTriplets
    snr: float
    seed: int
    regime: str
    noise_sd: float

    def __post_init__(self):
        if self.truth.shape != self.observed.shape or self.holdout.shape != self.observed.shape:
            raise ValueError("truth, observed and holdout must share dimensions")

    @property
    def shape(self) -> tuple[int, int]:
        return self.observed.shape

    def metadata(self) -> dict:
        m, n = self.shape
        return {
            "format": "ncimpute-instance v1",
            "m": m,
            "n": n,
            "rank": self.truth.rank,
            "regime": self.regime,
            "seed": self.seed,
            "snr": self.snr if math.isfinite(self.snr) else "inf",
            "noise_sd": self.noise_sd,
            "n_observed": self.observed.nnz,
            "n_holdout": self.holdout.nnz,
        }


def _orthonormal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    # fix the sign ambiguity of QR so the draw is Haar-distributed
    return q * np.sign(np.diag(r))


def _singular_values(rng: np.random.Generator, r: int) -> np.ndarray:
    return np.sort(rng.uniform(0.0, 100.0, size=r))[::-1]


def _finish(truth, observed_mask, snr, rng, regime, seed) -> SyntheticInstance:
    if not (snr > 0):
        raise ValueError("snr must be positive (use inf for noiseless)")
    M = truth.to_dense()
    if math.isinf(snr):
        sd = 0.0
        Y = M
    else:
        sd = math.sqrt(float(np.var(M)) / snr)
        Y = M + sd * rng.standard_normal(M.shape)
    observed = SparseTriplets.from_dense(Y, observed_mask)
    holdout = SparseTriplets.from_dense(M, ~observed_mask)
    return SyntheticInstance(truth, observed, holdout, float(snr), seed, regime, sd)


def _uniform_mask(rng, m: int, n: int, miss_frac: float) -> np.ndarray:
    if not 0 < miss_frac < 1:
        raise ValueError("miss_frac must lie in (0, 1)")
    n_obs = int(round((1.0 - miss_frac) * m * n))
    if n_obs < 1:
        raise ValueError("miss_frac leaves no observed entries")
    idx = rng.choice(m * n, size=n_obs, replace=False)
    mask = np.zeros(m * n, dtype=bool)
    mask[idx] = True
    return mask.reshape(m, n)


def _check_dims(m, n, r):
    if min(m, n, r) < 1 or r > min(m, n):
        raise ValueError(f"infeasible dimensions m={m}, n={n}, r={r}")


def gen_rom(m: int, n: int, r: int, snr: float, miss_frac: float, seed: int = 0) -> SyntheticInstance:
    """Random orthogonal model: Haar L, R; singular values iid U(0, 100); uniform Omega."""
    _check_dims(m, n, r)
    rng = np.random.default_rng(seed)
    truth = LowRankFactor(_orthonormal(rng, m, r), _singular_values(rng, r), _orthonormal(rng, n, r))
    mask = _uniform_mask(rng, m, n, miss_frac)
    return _finish(truth, mask, snr, rng, "rom", seed)


def gen_coherent(
    m: int = 800, n: int = 400, r: int = 10, snr: float = 1.0, miss_frac: float = 0.9, seed: int = 0,
    blocks: int = 5,
) -> SyntheticInstance:
    """Block-diagonal factors: each block orthonormalized, so the truth is coherent."""
    _check_dims(m, n, r)
    if m % blocks or n % blocks or r % blocks:
        raise ValueError(f"m={m}, n={n}, r={r} must all be divisible by {blocks}")
    rng = np.random.default_rng(seed)
    L = np.zeros((m, r))
    R = np.zeros((n, r))
    bm, bn, br = m // blocks, n // blocks, r // blocks
    for b in range(blocks):
        L[b * bm:(b + 1) * bm, b * br:(b + 1) * br] = _orthonormal(rng, bm, br)
        R[b * bn:(b + 1) * bn, b * br:(b + 1) * br] = _orthonormal(rng, bn, br)
    truth = LowRankFactor(L, _singular_values(rng, r), R)
    mask = _uniform_mask(rng, m, n, miss_frac)
    return _finish(truth, mask, snr, rng, "coherent", seed)


def gen_nonuniform(snr: float = 1.0, seed: int = 0, m: int = 100, n: int = 100, r: int = 10) -> SyntheticInstance:
    """ROM truth with the top-right quadrant (first half of rows, second half of columns) missing."""
    _check_dims(m, n, r)
    rng = np.random.default_rng(seed)
    truth = LowRankFactor(_orthonormal(rng, m, r), _singular_values(rng, r), _orthonormal(rng, n, r))
    mask = np.ones((m, n), dtype=bool)
    mask[: m // 2, n - n // 2:] = False
    return _finish(truth, mask, snr, rng, "nonuniform", seed)


def generate(regime: str, m: int, n: int, r: int, snr: float, miss_frac: float, seed: int = 0) -> SyntheticInstance:
    if regime == "rom":
        return gen_rom(m, n, r, snr, miss_frac, seed)
    if regime == "coherent":
        return gen_coherent(m, n, r, snr, miss_frac, seed)
    if regime == "nonuniform":
        return gen_nonuniform(snr, seed, m, n, r)
    raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")


def coherence(left: np.ndarray) -> float:
    """max_i ||L[i]|| * sqrt(m / r) for orthonormal L (1 is perfectly incoherent)."""
    m, r = left.shape
    return float(np.max(np.linalg.norm(left, axis=1)) * math.sqrt(m / r))


def metrics(estimate: LowRankFactor, instance: SyntheticInstance) -> tuple[float, float]:
    """(training error, test error) as squared-error ratios; nan when undefined."""
    if estimate.shape != instance.shape:
        raise ValueError(f"estimate {estimate.shape} does not match instance {instance.shape}")
    return error_metrics(estimate, instance.observed, instance.holdout, "standardized")


def write_instance(instance: SyntheticInstance, directory) -> Path:
    """train.csv, test.csv (noiseless truth on the complement), truth/ and meta.json."""
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    instance.observed.to_csv(path / "train.csv")
    instance.holdout.to_csv(path / "test.csv")
    save_factor(instance.truth, path / "truth")
    (path / "meta.json").write_text(json.dumps(instance.metadata(), indent=2, sort_keys=True) + "\n")
    return path


def read_instance(directory) -> SyntheticInstance:
    path = Path(directory)
    meta = json.loads((path / "meta.json").read_text())
    shape = (int(meta["m"]), int(meta["n"]))
    snr = math.inf if meta["snr"] == "inf" else float(meta["snr"])
    return SyntheticInstance(
        truth=load_factor(path / "truth"),
        observed=SparseTriplets.from_csv(path / "train.csv", shape),
        holdout=SparseTriplets.from_csv(path / "test.csv", shape),
        snr=snr,
        seed=int(meta["seed"]),
        regime=meta["regime"],
        noise_sd=float(meta["noise_sd"]),
    )


# -- MovieLens -----------------------------------------------------------------------

_SEPARATORS = {"ml100k": "\t", "ml1m": "::"}


def read_movielens(path, fmt: str = "ml100k") -> SparseTriplets:
    """All ratings of a ``u.data`` (tab) or ``ratings.dat`` (``::``) file.

    1-based ids map to index id - 1, so the dimensions are the largest ids.
    Timestamps are ignored.  A repeated (user, item) keeps the last rating.
    """
    if fmt not in _SEPARATORS:
        raise ValueError(f"unknown MovieLens format {fmt!r}; expected one of {tuple(_SEPARATORS)}")
    sep = _SEPARATORS[fmt]
    ratings: dict[tuple[int, int], float] = {}
    dupes = 0
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\r\n").split(sep)
            try:
                if len(parts) < 3:
                    raise ValueError(f"expected at least 3 fields, found {len(parts)}")
                user, item, rating = int(parts[0]), int(parts[1]), float(parts[2])
                if user < 1 or item < 1:
                    raise ValueError("ids must be >= 1")
                if not math.isfinite(rating):
                    raise ValueError("rating is not finite")
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: malformed {fmt} line {line.rstrip()!r}: {exc}") from None
            key = (user - 1, item - 1)
            if key in ratings:
                dupes += 1
                del ratings[key]  # re-insert so "last" also wins on ordering
            ratings[key] = rating
    if dupes:
        warnings.warn(f"{path}: {dupes} duplicate (user, item) pairs; kept the last rating", stacklevel=2)
    if not ratings:
        raise ValueError(f"{path}: no ratings found")
    keys = np.array(list(ratings.keys()), dtype=np.int64)
    vals = np.fromiter(ratings.values(), dtype=float, count=len(ratings))
    m, n = int(keys[:, 0].max()) + 1, int(keys[:, 1].max()) + 1
    return SparseTriplets(m, n, keys[:, 0], keys[:, 1], vals)


def split(data: SparseTriplets, test_frac: float, seed: int = 0) -> tuple[SparseTriplets, SparseTriplets]:
    """Uniform random split by entry: round(test_frac * nnz) entries go to test."""
    if not 0 <= test_frac < 1:
        raise ValueError("test_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(data.nnz)
    n_test = int(round(test_frac * data.nnz))
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])

    def take(idx):
        return SparseTriplets(data.nrows, data.ncols, data.rows[idx], data.cols[idx], data.vals[idx])

    return take(train_idx), take(test_idx)


def load_movielens(path, fmt: str = "ml100k", test_frac: float = 0.2, seed: int = 0):
    """(train, test) split of a MovieLens ratings file."""
    return split(read_movielens(path, fmt), test_frac, seed)


# -- centering -----------------------------------------------------------------------


@dataclass(frozen=True)
class CenteringInfo:
    """y_ij ~ grand_mean + row_means[i] + col_means[j] + residual."""

    row_means: np.ndarray
    col_means: np.ndarray
    grand_mean: float

    def offsets(self, rows, cols) -> np.ndarray:
        return self.grand_mean + self.row_means[rows] + self.col_means[cols]

    def apply(self, data: SparseTriplets) -> SparseTriplets:
        return data.with_values(data.vals - self.offsets(data.rows, data.cols))

    def uncenter(self, data: SparseTriplets) -> SparseTriplets:
        return data.with_values(data.vals + self.offsets(data.rows, data.cols))

    def predict(self, factor: LowRankFactor, rows, cols) -> np.ndarray:
        rows, cols = np.asarray(rows), np.asarray(cols)
        return factor.entries(rows, cols) + self.offsets(rows, cols)


def center(data: SparseTriplets, tol: float = 1e-8, max_iters: int = 10_000) -> tuple[SparseTriplets, CenteringInfo]:
    """Remove the grand mean, then alternate row and column mean removal.

    Stops once no effect moves by more than ``tol``.  Rows or columns without
    observations get effect 0, i.e. they are predicted by the grand mean.
    """
    m, n = data.shape
    if data.nnz == 0:
        return data, CenteringInfo(np.zeros(m), np.zeros(n), 0.0)
    grand = float(np.mean(data.vals))
    resid = data.vals - grand
    row_cnt = np.bincount(data.rows, minlength=m)
    col_cnt = np.bincount(data.cols, minlength=n)
    a, b = np.zeros(m), np.zeros(n)
    for _ in range(max_iters):
        da = np.bincount(data.rows, resid, minlength=m) / np.maximum(row_cnt, 1)
        a += da
        resid -= da[data.rows]
        db = np.bincount(data.cols, resid, minlength=n) / np.maximum(col_cnt, 1)
        b += db
        resid -= db[data.cols]
        if max(np.max(np.abs(da)), np.max(np.abs(db))) < tol:
            break
    else:
        warnings.warn(f"centering did not converge in {max_iters} sweeps", RuntimeWarning, stacklevel=2)
    info = CenteringInfo(a, b, grand)
    return data.with_values(resid), info


def lambda_max(data: SparseTriplets) -> float:
    """||P_Omega(Y)||_2, the smallest lambda with an all-zero soft-threshold fit."""
    if data.nnz == 0:
        raise ValueError("lambda_max of an empty matrix is undefined")
    # a few extra vectors make the top value converge fast even without a gap
    block = min(4, *data.shape)
    res = block_power_svd(data.to_csr(), block, tol=1e-12, max_iters=2000, seed=0)
    return float(res.factor.singvals[0]) if res.factor.rank else 0.0


__all__ = [
    "CenteringInfo",
    "REGIMES",
    "SyntheticInstance",
    "center",
    "coherence",
    "gen_coherent",
    "gen_nonuniform",
    "gen_rom",
    "generate",
    "lambda_max",
    "load_movielens",
    "metrics",
    "read_instance",
    "read_movielens",
    "split",
    "write_instance",
]
