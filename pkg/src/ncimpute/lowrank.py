"""Structured operators and warm-started low-rank SVDs.

The iterate of the imputation loop is ``sparse * scale + U diag(s) V'``, which
is never formed densely: products with it cost O(|Omega| + r (m + n)).
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from .spectral import LowRankFactor

logger = logging.getLogger(__name__)

DEFAULT_SVD_TOL = 1e-5
DEFAULT_SVD_MAX_ITERS = 100


@dataclass(frozen=True)
class SparseTriplets:
    """Observed entries (rows[k], cols[k]) -> vals[k] of an nrows x ncols matrix."""

    nrows: int
    ncols: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        vals = np.asarray(self.vals, dtype=float)
        if not (rows.shape == cols.shape == vals.shape) or rows.ndim != 1:
            raise ValueError("rows, cols and vals must be 1-d arrays of equal length")
        if rows.size:
            if rows.min() < 0 or rows.max() >= self.nrows or cols.min() < 0 or cols.max() >= self.ncols:
                raise ValueError("triplet index out of range")
            if not np.all(np.isfinite(vals)):
                raise ValueError("triplet values must be finite")
            keys = rows * self.ncols + cols
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate (row, col) coordinates")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "vals", vals)

    @property
    def shape(self) -> tuple[int, int]:
        return self.nrows, self.ncols

    @property
    def nnz(self) -> int:
        return int(self.vals.size)

    def __len__(self) -> int:
        return self.nnz

    def with_values(self, vals) -> "SparseTriplets":
        return SparseTriplets(self.nrows, self.ncols, self.rows, self.cols, vals)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.vals
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out

    def frobenius_sq(self) -> float:
        return float(self.vals @ self.vals)

    @classmethod
    def from_dense(cls, A, mask=None) -> "SparseTriplets":
        A = np.asarray(A, dtype=float)
        mask = np.ones(A.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls(A.shape[0], A.shape[1], rows, cols, A[rows, cols])

    # -- files ---------------------------------------------------------------

    @classmethod
    def from_csv(cls, path, shape: tuple[int, int] | None = None) -> "SparseTriplets":
        """Headerless ``row,col,value`` lines with 0-based indices."""
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        if data.size == 0:
            if shape is None:
                raise ValueError(f"{path}: empty file and no shape given")
            return cls(shape[0], shape[1], [], [], [])
        if data.shape[1] != 3:
            raise ValueError(f"{path}: expected 3 columns, found {data.shape[1]}")
        rows, cols = data[:, 0], data[:, 1]
        if np.any(rows != np.round(rows)) or np.any(cols != np.round(cols)):
            raise ValueError(f"{path}: non-integer indices")
        rows, cols = rows.astype(np.int64), cols.astype(np.int64)
        if shape is None:
            shape = (int(rows.max()) + 1, int(cols.max()) + 1)
        return cls(shape[0], shape[1], rows, cols, data[:, 2])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            for r, c, v in zip(self.rows.tolist(), self.cols.tolist(), self.vals.tolist()):
                fh.write(f"{r},{c},{v!r}\n")

    @classmethod
    def from_matrix_market(cls, path) -> "SparseTriplets":
        coo = sp.coo_matrix(scipy.io.mmread(str(path)))
        coo.sum_duplicates()
        return cls(coo.shape[0], coo.shape[1], coo.row, coo.col, coo.data)

    def to_matrix_market(self, path) -> None:
        scipy.io.mmwrite(str(path), sp.coo_matrix((self.vals, (self.rows, self.cols)), shape=self.shape))


def read_triplets(path, shape=None) -> SparseTriplets:
    """Dispatch on extension: ``.mtx`` is MatrixMarket, anything else CSV."""
    if Path(path).suffix.lower() == ".mtx":
        return SparseTriplets.from_matrix_market(path)
    return SparseTriplets.from_csv(path, shape=shape)


class SparsePlusLowRank:
    """Implicit ``scale * S + U diag(s) V'`` with S sparse."""

    def __init__(self, sparse: SparseTriplets, lowrank: LowRankFactor, scale: float = 1.0):
        if sparse.shape != lowrank.shape:
            raise ValueError(f"dimension mismatch: sparse {sparse.shape} vs low-rank {lowrank.shape}")
        if not scale > 0:
            raise ValueError("scale must be positive")
        self.sparse = sparse
        self.lowrank = lowrank
        self.scale = float(scale)
        self._csr = sparse.to_csr()
        self._csr_t = self._csr.T.tocsr()
        self.shape = sparse.shape
        self.dtype = np.dtype(float)

    def matmat(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.shape[1]:
            raise ValueError(f"operand has {X.shape[0]} rows, expected {self.shape[1]}")
        return self._apply(self._csr, self.lowrank.left, self.lowrank.right, X)

    def rmatmat(self, Y: np.ndarray) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if Y.shape[0] != self.shape[0]:
            raise ValueError(f"operand has {Y.shape[0]} rows, expected {self.shape[0]}")
        return self._apply(self._csr_t, self.lowrank.right, self.lowrank.left, Y)

    def _apply(self, csr, out_basis, in_basis, X):
        X2 = X.reshape(X.shape[0], -1)
        out = self.scale * np.asarray(csr @ X2)
        if self.lowrank.rank:
            out += out_basis @ (self.lowrank.singvals[:, None] * (in_basis.T @ X2))
        return out.reshape((out.shape[0],) + X.shape[1:])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ValueError("matvec expects a vector")
        return self.matmat(x)

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim != 1:
            raise ValueError("rmatvec expects a vector")
        return self.rmatmat(y)

    def to_dense(self) -> np.ndarray:
        return self.scale * self.sparse.to_dense() + self.lowrank.to_dense()


def _block_ops(op):
    """(matmat, rmatmat, shape) for arrays, scipy sparse/LinearOperator or duck types."""
    if isinstance(op, np.ndarray) or sp.issparse(op):
        return (lambda X: np.asarray(op @ X)), (lambda Y: np.asarray(op.T @ Y)), op.shape
    if hasattr(op, "rmatmat"):
        return op.matmat, op.rmatmat, op.shape
    raise TypeError(f"cannot use {type(op).__name__} as a linear operator")


def orthonormalize(M: np.ndarray, rng: np.random.Generator, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis with the same column count as M.

    Numerically dependent columns are detected by pivoted QR and replaced by
    random directions orthogonal to the retained ones.
    """
    m, k = M.shape
    if k == 0:
        return np.zeros((m, 0))
    Q, R = np.linalg.qr(M)
    d = np.abs(np.diag(R))
    scale = np.max(np.abs(M)) if M.size else 0.0
    if scale > 0 and d.min() > tol * max(d.max(), scale):
        return Q
    if scale > 0:
        Qp, Rp, _ = scipy.linalg.qr(M, mode="economic", pivoting=True)
        dp = np.abs(np.diag(Rp))
        keep = int(np.sum(dp > tol * dp[0])) if dp[0] > 0 else 0
    else:
        Qp, keep = np.zeros((m, 0)), 0
    basis = Qp[:, :keep]
    fill = rng.standard_normal((m, k - keep))
    fill -= basis @ (basis.T @ fill)
    Qf, _ = np.linalg.qr(np.hstack([basis, fill]))
    return Qf


@dataclass(frozen=True)
class BlockPowerResult:
    factor: LowRankFactor
    n_iter: int
    converged: bool
    ritz_values: np.ndarray


def block_power_svd(
    op,
    rank: int,
    warm: tuple[np.ndarray, np.ndarray] | LowRankFactor | None = None,
    tol: float = DEFAULT_SVD_TOL,
    max_iters: int = DEFAULT_SVD_MAX_ITERS,
    seed: int | np.random.Generator | None = 0,
    n_check: int | None = None,
) -> BlockPowerResult:
    """Top-``rank`` SVD by alternating (block power / ALS) iterations.

    Each sweep sets V <- orth(A'U), U <- orth(AV); the Ritz values are the
    singular values of the small matrix U'AV.  Stops once the leading
    ``n_check`` (default: all) Ritz values move by less than ``tol`` relative
    to the largest one, or once successive U spans are within ``tol`` in
    canonical-angle distance.  Trailing Ritz values are lower bounds on the
    true singular values even when they have not settled.

    ``warm`` may carry fewer than ``rank`` columns; the rest is random.
    Singular values that are exactly zero are dropped from the returned factor.
    """
    matmat, rmatmat, (m, n) = _block_ops(op)
    if not 0 <= rank <= min(m, n):
        raise ValueError(f"rank {rank} must lie in [0, min(m, n) = {min(m, n)}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if rank == 0:
        return BlockPowerResult(LowRankFactor.zeros(m, n), 0, True, np.zeros(0))
    k = rank if n_check is None else max(1, min(n_check, rank))

    if warm is None:
        U = orthonormalize(rng.standard_normal((m, rank)), rng)
    else:
        U0 = warm.left if isinstance(warm, LowRankFactor) else np.asarray(warm[0], dtype=float)
        if U0.shape[0] != m or U0.shape[1] > rank:
            raise ValueError(f"warm start of shape {U0.shape} does not fit an {m}x{n} rank-{rank} SVD")
        U = orthonormalize(np.hstack([U0, rng.standard_normal((m, rank - U0.shape[1]))]), rng)

    prev = None
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        V = orthonormalize(rmatmat(U), rng)
        AV = matmat(V)
        U_new = orthonormalize(AV, rng)
        core = U_new.T @ AV
        ritz = np.linalg.svd(core, compute_uv=False)
        top = max(ritz[0], np.finfo(float).tiny)
        drift = _sin_theta_cos_form(U[:, :k], U_new[:, :k]) if k == rank else math.inf
        U = U_new
        if prev is not None and np.max(np.abs(ritz[:k] - prev[:k])) < tol * top:
            converged = True
        if drift < tol:
            converged = True
        prev = ritz
        if converged:
            break

    V = orthonormalize(rmatmat(U), rng)
    core = U.T @ matmat(V)
    Uc, s, Vct = np.linalg.svd(core)
    left, right = U @ Uc, V @ Vct.T
    keep = s > 1e-14 * max(s[0], np.finfo(float).tiny)
    if not converged:
        warnings.warn(
            f"block_power_svd did not converge in {max_iters} iterations", RuntimeWarning, stacklevel=2
        )
    factor = LowRankFactor(left[:, keep], s[keep], right[:, keep])
    return BlockPowerResult(factor, it, converged, s)


def _sin_theta(S1: np.ndarray, S2: np.ndarray) -> float:
    """Spectral norm of sin(Theta) between the spans of orthonormal S1, S2."""
    if S1.shape[1] == 0:
        return 0.0
    resid = S2 - S1 @ (S1.T @ S2)
    return float(min(1.0, np.linalg.norm(resid, 2)))


def _sin_theta_cos_form(S1: np.ndarray, S2: np.ndarray) -> float:
    c = np.linalg.svd(S1.T @ S2, compute_uv=False)
    return float(np.sqrt(max(0.0, 1.0 - min(1.0, c.min()) ** 2)))


@dataclass(frozen=True)
class SubspaceDistance:
    rho: float
    left: float
    right: float


def subspace_distance(F1: LowRankFactor, F2: LowRankFactor, p: int | None = None) -> SubspaceDistance:
    """max of ||sin Theta||_2 over the top-p left and right singular subspaces."""
    if F1.shape != F2.shape:
        raise ValueError(f"ambient dimensions differ: {F1.shape} vs {F2.shape}")
    if p is None:
        p = min(F1.rank, F2.rank)
    if p > F1.rank or p > F2.rank or p < 0:
        raise ValueError(f"p = {p} exceeds the factor ranks ({F1.rank}, {F2.rank})")
    left = _sin_theta(F1.left[:, :p], F2.left[:, :p])
    right = _sin_theta(F1.right[:, :p], F2.right[:, :p])
    return SubspaceDistance(max(left, right), left, right)


@dataclass(frozen=True)
class PerturbationReport:
    applicable: bool
    rho: float = float("nan")
    bound: float = float("nan")
    delta: float = float("nan")
    violation: bool = False


def stewart_bound_check(A, Atilde, r1: int) -> PerturbationReport:
    """Compare rho_{r1}(A, Atilde) with max(||R||_2, ||Q||_2) / delta.

    R = A V~1 - U~1 S~1, Q = A' U~1 - V~1 S~1 and delta is the gap between the
    smallest kept singular value of Atilde and the largest discarded one of A.
    """
    A = np.asarray(A, dtype=float)
    At = np.asarray(Atilde, dtype=float)
    if A.shape != At.shape:
        raise ValueError("A and Atilde must have the same shape")
    if not 1 <= r1 <= min(A.shape):
        raise ValueError("r1 out of range")
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    Ut, st, Vtt = np.linalg.svd(At, full_matrices=False)
    alpha = float(s[r1]) if r1 < len(s) else 0.0
    delta = float(st[r1 - 1]) - alpha
    if not delta > 0:
        return PerturbationReport(False, delta=delta)
    U1, V1 = U[:, :r1], Vt[:r1].T
    Ut1, Vt1, St1 = Ut[:, :r1], Vtt[:r1].T, st[:r1]
    R = A @ Vt1 - Ut1 * St1
    Q = A.T @ Ut1 - Vt1 * St1
    bound = max(np.linalg.norm(R, 2), np.linalg.norm(Q, 2)) / delta
    rho = max(_sin_theta(U1, Ut1), _sin_theta(V1, Vt1))
    return PerturbationReport(True, rho, float(bound), delta, rho > bound + 1e-10)
