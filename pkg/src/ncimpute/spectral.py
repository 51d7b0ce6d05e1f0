"""Spectral thresholding: scalar thresholds lifted to matrices through the SVD."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .penalty import PenaltySpec, penalty_value, scalar_threshold

DENSE_SVD_MAX_DIM = 400
ZERO_TOL = 1e-12


@dataclass(frozen=True)
class LowRankFactor:
    """X = left @ diag(singvals) @ right.T with orthonormal columns."""

    left: np.ndarray
    singvals: np.ndarray
    right: np.ndarray

    def __post_init__(self):
        r = len(self.singvals)
        if self.left.ndim != 2 or self.right.ndim != 2:
            raise ValueError("left/right must be 2-d")
        if self.left.shape[1] != r or self.right.shape[1] != r:
            raise ValueError(
                f"rank mismatch: left {self.left.shape}, singvals {r}, right {self.right.shape}"
            )

    @classmethod
    def zeros(cls, m: int, n: int) -> "LowRankFactor":
        return cls(np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0)))

    @classmethod
    def from_dense(cls, X: np.ndarray, tol: float = ZERO_TOL) -> "LowRankFactor":
        U, s, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
        keep = s > tol * max(s[0] if s.size else 0.0, np.finfo(float).tiny)
        return cls(U[:, keep], s[keep], Vt[keep].T)

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[0]

    @property
    def rank(self) -> int:
        return len(self.singvals)

    def to_dense(self) -> np.ndarray:
        return (self.left * self.singvals) @ self.right.T

    def frobenius_sq(self) -> float:
        return float(np.sum(self.singvals**2))

    def entries(self, rows, cols) -> np.ndarray:
        """X[rows[k], cols[k]] for each k, without forming X."""
        if self.rank == 0:
            return np.zeros(len(rows))
        return np.einsum("ij,ij->i", self.left[rows] * self.singvals, self.right[cols])

    def truncate(self, r: int) -> "LowRankFactor":
        return LowRankFactor(self.left[:, :r], self.singvals[:r], self.right[:, :r])

    def check(self, tol: float = 1e-8) -> None:
        """Raise if the orthonormality/ordering invariants fail."""
        m, n = self.shape
        r = self.rank
        if r > min(m, n):
            raise ValueError(f"rank {r} exceeds min(m, n) = {min(m, n)}")
        eye = np.eye(r)
        if r and np.max(np.abs(self.left.T @ self.left - eye)) > tol:
            raise ValueError("left factor is not orthonormal")
        if r and np.max(np.abs(self.right.T @ self.right - eye)) > tol:
            raise ValueError("right factor is not orthonormal")
        if np.any(self.singvals <= 0):
            raise ValueError("singular values must be strictly positive")
        if np.any(np.diff(self.singvals) > 0):
            raise ValueError("singular values must be nonincreasing")


def diff_frobenius_sq(a: LowRankFactor, b: LowRankFactor) -> float:
    """||A - B||_F^2 from the factors (no dense m x n product).

    QR of the stacked bases avoids the cancellation of ||A||^2 + ||B||^2 - 2<A,B>.
    """
    if a.rank + b.rank == 0:
        return 0.0
    _, Ru = np.linalg.qr(np.hstack([a.left, b.left]))
    _, Rv = np.linalg.qr(np.hstack([a.right, b.right]))
    d = np.concatenate([a.singvals, -b.singvals])
    core = (Ru * d) @ Rv.T
    return float(np.sum(core**2))


def spectral_threshold_dense(Z, spec: PenaltySpec, ell: float = 0.0) -> LowRankFactor:
    """U diag(s(sigma)) V' for the SVD Z = U diag(sigma) V'."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError("Z must be a matrix")
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z has non-finite entries")
    if min(Z.shape) > DENSE_SVD_MAX_DIM:
        raise ValueError(
            f"min(m, n) = {min(Z.shape)} > {DENSE_SVD_MAX_DIM}; use lowrank.block_power_svd"
        )
    U, sigma, Vt = np.linalg.svd(Z, full_matrices=False)
    return threshold_svd(U, sigma, Vt.T, spec, ell)


def threshold_svd(U, sigma, V, spec: PenaltySpec, ell: float = 0.0) -> LowRankFactor:
    """Apply the scalar threshold to a (possibly partial) SVD and drop zeros."""
    s = np.asarray(scalar_threshold(spec, np.asarray(sigma, dtype=float), ell), dtype=float)
    top = float(sigma[0]) if len(sigma) else 0.0
    keep = s > ZERO_TOL * top
    order = np.argsort(-s[keep], kind="stable")
    idx = np.flatnonzero(keep)[order]
    return LowRankFactor(U[:, idx], s[idx], V[:, idx])


def spectral_objective(X: LowRankFactor, Z, spec: PenaltySpec) -> float:
    """g(X) = 1/2 ||X - Z||_F^2 + sum_i P(sigma_i(X))."""
    Z = np.asarray(Z, dtype=float)
    if X.shape != Z.shape:
        raise ValueError(f"dimension mismatch: X {X.shape} vs Z {Z.shape}")
    fit = 0.5 * float(np.sum((X.to_dense() - Z) ** 2))
    return fit + float(np.sum(penalty_value(spec, X.singvals)))


@dataclass(frozen=True)
class LipschitzReport:
    max_ratio: float
    bound: float
    trials: int
    violation: bool


def lipschitz_check(
    spec: PenaltySpec, trials: int = 1000, dims: tuple[int, int] = (10, 8), seed: int = 0
) -> LipschitzReport:
    """Monte Carlo check of ||S(Z1) - S(Z2)||_F <= ||Z1 - Z2||_F / (1 + phi_p).

    Pairs are Z2 = Z1 + t*E with Gaussian Z1, E and t log-uniform in [1e-3, 10],
    so both nearby and far-apart pairs are probed.
    """
    tau = spec.concavity.strong_convexity_tau
    if not tau > 0:
        raise ValueError(f"1 + phi_p = {tau} <= 0: the spectral map is not Lipschitz")
    bound = 1.0 / tau
    rng = np.random.default_rng(seed)
    m, n = dims
    worst = 0.0
    for _ in range(trials):
        Z1 = rng.standard_normal((m, n))
        Z2 = Z1 + 10 ** rng.uniform(-3, 1) * rng.standard_normal((m, n))
        worst = max(worst, lipschitz_ratio(spec, Z1, Z2))
    return LipschitzReport(worst, bound, trials, worst > bound * (1 + 1e-6))


def lipschitz_ratio(spec: PenaltySpec, Z1, Z2) -> float:
    den = float(np.linalg.norm(np.asarray(Z1) - np.asarray(Z2)))
    if den == 0.0:
        return 0.0
    d = spectral_threshold_dense(Z1, spec).to_dense() - spectral_threshold_dense(Z2, spec).to_dense()
    return float(np.linalg.norm(d)) / den


# -- three-file factor container ------------------------------------------------

_HEADER = "header.txt"
_FILES = ("U.bin", "sigma.bin", "V.bin")


def save_factor(factor: LowRankFactor, directory) -> Path:
    """Write ``header.txt`` plus raw float64 ``U.bin``, ``sigma.bin``, ``V.bin``.

    Matrices are stored row-major in little-endian order.
    """
    path = Path(directory)
    path.mkdir(parents=True, exist_ok=True)
    m, n = factor.shape
    header = f"ncimpute-factor v1\nm {m}\nn {n}\nrank {factor.rank}\ndtype float64\nendian little\norder C\n"
    (path / _HEADER).write_text(header)
    for name, arr in zip(_FILES, (factor.left, factor.singvals, factor.right)):
        (path / name).write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_factor(directory) -> LowRankFactor:
    path = Path(directory)
    meta = {}
    for line in (path / _HEADER).read_text().splitlines()[1:]:
        key, _, value = line.partition(" ")
        meta[key] = value.strip()
    m, n, r = int(meta["m"]), int(meta["n"]), int(meta["rank"])
    dtype = "<f8" if meta.get("endian", "little") == "little" else ">f8"
    arrays = []
    for name, shape in zip(_FILES, ((m, r), (r,), (n, r))):
        raw = np.frombuffer((path / name).read_bytes(), dtype=dtype)
        if raw.size != math.prod(shape):
            raise ValueError(f"{name}: expected {math.prod(shape)} values, found {raw.size}")
        arrays.append(raw.reshape(shape).astype(float))
    return LowRankFactor(*arrays)


__all__ = [
    "LowRankFactor",
    "LipschitzReport",
    "diff_frobenius_sq",
    "lipschitz_check",
    "lipschitz_ratio",
    "load_factor",
    "save_factor",
    "spectral_objective",
    "spectral_threshold_dense",
    "threshold_svd",
]
