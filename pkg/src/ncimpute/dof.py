"""Degrees of freedom of spectral thresholding under the null model Z ~ N(0, 1).

df(S) = sum_ij E[dS(Z)_ij / dZ_ij].  For a continuous spectral threshold s
this has the closed form (m >= n, singular values sigma_i distinct)

    sum_i [ s'(sigma_i) + (m - n) s(sigma_i)/sigma_i ]
      + 2 sum_{i<j} (sigma_i s(sigma_i) - sigma_j s(sigma_j)) / (sigma_i^2 - sigma_j^2),

which is averaged over Monte Carlo draws of Z, or over draws from the
Marchenko-Pastur law when the matrix is large.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from .penalty import PenaltySpec, make_penalty, scalar_threshold

TIE_TOL = 1e-10
TIE_JITTER = 1e-9
FD_REL_STEP = 1e-6


@dataclass(frozen=True)
class DofEstimate:
    value: float
    std_error: float
    method: str
    m: int
    n: int
    spec: PenaltySpec
    reps: int = 0

    def __str__(self) -> str:
        return f"{self.value:.6g} +/- {self.std_error:.2g} ({self.method}, {self.m}x{self.n}, {self.spec.to_token()})"


def _check_precondition(spec: PenaltySpec, ell: float) -> None:
    # the ell-scaled threshold has concavity phi_p / (ell + 1)
    if not 1.0 + spec.phi_p / (1.0 + ell) > 0:
        raise ValueError(
            f"{spec.to_token()}: 1 + phi_p = {1.0 + spec.phi_p:g} <= 0, the threshold is discontinuous "
            "and the divergence formula does not apply"
        )


def threshold_derivative(spec: PenaltySpec, sigma, ell: float = 0.0) -> np.ndarray:
    """s'(sigma): closed form for l1 and MC+, central differences otherwise."""
    s = np.asarray(sigma, dtype=float)
    c = 1.0 / (1.0 + ell)
    lam = spec.lam * c
    if lam == 0:
        return np.ones_like(s)
    if spec.family == "l1":
        return (s > lam).astype(float)
    if spec.family == "mcp":
        g = spec.gamma / c
        return np.where(s <= lam, 0.0, np.where(s <= lam * g, g / (g - 1.0), 1.0))
    h = FD_REL_STEP * s
    up = np.asarray(scalar_threshold(spec, s + h, ell))
    down = np.asarray(scalar_threshold(spec, s - h, ell))
    return (up - down) / (2.0 * h)


def _integrand_batch(sv: np.ndarray, m: int, n: int, spec: PenaltySpec, ell: float) -> np.ndarray:
    """Divergence formula for each row of ``sv`` (descending singular values)."""
    big, small = max(m, n), min(m, n)
    s = np.asarray(scalar_threshold(spec, sv, ell), dtype=float).reshape(sv.shape)
    ds = threshold_derivative(spec, sv, ell).reshape(sv.shape)
    diag = ds.sum(axis=1) + (big - small) * (s / sv).sum(axis=1)
    prod = sv * s
    sq = sv * sv
    iu, ju = np.triu_indices(small, k=1)
    pair = (prod[:, iu] - prod[:, ju]) / (sq[:, iu] - sq[:, ju])
    return diag + 2.0 * pair.sum(axis=1)


def _has_ties(sv: np.ndarray) -> bool:
    return sv.shape[-1] > 1 and bool(np.any(np.abs(np.diff(sv, axis=-1)) <= TIE_TOL))


def df_integrand(singvals, m: int, n: int, spec: PenaltySpec, ell: float = 0.0) -> float:
    """The divergence of the spectral threshold at one realization with these singular values."""
    _check_precondition(spec, ell)
    sv = np.sort(np.asarray(singvals, dtype=float))[::-1]
    if sv.ndim != 1 or sv.size != min(m, n):
        raise ValueError(f"expected {min(m, n)} singular values, got shape {sv.shape}")
    if np.any(sv <= 0):
        raise ValueError("singular values must be positive")
    if _has_ties(sv):
        raise ValueError(f"singular values tied within {TIE_TOL}; perturb them before calling")
    return float(_integrand_batch(sv[None, :], m, n, spec, ell)[0])


def _resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("NCIMPUTE_THREADS", "1") or 1)
    return max(1, int(workers))


def null_singvals(m: int, n: int, reps: int, seed=0, workers: int | None = None) -> np.ndarray:
    """(reps, min(m, n)) descending singular values of independent N(0,1) matrices.

    Replication k always uses the k-th child of SeedSequence(seed), so the
    result does not depend on ``workers`` or scheduling.  Tied values (a
    probability-zero event) get a uniform jitter of size TIE_JITTER.
    """
    children = np.random.SeedSequence(seed).spawn(reps)

    def run(idx):
        out = np.empty((len(idx), min(m, n)))
        for row, k in enumerate(idx):
            rng = np.random.default_rng(children[k])
            sv = np.linalg.svd(rng.standard_normal((m, n)), compute_uv=False)
            if _has_ties(sv):
                sv = np.sort(sv + rng.uniform(0.0, TIE_JITTER, size=sv.size))[::-1]
            out[row] = sv
        return out

    workers = _resolve_workers(workers)
    if workers == 1 or reps < 2 * workers:
        return run(range(reps))
    with ThreadPoolExecutor(workers) as pool:
        return np.vstack(list(pool.map(run, np.array_split(np.arange(reps), workers))))


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), 0.0
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(values.size))


def df_montecarlo(
    m: int, n: int, spec: PenaltySpec, reps: int = 1000, seed=0, ell: float = 0.0, workers: int | None = None
) -> DofEstimate:
    """Average of the divergence formula over ``reps`` null draws."""
    _check_precondition(spec, ell)
    if reps < 1:
        raise ValueError("reps must be positive")
    sv = null_singvals(m, n, reps, seed, workers)
    value, se = _mean_se(_integrand_batch(sv, m, n, spec, ell))
    return DofEstimate(value, se, "exact-mc", m, n, spec, reps)


def _perturbed_svds(Z: np.ndarray, step: float):
    """SVDs of Z + step*E_ij and Z - step*E_ij for every coordinate (i, j)."""
    m, n = Z.shape
    k = m * n
    eye = np.zeros((k, m, n))
    eye.reshape(k, k)[np.arange(k), np.arange(k)] = step
    return np.linalg.svd(Z[None] + eye, full_matrices=False), np.linalg.svd(Z[None] - eye, full_matrices=False)


def _diag_of_threshold(svd, spec: PenaltySpec, ell: float) -> np.ndarray:
    """Entry (i, j) of S(Z +- step*E_ij), for the batch built by _perturbed_svds."""
    U, s, Vt = svd
    k = s.shape[0]
    n = Vt.shape[-1]
    st = np.asarray(scalar_threshold(spec, s, ell), dtype=float).reshape(s.shape)
    rows, cols = np.divmod(np.arange(k), n)
    return np.einsum("kr,kr,kr->k", U[np.arange(k), rows, :], st, Vt[np.arange(k), :, cols])


def divergence_fd(Z: np.ndarray, spec: PenaltySpec, ell: float = 0.0, step: float = 1e-5) -> float:
    """sum_ij dS(Z)_ij/dZ_ij by central differences, one coordinate at a time."""
    plus, minus = _perturbed_svds(np.asarray(Z, dtype=float), step)
    diff = _diag_of_threshold(plus, spec, ell) - _diag_of_threshold(minus, spec, ell)
    return float(np.sum(diff) / (2.0 * step))


def df_divergence_fd(
    m: int, n: int, spec: PenaltySpec, reps: int = 200, seed=0, ell: float = 0.0, step: float = 1e-5
) -> DofEstimate:
    """Finite-difference divergence averaged over null draws.

    Uses the same per-replication draws as :func:`df_montecarlo` with the same
    seed, so the two estimates differ only by the formula, not by sampling.
    """
    return df_divergence_fd_many(m, n, [spec], reps, seed, ell, step)[0]


def df_divergence_fd_many(
    m: int, n: int, specs, reps: int = 200, seed=0, ell: float = 0.0, step: float = 1e-5
) -> list[DofEstimate]:
    """:func:`df_divergence_fd` for several penalties, sharing the perturbed SVDs."""
    specs = list(specs)
    children = np.random.SeedSequence(seed).spawn(reps)
    vals = np.empty((len(specs), reps))
    for k, child in enumerate(children):
        Z = np.random.default_rng(child).standard_normal((m, n))
        plus, minus = _perturbed_svds(Z, step)
        for q, spec in enumerate(specs):
            diff = _diag_of_threshold(plus, spec, ell) - _diag_of_threshold(minus, spec, ell)
            vals[q, k] = np.sum(diff) / (2.0 * step)
    out = []
    for q, spec in enumerate(specs):
        value, se = _mean_se(vals[q])
        out.append(DofEstimate(value, se, "divergence-fd", m, n, spec, reps))
    return out


# -- Marchenko-Pastur ------------------------------------------------------------------


class MPDistribution:
    """Marchenko-Pastur law with ratio alpha = n/m in (0, 1] and unit variance.

    Sampling inverts a CDF table built in the angle variable
    x = a_- cos^2(t/2) + a_+ sin^2(t/2), in which the density is smooth even
    at the hard edge x = 0 of the square case.
    """

    TABLE_SIZE = 10_000

    def __init__(self, alpha: float):
        alpha = float(alpha)
        if not 0 < alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        self.alpha = alpha
        self.lower = (1.0 - math.sqrt(alpha)) ** 2
        self.upper = (1.0 + math.sqrt(alpha)) ** 2
        self._theta, self._cdf = _mp_table(alpha, self.TABLE_SIZE)

    @property
    def support(self) -> tuple[float, float]:
        return self.lower, self.upper

    def density(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > self.lower) & (x < self.upper) & (x > 0)
        xs = np.where(inside, x, 1.0)
        val = np.sqrt(np.maximum((self.upper - xs) * (xs - self.lower), 0.0)) / (2 * math.pi * self.alpha * xs)
        out = np.where(inside, val, 0.0)
        return float(out) if out.ndim == 0 else out

    def _x_of_theta(self, theta):
        return self.lower * np.cos(theta / 2) ** 2 + self.upper * np.sin(theta / 2) ** 2

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        c = np.clip((2 * x - self.lower - self.upper) / (self.upper - self.lower), -1.0, 1.0)
        theta = np.arccos(-c)
        out = np.interp(theta, self._theta, self._cdf)
        return float(out) if out.ndim == 0 else out

    def sample(self, size, rng: np.random.Generator | int | None = None) -> np.ndarray:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = rng.uniform(size=size)
        return self._x_of_theta(np.interp(u, self._cdf, self._theta))


def _mp_theta_integrand(theta: float, alpha: float) -> float:
    lo, hi = (1 - math.sqrt(alpha)) ** 2, (1 + math.sqrt(alpha)) ** 2
    c2, s2 = math.cos(theta / 2) ** 2, math.sin(theta / 2) ** 2
    if lo == 0.0:
        # square case: (hi - lo)^2 sin^2(t) / (8 pi x) with x = hi sin^2(t/2)
        return hi * c2 / (2 * math.pi)
    x = lo * c2 + hi * s2
    return (hi - lo) ** 2 * math.sin(theta) ** 2 / (8 * math.pi * alpha * x)


@lru_cache(maxsize=32)
def _mp_table(alpha: float, size: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.linspace(0.0, math.pi, size + 1)
    pieces = [quad(_mp_theta_integrand, a, b, args=(alpha,), epsabs=1e-14)[0] for a, b in zip(theta[:-1], theta[1:])]
    cdf = np.concatenate([[0.0], np.cumsum(pieces)])
    total = cdf[-1]
    cdf /= total
    theta.setflags(write=False)
    cdf.setflags(write=False)
    return theta, cdf


def mp_density(dist: MPDistribution, x):
    return dist.density(x)


def mp_sample(dist: MPDistribution, size, rng=None) -> np.ndarray:
    return dist.sample(size, rng)


def _g_ratio(t: np.ndarray, zeta: float, gamma: float) -> np.ndarray:
    """s(sigma)/sigma for the MC+ threshold in the scaled variable t = sigma^2/m."""
    r = np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        shrink = 1.0 - zeta / r
    if math.isinf(gamma):
        return np.where(r <= zeta, 0.0, shrink)
    mid = gamma / (gamma - 1.0) * shrink
    return np.where(r <= zeta, 0.0, np.where(r <= zeta * gamma, mid, 1.0))


def _asymptotic_from_draws(t1: np.ndarray, t2: np.ndarray, zeta: float, gamma: float, alpha: float):
    g1, g2 = _g_ratio(t1, zeta, gamma), _g_ratio(t2, zeta, gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        pair = (t1 * g1 - t2 * g2) / (t1 - t2)
    pair = np.where(t1 == t2, 0.0, pair)
    vals = (1.0 - alpha) * g1 + alpha * pair
    return _mean_se(vals)


def _check_gamma(gamma: float) -> None:
    if not gamma > 1:
        raise ValueError(f"asymptotic df needs gamma > 1, got {gamma}")


def df_asymptotic(zeta: float, gamma: float, alpha: float, mc_reps: int = 200_000, seed=0) -> float:
    """Limit of df / (m n) for MC+ with lambda = zeta * sqrt(m) and n/m -> alpha.

    ``zeta = 0`` gives 1 and ``zeta = inf`` gives 0; ``gamma = inf`` is the
    soft threshold.
    """
    _check_gamma(gamma)
    if zeta < 0 or math.isnan(zeta):
        raise ValueError("zeta must be >= 0")
    if zeta == 0:
        return 1.0
    if math.isinf(zeta):
        return 0.0
    value, _ = df_asymptotic_se(zeta, gamma, alpha, mc_reps, seed)
    return value


def df_asymptotic_se(zeta: float, gamma: float, alpha: float, mc_reps: int = 200_000, seed=0):
    """(value, Monte Carlo standard error) of the asymptotic df/(mn)."""
    _check_gamma(gamma)
    dist = MPDistribution(alpha)
    rng = np.random.default_rng(seed)
    t1, t2 = dist.sample(mc_reps, rng), dist.sample(mc_reps, rng)
    value, se = _asymptotic_from_draws(t1, t2, zeta, gamma, alpha)
    return min(max(value, 0.0), 1.0), se


# -- calibration ---------------------------------------------------------------------

CALIBRATION_COLUMNS = ("lambda_tilde", "gamma", "lambda_calibrated", "df_target", "df_achieved", "stderr")


@dataclass(frozen=True)
class CalibrationTable:
    lambda_tilde: np.ndarray
    gammas: np.ndarray
    lambda_calibrated: np.ndarray  # (N, M); nan where bisection failed
    df_target: np.ndarray  # (N,)
    df_achieved: np.ndarray  # (N, M)
    stderr: np.ndarray  # (N, M)
    method: str

    def rows(self) -> list[dict]:
        out = []
        for i, lt in enumerate(self.lambda_tilde):
            for j, g in enumerate(self.gammas):
                out.append(
                    {
                        "lambda_tilde": float(lt),
                        "gamma": float(g),
                        "lambda_calibrated": float(self.lambda_calibrated[i, j]),
                        "df_target": float(self.df_target[i]),
                        "df_achieved": float(self.df_achieved[i, j]),
                        "stderr": float(self.stderr[i, j]),
                    }
                )
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CALIBRATION_COLUMNS)
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if math.isfinite(v) else str(v) for k, v in row.items()})


class _DfEvaluator:
    """df(lambda, gamma) on a fixed set of draws, so calibration is deterministic."""

    def __init__(self, m, n, family, reps, seed, method, workers):
        self.m, self.n, self.family = m, n, family
        self.method = method
        if method == "mp-asymptotic":
            big, small = max(m, n), min(m, n)
            self.alpha = small / big
            self.scale = math.sqrt(big)
            dist = MPDistribution(self.alpha)
            rng = np.random.default_rng(seed)
            self.t1, self.t2 = dist.sample(reps, rng), dist.sample(reps, rng)
            # E sigma_1 ~ sqrt(m) * (1 + sqrt(alpha))
            self.top = self.scale * (1.0 + math.sqrt(self.alpha))
        else:
            self.sv = null_singvals(m, n, reps, seed, workers)
            self.top = float(self.sv[:, 0].mean())

    def __call__(self, lam: float, gamma: float) -> tuple[float, float]:
        if self.method == "mp-asymptotic":
            v, se = _asymptotic_from_draws(self.t1, self.t2, lam / self.scale, gamma, self.alpha)
            mn = self.m * self.n
            return v * mn, se * mn
        spec = make_penalty(self.family, lam, gamma)
        return _mean_se(_integrand_batch(self.sv, self.m, self.n, spec, 0.0))


def _bisect(f, target, lo, hi, f_lo, f_hi, rtol=1e-10, max_iter=200) -> float:
    if not (f_lo >= target >= f_hi):
        return math.nan
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        v = f(mid)
        if v >= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * max(hi, 1e-300):
            break
    return 0.5 * (lo + hi)


def calibrate_grid(
    lambda_tilde,
    gammas,
    m: int,
    n: int,
    family: str = "mcp",
    reps: int = 1000,
    seed=0,
    method: str = "auto",
    workers: int | None = None,
) -> CalibrationTable:
    """Match the df of every (lambda, gamma) to the soft threshold at lambda_tilde.

    For each lambda_tilde the target is df(soft, lambda_tilde); for each gamma
    lambda is found by bisection on [0, 2 E sigma_1], where df is decreasing.
    All evaluations share one set of null draws.  ``method="auto"`` uses the
    Marchenko-Pastur limit when min(m, n) > 500.
    """
    lt = np.asarray(lambda_tilde, dtype=float)
    gs = np.asarray(gammas, dtype=float)
    if np.any(np.diff(lt) >= 0):
        raise ValueError("lambda_tilde must be strictly decreasing")
    if np.any(np.diff(gs) >= 0):
        raise ValueError("gammas must be strictly decreasing")
    if method == "auto":
        method = "mp-asymptotic" if min(m, n) > 500 else "exact-mc"
    if method not in ("exact-mc", "mp-asymptotic"):
        raise ValueError(f"unknown calibration method {method!r}")
    for g in gs:
        if math.isfinite(g):
            _check_precondition(make_penalty(family, 1.0, g), 0.0)

    df = _DfEvaluator(m, n, family, reps, seed, method, workers)
    hi = 2.0 * df.top
    N, M = lt.size, gs.size
    lam_cal = np.full((N, M), math.nan)
    achieved = np.full((N, M), math.nan)
    stderr = np.full((N, M), math.nan)
    target = np.empty(N)
    for i, lam_t in enumerate(lt):
        target[i], se_t = df(lam_t, math.inf)
        for j, g in enumerate(gs):
            if math.isinf(g):
                lam_cal[i, j], achieved[i, j], stderr[i, j] = lam_t, target[i], se_t
                continue
            f_lo, f_hi = df(0.0, g)[0], df(hi, g)[0]
            lam = _bisect(lambda x: df(x, g)[0], target[i], 0.0, hi, f_lo, f_hi)
            if math.isnan(lam):
                continue
            lam_cal[i, j] = lam
            achieved[i, j], stderr[i, j] = df(lam, g)
    return CalibrationTable(lt, gs, lam_cal, target, achieved, stderr, method)


__all__ = [
    "CALIBRATION_COLUMNS",
    "CalibrationTable",
    "DofEstimate",
    "MPDistribution",
    "calibrate_grid",
    "df_asymptotic",
    "df_asymptotic_se",
    "df_divergence_fd",
    "df_divergence_fd_many",
    "df_integrand",
    "df_montecarlo",
    "divergence_fd",
    "mp_density",
    "mp_sample",
    "null_singvals",
    "threshold_derivative",
]
