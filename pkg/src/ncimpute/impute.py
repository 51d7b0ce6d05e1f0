"""NC-Impute: majorization-minimization for spectrally penalized completion.

Each step replaces the missing entries by the current fit and applies the
(ell-augmented) spectral threshold,

    X_{k+1} = S^ell( P_Omega(Y - X_k) / (ell + 1) + X_k ),

and a surface of solutions over a (lambda, gamma) grid is traced with warm
starts from the neighbouring cells.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .lowrank import SparsePlusLowRank, SparseTriplets, block_power_svd, subspace_distance
from .penalty import PenaltySpec, make_penalty, penalty_derivative, penalty_value
from .spectral import DENSE_SVD_MAX_DIM, LowRankFactor, diff_frobenius_sq, threshold_svd

logger = logging.getLogger(__name__)

SURFACE_COLUMNS = (
    "lambda",
    "gamma",
    "rank",
    "objective",
    "train_err",
    "test_err",
    "outer_iters",
    "delta_final",
    "stationarity_residual",
    "wall_time_s",
)


@dataclass(frozen=True)
class FitConfig:
    ell: float = 0.0
    epsilon: float = 1e-3
    max_outer_iters: int = 500
    operating_rank_cap: int = 50
    rank_buffer: int = 5
    svd_tol: float = 1e-5
    svd_max_iters: int = 100
    # "dense" factorizes the (small) iterate exactly; "power" uses the
    # warm-started block power SVD; "auto" picks dense up to DENSE_SVD_MAX_DIM.
    svd_method: str = "auto"
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.ell < 0:
            raise ValueError("ell must be >= 0")
        if self.max_outer_iters < 1 or self.operating_rank_cap < 1 or self.rank_buffer < 1:
            raise ValueError("iteration and rank caps must be positive")
        if self.svd_method not in ("auto", "dense", "power"):
            raise ValueError(f"unknown svd_method {self.svd_method!r}")

    def uses_dense(self, shape: tuple[int, int]) -> bool:
        if self.svd_method == "auto":
            return min(shape) <= DENSE_SVD_MAX_DIM
        return self.svd_method == "dense"


def objective(X: LowRankFactor, data: SparseTriplets, spec: PenaltySpec) -> float:
    """f(X) = 1/2 ||P_Omega(X - Y)||_F^2 + sum_i P(sigma_i(X))."""
    if X.shape != data.shape:
        raise ValueError(f"dimension mismatch: X {X.shape} vs data {data.shape}")
    resid = X.entries(data.rows, data.cols) - data.vals
    return 0.5 * float(resid @ resid) + float(np.sum(penalty_value(spec, X.singvals)))


def nu_dagger(spec: PenaltySpec, ell: float) -> float:
    return max(1.0 + spec.phi_p + ell, 0.0)


def progress_measure(
    X_old: LowRankFactor, X_new: LowRankFactor, data: SparseTriplets, spec: PenaltySpec, ell: float
) -> float:
    """Delta_ell = (nu+ + ell)/2 ||D||^2 + 1/2 ||P_Omega^perp(D)||^2 with D = X_new - X_old."""
    full = diff_frobenius_sq(X_new, X_old)
    on_omega = X_new.entries(data.rows, data.cols) - X_old.entries(data.rows, data.cols)
    return _progress(full, on_omega, spec, ell)


def _progress(full: float, on_omega: np.ndarray, spec: PenaltySpec, ell: float) -> float:
    off_omega = max(full - float(on_omega @ on_omega), 0.0)
    return 0.5 * (nu_dagger(spec, ell) + ell) * full + 0.5 * off_omega


@dataclass(frozen=True)
class StepResult:
    factor: LowRankFactor
    delta: float
    rank_cap_hit: bool
    operating_rank: int
    svd_converged: bool = True
    svd_iters: int = 0
    basis: np.ndarray | None = field(default=None, repr=False)
    # ||X_{k+1} - X_k||_F^2 and X_{k+1} on Omega, reused by the caller
    change_sq: float = 0.0
    fitted: np.ndarray | None = field(default=None, repr=False)


def ncimpute_step(
    X_k: LowRankFactor,
    data: SparseTriplets,
    spec: PenaltySpec,
    cfg: FitConfig,
    operating_rank: int,
    warm: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    fitted: np.ndarray | None = None,
) -> StepResult:
    """One majorization-minimization update and its progress measure.

    ``fitted`` may pass X_k's values on Omega when the caller already has them.
    """
    if X_k.shape != data.shape:
        raise ValueError(f"dimension mismatch: X {X_k.shape} vs data {data.shape}")
    m, n = data.shape
    r = max(1, min(operating_rank, m, n))
    old_fit = X_k.entries(data.rows, data.cols) if fitted is None else fitted
    resid = data.vals - old_fit
    op = SparsePlusLowRank(data.with_values(resid), X_k, scale=1.0 / (1.0 + cfg.ell))

    if cfg.uses_dense(data.shape):
        U, s, Vt = np.linalg.svd(op.to_dense(), full_matrices=False)
        U, s, V = U[:, :r], s[:r], Vt[:r].T
        converged, iters = True, 0
    else:
        start = warm if warm is not None else X_k.left
        out = block_power_svd(
            op, r, warm=(start[:, :r], None), tol=cfg.svd_tol, max_iters=cfg.svd_max_iters, seed=rng,
            n_check=max(X_k.rank, 1),
        )
        U, s, V = out.factor.left, out.factor.singvals, out.factor.right
        converged, iters = out.converged, out.n_iter

    new = threshold_svd(U, s, V, spec, cfg.ell)
    cap_hit = new.rank >= r and r < min(m, n)
    new_fit = new.entries(data.rows, data.cols)
    change = diff_frobenius_sq(new, X_k)
    delta = _progress(change, new_fit - old_fit, spec, cfg.ell)
    return StepResult(new, delta, cap_hit, r, converged, iters, U, change, new_fit)


def stationarity_residual(
    X: LowRankFactor, data: SparseTriplets, spec: PenaltySpec, form: str = "tangent"
) -> float:
    """First-order residual of f at X, normalized by 1 + ||P_Omega(Y)||_F.

    With G = P_Omega(X - Y) and grad = diag(P'(sigma)):

    * ``form="full"``: ||G + U grad V'||_F.  This is nonzero at a stationary
      point whenever G has a component outside the row/column spaces of X,
      which is the usual case for a rank-deficient fit.
    * ``form="tangent"`` (default): ||P_T(G) + U grad V'||_F where P_T projects
      onto matrices of the form U A' + B V'.  Vanishes at stationary points.
    """
    scale = 1.0 + math.sqrt(data.frobenius_sq())
    g = X.entries(data.rows, data.cols) - data.vals
    if form == "full":
        if X.rank == 0:
            return math.sqrt(float(g @ g)) / scale
        grad = penalty_derivative(spec, X.singvals)
        # ||G||^2 + 2<G, U grad V'> + ||grad||^2
        cross = float(g @ LowRankFactor(X.left, grad, X.right).entries(data.rows, data.cols))
        total = float(g @ g) + 2.0 * cross + float(np.sum(grad**2))
        return math.sqrt(max(total, 0.0)) / scale
    if form != "tangent":
        raise ValueError(f"unknown residual form {form!r}")
    if X.rank == 0:
        return 0.0
    G = data.with_values(g).to_csr()
    U, V = X.left, X.right
    UtG = np.asarray((G.T @ U).T)
    GV = np.asarray(G @ V)
    core = UtG @ V
    A = core + np.diag(penalty_derivative(spec, X.singvals))
    B = UtG - core @ V.T
    C = GV - U @ core
    total = np.sum(A**2) + np.sum(B**2) + np.sum(C**2)
    return float(math.sqrt(total)) / scale


@dataclass(frozen=True)
class FitResult:
    factor: LowRankFactor
    spec: PenaltySpec
    objective: float
    objective_trace: list[float]
    delta_trace: list[float]
    rank_trace: list[int]
    outer_iters: int
    converged: bool
    rank_stabilized_at: int | None
    stationarity_residual: float
    wall_time: float

    @property
    def rank(self) -> int:
        return self.factor.rank

    @property
    def lam(self) -> float:
        return self.spec.lam

    @property
    def gamma(self) -> float:
        return math.inf if self.spec.family == "l1" else self.spec.gamma


def _stabilized_at(ranks: list[int]) -> int | None:
    if not ranks:
        return None
    k = len(ranks) - 1
    while k > 0 and ranks[k - 1] == ranks[-1]:
        k -= 1
    return k


def fit_single(
    data: SparseTriplets,
    spec: PenaltySpec,
    cfg: FitConfig = FitConfig(),
    init: LowRankFactor | None = None,
) -> FitResult:
    """Iterate ncimpute_step until ||X_new - X_old||^2 < eps ||X_old||^2."""
    t0 = time.perf_counter()
    m, n = data.shape
    X = LowRankFactor.zeros(m, n) if init is None else init
    if X.shape != data.shape:
        raise ValueError(f"init has shape {X.shape}, data has {data.shape}")
    rng = np.random.default_rng(cfg.seed)
    cap = min(cfg.operating_rank_cap, m, n)
    dense = cfg.uses_dense(data.shape)

    trace = [objective(X, data, spec)]
    fit = X.entries(data.rows, data.cols)
    deltas: list[float] = []
    ranks = [X.rank]
    warm = None
    converged = False
    k = 0
    for k in range(1, cfg.max_outer_iters + 1):
        op_rank = cap if dense else min(X.rank + cfg.rank_buffer, cap)
        while True:
            step = ncimpute_step(X, data, spec, cfg, op_rank, warm=warm, rng=rng, fitted=fit)
            if not step.rank_cap_hit or op_rank >= cap:
                break
            op_rank = min(cap, max(op_rank + cfg.rank_buffer, 2 * op_rank))
            warm = step.basis
        if step.rank_cap_hit:
            logger.debug("operating rank cap %d hit at lambda=%g", cap, spec.lam)
        new = step.factor
        change = step.change_sq
        old_norm = X.frobenius_sq()
        if logger.isEnabledFor(logging.DEBUG) and new.rank and X.rank:
            p = min(new.rank, X.rank)
            logger.debug("iter %d rank %d rho_%d=%.3e", k, new.rank, p, subspace_distance(X, new, p).rho)
        X, fit = new, step.fitted
        warm = step.basis
        r_omega = fit - data.vals
        trace.append(0.5 * float(r_omega @ r_omega) + float(np.sum(penalty_value(spec, X.singvals))))
        deltas.append(step.delta)
        ranks.append(X.rank)
        done = change < cfg.epsilon * old_norm if old_norm > 0 else X.frobenius_sq() < cfg.epsilon
        if done:
            converged = True
            break

    return FitResult(
        factor=X,
        spec=spec,
        objective=trace[-1],
        objective_trace=trace,
        delta_trace=deltas,
        rank_trace=ranks,
        outer_iters=k,
        converged=converged,
        rank_stabilized_at=_stabilized_at(ranks),
        stationarity_residual=stationarity_residual(X, data, spec),
        wall_time=time.perf_counter() - t0,
    )


# -- two-dimensional solution surface -----------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """lambdas strictly decreasing; gammas strictly decreasing from gammas[0] = inf."""

    lambdas: tuple[float, ...]
    gammas: tuple[float, ...]
    family: str = "mcp"

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lambdas)
        gam = tuple(float(x) for x in self.gammas)
        if not lam or not gam:
            raise ValueError("grid needs at least one lambda and one gamma")
        if any(x <= 0 for x in lam) or any(a <= b for a, b in zip(lam, lam[1:])):
            raise ValueError("lambdas must be positive and strictly decreasing")
        if gam[0] != math.inf:
            raise ValueError("gammas[0] must be +inf (the convex, soft-thresholding member)")
        if any(a <= b for a, b in zip(gam, gam[1:])):
            raise ValueError("gammas must be strictly decreasing")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "gammas", gam)
        for g in gam[1:]:
            make_penalty(self.family, lam[0], g)

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.lambdas), len(self.gammas)

    def spec(self, i: int, j: int) -> PenaltySpec:
        return make_penalty(self.family, self.lambdas[i], self.gammas[j])


def default_grid(
    lambda_max: float,
    n_lambda: int = 100,
    lambda_min_ratio: float = 1e-3,
    gammas=None,
    n_gamma: int = 25,
    gamma_max: float = 5000.0,
    gamma_min: float = 1.1,
    family: str = "mcp",
) -> GridSpec:
    """Linear lambda grid from lambda_max down to ratio*lambda_max; log-spaced gammas.

    The soft-thresholding row (gamma = inf) is always prepended.
    """
    lambdas = np.linspace(lambda_max, lambda_max * lambda_min_ratio, n_lambda)
    if gammas is None:
        gammas = np.geomspace(gamma_max, gamma_min, n_gamma)
    gammas = sorted({float(g) for g in gammas if math.isfinite(g)}, reverse=True)
    return GridSpec(tuple(lambdas), (math.inf, *gammas), family)


@dataclass(frozen=True)
class SurfaceCell:
    result: FitResult | None
    source: str
    train_err: float = math.nan
    test_err: float = math.nan
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.result is None


@dataclass
class SolutionSurface:
    grid: GridSpec
    cells: list[list[SurfaceCell]]
    metric: str = "standardized"

    def cell(self, i: int, j: int) -> SurfaceCell:
        return self.cells[i][j]

    @property
    def failed_cells(self) -> list[tuple[int, int]]:
        N, M = self.grid.shape
        return [(i, j) for j in range(M) for i in range(N) if self.cells[i][j].failed]

    def rows(self, timing: bool = True) -> list[dict]:
        out = []
        N, M = self.grid.shape
        for j in range(M):
            for i in range(N):
                c = self.cells[i][j]
                r = c.result
                out.append(
                    {
                        "lambda": self.grid.lambdas[i],
                        "gamma": self.grid.gammas[j],
                        "rank": r.rank if r else -1,
                        "objective": r.objective if r else math.nan,
                        "train_err": c.train_err,
                        "test_err": c.test_err,
                        "outer_iters": r.outer_iters if r else 0,
                        "delta_final": r.delta_trace[-1] if r and r.delta_trace else math.nan,
                        "stationarity_residual": r.stationarity_residual if r else math.nan,
                        "wall_time_s": (r.wall_time if timing else 0.0) if r else 0.0,
                    }
                )
        return out

    def write_csv(self, path, timing: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SURFACE_COLUMNS)
            w.writeheader()
            for row in self.rows(timing):
                w.writerow({k: _fmt(v) for k, v in row.items()})

    def best(self, gammas=None) -> tuple[int, int]:
        """(i, j) of the smallest test error, optionally among the given gammas."""
        N, M = self.grid.shape
        cols = [j for j in range(M) if gammas is None or self.grid.gammas[j] in set(gammas)]
        best, arg = math.inf, None
        for j in cols:
            for i in range(N):
                e = self.cells[i][j].test_err
                if not math.isnan(e) and e < best:
                    best, arg = e, (i, j)
        if arg is None:
            raise ValueError("no cell has a test error")
        return arg


def _fmt(v):
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return v


def error_metrics(X: LowRankFactor, data: SparseTriplets, holdout: SparseTriplets | None, metric: str):
    """(train, test) errors: standardized squared-error ratios or RMSE.

    Undefined values (empty sets, zero denominators) are nan.
    """
    if metric not in ("standardized", "rmse"):
        raise ValueError(f"unknown metric {metric!r}")

    def one(d: SparseTriplets) -> float:
        if d is None or d.nnz == 0:
            return math.nan
        r = d.vals - X.entries(d.rows, d.cols)
        if metric == "rmse":
            return math.sqrt(float(r @ r) / d.nnz)
        den = float(d.vals @ d.vals)
        return float(r @ r) / den if den > 0 else math.nan

    return one(data), one(holdout)


def fit_surface(
    data: SparseTriplets,
    grid: GridSpec,
    cfg: FitConfig = FitConfig(),
    holdout: SparseTriplets | None = None,
    metric: str = "standardized",
) -> SolutionSurface:
    """Warm-started fits on every (lambda_i, gamma_j) cell.

    The gamma = inf row is a plain lambda path started from zero.  Every other
    cell is fitted twice, from (lambda_{i-1}, gamma_j) and from
    (lambda_i, gamma_{j-1}), keeping the fit with the smaller objective.
    For the standardized metric the holdout values should be the noiseless
    truth on the unobserved entries.
    """
    if holdout is not None and holdout.shape != data.shape:
        raise ValueError("holdout shape differs from data shape")
    N, M = grid.shape
    m, n = data.shape
    cells: list[list[SurfaceCell | None]] = [[None] * M for _ in range(N)]

    def record(i, j, result, source, error=None):
        if result is None:
            cells[i][j] = SurfaceCell(None, source, error=error)
            return
        train, test = error_metrics(result.factor, data, holdout, metric)
        cells[i][j] = SurfaceCell(result, source, train, test)

    for j in range(M):
        for i in range(N):
            spec = grid.spec(i, j)
            starts = []
            if j == 0:
                prev = cells[i - 1][0] if i > 0 else None
                starts.append(("lambda", prev.result.factor if prev and prev.result else None))
            else:
                left = cells[i][j - 1]
                if left.result is not None:
                    starts.append(("gamma", left.result.factor))
                up = cells[i - 1][j] if i > 0 else None
                if up is not None and up.result is not None:
                    if not starts or not _same_factor(starts[0][1], up.result.factor):
                        starts.append(("lambda", up.result.factor))
                if not starts:
                    starts.append(("zero", None))
            best, source, err = None, starts[0][0], None
            for name, init in starts:
                try:
                    res = fit_single(data, spec, cfg, init if init is not None else LowRankFactor.zeros(m, n))
                except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
                    logger.warning("cell (%d, %d) from %s failed: %s", i, j, name, exc)
                    err = str(exc)
                    continue
                if best is None or res.objective < best.objective:
                    best, source = res, name
            record(i, j, best, source, None if best else err)
            if best is not None:
                logger.info(
                    "lambda=%.4g gamma=%g rank=%d obj=%.6g iters=%d (%s)",
                    spec.lam, grid.gammas[j], best.rank, best.objective, best.outer_iters, source,
                )
    return SolutionSurface(grid, cells, metric)


def _same_factor(a: LowRankFactor, b: LowRankFactor) -> bool:
    if a is b:
        return True
    if a.rank != b.rank:
        return False
    return a.rank == 0 or (
        np.array_equal(a.singvals, b.singvals) and np.array_equal(a.left, b.left) and np.array_equal(a.right, b.right)
    )
