"""Command-line interface: ``ncimpute <command> [options]``.

Exit status: 0 success, 1 usage error, 2 input/output error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np

from . import data as data_mod
from .dof import calibrate_grid, df_asymptotic_se, df_divergence_fd, df_montecarlo
from .impute import (
    SURFACE_COLUMNS,
    FitConfig,
    GridSpec,
    SolutionSurface,
    default_grid,
    error_metrics,
    fit_single,
    fit_surface,
)
from .lowrank import SparseTriplets, read_triplets
from .penalty import PenaltySpec
from .spectral import save_factor

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
THREADS_ENV = "NCIMPUTE_THREADS"

logger = logging.getLogger("ncimpute")


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Validated options of one invocation."""

    command: str
    seed: int = 0
    threads: int = 1
    options: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["options"][name]
        except KeyError:
            raise AttributeError(name) from None


# -- argument helpers ----------------------------------------------------------------


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _shape(text: str) -> tuple[int, int]:
    try:
        m, n = (int(x) for x in text.lower().replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected M,N, got {text!r}") from None
    return m, n


def _penalty(text: str) -> PenaltySpec:
    try:
        return PenaltySpec.from_token(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--train", required=True, help="observed triplets (CSV row,col,value or .mtx)")
    p.add_argument("--test", help="held-out triplets for the test error")
    p.add_argument("--shape", type=_shape, help="matrix dimensions M,N (default: meta.json next to --train)")
    p.add_argument("--center", action="store_true", help="remove row/column effects before fitting")
    p.add_argument("--metric", choices=("standardized", "rmse"), default=None,
                   help="test error metric (default: rmse with --center, else standardized)")
    p.add_argument("--ell", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--rank-cap", type=int, default=50)
    p.add_argument("--rank-buffer", type=int, default=5)
    p.add_argument("--svd-tol", type=float, default=1e-5)
    p.add_argument("--svd-method", choices=("auto", "dense", "power"), default="auto")
    p.add_argument("--no-timing", action="store_true", help="write 0 for wall times (byte-reproducible output)")
    p.add_argument("--save-factors", metavar="DIR", help="also write fitted factors in the binary container")


def build_parser() -> argparse.ArgumentParser:
    # shared flags are accepted before or after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed for all randomness")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help=f"worker cap (default ${THREADS_ENV} or 1)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    parser = _Parser(prog="ncimpute", description="Matrix completion with nonconvex spectral penalties.",
                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    add = partial(sub.add_parser, parents=[common])

    p = add("simulate", help="generate a synthetic instance")
    p.add_argument("--regime", choices=data_mod.REGIMES, default="rom")
    p.add_argument("--m", type=int, default=800)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--rank", type=int, default=10)
    p.add_argument("--snr", type=float, default=1.0, help="signal-to-noise ratio (inf for noiseless)")
    p.add_argument("--miss", type=float, default=0.9, help="fraction of missing entries")
    p.add_argument("--out", required=True, help="output directory")

    p = add("fit", help="fit one (lambda, gamma) point")
    _add_fit_options(p)
    p.add_argument("--penalty", type=_penalty, required=True, help="family:lambda[:gamma], e.g. mcp:2.5:20")
    p.add_argument("--out", help="one-row results CSV")

    p = add("surface", help="fit the warm-started (lambda, gamma) surface")
    _add_fit_options(p)
    p.add_argument("--family", default="mcp")
    p.add_argument("--n-lambda", type=int, default=100)
    p.add_argument("--lambda-min-ratio", type=float, default=1e-3)
    p.add_argument("--lambda-max", type=float, help="largest lambda (default ||P_Omega(Y)||_2)")
    p.add_argument("--gammas", type=_float_list, help="finite gammas, e.g. 10,2 (overrides the log grid)")
    p.add_argument("--n-gamma", type=int, default=25)
    p.add_argument("--gamma-max", type=float, default=5000.0)
    p.add_argument("--gamma-min", type=float, default=1.1)
    p.add_argument("--out", required=True, help="per-cell results CSV")

    p = add("dof", help="degrees of freedom of a spectral threshold")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--penalty", type=_penalty, required=True)
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--ell", type=float, default=0.0)
    p.add_argument("--method", choices=("exact-mc", "divergence-fd", "mp-asymptotic"), default="exact-mc")

    p = add("calibrate", help="df-matched (lambda, gamma) lattice")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--lambdas", type=_float_list, help="decreasing soft-threshold levels")
    p.add_argument("--n-lambda", type=int, default=10)
    p.add_argument("--lambda-max", type=float, help="default sqrt(m) + sqrt(n), the edge of the null spectrum")
    p.add_argument("--lambda-min-ratio", type=float, default=0.05)
    p.add_argument("--gammas", type=_float_list, default=[30.0, 10.0, 5.0, 2.0])
    p.add_argument("--family", default="mcp")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--method", choices=("auto", "exact-mc", "mp-asymptotic"), default="auto")
    p.add_argument("--out", required=True)

    p = add("convert", help="convert ratings or triplet files")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--format", choices=("ml100k", "ml1m", "csv", "mtx"), required=True)
    p.add_argument("--out", required=True, help="output triplets (.mtx for MatrixMarket, else CSV)")
    p.add_argument("--test-frac", type=float, default=0.0, help="hold out this fraction into --test-out")
    p.add_argument("--test-out")
    p.add_argument("--shape", type=_shape)
    return parser


def parse_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    seed = getattr(args, "seed", 0)
    threads = getattr(args, "threads", None)
    args.verbose = getattr(args, "verbose", 0)
    if threads is None:
        env = os.environ.get(THREADS_ENV, "1")
        try:
            threads = int(env)
        except ValueError:
            raise UsageError(f"${THREADS_ENV}={env!r} is not an integer") from None
    if threads < 1:
        raise UsageError("--threads must be >= 1")
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "seed", "threads")}
    cfg = RunConfig(args.command, seed, threads, opts)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    o = cfg.options
    if cfg.command in ("fit", "surface"):
        if o["epsilon"] <= 0:
            raise UsageError("--epsilon must be positive")
        if min(o["max_iters"], o["rank_cap"], o["rank_buffer"]) < 1:
            raise UsageError("--max-iters, --rank-cap and --rank-buffer must be positive")
        if o["ell"] < 0:
            raise UsageError("--ell must be >= 0")
    if cfg.command == "surface":
        if o["n_lambda"] < 1 or not 0 < o["lambda_min_ratio"] <= 1:
            raise UsageError("--n-lambda must be >= 1 and --lambda-min-ratio in (0, 1]")
        if o["gammas"] is None and o["n_gamma"] < 0:
            raise UsageError("--n-gamma must be >= 0")
    if cfg.command == "simulate":
        if not 0 < o["miss"] < 1:
            raise UsageError("--miss must lie in (0, 1)")
        if o["snr"] <= 0:
            raise UsageError("--snr must be positive")
    if cfg.command in ("dof", "calibrate"):
        if min(o["m"], o["n"], o["reps"]) < 1:
            raise UsageError("--m, --n and --reps must be positive")
    if cfg.command == "dof":
        if o["ell"] < 0:
            raise UsageError("--ell must be >= 0")
        spec = o["penalty"]
        if o["method"] == "mp-asymptotic":
            if spec.family not in ("mcp", "l1"):
                raise UsageError("--method mp-asymptotic supports mcp and l1 penalties only")
            if spec.family == "mcp" and spec.gamma <= 1:
                raise UsageError("--method mp-asymptotic needs gamma > 1")
        elif not 1.0 + spec.phi_p / (1.0 + o["ell"]) > 0:
            raise UsageError(f"{spec.to_token()}: 1 + phi_p/(ell+1) <= 0, the df formula does not apply")
    if cfg.command == "convert":
        if not 0 <= o["test_frac"] < 1:
            raise UsageError("--test-frac must lie in [0, 1)")
        if o["test_frac"] > 0 and not o["test_out"]:
            raise UsageError("--test-frac needs --test-out")


# -- I/O -----------------------------------------------------------------------------


def _read(path, shape=None) -> SparseTriplets:
    try:
        return read_triplets(path, shape)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from None


def _infer_shape(train_path: str, given):
    if given is not None:
        return given
    meta = Path(train_path).with_name("meta.json")
    if meta.exists():
        try:
            info = json.loads(meta.read_text())
            return int(info["m"]), int(info["n"])
        except (ValueError, KeyError) as exc:
            raise InputError(f"{meta}: unusable metadata ({exc})") from None
    return None


def _load_fit_data(cfg: RunConfig):
    shape = _infer_shape(cfg.train, cfg.shape)
    train = _read(cfg.train, shape)
    test = _read(cfg.test, train.shape) if cfg.test else None
    if test is not None and test.shape != train.shape:
        raise InputError(f"test shape {test.shape} differs from train shape {train.shape}")
    info = None
    if cfg.center:
        train, info = data_mod.center(train)
        if test is not None:
            test = info.apply(test)
    metric = cfg.metric or ("rmse" if cfg.center else "standardized")
    return train, test, info, metric


def _fit_config(cfg: RunConfig) -> FitConfig:
    return FitConfig(
        ell=cfg.ell,
        epsilon=cfg.epsilon,
        max_outer_iters=cfg.max_iters,
        operating_rank_cap=cfg.rank_cap,
        rank_buffer=cfg.rank_buffer,
        svd_tol=cfg.svd_tol,
        svd_method=cfg.svd_method,
        seed=cfg.seed,
    )


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else str(v)
    return str(v)


# -- commands ------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    inst = data_mod.generate(cfg.regime, cfg.m, cfg.n, cfg.rank, cfg.snr, cfg.miss, cfg.seed)
    out = data_mod.write_instance(inst, cfg.out)
    print(f"wrote {inst.observed.nnz} observed / {inst.holdout.nnz} held-out entries to {out}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    train, test, _, metric = _load_fit_data(cfg)
    spec = cfg.penalty
    res = fit_single(train, spec, _fit_config(cfg))
    tr, te = error_metrics(res.factor, train, test, metric)
    row = {
        "lambda": spec.lam,
        "gamma": res.gamma,
        "rank": res.rank,
        "objective": res.objective,
        "train_err": tr,
        "test_err": te,
        "outer_iters": res.outer_iters,
        "delta_final": res.delta_trace[-1] if res.delta_trace else math.nan,
        "stationarity_residual": res.stationarity_residual,
        "wall_time_s": 0.0 if cfg.no_timing else res.wall_time,
    }
    if cfg.out:
        with open(cfg.out, "w") as fh:
            fh.write(",".join(SURFACE_COLUMNS) + "\n")
            fh.write(",".join(_fmt(row[c]) for c in SURFACE_COLUMNS) + "\n")
    if cfg.save_factors:
        save_factor(res.factor, cfg.save_factors)
    print(
        f"{spec.to_token()}: rank {res.rank}, objective {res.objective:.6g}, train {tr:.6g}, "
        f"test {te:.6g}, {res.outer_iters} iterations{'' if res.converged else ' (not converged)'}"
    )
    return EXIT_OK


def _surface_grid(cfg: RunConfig, train: SparseTriplets) -> GridSpec:
    lam_max = cfg.lambda_max if cfg.lambda_max is not None else data_mod.lambda_max(train)
    if not lam_max > 0:
        raise ValueError("lambda_max is zero: the observed matrix is identically zero")
    if cfg.gammas is not None:
        return default_grid(lam_max, cfg.n_lambda, cfg.lambda_min_ratio, gammas=cfg.gammas, family=cfg.family)
    gammas = np.geomspace(cfg.gamma_max, cfg.gamma_min, cfg.n_gamma) if cfg.n_gamma else []
    return default_grid(lam_max, cfg.n_lambda, cfg.lambda_min_ratio, gammas=gammas, family=cfg.family)


def _summarize(surface: SolutionSurface) -> None:
    grid = surface.grid
    print(f"{grid.shape[0]} x {grid.shape[1]} cells, {len(surface.failed_cells)} failed")
    for label, gammas in (("soft", [math.inf]), ("nonconvex", [g for g in grid.gammas if math.isfinite(g)])):
        if not gammas:
            continue
        try:
            i, j = surface.best(gammas)
        except ValueError:
            continue
        c = surface.cell(i, j)
        print(
            f"best {label}: lambda={grid.lambdas[i]:.6g} gamma={grid.gammas[j]:g} "
            f"rank={c.result.rank} test_err={c.test_err:.6g}"
        )


def cmd_surface(cfg: RunConfig) -> int:
    train, test, _, metric = _load_fit_data(cfg)
    grid = _surface_grid(cfg, train)
    surface = fit_surface(train, grid, _fit_config(cfg), holdout=test, metric=metric)
    surface.write_csv(cfg.out, timing=not cfg.no_timing)
    if cfg.save_factors:
        root = Path(cfg.save_factors)
        for j in range(grid.shape[1]):
            for i in range(grid.shape[0]):
                r = surface.cell(i, j).result
                if r is not None:
                    save_factor(r.factor, root / f"cell_{i:03d}_{j:03d}")
    _summarize(surface)
    return EXIT_OK


def cmd_dof(cfg: RunConfig) -> int:
    spec = cfg.penalty
    if cfg.method == "exact-mc":
        est = df_montecarlo(cfg.m, cfg.n, spec, cfg.reps, cfg.seed, cfg.ell, workers=cfg.threads)
        value, se = est.value, est.std_error
    elif cfg.method == "divergence-fd":
        est = df_divergence_fd(cfg.m, cfg.n, spec, cfg.reps, cfg.seed, cfg.ell)
        value, se = est.value, est.std_error
    else:
        big = max(cfg.m, cfg.n)
        frac, frac_se = df_asymptotic_se(spec.lam / math.sqrt(big), spec.gamma if spec.family == "mcp" else math.inf,
                                         min(cfg.m, cfg.n) / big, cfg.reps, cfg.seed)
        value, se = frac * cfg.m * cfg.n, frac_se * cfg.m * cfg.n
    print(f"df = {value:.6f} +/- {se:.6f} ({cfg.method}, {cfg.m}x{cfg.n}, {spec.to_token()}, reps={cfg.reps})")
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    if cfg.lambdas:
        lambdas = cfg.lambdas
    else:
        top = cfg.lambda_max if cfg.lambda_max is not None else math.sqrt(cfg.m) + math.sqrt(cfg.n)
        lambdas = np.linspace(top, top * cfg.lambda_min_ratio, cfg.n_lambda)
    gammas = sorted({math.inf, *cfg.gammas}, reverse=True)
    table = calibrate_grid(lambdas, gammas, cfg.m, cfg.n, cfg.family, cfg.reps, cfg.seed, cfg.method, cfg.threads)
    table.write_csv(cfg.out)
    failed = int(np.isnan(table.lambda_calibrated).sum())
    print(f"wrote {table.lambda_calibrated.size} cells ({failed} not bracketed) to {cfg.out}")
    return EXIT_OK


def _write_triplets(data: SparseTriplets, path: str) -> None:
    if Path(path).suffix.lower() == ".mtx":
        data.to_matrix_market(path)
    else:
        data.to_csv(path)


def cmd_convert(cfg: RunConfig) -> int:
    try:
        if cfg.format in ("ml100k", "ml1m"):
            data = data_mod.read_movielens(cfg.inp, cfg.format)
        elif cfg.format == "mtx":
            data = SparseTriplets.from_matrix_market(cfg.inp)
        else:
            data = SparseTriplets.from_csv(cfg.inp, cfg.shape)
    except OSError as exc:
        raise InputError(f"cannot read {cfg.inp}: {exc.strerror or exc}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if cfg.test_frac > 0:
        train, test = data_mod.split(data, cfg.test_frac, cfg.seed)
        _write_triplets(train, cfg.out)
        _write_triplets(test, cfg.test_out)
        print(f"{data.shape[0]}x{data.shape[1]}: wrote {train.nnz} train and {test.nnz} test entries")
    else:
        _write_triplets(data, cfg.out)
        print(f"{data.shape[0]}x{data.shape[1]}: wrote {data.nnz} entries to {cfg.out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "surface": cmd_surface,
    "dof": cmd_dof,
    "calibrate": cmd_calibrate,
    "convert": cmd_convert,
}


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"ncimpute: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(cfg.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"ncimpute: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, OSError) as exc:
        print(f"ncimpute: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"ncimpute: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
