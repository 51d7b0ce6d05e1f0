"""Matrix completion with nonconvex spectral penalties."""
from .penalty import PenaltySpec, make_penalty, scalar_threshold
from .spectral import LowRankFactor, spectral_threshold_dense
from .lowrank import SparsePlusLowRank, SparseTriplets, block_power_svd
from .impute import FitConfig, GridSpec, default_grid, fit_single, fit_surface, objective
from .data import center, gen_rom, lambda_max, load_movielens, metrics

__version__ = "0.1.0"
