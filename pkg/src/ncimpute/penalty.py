"""Scalar concave penalties on singular values and their thresholding maps.

Every family is parametrised by a level ``lam`` and (except for l1/l0) a
nonconvexity parameter ``gamma``:

========  =====================================================  ===============
family    P(s; lam, gamma)                                       gamma range
========  =====================================================  ===============
l1        lam * s                                                ignored
l0        lam * 1(s > 0)                                         ignored
lgamma    lam * s**gamma                                         0 <= gamma < 1
scad      integral of lam*1(s<=lam) + (gamma*lam - s)_+/(g-1)   gamma > 2
mcp       lam*(s - s**2/(2*lam*gamma)) for s < lam*gamma, else   gamma > 0
          lam**2*gamma/2
log       lam * log(gamma*s + 1) / log(gamma + 1)                gamma > 0
========  =====================================================  ===============
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

FAMILIES = ("l1", "l0", "lgamma", "scad", "mcp", "log")

_ALIASES = {
    "soft": "l1",
    "nuclear": "l1",
    "hard": "l0",
    "rank": "l0",
    "mc+": "mcp",
    "mcplus": "mcp",
    "lq": "lgamma",
}


@dataclass(frozen=True)
class ConcavityInfo:
    """Concavity measure ``phi_p`` of a penalty (infimum slope of P')."""

    phi_p: float

    @property
    def finite(self) -> bool:
        return math.isfinite(self.phi_p)

    @property
    def strong_convexity_tau(self) -> float:
        return 1.0 + self.phi_p

    @property
    def lipschitz_constant(self) -> float:
        """Lipschitz constant 1/(1+phi_p) of the spectral operator, inf if none."""
        tau = self.strong_convexity_tau
        return 1.0 / tau if tau > 0 else math.inf


@dataclass(frozen=True)
class PenaltySpec:
    family: str
    lam: float
    gamma: float = math.nan
    concavity: ConcavityInfo = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        family = _ALIASES.get(self.family.lower(), self.family.lower())
        if family not in FAMILIES:
            raise ValueError(f"unknown penalty family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", family)
        lam = float(self.lam)
        if not (math.isfinite(lam) and lam >= 0):
            raise ValueError(f"lambda must be finite and >= 0, got {self.lam}")
        object.__setattr__(self, "lam", lam)
        gamma = float(self.gamma)
        if family in ("l1", "l0"):
            gamma = math.nan
        elif family == "mcp" and not (0 < gamma < math.inf):
            raise ValueError(f"MC+ needs 0 < gamma < inf, got {gamma} (use l1 for gamma=inf)")
        elif family == "scad" and not (2 < gamma < math.inf):
            raise ValueError(f"SCAD needs gamma > 2, got {gamma}")
        elif family == "lgamma" and not (0 <= gamma < 1):
            raise ValueError(f"lgamma needs 0 <= gamma < 1, got {gamma}")
        elif family == "log" and not (0 < gamma < math.inf):
            raise ValueError(f"log penalty needs gamma > 0, got {gamma}")
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "concavity", concavity(self))

    @property
    def phi_p(self) -> float:
        return self.concavity.phi_p

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return PenaltySpec(self.family, lam, self.gamma)

    def to_token(self) -> str:
        if self.family in ("l1", "l0"):
            return f"{self.family}:{self.lam:g}"
        return f"{self.family}:{self.lam:g}:{self.gamma:g}"

    @classmethod
    def from_token(cls, token: str) -> "PenaltySpec":
        """Parse ``family:lambda[:gamma]``, e.g. ``mcp:1.5:10`` or ``l1:2``."""
        parts = token.strip().split(":")
        if len(parts) not in (2, 3):
            raise ValueError(f"bad penalty token {token!r}; expected family:lambda[:gamma]")
        try:
            lam = float(parts[1])
            gamma = float(parts[2]) if len(parts) == 3 else math.nan
        except ValueError as exc:
            raise ValueError(f"bad penalty token {token!r}: {exc}") from None
        return make_penalty(parts[0], lam, gamma)


def make_penalty(family: str, lam: float, gamma: float = math.nan) -> PenaltySpec:
    """Build a spec; ``gamma=inf`` maps any family onto its convex member, l1."""
    if math.isinf(gamma) and gamma > 0:
        return PenaltySpec("l1", lam)
    return PenaltySpec(family, lam, gamma)


def concavity(spec: PenaltySpec) -> ConcavityInfo:
    lam, gamma = spec.lam, spec.gamma
    if lam == 0 or spec.family == "l1":
        return ConcavityInfo(0.0)
    if spec.family in ("l0", "lgamma"):
        # P' blows up at 0+ (lgamma) or P jumps at 0 (l0)
        return ConcavityInfo(-math.inf)
    if spec.family == "mcp":
        return ConcavityInfo(-1.0 / gamma)
    if spec.family == "scad":
        return ConcavityInfo(-1.0 / (gamma - 1.0))
    # log: P'' is most negative at 0+
    return ConcavityInfo(-lam * gamma**2 / math.log1p(gamma))


def _check_nonneg(sigma):
    s = np.asarray(sigma, dtype=float)
    if np.any(s < 0) or np.any(np.isnan(s)):
        raise ValueError("penalty is only defined for sigma >= 0")
    return s


def _ret(out, sigma):
    return float(out) if np.ndim(sigma) == 0 else out


def penalty_value(spec: PenaltySpec, sigma):
    """P(sigma; lam, gamma), elementwise."""
    s = _check_nonneg(sigma)
    lam, g = spec.lam, spec.gamma
    fam = spec.family
    if fam == "l1":
        out = lam * s
    elif fam == "l0" or (fam == "lgamma" and g == 0):
        out = np.where(s > 0, lam, 0.0)
    elif fam == "lgamma":
        out = lam * s**g
    elif fam == "mcp":
        if lam == 0:
            out = np.zeros_like(s)
        else:
            t = lam * g
            out = np.where(s < t, lam * s - s**2 / (2 * g), 0.5 * lam * t)
    elif fam == "scad":
        mid = (2 * g * lam * s - s**2 - lam**2) / (2 * (g - 1))
        out = np.where(s <= lam, lam * s, np.where(s <= g * lam, mid, 0.5 * lam**2 * (g + 1)))
    else:
        out = lam * np.log1p(g * s) / math.log1p(g)
    return _ret(out, sigma)


def penalty_derivative(spec: PenaltySpec, sigma):
    """dP/dsigma for sigma > 0 (right derivative at 0 where it is finite)."""
    s = _check_nonneg(sigma)
    lam, g = spec.lam, spec.gamma
    fam = spec.family
    if fam == "lgamma" and g > 0 and lam > 0 and np.any(s == 0):
        raise ValueError("lgamma derivative is unbounded at sigma = 0")
    if fam == "l1":
        out = np.full_like(s, lam)
    elif fam == "l0" or (fam == "lgamma" and g == 0):
        out = np.zeros_like(s)
    elif fam == "lgamma":
        with np.errstate(divide="ignore"):
            out = lam * g * s ** (g - 1)
    elif fam == "mcp":
        out = np.maximum(lam - s / g, 0.0)
    elif fam == "scad":
        out = np.where(s <= lam, lam, np.maximum(g * lam - s, 0.0) / (g - 1))
    else:
        out = lam * g / ((g * s + 1) * math.log1p(g))
    return _ret(out, sigma)


def scalar_objective(spec: PenaltySpec, alpha, sigma, ell: float = 0.0):
    """(ell+1)/2 (alpha - sigma)^2 + P(alpha)."""
    a = np.asarray(alpha, dtype=float)
    return 0.5 * (ell + 1.0) * (a - sigma) ** 2 + penalty_value(spec, a)


def scalar_threshold(spec: PenaltySpec, sigma, ell: float = 0.0):
    """Global minimiser over alpha >= 0 of (ell+1)/2 (alpha - sigma)^2 + P(alpha).

    Ties between alpha = 0 and a nonzero minimiser resolve to 0.
    Works elementwise on arrays.
    """
    s = _check_nonneg(sigma)
    if ell < 0:
        raise ValueError("ell must be >= 0")
    c = 1.0 / (1.0 + ell)
    lam, g = spec.lam * c, spec.gamma
    fam = spec.family
    if lam == 0:
        out = s.copy()
    elif fam == "l1":
        out = np.maximum(s - lam, 0.0)
    elif fam == "l0" or (fam == "lgamma" and g == 0):
        out = np.where(s > math.sqrt(2 * lam), s, 0.0)
    elif fam == "mcp":
        # scaling by 1/(ell+1) is MC+ with lam' = lam/(ell+1), gamma' = gamma*(ell+1)
        out = _mcp_threshold(s, lam, g / c)
    else:
        out = _threshold_search(spec, s.ravel(), c).reshape(s.shape)
    return _ret(out, sigma)


def _mcp_threshold(s, lam, gamma):
    if gamma <= 1:
        # concave on [0, lam*gamma): only the endpoints compete
        return np.where(s > lam * math.sqrt(gamma), s, 0.0)
    mid = (s - lam) / (1.0 - 1.0 / gamma)
    return np.where(s <= lam, 0.0, np.where(s <= lam * gamma, mid, s))


def _stationary_nodes(spec: PenaltySpec, c: float) -> list[float]:
    lam, g = spec.lam, spec.gamma
    if spec.family == "scad":
        return [lam, g * lam]
    if spec.family == "lgamma":
        # inflection of the objective: h''(a) = 1 + c*lam*g*(g-1)*a**(g-2) = 0
        return [(c * lam * g * (1 - g)) ** (1.0 / (2 - g))]
    if spec.family == "log":
        q = c * lam * g**2 / math.log1p(g)
        return [(math.sqrt(q) - 1.0) / g] if q > 1 else []
    return []


def _threshold_search(spec: PenaltySpec, sigma: np.ndarray, c: float) -> np.ndarray:
    """Global minimiser of h(a) = (a - sigma)^2/2 + c P(a) over [0, sigma], per entry.

    The candidates are 0, sigma and the stationary points of h inside
    (0, sigma): closed form for scad (piecewise linear h') and log (a
    quadratic), bracketed bisection on a node grid otherwise.
    """
    sig = np.asarray(sigma, dtype=float)
    out = np.zeros_like(sig)
    pos = sig > 0
    if not pos.any():
        return out
    s = sig[pos][:, None]

    def h(a):
        return 0.5 * (a - s) ** 2 + c * penalty_value(spec, a)

    bad = np.zeros(len(s), dtype=bool)
    if spec.family == "scad":
        roots = _scad_stationary(spec, s, c)
    elif spec.family == "log":
        roots = _log_stationary(spec, s, c)
    else:
        roots, bad = _bracketed_roots(spec, s, c)
    roots = np.where((roots > 0) & (roots < s), roots, np.nan)

    cand = np.hstack([s, roots])
    with np.errstate(invalid="ignore"):
        vals = np.where(np.isnan(cand), np.inf, h(np.nan_to_num(cand, nan=0.0)))
    k = np.argmin(vals, axis=1)
    rows = np.arange(len(s))
    best, best_val = cand[rows, k], vals[rows, k]
    zero_val = h(np.zeros_like(s))[:, 0]
    res = np.where(best_val < zero_val, best, 0.0)

    for i in np.flatnonzero(bad):
        # derivative blew up on the node grid: fall back to a refined grid search
        x = float(s[i, 0])

        def h1(a, x=x):
            return 0.5 * (a - x) ** 2 + c * float(penalty_value(spec, a))

        a = _grid_refine(h1, x)
        res[i] = a if h1(a) < h1(0.0) else 0.0
    out[pos] = res
    return out


def _scad_stationary(spec: PenaltySpec, s: np.ndarray, c: float) -> np.ndarray:
    lam, g = spec.lam, spec.gamma
    first = s - c * lam
    first = np.where(first <= lam, first, np.nan)
    denom = g - 1.0 - c
    with np.errstate(divide="ignore", invalid="ignore"):
        second = (s * (g - 1.0) - c * g * lam) / denom
    second = np.where((second > lam) & (second <= g * lam), second, np.nan)
    # the knots are kept too: h' may vanish on a whole piece when denom = 0
    knots = np.broadcast_to(np.array([lam, g * lam]), (len(s), 2))
    return np.hstack([first, second, knots])


def _log_stationary(spec: PenaltySpec, s: np.ndarray, c: float) -> np.ndarray:
    # a - s + c lam g / ((g a + 1) log(1 + g)) = 0  <=>  g a^2 + (1 - s g) a + (c lam g / L - s) = 0
    lam, g = spec.lam, spec.gamma
    disc = (1.0 + s * g) ** 2 - 4.0 * c * lam * g * g / math.log1p(g)
    root = np.sqrt(np.where(disc >= 0, disc, np.nan))
    return np.hstack([(s * g - 1.0 + root) / (2 * g), (s * g - 1.0 - root) / (2 * g)])


def _bracketed_roots(spec: PenaltySpec, s: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    """Roots of h' where it crosses from - to + between nodes, by bisection on all brackets at once."""
    frac = np.linspace(0.0, 1.0, 17)[1:]
    nodes = [np.maximum(s * 1e-12, np.finfo(float).tiny), s * frac]
    for x in _stationary_nodes(spec, c):
        # out-of-range nodes are replaced by a duplicate, which brackets nothing
        nodes.append(np.where((x > 0) & (x < s), x, s))
    nodes = np.sort(np.hstack(nodes), axis=1)

    def dh(a):
        return a - s + c * penalty_derivative(spec, a)

    with np.errstate(invalid="ignore", over="ignore"):
        d = dh(nodes)
    lo, hi = nodes[:, :-1].copy(), nodes[:, 1:].copy()
    f_lo, f_hi = d[:, :-1], d[:, 1:]
    exact = f_lo == 0.0
    bracket = (f_lo < 0.0) & (f_hi >= 0.0) & (hi > lo)
    for _ in range(200):
        if np.all(np.where(bracket, hi - lo, 0.0) <= 4 * np.finfo(float).eps * s):
            break
        mid = 0.5 * (lo + hi)
        with np.errstate(invalid="ignore", over="ignore"):
            up = dh(np.where(bracket, mid, hi)) >= 0.0
        hi = np.where(bracket & up, mid, hi)
        lo = np.where(bracket & ~up, mid, lo)
    roots = np.where(exact, nodes[:, :-1], np.where(bracket, 0.5 * (lo + hi), np.nan))
    return roots, ~np.all(np.isfinite(d), axis=1)


def _grid_refine(h, sigma: float, points: int = 1001) -> float:
    lo, hi = 0.0, sigma
    while True:
        grid = np.linspace(lo, hi, points)
        vals = np.array([h(x) for x in grid])
        k = int(np.argmin(vals))
        step = grid[1] - grid[0]
        if step <= 1e-8 * sigma:
            return float(grid[k])
        lo, hi = max(0.0, grid[k] - step), min(sigma, grid[k] + step)
