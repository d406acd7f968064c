"""Limit objects: stable subordinator, its inverse, zeta and the aging function.

The subordinator is normalised by ``E[exp(-t S(u))] = exp(-u t^alpha)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, interpolate, special

from .env import ConductanceLaw, Regime, TailSpec, log_quantile

__all__ = [
    "ZetaLaw",
    "ZetaMoment",
    "arcsine_aging",
    "e_zeta_alpha",
    "front_factor",
    "inverse_by_path",
    "inverse_marginal",
    "sample_zeta",
    "size_biased_sampler",
    "stable_increment",
    "subordinator_path",
    "theorem_constant",
]

STABLE_TAG = 0x53544142
ZETA_TAG = 0x5A455441
SIZE_BIAS_GRID = 4096
SERIES_RTOL = 1e-12


def _rng(seed, tag: int) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tag])))


def _check_alpha(alpha: float):
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


# --------------------------------------------------------------------------
# stable subordinator
# --------------------------------------------------------------------------

def _kanter(alpha: float, rng: np.random.Generator, size):
    """Positive stable draws with Laplace transform ``exp(-t^alpha)``."""
    u = np.pi * rng.random(size)
    e = rng.standard_exponential(size)
    a = alpha
    # Kanter's representation: A(u) / E^((1-a)/a)
    log_a = (np.log(np.sin(a * u)) - np.log(np.sin(u)) / a
             + (1 - a) / a * np.log(np.sin((1 - a) * u)))
    return np.exp(log_a - (1 - a) / a * np.log(e))


def stable_increment(alpha: float, du: float = 1.0, seed=0, size=None):
    """Draw(s) of ``S_alpha(du)`` by Kanter's two-uniform method.

    Parameters
    ----------
    alpha : float
        Index in (0, 1).
    du : float
        Time increment, > 0.
    seed : int or numpy.random.Generator
    size : int or tuple, optional
        Number of i.i.d. draws; a float is returned when omitted.
    """
    _check_alpha(alpha)
    if not du > 0:
        raise ValueError("du must be positive")
    out = du ** (1.0 / alpha) * _kanter(alpha, _rng(seed, STABLE_TAG), size)
    return float(out) if size is None else out


def subordinator_path(alpha: float, grid, seed=0, size=None):
    """Values of ``S_alpha`` on a sorted grid of times, from independent increments.

    Returns shape ``(len(grid),)`` or ``(size, len(grid))``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0 or grid[0] <= 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing and positive")
    _check_alpha(alpha)
    du = np.diff(grid, prepend=0.0)
    rng = _rng(seed, STABLE_TAG)
    shape = (len(grid),) if size is None else (int(size), len(grid))
    inc = du ** (1.0 / alpha) * _kanter(alpha, rng, shape)
    return np.cumsum(inc, axis=-1)


def inverse_marginal(alpha: float, u: float = 1.0, seed=0, size=None):
    """Draw(s) of ``inf{s : S_alpha(s) > u}``.

    Uses ``S^-1(u) = u^alpha S_alpha(1)^-alpha`` in law.
    """
    if not u > 0:
        raise ValueError("u must be positive")
    s1 = stable_increment(alpha, 1.0, seed, size)
    return u ** alpha * np.power(s1, -alpha)


def inverse_by_path(alpha: float, u: float = 1.0, seed=0, size: int = 1000,
                    step: float = 1e-3, max_steps: int = 1 << 22):
    """Reference construction of ``S^-1(u)``: first grid time where a sampled path exceeds ``u``.

    The path is built on a uniform grid of mesh ``step`` and extended
    in chunks until every replica has crossed; the result is exact up to
    one grid cell.
    """
    _check_alpha(alpha)
    rng = _rng(seed, STABLE_TAG + 1)
    out = np.full(size, np.nan)
    level = np.zeros(size)
    live = np.arange(size)
    chunk, done = 4096, 0
    while live.size and done < max_steps:
        inc = step ** (1.0 / alpha) * _kanter(alpha, rng, (live.size, chunk))
        path = level[live, None] + np.cumsum(inc, axis=1)
        crossed = path > u
        hit = crossed.any(axis=1)
        first = np.argmax(crossed, axis=1)
        out[live[hit]] = (done + first[hit] + 1) * step
        level[live] = path[:, -1]
        live = live[~hit]
        done += chunk
    if live.size:
        raise RuntimeError(f"{live.size} paths did not cross {u} within {max_steps} steps")
    return out


# --------------------------------------------------------------------------
# theorem constant and aging
# --------------------------------------------------------------------------

def theorem_constant(alpha: float, e_zeta: float) -> float:
    """``(pi alpha E[zeta^alpha] / sin(pi alpha))^(1/alpha)``, the scale of ``T_n / d_n``."""
    _check_alpha(alpha)
    return (math.pi * alpha * e_zeta / math.sin(math.pi * alpha)) ** (1.0 / alpha)


def front_factor(alpha: float, e_zeta: float) -> float:
    """``sin(pi alpha) / (pi alpha E[zeta^alpha])``, the scale of ``X_n`` limits."""
    _check_alpha(alpha)
    return math.sin(math.pi * alpha) / (math.pi * alpha * e_zeta)


def arcsine_aging(alpha: float, h: float) -> float:
    """``(sin(pi alpha)/pi) int_0^(1/h) y^(alpha-1) (1-y)^-alpha dy``.

    Both endpoint singularities are handled by algebraic quadrature
    weights: the integral over ``[0, 1/h]`` carries the ``y^(alpha-1)``
    weight, and for ``1/h > 1/2`` the complement over ``[1/h, 1]`` carries
    ``(1-y)^-alpha``.
    """
    _check_alpha(alpha)
    if not h >= 1:
        raise ValueError("h must be >= 1")
    x = 1.0 / h
    norm = math.sin(math.pi * alpha) / math.pi
    if x <= 0.5:
        val, _ = integrate.quad(lambda y: (1 - y) ** (-alpha), 0.0, x, weight="alg",
                                wvar=(alpha - 1.0, 0.0), epsabs=1e-14, epsrel=1e-13)
        return norm * val
    if x == 1.0:
        return 1.0
    rest, _ = integrate.quad(lambda y: y ** (alpha - 1.0), x, 1.0, weight="alg",
                             wvar=(0.0, -alpha), epsabs=1e-14, epsrel=1e-13)
    return 1.0 - norm * rest


# --------------------------------------------------------------------------
# zeta
# --------------------------------------------------------------------------

def _flip(law: ConductanceLaw) -> ConductanceLaw:
    """Law of ``1/c``."""
    return ConductanceLaw(law.lower, law.upper, 1.0 - law.p_upper, allow_ballistic=True)


def _component_sampler(spec: TailSpec, b: float, grid: int):
    """Sampler of ``Y`` (one tail component) size-biased by ``Y^b``.

    ``Y = Q(s)`` with ``s`` the survival level; the size-biased level has
    density proportional to ``Q(s)^b`` on ``(0, 1)``.  Its CDF is tabulated
    on a grid in ``log s`` reaching down to ``-1e6`` and inverted by
    monotone interpolation.  Everything stays in log space, so draws above
    the float range come back as ``inf``.
    """
    if b > spec.alpha or (b == spec.alpha and spec.gamma >= -1):
        raise ArithmeticError(f"E[Y^{b}] is infinite for tail index {spec.alpha}")
    log_s = -np.geomspace(1e6, 1e-9, grid)
    log_q = log_quantile(spec, log_s)
    log_f = b * log_q + log_s
    keep = log_f > -640.0
    keep[np.argmax(keep):] = True
    log_s, log_q, f = log_s[keep], log_q[keep], np.exp(log_f[keep])
    cum = integrate.cumulative_trapezoid(f, log_s, initial=0.0)
    # mass below the grid, from the local log-slope of the integrand
    slope = (log_f[keep][1] - log_f[keep][0]) / (log_s[1] - log_s[0])
    if not slope > 0:
        raise ArithmeticError("size-biased weight not integrable at the tail")
    cum += f[0] / slope
    total = cum[-1] - f[-1] * log_s[-1]
    log_cdf = np.log(cum / total)
    up = np.concatenate([[True], np.diff(log_cdf) > 0])
    inv = interpolate.PchipInterpolator(log_cdf[up], log_s[up], extrapolate=True)
    lo = log_cdf[0]
    qslope = (log_q[1] - log_q[0]) / (log_s[1] - log_s[0])

    def draw(rng, size):
        lu = np.log(rng.random(size))
        deep = lu < lo
        ls = inv(np.maximum(lu, lo))
        ls = np.minimum(ls, log_s[-1])
        lq = log_quantile(spec, ls)
        # below the grid the log quantile is linear in log s
        lq = np.where(deep, log_q[0] + qslope * (lu - lo) / slope, lq)
        with np.errstate(over="ignore"):
            return np.exp(lq)

    return draw, total


def size_biased_sampler(law: ConductanceLaw, a: float, grid: int = SIZE_BIAS_GRID):
    """Sampler of ``c`` with law ``E[c^a 1{c in .}] / E[c^a]``, ``a > 0``.

    Returns ``draw(rng, size) -> ndarray``.  The mixture weights are the
    component contributions to ``E[c^a]``; each component is sampled by a
    tabulated inverse CDF.
    """
    if not a > 0:
        raise ValueError("a must be positive")
    parts = []
    if law.p_upper > 0:
        d_up, m_up = _component_sampler(law.upper, a, grid)
        parts.append((law.p_upper * m_up, lambda rng, k: d_up(rng, k)))
    if law.p_upper < 1:
        d_lo, m_lo = _component_sampler(law.lower, -a, grid)
        parts.append(((1 - law.p_upper) * m_lo, lambda rng, k: 1.0 / d_lo(rng, k)))
    weights = np.array([w for w, _ in parts])
    weights /= weights.sum()

    def draw(rng, size):
        size = int(size)
        pick = rng.random(size) < weights[0]
        out = np.empty(size)
        n0 = int(pick.sum())
        if n0:
            out[pick] = parts[0][1](rng, n0)
        if size - n0:
            out[~pick] = parts[-1][1](rng, size - n0)
        return out

    return draw


@dataclass
class ZetaLaw:
    """Law of ``zeta = 2 (1 + B cbar_0 V + (1-B) W / cbar_-1)``.

    ``B`` is Bernoulli(q) and marks a well.  ``cbar_-1`` is size-biased by
    ``c^alpha`` and ``1/cbar_0`` by ``c^-alpha``.  ``V`` and ``W`` are
    exponentially weighted series of fresh conductances:

    ``printed``  V = sum_{j>=1} e^{-lam(j+1)} / c_j,  W = sum_{j>=2} e^{-lam(j+1)} c_-j
    ``network``  V = sum_{j>=1} e^{-lam j} / c_j,      W = sum_{j>=2} e^{-lam(j-1)} c_-j

    The second form is what the escape probability and the excursion time
    of the network give around a deep edge.
    """

    regime: Regime
    q: float
    lam: float
    alpha: float
    draw_c: Callable                   # fresh conductances
    draw_bar_c_prev: Callable | None   # cbar_-1
    draw_bar_c0: Callable | None       # cbar_0
    convention: str = "printed"
    depth: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.q <= 1:
            raise ValueError("q must lie in [0, 1]")
        if self.convention not in ("printed", "network"):
            raise ValueError("convention is 'printed' or 'network'")
        if self.depth <= 0:
            # e^{-lam J} below 1e-12 squared in the tail-index scale
            self.depth = int(math.ceil(2 * math.log(1 / SERIES_RTOL)
                                       / (self.lam * min(1.0, self.alpha)))) + 2

    @classmethod
    def from_law(cls, law: ConductanceLaw, lam: float, convention: str = "printed",
                 q: float | None = None, depth: int = 0) -> "ZetaLaw":
        from .traps import well_fraction
        if law.regime is Regime.WELL_AND_WALLS:
            return cls(law.regime, 0.0, lam, law.alpha, law.draw, None, None, convention, depth)
        if q is None:
            q = well_fraction(law, lam)
        a = law.alpha
        prev = size_biased_sampler(law, a) if q < 1 else None
        inv0 = size_biased_sampler(_flip(law), a) if q > 0 else None
        draw0 = (lambda rng, k: 1.0 / inv0(rng, k)) if inv0 else None
        return cls(law.regime, q, lam, a, law.draw, prev, draw0, convention, depth,
                   {"law": law.to_dict()})

    @classmethod
    def point_mass(cls, value: float, lam: float, q: float, alpha: float = 0.5,
                   convention: str = "printed", depth: int = 0) -> "ZetaLaw":
        """Degenerate law with every conductance equal to ``value``."""
        const = lambda rng, k: np.full(int(np.prod(k)), float(value)).reshape(k)
        return cls(Regime.SIMPLE, q, lam, alpha, const, const, const, convention, depth,
                   {"point_mass": value})

    def exponents(self):
        """Offsets ``(a_V, a_W)``: the ``j``-th term carries ``e^{-lam (j + a)}``."""
        return (1, 1) if self.convention == "printed" else (0, -1)


def _series(zl: ZetaLaw, rng, size: int, invert: bool, first: int, offset: int):
    """Rows of ``sum_{j>=first} e^{-lam(j+offset)} x_j`` with ``x = 1/c`` or ``c``.

    Rows whose last realised term is not below ``SERIES_RTOL`` of the
    partial sum times the geometric factor are extended by doubling.
    """
    depth = zl.depth
    js = np.arange(first, first + depth)
    x = zl.draw_c(rng, (size, depth))
    if invert:
        x = 1.0 / x
    w = np.exp(-zl.lam * (js + offset))
    total = (x * w).sum(axis=1)
    tail_scale = x.max(axis=1) * math.exp(-zl.lam * (first + depth + offset)) / (-math.expm1(-zl.lam))
    bad = np.nonzero(tail_scale > SERIES_RTOL * total)[0]
    start = first + depth
    while bad.size:
        more = zl.draw_c(rng, (bad.size, depth))
        if invert:
            more = 1.0 / more
        js = np.arange(start, start + depth)
        total[bad] += (more * np.exp(-zl.lam * (js + offset))).sum(axis=1)
        start += depth
        tail = more.max(axis=1) * math.exp(-zl.lam * (start + offset)) / (-math.expm1(-zl.lam))
        bad = bad[tail > SERIES_RTOL * total[bad]]
        if start > 1e5:
            raise ArithmeticError("zeta series did not settle")
    return total


def sample_zeta(zl: ZetaLaw, size: int | None = None, seed=0):
    """Draw(s) of ``zeta``; exactly 2 in the well-and-walls regime."""
    k = 1 if size is None else int(size)
    if zl.regime is Regime.WELL_AND_WALLS:
        out = np.full(k, 2.0)
        return 2.0 if size is None else out
    rng = _rng(seed, ZETA_TAG)
    well = rng.random(k) < zl.q
    out = np.full(k, 2.0)
    a_v, a_w = zl.exponents()
    nw = int(well.sum())
    if nw:
        v = _series(zl, rng, nw, True, 1, a_v)
        out[well] = 2.0 * (1.0 + zl.draw_bar_c0(rng, nw) * v)
    if k - nw:
        w = _series(zl, rng, k - nw, False, 2, a_w)
        out[~well] = 2.0 * (1.0 + w / zl.draw_bar_c_prev(rng, k - nw))
    return float(out[0]) if size is None else out


@dataclass(frozen=True)
class ZetaMoment:
    value: float
    stderr: float
    n_samples: int
    hill_index: float = math.nan
    hill_k: int = 0
    alpha: float = math.nan

    @property
    def integrable(self) -> bool:
        """Hill index of zeta above alpha, or zeta bounded."""
        return bool(self.stderr == 0 or self.hill_index > self.alpha)


def e_zeta_alpha(zl: ZetaLaw, n_samples: int = 100_000, seed=0, hill_k: int | None = None) -> ZetaMoment:
    """Monte Carlo ``E[zeta^alpha]`` with standard error and a Hill index of ``zeta``."""
    from .stats import hill_estimator
    if zl.regime is Regime.WELL_AND_WALLS:
        return ZetaMoment(2.0 ** zl.alpha, 0.0, n_samples, math.inf, 0, zl.alpha)
    if n_samples < 10_000:
        raise ValueError("n_samples must be >= 1e4")
    z = sample_zeta(zl, n_samples, seed)
    za = z ** zl.alpha
    se = float(za.std(ddof=1) / math.sqrt(n_samples))
    if np.ptp(z) == 0:
        return ZetaMoment(float(za.mean()), 0.0, n_samples, math.inf, 0, zl.alpha)
    k = hill_k or max(10, int(math.sqrt(n_samples)))
    # index of the excess over the floor 2
    index, _ = hill_estimator(z - 2.0 + 1e-300, k)
    return ZetaMoment(float(za.mean()), se, n_samples, float(index), k, zl.alpha)
