"""Estimators and distribution tests shared by the experiments."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats as sps

from .env import ConductanceLaw

__all__ = [
    "AgingEstimate",
    "PPPReport",
    "SampleSummary",
    "SlopeFit",
    "TrapTypeReport",
    "aging_estimator",
    "ecdf",
    "exceedance_ppp_check",
    "hill_estimator",
    "ks_one_sample",
    "ks_two_sample",
    "loglog_slope",
    "summarize",
    "trap_type_frequencies",
]

PERMUTATIONS = 2000
SMALL_SAMPLE = 50


def ecdf(sample):
    """Sorted sample and its right-continuous ECDF values."""
    x = np.sort(np.asarray(sample, dtype=float))
    return x, np.arange(1, len(x) + 1) / len(x)


def _ks_stat(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.sort(a), np.sort(b)
    pts = np.concatenate([a, b])
    fa = np.searchsorted(a, pts, side="right") / len(a)
    fb = np.searchsorted(b, pts, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b, seed: int = 0) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and p-value.

    The p-value is the asymptotic Kolmogorov tail at ``sqrt(n_eff) D``; if
    either sample has fewer than 50 points it is a permutation p-value
    over 2000 relabellings instead.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be non-empty")
    d = _ks_stat(a, b)
    if min(a.size, b.size) < SMALL_SAMPLE:
        rng = np.random.default_rng(seed)
        pooled = np.concatenate([a, b])
        hits = 0
        for _ in range(PERMUTATIONS):
            rng.shuffle(pooled)
            hits += _ks_stat(pooled[:a.size], pooled[a.size:]) >= d - 1e-12
        return d, (hits + 1) / (PERMUTATIONS + 1)
    n_eff = a.size * b.size / (a.size + b.size)
    return d, float(special.kolmogorov(math.sqrt(n_eff) * d))


def ks_one_sample(sample, cdf) -> tuple[float, float]:
    """One-sample KS statistic against a callable CDF, with asymptotic p-value."""
    x = np.sort(np.asarray(sample, dtype=float))
    n = len(x)
    f = np.asarray(cdf(x), dtype=float)
    d = max(float(np.max(np.arange(1, n + 1) / n - f)), float(np.max(f - np.arange(n) / n)))
    return d, float(special.kolmogorov(math.sqrt(n) * d))


def hill_estimator(sample, k: int) -> tuple[float, float]:
    """Hill estimate ``(index, gamma)`` from the ``k`` largest values.

    ``gamma = mean_{i<=k} log(x_(i) / x_(k+1))`` over decreasing order
    statistics, and ``index = 1 / gamma``.
    """
    x = np.asarray(sample, dtype=float).ravel()
    if np.any(x <= 0):
        raise ValueError("Hill estimator needs positive values")
    if not 1 <= k < x.size:
        raise ValueError("need 1 <= k < n")
    top = -np.partition(-x, k)[:k + 1]
    top = np.sort(top)[::-1]
    gamma = float(np.mean(np.log(top[:k]) - math.log(top[k])))
    return (1.0 / gamma if gamma > 0 else math.inf), gamma


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    stderr: float
    intercept: float


def loglog_slope(pairs) -> SlopeFit:
    """Least-squares slope of ``log value`` against ``log n``."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValueError("need at least 3 (n, value) pairs")
    if np.any(arr <= 0):
        raise ValueError("n and values must be positive")
    x, y = np.log(arr[:, 0]), np.log(arr[:, 1])
    res = sps.linregress(x, y)
    se = float(res.stderr) if arr.shape[0] > 2 else math.nan
    return SlopeFit(float(res.slope), se, float(res.intercept))


@dataclass
class SampleSummary:
    n: int
    mean: float
    variance: float
    probs: list
    quantiles: list
    hill_index: float | None = None
    hill_k: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(sample, probs=(0.05, 0.25, 0.5, 0.75, 0.95), hill_k: int | None = None) -> SampleSummary:
    x = np.asarray(sample, dtype=float).ravel()
    qs = np.quantile(x, probs)
    h = None
    if hill_k is not None:
        h = hill_estimator(x, hill_k)[0]
    return SampleSummary(int(x.size), float(x.mean()), float(x.var(ddof=1)) if x.size > 1 else 0.0,
                         list(map(float, probs)), list(map(float, qs)), h, hill_k)


# --------------------------------------------------------------------------
# aging
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AgingEstimate:
    value: float
    stderr: float
    replicas: int


def aging_estimator(positions, h: float | None = None, j_window: int = 50, records=None) -> AgingEstimate:
    """Fraction of replicas with ``|X_{hn} - X_n| <= j_window``.

    ``positions`` is an array of shape ``(replicas, 2)`` holding ``X_n`` and
    ``X_{floor(hn)}`` per replica.  ``records``, if given, are the
    corresponding passage records and must come from a joint-law engine.
    """
    if records is not None:
        for r in records:
            if not getattr(r, "joint_law", False):
                raise ValueError("aging needs joint paths; branching records are marginal only")
    if h is not None and not h > 1:
        raise ValueError("h must exceed 1")
    pos = np.asarray(positions, dtype=float)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError("positions must have shape (replicas, 2)")
    hit = np.abs(pos[:, 1] - pos[:, 0]) <= j_window
    m = len(hit)
    p = float(hit.mean())
    return AgingEstimate(p, math.sqrt(p * (1 - p) / m) if m else math.nan, m)


# --------------------------------------------------------------------------
# exceedances and trap types
# --------------------------------------------------------------------------

@dataclass
class PPPReport:
    environments: int
    mean_count: float
    expected_count: float
    dispersion_index: float
    dispersion_ci: tuple
    uniformity_p: float
    uniformity_bins: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dispersion_ci"] = list(self.dispersion_ci)
        return d

    @property
    def poisson_consistent(self) -> bool:
        return self.dispersion_ci[0] <= 1.0 <= self.dispersion_ci[1]


def exceedance_ppp_check(positions, eps: float, alpha: float, bins: int = 10,
                         n_boot: int = 2000, seed: int = 0, min_envs: int = 100,
                         expected: float | None = None) -> PPPReport:
    """Poisson-process diagnostics for deep-trap positions.

    ``positions`` holds, per environment, the rescaled positions in
    ``[0, 1]`` of traps deeper than ``eps d_n``.  Uniformity is a
    chi-square test on ``bins`` equal cells; the dispersion index
    ``var / mean`` of the counts gets a percentile bootstrap CI.
    ``expected`` overrides the reference mean ``eps^-alpha``.
    """
    if len(positions) < min_envs:
        raise ValueError(f"need at least {min_envs} environments, got {len(positions)}")
    counts = np.array([len(p) for p in positions], dtype=float)
    flat = np.concatenate([np.asarray(p, dtype=float) for p in positions]) if counts.sum() else np.array([])
    if flat.size:
        obs = np.histogram(np.clip(flat, 0, 1), bins=bins, range=(0, 1))[0]
        unif_p = float(sps.chisquare(obs).pvalue)
    else:
        unif_p = math.nan
    mean = counts.mean()
    disp = counts.var(ddof=1) / mean if mean > 0 else math.nan
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(counts), size=(n_boot, len(counts)))
    bc = counts[idx]
    bm = bc.mean(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        bd = bc.var(axis=1, ddof=1) / bm
    bd = bd[np.isfinite(bd)]
    ci = (float(np.quantile(bd, 0.025)), float(np.quantile(bd, 0.975))) if bd.size else (math.nan, math.nan)
    exp_count = eps ** (-alpha) if expected is None else expected
    return PPPReport(len(counts), float(mean), float(exp_count), float(disp), ci, unif_p, bins)


@dataclass
class TrapTypeReport:
    threshold: float
    exceedances: int
    m_grid: list
    well_frac: list       # P(c_-1 > M | rho_0 > t)
    wall_frac: list       # P(1/c_0 > M | rho_0 > t)
    both_frac: list
    q_hat: float
    q_hat_stderr: float

    def to_dict(self) -> dict:
        return asdict(self)


def trap_type_frequencies(law: ConductanceLaw, lam: float, t_threshold: float,
                          n_samples: int = 10**7, seed: int = 0, m_grid=None,
                          min_exceedances: int = 200, chunk: int = 10**6) -> TrapTypeReport:
    """Which factor makes ``rho_0 = e^-lam c_-1 / c_0`` exceed ``t``.

    For each ``M`` in ``m_grid`` report the fractions of exceedances with
    ``c_-1 > M``, with ``1/c_0 > M``, and with both.  ``q_hat`` is the
    share of ``c_-1 > M`` among exceedances carrying exactly one large
    factor, at the largest ``M``.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x54595045])))
    c_prev, inv_c0 = [], []
    left = n_samples
    while left > 0:
        k = min(chunk, left)
        c = law.draw(rng, (2, k))
        r = math.exp(-lam) * c[0] / c[1]
        sel = r > t_threshold
        c_prev.append(c[0][sel])
        inv_c0.append(1.0 / c[1][sel])
        left -= k
    c_prev = np.concatenate(c_prev)
    inv_c0 = np.concatenate(inv_c0)
    m = len(c_prev)
    if m < min_exceedances:
        raise ValueError(f"only {m} exceedances of t={t_threshold:g}; need {min_exceedances}")
    if m_grid is None:
        m_grid = list(np.geomspace(10.0, max(10.0, math.sqrt(t_threshold)), 6))
    wells, walls, both = [], [], []
    for big in m_grid:
        a, b = c_prev > big, inv_c0 > big
        wells.append(float(a.mean()))
        walls.append(float(b.mean()))
        both.append(float((a & b).mean()))
    big = m_grid[-1]
    a, b = c_prev > big, inv_c0 > big
    one = a ^ b
    k1 = int(one.sum())
    q = float((a & one).sum() / k1) if k1 else math.nan
    se = math.sqrt(q * (1 - q) / k1) if k1 else math.nan
    return TrapTypeReport(float(t_threshold), m, list(map(float, m_grid)), wells, walls, both, q, se)
