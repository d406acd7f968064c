"""Depth scales, block partition, trap detection and environment censuses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
from scipy import optimize, special

from .env import ConductanceLaw, Environment, Regime

__all__ = [
    "BlockPlan",
    "CensusReport",
    "LimitParams",
    "Psi",
    "TrapKind",
    "TrapRecord",
    "block_partition",
    "brute_force_traps",
    "census",
    "default_big_c",
    "detect_traps",
    "limit_params",
    "psi_asymptotic",
    "solve_dn",
    "well_fraction",
]


# --------------------------------------------------------------------------
# psi and d_n
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Psi:
    """Slowly varying factor in ``P(rho_0 > t) ~ psi(t) t^-alpha``.

    The representative is fixed exactly: for simple traps

        e^(-lambda alpha) (E[c^alpha] L_0(t) t^(alpha-alpha_0) + E[c^-alpha] L_inf(t) t^(alpha-alpha_inf)),

    keeping only the terms whose moment is finite, and for well-and-walls

        e^(-lambda alpha) alpha B(g0, gi) log(t) L_0(t) L_inf(t),

    with ``B = Gamma(1+g0) Gamma(1+gi) / Gamma(2+g0+gi)``.
    """

    law: ConductanceLaw
    lam: float
    m_pos: float = field(init=False)   # E[c^alpha]
    m_neg: float = field(init=False)   # E[c^-alpha]

    def __post_init__(self):
        a = self.law.alpha
        object.__setattr__(self, "m_pos", self.law.moment(a))
        object.__setattr__(self, "m_neg", self.law.moment(-a))

    @property
    def alpha(self) -> float:
        return self.law.alpha

    @property
    def regime(self) -> Regime:
        return self.law.regime

    @property
    def t_min(self) -> float:
        """Smallest ``t`` where both tails are in their power-law regime."""
        return max(self.law.upper.t_min, self.law.lower.t_min, math.e)

    def beta_factor(self) -> float:
        g0, gi = self.law.lower.gamma, self.law.upper.gamma
        return math.exp(special.gammaln(1 + g0) + special.gammaln(1 + gi)
                        - special.gammaln(2 + g0 + gi))

    def terms(self, t):
        """Well and wall contributions ``(from L_inf, from L_0)`` to ``psi(t)``."""
        t = np.asarray(t, dtype=float)
        law, a = self.law, self.alpha
        pref = math.exp(-self.lam * a)
        wall = np.zeros_like(t)
        well = np.zeros_like(t)
        if math.isfinite(self.m_pos) and law.p_upper < 1:
            wall = pref * self.m_pos * law.L_0(t) * t ** (a - law.alpha_0)
        if math.isfinite(self.m_neg) and law.p_upper > 0:
            well = pref * self.m_neg * law.L_inf(t) * t ** (a - law.alpha_inf)
        return well, wall

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self.regime is Regime.WELL_AND_WALLS:
            out = (math.exp(-self.lam * self.alpha) * self.alpha * self.beta_factor()
                   * np.log(t) * self.law.L_0(t) * self.law.L_inf(t))
        else:
            well, wall = self.terms(t)
            out = well + wall
        return out if out.ndim else float(out)


def psi_asymptotic(law: ConductanceLaw, lam: float, t):
    """Evaluate the representative ``psi(t)`` of :class:`Psi`."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 1):
        raise ValueError("psi is evaluated for t > 1")
    return Psi(law, lam)(t)


def well_fraction(law: ConductanceLaw, lam: float, t: float | None = None) -> float:
    """Share of wells among deep simple traps.

    With ``t`` given, the ratio of the well term to ``psi(t)``; otherwise
    its limit as ``t -> inf`` (0 or 1 unless both terms are of the same
    order).  Well-and-walls laws return ``nan``.
    """
    psi = Psi(law, lam)
    if law.regime is Regime.WELL_AND_WALLS:
        return math.nan
    if t is not None:
        well, wall = psi.terms(t)
        return float(well / (well + wall))
    fin_pos, fin_neg = math.isfinite(psi.m_pos), math.isfinite(psi.m_neg)
    if not fin_pos:
        return 1.0
    if not fin_neg:
        return 0.0
    # both finite: compare the orders of the two terms
    key_wall = (-law.alpha_0, law.lower.gamma)
    key_well = (-law.alpha_inf, law.upper.gamma)
    if key_well > key_wall:
        return 1.0
    if key_wall > key_well:
        return 0.0
    well, wall = psi.terms(math.e)
    return float(well / (well + wall))


def solve_dn(psi: Callable, alpha: float, n: float, t_lo: float = math.e) -> float:
    """Root ``d_n`` of ``psi(t) t^-alpha n = 1``.

    Brent's method in ``log t`` on ``[t_lo, 10^(3/alpha) n^(2/alpha)]``.
    When the map is not monotone near ``t_lo`` the bracket starts at its
    maximiser located by a grid scan.
    """
    if n < 10:
        raise ValueError("solve_dn needs n >= 10")
    lo, hi = math.log(t_lo), math.log(10.0) * 3.0 / alpha + 2.0 / alpha * math.log(n)

    def f(v):
        return math.log(float(psi(math.exp(v)))) - alpha * v + math.log(n)

    if f(lo) <= 0:
        grid = np.linspace(lo, hi, 2001)
        vals = np.array([f(v) for v in grid])
        lo = float(grid[int(np.argmax(vals))])
        if vals.max() <= 0:
            raise ValueError(f"psi(t) t^-alpha n < 1 on the whole bracket (n={n})")
    if f(hi) >= 0:
        raise ValueError("d_n lies above the search bracket")
    v = optimize.brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    d = math.exp(v)
    resid = abs(float(psi(d)) * d ** (-alpha) * n - 1.0)
    if resid > 1e-9:
        raise ArithmeticError(f"d_n residual {resid:.3g} above 1e-9")
    return d


def default_big_c(alpha: float, lam: float) -> float:
    """Block constant ``(3 + 3/alpha) / lambda``."""
    return (3.0 + 3.0 / alpha) / lam


# --------------------------------------------------------------------------
# blocks and parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class BlockPlan:
    n: int
    big_c: float
    c_n: int
    k_n: int

    def triblock(self, j: int) -> tuple[int, int]:
        """Inclusive site range ``[(j-1) c_n, (j+2) c_n - 1]``."""
        return (j - 1) * self.c_n, (j + 2) * self.c_n - 1

    def middle_block(self, j: int) -> tuple[int, int]:
        return j * self.c_n, (j + 1) * self.c_n - 1

    def index_of(self, x):
        """Triblock whose middle block contains ``x``."""
        return np.floor_divide(x, self.c_n)


def block_partition(n: int, big_c: float) -> BlockPlan:
    if n < math.e:
        raise ValueError("block_partition needs n >= e")
    c_n = math.ceil(big_c * math.log(n))
    return BlockPlan(n, big_c, c_n, math.ceil(n / c_n))


@dataclass(frozen=True)
class LimitParams:
    """Scale quantities of a law at size ``n``."""

    n: int
    lam: float
    alpha: float
    psi: Psi
    d_n: float
    q_n: float
    big_c: float
    c_n: int
    k_n: int

    @property
    def regime(self) -> Regime:
        return self.psi.regime

    @property
    def plan(self) -> BlockPlan:
        return BlockPlan(self.n, self.big_c, self.c_n, self.k_n)

    @property
    def trap_threshold(self) -> float:
        return self.d_n * math.exp(-self.q_n)

    @property
    def k_bound(self) -> float:
        """``(6 / lambda) q_n``."""
        return 6.0 / self.lam * self.q_n

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "psi"}
        d["regime"] = self.regime.value
        return d


def limit_params(law: ConductanceLaw, lam: float, n: int, big_c: float | None = None) -> LimitParams:
    psi = Psi(law, lam)
    if big_c is None:
        big_c = default_big_c(law.alpha, lam)
    plan = block_partition(n, big_c)
    d_n = solve_dn(psi, law.alpha, n, psi.t_min)
    return LimitParams(n, lam, law.alpha, psi, d_n, math.log(n) ** 0.25, big_c, plan.c_n, plan.k_n)


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------

class TrapKind(str, Enum):
    WELL = "Well"
    WALL = "Wall"
    WELL_AND_WALL = "WellAndWall"


@dataclass(frozen=True)
class TrapRecord:
    x: int
    kind: TrapKind
    k: int
    depth: float
    in_good_triblock: bool
    triblock_index: int
    atypical: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


def _scan_range(env: Environment, params: LimitParams, lo, hi):
    lo = max(env.left + 1, 0 if lo is None else lo)
    hi = min(env.right, params.n - 1 if hi is None else hi)
    return lo, hi


def _good(env: Environment, params: LimitParams, x: int, k: int, simple: bool) -> bool:
    q4 = 4.0 * params.q_n
    j = x // params.c_n
    a, b = params.plan.triblock(j)
    a, b = max(a, env.left), min(b, env.right)
    logc = np.log(env.c[a - env.left: b - env.left + 1])
    keep = np.ones(len(logc), dtype=bool)
    for y in (x - 1, x + k):
        if a <= y <= b:
            keep[y - a] = False
    ok = bool(np.all(np.abs(logc[keep]) <= q4))
    if simple:
        ok = ok and math.log(env.c[x - env.left]) <= q4 and math.log(env.c[x - 1 - env.left]) >= -q4
    return ok


def _record(env, params, x, k, depth, simple) -> TrapRecord:
    atypical = False
    if simple:
        big = params.d_n * math.exp(-params.q_n ** 2)
        c_prev, c_here = env.c[x - 1 - env.left], env.c[x - env.left]
        is_well, is_wall = c_prev > big, 1.0 / c_here > big
        if is_well != is_wall:
            kind = TrapKind.WELL if is_well else TrapKind.WALL
        else:
            kind = TrapKind.WELL if c_prev >= 1.0 / c_here else TrapKind.WALL
            atypical = not is_well
    else:
        kind = TrapKind.WELL_AND_WALL
    return TrapRecord(int(x), kind, int(k), float(depth), _good(env, params, x, k, simple),
                      int(x // params.c_n), atypical)


def detect_traps(env: Environment, params: LimitParams, k_max: int | None = None,
                 lo: int | None = None, hi: int | None = None) -> list[TrapRecord]:
    """Traps with sites in ``[lo, hi]`` (default ``[0, n-1]``), sorted by ``(x, k)``.

    Simple traps are sites with ``rho_x`` above ``d_n e^-q_n``.  In the
    well-and-walls regime, pairs ``(x, k)`` with ``k <= k_max`` qualify when
    ``rho_x^(k)`` exceeds the same threshold while ``c_{x-1}`` and
    ``1/c_{x+k}`` both exceed ``e^(q_n^2)``.
    """
    lo, hi = _scan_range(env, params, lo, hi)
    if hi < lo:
        return []
    thr = params.trap_threshold
    lam = env.lam
    if params.regime is Regime.SIMPLE:
        c_prev = env.c[lo - 1 - env.left: hi - env.left]
        c_here = env.c[lo - env.left: hi - env.left + 1]
        e1 = float(np.exp(-lam))
        xs = np.nonzero(e1 * c_prev / c_here > thr)[0] + lo
        return [_record(env, params, x, 0, e1 * env.c[x - 1 - env.left] / env.c[x - env.left], True)
                for x in xs]
    if k_max is None:
        k_max = math.ceil(params.k_bound)
    big = math.exp(params.q_n ** 2)
    # candidate wells at x-1 and walls at x+k, then pair them within k_max
    wells = np.nonzero(env.c[lo - 1 - env.left: hi - env.left] > big)[0] + lo
    walls = np.nonzero(1.0 / env.c > big)[0] + env.left
    out = []
    for x in wells:
        a, b = np.searchsorted(walls, [x, x + k_max + 1])
        for y in walls[a:b]:
            depth = float(np.exp(-lam * (y - x + 1))) * env.c[x - 1 - env.left] / env.c[y - env.left]
            if depth > thr:
                out.append(_record(env, params, x, y - x, depth, False))
    return out


def brute_force_traps(env: Environment, params: LimitParams, k_max: int | None = None,
                      lo: int | None = None, hi: int | None = None) -> list[TrapRecord]:
    """Reference scan over the full ``(x, k)`` grid; same output as :func:`detect_traps`."""
    lo, hi = _scan_range(env, params, lo, hi)
    if hi < lo:
        return []
    simple = params.regime is Regime.SIMPLE
    if simple:
        k_max = 0
    elif k_max is None:
        k_max = math.ceil(params.k_bound)
    xs = np.arange(lo, hi + 1)
    ks = np.arange(k_max + 1)
    yy = xs[:, None] + ks[None, :]
    inside = yy <= env.right
    c_prev = env.c[xs - 1 - env.left][:, None]
    c_far = np.where(inside, env.c[np.minimum(yy, env.right) - env.left], np.inf)
    depth = np.exp(-env.lam * (ks[None, :] + 1)) * c_prev / c_far
    hit = depth > params.trap_threshold
    if not simple:
        big = math.exp(params.q_n ** 2)
        hit &= (c_prev > big) & (1.0 / c_far > big)
    out = []
    for i, k in zip(*np.nonzero(hit)):
        out.append(_record(env, params, xs[i], k, depth[i, k], simple))
    return out


# --------------------------------------------------------------------------
# census
# --------------------------------------------------------------------------

@dataclass
class CensusReport:
    trap_count: int
    min_pairwise_distance: float
    isolation_violation: bool
    max_depth: float
    depth_violation: bool
    max_k: int
    k_violation: bool
    all_good: bool
    atypical_count: int
    h_event_count: int
    wall_count: int = 0
    well_count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _max_depth(env, params, lo, hi, k_max):
    c_prev = env.c[lo - 1 - env.left: hi - env.left]
    best = -math.inf
    for k in range(k_max + 1):
        top = min(hi + k, env.right)
        m = top - k - lo + 1
        if m <= 0:
            break
        r = math.exp(-env.lam * (k + 1)) * c_prev[:m] / env.c[lo + k - env.left: top - env.left + 1]
        best = max(best, float(r.max()))
    return best


def _h_events(env, params, traps, lo, hi, k_max, delta):
    """Pairs ``(x, k)`` with ``rho_x^(k) > eps_n e^(-lambda k/2) d_n`` not covered by a trap."""
    eps = params.q_n ** (-delta)
    simple = params.regime is Regime.SIMPLE
    trap_sites = {t.x for t in traps}
    trap_pairs = {(t.x, t.k) for t in traps}
    c_prev = env.c[lo - 1 - env.left: hi - env.left]
    count = 0
    for k in range(1 if simple else 0, k_max + 1):
        top = min(hi + k, env.right)
        m = top - k - lo + 1
        if m <= 0:
            break
        r = math.exp(-env.lam * (k + 1)) * c_prev[:m] / env.c[lo + k - env.left: top - env.left + 1]
        for i in np.nonzero(r > eps * math.exp(-env.lam * k / 2) * params.d_n)[0]:
            x = lo + int(i)
            if simple:
                count += (x not in trap_sites) and (x + k not in trap_sites)
            else:
                count += (x, k) not in trap_pairs
    return count


def census(env: Environment, params: LimitParams, k_max: int | None = None,
           delta: float = 0.5, lo: int | None = None, hi: int | None = None) -> CensusReport:
    """Diagnostics of one environment: isolation, depth, distance ``k``, goodness.

    ``h_event_count`` counts large ``rho_x^(k)`` not explained by traps,
    with ``eps_n = q_n^-delta``.  Nothing is asserted here.
    """
    if k_max is None:
        k_max = math.ceil(params.k_bound)
    traps = detect_traps(env, params, k_max, lo, hi)
    lo_, hi_ = _scan_range(env, params, lo, hi)
    # distinct trap sites; several k at one site do not break isolation
    xs = np.unique([t.x for t in traps])
    if len(xs) >= 2:
        min_dist = float(np.diff(xs).min())
    else:
        min_dist = math.inf
    max_depth = _max_depth(env, params, lo_, hi_, 0 if params.regime is Regime.SIMPLE else k_max)
    max_k = max((t.k for t in traps), default=0)
    return CensusReport(
        trap_count=len(traps),
        min_pairwise_distance=min_dist,
        isolation_violation=bool(min_dist < params.n * math.exp(-5 * params.q_n)),
        max_depth=max_depth,
        depth_violation=bool(max_depth > params.d_n * math.exp(params.q_n)),
        max_k=int(max_k),
        k_violation=bool(max_k >= params.k_bound),
        all_good=all(t.in_good_triblock for t in traps),
        atypical_count=sum(t.atypical for t in traps),
        h_event_count=_h_events(env, params, traps, lo_, hi_, k_max, delta),
        wall_count=sum(t.kind is TrapKind.WALL for t in traps),
        well_count=sum(t.kind is TrapKind.WELL for t in traps),
    )
