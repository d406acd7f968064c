"""Resistor-network identities for the biased conductance walk.

All quantities live on a finite :class:`~birc.env.Environment` window.
Tilted conductances ``c_x^l = e^(lambda x) c_x`` are never formed
explicitly: every routine rescales by ``e^(-lambda r)`` for a local
reference site ``r`` so that windows far from the origin do not overflow.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .env import BoundaryError, Environment

__all__ = [
    "OracleKind",
    "TruncationWarning",
    "WindowChain",
    "escape_prob",
    "expected_hit_time",
    "expected_hit_time_rho",
    "hit_prob",
    "killed_expected_hit_time",
    "oracle_residual",
    "oracle_solve",
    "series_sum",
    "stationary_weight",
    "theta",
]


class TruncationWarning(RuntimeWarning):
    """The window's left edge cuts off a non-negligible part of a sum."""


def _check(env: Environment, lo: int, hi: int):
    if lo < env.left or hi > env.right:
        raise BoundaryError(f"sites [{lo}, {hi}] not inside [{env.left}, {env.right}]")


def _inv_tilt(env: Environment, lo: int, hi: int, ref: int) -> np.ndarray:
    """``e^(-lambda (l - ref)) / c_l`` for ``l = lo..hi``."""
    ell = np.arange(lo, hi + 1)
    return np.exp(-env.lam * (ell - ref)) / env.c[lo - env.left: hi - env.left + 1]


def _scaled_series(env: Environment, i: int, j: int, ref: int) -> float:
    if j < i:
        return 0.0
    return math.fsum(_inv_tilt(env, i, j, ref))


def series_sum(env: Environment, i: int, j: int) -> float:
    """Series resistance ``S(i, j) = sum_{l=i}^{j} 1 / c_l^lambda``.

    Returns 0 for the empty range ``j = i - 1``.
    """
    if j < i:
        if j == i - 1:
            return 0.0
        raise ValueError("series_sum needs j >= i - 1")
    _check(env, i, j)
    return _scaled_series(env, i, j, i) * math.exp(-env.lam * i)


def stationary_weight(env: Environment, z: int) -> float:
    """``pi(z) = c_{z-1}^lambda + c_z^lambda`` (left edge conductance taken as 0)."""
    _check(env, z, z)
    prev = env.c[z - 1 - env.left] if z > env.left else 0.0
    return math.exp(env.lam * z) * (math.exp(-env.lam) * prev + env.c[z - env.left])


def hit_prob(env: Environment, x: int, i: int, j: int) -> float:
    """``P_x(T_i < T_j) = S(x, j-1) / S(i, j-1)`` for ``i < x < j``."""
    if not i < x < j:
        raise ValueError("hit_prob needs i < x < j")
    _check(env, i, j)
    return _scaled_series(env, x, j - 1, i) / _scaled_series(env, i, j - 1, i)


def _suffix_series(env: Environment, lo: int, y: int) -> np.ndarray:
    """``e^(lambda z) S(z, y-1)`` for ``z = lo..y`` (last entry 0).

    Backward recursion over positive terms, so each entry carries a
    relative error of at most a few ulps per site.
    """
    inv_c = 1.0 / env.c[lo - env.left: y - env.left]
    out = np.zeros(y - lo + 1)
    q = math.exp(-env.lam)
    acc = 0.0
    for k in range(y - lo - 1, -1, -1):
        acc = inv_c[k] + q * acc
        out[k] = acc
    return out


def _left_conductances(env: Environment, lo: int, hi: int) -> np.ndarray:
    """``c_{z-1}`` for ``z = lo..hi`` with the conductance left of the window set to 0."""
    out = np.empty(hi - lo + 1)
    out[1:] = env.c[lo - env.left: hi - env.left]
    out[0] = env.c[lo - 1 - env.left] if lo > env.left else 0.0
    return out


def expected_hit_time(env: Environment, x: int, y: int, rel_tol: float = 1e-12) -> float:
    """Mean first-passage time ``E_x[T_y]`` for ``x < y``.

    Evaluates

        sum_{z <= x} pi(z) S(x, y-1) + sum_{x < z < y} pi(z) S(z, y-1)

    with the first sum cut at the window's left edge.  The result is exact
    for the environment whose conductances left of the window vanish; a
    :class:`TruncationWarning` is emitted when a geometric bound on the
    discarded part exceeds ``rel_tol`` times the result.
    """
    if not x < y:
        raise ValueError("expected_hit_time needs x < y")
    if not env.lam > 0:
        raise ValueError("expected hitting times are infinite for lambda <= 0")
    _check(env, x, y)
    lo = env.left
    q = math.exp(-env.lam)
    s_hat = _suffix_series(env, lo, y)              # e^(lambda z) S(z, y-1)
    c_prev = _left_conductances(env, lo, y - 1)
    c_here = env.c[lo - env.left: y - env.left]
    pi_hat = q * c_prev + c_here                   # e^(-lambda z) pi(z)
    kx = x - lo
    # z <= x:  pi(z) S(x, y-1) = pi_hat(z) e^(lambda (z - x)) s_hat(x)
    decay = np.exp(-env.lam * (kx - np.arange(kx + 1)))
    left_part = math.fsum(pi_hat[: kx + 1] * decay) * s_hat[kx]
    right_part = math.fsum(pi_hat[kx + 1:] * s_hat[kx + 1: y - lo])
    total = left_part + right_part
    bound = 2.0 * float(env.c.max()) * math.exp(-env.lam * (kx + 1)) / (1.0 - q) * s_hat[kx]
    if bound > rel_tol * total:
        warnings.warn(
            f"left window edge at {env.left} may truncate E_{x}[T_{y}] "
            f"(bound {bound:.3g} vs value {total:.3g})", TruncationWarning, stacklevel=2)
    return total


def expected_hit_time_rho(env: Environment, x: int, y: int) -> float:
    """Cross-check of :func:`expected_hit_time` through the ``rho^(k)`` double sum.

    ``(y-x) + 2 sum_{z<x} sum_{k=x-z}^{y-1-z} rho_z^(k) + 2 sum_{z=x}^{y-1} sum_{k=0}^{y-1-z} rho_z^(k)``,
    with the conductance left of the window set to zero.  Quadratic cost.
    """
    if not x < y:
        raise ValueError("needs x < y")
    _check(env, x, y)
    lo = env.left
    c_prev = _left_conductances(env, lo, y - 1)
    terms = []
    for z in range(lo, y):
        k0 = max(0, x - z)
        k = np.arange(k0, y - z)
        rk = np.exp(-env.lam * (k + 1)) * c_prev[z - lo] / env.c[z + k - env.left]
        terms.extend(rk.tolist())
    return (y - x) + 2.0 * math.fsum(terms)


def killed_expected_hit_time(env: Environment, x: int, y: int, v: int) -> float:
    """``E_x[T_y 1{T_y < T_v}]`` for ``y < x < v``.

    Uses the Green-function form: the effective conductance between ``x``
    and ``{y, v}`` normalises ``sum_{y<z<v} pi(z) P_z(T_x < T_y ^ T_v) P_z(T_y < T_v)``.
    """
    if not y < x < v:
        raise ValueError("needs y < x < v")
    _check(env, y, v)
    ref = x
    s_yx = _scaled_series(env, y, x - 1, ref)        # S(y, x-1)
    s_xv = _scaled_series(env, x, v - 1, ref)        # S(x, v-1)
    s_yv = s_yx + s_xv
    inv = _inv_tilt(env, y, v - 1, ref)             # 1/c_l^lambda, l = y..v-1
    # prefix[k] = S(y, y+k-1), suffix[k] = S(y+k, v-1)
    prefix = np.concatenate(([0.0], np.cumsum(inv)))
    suffix = np.concatenate((np.cumsum(inv[::-1])[::-1], [0.0]))
    c_eff = 1.0 / s_yx + 1.0 / s_xv
    terms = []
    q = math.exp(-env.lam)
    for z in range(y + 1, v):
        k = z - y
        # pi(z) e^(-lambda ref)
        pi_z = math.exp(env.lam * (z - ref)) * (q * env.c[z - 1 - env.left] + env.c[z - env.left])
        if z < x:
            reach_x = prefix[k] / s_yx                 # S(y, z-1) / S(y, x-1)
        elif z == x:
            reach_x = 1.0
        else:
            reach_x = suffix[k] / s_xv                 # S(z, v-1) / S(x, v-1)
        to_y = suffix[k] / s_yv                        # S(z, v-1) / S(y, v-1)
        terms.append(pi_z * reach_x * to_y)
    return math.fsum(terms) / c_eff


def escape_prob(env: Environment, x: int, horizon: int) -> float:
    """``P_{x+1}(T_{x+horizon} < T_x) = (1/c_x^l) / S(x, x+horizon-1)``.

    Equivalently ``(1 + c_x sum_{j=1}^{horizon-1} e^(-lambda j) / c_{x+j})^-1``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    _check(env, x, x + horizon)
    return 1.0 / math.fsum(env.c[x - env.left] * _inv_tilt(env, x, x + horizon - 1, x))


def theta(env: Environment, x: int, horizon: int) -> float:
    """Mean return-cycle time at ``x`` with conductances left of ``x-horizon`` removed.

    ``2 + (2/c_{x-1}) sum_{l=x-horizon}^{x-2} c_l e^(-lambda (x-1-l))``, which
    equals ``1 + E_{x-1}[T_x]`` on that truncated environment.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    _check(env, x - horizon, x)
    ell = np.arange(x - horizon, x - 1)
    w = env.c[ell - env.left] * np.exp(-env.lam * (x - 1 - ell))
    return 2.0 + 2.0 * math.fsum(w) / env.c[x - 1 - env.left]


# --------------------------------------------------------------------------
# Linear-system oracle
# --------------------------------------------------------------------------

class OracleKind(str, Enum):
    HIT_PROB = "HitProb"
    MEAN_TIME = "MeanTime"
    KILLED_MEAN_TIME = "KilledMeanTime"


@dataclass(frozen=True)
class WindowChain:
    """The walk restricted to ``[i, j]``.

    Both ends are absorbing unless ``zero_left`` is set, in which case the
    conductance left of ``i`` is removed and ``i`` reflects.
    """

    env: Environment
    i: int
    j: int
    zero_left: bool = False

    def __post_init__(self):
        if not self.i < self.j:
            raise ValueError("WindowChain needs i < j")
        _check(self.env, self.i, self.j)
        if self.j - self.i + 1 > 100_000:
            raise ValueError("oracle chains are limited to 1e5 sites")

    def step_probs(self):
        """``(p_left, p_right)`` for sites ``i..j`` (end rows are placeholders)."""
        env = self.env
        lo = max(self.i, env.left + 1)
        r = math.exp(-env.lam) * env.c[lo - 1 - env.left: self.j - env.left] \
            / env.c[lo - env.left: self.j - env.left + 1]
        r = np.concatenate((np.zeros(lo - self.i), r))
        p_left = r / (1.0 + r)
        p_right = 1.0 / (1.0 + r)
        if self.zero_left:
            p_left[0], p_right[0] = 0.0, 1.0
        return p_left, p_right


def _eliminate(p_left, p_right, f, left_value, right_value, reflect_left):
    """Solve ``u_z = p_right u_{z+1} + p_left u_{z-1} + f_z`` on the interior.

    Forward elimination writes ``u_z = a_z + b_z u_{z+1}`` and tracks the
    slack ``s_z = 1 - b_z`` directly, so every pivot ``p_right + p_left s``
    is a sum of non-negative terms and no cancellation occurs.
    """
    m = len(f)
    a = np.zeros(m)
    b = np.zeros(m)
    if reflect_left:
        a[0], b[0], s = f[0], 1.0, 0.0
    else:
        a[0], b[0], s = left_value, 0.0, 1.0
    for z in range(1, m - 1):
        piv = p_right[z] + p_left[z] * s
        if piv == 0.0:
            raise ZeroDivisionError(
                f"row {z}: the walk cannot move right and its left side reflects")
        a[z] = (f[z] + p_left[z] * a[z - 1]) / piv
        b[z] = p_right[z] / piv
        s = p_left[z] * s / piv
    u = np.empty(m)
    u[-1] = right_value
    for z in range(m - 2, -1, -1):
        u[z] = a[z] + b[z] * u[z + 1]
    return u


def oracle_solve(chain: WindowChain, kind: OracleKind | str, target: str = "left") -> np.ndarray:
    """Ground-truth values on ``chain.i .. chain.j`` by tridiagonal elimination.

    Parameters
    ----------
    chain : WindowChain
    kind : OracleKind
        ``HitProb``: ``P_z(T_i < T_j)`` (or ``P_z(T_j < T_i)`` with
        ``target="right"``).  ``MeanTime``: ``E_z[T_j]``; the left end is
        absorbing at value 0 unless ``chain.zero_left`` makes it reflect.
        ``KilledMeanTime``: ``E_z[T_i 1{T_i < T_j}]``.
    target : {"left", "right"}
        Only used by ``HitProb``.

    Returns
    -------
    ndarray
        One value per site of the chain, boundary values included.
    """
    kind = OracleKind(kind)
    p_left, p_right = chain.step_probs()
    m = chain.j - chain.i + 1
    if kind is OracleKind.HIT_PROB:
        lv, rv = (1.0, 0.0) if target == "left" else (0.0, 1.0)
        return _eliminate(p_left, p_right, np.zeros(m), lv, rv, False)
    if kind is OracleKind.MEAN_TIME:
        return _eliminate(p_left, p_right, np.ones(m), 0.0, 0.0, chain.zero_left)
    h = _eliminate(p_left, p_right, np.zeros(m), 1.0, 0.0, False)
    f = h.copy()
    f[0] = f[-1] = 0.0
    return _eliminate(p_left, p_right, f, 0.0, 0.0, False)


def oracle_residual(chain: WindowChain, kind: OracleKind | str, u: np.ndarray,
                    target: str = "left") -> float:
    """Largest relative residual of the first-step recursion over interior rows."""
    kind = OracleKind(kind)
    p_left, p_right = chain.step_probs()
    m = len(u)
    if kind is OracleKind.HIT_PROB:
        f = np.zeros(m)
    elif kind is OracleKind.MEAN_TIME:
        f = np.ones(m)
    else:
        f = oracle_solve(chain, OracleKind.HIT_PROB)
    first = 0 if (kind is OracleKind.MEAN_TIME and chain.zero_left) else 1
    z = np.arange(first, m - 1)
    u_left = np.where(z > 0, u[np.maximum(z - 1, 0)], 0.0)
    lhs = u[z]
    rhs = p_right[z] * u[z + 1] + p_left[z] * u_left + f[z]
    scale = np.abs(lhs) + np.abs(rhs) + np.finfo(float).tiny
    return float(np.max(np.abs(lhs - rhs) / scale)) if z.size else 0.0
