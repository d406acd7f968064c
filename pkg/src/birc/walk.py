"""First-passage simulation: a direct stepper and an edge-crossing recursion.

Both engines produce ``T_n = inf{j >= 1 : X_j = n}`` for the walk started at
0 with exactly the same law.  The direct engine steps the walk; the
branching engine walks over space from ``n - 1`` leftwards, drawing for each
site the number of left jumps given the number of right jumps, which is
negative binomial.

Randomness comes from counter-based Philox streams keyed by
``(seed, tag, replica_id)``; walk streams never overlap environment streams.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numba as nb
import numpy as np

from .env import ConductanceLaw, Environment, extend_left, sample_environment
from .network import escape_prob, theta as theta_fn

__all__ = [
    "Engine",
    "LeftEdgeHit",
    "PassageRecord",
    "TrapLawSample",
    "aging_positions",
    "annealed_passage_times",
    "ballistic_velocity",
    "branching_passage",
    "crossing_time",
    "crossing_time_vs_tau",
    "direct_passage",
    "direct_positions",
    "negative_binomial",
    "passage_time_array",
    "passage_times",
    "reserve_for",
    "sample_tau",
    "walk_rng",
]

WALK_TAG = 0x57414C4B
TAU_TAG = 0x54415521
ENV_SEED_TAG = 0x454E5653

SMALL_R = 16            # below this, negative binomials are sums of geometrics
NORMAL_POISSON = 1e15   # Poisson means above this use the normal limit


class LeftEdgeHit(RuntimeError):
    """The walk (or the recursion) reached the left end of the window."""


class Engine(str, Enum):
    DIRECT = "direct"
    BRANCHING = "branching"


def walk_rng(seed: int, replica_id: int = 0, tag: int = WALK_TAG) -> np.random.Generator:
    """Per-replica Philox stream."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([int(seed), tag, int(replica_id)])))


@dataclass
class PassageRecord:
    """First-passage data of one replica.

    ``max_backtrack`` is the largest drawdown ``max_t (max_{s<=t} X_s - X_t)``
    before ``T_n``; the branching engine cannot see path order and reports
    ``None``.  Branching checkpoints are independent recursions, hence
    ``joint_law`` is ``False`` for that engine.
    """

    n: int
    checkpoints: list
    total_steps: int
    max_backtrack: int | None
    engine: Engine
    replica_id: int
    seed: int
    joint_law: bool = True
    min_site: int | None = None

    def rows(self):
        for u, t in self.checkpoints:
            yield {"replica_id": self.replica_id, "engine": self.engine.value, "n": self.n,
                   "u": u, "T": t, "max_backtrack": self.max_backtrack}


@dataclass
class TrapLawSample:
    p: float
    theta: float
    xi: float = field(init=False)
    tau: np.ndarray = None

    def __post_init__(self):
        self.xi = self.theta / self.p


# --------------------------------------------------------------------------
# compiled kernels
# --------------------------------------------------------------------------

@nb.njit(cache=True, nogil=True)
def _negbin(rng, r, rho, log_q):
    """Failures before ``r`` successes with success probability ``1/(1+rho)``.

    ``log_q`` is ``-log(1 + 1/rho)``, the log failure probability.
    """
    if r <= 0.0 or rho == 0.0:
        return 0.0
    if r <= SMALL_R and log_q < 0.0:
        tot = 0.0
        for _ in range(int(r)):
            # geometric number of failures: P(G >= k) = q^k
            tot += math.floor(math.log(1.0 - rng.random()) / log_q)
        return tot
    mean = rng.gamma(r, 1.0) * rho
    if mean > NORMAL_POISSON:
        return max(0.0, math.floor(mean + math.sqrt(mean) * rng.standard_normal() + 0.5))
    return float(rng.poisson(mean))


@nb.njit(cache=True, nogil=True)
def _negbin_batch(rng, r, rho, log_q, size):
    out = np.empty(size)
    for i in range(size):
        out[i] = _negbin(rng, r, rho, log_q)
    return out


@nb.njit(cache=True, nogil=True)
def _branch_kernel(rho, log_q, base, start, x, up, total, low, rng):
    """Edge-crossing recursion from site ``x`` leftwards.

    ``up`` is the number of right jumps from ``x``.  Returns
    ``(status, x, up, total, low)``; status 1 means the recursion needs
    ``rho`` at a site left of ``base``.
    """
    while True:
        if up == 0.0 and x < start:
            return 0, x, up, total, low
        if x < base:
            return 1, x, up, total, low
        i = x - base
        down = _negbin(rng, up, rho[i], log_q[i])
        total += up + down
        if x < low:
            low = x
        x -= 1
        up = down + 1.0 if x >= start else down


@nb.njit(cache=True, nogil=True)
def _direct_kernel(omega, base, targets, times, k, pos, t, top, dd, rng, max_steps):
    """Step the walk until every target has been hit.

    ``omega[x - base]`` is the right-jump probability at ``x``.  Returns
    ``(status, k, pos, t, top, dd)``; status 1 = left edge, 2 = step budget.
    """
    m = targets.shape[0]
    while k < m:
        if pos < base:
            return 1, k, pos, t, top, dd
        if t >= max_steps:
            return 2, k, pos, t, top, dd
        if rng.random() < omega[pos - base]:
            pos += 1
        else:
            pos -= 1
        t += 1
        if pos > top:
            top = pos
            while k < m and targets[k] == pos:
                times[k] = t
                k += 1
        elif top - pos > dd:
            dd = top - pos
    return 0, k, pos, t, top, dd


@nb.njit(cache=True, nogil=True)
def _position_kernel(omega, base, limit, times, out, k, pos, t, rng):
    """Record ``X_t`` at the sorted ``times``; status 1 = left edge, 3 = right edge."""
    m = times.shape[0]
    while k < m:
        while k < m and times[k] == t:
            out[k] = pos
            k += 1
        if k == m:
            break
        if pos < base:
            return 1, k, pos, t
        if pos >= limit:
            return 3, k, pos, t
        if rng.random() < omega[pos - base]:
            pos += 1
        else:
            pos -= 1
        t += 1
    return 0, k, pos, t


# --------------------------------------------------------------------------
# python drivers
# --------------------------------------------------------------------------

def negative_binomial(r: float, p: float, size: int, seed: int = 0) -> np.ndarray:
    """Draws of the failures before ``r`` successes (success probability ``p``).

    Uses the same sampler as the branching engine: geometric sums for
    ``r <= 16`` and a gamma-Poisson mixture above.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    rho = (1.0 - p) / p
    log_q = -math.log1p(1.0 / rho) if rho > 0 else -math.inf
    return _negbin_batch(walk_rng(seed, 0, 0x4E42), float(r), rho, log_q, int(size))


def _branch_arrays(env: Environment):
    return env.rho_array(), env.log_fail_array()


def _grid_targets(n: int, grid) -> tuple[np.ndarray, np.ndarray]:
    grid = np.asarray([1.0] if grid is None else grid, dtype=float)
    if np.any(grid <= 0) or np.any(grid > 1) or np.any(np.diff(grid) < 0):
        raise ValueError("checkpoint grid must be sorted in (0, 1]")
    targets = np.floor(grid * n).astype(np.int64)
    if targets[0] < 1:
        raise ValueError(f"checkpoint u={grid[0]} gives target 0 for n={n}")
    return grid, targets


def _extended(env: Environment, reason: str) -> Environment:
    if env.law is None or env.seed is None:
        raise LeftEdgeHit(f"{reason} at site {env.left} and the window cannot be extended")
    return extend_left(env, 2 * env.left - 1)


def _branching_time(env: Environment, start: int, target: int, rng):
    """One recursion for ``T_target`` started at ``start``; may extend ``env``."""
    rho, log_q = _branch_arrays(env)
    x, up, total, low = target - 1, 1.0, 0.0, target
    while True:
        status, x, up, total, low = _branch_kernel(
            rho, log_q, env.left + 1, start, x, up, total, low, rng)
        if status == 0:
            return total, low, env
        env = _extended(env, "branching recursion")
        rho, log_q = _branch_arrays(env)


def branching_passage(env: Environment, n: int, seed: int, checkpoints_grid=None,
                      replica_id: int = 0) -> PassageRecord:
    """Passage record from the edge-crossing recursion.

    The conductance window must cover ``[left, n]`` with ``left < 0``; if the
    recursion reaches ``left`` the environment is extended deterministically
    (when it carries its law and seed) and the recursion continues.
    """
    if not env.lam > 0:
        raise ValueError("the branching engine needs lambda > 0")
    if n > env.right:
        raise ValueError("window must reach n")
    grid, targets = _grid_targets(n, checkpoints_grid)
    rng = walk_rng(seed, replica_id)
    cps = []
    low_all = 0
    total = 0.0
    for u, tgt in zip(grid, targets):
        total, low, env = _branching_time(env, 0, int(tgt), rng)
        low_all = min(low_all, low)
        cps.append((float(u), int(total)))
    if targets[-1] != n:
        total, low, env = _branching_time(env, 0, n, rng)
        low_all = min(low_all, low)
    return PassageRecord(n, cps, int(total), None, Engine.BRANCHING, replica_id, seed,
                         joint_law=False, min_site=int(low_all))


def direct_passage(env: Environment, n: int, seed: int, checkpoints_grid=None,
                   replica_id: int = 0, max_steps: int = 2**62) -> PassageRecord:
    """Passage record from step-by-step simulation.

    On a left-edge hit the window is extended (if the environment carries
    its law and seed) and the walk resumes from where it stopped; otherwise
    :class:`LeftEdgeHit` is raised.
    """
    if n > env.right:
        raise ValueError("window must reach n")
    grid, targets = _grid_targets(n, checkpoints_grid)
    if targets[-1] != n:
        targets = np.append(targets, n)
    times = np.zeros(len(targets), dtype=np.int64)
    rng = walk_rng(seed, replica_id)
    k, pos, t, top, dd = 0, 0, 0, 0, 0
    while True:
        omega = env.omega_array()
        status, k, pos, t, top, dd = _direct_kernel(
            omega, env.left + 1, targets, times, k, pos, t, top, dd, rng, max_steps)
        if status == 0:
            break
        if status == 2:
            raise RuntimeError(f"step budget {max_steps} exhausted before T_{n}")
        env = _extended(env, "walk")
    cps = [(float(u), int(times[i])) for i, u in enumerate(grid)]
    return PassageRecord(n, cps, int(times[-1]), int(dd), Engine.DIRECT, replica_id, seed,
                         joint_law=True, min_site=None)


def direct_positions(env: Environment, times, seed: int, replica_id: int = 0) -> np.ndarray:
    """Positions ``X_t`` of one walk at the sorted integer ``times``.

    The right end of the window must exceed ``max(times)``; the left end is
    extended on demand as in :func:`direct_passage`.
    """
    times = np.asarray(times, dtype=np.int64)
    if np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be sorted and non-negative")
    out = np.zeros(len(times), dtype=np.int64)
    rng = walk_rng(seed, replica_id)
    k, pos, t = 0, 0, 0
    while True:
        status, k, pos, t = _position_kernel(env.omega_array(), env.left + 1, env.right,
                                             times, out, k, pos, t, rng)
        if status == 0:
            return out
        if status == 3:
            raise ValueError("walk reached the right end of the window")
        env = _extended(env, "walk")


def passage_times(env: Environment, n: int, replicas: int, seed: int,
                  engine: Engine | str = Engine.BRANCHING, checkpoints_grid=None,
                  threads: int = 1, first_replica: int = 0) -> list[PassageRecord]:
    """Quenched passage records: one environment, independent walks."""
    engine = Engine(engine)
    run = direct_passage if engine is Engine.DIRECT else branching_passage
    ids = range(first_replica, first_replica + replicas)

    def one(r):
        return run(env, n, seed, checkpoints_grid, replica_id=r)

    if threads <= 1:
        return [one(r) for r in ids]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, ids))


def passage_time_array(env: Environment, n: int, replicas: int, seed: int,
                       engine: Engine | str = Engine.BRANCHING,
                       first_replica: int = 0) -> np.ndarray:
    """``T_n`` for replicas ``first_replica, ...`` on one environment, as floats.

    Same streams as :func:`passage_times` without building records.
    """
    engine = Engine(engine)
    out = np.empty(replicas)
    if engine is Engine.BRANCHING:
        for i in range(replicas):
            out[i], _, env = _branching_time(env, 0, n, walk_rng(seed, first_replica + i))
        return out
    targets = np.array([n], dtype=np.int64)
    times = np.zeros(1, dtype=np.int64)
    for i in range(replicas):
        rng = walk_rng(seed, first_replica + i)
        k, pos, t, top, dd = 0, 0, 0, 0, 0
        while True:
            status, k, pos, t, top, dd = _direct_kernel(
                env.omega_array(), env.left + 1, targets, times, k, pos, t, top, dd, rng,
                2**62)
            if status == 0:
                break
            env = _extended(env, "walk")
        out[i] = times[0]
    return out


def reserve_for(n: int, alpha: float, lam: float, big_c: float | None = None) -> int:
    """Left guard band ``4 C_n`` with ``C_n = ceil(big_c log n)``."""
    if big_c is None:
        big_c = (3.0 + 3.0 / alpha) / lam
    return 4 * math.ceil(big_c * math.log(max(n, 3)))


def env_seed(seed: int, replica_id: int) -> int:
    """Environment seed of an annealed replica."""
    ss = np.random.SeedSequence([int(seed), ENV_SEED_TAG, int(replica_id)])
    return int(ss.generate_state(2, np.uint32).astype(np.uint64) @ np.array([1, 2**32], np.uint64))


def annealed_passage_times(law: ConductanceLaw, lam: float, n: int, replicas: int,
                           seed: int, engine: Engine | str = Engine.BRANCHING,
                           checkpoints_grid=None, threads: int = 1,
                           reserve: int | None = None, first_replica: int = 0):
    """Passage records with a fresh environment per replica.

    Returns a list of :class:`PassageRecord`, ordered by replica id.
    """
    engine = Engine(engine)
    run = direct_passage if engine is Engine.DIRECT else branching_passage
    if reserve is None:
        reserve = reserve_for(n, law.alpha, lam)

    def one(r):
        env = sample_environment(law, lam, -reserve, n, env_seed(seed, r))
        return run(env, n, seed, checkpoints_grid, replica_id=r)

    ids = range(first_replica, first_replica + replicas)
    if threads <= 1:
        return [one(r) for r in ids]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(one, ids))


def aging_positions(law, lam, n, hs, replicas, seed, first_replica=0):
    """``X_n`` and ``X_{floor(h n)}`` per replica, fresh environment each.

    Returns an array of shape ``(replicas, 1 + len(hs))``.
    """
    times = np.array([n] + [int(math.floor(h * n)) for h in hs], dtype=np.int64)
    reserve = reserve_for(n, law.alpha, lam)
    out = np.empty((replicas, len(times)), dtype=np.int64)
    for i, r in enumerate(range(first_replica, first_replica + replicas)):
        env = sample_environment(law, lam, -reserve, int(times.max()) + 1, env_seed(seed, r))
        out[i] = direct_positions(env, times, seed, replica_id=r)
    return out


# --------------------------------------------------------------------------
# trap crossing
# --------------------------------------------------------------------------

def sample_tau(p: float, theta: float, seed: int, size: int = 1) -> TrapLawSample:
    """Crossing-law draws ``tau = (theta / p) E`` with ``E ~ Exp(1)``."""
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if not theta >= 2:
        raise ValueError("theta must be >= 2")
    s = TrapLawSample(p, theta)
    s.tau = s.xi * walk_rng(seed, 0, TAU_TAG).standard_exponential(size)
    return s


def crossing_time(env: Environment, start: int, end: int, replicas: int, seed: int) -> np.ndarray:
    """Independent draws of the passage time from ``start`` to ``end``."""
    out = np.empty(replicas)
    for r in range(replicas):
        out[r], _, env = _branching_time(env, start, end, walk_rng(seed, r))
    return out


def crossing_time_vs_tau(env: Environment, trap, replicas: int, seed: int, c_n: int,
                         well_and_wall: bool | None = None):
    """Paired samples ``(T(B) / rho_B, tau_B)`` for a detected trap.

    ``T(B)`` is the time to go from ``j c_n`` to ``(j + 2) c_n`` where ``j``
    is the trap's triblock index.  For simple traps ``tau_B`` has mean
    ``theta_B / p_B`` evaluated at horizon ``c_n``; for well-and-wall traps
    the reference law is ``2 Exp(1)``.
    """
    j = trap.triblock_index
    start, end = j * c_n, (j + 2) * c_n
    if start < env.left + 1 or end > env.right:
        raise ValueError("trap triblock not inside the window")
    ratio = crossing_time(env, start, end, replicas, seed) / trap.depth
    if well_and_wall is None:
        well_and_wall = trap.kind.value == "WellAndWall"
    if well_and_wall:
        tau = 2.0 * walk_rng(seed, 0, TAU_TAG).standard_exponential(replicas)
    else:
        x = trap.x + trap.k
        p = escape_prob(env, x, c_n)
        th = theta_fn(env, x, min(c_n, x - env.left))
        tau = sample_tau(p, th, seed, replicas).tau
    return ratio, tau


def ballistic_velocity(law: ConductanceLaw, lam: float) -> float:
    """``1 / (1 + 2 E[c] E[1/c] e^-lambda / (1 - e^-lambda))``; 0 if a moment diverges."""
    m1, m_1 = law.moment(1.0), law.moment(-1.0)
    if math.isinf(m1) or math.isinf(m_1):
        return 0.0
    q = math.exp(-lam)
    return 1.0 / (1.0 + 2.0 * m1 * m_1 * q / (1.0 - q))
