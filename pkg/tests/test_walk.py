import math

import numpy as np
import pytest
from scipy import stats as sps

from birc.env import ConductanceLaw, Environment, TailSpec, constant_environment, sample_environment
from birc.network import expected_hit_time
from birc.stats import ks_one_sample, ks_two_sample
from birc.traps import TrapKind, TrapRecord, default_big_c
from birc.walk import (
    Engine, LeftEdgeHit, annealed_passage_times, ballistic_velocity, branching_passage,
    crossing_time_vs_tau, direct_passage, direct_positions, negative_binomial,
    passage_time_array, passage_times, reserve_for, sample_tau,
)

LN2 = math.log(2)
HEAVY = ConductanceLaw(TailSpec(0.7), TailSpec(0.7, gamma=1.0, t_min=math.e))


# direct engine ----------------------------------------------------------------

def test_first_step_parity():
    env = sample_environment(HEAVY, 1.0, -50, 5, 1)
    for r in range(50):
        rec = direct_passage(env, 1, 3, replica_id=r)
        assert rec.total_steps >= 1 and rec.total_steps % 2 == 1


@pytest.mark.parametrize("engine", ["direct", "branching"])
def test_constant_environment_mean(engine):
    env = constant_environment(LN2, -200, 20)
    t = passage_time_array(env, 20, 20_000, seed=5, engine=engine)
    assert abs(t.mean() - 60.0) <= 3 * t.std() / math.sqrt(t.size)


def test_records_match_fast_path():
    env = sample_environment(HEAVY, 1.0, -40, 30, 2)
    for engine in ("direct", "branching"):
        recs = passage_times(env, 30, 20, 7, engine)
        fast = passage_time_array(env, 30, 20, 7, engine)
        np.testing.assert_array_equal([r.total_steps for r in recs], fast)


def test_determinism():
    env = sample_environment(HEAVY, 1.0, -40, 30, 2)
    a = direct_passage(env, 30, 11, [0.5, 1.0], replica_id=4)
    b = direct_passage(env, 30, 11, [0.5, 1.0], replica_id=4)
    assert a == b
    assert branching_passage(env, 30, 11, [0.5, 1.0], 4) == branching_passage(env, 30, 11, [0.5, 1.0], 4)


def test_parity_and_lower_bound_all_replicas():
    env = sample_environment(HEAVY, 0.8, -60, 40, 3)
    t = passage_time_array(env, 40, 500, seed=1, engine="direct")
    assert np.all(t >= 40) and np.all(t % 2 == 0)


def test_checkpoints_non_decreasing():
    env = sample_environment(HEAVY, 0.8, -60, 40, 3)
    grid = [0.1, 0.25, 0.5, 0.75, 1.0]
    for engine in (direct_passage, branching_passage):
        rec = engine(env, 40, 2, grid, replica_id=0)
        assert [u for u, _ in rec.checkpoints] == grid
        if rec.joint_law:
            times = [t for _, t in rec.checkpoints]
            assert times == sorted(times)
        assert rec.checkpoints[-1][1] == rec.total_steps


def test_forced_right_walk():
    env = constant_environment(50.0, -5, 30)      # omega rounds to 1
    assert direct_passage(env, 30, 0).total_steps == 30
    assert branching_passage(env, 30, 0).total_steps == 30


def test_left_edge_extension_and_error():
    # tiny reserve: both engines must extend and still agree in law with a wide window
    law = ConductanceLaw(TailSpec(2.0), TailSpec(2.0), allow_ballistic=True)
    narrow = sample_environment(law, 0.2, -1, 10, 4)
    wide = sample_environment(law, 0.2, -400, 10, 4)
    a = direct_passage(narrow, 10, 9, replica_id=1)
    b = direct_passage(wide, 10, 9, replica_id=1)
    assert a.total_steps == b.total_steps
    fixed = Environment(0.2, -1, 10, narrow.c)     # no law/seed: cannot extend
    with pytest.raises(LeftEdgeHit):
        for r in range(200):
            direct_passage(fixed, 10, 9, replica_id=r)


def test_branching_extension_matches_wide_window():
    law = ConductanceLaw(TailSpec(2.0), TailSpec(2.0), allow_ballistic=True)
    narrow = sample_environment(law, 0.2, -1, 10, 4)
    wide = sample_environment(law, 0.2, -400, 10, 4)
    np.testing.assert_array_equal(passage_time_array(narrow, 10, 50, 3),
                                  passage_time_array(wide, 10, 50, 3))


def test_max_backtrack_is_drawdown():
    env = sample_environment(HEAVY, 1.0, -60, 20, 8)
    rec = direct_passage(env, 20, 1, replica_id=0)
    pos = direct_positions(env, np.arange(rec.total_steps + 1), 1, replica_id=0)
    drawdown = np.max(np.maximum.accumulate(pos) - pos)
    assert rec.max_backtrack == drawdown
    assert pos[-1] == 20 and np.all(pos[:-1] < 20)


# branching engine -------------------------------------------------------------

def test_engines_agree_in_law():
    pvals = []
    for s in range(3):
        env = sample_environment(HEAVY, 1.0, -reserve_for(50, 0.7, 1.0), 50, 100 + s)
        a = passage_time_array(env, 50, 3000, seed=1, engine="direct")
        b = passage_time_array(env, 50, 3000, seed=2, engine="branching")
        pvals.append(ks_two_sample(a, b)[1])
    assert min(pvals) > 0.01 / 3


def test_mean_matches_network_formula():
    law = ConductanceLaw(TailSpec(1.5), TailSpec(1.5), allow_ballistic=True)
    env = sample_environment(law, 0.8, -300, 30, 5)
    exact = expected_hit_time(env, 0, 30)
    for engine in ("direct", "branching"):
        t = passage_time_array(env, 30, 20_000, seed=3, engine=engine)
        assert abs(t.mean() - exact) <= 3 * t.std() / math.sqrt(t.size)


def test_branching_records_are_marginal():
    env = sample_environment(HEAVY, 1.0, -40, 30, 2)
    rec = branching_passage(env, 30, 1, [0.5, 1.0])
    assert rec.joint_law is False and rec.max_backtrack is None
    assert rec.engine is Engine.BRANCHING


# negative binomial ------------------------------------------------------------

@pytest.mark.parametrize("r,p", [(1, 0.5), (3, 0.25), (10, 0.9)])
def test_negative_binomial_pmf(r, p):
    n = 10**6
    x = negative_binomial(r, p, n, seed=1)
    kmax = int(sps.nbinom.ppf(0.999, r, p))
    obs = np.bincount(x[x <= kmax].astype(int), minlength=kmax + 1)
    pmf = sps.nbinom.pmf(np.arange(kmax + 1), r, p)
    sigma = np.sqrt(n * pmf * (1 - pmf))
    assert np.all(np.abs(obs - n * pmf) <= 3.5 * sigma)


def test_negative_binomial_large_shape():
    r, p = 1e6, 0.3
    x = negative_binomial(r, p, 200_000, seed=2)
    mean, var = r * (1 - p) / p, r * (1 - p) / p ** 2
    assert x.mean() == pytest.approx(mean, rel=5e-3)
    assert x.var() == pytest.approx(var, rel=5e-3)


# trap crossing law -------------------------------------------------------------

def test_sample_tau_means():
    for p, th, mean in [(1.0, 2.0, 2.0), (0.5, 4.0, 8.0)]:
        s = sample_tau(p, th, seed=3, size=10**5)
        assert s.xi == mean
        assert abs(s.tau.mean() - mean) <= 3 * s.tau.std() / math.sqrt(10**5)


def test_sample_tau_exponential_cdf():
    s = sample_tau(0.5, 4.0, seed=4, size=10**5)
    d, _ = ks_one_sample(s.tau, lambda t: 1 - np.exp(-t * 0.5 / 4.0))
    assert d < 0.01


def test_sample_tau_validation():
    with pytest.raises(ValueError):
        sample_tau(0.0, 2.0, 1)
    with pytest.raises(ValueError):
        sample_tau(0.5, 1.0, 1)


def _trap_env(lam, c_prev, c_here, c_n):
    left, right = -4 * c_n, 4 * c_n
    c = np.ones(right - left + 1)
    x = c_n + c_n // 2
    c[x - 1 - left] = c_prev
    c[x - left] = c_here
    env = Environment(lam, left, right, c)
    depth = math.exp(-lam) * c_prev / c_here
    return env, x, depth


def test_crossing_time_well_trap():
    c_n = 20
    env, x, depth = _trap_env(1.0, 1e6 * math.e, 1.0, c_n)
    trap = TrapRecord(x, TrapKind.WELL, 0, depth, True, 1)
    ratio, tau = crossing_time_vs_tau(env, trap, 5000, 1, c_n)
    assert ks_two_sample(ratio, tau)[0] < 0.05


def test_crossing_time_well_and_wall():
    c_n = 20
    env, x, depth = _trap_env(1.0, 1e6, 1e-6, c_n)
    trap = TrapRecord(x, TrapKind.WELL_AND_WALL, 0, depth, True, 1)
    ratio, tau = crossing_time_vs_tau(env, trap, 5000, 2, c_n)
    assert ks_two_sample(ratio, tau)[0] < 0.05


def test_crossing_time_shallow_trap_reported():
    c_n = 20
    env, x, depth = _trap_env(1.0, 10 * math.e, 1.0, c_n)
    trap = TrapRecord(x, TrapKind.WELL, 0, depth, True, 1)
    ratio, tau = crossing_time_vs_tau(env, trap, 500, 3, c_n)
    assert ratio.shape == tau.shape == (500,)


# velocity and annealed runs -------------------------------------------------------

def test_ballistic_velocity():
    law = ConductanceLaw(TailSpec(2.0), TailSpec(2.0), allow_ballistic=True)
    v = ballistic_velocity(law, 1.0)
    m = law.moment(1.0) * law.moment(-1.0)
    assert v == pytest.approx(1 / (1 + 2 * m * math.exp(-1) / (1 - math.exp(-1))))
    assert ballistic_velocity(HEAVY, 1.0) == 0.0
    # constant environment: 1 / E_0[T_1]
    unit = ConductanceLaw(TailSpec(50.0), TailSpec(50.0), allow_ballistic=True)
    assert ballistic_velocity(unit, LN2) == pytest.approx(1 / 3, rel=0.05)


def test_annealed_records_ordered_and_reproducible():
    a = annealed_passage_times(HEAVY, 1.0, 30, 12, seed=4, threads=3)
    b = annealed_passage_times(HEAVY, 1.0, 30, 12, seed=4, threads=1)
    assert [r.replica_id for r in a] == list(range(12))
    assert [r.total_steps for r in a] == [r.total_steps for r in b]


@pytest.mark.slow
def test_backtrack_diagnostic():
    law = ConductanceLaw(TailSpec(0.9), TailSpec(0.9))
    lam, n = 1.0, 10**4
    bound = default_big_c(law.alpha, lam) * math.log(n)
    over, total = 0, 0
    for e in range(100):
        env = sample_environment(law, lam, -reserve_for(n, law.alpha, lam), n, 500 + e)
        for r in passage_times(env, n, 5, seed=e, engine="direct"):
            over += r.max_backtrack > bound
            total += 1
    assert over / total <= 0.01
