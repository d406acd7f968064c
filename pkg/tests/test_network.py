import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birc.env import ConductanceLaw, Environment, TailSpec, constant_environment, sample_environment
from birc.network import (
    TruncationWarning, WindowChain, escape_prob, expected_hit_time, expected_hit_time_rho,
    hit_prob, killed_expected_hit_time, oracle_residual, oracle_solve, series_sum,
    stationary_weight, theta,
)

from suites import oracle_suite

LN2 = math.log(2)
LAW = ConductanceLaw(TailSpec(0.6), TailSpec(0.6))


def random_env(lam=0.5, left=-15, right=15, seed=0):
    return sample_environment(LAW, lam, left, right, seed)


# series and hitting probabilities -------------------------------------------

def test_series_sum_examples():
    env = constant_environment(LN2, -5, 5)
    assert series_sum(env, 0, 2) == pytest.approx(1.75, rel=1e-15)
    assert series_sum(env, 5, 4) == 0.0


def test_series_sum_additive():
    env = random_env()
    for i, m, j in [(-10, 0, 12), (-3, -3, 5), (2, 7, 8)]:
        whole = series_sum(env, i, j)
        assert series_sum(env, i, m) + series_sum(env, m + 1, j) == pytest.approx(whole, rel=1e-14)


def test_stationary_weight_constant():
    env = constant_environment(LN2, -5, 5)
    assert stationary_weight(env, 2) == pytest.approx(4 * (0.5 + 1), rel=1e-15)


def test_gamblers_ruin():
    assert hit_prob(constant_environment(0.0, -2, 6), 1, 0, 4) == pytest.approx(0.75, rel=1e-15)


def test_hit_prob_vanishes_with_strong_drift():
    vals = [hit_prob(constant_environment(lam, -2, 6), 1, 0, 4) for lam in (0.5, 2, 8, 30)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-12


def test_hit_prob_against_oracle_30_sites():
    env = random_env(0.5, 0, 29, seed=3)
    h = oracle_solve(WindowChain(env, 0, 29), "HitProb")
    for x in range(1, 29):
        assert hit_prob(env, x, 0, 29) == pytest.approx(h[x], rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(0.05, 2.0))
def test_hit_prob_harmonic_and_monotone(seed, lam):
    env = random_env(lam, -12, 12, seed)
    i, j = -10, 10
    h = np.array([1.0] + [hit_prob(env, x, i, j) for x in range(i + 1, j)] + [0.0])
    assert np.all(np.diff(h) <= 0)
    w = env.omega_array()[np.arange(i + 1, j) - env.left - 1]
    resid = h[1:-1] - (w * h[2:] + (1 - w) * h[:-2])
    assert np.max(np.abs(resid)) <= 1e-11


# expected hitting times -----------------------------------------------------

def test_expected_hit_time_closed_forms():
    env = constant_environment(LN2, -80, 80)
    assert expected_hit_time(env, 0, 1) == pytest.approx(3.0, rel=1e-9)
    assert expected_hit_time(env, 0, 2) == pytest.approx(6.0, rel=1e-9)
    assert expected_hit_time_rho(env, 0, 1) == pytest.approx(3.0, rel=1e-9)


@pytest.mark.filterwarnings("ignore::birc.network.TruncationWarning")
def test_expected_hit_time_against_oracle_40_sites():
    env = random_env(0.7, 0, 39, seed=11)
    m = oracle_solve(WindowChain(env, 0, 39, zero_left=True), "MeanTime")
    for x in (0, 5, 20, 38):
        assert expected_hit_time(env, x, 39) == pytest.approx(m[x], rel=1e-9)
        assert expected_hit_time_rho(env, x, 39) == pytest.approx(m[x], rel=1e-9)


def test_expected_hit_time_additive():
    env = random_env(1.0, -60, 30, seed=2)
    total = expected_hit_time(env, 0, 20)
    parts = expected_hit_time(env, 0, 7) + expected_hit_time(env, 7, 20)
    assert parts == pytest.approx(total, rel=1e-12)


def test_truncation_warning_on_short_window():
    env = constant_environment(0.05, -3, 10)
    with pytest.warns(TruncationWarning):
        expected_hit_time(env, 0, 5)


def test_expected_hit_time_needs_positive_bias():
    with pytest.raises(ValueError):
        expected_hit_time(constant_environment(0.0, -5, 5), 0, 1)


# killed expectation ----------------------------------------------------------

def test_killed_single_step():
    env = Environment(0.3, 0, 2, [2.0, 0.7, 1.0])
    p = env.omega_array()[0]        # omega at x = 1
    assert killed_expected_hit_time(env, 1, 0, 2) == pytest.approx(1 - p, rel=1e-14)


def test_killed_symmetric_oracle():
    env = constant_environment(0.0, -2, 6)
    g = oracle_solve(WindowChain(env, 0, 4), "KilledMeanTime")
    assert killed_expected_hit_time(env, 2, 0, 4) == pytest.approx(g[2], rel=1e-12)


def test_killed_against_simulation():
    light = ConductanceLaw(TailSpec(2.5), TailSpec(2.5), allow_ballistic=True)
    env = sample_environment(light, 0.4, -5, 20, 4)
    x, y, v = 3, 0, 15
    exact = killed_expected_hit_time(env, x, y, v)
    rng = np.random.default_rng(0)
    reps = 10**5
    pos = np.full(reps, x)
    t = np.zeros(reps)
    alive = np.ones(reps, dtype=bool)
    w = env.omega_array()
    while alive.any():
        idx = np.nonzero(alive)[0]
        step = np.where(rng.random(idx.size) < w[pos[idx] - env.left - 1], 1, -1)
        pos[idx] += step
        t[idx] += 1
        alive[idx] = (pos[idx] > y) & (pos[idx] < v)
    sample = np.where(pos == y, t, 0.0)
    assert abs(sample.mean() - exact) < 3 * sample.std() / math.sqrt(reps)


# escape probability and theta -------------------------------------------------

def test_escape_and_theta_constant_environment():
    env = constant_environment(LN2, -80, 80)
    assert escape_prob(env, 0, 60) == pytest.approx(0.5, rel=1e-9)
    assert theta(env, 0, 60) == pytest.approx(4.0, rel=1e-9)


def test_escape_prob_deep_well_formula():
    c = np.ones(21)
    c[10] = 1e12
    env = Environment(1.0, -10, 10, c)
    expect = 1 / (1 + 1e12 * sum(math.exp(-j) for j in range(1, 8)))
    assert escape_prob(env, 0, 8) == pytest.approx(expect, rel=1e-12)


def test_escape_prob_series_identity():
    env = random_env(0.8, -5, 40, seed=6)
    for x, h in [(0, 5), (3, 20), (-4, 30)]:
        comp = 1 - series_sum(env, x + 1, x + h - 1) / series_sum(env, x, x + h - 1)
        assert escape_prob(env, x, h) == pytest.approx(comp, rel=1e-12)


def test_escape_prob_decreasing_in_horizon():
    env = random_env(0.8, -5, 40, seed=6)
    vals = [escape_prob(env, 2, h) for h in range(1, 30)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_theta_deep_well():
    c = np.ones(21)
    c[9] = 1e9                      # c_{x-1} with x = 0
    env = Environment(1.0, -10, 10, c)
    assert abs(theta(env, 0, 8) - 2) < 1e-6


def test_theta_against_oracle():
    env = random_env(0.6, -30, 10, seed=8)
    h = 15
    m = oracle_solve(WindowChain(env, 5 - h, 5, zero_left=True), "MeanTime")
    assert theta(env, 5, h) == pytest.approx(1 + m[h - 1], rel=1e-9)


# oracle -----------------------------------------------------------------------

def test_oracle_mean_time_closed_form():
    env = constant_environment(LN2, -200, 20)
    m = oracle_solve(WindowChain(env, -200, 20, zero_left=True), "MeanTime")
    for x in (0, 10, 19):
        assert m[x + 200] == pytest.approx(3 * (20 - x), rel=1e-9)


def test_oracle_hit_prob_ruin():
    h = oracle_solve(WindowChain(constant_environment(0.0, -2, 6), 0, 4), "HitProb")
    assert h[1] == pytest.approx(0.75, rel=1e-15)


@pytest.mark.parametrize("kind", ["HitProb", "MeanTime", "KilledMeanTime"])
def test_oracle_residual_small(kind):
    env = random_env(1.5, -100, 100, seed=9)
    chain = WindowChain(env, -100, 100, zero_left=(kind == "MeanTime"))
    assert oracle_residual(chain, kind, oracle_solve(chain, kind)) <= 1e-11


def test_oracle_rejects_long_chain():
    env = constant_environment(1.0, -10, 200_000)
    with pytest.raises(ValueError):
        WindowChain(env, -10, 200_000)


def test_formula_oracle_suite():
    worst = oracle_suite(n_envs=30, seed=1)
    assert max(v for k, v in worst.items() if k != "residual") <= 1e-9
    assert worst["residual"] <= 1e-11
