import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from birc.env import (
    BoundaryError, ConductanceLaw, ConstructionError, Environment, Regime, ResourceError,
    TailSpec, constant_environment, extend_left, load_environment, omega, quantile, rho,
    rho_k, sample_environment, save_environment, survival,
)


def binomial_ok(hits, n, p, sigmas=3.0):
    return abs(hits / n - p) <= sigmas * math.sqrt(p * (1 - p) / n)


# quantile -----------------------------------------------------------------

def test_quantile_pareto_closed_form():
    assert quantile(TailSpec(2.0), 0.25) == pytest.approx(2.0, rel=1e-15)


def test_quantile_near_one_returns_t_min():
    assert quantile(TailSpec(1.0), 1.0 - 1e-15) == pytest.approx(1.0, abs=1e-12)


def test_quantile_log_corrected_residual():
    spec = TailSpec(0.5, gamma=1.0, t_min=math.e)
    t = quantile(spec, 0.01)
    assert (1 + math.log(t)) * t ** -0.5 == pytest.approx(0.01, abs=1e-12)
    assert abs(survival(spec, t) - 0.01) <= 1e-12


@pytest.mark.parametrize("spec", [
    TailSpec(0.7),
    TailSpec(0.4, gamma=-2.0, k_scale=3.0, t_min=10.0),
    TailSpec(1.3, gamma=0.5, t_min=5.0),
])
def test_survival_quantile_round_trip(spec):
    u = np.concatenate([np.geomspace(1e-12, 0.5, 40), np.linspace(0.5, 0.999, 20)])
    assert np.max(np.abs(survival(spec, quantile(spec, u)) - u)) <= 1e-10


def test_quantile_rejects_bad_probability():
    with pytest.raises(ValueError):
        quantile(TailSpec(1.0), 1.0)


def test_tailspec_validation():
    with pytest.raises(ConstructionError):
        TailSpec(-1.0)
    with pytest.raises(ConstructionError):
        TailSpec(1.0, t_min=0.5)
    # (1 + log t)^3 t^-0.5 increases until t = e^5
    with pytest.raises(ConstructionError, match="t_min"):
        TailSpec(0.5, gamma=3.0)


# laws ---------------------------------------------------------------------

def test_regime_classification():
    assert ConductanceLaw(TailSpec(0.5), TailSpec(0.5)).regime is Regime.WELL_AND_WALLS
    assert ConductanceLaw(TailSpec(0.5), TailSpec(0.8)).regime is Regime.SIMPLE
    # borderline gamma < -1 makes the alpha-moment finite
    law = ConductanceLaw(TailSpec(0.5, gamma=-2.0), TailSpec(0.5))
    assert law.regime is Regime.SIMPLE


def test_gamma_minus_one_rejected_when_alphas_match():
    with pytest.raises(ConstructionError):
        ConductanceLaw(TailSpec(0.5, gamma=-1.0), TailSpec(0.5))


def test_ballistic_needs_flag():
    with pytest.raises(ConstructionError):
        ConductanceLaw(TailSpec(2.0), TailSpec(3.0))
    assert ConductanceLaw(TailSpec(2.0), TailSpec(3.0), allow_ballistic=True).alpha == 2.0


def test_moments_pareto():
    # pure Pareto(alpha) on [1, inf): E[Y^a] = alpha / (alpha - a)
    law = ConductanceLaw(TailSpec(2.0), TailSpec(3.0), p_upper=1.0, allow_ballistic=True)
    assert law.moment(1.0) == pytest.approx(2.0, rel=1e-10)
    assert law.moment(-1.0) == pytest.approx(2.0 / 3.0, rel=1e-10)
    assert math.isinf(law.moment(2.0))


def test_moment_matches_monte_carlo():
    law = ConductanceLaw(TailSpec(1.5, gamma=-0.5, t_min=3.0), TailSpec(2.5, t_min=2.0),
                         p_upper=0.3, allow_ballistic=True)
    c = law.draw(np.random.default_rng(5), 10**6)
    for a in (0.5, -0.7):
        x = c ** a
        assert abs(x.mean() - law.moment(a)) < 4 * x.std() / 1e3


def test_law_dict_round_trip():
    law = ConductanceLaw(TailSpec(0.6, 1.0, 2.0, 10.0), TailSpec(0.9), 0.3)
    assert ConductanceLaw.from_dict(law.to_dict()) == law


# sampling -----------------------------------------------------------------

def test_sampling_is_deterministic():
    law = ConductanceLaw(TailSpec(0.7), TailSpec(0.7))
    a = sample_environment(law, 1.0, -10, 10, 42)
    b = sample_environment(law, 1.0, -10, 10, 42)
    np.testing.assert_array_equal(a.c, b.c)
    assert not np.array_equal(a.c, sample_environment(law, 1.0, -10, 10, 43).c)


def test_pareto_tail_probability():
    law = ConductanceLaw(TailSpec(2.0), TailSpec(2.0), p_upper=1.0, allow_ballistic=True)
    env = sample_environment(law, 1.0, 0, 10**6 - 1, 7)
    assert binomial_ok(int((env.c > 2).sum()), env.c.size, 0.25)


def test_mixture_split_at_one():
    law = ConductanceLaw(TailSpec(0.7), TailSpec(0.7))
    env = sample_environment(law, 1.0, 0, 10**6 - 1, 8)
    assert binomial_ok(int((env.c >= 1).sum()), env.c.size, 0.5)


def test_empirical_tail_matches_survival():
    law = ConductanceLaw(TailSpec(0.8, gamma=0.5, t_min=2.0), TailSpec(0.6, gamma=-1.5), 0.4)
    c = sample_environment(law, 1.0, 0, 10**6 - 1, 9).c
    for u in (0.5, 2.0, 10.0, 100.0, 1e4):
        assert binomial_ok(int((c <= u).sum()), c.size, float(law.cdf(u)))


def test_wider_window_extends_narrower():
    law = ConductanceLaw(TailSpec(0.7), TailSpec(0.7))
    small = sample_environment(law, 1.0, -20, 30, 3)
    big = sample_environment(law, 1.0, -50, 80, 3)
    np.testing.assert_array_equal(big.c[30:81], small.c)
    ext = extend_left(small, -50)
    np.testing.assert_array_equal(ext.c, big.c[: ext.c.size])


def test_window_validation_and_budget():
    law = ConductanceLaw(TailSpec(0.7), TailSpec(0.7))
    with pytest.raises(ConstructionError):
        sample_environment(law, 1.0, 1, 10, 0)
    with pytest.raises(ResourceError):
        sample_environment(law, 1.0, -10**9, 10, 0)
    with pytest.raises(ConstructionError):
        Environment(1.0, 0, 2, [1.0, -1.0, 1.0])


# pointwise quantities -------------------------------------------------------

def test_omega_examples():
    assert omega(constant_environment(0.0, -3, 3), 0) == 0.5
    assert omega(constant_environment(math.log(2), -3, 3), 1) == pytest.approx(2 / 3, rel=1e-15)
    env = Environment(0.0, -1, 1, [3.0, 1.0, 1.0])
    assert omega(env, 0) == pytest.approx(0.25)


def test_rho_examples():
    env = Environment(math.log(2), -1, 1, [4.0, 1.0, 1.0])
    assert rho(env, 0) == pytest.approx(2.0, rel=1e-15)
    assert rho_k(constant_environment(math.log(2), -3, 5), 0, 2) == pytest.approx(1 / 8, rel=1e-15)


def test_boundary_errors():
    env = constant_environment(1.0, -3, 3)
    with pytest.raises(BoundaryError):
        omega(env, -3)
    with pytest.raises(BoundaryError):
        rho_k(env, 1, 5)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), lam=st.floats(0.05, 3.0),
       x=st.integers(-15, 10), k=st.integers(0, 4))
def test_rho_identities(seed, lam, x, k):
    law = ConductanceLaw(TailSpec(0.4), TailSpec(0.6, gamma=2.0, t_min=math.e ** 4))
    env = sample_environment(law, lam, -20, 20, seed)
    w = omega(env, x)
    assert 0 < w < 1
    assert rho(env, x) == pytest.approx((1 - w) / w, rel=1e-12)
    prod = np.prod([rho(env, x + j) for j in range(k + 1)])
    assert rho_k(env, x, k) == pytest.approx(prod, rel=1e-10)


def test_cached_arrays_agree_with_pointwise():
    law = ConductanceLaw(TailSpec(0.5), TailSpec(0.5))
    env = sample_environment(law, 0.7, -30, 30, 1)
    xs = np.arange(-29, 31)
    np.testing.assert_allclose(env.rho_array(), [rho(env, x) for x in xs], rtol=1e-15)
    np.testing.assert_allclose(env.omega_array(), [omega(env, x) for x in xs], rtol=1e-15)
    with pytest.raises(ValueError):
        env.rho_array()[0] = 1.0


@pytest.mark.parametrize("fmt", ["csv", "bin"])
def test_save_load_round_trip(tmp_path, fmt):
    law = ConductanceLaw(TailSpec(0.5), TailSpec(0.5))
    env = sample_environment(law, 0.7, -30, 30, 1)
    path = save_environment(env, tmp_path / f"env.{fmt}", fmt)
    back = load_environment(path)
    np.testing.assert_array_equal(back.c, env.c)
    assert (back.lam, back.left, back.right, back.seed, back.law) == (0.7, -30, 30, 1, law)
