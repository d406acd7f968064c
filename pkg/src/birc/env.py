"""Two-sided heavy-tailed conductance laws and environment windows.

A conductance law is a mixture of two components.  With probability
``p_upper`` the conductance is a draw ``Y >= 1`` from the upper component,
otherwise it is ``1 / Z`` with ``Z >= 1`` drawn from the lower component.
Each component has survival ``min(1, k (1 + log t)^gamma t^-alpha)`` above
``t_min`` and spreads its remaining mass uniformly on ``[1, t_min]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import integrate

__all__ = [
    "BoundaryError",
    "ConductanceLaw",
    "ConstructionError",
    "Environment",
    "Regime",
    "ResourceError",
    "TailSpec",
    "constant_environment",
    "extend_left",
    "load_environment",
    "omega",
    "log_quantile",
    "quantile",
    "rho",
    "rho_k",
    "sample_environment",
    "save_environment",
    "survival",
]

# Stream tags keep environment draws disjoint from walk draws.
ENV_RIGHT_TAG = 0x454E5652
ENV_LEFT_TAG = 0x454E564C

MAX_WINDOW = 400_000_000  # sites; about 3.2 GB of float64

_QUANTILE_RTOL = 1e-13
_QUANTILE_MAXITER = 200


class ConstructionError(ValueError):
    """Invalid law or environment parameters."""


class BoundaryError(IndexError):
    """Site index outside the environment window."""


class ResourceError(MemoryError):
    """Requested window exceeds the memory budget."""


class Regime(str, Enum):
    SIMPLE = "SimpleTraps"
    WELL_AND_WALLS = "WellAndWalls"


@dataclass(frozen=True)
class TailSpec:
    """Tail component with survival ``min(1, k_scale (1+log t)^gamma t^-alpha)``.

    Parameters
    ----------
    alpha : float
        Tail exponent, > 0.
    gamma : float
        Exponent of the logarithmic correction.
    k_scale : float
        Positive multiplier of the slowly varying part.
    t_min : float
        Start of the tail regime, >= 1.  Below it the component is uniform
        on ``[1, t_min]`` with the mass the tail leaves over.
    """

    alpha: float
    gamma: float = 0.0
    k_scale: float = 1.0
    t_min: float = 1.0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise ConstructionError(f"alpha must be positive, got {self.alpha}")
        if not self.t_min >= 1:
            raise ConstructionError(f"t_min must be >= 1, got {self.t_min}")
        if not self.k_scale > 0:
            raise ConstructionError(f"k_scale must be positive, got {self.k_scale}")
        # monotonicity of the uncapped log-survival on a log grid
        lt = math.log(self.t_min) + np.concatenate(([0.0], np.geomspace(1e-6, 1e4, 2000)))
        ls = self._log_tail(lt)
        bad = np.nonzero(np.diff(ls) > 1e-12 * np.maximum(1.0, np.abs(ls[1:])))[0]
        if bad.size:
            t_bad = float(np.exp(lt[bad[0] + 1]))
            raise ConstructionError(
                f"survival increases near t={t_bad:.4g}; raise t_min above "
                f"exp(gamma/alpha - 1) = {math.exp(self.gamma / self.alpha - 1):.4g}"
            )

    def _log_tail(self, log_t):
        """Uncapped log of ``k (1+log t)^gamma t^-alpha``."""
        log_t = np.asarray(log_t, dtype=float)
        return math.log(self.k_scale) + self.gamma * np.log1p(log_t) - self.alpha * log_t

    @property
    def s_min(self) -> float:
        """Tail mass ``S(t_min)``."""
        return float(min(1.0, math.exp(self._log_tail(math.log(self.t_min)))))

    def slowly_varying(self, t):
        """``k_scale (1 + log t)^gamma``."""
        return self.k_scale * np.power(1.0 + np.log(t), self.gamma)

    def to_dict(self) -> dict:
        return asdict(self)


def survival(spec: TailSpec, t):
    """Survival function ``P(Y > t)`` of one component (``Y >= 1``).

    Parameters
    ----------
    spec : TailSpec
    t : float or array_like

    Returns
    -------
    float or ndarray
    """
    t = np.asarray(t, dtype=float)
    s0 = spec.s_min
    with np.errstate(divide="ignore", invalid="ignore"):
        lt = np.log(np.maximum(t, spec.t_min))
        tail = np.minimum(1.0, np.exp(spec._log_tail(lt)))
        if spec.t_min > 1:
            body = 1.0 - (1.0 - s0) * (t - 1.0) / (spec.t_min - 1.0)
        else:
            body = np.ones_like(t)
    out = np.where(t <= 1.0, 1.0, np.where(t < spec.t_min, body, tail))
    return out if out.ndim else float(out)


def quantile(spec: TailSpec, u):
    """Inverse of :func:`survival`: the ``t`` with ``survival(t) = u``.

    The tail is inverted exactly when ``gamma == 0`` and by bisection in
    ``log t`` otherwise (relative tolerance 1e-13, at most 200 steps).

    Parameters
    ----------
    spec : TailSpec
    u : float or array_like
        Probabilities in (0, 1).

    Returns
    -------
    float or ndarray
    """
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("quantile needs u in (0, 1)")
    s0 = spec.s_min
    out = np.empty_like(u)
    in_tail = u <= s0
    if spec.t_min > 1 and s0 < 1:
        ub = u[~in_tail]
        out[~in_tail] = 1.0 + (1.0 - ub) * (spec.t_min - 1.0) / (1.0 - s0)
    else:
        out[~in_tail] = 1.0
    if np.any(in_tail):
        out[in_tail] = np.exp(_tail_log_quantile(spec, np.log(u[in_tail])))
    return out if out.ndim else float(out)


def log_quantile(spec: TailSpec, log_u):
    """``log quantile(spec, exp(log_u))``, usable far below the smallest float.

    Parameters
    ----------
    spec : TailSpec
    log_u : float or array_like
        Log survival levels, all < 0.
    """
    log_u = np.asarray(log_u, dtype=float)
    if np.any(log_u >= 0) or np.any(np.isnan(log_u)):
        raise ValueError("log_quantile needs log_u < 0")
    out = np.empty_like(log_u)
    in_tail = log_u <= math.log(spec.s_min)
    if np.any(~in_tail):
        out[~in_tail] = np.log(quantile(spec, np.exp(log_u[~in_tail])))
    if np.any(in_tail):
        out[in_tail] = _tail_log_quantile(spec, log_u[in_tail])
    return out if out.ndim else float(out)


def _tail_log_quantile(spec: TailSpec, log_u: np.ndarray) -> np.ndarray:
    lt0 = math.log(spec.t_min)
    if spec.gamma == 0.0:
        lt = (math.log(spec.k_scale) - log_u) / spec.alpha
        return np.maximum(lt, lt0)
    lo = np.full_like(log_u, lt0)
    # upper bracket: grow until the log-survival drops below log u
    hi = np.maximum(lt0 + 1.0, 2.0 * (math.log(spec.k_scale) - log_u) / spec.alpha)
    for _ in range(_QUANTILE_MAXITER):
        short = np.minimum(0.0, spec._log_tail(hi)) > log_u
        if not short.any():
            break
        hi = np.where(short, 2.0 * hi + 1.0, hi)
    for _ in range(_QUANTILE_MAXITER):
        mid = 0.5 * (lo + hi)
        above = np.minimum(0.0, spec._log_tail(mid)) > log_u
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        # bracket in log t is an absolute width, i.e. a relative width in t
        if np.all(hi - lo <= _QUANTILE_RTOL * np.maximum(1.0, np.abs(hi)) * 0.5):
            break
    return 0.5 * (lo + hi)


def _tail_moment_integral(spec: TailSpec, a: float) -> float:
    """``int_{t_min}^inf a u^(a-1) S(u) du``, or inf when divergent."""
    if a > spec.alpha or (a == spec.alpha and spec.gamma >= -1):
        return math.inf
    v0 = math.log(spec.t_min)
    # region where the cap min(1, .) is active: [v0, v_cap]
    v_cap = v0
    if spec._log_tail(v0) > 0:
        lo, hi = v0, v0 + 1.0
        while spec._log_tail(hi) > 0:
            hi = 2.0 * hi + 1.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            lo, hi = (mid, hi) if spec._log_tail(mid) > 0 else (lo, mid)
        v_cap = hi
    capped = math.exp(a * v_cap) - math.exp(a * v0)
    if a == spec.alpha:
        # a u^(a-1) k (1+log u)^g u^-a du = a k (1+v)^g dv, with g < -1
        g = spec.gamma
        rest = a * spec.k_scale * (1.0 + v_cap) ** (g + 1.0) / (-g - 1.0)
    else:
        rest, _ = integrate.quad(
            lambda v: a * math.exp(a * v + float(spec._log_tail(v))),
            v_cap, math.inf, epsabs=0.0, epsrel=1e-11, limit=400,
        )
    return capped + rest


def _body_integral(spec: TailSpec, f) -> float:
    """``int_1^t_min f(u) G(u) du`` over the uniform body."""
    if spec.t_min <= 1:
        return 0.0
    val, _ = integrate.quad(lambda u: f(u) * float(survival(spec, u)), 1.0, spec.t_min,
                            epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def _positive_moment(spec: TailSpec, a: float) -> float:
    """``E[Y^a]`` for a component draw ``Y >= 1``."""
    tail = _tail_moment_integral(spec, a)
    if math.isinf(tail):
        return math.inf
    return 1.0 + _body_integral(spec, lambda u: a * u ** (a - 1.0)) + tail


def _negative_moment(spec: TailSpec, a: float) -> float:
    """``E[Y^-a]`` for a component draw ``Y >= 1``; always finite."""
    body = _body_integral(spec, lambda u: a * u ** (-a - 1.0))
    v0 = math.log(spec.t_min)
    tail, _ = integrate.quad(
        lambda v: a * math.exp(-a * v + min(0.0, float(spec._log_tail(v)))),
        v0, math.inf, epsabs=0.0, epsrel=1e-11, limit=400,
    )
    return 1.0 - body - tail


@dataclass(frozen=True)
class ConductanceLaw:
    """Mixture law of a conductance ``c``.

    ``upper`` describes the tail of ``c`` at infinity and ``lower`` the tail
    of ``1/c`` at infinity.  The regime is derived from the tails: it is
    ``WellAndWalls`` when both alpha-moments ``E[c^alpha]`` and
    ``E[c^-alpha]`` diverge, ``SimpleTraps`` otherwise.
    """

    upper: TailSpec
    lower: TailSpec
    p_upper: float = 0.5
    allow_ballistic: bool = False
    regime: Regime = field(init=False)

    def __post_init__(self):
        if not 0 <= self.p_upper <= 1:
            raise ConstructionError(f"p_upper must lie in [0, 1], got {self.p_upper}")
        a0, ai = self.alpha_0, self.alpha_inf
        if a0 == ai and (self.lower.gamma == -1 or self.upper.gamma == -1):
            raise ConstructionError("gamma = -1 is excluded when both tails share alpha")
        if min(a0, ai) >= 1 and not self.allow_ballistic:
            raise ConstructionError(
                "min(alpha_0, alpha_inf) >= 1 is ballistic; pass allow_ballistic=True")
        regime = Regime.WELL_AND_WALLS if (
            math.isinf(self.moment(self.alpha)) and math.isinf(self.moment(-self.alpha))
        ) else Regime.SIMPLE
        object.__setattr__(self, "regime", regime)

    @property
    def alpha(self) -> float:
        return min(self.alpha_0, self.alpha_inf)

    @property
    def alpha_0(self) -> float:
        """Tail exponent of ``1/c``; ``inf`` if the lower component is unused."""
        return self.lower.alpha if self.p_upper < 1 else math.inf

    @property
    def alpha_inf(self) -> float:
        """Tail exponent of ``c``; ``inf`` if the upper component is unused."""
        return self.upper.alpha if self.p_upper > 0 else math.inf

    def L_inf(self, t):
        """Slowly varying part of ``P(c > t)``."""
        return self.p_upper * self.upper.slowly_varying(t)

    def L_0(self, t):
        """Slowly varying part of ``P(1/c > t)``."""
        return (1.0 - self.p_upper) * self.lower.slowly_varying(t)

    def moment(self, a: float) -> float:
        """``E[c^a]`` for real ``a``; ``inf`` when divergent."""
        if a == 0:
            return 1.0
        p = self.p_upper
        if a > 0:
            up = _positive_moment(self.upper, a) if p > 0 else 0.0
            lo = _negative_moment(self.lower, a) if p < 1 else 0.0
        else:
            up = _negative_moment(self.upper, -a) if p > 0 else 0.0
            lo = _positive_moment(self.lower, -a) if p < 1 else 0.0
        parts = [w * m for w, m in ((p, up), (1.0 - p, lo)) if w > 0]
        return math.fsum(parts) if all(math.isfinite(v) for v in parts) else math.inf

    def cdf(self, u):
        """``P(c <= u)``."""
        u = np.asarray(u, dtype=float)
        p = self.p_upper
        with np.errstate(divide="ignore"):
            up = np.where(u < 1, 0.0, 1.0 - survival(self.upper, np.maximum(u, 1.0)))
            lo = np.where(u < 1, survival(self.lower, 1.0 / np.maximum(u, 1e-300)), 1.0)
        out = p * up + (1.0 - p) * lo
        return out if out.ndim else float(out)

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        """I.i.d. conductances from ``rng``; two uniforms per draw."""
        uu = rng.random((int(np.prod(size)), 2))
        return self._transform(uu).reshape(size)

    def _transform(self, uu: np.ndarray) -> np.ndarray:
        # uu[:, 0] picks the component, uu[:, 1] feeds its quantile
        up = uu[:, 0] < self.p_upper
        u = np.where(uu[:, 1] > 0, uu[:, 1], np.nextafter(0.0, 1.0))
        c = np.empty(len(uu))
        if up.any():
            c[up] = quantile(self.upper, u[up])
        if (~up).any():
            c[~up] = 1.0 / quantile(self.lower, u[~up])
        return c

    def to_dict(self) -> dict:
        return {
            "upper": self.upper.to_dict(),
            "lower": self.lower.to_dict(),
            "p_upper": self.p_upper,
            "allow_ballistic": self.allow_ballistic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConductanceLaw":
        return cls(
            upper=TailSpec(**d["upper"]),
            lower=TailSpec(**d["lower"]),
            p_upper=float(d.get("p_upper", 0.5)),
            allow_ballistic=bool(d.get("allow_ballistic", False)),
        )


@dataclass(frozen=True, eq=False)
class Environment:
    """Conductances ``c[x]`` for ``x`` in ``left..right`` with bias ``lam``.

    ``c`` is stored read-only; ``c[x - left]`` is the conductance of the edge
    ``(x, x+1)``.
    """

    lam: float
    left: int
    right: int
    c: np.ndarray
    seed: int | None = None
    law: ConductanceLaw | None = None

    def __post_init__(self):
        c = np.array(self.c, dtype=float)
        if c.shape != (self.right - self.left + 1,):
            raise ConstructionError("c must have right - left + 1 entries")
        if self.left > 0 or self.right < 1:
            raise ConstructionError("window must satisfy left <= 0 < right")
        if not (np.all(c > 0) and np.all(np.isfinite(c))):
            raise ConstructionError("conductances must be positive and finite")
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "_cache", {})

    def __len__(self):
        return self.right - self.left + 1

    def _idx(self, x, lo=None, hi=None):
        lo = self.left if lo is None else lo
        hi = self.right if hi is None else hi
        xa = np.asarray(x)
        if np.any(xa < lo) or np.any(xa > hi):
            raise BoundaryError(f"site {x} outside [{lo}, {hi}]")
        return xa - self.left

    def cond(self, x):
        """``c_x``."""
        return self.c[self._idx(x)]

    def tilted(self, x):
        """``c_x^lambda = e^(lambda x) c_x``; may overflow far from 0."""
        return np.exp(self.lam * np.asarray(x, dtype=float)) * self.cond(x)

    def _cached(self, key, make):
        val = self._cache.get(key)
        if val is None:
            val = make()
            val.setflags(write=False)
            self._cache[key] = val
        return val

    def rho_array(self) -> np.ndarray:
        """``rho_x`` for ``x = left+1 .. right`` (cached, read-only)."""
        return self._cached("rho", lambda: math.exp(-self.lam) * self.c[:-1] / self.c[1:])

    def omega_array(self) -> np.ndarray:
        """``omega_x`` for ``x = left+1 .. right`` (cached, read-only)."""
        return self._cached("omega", lambda: 1.0 / (1.0 + self.rho_array()))

    def log_fail_array(self) -> np.ndarray:
        """``log(1 - omega_x) = log(rho_x / (1 + rho_x))`` (cached, read-only)."""
        def make():
            r = self.rho_array()
            # -log1p(1/r) stays nonzero for very deep traps
            with np.errstate(divide="ignore"):
                return -np.log1p(1.0 / r)
        return self._cached("log_fail", make)

    def with_conductances(self, c) -> "Environment":
        return Environment(self.lam, self.left, self.right, c, self.seed, self.law)

    def header(self) -> dict:
        return {
            "lambda": self.lam,
            "left": self.left,
            "right": self.right,
            "seed": self.seed,
            "law": None if self.law is None else self.law.to_dict(),
        }


def omega(env: Environment, x):
    """Probability ``c_x^l / (c_{x-1}^l + c_x^l)`` of stepping right from ``x``."""
    return 1.0 / (1.0 + rho(env, x))


def rho(env: Environment, x):
    """``e^-lambda c_{x-1} / c_x``."""
    return rho_k(env, x, 0)


def rho_k(env: Environment, x, k: int):
    """``e^(-lambda (k+1)) c_{x-1} / c_{x+k}``."""
    if k < 0:
        raise ValueError("k must be non-negative")
    x = np.asarray(x)
    env._idx(x - 1)
    env._idx(x + k)
    return math.exp(-env.lam * (k + 1)) * env.cond(x - 1) / env.cond(x + k)


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), tag])))


def sample_environment(law: ConductanceLaw, lam: float, left: int, right: int,
                       seed: int) -> Environment:
    """Draw an i.i.d. environment on ``[left, right]``.

    Sites ``0, 1, ...`` and ``-1, -2, ...`` use two separate streams consumed
    outward from the origin, so a wider window reproduces every site of a
    narrower one drawn with the same seed.
    """
    if not (left <= 0 < right):
        raise ConstructionError("window must satisfy left <= 0 < right")
    if not lam > 0:
        raise ConstructionError("lambda must be positive")
    if right - left + 1 > MAX_WINDOW:
        raise ResourceError(f"window of {right - left + 1} sites exceeds {MAX_WINDOW}")
    c_right = law.draw(_stream(seed, ENV_RIGHT_TAG), right + 1)
    c_left = law.draw(_stream(seed, ENV_LEFT_TAG), -left)[::-1]
    return Environment(lam, left, right, np.concatenate((c_left, c_right)), seed, law)


def extend_left(env: Environment, new_left: int) -> Environment:
    """Same environment on ``[new_left, right]``; existing sites unchanged."""
    if env.law is None or env.seed is None:
        raise ConstructionError("extension needs the environment's law and seed")
    if new_left >= env.left:
        return env
    ext = sample_environment(env.law, env.lam, new_left, 1, env.seed)
    c = np.concatenate((ext.c[: env.left - new_left], env.c))
    return Environment(env.lam, new_left, env.right, c, env.seed, env.law)


def constant_environment(lam: float, left: int, right: int, value: float = 1.0) -> Environment:
    """Homogeneous environment ``c = value``."""
    return Environment(lam, left, right, np.full(right - left + 1, float(value)))


def save_environment(env: Environment, path, fmt: str = "csv") -> Path:
    """Write the conductances plus a JSON header ``<path>.json``."""
    path = Path(path)
    if fmt == "csv":
        np.savetxt(path, env.c, fmt="%.17g", header="c", comments="")
    elif fmt == "bin":
        env.c.astype("<f8").tofile(path)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    head = dict(env.header(), format=fmt)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(head, indent=2))
    return path


def load_environment(path) -> Environment:
    path = Path(path)
    head = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if head["format"] == "csv":
        c = np.loadtxt(path, skiprows=1, ndmin=1)
    else:
        c = np.fromfile(path, dtype="<f8")
    law = ConductanceLaw.from_dict(head["law"]) if head.get("law") else None
    return Environment(head["lambda"], head["left"], head["right"], c, head["seed"], law)
