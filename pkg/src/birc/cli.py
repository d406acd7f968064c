"""Experiment runner.

Usage::

    birc <experiment> [--config FILE] [--seed N] [--replicas N] [--out DIR]
                      [--engine {direct,branching}] [--threads N]

Settings are merged with precedence flags > environment (``BIRC_SEED``,
``BIRC_REPLICAS``, ``BIRC_OUT``, ``BIRC_ENGINE``, ``BIRC_THREADS``) >
config file > built-in defaults.  Each run writes
``<out>/<experiment>/<timestamp>-<hash>/manifest.json`` and, when there
are rows, ``results.csv``.  The manifest echoes the full resolved config,
so ``birc <experiment> --config manifest.json`` repeats the run.

Exit codes: 0 success, 1 invalid config or runtime error, 2 a built-in
check of the experiment failed.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .env import ConductanceLaw, ConstructionError, Regime, sample_environment
from .limit import ZetaLaw, arcsine_aging, e_zeta_alpha, stable_increment, theorem_constant
from .stats import aging_estimator, exceedance_ppp_check, ks_two_sample, loglog_slope, trap_type_frequencies
from .traps import census, detect_traps, limit_params, well_fraction
from .walk import aging_positions, annealed_passage_times, ballistic_velocity, env_seed

SCHEMA_VERSION = 1
EXPERIMENTS = ("simulate", "scaling", "passage-dist", "aging", "traps", "velocity")
ENV_VARS = {
    "seed": ("BIRC_SEED", int),
    "replicas": ("BIRC_REPLICAS", int),
    "out": ("BIRC_OUT", str),
    "engine": ("BIRC_ENGINE", str),
    "threads": ("BIRC_THREADS", int),
}

WW_LAW = {"upper": {"alpha": 0.5}, "lower": {"alpha": 0.5}}

COMMON = {
    "law": WW_LAW,
    "lam": 1.0,
    "seed": 0,
    "replicas": 100,
    "engine": "branching",
    "threads": 1,
    "out": "runs",
}

DEFAULTS = {
    "simulate": {"n": 1000, "checkpoints": [0.25, 0.5, 0.75, 1.0]},
    "scaling": {"n_grid": [1000, 3000, 10000, 30000], "slope_tol": 0.3},
    "passage-dist": {"n": 30000, "zeta_samples": 100_000, "ks_max": 0.15},
    "aging": {"n": 10_000, "h": [2.0, 4.0, 8.0], "j_window": 50, "engine": "direct",
              "abs_tol": 0.1},
    "traps": {"n": 100_000, "n_envs": 200, "eps": 0.5, "k_max": None, "t_threshold": None,
              "type_samples": 10**7, "pass_rate": 0.95, "q_tol": 0.1},
    "velocity": {"law": {"upper": {"alpha": 2.5}, "lower": {"alpha": 2.5}, "allow_ballistic": True},
                 "lam": 0.5, "n": 2000, "rel_tol": 0.05},
}


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def resolve_config(experiment: str, file_cfg: dict | None = None, env: dict | None = None,
                   flags: dict | None = None) -> dict:
    """Merge defaults, file, environment and flags, then validate."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    cfg = copy.deepcopy(COMMON)
    cfg.update(copy.deepcopy(DEFAULTS[experiment]))
    file_cfg = dict(file_cfg or {})
    if "config" in file_cfg and isinstance(file_cfg["config"], dict):
        file_cfg = dict(file_cfg["config"])        # a manifest
    file_cfg.pop("experiment", None)
    unknown = set(file_cfg) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config keys for {experiment}: {sorted(unknown)}")
    cfg.update(file_cfg)
    env = os.environ if env is None else env
    for key, (var, typ) in ENV_VARS.items():
        if env.get(var) not in (None, ""):
            try:
                cfg[key] = typ(env[var])
            except ValueError as exc:
                raise ConfigError(f"{var}={env[var]!r}: {exc}") from None
    for key, val in (flags or {}).items():
        if val is not None:
            cfg[key] = val
    cfg["experiment"] = experiment
    validate(cfg)
    cfg["law"] = _law(cfg).to_dict()          # spell out every tail default
    return cfg


def _law(cfg) -> ConductanceLaw:
    try:
        return ConductanceLaw.from_dict(cfg["law"])
    except (ConstructionError, KeyError, TypeError) as exc:
        raise ConfigError(f"law: {exc}") from None


def validate(cfg: dict) -> None:
    """Check module preconditions; raises :class:`ConfigError` with the offending key."""
    exp = cfg["experiment"]
    law = _law(cfg)
    if not (isinstance(cfg["lam"], (int, float)) and cfg["lam"] > 0):
        raise ConfigError("lam must be a positive number")
    if not (isinstance(cfg["replicas"], int) and cfg["replicas"] >= 0):
        raise ConfigError("replicas must be a non-negative integer")
    if not (isinstance(cfg["threads"], int) and cfg["threads"] >= 1):
        raise ConfigError("threads must be a positive integer")
    if cfg["engine"] not in ("direct", "branching"):
        raise ConfigError("engine must be 'direct' or 'branching'")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for key in ("n",):
        if key in cfg and not (isinstance(cfg[key], int) and cfg[key] >= 10):
            raise ConfigError(f"{key} must be an integer >= 10")
    if exp == "simulate":
        g = cfg["checkpoints"]
        if not g or any(not 0 < u <= 1 for u in g) or list(g) != sorted(g):
            raise ConfigError("checkpoints must be sorted values in (0, 1]")
    if exp == "scaling":
        grid = cfg["n_grid"]
        if len(grid) < 3 or any(not (isinstance(v, int) and v >= 10) for v in grid):
            raise ConfigError("n_grid needs at least 3 integers >= 10")
    if exp in ("scaling", "passage-dist", "aging", "traps") and not law.alpha < 1:
        raise ConfigError(f"{exp} needs a sub-ballistic law (alpha < 1), got alpha={law.alpha}")
    if exp == "aging":
        if cfg["engine"] != "direct":
            raise ConfigError("aging needs joint paths: engine must be 'direct'")
        if any(not h > 1 for h in cfg["h"]):
            raise ConfigError("every h must exceed 1")
        if cfg["j_window"] < 0:
            raise ConfigError("j_window must be >= 0")
    if exp == "traps":
        if cfg["n_envs"] < 100:
            raise ConfigError("traps needs n_envs >= 100 for the PPP check")
        if not 0 < cfg["eps"] <= 1:
            raise ConfigError("eps must lie in (0, 1]")
    if exp == "velocity":
        if not law.allow_ballistic:
            raise ConfigError("velocity needs law.allow_ballistic = true")
        if not law.alpha > 1:
            raise ConfigError(f"velocity needs both first moments finite (alpha > 1), got {law.alpha}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps({k: v for k, v in cfg.items() if k not in ("out", "threads")},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# --------------------------------------------------------------------------
# experiments: each returns (rows, summary, checks)
# --------------------------------------------------------------------------

def _records(cfg, n, grid=None):
    law = _law(cfg)
    return annealed_passage_times(law, cfg["lam"], n, cfg["replicas"], cfg["seed"], cfg["engine"],
                                  grid, cfg["threads"])


def run_simulate(cfg):
    recs = _records(cfg, cfg["n"], cfg["checkpoints"]) if cfg["replicas"] else []
    rows = [row for r in recs for row in r.rows()]
    t = np.array([r.total_steps for r in recs], dtype=float)
    summary = {"replicas": len(recs)}
    if len(t):
        summary.update(median_T=float(np.median(t)), mean_log_T=float(np.log(t).mean()))
    return rows, summary, {}


def run_scaling(cfg):
    law = _law(cfg)
    rows = []
    for n in cfg["n_grid"]:
        t = np.array([r.total_steps for r in _records(cfg, n)], dtype=float)
        d_n = limit_params(law, cfg["lam"], n).d_n
        rows.append({"n": n, "median_T": float(np.median(t)), "mean_log_T": float(np.log(t).mean()),
                     "d_n": d_n})
    fit = loglog_slope([(r["n"], r["median_T"]) for r in rows])
    # position proxy: sites reached by the median passage time
    fit_x = loglog_slope([(r["median_T"], r["n"]) for r in rows])
    for r in rows:
        r["slope"] = fit.slope
    target = 1.0 / law.alpha
    summary = {"slope": fit.slope, "slope_stderr": fit.stderr, "slope_x": fit_x.slope,
               "target_slope": target, "target_slope_x": law.alpha}
    return rows, summary, {"slope_within_tol": abs(fit.slope - target) <= cfg["slope_tol"]}


def _e_zeta(law, lam, cfg):
    return e_zeta_alpha(ZetaLaw.from_law(law, lam), cfg["zeta_samples"], cfg["seed"])


def run_passage_dist(cfg):
    law, lam, n = _law(cfg), cfg["lam"], cfg["n"]
    params = limit_params(law, lam, n)
    recs = _records(cfg, n)
    ratio = np.array([r.total_steps for r in recs], dtype=float) / params.d_n
    ez = _e_zeta(law, lam, cfg)
    const = theorem_constant(law.alpha, ez.value)
    ref = const * stable_increment(law.alpha, 1.0, seed=cfg["seed"], size=len(ratio))
    ks, p = ks_two_sample(ratio, ref)
    summary = {"d_n": params.d_n, "e_zeta_alpha": ez.value, "e_zeta_stderr": ez.stderr,
               "theorem_constant": const, "ks": ks, "ks_p": p}
    if law.regime is Regime.WELL_AND_WALLS:
        # deep pairs (x, k) at every k: intensity 1 / (1 - e^{-lam alpha})
        fac = (1.0 - math.exp(-lam * law.alpha)) ** (-1.0 / law.alpha)
        summary["ks_all_k_intensity"] = ks_two_sample(ratio, fac * ref)[0]
        summary["all_k_factor"] = fac
    rows = [{"replica_id": r.replica_id, "T": r.total_steps, "T_over_d_n": x, "reference": y}
            for r, x, y in zip(recs, ratio, ref)]
    return rows, summary, {"ks_below_max": ks <= cfg["ks_max"]}


def run_aging(cfg):
    law, lam, n = _law(cfg), cfg["lam"], cfg["n"]
    pos = aging_positions(law, lam, n, cfg["h"], cfg["replicas"], cfg["seed"])
    rows, checks, summary = [], {}, {}
    for i, h in enumerate(cfg["h"]):
        est = aging_estimator(pos[:, [0, i + 1]], h, cfg["j_window"])
        ref = arcsine_aging(law.alpha, h)
        rows.append({"h": h, "estimate": est.value, "stderr": est.stderr, "arcsine": ref})
        checks[f"h={h:g}"] = abs(est.value - ref) <= cfg["abs_tol"]
    summary["curve"] = rows
    return rows, summary, checks


def pilot_threshold(law, lam, rank: int, n: int, seed: int) -> float:
    """``rank``-th largest of ``n`` draws of ``rho_0``."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x50494C54])))
    c = law.draw(rng, (2, n))
    r = np.sort(math.exp(-lam) * c[0] / c[1])
    return float(r[-rank])


def run_traps(cfg):
    law, lam, n = _law(cfg), cfg["lam"], cfg["n"]
    params = limit_params(law, lam, n)
    k_max = cfg["k_max"]
    rows, positions = [], []
    deep = cfg["eps"] * params.d_n
    kb = math.ceil(params.k_bound) if k_max is None else k_max
    for e in range(cfg["n_envs"]):
        env = sample_environment(law, lam, -5, n + kb + 5, env_seed(cfg["seed"], e))
        rep = census(env, params, k_max)
        rows.append({"env": e, **rep.to_dict()})
        traps = detect_traps(env, params, k_max)
        # one point per block: clustered (x, k) pairs share a block
        positions.append(sorted({t.triblock_index / params.k_n for t in traps if t.depth > deep}))
    m = len(rows)
    rates = {
        "isolation": sum(not r["isolation_violation"] for r in rows) / m,
        "depth": sum(not r["depth_violation"] for r in rows) / m,
        "k": sum(not r["k_violation"] for r in rows) / m,
        "all_good": sum(r["all_good"] for r in rows) / m,
    }
    ppp = exceedance_ppp_check(positions, cfg["eps"], law.alpha, seed=cfg["seed"])
    summary = {"limit_params": params.to_dict(), "pass_rates": rates, "ppp": ppp.to_dict(),
               "ppp_poisson_consistent": ppp.poisson_consistent}
    checks = {f"{k}_rate": v >= cfg["pass_rate"] for k, v in rates.items() if k != "all_good"}
    checks["ppp_dispersion"] = ppp.poisson_consistent
    if law.regime is Regime.SIMPLE:
        t = cfg["t_threshold"]
        if t is None:
            # about 250 exceedances expected among type_samples draws
            t = pilot_threshold(law, lam, 26, cfg["type_samples"] // 10, cfg["seed"])
        tt = trap_type_frequencies(law, lam, t, cfg["type_samples"], cfg["seed"])
        q_pred = well_fraction(law, lam)
        summary.update(trap_types=tt.to_dict(), q_predicted=q_pred)
        checks["q_hat"] = abs(tt.q_hat - q_pred) <= cfg["q_tol"]
    return rows, summary, checks


def run_velocity(cfg):
    law, lam, n = _law(cfg), cfg["lam"], cfg["n"]
    v = ballistic_velocity(law, lam)
    recs = _records(cfg, n)
    t = np.array([r.total_steps for r in recs], dtype=float)
    v_hat = float(n / t.mean()) if len(t) else math.nan
    rows = [{"replica_id": r.replica_id, "T": r.total_steps, "velocity": n / r.total_steps} for r in recs]
    summary = {"velocity": v, "velocity_hat": v_hat}
    return rows, summary, {"velocity_within_tol": abs(v_hat / v - 1) <= cfg["rel_tol"]}


RUNNERS = {
    "simulate": run_simulate,
    "scaling": run_scaling,
    "passage-dist": run_passage_dist,
    "aging": run_aging,
    "traps": run_traps,
    "velocity": run_velocity,
}


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return str(v)


def rows_to_csv(rows) -> str:
    if not rows:
        return ""
    fields = list(rows[0])
    for r in rows[1:]:
        fields += [k for k in r if k not in fields]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in fields})
    return buf.getvalue()


def _versions():
    import numba
    import scipy
    return {"birc": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    return obj


def run(cfg: dict) -> tuple[Path, dict]:
    """Execute a resolved config and write its artifacts.

    Returns the run directory and the manifest.
    """
    t0 = time.perf_counter()
    rows, summary, checks = RUNNERS[cfg["experiment"]](cfg)
    wall = time.perf_counter() - t0
    digest = config_hash(cfg)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    out = Path(cfg["out"]) / cfg["experiment"] / f"{stamp}-{digest}"
    out.mkdir(parents=True, exist_ok=False)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "experiment": cfg["experiment"],
        "config": cfg,
        "config_hash": digest,
        "versions": _versions(),
        "wall_time_s": wall,
        "summary": summary,
        "checks": checks,
        "passed": all(checks.values()),
        "results": "results.csv" if rows else None,
    }
    manifest = _jsonable(manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    if rows:
        (out / "results.csv").write_text(rows_to_csv(rows))
    return out, manifest


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="birc", description="Biased walks among random conductances.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="JSON config (or a previous manifest.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--replicas", type=int)
    p.add_argument("--out")
    p.add_argument("--engine", choices=("direct", "branching"))
    p.add_argument("--threads", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_cfg = json.loads(args.config.read_text()) if args.config else {}
        flags = {k: getattr(args, k) for k in ENV_VARS}
        cfg = resolve_config(args.experiment, file_cfg, os.environ, flags)
        out, manifest = run(cfg)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"birc: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:        # runtime failures inside an experiment
        print(f"birc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    status = "passed" if manifest["passed"] else "FAILED: " + ", ".join(
        k for k, v in manifest["checks"].items() if not v)
    print(f"{out}  ({status})")
    return 0 if manifest["passed"] else 2


if __name__ == "__main__":
    sys.exit(main())
