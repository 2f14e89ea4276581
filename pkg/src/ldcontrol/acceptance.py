"""The acceptance criteria as runnable checks.

Each ``criterion_N(profile)`` returns a dict with ``id``, ``name``, ``pass``,
``threshold`` and the measured values. ``profile`` is ``"full"`` (the sizes
the criteria are stated at) or ``"quick"`` (reduced sizes for smoke runs and
the determinism check; its pass/fail is not meaningful).
"""

from __future__ import annotations

import contextlib
import io
import math
import tempfile
import time
from pathlib import Path

import numpy as np

from .analysis import counterexample_suite, mollified_sequence, stability_experiment
from .control_problem import Domain, ProblemSpec
from .grid import Grid
from .hjb_elliptic import policy_iteration, viscosity_residual
from .hjb_parabolic import check_semigroup, regularization_probe, semigroup_apply
from .mc_value import Intermediate, check_dpp, value_elliptic_mc
from .presets import checkerboard, identity, laplacian, two_drift
from .sde_engine import FeedbackPolicy, exit_exp_moment, exit_stats, tail_fit

PROFILES = {
    "full": {
        "h": 1 / 64, "mc_n": 100_000, "mc_dt": 1e-4, "dpp_n": 40_000, "dpp_dt": 1e-4,
        "dpp2_n": 20_000, "dpp2_dt": 1e-3, "semi_dt": 1e-3, "exit_n": 20_000, "exit_dt": 1e-3,
        "cx_n": 10_000, "cx_dt": 1e-4, "ms": (4, 8, 16, 32), "heat_box": 1.5, "drift_box": 1.25,
        "probe_box": 2.0,
    },
    "quick": {
        "h": 1 / 16, "mc_n": 2_000, "mc_dt": 1e-3, "dpp_n": 2_000, "dpp_dt": 1e-3,
        "dpp2_n": 2_000, "dpp2_dt": 1e-2, "semi_dt": 1e-2, "exit_n": 2_000, "exit_dt": 1e-3,
        "cx_n": 500, "cx_dt": 1e-3, "ms": (2, 4, 8), "heat_box": 2.0, "drift_box": 2.0,
        "probe_box": 2.0,
    },
}

UNIT_BALL = Domain.ball([0.0, 0.0], 1.0)


def _laplacian_spec():
    return ProblemSpec.elliptic(laplacian(2), UNIT_BALL)


def _exact_laplacian(X):
    return (1.0 - (X ** 2).sum(axis=1)) / 2.0


_cache: dict = {}


def _laplacian_solution(h):
    key = ("laplacian", h)
    if key not in _cache:
        spec = _laplacian_spec()
        t0 = time.perf_counter()
        rep = policy_iteration(spec, Grid.for_domain(spec.domain, h))
        _cache[key] = (rep, time.perf_counter() - t0)
    return _cache[key]


def criterion_1(profile="full", seed=0):
    p = PROFILES[profile]
    rep, wall = _laplacian_solution(p["h"])
    g = rep.solution.grid
    err = float(np.abs(rep.solution.values[g.interior] - _exact_laplacian(g.coords(g.interior)))
                .max())
    ok = err <= 5e-3 and wall <= 60.0
    return {"id": 1, "name": "elliptic oracle", "pass": ok, "sup_error": err,
            "threshold": "sup error <= 5e-3 and runtime <= 60 s", "runtime": wall,
            "iterations": rep.iterations, "h": p["h"]}


def criterion_2(profile="full", seed=0):
    p = PROFILES[profile]
    rep, _ = _laplacian_solution(p["h"])
    spec = _laplacian_spec()
    rows, ok = [], True
    t0 = time.perf_counter()
    for x0 in ([0.0, 0.0], [0.5, 0.0]):
        est = value_elliptic_mc(spec, [FeedbackPolicy.constant(0, "only")], x0, p["mc_dt"],
                                p["mc_n"], seed=seed)
        pde = float(rep.solution.at(np.array([x0]))[0])
        diff = abs(est.value - pde)
        rows.append({"x0": x0, "mc": est.value, "stderr": est.stderr, "pde": pde, "diff": diff,
                     "three_stderr_within_tol": 3 * est.stderr <= 0.02,
                     "truncated": est.truncated})
        ok &= diff <= 0.02 and est.valid
    wall = time.perf_counter() - t0
    return {"id": 2, "name": "MC-PDE consistency", "pass": bool(ok and wall <= 300.0),
            "threshold": "|MC - PDE| <= 0.02 at both points, runtime <= 5 min", "rows": rows,
            "runtime": wall, "n_paths": p["mc_n"], "dt": p["mc_dt"]}


def criterion_3(profile="full", seed=0):
    p = PROFILES[profile]
    rep, _ = _laplacian_solution(p["h"])
    only = [FeedbackPolicy.constant(0, "only")]
    ell = check_dpp(_laplacian_spec(), [0.0, 0.0],
                    Intermediate.exit(Domain.ball([0.0, 0.0], 0.5)), only, 0.02, rep.solution,
                    dt=p["dpp_dt"], n_paths=p["dpp_n"], seed=seed + 1)
    field = two_drift(2)
    T, s = 0.3, 0.1
    grid = Grid.box([-2.0, -2.0], [2.0, 2.0], p["h"])
    cont = semigroup_apply(field, field.f, T - s, grid, p["semi_dt"], store_policies=False)
    pols = [FeedbackPolicy.constant(0, "plus"), FeedbackPolicy.constant(1, "minus")]
    par = check_dpp(ProblemSpec.finite_horizon(field, T), [0.0, 0.0], Intermediate.time(s),
                    pols, 0.03, cont.output, dt=p["dpp2_dt"], n_paths=p["dpp2_n"],
                    seed=seed + 2)
    keys = ("lhs", "rhs", "gap", "combined_stderr")
    ok = ell["gap"] <= 0.02 and par["gap"] <= 0.03
    return {"id": 3, "name": "dynamic programming", "pass": bool(ok),
            "threshold": "elliptic gap <= 0.02, two-drift gap <= 0.03",
            "elliptic": {k: ell[k] for k in keys}, "two_drift": {k: par[k] for k in keys}}


def criterion_4(profile="full", seed=0):
    p = PROFILES[profile]
    h, dt = p["h"], p["semi_dt"]
    heat = identity(2)
    L = p["heat_box"]
    exact = lambda t, X: (X ** 2).sum(axis=1) + 2.0 * t  # noqa: E731
    hr = check_semigroup(heat, heat.f, 0.15, 0.15, Grid.box([-L, -L], [L, L], h), dt,
                         exact=exact)
    field = two_drift(2)
    L = p["drift_box"]
    coarse = check_semigroup(field, field.f, 0.1, 0.1, Grid.box([-L, -L], [L, L], h), dt)
    fine = check_semigroup(field, field.f, 0.1, 0.1, Grid.box([-L, -L], [L, L], h / 2), dt / 2)
    # gaps at solver precision count as halved
    slack = 1e-9
    halves = abs(fine["gap"] - coarse["gap"] / 2) <= 0.3 * coarse["gap"] / 2 + slack
    ok = hr["gap"] <= 2e-3 and coarse["gap"] <= 5e-3 and halves
    return {"id": 4, "name": "semigroup law", "pass": bool(ok),
            "threshold": "heat gap <= 2e-3, two-drift gap <= 5e-3, gap halves (+-30%)",
            "heat_gap": hr["gap"], "heat_error_full": hr.get("error_full"),
            "two_drift_gap": coarse["gap"], "two_drift_gap_fine": fine["gap"],
            "halving": bool(halves)}


def criterion_5(profile="full", seed=0):
    p = PROFILES[profile]
    spec = ProblemSpec.elliptic(identity(2), UNIT_BALL)
    pol = FeedbackPolicy.constant(0, "only")
    starts = [[0.0, 0.0], [0.5, 0.0], [0.0, -0.5], [-0.3, 0.3], [0.7, 0.2]]
    moments = [exit_exp_moment(spec, pol, x0, 0.5, p["exit_n"], p["exit_dt"], seed=seed + 3)
               for x0 in starts]
    vals = [m["estimate"] for m in moments]
    finite = all(math.isfinite(v) and not m["lower_bound"] for v, m in zip(vals, moments))
    ratio = max(vals) / min(vals)
    stats = exit_stats(spec, pol, [0.0, 0.0], p["exit_dt"], p["exit_n"], seed=seed + 4)
    fit = tail_fit(stats["tail"])
    ok = finite and ratio <= 2.0 and fit["slope"] < 0 and fit["r2"] >= 0.9
    return {"id": 5, "name": "exit exponential moment", "pass": bool(ok),
            "threshold": "finite, pairwise ratio <= 2, tail slope < 0 with R^2 >= 0.9",
            "moments": vals, "ratio": ratio, "tail_slope": fit["slope"], "tail_r2": fit["r2"]}


def criterion_6(profile="full", seed=0):
    p = PROFILES[profile]
    field = identity(2, terminal="half_space")
    L = p["probe_box"]
    grid = Grid.box([-L, -L], [L, L], p["h"])
    rows = regularization_probe(field, field.f, [0.0, 0.05, 0.1, 0.2], grid, p["semi_dt"])
    r0 = rows[0]
    q = np.array(r0["increments"]) / np.array(r0["scales"])
    grows = bool(np.all(np.diff(q) > 0))   # scales are decreasing
    r1 = [r for r in rows if r["t"] == 0.1][0]
    closed = 1.0 / math.sqrt(2 * math.pi * 0.1)
    rel = abs(r1["lipschitz"] - closed) / closed
    consts = [r["constant"] for r in rows[1:]]
    non_inc = all(b <= a for a, b in zip(consts, consts[1:]))
    ok = r0["discontinuous"] and grows and rel <= 0.1 and r1["alpha"] >= 0.9 and non_inc
    return {"id": 6, "name": "regularization by noise", "pass": bool(ok),
            "threshold": "t=0 discontinuous, t=0.1 Lipschitz within 10%, constants "
                         "non-increasing",
            "rows": [{k: r[k] for k in ("t", "alpha", "constant", "lipschitz", "discontinuous")}
                     for r in rows],
            "lipschitz_closed_form": closed, "lipschitz_rel_error": rel}


def criterion_7(profile="full", seed=0):
    p = PROFILES[profile]
    rep = counterexample_suite(2, (1.0,), (10.0, 100.0, 1000.0), p["cx_dt"], p["cx_n"],
                               seed=seed + 5)
    l1 = rep["norms"][0]["norm"]
    slope_err = rep["divergence"]["slope_rel_error"]
    ok = abs(l1 - math.pi) <= 1e-3 and slope_err < 0.02 and rep["escape_monotone"]
    return {"id": 7, "name": "counterexample sharpness", "pass": bool(ok),
            "threshold": "L1 norm = pi +- 1e-3, log slope within 2% of pi/2, escape monotone",
            "l1_norm": l1, "slope": rep["divergence"]["slope"], "slope_rel_error": slope_err,
            "escape": [s["escape"] for s in rep["simulations"]],
            "confinement": [s["confinement"] for s in rep["simulations"]],
            "confinement_monotone": rep["confinement_monotone"]}


def criterion_8(profile="full", seed=0):
    p = PROFILES[profile]
    base = checkerboard(2)
    spec = ProblemSpec.elliptic(base, UNIT_BALL)
    ms = p["ms"]
    rep = stability_experiment(spec, mollified_sequence(base, ms),
                               Grid.for_domain(UNIT_BALL, p["h"]), labels=[f"m={m}" for m in ms],
                               ms=list(ms))
    return {"id": 8, "name": "stability under mollification", "pass": rep.strictly_decreasing,
            "threshold": "successive sup differences strictly decreasing",
            "diff_next": rep.diff_next, "diff_final": rep.diff_final}


def criterion_9(profile="full", seed=0):
    p = PROFILES[profile]
    spec = _laplacian_spec()
    coarse, _ = _laplacian_solution(p["h"])
    fine, _ = _laplacian_solution(p["h"] / 2)
    vc = viscosity_residual(coarse.solution, spec, 100, radii=(0.125,), seed=seed + 6)
    vf = viscosity_residual(fine.solution, spec, 100, radii=(0.125,), seed=seed + 6)
    mc, mf = vc.mean_margin(0.125), vf.mean_margin(0.125)
    shrink = 1.0 - mf / mc if mc > 0 else 0.0
    ok = vc.pass_fraction == 1.0 and shrink >= 0.4
    return {"id": 9, "name": "viscosity residual", "pass": bool(ok),
            "threshold": "all probes pass at h, mean margin shrinks >= 40% at h/2",
            "pass_fraction": vc.pass_fraction, "pass_fraction_fine": vf.pass_fraction,
            "margin": mc, "margin_fine": mf, "shrink": shrink}


DETERMINISM_CONFIG = """\
[acceptance]
profile = "quick"
only = [1, 3, 5, 7]
"""


def criterion_10(profile="full", seed=0):
    from .cli import manifest_without_timing, run

    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "verify.toml"
        cfg.write_text(DETERMINISM_CONFIG)
        manifests = []
        for k in range(2):
            out = Path(tmp) / f"run{k}"
            with contextlib.redirect_stdout(io.StringIO()):
                run(["verify-all", "--config", str(cfg), "--out", str(out), "--seed", "11"])
            manifests.append(manifest_without_timing(out / "manifest.json"))
    same = manifests[0] == manifests[1]
    return {"id": 10, "name": "determinism", "pass": same,
            "threshold": "two verify-all runs give identical manifests (wall time excluded)",
            "files": sorted(manifests[0].get("files", {}))}


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 11)}


def run_all(profile="full", only=None, progress=None, seed=0) -> list[dict]:
    _cache.clear()
    results = []
    for i, fn in CRITERIA.items():
        if only is not None and i not in only:
            continue
        t0 = time.perf_counter()
        res = fn(profile, seed)
        res["wall_time"] = time.perf_counter() - t0
        results.append(res)
        if progress is not None:
            progress(res)
    return results
