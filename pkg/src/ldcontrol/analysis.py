"""Empirical regularity estimators and the experiment suites built on them."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import least_squares

from .control_problem import (CoefficientField, Domain, ProblemSpec, check_ellipticity, lp_norm,
                              mollify)
from .errors import ArgumentError
from .grid import EXTERIOR, INTERIOR, Grid, GridFunction
from .hjb_elliptic import policy_iteration
from .mc_value import _mean_stderr
from .presets import ld_singular, oscillating_cost, singular_profile
from .sde_engine import FeedbackPolicy, simulate_many


def _loglog_fit(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    lx, ly = np.log(x), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_res = float(((ly - pred) ** 2).sum())
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    return float(slope), float(intercept), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


@dataclass
class RegularityReport:
    scales: np.ndarray       # strictly decreasing
    increments: np.ndarray   # max |u(x) - u(y)| over lattice pairs at each scale
    alpha: float
    constant: float
    r2: float
    h: float
    constant_field: bool = False
    discontinuous: bool = False
    excluded: list = field(default_factory=list)

    def max_quotient(self, alpha: float, scale: float) -> float:
        i = int(np.argmin(np.abs(self.scales - scale)))
        return float(self.increments[i] / self.scales[i] ** alpha)

    @property
    def quotients(self) -> np.ndarray:
        a = self.alpha if math.isfinite(self.alpha) else 1.0
        return self.increments / self.scales ** a

    def fit(self) -> dict:
        return {"exponent": self.alpha, "constant": self.constant, "r2": self.r2,
                "residual": 1.0 - self.r2 if math.isfinite(self.r2) else float("nan"),
                "constant_field": self.constant_field, "discontinuous": self.discontinuous}

    def to_json(self) -> str:
        return json.dumps(self.fit(), indent=2, sort_keys=True)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scale", "max_increment", "quotient"])
            for s, m, q in zip(self.scales, self.increments, self.quotients):
                w.writerow([repr(float(s)), repr(float(m)), repr(float(q))])
        return path


def default_scales(grid: Grid, count: int = 4) -> list[float]:
    return [grid.h * 2 ** j for j in range(count, 0, -1)]


def holder_exponent(u: GridFunction, region=None, scales=None) -> RegularityReport:
    """Log-log fit of the largest lattice increment against the pair distance.

    ``region`` is a boolean mask over grid nodes (default: every interior
    node). Pairs are taken along the coordinate axes at integer multiples of
    ``h``; scales below ``2h`` are dropped since they only see the interpolant.
    """
    grid = u.grid
    h = grid.h
    mask = (grid.node_class == INTERIOR) if region is None else np.asarray(region, dtype=bool)
    if mask.shape != (grid.size,):
        raise ArgumentError("region mask does not match the grid")
    mask = mask & (grid.node_class != EXTERIOR)
    scales = default_scales(grid) if scales is None else [float(s) for s in scales]
    kept, excluded = [], []
    for s in scales:
        k = s / h
        if abs(k - round(k)) > 1e-9 * max(1.0, k):
            raise ArgumentError(f"scale {s} is not a multiple of h={h}")
        (kept if round(k) >= 2 else excluded).append(int(round(k)))
    kept = sorted(set(kept), reverse=True)
    if len(kept) < 3:
        raise ArgumentError("holder_exponent needs at least 3 scales >= 2h")
    U = u.values.reshape(grid.shape)
    M = mask.reshape(grid.shape)
    incs = []
    for k in kept:
        best = 0.0
        for ax in range(grid.dim):
            if grid.shape[ax] <= k:
                continue
            a = [slice(None)] * grid.dim
            b = [slice(None)] * grid.dim
            a[ax], b[ax] = slice(k, None), slice(None, -k)
            ok = M[tuple(a)] & M[tuple(b)]
            if ok.any():
                best = max(best, float(np.abs(U[tuple(a)] - U[tuple(b)])[ok].max()))
        incs.append(best)
    sc = np.array(kept, dtype=float) * h
    inc = np.array(incs)
    ref = max(1.0, float(np.abs(u.values[mask]).max())) if mask.any() else 1.0
    if np.all(inc <= 1e-12 * ref):
        return RegularityReport(sc, inc, float("nan"), 0.0, float("nan"), h,
                                constant_field=True, excluded=[k * h for k in excluded])
    pos = inc > 0
    if pos.sum() < 2:
        alpha, const, r2 = 0.0, float(inc.max()), float("nan")
    else:
        alpha, intercept, r2 = _loglog_fit(sc[pos], inc[pos])
        const = math.exp(intercept)
    # a jump keeps the increment flat as the scale shrinks, so M(s)/s blows up
    disc = alpha < 0.2
    return RegularityReport(sc, inc, alpha, const, r2, h, discontinuous=bool(disc),
                            excluded=[k * h for k in excluded])


def interior_scaling(u: GridFunction, center, radii, scales=None) -> dict:
    """Hölder fits on nested balls ``B_R(center)``; the constant is fitted against ``R``."""
    grid = u.grid
    X = grid.coords()
    c = np.asarray(center, dtype=float)
    base = grid.node_class == INTERIOR if grid.domain is not None else np.ones(grid.size, bool)
    rows = []
    for R in sorted(radii):
        mask = base & (np.linalg.norm(X - c, axis=1) <= R)
        rep = holder_exponent(u, mask, scales)
        rows.append({"R": float(R), "alpha": rep.alpha, "constant": rep.constant, "r2": rep.r2})
    good = [r for r in rows if r["constant"] > 0 and math.isfinite(r["alpha"])]
    fit = {"exponent": float("nan"), "constant": float("nan"), "r2": float("nan")}
    if len(good) >= 2:
        slope, icpt, r2 = _loglog_fit(np.array([r["R"] for r in good]),
                                      np.array([r["constant"] for r in good]))
        fit = {"exponent": slope, "constant": math.exp(icpt), "r2": r2}
    return {"rows": rows, "fit": fit}


def boundary_modulus(u: GridFunction, f: Callable, domain: Domain, anchors, radii,
                     f_modulus: Callable | None = None) -> dict:
    """Largest ``|u(x) - f(x0)|`` over nodes within ``r`` of each boundary anchor.

    The envelope over anchors is fitted to ``C r^beta + w_f(C r^(beta/2))``
    (``C r^beta`` alone when no modulus of ``f`` is declared).
    """
    grid = u.grid
    h = grid.h
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    radii = np.array(sorted(float(r) for r in radii))
    if np.any(radii < 2 * h - 1e-12):
        raise ArgumentError("radii must be at least 2h")
    sd = domain.signed_distance(anchors)
    if np.any(np.abs(sd) > h):
        bad = anchors[np.abs(sd) > h][0]
        raise ArgumentError(f"anchor {bad.tolist()} is not on the boundary")
    keep = grid.node_class != EXTERIOR
    X = grid.coords()[keep]
    vals = u.values[keep]
    f0 = np.asarray(f(anchors), dtype=float)
    table = []
    for a, x0 in enumerate(anchors):
        dist = np.linalg.norm(X - x0, axis=1)
        for r in radii:
            sel = dist <= r
            m = float(np.abs(vals[sel] - f0[a]).max()) if sel.any() else 0.0
            table.append({"anchor": a, "x0": x0.tolist(), "r": float(r), "value": m})
    env = np.array([max(row["value"] for row in table if row["r"] == r) for r in radii])
    top = float(env.max())
    fit = {"constant": 0.0, "exponent": float("nan"), "residual": 0.0, "r2": float("nan")}
    if top > 0:
        w = f_modulus if f_modulus is not None else (lambda rho: 0.0 * rho)

        def resid(p):
            C, beta = math.exp(p[0]), p[1]
            return (C * radii ** beta + w(C * radii ** (beta / 2)) - env) / top
        sol = least_squares(resid, x0=[0.0, 1.0], bounds=([-30.0, 1e-3], [30.0, 4.0]))
        r = resid(sol.x)
        fit = {"constant": math.exp(sol.x[0]), "exponent": float(sol.x[1]),
               "residual": float(np.abs(r).max()), "r2": float("nan")}
    return {"table": table, "envelope": env.tolist(), "radii": radii.tolist(), "fit": fit}


@dataclass
class StabilityReport:
    labels: list
    values: list               # solution at a reference point per member
    diff_next: list            # ||u^m - u^{m+1}||_inf
    diff_final: list           # ||u^m - u^last||_inf
    tol: float
    rate: dict = field(default_factory=dict)

    @property
    def cauchy(self) -> bool:
        d = self.diff_next
        return all(d[i + 1] <= d[i] + self.tol for i in range(len(d) - 1))

    @property
    def strictly_decreasing(self) -> bool:
        d = self.diff_next
        return all(d[i + 1] < d[i] for i in range(len(d) - 1))

    def rows(self) -> list[dict]:
        n = len(self.labels)
        return [{"label": self.labels[i], "value": self.values[i],
                 "diff_next": self.diff_next[i] if i < n - 1 else None,
                 "diff_final": self.diff_final[i]} for i in range(n)]

    def summary(self) -> dict:
        return {"rows": self.rows(), "cauchy": self.cauchy,
                "strictly_decreasing": self.strictly_decreasing, "tol": self.tol,
                "rate": self.rate}


def mollified_sequence(field_: CoefficientField, ms) -> list[CoefficientField]:
    return [mollify(field_, 1.0 / m) for m in ms]


def oscillating_sequence(field_: CoefficientField, ms, amplitude: float = 1.0):
    return [oscillating_cost(field_, m, amplitude) for m in ms]


def fit_rate(ms, diffs) -> dict:
    """Fit ``diff ~ C / m^p`` and the fixed-rate constant ``max(diff * m)``."""
    ms = np.asarray(ms, dtype=float)
    d = np.asarray(diffs, dtype=float)
    pos = d > 0
    out = {"c_over_m": float((d * ms).max()) if d.size else 0.0}
    if pos.sum() >= 2:
        slope, icpt, r2 = _loglog_fit(ms[pos], d[pos])
        out.update(exponent=-slope, constant=math.exp(icpt), r2=r2)
    return out


def stability_experiment(spec: ProblemSpec, fields: list[CoefficientField], grid: Grid, *,
                         tol: float = 1e-8, labels=None, ms=None, ref_point=None,
                         ellipticity_samples: int = 256) -> StabilityReport:
    """Solve the elliptic problem for each member of a coefficient sequence.

    ``ms``, when given, is the sequence index used for the ``C/m`` fit of the
    distances to the last member.
    """
    if spec.kind != "elliptic":
        raise ArgumentError("stability experiments use the elliptic problem")
    if len(fields) < 2:
        raise ArgumentError("need at least two perturbed fields")
    labels = list(labels) if labels is not None else [f.name for f in fields]
    X = grid.coords(grid.interior)
    step = max(1, X.shape[0] // ellipticity_samples)
    Xs = X[::step]
    sols, vals = [], []
    ref = np.zeros((1, grid.dim)) if ref_point is None else np.atleast_2d(ref_point)
    for f in fields:
        for k in range(f.K):
            check_ellipticity(f, (np.full(Xs.shape[0], k), Xs))
        rep = policy_iteration(ProblemSpec.elliptic(f, spec.domain), grid, tol=tol)
        sols.append(rep.solution.values)
        vals.append(float(rep.solution.at(ref)[0]))
    live = grid.node_class != EXTERIOR
    dn = [float(np.abs(sols[i] - sols[i + 1])[live].max()) for i in range(len(sols) - 1)]
    df = [float(np.abs(s - sols[-1])[live].max()) for s in sols]
    rate = fit_rate(ms[:-1], df[:-1]) if ms is not None else {}
    return StabilityReport(labels, vals, dn, df, tol, rate)


def _sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / math.gamma(d / 2)


def counterexample_suite(d: int = 2, eps_list=(1.0,), truncation_list=(10.0, 100.0, 1000.0),
                         dt: float = 1e-4, n_paths: int = 10_000, seed: int = 0, *,
                         horizon: float = 1.0, cutoffs=None, strength: float | None = None,
                         threads: int = 1) -> dict:
    """Norm dichotomy of the singular inward drift and its truncated simulations.

    The quadrature part uses the unit profile ``1/(2|x|)`` on the unit ball:
    its ``L_{d-eps}`` norms are finite and ``int_{B_1 minus B_a} |b|^d`` grows
    like ``S_{d-1} / 2^d * ln(1/a)``. The simulation part runs the truncated
    drift from the origin up to ``horizon`` and reports how often paths reach
    the unit sphere. Existence failure itself cannot be observed numerically,
    so the monotone degeneration of escape as the truncation is removed is
    what gets tested.
    """
    if d < 2:
        raise ArgumentError("d must be at least 2")
    ball = Domain.ball([0.0] * d, 1.0)
    norms = []
    for eps in eps_list:
        p = d - eps
        if not 1 <= p < d:
            raise ArgumentError("eps must give an exponent in [1, d)")
        val = lp_norm(singular_profile, ball, p)
        fine = lp_norm(singular_profile, ball, p, epsrel=1e-11)
        closed = (_sphere_area(d) / 2 ** p / (d - p)) ** (1 / p)
        norms.append({"eps": eps, "p": p, "norm": val, "closed_form": closed,
                      "richardson_diff": abs(val - fine)})
    cutoffs = list(cutoffs) if cutoffs is not None else [10.0 ** -k for k in range(1, 7)]
    div = [lp_norm(singular_profile, ball, d, inner_cutoff=a) ** d for a in cutoffs]
    logs = np.log(1.0 / np.asarray(cutoffs))
    slope, intercept = np.polyfit(logs, div, 1)
    target = _sphere_area(d) / 2 ** d
    divergence = {"cutoffs": cutoffs, "integrals": div, "slope": float(slope),
                  "intercept": float(intercept), "target_slope": target,
                  "slope_rel_error": abs(slope - target) / target}

    sims = []
    policy = FeedbackPolicy.constant(0, "only")
    for L in sorted(truncation_list):
        field_ = ld_singular(d, strength=strength, truncation=L)
        res = simulate_many(field_, ball, policy, np.zeros(d), dt, n_paths, seed,
                            horizon=horizon, threads=threads)
        esc, esc_se = _mean_stderr(res.exited.astype(float))
        sup, sup_se = _mean_stderr(np.minimum(res.sup_norm, 1.0))
        sims.append({"truncation": L, "escape": esc, "escape_stderr": esc_se,
                     "confinement": 1.0 - sup, "confinement_stderr": sup_se,
                     "clip_events": int(res.clips.sum()), "n": n_paths})
    esc_ok = all(sims[i + 1]["escape"] <= sims[i]["escape"] + 3 * math.hypot(
        sims[i]["escape_stderr"], sims[i + 1]["escape_stderr"]) for i in range(len(sims) - 1))
    conf_ok = all(sims[i + 1]["confinement"] >= sims[i]["confinement"] - 3 * math.hypot(
        sims[i]["confinement_stderr"], sims[i + 1]["confinement_stderr"])
        for i in range(len(sims) - 1))
    return {"d": d, "norms": norms, "divergence": divergence, "simulations": sims,
            "escape_monotone": esc_ok, "confinement_monotone": conf_ok, "dt": dt,
            "horizon": horizon, "seed": seed,
            "strength": float(d if strength is None else strength)}
