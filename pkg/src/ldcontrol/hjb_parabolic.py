"""Backward time stepping of the parabolic HJB equation (the semigroup S_t).

The whole-space problem is truncated to a box with copy-node Neumann closure.
Values within ``2 sqrt(t / delta)`` of the box edge are marked untrusted.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from scipy.optimize import least_squares

from .control_problem import CoefficientField
from .errors import ArgumentError
from .expr import compile_expression
from .grid import Grid, GridFunction
from .hjb_elliptic import (_PolicySystem, _generators, _solve_linear, estimate_omega, howard)
from .sde_engine import FeedbackPolicy


def trusted_box(grid: Grid, t: float, delta: float) -> tuple[np.ndarray, np.ndarray]:
    r = 2.0 * math.sqrt(t / delta)
    return grid.lo + r, grid.hi - r


@dataclass
class SemigroupRun:
    terminal: GridFunction
    output: GridFunction
    t: float
    dt: float
    n_steps: int
    policies: np.ndarray | None
    inner_lo: np.ndarray
    inner_hi: np.ndarray
    closure: str = "neumann"
    mode: str = "implicit"
    stats: dict = field(default_factory=dict)
    levels: list | None = None   # u after m steps, kept on request; not persisted

    @property
    def trusted(self) -> np.ndarray:
        X = self.output.grid.coords()
        return np.all((X >= self.inner_lo - 1e-12) & (X <= self.inner_hi + 1e-12), axis=1)

    def values_at(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated values and a flag telling whether each point is trusted."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        ok = np.all((X >= self.inner_lo) & (X <= self.inner_hi), axis=1)
        return self.output.at(X), ok

    def feedback(self) -> FeedbackPolicy:
        if self.policies is None:
            raise ArgumentError("policies were not stored for this run")
        grid = self.output.grid
        grids = [GridFunction(grid, p.astype(float)) for p in self.policies]
        return FeedbackPolicy.time_dependent(grids, self.dt, self.t)

    def save(self, directory) -> dict:
        """Write terminal.csv, output.csv, policies.bin and manifest.json."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.terminal.to_csv(d / "terminal.csv")
        self.output.to_csv(d / "output.csv")
        pol = self.policies if self.policies is not None else np.zeros((0, self.output.grid.size))
        (d / "policies.bin").write_bytes(np.asarray(pol, dtype="<i2").tobytes())
        files = sorted(p.name for p in d.iterdir() if p.name != "manifest.json")
        manifest = {"t": self.t, "dt": self.dt, "n_steps": self.n_steps, "mode": self.mode,
                    "closure": self.closure, "inner_lo": self.inner_lo.tolist(),
                    "inner_hi": self.inner_hi.tolist(),
                    "policies_shape": list(pol.shape), "policies_dtype": "int16-le",
                    "stats": {k: v for k, v in self.stats.items() if k != "wall_time"},
                    "files": {n: hashlib.sha256((d / n).read_bytes()).hexdigest() for n in files}}
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, directory) -> "SemigroupRun":
        d = Path(directory)
        m = json.loads((d / "manifest.json").read_text())
        term = GridFunction.from_csv(d / "terminal.csv")
        out = GridFunction.from_csv(d / "output.csv")
        shape = tuple(m["policies_shape"])
        pol = np.frombuffer((d / "policies.bin").read_bytes(), dtype="<i2").reshape(shape)
        return cls(term, out, m["t"], m["dt"], m["n_steps"], pol.astype(np.int16),
                   np.array(m["inner_lo"]), np.array(m["inner_hi"]), m["closure"], m["mode"],
                   m["stats"])


def _terminal_on(grid: Grid, f, dim: int) -> GridFunction:
    if isinstance(f, GridFunction):
        if not f.grid.same_lattice(grid):
            raise ArgumentError("terminal grid function lives on a different grid")
        return GridFunction(grid, f.values.copy(), dict(f.meta))
    if isinstance(f, str):
        expr = compile_expression(f, dim)
        return GridFunction.from_function(grid, expr, source=f)
    return GridFunction.from_function(grid, f)


def semigroup_apply(field_: CoefficientField, f, t: float, grid: Grid, dt: float, *,
                    mode: str = "implicit", converged: bool = False, tol: float = 1e-10,
                    store_policies: bool = True, keep_levels: bool = False) -> SemigroupRun:
    """``S_t f`` on ``grid`` by ``ceil(t / dt)`` backward steps.

    ``mode="implicit"`` takes one policy-improvement pass per step: the policy
    minimizing the Hamiltonian at the previous level, then an implicit solve.
    ``converged=True`` iterates each step to a stable policy instead.
    ``mode="explicit"`` uses the monotone forward update and requires
    ``dt <= h^2 delta / (2 d)``. ``tol`` bounds the per-step solve error in
    the sup norm. ``keep_levels=True`` keeps every intermediate level.
    """
    if t < 0:
        raise ArgumentError("t must be non-negative")
    if grid.domain is not None:
        raise ArgumentError("semigroup runs use a box grid with Neumann closure")
    if mode not in ("implicit", "explicit"):
        raise ArgumentError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    term = _terminal_on(grid, f, field_.dim)
    n_steps = int(math.ceil(t / dt - 1e-9)) if t > 0 else 0
    step = t / n_steps if n_steps else dt
    if mode == "explicit":
        guard = grid.h ** 2 * field_.delta / (2 * field_.dim)
        if step > guard * (1 + 1e-12):
            raise ArgumentError(f"explicit step {step:g} exceeds the stability bound {guard:g}")
    lo, hi = trusted_box(grid, t, field_.delta)
    u = term.values.copy()
    pols = np.zeros((n_steps, grid.size), dtype=np.int16) if store_policies else None
    stats = {"sweeps": 0, "outer": 0, "violations": 0}
    levels = [u.copy()] if keep_levels else None
    if n_steps:
        gens = _generators(field_, grid)
        stats["violations"] = int(np.any(np.stack([g.violations for g in gens]), axis=0).sum())
        sigma = 0.0 if mode == "explicit" else 1.0 / step
        system = _PolicySystem(gens, sigma, 0.0)
        base_r = system.r.copy()
        omega = 1.0
        if mode == "implicit":
            omega = estimate_omega(system.system(np.zeros(grid.size, dtype=int))[0])
        for m in range(n_steps):
            if mode == "explicit":
                Q = system.q_table(u)
                policy = system.improve(u)
                u = u + step * Q[policy, np.arange(u.size)]
            else:
                system.r = base_r + u / step
                if converged:
                    hr = howard(system, u, None, tol=tol, max_outer=50, initial_solve=False,
                                omega=omega)
                    u, policy = hr.u, hr.policy
                    stats["outer"] += hr.iterations
                    stats["sweeps"] += sum(s for s, _ in hr.linear_stats)
                else:
                    policy = system.improve(u)
                    M, rhs = system.system(policy)
                    u, sw, _ = _solve_linear(M, rhs, u, omega, tol / step, 1_000_000)
                    stats["sweeps"] += sw
                    stats["outer"] += 1
            if pols is not None:
                pols[m] = policy
            if levels is not None:
                levels.append(u.copy())
        stats["omega"] = omega
    stats["wall_time"] = time.perf_counter() - t0
    out = GridFunction(grid, u, {"op": "semigroup_apply", "t": t, "dt": step, "mode": mode})
    return SemigroupRun(term, out, t, step, n_steps, pols, lo, hi, "neumann", mode, stats,
                        levels)


def check_semigroup(field_: CoefficientField, f, t: float, s: float, grid: Grid, dt: float, *,
                    c_tol: float = 1.0, exact=None, **kw) -> dict:
    """Compare ``S_{t+s} f`` with ``S_t (S_s f)`` on the trusted nodes of the longer run.

    ``exact(time, X)``, when given, is used to report each leg's error
    against a closed form.
    """
    if isinstance(f, GridFunction) and not f.grid.same_lattice(grid):
        raise ArgumentError("terminal data and grid do not match")
    if t < 0 or s < 0:
        raise ArgumentError("t and s must be non-negative")
    full = semigroup_apply(field_, f, t + s, grid, dt, store_policies=False, **kw)
    first = semigroup_apply(field_, f, s, grid, dt, store_policies=False, **kw)
    second = semigroup_apply(field_, first.output, t, grid, dt, store_policies=False, **kw)
    trusted = full.trusted
    diff = np.abs(full.output.values - second.output.values)[trusted]
    gap = float(diff.max()) if diff.size else 0.0
    tol = c_tol * (grid.h + dt)
    report = {"gap": gap, "tol": tol, "c_tol": c_tol, "pass": gap <= tol, "h": grid.h,
              "dt": dt, "t": t, "s": s, "trusted_nodes": int(trusted.sum())}
    if exact is not None:
        X = grid.coords()[trusted]
        report["error_full"] = float(np.abs(full.output.values[trusted]
                                            - exact(t + s, X)).max())
        report["error_composed"] = float(np.abs(second.output.values[trusted]
                                                - exact(t + s, X)).max())
    return report


def regularization_probe(field_: CoefficientField, f, t_list, grid: Grid, dt: float,
                         scales=None) -> list[dict]:
    """Hölder fits of ``S_t f`` on the trusted region for each ``t``."""
    from .analysis import holder_exponent

    rows = []
    for t in t_list:
        run = semigroup_apply(field_, f, t, grid, dt, store_policies=False)
        rep = holder_exponent(run.output, run.trusted, scales)
        rows.append({"t": float(t), "alpha": rep.alpha, "constant": rep.constant, "r2": rep.r2,
                     "lipschitz": rep.max_quotient(1.0, rep.scales[-1]),
                     "discontinuous": rep.discontinuous, "constant_field": rep.constant_field,
                     "scales": list(rep.scales), "increments": list(rep.increments)})
    return rows


def joint_modulus(field_: CoefficientField, f, t_final: float, grid: Grid, dt: float, lags, *,
                  f_modulus=None) -> dict:
    """Oscillation of ``(t, x) -> S_t f`` over parabolic pairs.

    For a lag of ``L`` steps the pairs are ``(t, x)`` and ``(t + L dt, x + k h e_i)``
    with ``k h`` the lattice length nearest ``sqrt(L dt)`` (at least ``h``), over
    all levels and all nodes trusted at ``t_final``. With ``r`` the larger of
    the two lengths, the envelope is fitted to ``C r^alpha + w_f(C r)``.
    """
    run = semigroup_apply(field_, f, t_final, grid, dt, store_policies=False, keep_levels=True)
    step, n = run.dt, run.n_steps
    lags = sorted({int(L) for L in lags})
    if not lags or lags[0] < 1 or lags[-1] > n:
        raise ArgumentError(f"lags must lie in [1, {n}] steps")
    U = np.stack(run.levels)
    trusted = run.trusted
    idx = grid.unravel(np.arange(grid.size))
    rows = []
    for L in lags:
        k = max(1, int(round(math.sqrt(L * step) / grid.h)))
        worst = 0.0
        for axis in range(grid.dim):
            for sign in (1, -1):
                j = idx.copy()
                j[:, axis] += sign * k
                ok = trusted & (j[:, axis] >= 0) & (j[:, axis] < grid.shape[axis])
                src = np.flatnonzero(ok)
                dst = grid.ravel(j[ok])
                keep = trusted[dst]
                src, dst = src[keep], dst[keep]
                if src.size:
                    worst = max(worst, float(np.abs(U[L:, dst] - U[:n + 1 - L, src]).max()))
        r = max(math.sqrt(L * step), k * grid.h)
        rows.append({"lag_steps": L, "time_lag": L * step, "space_lag": k * grid.h, "r": r,
                     "value": worst})
    r = np.array([row["r"] for row in rows])
    env = np.array([row["value"] for row in rows])
    top = float(env.max())
    fit = {"constant": 0.0, "exponent": float("nan"), "residual": 0.0}
    if top > 0 and len(rows) >= 2:
        w = f_modulus if f_modulus is not None else (lambda x: 0.0 * x)

        def resid(p):
            C, a = math.exp(p[0]), p[1]
            return (C * r ** a + w(C * r) - env) / top
        sol = least_squares(resid, x0=[0.0, 1.0], bounds=([-30.0, 1e-3], [30.0, 2.0]))
        fit = {"constant": math.exp(sol.x[0]), "exponent": float(sol.x[1]),
               "residual": float(np.abs(resid(sol.x)).max())}
    return {"rows": rows, "fit": fit, "t_final": t_final, "dt": step, "h": grid.h}
