"""Monotone finite differences and policy iteration for stationary HJB problems.

Stencils follow the Kushner-Dupuis construction. Cross derivatives use the
corner pair selected by the sign of ``a_ij``, the axis coefficient is reduced
to ``a_ii - sum_{j != i} |a_ij|``, and drift is upwinded. Every row of the
resulting generator sums to zero.

Near a curved Dirichlet boundary the axis arms are shortened to the exact
crossing point (Shortley-Weller), and the boundary value is ``f`` at that
point. Corner neighbors outside the domain take ``f`` at their projection.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, LinearOperator, eigs

from . import kernels
from .control_problem import CoefficientField, Domain, ProblemSpec, hamiltonian_batch
from .errors import ArgumentError, SolverError
from .grid import BOUNDARY, EXTERIOR, INTERIOR, Grid, GridFunction, neighbor_offsets

MIN_ARM = 1e-8


@dataclass
class Generator:
    """Discrete generator of one control on the interior nodes.

    ``matrix @ u + const`` approximates ``0.5 tr(a D^2 u) + <b, Du>`` where
    ``const`` carries the known boundary values.
    """

    control: int
    matrix: sp.csr_matrix
    const: np.ndarray
    cost: np.ndarray
    violations: np.ndarray
    drift_dominated: np.ndarray
    terms: list = field(default_factory=list, repr=False)

    def stencil(self, pos: int) -> dict:
        """Weights by integer offset at interior position ``pos`` (center included)."""
        out = {}
        for off, w in self.terms:
            key = tuple(int(v) for v in off)
            out[key] = out.get(key, 0.0) + float(w[pos])
        return out

    def apply(self, u_int: np.ndarray) -> np.ndarray:
        return self.matrix @ u_int + self.const


def boundary_values(field: CoefficientField, grid: Grid) -> np.ndarray:
    """``f`` at the projection of every non-interior node (NaN on interior nodes)."""
    vals = np.full(grid.size, np.nan)
    if grid.domain is None:
        return vals
    idx = np.nonzero(grid.node_class != INTERIOR)[0]
    vals[idx] = field.f(grid.domain.project(grid.coords(idx)))
    return vals


def discretize_generator(field: CoefficientField, control: int, grid: Grid,
                         bvals: np.ndarray | None = None) -> Generator:
    d, h = grid.dim, grid.h
    idx = grid.interior
    n = idx.size
    X = grid.coords(idx)
    A = field.a(control, X)
    B = field.b(control, X)
    if bvals is None:
        bvals = boundary_values(field, grid)

    offdiag = np.abs(A).sum(axis=2) - np.abs(np.diagonal(A, axis1=1, axis2=2))
    alpha = np.diagonal(A, axis1=1, axis2=2) - offdiag
    violations = np.any(alpha < -1e-14, axis=1)

    dom = field.dom(X)
    if dom is None:
        dom = np.sqrt((B * B).sum(axis=1))
    drift_dominated = dom * h / field.delta > 1.0

    center = np.zeros(n)
    terms = []  # (offset, weights, cut_values or None)
    for i in range(d):
        arms, cuts = {}, {}
        for s in (1, -1):
            e = np.zeros(d, dtype=int)
            e[i] = s
            nb, _ = grid.neighbor(idx, e)
            arm = np.full(n, h)
            cut_val = None
            if grid.domain is not None:
                outside = grid.position[nb] < 0
                if np.any(outside):
                    ray = grid.domain.ray_exit(X[outside], e.astype(float))
                    arm[outside] = np.clip(ray, MIN_ARM * h, h)
                    crossing = X[outside].copy()
                    crossing[:, i] += s * arm[outside]
                    cut_val = np.full(n, np.nan)
                    cut_val[outside] = field.f(crossing)
            arms[s], cuts[s] = arm, cut_val
        hp, hm = arms[1], arms[-1]
        bp, bm = np.maximum(B[:, i], 0.0), np.maximum(-B[:, i], 0.0)
        w_plus = alpha[:, i] / (hp * (hp + hm)) + bp / hp
        w_minus = alpha[:, i] / (hm * (hp + hm)) + bm / hm
        center -= w_plus + w_minus
        for s, w in ((1, w_plus), (-1, w_minus)):
            e = np.zeros(d, dtype=int)
            e[i] = s
            terms.append((e, w, cuts[s]))
    for i in range(d):
        for j in range(i + 1, d):
            aij = A[:, i, j]
            pos, neg = np.maximum(aij, 0.0) / (2 * h * h), np.maximum(-aij, 0.0) / (2 * h * h)
            for si, sj, w in ((1, 1, pos), (-1, -1, pos), (1, -1, neg), (-1, 1, neg)):
                if not np.any(w):
                    continue
                e = np.zeros(d, dtype=int)
                e[i], e[j] = si, sj
                terms.append((e, w, None))
                center -= w
    terms.append((np.zeros(d, dtype=int), center, None))

    rows, cols, vals = [], [], []
    const = np.zeros(n)
    ar = np.arange(n)
    for off, w, cut in terms:
        nb, _ = grid.neighbor(idx, off)
        pos = grid.position[nb]
        known = pos < 0
        if cut is not None:
            known = known | ~np.isnan(cut)
        live = ~known & (w != 0)
        rows.append(ar[live])
        cols.append(pos[live])
        vals.append(w[live])
        if np.any(known):
            src = bvals[nb[known]] if cut is None else np.where(np.isnan(cut[known]),
                                                                bvals[nb[known]], cut[known])
            const[known] += w[known] * src
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, n))
    M.sum_duplicates()
    M.sort_indices()
    return Generator(control, M, const, field.g(control, X), violations, drift_dominated,
                     [(off, w) for off, w, _ in terms])


# --------------------------------------------------------------------------
# Policy iteration
# --------------------------------------------------------------------------


def estimate_omega(M: sp.csr_matrix) -> float:
    """Over-relaxation factor from the Jacobi spectral radius (ARPACK)."""
    diag = M.diagonal()
    if np.any(diag <= 0):
        return 1.0
    inv = 1.0 / diag
    n = M.shape[0]
    if n < 16:
        return 1.0

    def jac(v):
        return v - inv * (M @ v)
    op = LinearOperator((n, n), matvec=jac, dtype=float)
    try:
        ev = eigs(op, k=1, which="LM", v0=np.ones(n), tol=1e-4, maxiter=5000,
                  return_eigenvectors=False)
        rho = float(np.abs(ev[0]))
    except (ArpackNoConvergence, ArpackError):
        return 1.0
    if not rho < 1.0:
        return 1.0
    return float(min(2.0 / (1.0 + np.sqrt(1.0 - rho * rho)), 1.98))


@dataclass
class HowardResult:
    u: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float
    converged: bool
    damped: int
    linear_stats: list
    omega: float


class _PolicySystem:
    """``min_k (A_k u + r_k - sigma u) = 0`` over interior nodes."""

    def __init__(self, gens: list[Generator], sigma: float, extra):
        self.K = len(gens)
        self.n = gens[0].matrix.shape[0]
        self.sigma = float(sigma)
        self.stack = sp.vstack([g.matrix for g in gens], format="csr")
        self.r = np.stack([g.const + g.cost for g in gens]) + extra

    def q_table(self, u):
        return (self.stack @ u).reshape(self.K, self.n) + self.r - self.sigma * u

    def improve(self, u):
        Q = self.q_table(u)
        qmin = Q.min(axis=0)
        near = Q <= qmin + 1e-12 * (1.0 + np.abs(qmin))
        return np.argmax(near, axis=0)

    def residual(self, u) -> float:
        if self.n == 0:
            return 0.0
        return float(np.abs(self.q_table(u).min(axis=0)).max())

    def system(self, policy):
        rows = policy * self.n + np.arange(self.n)
        A = self.stack[rows]
        M = (self.sigma * sp.identity(self.n, format="csr") - A).tocsr()
        rhs = self.r[policy, np.arange(self.n)]
        return M, rhs


def _solve_linear(M, rhs, u0, omega, tol, max_sweeps):
    x, sweeps, res = kernels.sor_solve(M, rhs, u0, omega=omega, tol=tol, max_sweeps=max_sweeps)
    if not (res <= tol) and omega != 1.0:
        x, sweeps2, res = kernels.sor_solve(M, rhs, u0, omega=1.0, tol=tol,
                                            max_sweeps=max_sweeps)
        sweeps += sweeps2
    if not (res <= tol):
        raise SolverError("linear solve did not converge",
                          {"sweeps": sweeps, "residual": res, "tol": tol, "omega": omega})
    return x, sweeps, res


def howard(system: _PolicySystem, u0, policy0=None, *, tol=1e-8, max_outer=100,
           initial_solve=True, omega=None, max_sweeps=200_000) -> HowardResult:
    n = system.n
    u = np.array(u0, dtype=float, copy=True)
    if n == 0:
        return HowardResult(u, np.zeros(0, dtype=int), 0, 0.0, True, 0, [], 1.0)
    policy = np.zeros(n, dtype=int) if policy0 is None else np.asarray(policy0, dtype=int)
    if policy0 is None and not initial_solve:
        policy = system.improve(u)
    stats = []
    lin_tol = tol / 10.0
    if omega is None:
        omega = estimate_omega(system.system(policy)[0])
    if initial_solve:
        M, rhs = system.system(policy)
        u, sw, res = _solve_linear(M, rhs, u, omega, lin_tol, max_sweeps)
        stats.append((sw, res))
    res_old = system.residual(u)
    iterations, damped, converged = 0, 0, False
    while iterations < max_outer:
        new_policy = system.improve(u)
        stable = np.array_equal(new_policy, policy)
        policy = new_policy
        M, rhs = system.system(policy)
        u_new, sw, res = _solve_linear(M, rhs, u, omega, lin_tol, max_sweeps)
        stats.append((sw, res))
        iterations += 1
        update = float(np.abs(u_new - u).max())
        res_new = system.residual(u_new)
        if res_new > res_old and res_new > tol:
            u_new = u + 0.5 * (u_new - u)
            res_new = system.residual(u_new)
            damped += 1
        u, res_old = u_new, res_new
        if stable and update <= tol:
            converged = True
            break
    return HowardResult(u, policy, iterations, system.residual(u), converged, damped, stats,
                        omega)


@dataclass
class SolveReport:
    solution: GridFunction
    policy: GridFunction
    iterations: int
    residual: float
    converged: bool
    linear_stats: list
    violations: int
    drift_dominated: int
    damped: int = 0
    omega: float = 1.0
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "converged": self.converged, "violations": self.violations,
                "drift_dominated": self.drift_dominated, "damped": self.damped,
                "omega": self.omega, "linear_sweeps": [int(s) for s, _ in self.linear_stats],
                "h": self.solution.grid.h, "n_interior": self.solution.grid.n_interior,
                **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True, default=float)


def _extend_policy(grid: Grid, pol_int: np.ndarray) -> np.ndarray:
    """Policy on all nodes: non-interior nodes copy an adjacent interior node."""
    out = np.zeros(grid.size, dtype=float)
    out[grid.interior] = pol_int
    rest = np.nonzero(grid.node_class == BOUNDARY)[0]
    filled = np.zeros(rest.size, dtype=bool)
    for off in neighbor_offsets(grid.dim):
        if filled.all():
            break
        nb, inside = grid.neighbor(rest, off)
        pos = grid.position[nb]
        take = ~filled & inside & (pos >= 0)
        out[rest[take]] = pol_int[pos[take]]
        filled |= take
    return out


def _generators(field: CoefficientField, grid: Grid, bvals=None) -> list[Generator]:
    return [discretize_generator(field, k, grid, bvals) for k in range(field.K)]


def _report(grid, field, gens, hr: HowardResult, fill, t0, op, spec, extra=None):
    values = np.array(fill, dtype=float, copy=True)
    values[grid.interior] = hr.u
    meta = {"op": op, "problem": spec.fingerprint, "h": grid.h}
    sol = GridFunction(grid, values, meta)
    pol = GridFunction(grid, _extend_policy(grid, hr.policy), {**meta, "kind": "policy"})
    viol = int(np.any(np.stack([g.violations for g in gens]), axis=0).sum())
    dd = int(np.any(np.stack([g.drift_dominated for g in gens]), axis=0).sum())
    return SolveReport(sol, pol, hr.iterations, hr.residual, hr.converged, hr.linear_stats,
                       viol, dd, hr.damped, hr.omega, time.perf_counter() - t0, extra or {})


def policy_iteration(spec: ProblemSpec, grid: Grid, tol: float = 1e-8,
                     max_outer: int = 100) -> SolveReport:
    """Solve ``-H(x, Du, D^2u) = 0`` in D with ``u = f`` on the boundary."""
    if spec.kind != "elliptic":
        raise ArgumentError("policy_iteration needs an elliptic problem")
    if grid.domain is None:
        raise ArgumentError("grid must be built for the problem's domain")
    t0 = time.perf_counter()
    field = spec.field
    bvals = boundary_values(field, grid)
    gens = _generators(field, grid, bvals)
    system = _PolicySystem(gens, 0.0, 0.0)
    bnd = grid.node_class == BOUNDARY
    u0 = np.full(grid.n_interior, float(np.mean(bvals[bnd])) if bnd.any() else 0.0)
    hr = howard(system, u0, np.zeros(grid.n_interior, dtype=int), tol=tol, max_outer=max_outer)
    fill = np.where(np.isnan(bvals), 0.0, bvals)
    return _report(grid, field, gens, hr, fill, t0, "policy_iteration", spec)


def _discounted_once(field, rho, grid, tol, max_outer):
    gens = _generators(field, grid)
    system = _PolicySystem(gens, rho, 0.0)
    hr = howard(system, np.zeros(grid.n_interior), np.zeros(grid.n_interior, dtype=int),
                tol=tol, max_outer=max_outer)
    return gens, hr


def solve_discounted(spec: ProblemSpec, grid: Grid, tol: float = 1e-8, max_outer: int = 100,
                     enlargements: int = 2, growth: float = 0.25) -> SolveReport:
    """Solve ``rho w - H(x, Dw, D^2w) = 0`` on a box with copy-node Neumann closure.

    Truncation sensitivity: the problem is re-solved on boxes grown by
    ``growth`` (relative width) ``enlargements`` times, and the sup difference
    between consecutive solutions on the inner half of the original box is
    recorded.
    """
    if spec.kind != "discounted":
        raise ArgumentError("solve_discounted needs a discounted problem")
    if grid.domain is not None:
        raise ArgumentError("discounted solves use a box grid without a domain")
    t0 = time.perf_counter()
    field, rho = spec.field, spec.rho
    gens, hr = _discounted_once(field, rho, grid, tol, max_outer)
    report = _report(grid, field, gens, hr, np.zeros(grid.size), t0, "solve_discounted", spec)

    c = (grid.lo + grid.hi) / 2
    inner_half = (grid.hi - grid.lo) / 4
    inner_nodes = np.all(np.abs(grid.coords() - c) <= inner_half + 1e-12, axis=1)
    probe = grid.coords()[inner_nodes]
    diffs, prev = [], report.solution.values[inner_nodes]
    lo, hi = grid.lo.copy(), grid.hi.copy()
    for _ in range(enlargements):
        pad = np.ceil(growth * (hi - lo) / 2 / grid.h) * grid.h
        lo, hi = lo - pad, hi + pad
        big = Grid.box(lo, hi, grid.h)
        _, hr_big = _discounted_once(field, rho, big, tol, max_outer)
        vals = np.zeros(big.size)
        vals[big.interior] = hr_big.u
        cur = vals[big.nearest(probe)]
        diffs.append(float(np.abs(cur - prev).max()))
        prev = cur
    report.extra["truncation_diffs"] = diffs
    report.extra["truncation_monotone"] = all(b <= a for a, b in zip(diffs, diffs[1:]))
    report.wall_time = time.perf_counter() - t0
    return report


# --------------------------------------------------------------------------
# Viscosity residual
# --------------------------------------------------------------------------


def _quad_features(Y):
    d = Y.shape[1]
    cols = [Y[:, i] for i in range(d)]
    for i in range(d):
        for j in range(i, d):
            cols.append(Y[:, i] * Y[:, j] * (0.5 if i == j else 1.0))
    return np.stack(cols, axis=1)


def _unpack(coef, d):
    p = coef[:d]
    M = np.zeros((d, d))
    k = d
    for i in range(d):
        for j in range(i, d):
            M[i, j] = M[j, i] = coef[k]
            k += 1
    return p, M


@dataclass
class ViscosityReport:
    probes: list
    skipped: int
    tol: dict
    constants: dict

    @property
    def violations(self) -> list:
        return [p for p in self.probes if not (p["sub_pass"] and p["super_pass"])]

    @property
    def pass_fraction(self) -> float:
        if not self.probes:
            return 0.0
        return 1.0 - len(self.violations) / len(self.probes)

    def mean_margin(self, r=None) -> float:
        sel = [p["margin"] for p in self.probes if r is None or p["r"] == r]
        return float(np.mean(sel)) if sel else float("nan")


def viscosity_residual(u: GridFunction, spec: ProblemSpec, probe_count: int = 100,
                       radii=(0.125,), *, probes=None, c_visc: float = 1.0,
                       kappa_strict: float | None = None, seed: int = 0) -> ViscosityReport:
    """Quadratic-test-function check of the sub- and supersolution inequalities.

    At each probe the quadratic ``phi0`` with ``phi0(x0) = u(x0)`` is fitted by
    least squares over the nodes in ``B_r(x0)``. It is raised (lowered) by
    ``kappa |x - x0|^2`` until ``u - phi`` has a strict maximum (minimum) at
    ``x0``. ``kappa`` is the smallest touching shift plus ``kappa_strict``
    (default ``h``). The subsolution test requires ``max H(phi+) >= -tol``
    over the ball. The supersolution test requires ``min H(phi-) <= tol``.
    Here ``tol = c_visc * (h / r + r)``.
    """
    grid = u.grid
    h = grid.h
    ks = h if kappa_strict is None else kappa_strict
    X_all = grid.coords()
    interior = grid.interior
    domain = spec.domain if spec.domain.bounded else None
    if probes is None:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(interior.size, size=min(probe_count, interior.size), replace=False)
        probe_nodes = interior[np.sort(chosen)]
    else:
        probe_nodes = grid.nearest(np.atleast_2d(probes))
    out, skipped, tols = [], 0, {}
    for r in radii:
        tol = c_visc * (h / r + r)
        tols[float(r)] = tol
        reach = int(np.ceil(r / h))
        span = np.arange(-reach, reach + 1)
        offs = np.stack(np.meshgrid(*([span] * grid.dim), indexing="ij"), axis=-1)
        offs = offs.reshape(-1, grid.dim)
        offs = offs[np.sqrt((offs * offs).sum(axis=1)) * h <= r + 1e-12]
        for node in probe_nodes:
            x0 = X_all[node]
            if domain is not None and domain.signed_distance(x0[None, :])[0] > -r:
                skipped += 1
                continue
            multi = grid.unravel(np.array([node]))[0] + offs
            if np.any(multi < 0) or np.any(multi >= np.array(grid.shape)):
                skipped += 1
                continue
            nodes = grid.ravel(multi)
            Y = X_all[nodes] - x0
            du = u.values[nodes] - u.values[node]
            nz = np.any(Y != 0, axis=1)
            F = _quad_features(Y[nz])
            coef, *_ = np.linalg.lstsq(F, du[nz], rcond=None)
            p, M = _unpack(coef, grid.dim)
            err = du[nz] - F @ coef
            r2 = (Y[nz] ** 2).sum(axis=1)
            k_plus = max(0.0, float((err / r2).max())) + ks
            k_minus = max(0.0, float((-err / r2).max())) + ks
            eye = np.eye(grid.dim)
            Xb = X_all[nodes]
            res = {}
            for name, Hs in (("sub", M + 2 * k_plus * eye), ("super", M - 2 * k_minus * eye)):
                P = p + Y @ Hs
                vals, _ = hamiltonian_batch(spec.field, Xb, P, Hs)
                res[name] = vals
            sub_val = float(res["sub"].max())
            super_val = float(res["super"].min())
            out.append({"x0": x0.tolist(), "r": float(r), "sub": sub_val, "super": super_val,
                        "sub_pass": sub_val >= -tol, "super_pass": super_val <= tol,
                        "kappa_plus": k_plus, "kappa_minus": k_minus,
                        "margin": max(abs(sub_val), abs(super_val))})
    return ViscosityReport(out, skipped, tols, {"c_visc": c_visc, "kappa_strict": ks})
