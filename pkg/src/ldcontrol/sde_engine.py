"""Euler-Maruyama simulation of controlled diffusions with exit detection.

Each path draws its Gaussian increments from its own generator, seeded by
``SeedSequence(seed, spawn_key=(path_id,))``, in blocks of at most ``BLOCK``
steps. Streams are consumed sequentially, so the block length only affects
speed and memory.
All per-path arithmetic is elementwise, so a path's trajectory does not
depend on which other paths share its batch, on the chunk size, or on the
thread count.
"""

from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .control_problem import CoefficientField, Domain, ProblemSpec, row_norm
from .errors import ArgumentError, DataError, EllipticityError
from .grid import GridFunction

BLOCK = 1024
NOISE_BUDGET = 1 << 24  # floats held in one noise block
C_CLIP = 10.0
TRUNCATION_WARN = 0.01


def sqrt_spd(A) -> np.ndarray:
    """Symmetric square root by spectral decomposition."""
    A = np.asarray(A, dtype=float)
    if np.abs(A - A.T).max() > 1e-10:
        raise DataError("matrix is not symmetric")
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    if w.min() <= 0:
        raise EllipticityError(f"matrix has non-positive eigenvalue {w.min():.3e}")
    return (V * np.sqrt(w)) @ V.T


def sqrt_spd_batch(A: np.ndarray) -> np.ndarray:
    """Square roots of a stack ``(n, d, d)``.

    In two dimensions the closed form ``(A + sqrt(det) I) / sqrt(tr + 2 sqrt(det))``
    is used; it is exact to rounding and purely elementwise.
    """
    n, d, _ = A.shape
    if d == 2:
        a, b, c = A[:, 0, 0], A[:, 0, 1], A[:, 1, 1]
        det = a * c - b * b
        if np.any(det <= 0) or np.any(a <= 0):
            raise EllipticityError("diffusion matrix is not positive definite")
        s = np.sqrt(det)
        t = np.sqrt(a + c + 2 * s)
        S = np.empty_like(A)
        S[:, 0, 0] = (a + s) / t
        S[:, 1, 1] = (c + s) / t
        S[:, 0, 1] = S[:, 1, 0] = b / t
        return S
    w, V = np.linalg.eigh(A)
    if np.any(w <= 0):
        raise EllipticityError("diffusion matrix is not positive definite")
    return np.einsum("nij,nj,nkj->nik", V, np.sqrt(w), V)


# --------------------------------------------------------------------------
# Policies
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """Constant control, a grid of control indices, or one grid per time step.

    For the time-dependent form, ``grids[m - 1]`` is used while the time to
    go lies in ``((m - 1) step, m step]``.
    """

    kind: str
    index: int = 0
    grid_fn: GridFunction | None = None
    grids: tuple = ()
    step: float = 0.0
    horizon: float = 0.0
    name: str = ""

    @classmethod
    def constant(cls, k: int, name: str = "") -> "FeedbackPolicy":
        return cls("constant", index=int(k), name=name or f"const{k}")

    @classmethod
    def from_grid(cls, gf: GridFunction, name: str = "grid") -> "FeedbackPolicy":
        return cls("grid", grid_fn=gf, name=name)

    @classmethod
    def time_dependent(cls, grids, step: float, horizon: float,
                       name: str = "time_grid") -> "FeedbackPolicy":
        return cls("time_grid", grids=tuple(grids), step=float(step), horizon=float(horizon),
                   name=name)

    def validate(self, K: int):
        if self.kind == "constant":
            ok = 0 <= self.index < K
        elif self.kind == "grid":
            ok = self.grid_fn.values.max() < K and self.grid_fn.values.min() >= 0
        else:
            ok = all(g.values.max() < K and g.values.min() >= 0 for g in self.grids)
        if not ok:
            raise DataError(f"policy {self.name!r} uses a control index outside [0, {K})")

    def controls(self, t: float, X: np.ndarray) -> np.ndarray | int:
        if self.kind == "constant":
            return self.index
        if self.kind == "grid":
            gf = self.grid_fn
        else:
            m = int(math.ceil((self.horizon - t) / self.step - 1e-9))
            gf = self.grids[min(max(m, 1), len(self.grids)) - 1]
        return gf.values[gf.grid.nearest(X)].astype(np.int64)


# --------------------------------------------------------------------------
# Simulation
# --------------------------------------------------------------------------


@dataclass
class BatchResult:
    ids: np.ndarray
    exited: np.ndarray
    tau: np.ndarray
    cost: np.ndarray
    disc_cost: np.ndarray
    end: np.ndarray
    truncated: np.ndarray
    clips: np.ndarray
    sup_norm: np.ndarray
    dt: float

    @classmethod
    def concat(cls, parts: list["BatchResult"]) -> "BatchResult":
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("ids", "exited", "tau", "cost", "disc_cost", "end", "truncated",
                               "clips", "sup_norm")), parts[0].dt)

    def payoff(self, field: CoefficientField, terminal: bool = True) -> np.ndarray:
        """Running cost plus ``f`` at the exit (or terminal) point."""
        if not terminal:
            return self.cost.copy()
        return self.cost + field.f(self.end)


def _draw_block(gens, sign, dim, block):
    """Next ``block`` increments of each stream, laid out ``(block, n, dim)``."""
    buf = np.empty((len(gens), block, dim))
    for i, g in enumerate(gens):
        g.standard_normal(out=buf[i])
    if sign is not None:
        buf *= sign[:, None, None]
    return np.ascontiguousarray(buf.transpose(1, 0, 2))


def _drift(field, k, X, dt):
    # fields whose drift has a closed-form flow step with it, so that a
    # singular drift cannot overshoot across its singularity
    flow = getattr(field.drift, "flow", None)
    if flow is None:
        return field.b(k, X)
    return (flow(field.controls.params[k], X, dt) - X) / dt


def _step_coefficients(field, policy, t, X, identity_diffusion, dt):
    ks = policy.controls(t, X)
    n, d = X.shape
    if np.isscalar(ks) or np.ndim(ks) == 0:
        k = int(ks)
        A = None if identity_diffusion else field.a(k, X)
        return _drift(field, k, X, dt), A, field.g(k, X), np.full(n, k)
    B = np.empty((n, d))
    A = None if identity_diffusion else np.empty((n, d, d))
    G = np.empty(n)
    for k in np.unique(ks):
        m = ks == k
        B[m], G[m] = _drift(field, int(k), X[m], dt), field.g(int(k), X[m])
        if A is not None:
            A[m] = field.a(int(k), X[m])
    return B, A, G, ks


def _domain_code(domain, d):
    zeros = np.zeros(d)
    if domain is None or not domain.bounded:
        return 0, zeros, 0.0, zeros, zeros
    if domain.shape == "ball":
        return 1, np.asarray(domain.center, dtype=float), float(domain.radius), zeros, zeros
    return 2, zeros, 0.0, np.asarray(domain.lo, dtype=float), np.asarray(domain.hi, dtype=float)


def simulate_batch(field: CoefficientField, domain: Domain | None, policy: FeedbackPolicy,
                   X0, dt: float, ids, seed: int, *, max_steps: int = 10_000_000,
                   horizon: float | None = None, rho: float | None = None,
                   antithetic: bool = False, record: bool = False, c_clip: float = C_CLIP,
                   block: int = BLOCK, backend: str | None = None):
    """Simulate paths ``ids`` from ``X0`` until exit, horizon or ``max_steps``.

    Returns a :class:`BatchResult`; with ``record=True`` also the list of
    states and controls of every path (only sensible for small batches).
    Live paths are compacted once per noise block; within a block, exited
    rows are frozen by masking.
    """
    if not dt > 0:
        raise ArgumentError("dt must be positive")
    ids = np.asarray(ids, dtype=np.int64)
    n, d = ids.size, field.dim
    X = np.array(np.broadcast_to(np.asarray(X0, dtype=float), (n, d)))
    if horizon is not None:
        n_steps = int(math.ceil(horizon / dt - 1e-9))
        if n_steps > 0:
            dt = horizon / n_steps
        max_steps = min(max_steps, n_steps)
    bounded = domain is not None and domain.bounded
    sqdt = math.sqrt(dt)
    clip_level = c_clip * sqdt / field.delta
    ident = bool(getattr(field.diffusion, "is_identity", False))
    shape, center, radius, lo, hi = _domain_code(domain, d)
    # discount integrated exactly over each step, g frozen at the left endpoint
    disc_weight = (-math.expm1(-rho * dt) / (rho * dt)) if rho else 1.0

    tau = np.zeros(n)
    cost = np.zeros(n)
    disc = np.zeros(n)
    clips = np.zeros(n, dtype=np.int64)
    exited = np.zeros(n, dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    sup_norm = row_norm(X)
    end = X.copy()

    if bounded:
        sd = domain.signed_distance(X)
        if np.any(sd > 1e-12):
            raise ArgumentError("starting point lies outside the closed domain")
        start_out = sd >= 0
        exited[start_out] = True
        if start_out.any():
            X[start_out] = domain.project(X[start_out])
        alive = np.nonzero(~start_out)[0]
    else:
        sd = np.zeros(n)
        alive = np.arange(n)

    stream = ids // 2 if antithetic else ids
    sign = np.where(ids % 2 == 1, -1.0, 1.0) if antithetic else None
    gens = [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(s),)))
            for s in stream]
    rec_states = [[X[i].copy()] for i in range(n)] if record else None
    rec_ctrl = [[] for _ in range(n)] if record else None

    step = 0
    while alive.size and step < max_steps:
        fit = max(16, NOISE_BUDGET // (alive.size * d))
        nb = min(block, fit, max_steps - step)
        noise = _draw_block([gens[i] for i in alive], None if sign is None else sign[alive],
                            d, nb)
        Xc, sdc = X[alive], sd[alive]
        costc, discc, tauc = cost[alive], disc[alive], tau[alive]
        clipc, supc = clips[alive], sup_norm[alive]
        live = np.ones(alive.size, dtype=np.uint8)
        out = np.zeros(alive.size, dtype=np.uint8)
        for s in range(nb):
            t = step * dt
            B, A, G, ks = _step_coefficients(field, policy, t, Xc, ident, dt)
            S = None if A is None else sqrt_spd_batch(A)
            if record:
                before = live.copy()
            n_out = kernels.em_step(
                Xc, np.ascontiguousarray(B, dtype=float), S, noise[s],
                np.ascontiguousarray(G, dtype=float), dt, sqdt, clip_level, live, sdc, costc,
                discc if rho is not None else None,
                disc_weight * math.exp(-rho * t) if rho is not None else 0.0,
                tauc, clipc, supc, shape, center, radius, lo, hi, out, backend=backend)
            if record:
                kk = np.broadcast_to(ks, (alive.size,))
                for j in np.nonzero(before)[0]:
                    rec_states[alive[j]].append(Xc[j].copy())
                    rec_ctrl[alive[j]].append(int(kk[j]))
            step += 1
            if n_out:
                hit = out.astype(bool)
                exited[alive[hit]] = True
                live[hit] = 0
                if not live.any():
                    break
        X[alive], sd[alive] = Xc, sdc
        cost[alive], disc[alive], tau[alive] = costc, discc, tauc
        clips[alive], sup_norm[alive] = clipc, supc
        alive = alive[live.astype(bool)]
    end[exited] = X[exited]
    if alive.size:
        end[alive] = X[alive]
        if bounded or horizon is None:
            truncated[alive] = True
    res = BatchResult(ids, exited, tau, cost, disc, end, truncated, clips, sup_norm, dt)
    if record:
        return res, rec_states, rec_ctrl
    return res


def simulate_many(field, domain, policy, x0, dt, n_paths, seed, *, chunk=131072, threads=1,
                  **kw) -> BatchResult:
    """Paths ``0 .. n_paths - 1`` in chunks; results are in path order."""
    bounds = [(s, min(s + chunk, n_paths)) for s in range(0, n_paths, chunk)]

    def run(b):
        return simulate_batch(field, domain, policy, x0, dt, np.arange(*b), seed, **kw)
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    return BatchResult.concat(parts)


@dataclass
class PathSample:
    dt: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    exited: bool
    tau: float
    cost: float
    disc_cost: float
    truncated: bool
    clip_events: int

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.states.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + ["control_index"])
            ctrl = list(self.controls) + [-1]
            for t, x, k in zip(self.times, self.states, ctrl):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [int(k)])
        return path


def _domain_of(spec: ProblemSpec):
    return spec.domain if spec.domain.bounded else None


def simulate_path(spec: ProblemSpec, policy: FeedbackPolicy, x0, dt: float, seed: int,
                  max_steps: int = 10_000_000, path_id: int = 0) -> PathSample:
    policy.validate(spec.field.K)
    horizon = spec.horizon if spec.kind == "finite_horizon" else None
    res, states, ctrl = simulate_batch(
        spec.field, _domain_of(spec), policy, np.asarray(x0, dtype=float)[None, :], dt,
        [path_id], seed, max_steps=max_steps, horizon=horizon, rho=spec.rho, record=True)
    S = np.array(states[0])
    times = np.arange(S.shape[0]) * res.dt
    if res.exited[0] and S.shape[0] > 1:
        times[-1] = res.tau[0]
    return PathSample(res.dt, times, S, np.array(ctrl[0], dtype=int), bool(res.exited[0]),
                      float(res.tau[0]), float(res.cost[0]), float(res.disc_cost[0]),
                      bool(res.truncated[0]), int(res.clips[0]))


def _mean_stderr(v: np.ndarray) -> tuple[float, float]:
    n = v.size
    mean = float(np.mean(v))
    if n < 2:
        return mean, 0.0
    return mean, float(np.std(v, ddof=1) / math.sqrt(n))


def exit_stats(spec: ProblemSpec, policy: FeedbackPolicy, x0, dt: float, n_paths: int,
               seed: int, *, max_steps: int = 10_000_000, tail_times=None, threads: int = 1,
               antithetic: bool = False) -> dict:
    if spec.kind != "elliptic":
        raise ArgumentError("exit statistics need an elliptic problem")
    policy.validate(spec.field.K)
    res = simulate_many(spec.field, spec.domain, policy, x0, dt, n_paths, seed,
                        max_steps=max_steps, threads=threads, antithetic=antithetic)
    mean, se = _mean_stderr(res.tau)
    cmean, cse = _mean_stderr(res.payoff(spec.field))
    if tail_times is None:
        hi = float(np.quantile(res.tau, 0.999)) if n_paths else 0.0
        tail_times = np.linspace(0.0, hi, 41)
    tail = [(float(t), float(np.mean(res.tau > t))) for t in tail_times]
    n_trunc = int(res.truncated.sum())
    frac = n_trunc / max(n_paths, 1)
    if frac > TRUNCATION_WARN:
        warnings.warn(f"{frac:.1%} of paths were truncated before exit", RuntimeWarning)
    return {"mean_tau": mean, "stderr": se, "mean_cost": cmean, "cost_stderr": cse,
            "tail": tail, "n": n_paths, "truncated": n_trunc,
            "truncation_warning": frac > TRUNCATION_WARN, "clip_events": int(res.clips.sum()),
            "max_tau": float(res.tau.max()) if n_paths else 0.0}


def tail_fit(tail, min_prob: float = 1e-3, start_quantile: float = 0.5) -> dict:
    """Linear fit of ``log P(tau > t)`` on the tail of the table.

    The tail starts where the survival probability first drops below
    ``start_quantile`` and ends before it drops below ``min_prob``.
    """
    t = np.array([a for a, _ in tail])
    p = np.array([b for _, b in tail])
    sel = (p <= start_quantile) & (p >= min_prob)
    if sel.sum() < 3:
        return {"slope": float("nan"), "intercept": float("nan"), "r2": float("nan"), "n": 0}
    x, y = t[sel], np.log(p[sel])
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return {"slope": float(slope), "intercept": float(intercept),
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0, "n": int(sel.sum())}


def exit_exp_moment(spec: ProblemSpec, policy: FeedbackPolicy, x0, nu: float, n_paths: int,
                    dt: float, seed: int, *, max_steps: int = 10_000_000,
                    threads: int = 1) -> dict:
    """Empirical ``E[exp(nu * tau / diam(D)^2)]``."""
    if spec.kind != "elliptic":
        raise ArgumentError("exit moments need an elliptic problem")
    if nu < 0:
        raise ArgumentError("rate must be non-negative")
    policy.validate(spec.field.K)
    res = simulate_many(spec.field, spec.domain, policy, x0, dt, n_paths, seed,
                        max_steps=max_steps, threads=threads)
    diam2 = spec.domain.diameter ** 2
    vals = np.exp(nu * res.tau / diam2)
    est, se = _mean_stderr(vals)
    return {"estimate": est, "stderr": se, "max_tau": float(res.tau.max()),
            "lower_bound": bool(res.truncated.any()), "n": n_paths,
            "truncated": int(res.truncated.sum())}
