"""Monte Carlo value estimates over finite policy families.

Every policy is simulated with the same path seeds (common random numbers),
so differences between entries of the per-policy table are not blurred by
independent noise.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .control_problem import Domain, ProblemSpec
from .errors import ArgumentError, DependencyError
from .grid import GridFunction
from .sde_engine import FeedbackPolicy, _mean_stderr, simulate_many


@dataclass
class ValueEstimate:
    value: float
    stderr: float
    n_paths: int
    table: list
    argmin: str
    truncated: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.truncated == 0

    def summary(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n": self.n_paths,
                "argmin": self.argmin, "truncated": self.truncated, "table": self.table,
                **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def table_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy_id", "estimate", "stderr"])
            for row in self.table:
                w.writerow([row["policy_id"], repr(row["estimate"]), repr(row["stderr"])])
        return path


def _check_policies(spec, policies):
    if not policies:
        raise ArgumentError("policy family is empty")
    for p in policies:
        p.validate(spec.field.K)


def _collect(policies, payoffs, truncs, n_paths, extra=None) -> ValueEstimate:
    table = []
    for p, v, tr in zip(policies, payoffs, truncs):
        m, se = _mean_stderr(v)
        table.append({"policy_id": p.name, "estimate": m, "stderr": se, "truncated": int(tr)})
    best = min(range(len(table)), key=lambda i: table[i]["estimate"])
    return ValueEstimate(table[best]["estimate"], table[best]["stderr"], n_paths, table,
                         table[best]["policy_id"], int(sum(truncs)), extra or {})


def value_elliptic_mc(spec: ProblemSpec, policies: list[FeedbackPolicy], x0, dt: float,
                      n_paths: int, seed: int, *, threads: int = 1, antithetic: bool = False,
                      max_steps: int = 10_000_000) -> ValueEstimate:
    """min over policies of ``E[f(X_tau) + int_0^tau g]``."""
    if spec.kind != "elliptic":
        raise ArgumentError("value_elliptic_mc needs an elliptic problem")
    _check_policies(spec, policies)
    payoffs, truncs = [], []
    for p in policies:
        res = simulate_many(spec.field, spec.domain, p, x0, dt, n_paths, seed, threads=threads,
                            antithetic=antithetic, max_steps=max_steps)
        payoffs.append(res.payoff(spec.field))
        truncs.append(res.truncated.sum())
    return _collect(policies, payoffs, truncs, n_paths)


def value_parabolic_mc(spec: ProblemSpec, policies: list[FeedbackPolicy], t: float, x0,
                       dt: float, n_paths: int, seed: int, *, threads: int = 1,
                       antithetic: bool = False) -> ValueEstimate:
    """min over policies of ``E[f(X_t) + int_0^t g]``."""
    if spec.kind != "finite_horizon":
        raise ArgumentError("value_parabolic_mc needs a finite-horizon problem")
    if not 0 <= t <= spec.horizon:
        raise ArgumentError("t must lie in [0, T]")
    _check_policies(spec, policies)
    payoffs = []
    for p in policies:
        res = simulate_many(spec.field, None, p, x0, dt, n_paths, seed, horizon=t,
                            threads=threads, antithetic=antithetic)
        payoffs.append(res.payoff(spec.field))
    return _collect(policies, payoffs, [0] * len(policies), n_paths)


def discounted_cut(g_bound: float, rho: float, tail_tol: float) -> float:
    """Smallest horizon with ``exp(-rho cut) ||g|| / rho <= tail_tol``."""
    if g_bound <= 0:
        return 0.0
    return max(0.0, math.log(g_bound / (rho * tail_tol)) / rho)


def value_discounted_mc(spec: ProblemSpec, policies: list[FeedbackPolicy], x0, dt: float,
                        n_paths: int, seed: int, *, horizon_cut: float | None = None,
                        tail_tol: float = 1e-3, threads: int = 1,
                        antithetic: bool = False) -> ValueEstimate:
    """min over policies of ``E[int_0^cut e^{-rho s} g ds]``; the tail bound is reported."""
    if spec.kind != "discounted":
        raise ArgumentError("value_discounted_mc needs a discounted problem")
    rho = spec.rho
    g_bound = spec.field.g_bound
    if not math.isfinite(g_bound):
        raise ArgumentError("discounted estimates need a declared bound on g")
    need = discounted_cut(g_bound, rho, tail_tol)
    if horizon_cut is None:
        horizon_cut = need
    elif horizon_cut < need - 1e-12:
        raise ArgumentError(f"horizon_cut {horizon_cut} leaves a tail above {tail_tol}")
    _check_policies(spec, policies)
    payoffs = []
    for p in policies:
        res = simulate_many(spec.field, None, p, x0, dt, n_paths, seed, horizon=horizon_cut,
                            rho=rho, threads=threads, antithetic=antithetic)
        payoffs.append(res.disc_cost)
    tail = math.exp(-rho * horizon_cut) * g_bound / rho
    return _collect(policies, payoffs, [0] * len(policies), n_paths,
                    {"horizon_cut": horizon_cut, "tail_bound": tail})


@dataclass
class Intermediate:
    """Intermediate stopping rule: ``zero``, fixed ``time`` or ``exit`` from a subdomain."""

    kind: str
    s: float = 0.0
    subdomain: Domain | None = None

    @classmethod
    def zero(cls):
        return cls("zero")

    @classmethod
    def time(cls, s: float):
        return cls("time", s=float(s))

    @classmethod
    def exit(cls, subdomain: Domain):
        return cls("exit", subdomain=subdomain)


def _strictly_inside(sub: Domain, outer: Domain) -> bool:
    if not outer.bounded:
        return True
    if sub.shape == "ball":
        # distance from the center to the outer boundary must exceed the radius
        return bool(outer.signed_distance(np.asarray(sub.center)[None, :])[0] < -sub.radius)
    corners = np.array(np.meshgrid(*zip(sub.lo, sub.hi), indexing="ij")).reshape(sub.dim, -1).T
    return bool(np.all(outer.signed_distance(corners) < 0))


def check_dpp(spec: ProblemSpec, x0, intermediate: Intermediate,
              policies: list[FeedbackPolicy], tol: float, pde: GridFunction | None, *,
              dt: float, n_paths: int, seed: int, threads: int = 1) -> dict:
    """Compare a direct value estimate with the value stopped at an intermediate time.

    ``pde`` is the grid solution used for the continuation value: the elliptic
    solution for elliptic problems, or ``S_{T-s} f`` for finite-horizon ones.
    """
    if pde is None:
        raise DependencyError("check_dpp needs a PDE solution for the continuation value")
    _check_policies(spec, policies)
    x0 = np.asarray(x0, dtype=float)
    field_ = spec.field
    if spec.kind == "elliptic":
        lhs = value_elliptic_mc(spec, policies, x0, dt, n_paths, seed, threads=threads)
    elif spec.kind == "finite_horizon":
        if intermediate.kind == "exit":
            raise ArgumentError("finite-horizon checks use a fixed intermediate time")
        lhs = value_parabolic_mc(spec, policies, spec.horizon, x0, dt, n_paths, seed,
                                 threads=threads)
    else:
        raise ArgumentError("check_dpp supports elliptic and finite-horizon problems")

    if intermediate.kind == "zero":
        rhs_val, rhs_se, table = float(pde.at(x0[None, :])[0]), 0.0, []
    else:
        estimates = []
        for p in policies:
            if intermediate.kind == "exit":
                sub = intermediate.subdomain
                if spec.kind == "elliptic" and not _strictly_inside(sub, spec.domain):
                    raise ArgumentError("intermediate subdomain must lie strictly inside D")
                res = simulate_many(field_, sub, p, x0, dt, n_paths, seed, threads=threads)
                cont = pde.at(res.end)
            else:
                s = intermediate.s
                dom = spec.domain if spec.kind == "elliptic" else None
                res = simulate_many(field_, dom, p, x0, dt, n_paths, seed, horizon=s,
                                    threads=threads)
                cont = pde.at(res.end)
                if spec.kind == "elliptic":
                    cont = np.where(res.exited, field_.f(res.end), cont)
            m, se = _mean_stderr(cont + res.cost)
            estimates.append({"policy_id": p.name, "estimate": m, "stderr": se})
        best = min(estimates, key=lambda e: e["estimate"])
        rhs_val, rhs_se, table = best["estimate"], best["stderr"], estimates
    gap = abs(lhs.value - rhs_val)
    combined = math.sqrt(lhs.stderr ** 2 + rhs_se ** 2)
    return {"lhs": lhs.value, "lhs_stderr": lhs.stderr, "rhs": rhs_val, "rhs_stderr": rhs_se,
            "gap": gap, "tol": tol, "combined_stderr": combined,
            "pass": bool(gap <= tol + 3 * combined), "lhs_table": lhs.table, "rhs_table": table,
            "intermediate": intermediate.kind}
