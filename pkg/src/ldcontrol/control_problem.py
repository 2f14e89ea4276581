"""Control-problem data: control sets, coefficient fields, domains.

Coefficient callables are vectorized over states: ``drift(params, X)`` maps a
control parameter vector and an ``(n, d)`` array of states to ``(n, d)``
drifts, ``diffusion`` to ``(n, d, d)`` matrices, ``running_cost`` to ``(n,)``.
``terminal_cost(X)`` and ``dominator(X)`` take states only.

Row norms are accumulated column by column (never through a reduction over
the last axis) so that per-path arithmetic does not depend on batch size.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import ArgumentError, DataError

TOL_EIG = 1e-10
TOL_SYM = 1e-10


def row_sq_norm(X: np.ndarray) -> np.ndarray:
    s = X[:, 0] * X[:, 0]
    for j in range(1, X.shape[1]):
        s = s + X[:, j] * X[:, j]
    return s


def row_norm(X: np.ndarray) -> np.ndarray:
    return np.sqrt(row_sq_norm(X))


def row_dot(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    s = X[:, 0] * Y[:, 0]
    for j in range(1, X.shape[1]):
        s = s + X[:, j] * Y[:, j]
    return s


# --------------------------------------------------------------------------
# Controls
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlPoint:
    label: str
    params: tuple[float, ...]


@dataclass(frozen=True)
class ControlSet:
    """Finite, ordered discretization of the control space."""

    points: tuple[ControlPoint, ...]

    def __post_init__(self):
        if not self.points:
            raise DataError("control set must be non-empty")
        seen = {}
        for i, p in enumerate(self.points):
            if p.params in seen:
                raise DataError(f"controls {seen[p.params]} and {i} share parameter vector "
                                f"{p.params}")
            seen[p.params] = i
        lens = {len(p.params) for p in self.points}
        if len(lens) != 1:
            raise DataError("all control parameter vectors must have the same length")

    @classmethod
    def from_params(cls, params, labels: Sequence[str] | None = None) -> "ControlSet":
        arr = np.atleast_2d(np.asarray(params, dtype=float))
        if arr.size == 0:
            raise DataError("control set must be non-empty")
        if arr.shape[0] == 1 and np.ndim(params) == 1 and len(params) > 1 and labels is not None \
                and len(labels) == len(params):
            arr = arr.T
        if labels is None:
            labels = [f"u{i}" for i in range(arr.shape[0])]
        return cls(tuple(ControlPoint(str(lb), tuple(float(v) for v in row))
                         for lb, row in zip(labels, arr)))

    @classmethod
    def single(cls, label: str = "u0") -> "ControlSet":
        return cls((ControlPoint(label, (0.0,)),))

    @classmethod
    def uniform_mesh(cls, lo, hi, n_per_axis) -> "ControlSet":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        n = np.broadcast_to(np.atleast_1d(n_per_axis), lo.shape)
        axes = [np.linspace(a, b, int(k)) for a, b, k in zip(lo, hi, n)]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lo.size)
        return cls.from_params(mesh)

    def __len__(self):
        return len(self.points)

    def __iter__(self):
        return iter(self.points)

    def __getitem__(self, k):
        return self.points[k]

    @property
    def params(self) -> np.ndarray:
        return np.array([p.params for p in self.points], dtype=float)

    @property
    def labels(self) -> list[str]:
        return [p.label for p in self.points]

    def index(self, label: str) -> int:
        return self.labels.index(label)


# --------------------------------------------------------------------------
# Coefficients
# --------------------------------------------------------------------------


def _zero_terminal(X):
    return np.zeros(X.shape[0])


@dataclass(frozen=True, eq=False)
class CoefficientField:
    dim: int
    controls: ControlSet
    drift: Callable
    diffusion: Callable
    delta: float
    running_cost: Callable
    terminal_cost: Callable = _zero_terminal
    dominator: Callable | None = None
    g_bound: float = math.inf
    f_bound: float = math.inf
    discount: float | None = None
    name: str = "custom"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dim < 2:
            raise DataError("dimension must be at least 2")
        if not (0.0 < self.delta <= 1.0):
            raise DataError(f"ellipticity constant must lie in (0, 1], got {self.delta}")
        if self.discount is not None and self.discount <= 0:
            raise DataError("discount must be positive")

    @property
    def K(self) -> int:
        return len(self.controls)

    def _p(self, k):
        return np.asarray(self.controls[k].params, dtype=float)

    def b(self, k: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.asarray(self.drift(self._p(k), X), dtype=float)
        return np.broadcast_to(out, X.shape).copy()

    def a(self, k: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.asarray(self.diffusion(self._p(k), X), dtype=float)
        return np.broadcast_to(out, (X.shape[0], self.dim, self.dim)).copy()

    def g(self, k: int, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.asarray(self.running_cost(self._p(k), X), dtype=float)
        return np.broadcast_to(out, (X.shape[0],)).copy()

    def f(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.asarray(self.terminal_cost(X), dtype=float)
        return np.broadcast_to(out, (X.shape[0],)).copy()

    def dom(self, X) -> np.ndarray | None:
        if self.dominator is None:
            return None
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.broadcast_to(np.asarray(self.dominator(X), dtype=float),
                               (X.shape[0],)).copy()

    def replace(self, **changes) -> "CoefficientField":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Domains
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Domain:
    """Ball, box or the whole space.

    Balls and boxes are convex, so they satisfy the uniform exterior ball
    condition with every radius.
    """

    shape: str
    dim: int
    center: tuple[float, ...] = ()
    radius: float = 0.0
    lo: tuple[float, ...] = ()
    hi: tuple[float, ...] = ()

    def __post_init__(self):
        if self.shape == "ball":
            if self.radius <= 0:
                raise DataError("ball radius must be positive")
        elif self.shape == "box":
            if any(h <= l for l, h in zip(self.lo, self.hi)):
                raise DataError("box must have positive volume")
        elif self.shape != "whole_space":
            raise DataError(f"unknown domain shape {self.shape!r}")

    @classmethod
    def ball(cls, center, radius) -> "Domain":
        c = tuple(float(v) for v in center)
        return cls("ball", len(c), center=c, radius=float(radius))

    @classmethod
    def box(cls, lo, hi) -> "Domain":
        lo = tuple(float(v) for v in lo)
        hi = tuple(float(v) for v in hi)
        if len(lo) != len(hi):
            raise DataError("box corners differ in dimension")
        return cls("box", len(lo), lo=lo, hi=hi)

    @classmethod
    def whole_space(cls, dim) -> "Domain":
        return cls("whole_space", int(dim))

    @property
    def bounded(self) -> bool:
        return self.shape != "whole_space"

    @property
    def exterior_ball_radius(self) -> float | None:
        return math.inf if self.bounded else None

    @property
    def diameter(self) -> float:
        if self.shape == "ball":
            return 2.0 * self.radius
        if self.shape == "box":
            return float(np.linalg.norm(np.subtract(self.hi, self.lo)))
        return math.inf

    @property
    def volume(self) -> float:
        if self.shape == "ball":
            d = self.dim
            return math.pi ** (d / 2) / math.gamma(d / 2 + 1) * self.radius ** d
        if self.shape == "box":
            return float(np.prod(np.subtract(self.hi, self.lo)))
        return math.inf

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        if self.shape == "ball":
            c = np.asarray(self.center)
            return c - self.radius, c + self.radius
        if self.shape == "box":
            return np.asarray(self.lo), np.asarray(self.hi)
        raise ArgumentError("whole space has no bounding box")

    def signed_distance(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.shape == "ball":
            return row_norm(X - np.asarray(self.center)) - self.radius
        if self.shape == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            c, half = (lo + hi) / 2, (hi - lo) / 2
            q = np.abs(X - c) - half
            outside = row_norm(np.maximum(q, 0.0))
            inside = np.minimum(q.max(axis=1), 0.0)
            return outside + inside
        return np.full(X.shape[0], -np.inf)

    def contains(self, X) -> np.ndarray:
        return self.signed_distance(X) < 0

    def project(self, X) -> np.ndarray:
        """Closest boundary point (the exact signed-distance Newton step)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.shape == "ball":
            c = np.asarray(self.center)
            v = X - c
            n = row_norm(v)
            safe = np.where(n > 0, n, 1.0)
            u = v / safe[:, None]
            u[n == 0] = np.eye(self.dim)[0]
            return c + self.radius * u
        if self.shape == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            P = np.clip(X, lo, hi)
            inside = self.signed_distance(X) < 0
            if np.any(inside):
                Xi = P[inside]
                dlo, dhi = Xi - lo, hi - Xi
                dist = np.concatenate([dlo, dhi], axis=1)
                j = np.argmin(dist, axis=1)
                rows = np.arange(Xi.shape[0])
                ax = j % self.dim
                Xi[rows, ax] = np.where(j < self.dim, lo[ax], hi[ax])
                P[inside] = Xi
            return P
        raise ArgumentError("whole space has no boundary")

    def ray_exit(self, X, direction) -> np.ndarray:
        """Distance from interior points ``X`` to the boundary along ``direction``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        e = np.asarray(direction, dtype=float)
        e = e / np.linalg.norm(e)
        if self.shape == "ball":
            v = X - np.asarray(self.center)
            be = v @ e
            disc = be * be - (row_sq_norm(v) - self.radius ** 2)
            return -be + np.sqrt(np.maximum(disc, 0.0))
        if self.shape == "box":
            lo, hi = np.asarray(self.lo), np.asarray(self.hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_hi = np.where(e > 0, (hi - X) / e, np.inf)
                t_lo = np.where(e < 0, (lo - X) / e, np.inf)
            return np.minimum(t_hi, t_lo).min(axis=1)
        return np.full(X.shape[0], np.inf)

    def describe(self) -> dict:
        if self.shape == "ball":
            return {"shape": "ball", "center": list(self.center), "radius": self.radius}
        if self.shape == "box":
            return {"shape": "box", "lo": list(self.lo), "hi": list(self.hi)}
        return {"shape": "whole_space", "dim": self.dim}


# --------------------------------------------------------------------------
# Problem variants
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    kind: str  # "elliptic" | "finite_horizon" | "discounted"
    field: CoefficientField
    domain: Domain
    horizon: float | None = None
    rho: float | None = None
    name: str = ""
    config_hash: str = ""

    def __post_init__(self):
        if self.kind == "elliptic":
            if not self.domain.bounded:
                raise DataError("elliptic Dirichlet problems need a bounded domain")
        elif self.kind == "finite_horizon":
            if self.horizon is None or self.horizon <= 0:
                raise DataError("finite-horizon problems need T > 0")
        elif self.kind == "discounted":
            if self.rho is None or self.rho <= 0:
                raise DataError("discounted problems need rho > 0")
        else:
            raise DataError(f"unknown problem kind {self.kind!r}")
        if self.domain.dim != self.field.dim:
            raise DataError("domain and field dimensions differ")

    @classmethod
    def elliptic(cls, field, domain, name="", config_hash=""):
        return cls("elliptic", field, domain, name=name or field.name, config_hash=config_hash)

    @classmethod
    def finite_horizon(cls, field, horizon, domain=None, name="", config_hash=""):
        domain = domain or Domain.whole_space(field.dim)
        return cls("finite_horizon", field, domain, horizon=float(horizon),
                   name=name or field.name, config_hash=config_hash)

    @classmethod
    def discounted(cls, field, rho=None, name="", config_hash=""):
        rho = field.discount if rho is None else rho
        return cls("discounted", field, Domain.whole_space(field.dim), rho=rho,
                   name=name or field.name, config_hash=config_hash)

    @property
    def fingerprint(self) -> str:
        if self.config_hash:
            return self.config_hash
        blob = json.dumps({"kind": self.kind, "name": self.name, "field": self.field.name,
                           "domain": self.domain.describe(), "T": self.horizon,
                           "rho": self.rho}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# Operations
# --------------------------------------------------------------------------


@dataclass
class EllipticityReport:
    min_eig: float
    max_eig: float
    passed: bool
    n_samples: int


def _as_samples(field: CoefficientField, samples):
    """Normalize samples to ``{control index: (n, d) states}``."""
    if isinstance(samples, tuple) and len(samples) == 2 and np.ndim(samples[1]) == 2:
        ks, X = samples
        ks = np.broadcast_to(np.asarray(ks, dtype=int), (np.shape(X)[0],))
        X = np.asarray(X, dtype=float)
    else:
        samples = list(samples)
        if not samples:
            raise ArgumentError("samples must be non-empty")
        ks = np.array([int(k) for k, _ in samples])
        X = np.array([np.asarray(x, dtype=float) for _, x in samples])
    if X.shape[0] == 0:
        raise ArgumentError("samples must be non-empty")
    if np.any(ks < 0) or np.any(ks >= field.K):
        raise ArgumentError("sample control index out of range")
    groups = {}
    for k in np.unique(ks):
        idx = np.nonzero(ks == k)[0]
        groups[int(k)] = (idx, X[idx])
    return groups, X.shape[0]


def check_ellipticity(field: CoefficientField, samples) -> EllipticityReport:
    """Check that sampled diffusion matrices have spectra in [delta, 1/delta]."""
    groups, n = _as_samples(field, samples)
    lo_eig, hi_eig = math.inf, -math.inf
    for k, (idx, X) in groups.items():
        A = field.a(k, X)
        asym = np.abs(A - np.swapaxes(A, 1, 2)).max(axis=(1, 2))
        bad = np.nonzero(asym > TOL_SYM)[0]
        if bad.size:
            i = bad[0]
            raise DataError(f"diffusion matrix is not symmetric at sample {int(idx[i])} "
                            f"(control {k}, x={X[i].tolist()}, asymmetry {asym[i]:.3e})")
        ev = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, 1, 2)))
        lo_eig = min(lo_eig, float(ev.min()))
        hi_eig = max(hi_eig, float(ev.max()))
    d = field.delta
    passed = lo_eig >= d * (1 - TOL_EIG) and hi_eig <= (1 / d) * (1 + TOL_EIG)
    return EllipticityReport(lo_eig, hi_eig, bool(passed), n)


def check_domination(field: CoefficientField, samples) -> dict:
    """Compare ``||b(k, x)||`` against the dominator at sampled points."""
    if field.dominator is None:
        return {"passed": True, "max_excess": 0.0, "checked": False}
    groups, _ = _as_samples(field, samples)
    worst = -math.inf
    for k, (_, X) in groups.items():
        excess = row_norm(field.b(k, X)) - field.dom(X)
        worst = max(worst, float(np.max(excess)))
    return {"passed": worst <= 1e-12, "max_excess": worst, "checked": True}


def equicontinuity_report(field: CoefficientField, X) -> dict:
    """Empirical modulus of ``lambda -> (a, b)`` between nearest control points.

    Reported only; there is no pass/fail threshold.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    P = field.controls.params
    if field.K < 2:
        return {"pairs": 0, "max_ratio": 0.0, "max_jump": 0.0}
    D = np.linalg.norm(P[:, None, :] - P[None, :, :], axis=-1)
    np.fill_diagonal(D, np.inf)
    nearest = np.argmin(D, axis=1)
    ratios, jumps = [], []
    for i, j in enumerate(nearest):
        db = np.abs(field.b(i, X) - field.b(int(j), X)).max()
        da = np.abs(field.a(i, X) - field.a(int(j), X)).max()
        jump = max(db, da)
        jumps.append(jump)
        ratios.append(jump / D[i, j])
    return {"pairs": len(ratios), "max_ratio": float(max(ratios)),
            "max_jump": float(max(jumps))}


def hamiltonian(field: CoefficientField, x, p, M) -> tuple[float, int]:
    """min over controls of 0.5 tr(a M) + <b, p> + g, with the first argmin."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    p = np.asarray(p, dtype=float).reshape(-1)
    M = np.asarray(M, dtype=float)
    if np.abs(M - M.T).max() > TOL_SYM:
        raise ArgumentError("M must be symmetric")
    vals, idx = hamiltonian_batch(field, x, p[None, :], M[None, :, :])
    return float(vals[0]), int(idx[0])


def hamiltonian_batch(field: CoefficientField, X, P, Ms, return_all=False):
    """Vectorized Hamiltonian at states ``X`` with gradients ``P`` and Hessians ``Ms``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    P = np.broadcast_to(np.asarray(P, dtype=float), (n, field.dim))
    Ms = np.broadcast_to(np.asarray(Ms, dtype=float), (n, field.dim, field.dim))
    table = np.empty((field.K, n))
    for k in range(field.K):
        A = field.a(k, X)
        tr = np.einsum("nij,nji->n", A, Ms)
        table[k] = 0.5 * tr + np.einsum("ni,ni->n", field.b(k, X), P) + field.g(k, X)
    idx = np.argmin(table, axis=0)
    vals = table[idx, np.arange(n)]
    if return_all:
        return vals, idx, table
    return vals, idx


def lp_norm(fn: Callable, region: Domain, p: float, inner_cutoff: float = 0.0,
            center=None, epsrel: float = 1e-9) -> float:
    """``(integral over region minus B_cutoff(center) of fn^p)^(1/p)``.

    ``fn`` maps ``(n, d)`` states to ``(n,)`` values. In two and three
    dimensions the integral is taken in polar (spherical) coordinates about
    ``center`` with adaptive QUADPACK quadrature; the radial variable is
    integrated in log-scale when a cutoff is present.
    """
    if p < 1:
        raise ArgumentError("p must be >= 1")
    if not region.bounded:
        raise ArgumentError("lp_norm needs a bounded region")
    if inner_cutoff < 0:
        raise ArgumentError("inner_cutoff must be >= 0")
    d = region.dim
    if center is None:
        center = region.center if region.shape == "ball" else \
            tuple((np.asarray(region.lo) + np.asarray(region.hi)) / 2)
    c = np.asarray(center, dtype=float)
    if region.signed_distance(c[None, :])[0] >= 0:
        raise ArgumentError("polar quadrature needs the singular center inside the region")

    def density(points):
        vals = np.asarray(fn(points), dtype=float)
        if not np.all(np.isfinite(vals)):
            bad = points[~np.isfinite(vals)][0]
            raise DataError(f"non-finite integrand at x={bad.tolist()}")
        return np.abs(vals) ** p

    def radial(direction):
        rmax = float(region.ray_exit(c[None, :], direction)[0])
        if rmax <= inner_cutoff:
            return 0.0
        if inner_cutoff > 0:
            def integrand(s):
                r = math.exp(s)
                return density((c + r * direction)[None, :])[0] * r ** d
            val, _ = integrate.quad(integrand, math.log(inner_cutoff), math.log(rmax),
                                    epsabs=0.0, epsrel=epsrel, limit=200)
        else:
            def integrand(r):
                return density((c + r * direction)[None, :])[0] * r ** (d - 1)
            val, _ = integrate.quad(integrand, 0.0, rmax, epsabs=0.0, epsrel=epsrel,
                                    limit=200)
        return val

    if d == 2:
        total, _ = integrate.quad(lambda th: radial(np.array([math.cos(th), math.sin(th)])),
                                  0.0, 2 * math.pi, epsabs=0.0, epsrel=epsrel, limit=200)
    elif d == 3:
        def over_theta(ph):
            inner, _ = integrate.quad(
                lambda th: radial(np.array([math.sin(ph) * math.cos(th),
                                            math.sin(ph) * math.sin(th), math.cos(ph)])),
                0.0, 2 * math.pi, epsabs=0.0, epsrel=epsrel, limit=100)
            return inner * math.sin(ph)
        total, _ = integrate.quad(over_theta, 0.0, math.pi, epsabs=0.0, epsrel=epsrel,
                                  limit=100)
    else:
        lo, hi = region.bounding_box()

        def cart(*xs):
            x = np.asarray(xs)[None, :]
            if region.signed_distance(x)[0] >= 0 or np.linalg.norm(x[0] - c) < inner_cutoff:
                return 0.0
            return density(x)[0]
        total, _ = integrate.nquad(cart, list(zip(lo, hi)), opts={"epsrel": 1e-6})
    return float(total) ** (1.0 / p)


# --------------------------------------------------------------------------
# Mollification
# --------------------------------------------------------------------------


def mollifier_nodes(dim: int, n_per_axis: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Tensor midpoint nodes on [-1, 1]^d and bump weights summing to one.

    An even node count keeps every node off the coordinate hyperplanes, so
    the discrete kernel is exactly symmetric.
    """
    if n_per_axis % 2:
        raise ArgumentError("use an even number of mollifier nodes per axis")
    t = -1.0 + (np.arange(n_per_axis) + 0.5) * (2.0 / n_per_axis)
    Y = np.stack(np.meshgrid(*([t] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    r2 = row_sq_norm(Y)
    keep = r2 < 1.0
    Y = Y[keep]
    w = np.exp(-1.0 / (1.0 - r2[keep]))
    return Y, w / w.sum()


def _mollify_callable(fn, h, Y, w, with_param):
    def smoothed(*args):
        if with_param:
            lam, X = args
        else:
            (X,) = args
            lam = None
        X = np.atleast_2d(np.asarray(X, dtype=float))
        base = np.asarray(fn(lam, X) if with_param else fn(X), dtype=float)
        acc = np.zeros_like(base)
        for y, wj in zip(Y, w):
            shifted = np.asarray(fn(lam, X - h * y) if with_param else fn(X - h * y), dtype=float)
            acc = acc + wj * (shifted - base)
        return base + acc
    return smoothed


def mollify(field: CoefficientField, h: float, n_per_axis: int | None = None) -> CoefficientField:
    """Convolve drift, diffusion and running cost with a bump of radius ``h``.

    The smoothed value is ``base + sum_j w_j (shifted_j - base)``, which leaves
    constant fields bit-identical.
    """
    if not h > 0:
        raise ArgumentError("smoothing radius must be positive")
    if n_per_axis is None:
        n_per_axis = 16 if field.dim <= 2 else 8
    Y, w = mollifier_nodes(field.dim, n_per_axis)
    dom = None
    if field.dominator is not None:
        dom = _mollify_callable(field.dominator, h, Y, w, with_param=False)
    return field.replace(
        drift=_mollify_callable(field.drift, h, Y, w, True),
        diffusion=_mollify_callable(field.diffusion, h, Y, w, True),
        running_cost=_mollify_callable(field.running_cost, h, Y, w, True),
        dominator=dom,
        name=f"{field.name}*rho_{h:g}",
        meta={**field.meta, "mollified": h},
    )
