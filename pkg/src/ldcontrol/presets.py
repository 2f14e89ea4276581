"""Named coefficient fields and terminal data used by the experiments."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .control_problem import CoefficientField, ControlSet, row_norm
from .errors import ArgumentError
from .expr import compile_expression


def _identity_diffusion(dim):
    eye = np.eye(dim)

    def diffusion(lam, X):
        return np.broadcast_to(eye, (X.shape[0], dim, dim))
    diffusion.is_identity = True
    return diffusion


def _zero_drift(lam, X):
    return np.zeros_like(X)


def _const_cost(value):
    def cost(lam, X):
        return np.full(X.shape[0], float(value))
    return cost


def _const_terminal(value):
    def f(X):
        return np.full(X.shape[0], float(value))
    return f


# --------------------------------------------------------------------------
# Terminal / boundary data
# --------------------------------------------------------------------------


def terminal_function(name: str, dim: int = 2, **kw) -> Callable:
    """Look up a terminal-cost preset by name.

    ``half_space``, ``open_ball`` and ``step_stack`` are lower semicontinuous
    indicators of open sets (and a positive combination of them).
    """
    if name == "zero":
        return _const_terminal(0.0)
    if name == "const":
        return _const_terminal(kw.get("value", 1.0))
    if name == "x1":
        return lambda X: X[:, 0].copy()
    if name == "quadratic":
        return lambda X: row_norm(X) ** 2
    if name == "half_space":
        return lambda X: (X[:, 0] > 0).astype(float)
    if name == "open_ball":
        c = np.asarray(kw.get("center", [0.0] * dim), dtype=float)
        r = float(kw.get("radius", 0.5))
        return lambda X: (row_norm(X - c) < r).astype(float)
    if name == "step_stack":
        levels = [float(v) for v in kw.get("levels", (-0.5, 0.0, 0.5))]

        def stack(X):
            out = np.zeros(X.shape[0])
            for a in levels:
                out = out + (X[:, 0] > a)
            return out / len(levels)
        return stack
    raise ArgumentError(f"unknown terminal preset {name!r}")


# --------------------------------------------------------------------------
# Fields
# --------------------------------------------------------------------------


def identity(dim: int = 2, running_cost: float = 0.0, terminal: str | Callable = "quadratic",
             **kw) -> CoefficientField:
    """Single control, b = 0, a = I: the heat semigroup."""
    f = terminal_function(terminal, dim, **kw) if isinstance(terminal, str) else terminal
    return CoefficientField(
        dim=dim, controls=ControlSet.single(), drift=_zero_drift,
        diffusion=_identity_diffusion(dim), delta=1.0,
        running_cost=_const_cost(running_cost), terminal_cost=f,
        dominator=lambda X: np.zeros(X.shape[0]),
        g_bound=abs(running_cost), name="identity",
    )


def laplacian(dim: int = 2) -> CoefficientField:
    """b = 0, a = I, g = 1, f = 0; on B_1 the value is (1 - |x|^2)/d."""
    return identity(dim, running_cost=1.0, terminal="zero").replace(name="laplacian", f_bound=0.0)


def two_drift(dim: int = 2, speed: float = 0.5, terminal: str | Callable = "x1",
              **kw) -> CoefficientField:
    """Controls +1 and -1 pushing along the first axis with ``speed``."""
    f = terminal_function(terminal, dim, **kw) if isinstance(terminal, str) else terminal

    def drift(lam, X):
        out = np.zeros_like(X)
        out[:, 0] = speed * lam[0]
        return out
    return CoefficientField(
        dim=dim, controls=ControlSet.from_params([[1.0], [-1.0]], labels=["plus", "minus"]),
        drift=drift, diffusion=_identity_diffusion(dim), delta=1.0,
        running_cost=_const_cost(0.0), terminal_cost=f,
        dominator=lambda X: np.full(X.shape[0], abs(speed)),
        g_bound=0.0, name="two_drift",
    )


def ld_singular(dim: int = 2, strength: float | None = None,
                truncation: float | None = None) -> CoefficientField:
    """Inward singular drift ``-strength * x / (2 |x|^2)`` on the unit ball.

    ``strength`` defaults to ``dim``; with that choice the radial part of the
    motion is a zero-dimensional Bessel process and the equation has no weak
    solution started at the origin. ``truncation`` caps the drift magnitude.
    The drift is in L_p of the unit ball for every p < d and not in L_d.
    """
    s = float(dim if strength is None else strength)

    def magnitude(r):
        # direction is undefined at the origin; the drift is set to zero there
        m = np.where((r <= 1.0) & (r > 0), s / (2.0 * np.where(r > 0, r, 1.0)), 0.0)
        if truncation is not None:
            m = np.minimum(m, truncation)
        return m

    def drift(lam, X):
        r = row_norm(X)
        m = magnitude(r)
        safe = np.where(r > 0, r, 1.0)
        return -(m / safe)[:, None] * X

    def flow(lam, X, dt):
        # exact solution of x' = drift(x) over dt: |x|^2 falls at rate s down
        # to the truncation radius, then |x| falls at the capped speed
        r0 = row_norm(X)
        rc = 0.0 if truncation is None else min(s / (2.0 * truncation), 1.0)
        r = r0.copy()
        outer = (r0 <= 1.0) & (r0 > rc)
        t1 = np.where(outer, (r0 ** 2 - rc ** 2) / s, 0.0)
        r[outer] = np.sqrt(np.maximum(r0[outer] ** 2 - s * dt, 0.0))
        late = outer & (dt > t1)
        if truncation is not None:
            r[late] = np.maximum(rc - truncation * (dt - t1[late]), 0.0)
            inner = (r0 <= rc) & (r0 > 0)
            r[inner] = np.maximum(r0[inner] - truncation * dt, 0.0)
        else:
            r[late] = 0.0
        scale = np.where(r0 > 0, r / np.where(r0 > 0, r0, 1.0), 0.0)
        return X * scale[:, None]
    drift.flow = flow

    def dominator(X):
        r = row_norm(X)
        with np.errstate(divide="ignore"):
            m = np.where(r <= 1.0, s / (2.0 * r), 0.0)
        if truncation is not None:
            m = np.minimum(m, truncation)
        return m

    return CoefficientField(
        dim=dim, controls=ControlSet.single(), drift=drift,
        diffusion=_identity_diffusion(dim), delta=1.0, running_cost=_const_cost(0.0),
        terminal_cost=_const_terminal(0.0), dominator=dominator, g_bound=0.0,
        name="ld_singular",
        meta={"strength": s, "truncation": truncation},
    )


def singular_profile(X) -> np.ndarray:
    """``1 / (2 |x|)`` on the unit ball, the unit-strength drift magnitude."""
    r = row_norm(X)
    with np.errstate(divide="ignore"):
        return np.where(r <= 1.0, 0.5 / r, 0.0)


def checkerboard(dim: int = 2, cell: float = 0.25, contrast: float = 0.5,
                 offset: float | None = None, running_cost: float = 1.0) -> CoefficientField:
    """Discontinuous diffusion ``(1 + c s(x)) I``.

    ``s(x)`` is the +-1 checkerboard sign of the first two coordinates. The
    pattern is shifted by ``offset`` (default a third of a cell) so its
    interfaces avoid dyadic grid lines. The trace has to vary: with a
    constant trace, g = 1 and f = 0 on a ball, ``(1 - |x|^2) / d`` solves
    the equation for every coefficient and the field would not matter.
    """
    if not 0 < contrast < 1:
        raise ArgumentError("contrast must lie in (0, 1)")
    off = cell / 3.0 if offset is None else offset
    delta = 1.0 - contrast

    def sign(X):
        i = np.floor((X[:, 0] - off) / cell)
        j = np.floor((X[:, 1] - off) / cell)
        return np.where((i + j) % 2 == 0, 1.0, -1.0)

    def diffusion(lam, X):
        scale = 1.0 + contrast * sign(X)
        return scale[:, None, None] * np.eye(dim)

    return CoefficientField(
        dim=dim, controls=ControlSet.single(), drift=_zero_drift, diffusion=diffusion,
        delta=delta, running_cost=_const_cost(running_cost), terminal_cost=_const_terminal(0.0),
        dominator=lambda X: np.zeros(X.shape[0]), g_bound=abs(running_cost),
        name="checkerboard", meta={"cell": cell, "contrast": contrast, "offset": off},
    )


def oscillating_cost(field: CoefficientField, m: float, amplitude: float = 1.0) -> CoefficientField:
    """Add ``amplitude / m * sin(m x1)`` to the running cost."""
    base = field.running_cost

    def cost(lam, X):
        return base(lam, X) + amplitude / m * np.sin(m * X[:, 0])
    return field.replace(running_cost=cost, g_bound=field.g_bound + abs(amplitude) / m,
                         name=f"{field.name}+osc{m:g}")


def quadratic_control_cost(dim: int = 2, params=None) -> CoefficientField:
    """Running cost ``|lambda|^2`` with b = 0, a = I."""
    if params is None:
        params = np.linspace(-1.0, 1.0, 5)[:, None]
    cs = ControlSet.from_params(params)

    def cost(lam, X):
        return np.full(X.shape[0], float(np.dot(lam, lam)))
    bound = float(max(np.dot(p, p) for p in cs.params))
    return CoefficientField(
        dim=dim, controls=cs, drift=_zero_drift, diffusion=_identity_diffusion(dim),
        delta=1.0, running_cost=cost, dominator=lambda X: np.zeros(X.shape[0]),
        g_bound=bound, name="quadratic_control_cost",
    )


def capped_quadratic(dim: int = 2, cap: float = 4.0, rho: float = 1.0) -> CoefficientField:
    """Discounted test problem: g = min(|x|^2, cap), b = 0, a = I."""
    def cost(lam, X):
        return np.minimum(row_norm(X) ** 2, cap)
    return identity(dim).replace(running_cost=cost, g_bound=cap, discount=rho,
                                 name="capped_quadratic")


def expression_field(dim: int, drift: list[str], diffusion: list[list[str]], running_cost: str,
                     terminal_cost: str, delta: float, controls: ControlSet,
                     dominator: str | None = None, g_bound: float = math.inf,
                     f_bound: float = math.inf, discount: float | None = None,
                     name: str = "expression") -> CoefficientField:
    """Build a field from expression strings (see :mod:`ldcontrol.expr`)."""
    m = controls.params.shape[1]
    if len(drift) != dim or len(diffusion) != dim or any(len(r) != dim for r in diffusion):
        raise ArgumentError("drift/diffusion expressions do not match the dimension")
    b_exprs = [compile_expression(e, dim, m) for e in drift]
    a_exprs = [[compile_expression(e, dim, m) for e in row] for row in diffusion]
    g_expr = compile_expression(running_cost, dim, m)
    f_expr = compile_expression(terminal_cost, dim, 0)
    dom_expr = compile_expression(dominator, dim, 0) if dominator is not None else None

    def b(lam, X):
        return np.stack([e(X, lam) for e in b_exprs], axis=1)

    def a(lam, X):
        return np.stack([np.stack([e(X, lam) for e in row], axis=1) for row in a_exprs], axis=1)

    return CoefficientField(
        dim=dim, controls=controls, drift=b, diffusion=a, delta=delta,
        running_cost=lambda lam, X: g_expr(X, lam), terminal_cost=lambda X: f_expr(X),
        dominator=(lambda X: dom_expr(X)) if dom_expr is not None else None,
        g_bound=g_bound, f_bound=f_bound, discount=discount, name=name,
    )


FIELD_PRESETS: dict[str, Callable[..., CoefficientField]] = {
    "identity": identity,
    "heat": identity,
    "laplacian": laplacian,
    "two_drift": two_drift,
    "ld_singular": ld_singular,
    "checkerboard": checkerboard,
    "capped_quadratic": capped_quadratic,
    "quadratic_control_cost": quadratic_control_cost,
}


def get_field(name: str, **kw) -> CoefficientField:
    try:
        builder = FIELD_PRESETS[name]
    except KeyError:
        raise ArgumentError(f"unknown field preset {name!r}; choose from "
                            f"{sorted(FIELD_PRESETS)}") from None
    return builder(**kw)
