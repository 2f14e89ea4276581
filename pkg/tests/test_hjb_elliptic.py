import math

import numpy as np
import pytest
from scipy.integrate import quad

from ldcontrol.control_problem import Domain, ProblemSpec
from ldcontrol.errors import ArgumentError
from ldcontrol.grid import Grid, GridFunction
from ldcontrol.hjb_elliptic import (discretize_generator, policy_iteration, solve_discounted,
                                    viscosity_residual)
from ldcontrol.presets import capped_quadratic, identity, laplacian, two_drift

BALL = Domain.ball([0.0, 0.0], 1.0)


@pytest.fixture(scope="module")
def laplace32():
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    return spec, policy_iteration(spec, Grid.for_domain(BALL, 1 / 32))


def test_laplacian_matches_closed_form(laplace32):
    _, rep = laplace32
    g = rep.solution.grid
    X = g.coords(g.interior)
    err = np.abs(rep.solution.values[g.interior] - (1 - (X ** 2).sum(1)) / 2).max()
    # the scheme, Shortley-Weller arms included, is exact on quadratics
    assert err < 1e-8
    assert rep.converged


def test_boundary_nodes_carry_projected_data():
    field = identity(2, terminal="x1")
    spec = ProblemSpec.elliptic(field, BALL)
    rep = policy_iteration(spec, Grid.for_domain(BALL, 1 / 16))
    g = rep.solution.grid
    X = g.coords(g.interior)
    # v = x1 is harmonic
    np.testing.assert_allclose(rep.solution.values[g.interior], X[:, 0], atol=1e-8)


def test_stencil_is_monotone_with_zero_row_sums():
    a = np.array([[1.0, 0.3], [0.3, 0.8]])
    field = laplacian(2).replace(
        diffusion=lambda lam, X: np.broadcast_to(a, (X.shape[0], 2, 2)), delta=0.5,
        drift=lambda lam, X: np.tile([2.0, -1.0], (X.shape[0], 1)))
    grid = Grid.box([-1, -1], [1, 1], 1 / 8)
    gen = discretize_generator(field, 0, grid)
    assert not gen.violations.any()
    for pos in (0, 17, grid.size // 2):
        st = gen.stencil(pos)
        center = st.pop((0, 0))
        assert center < 0
        assert all(w >= 0 for w in st.values())
        assert sum(st.values()) + center == pytest.approx(0.0, abs=1e-10)


def test_diagonal_dominance_violation_is_flagged():
    a = np.array([[1.0, 0.6], [0.6, 0.5]])
    field = laplacian(2).replace(diffusion=lambda lam, X: np.broadcast_to(a, (X.shape[0], 2, 2)),
                                 delta=0.05)
    gen = discretize_generator(field, 0, Grid.box([-1, -1], [1, 1], 1 / 4))
    assert gen.violations.all()


def test_two_drift_value_below_terminal_data():
    field = two_drift(2)
    spec = ProblemSpec.elliptic(field, BALL)
    rep = policy_iteration(spec, Grid.for_domain(BALL, 1 / 16))
    g = rep.solution.grid
    X = g.coords(g.interior)
    # pushing towards negative x1 can only lower E[X1 at exit]
    assert np.all(rep.solution.values[g.interior] <= X[:, 0] + 1e-9)
    assert rep.converged
    assert set(np.unique(rep.policy.values)) <= {0.0, 1.0}


def test_policy_iteration_needs_elliptic_spec():
    spec = ProblemSpec.discounted(capped_quadratic(2))
    with pytest.raises(ArgumentError):
        policy_iteration(spec, Grid.for_domain(BALL, 1 / 8))


def test_discounted_constant_cost():
    field = identity(2, running_cost=2.0).replace(discount=1.0, g_bound=2.0)
    spec = ProblemSpec.discounted(field)
    rep = solve_discounted(spec, Grid.box([-1, -1], [1, 1], 1 / 8), enlargements=1)
    np.testing.assert_allclose(rep.solution.values, 2.0, atol=1e-7)


def _capped_oracle():
    # |W_t|^2 is exponential with mean 2t in two dimensions
    return quad(lambda t: math.exp(-t) * 2 * t * (1 - math.exp(-2 / t)) if t > 0 else 0.0,
                0, np.inf)[0]


def test_discounted_capped_quadratic_against_closed_form():
    spec = ProblemSpec.discounted(capped_quadratic(2))
    rep = solve_discounted(spec, Grid.box([-4, -4], [4, 4], 1 / 8), enlargements=1)
    w0 = float(rep.solution.at(np.zeros((1, 2)))[0])
    assert w0 == pytest.approx(_capped_oracle(), abs=0.02)
    assert len(rep.extra["truncation_diffs"]) == 1


def test_viscosity_residual_passes_on_solution(laplace32):
    spec, rep = laplace32
    v = viscosity_residual(rep.solution, spec, 60, radii=(0.125,), seed=1)
    assert v.pass_fraction == 1.0
    assert len(v.probes) + v.skipped == 60


def test_viscosity_residual_rejects_wrong_function(laplace32):
    spec, rep = laplace32
    wrong = GridFunction.from_function(rep.solution.grid,
                                       lambda X: (1 - (X ** 2).sum(1)) / 8)
    v = viscosity_residual(wrong, spec, 60, radii=(0.125,), seed=1)
    assert v.pass_fraction < 0.5
    assert all(not p["super_pass"] for p in v.violations)


def test_viscosity_margin_shrinks_with_h(laplace32):
    spec, coarse = laplace32
    fine = policy_iteration(spec, Grid.for_domain(BALL, 1 / 64))
    mc = viscosity_residual(coarse.solution, spec, 40, seed=2).mean_margin()
    mf = viscosity_residual(fine.solution, spec, 40, seed=2).mean_margin()
    assert mf <= 0.6 * mc


def test_report_json_roundtrip(laplace32):
    import json
    _, rep = laplace32
    data = json.loads(rep.to_json())
    assert data["converged"] is True
    assert data["h"] == 1 / 32
