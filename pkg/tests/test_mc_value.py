import math

import numpy as np
import pytest
from scipy.integrate import quad

from ldcontrol.control_problem import Domain, ProblemSpec
from ldcontrol.errors import ArgumentError, DependencyError
from ldcontrol.grid import Grid
from ldcontrol.hjb_elliptic import policy_iteration
from ldcontrol.mc_value import (Intermediate, check_dpp, discounted_cut, value_discounted_mc,
                                value_elliptic_mc, value_parabolic_mc)
from ldcontrol.presets import capped_quadratic, identity, laplacian, two_drift
from ldcontrol.sde_engine import FeedbackPolicy

BALL = Domain.ball([0.0, 0.0], 1.0)
ONLY = [FeedbackPolicy.constant(0, "only")]


@pytest.fixture(scope="module")
def laplace_pde():
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    return spec, policy_iteration(spec, Grid.for_domain(BALL, 1 / 32)).solution


def test_laplacian_mc_near_closed_form():
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    est = value_elliptic_mc(spec, ONLY, [0.0, 0.0], 1e-3, 8000, seed=0)
    assert abs(est.value - 0.5) <= 3 * est.stderr + 0.6 * math.sqrt(1e-3)
    assert est.valid


def test_two_drift_picks_negative_push():
    spec = ProblemSpec.elliptic(two_drift(2), BALL)
    pols = [FeedbackPolicy.constant(0, "plus"), FeedbackPolicy.constant(1, "minus")]
    est = value_elliptic_mc(spec, pols, [0.0, 0.0], 1e-3, 2000, seed=0)
    assert est.argmin == "minus"
    assert [row["policy_id"] for row in est.table] == ["plus", "minus"]
    # common random numbers: both estimates share paths, so the ordering is sharp
    assert est.table[1]["estimate"] < est.table[0]["estimate"]


def test_empty_policy_family_rejected():
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    with pytest.raises(ArgumentError):
        value_elliptic_mc(spec, [], [0.0, 0.0], 1e-3, 10, seed=0)


def test_parabolic_at_time_zero_is_terminal_value():
    spec = ProblemSpec.finite_horizon(identity(2), 1.0)
    est = value_parabolic_mc(spec, ONLY, 0.0, [0.3, 0.4], 1e-2, 50, seed=0)
    assert est.value == pytest.approx(0.25)
    assert est.stderr == 0.0


def test_parabolic_heat_second_moment():
    spec = ProblemSpec.finite_horizon(identity(2), 1.0)
    est = value_parabolic_mc(spec, ONLY, 0.5, [0.3, 0.0], 1e-2, 20_000, seed=1)
    # E|x + W_t|^2 = |x|^2 + d t
    assert abs(est.value - 1.09) <= 3 * est.stderr


def test_parabolic_time_outside_horizon():
    spec = ProblemSpec.finite_horizon(identity(2), 1.0)
    with pytest.raises(ArgumentError):
        value_parabolic_mc(spec, ONLY, 1.5, [0.0, 0.0], 1e-2, 10, seed=0)


def test_discounted_constant_cost_is_exact_up_to_tail():
    field = identity(2, running_cost=2.0).replace(discount=1.0)
    spec = ProblemSpec.discounted(field)
    est = value_discounted_mc(spec, ONLY, [0.0, 0.0], 0.05, 20, seed=0)
    cut = est.extra["horizon_cut"]
    assert cut == pytest.approx(discounted_cut(2.0, 1.0, 1e-3))
    assert est.value == pytest.approx(2.0 * (1 - math.exp(-cut)), rel=1e-12)
    assert est.extra["tail_bound"] <= 1e-3 + 1e-15


def test_discounted_short_cut_rejected():
    spec = ProblemSpec.discounted(capped_quadratic(2))
    with pytest.raises(ArgumentError):
        value_discounted_mc(spec, ONLY, [0.0, 0.0], 0.05, 20, seed=0, horizon_cut=1.0)


def test_discounted_capped_quadratic_closed_form():
    # |W_t|^2 is exponential with mean 2t, so E min(|W_t|^2, 4) = 2t (1 - exp(-2/t))
    exact = quad(lambda t: math.exp(-t) * 2 * t * (1 - math.exp(-2 / t)) if t > 0 else 0.0,
                 0, np.inf)[0]
    spec = ProblemSpec.discounted(capped_quadratic(2))
    est = value_discounted_mc(spec, ONLY, [0.0, 0.0], 1e-2, 20_000, seed=3)
    # left-point rule in time is O(dt); the tail is below 1e-3
    assert abs(est.value - exact) <= 3 * est.stderr + 1e-3 + 0.01


def test_dpp_with_zero_intermediate_reduces_to_pde(laplace_pde):
    spec, pde = laplace_pde
    rep = check_dpp(spec, [0.0, 0.0], Intermediate.zero(), ONLY, 0.02, pde, dt=1e-3,
                    n_paths=4000, seed=0)
    assert rep["rhs"] == pytest.approx(0.5, abs=1e-8)
    assert rep["pass"]


def test_dpp_fixed_time_and_subdomain_exit(laplace_pde):
    spec, pde = laplace_pde
    for inter in (Intermediate.time(0.1), Intermediate.exit(Domain.ball([0.0, 0.0], 0.5))):
        rep = check_dpp(spec, [0.1, 0.0], inter, ONLY, 0.02, pde, dt=1e-3, n_paths=4000,
                        seed=2)
        assert rep["pass"], rep


def test_dpp_needs_pde_solution():
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    with pytest.raises(DependencyError):
        check_dpp(spec, [0.0, 0.0], Intermediate.zero(), ONLY, 0.02, None, dt=1e-3,
                  n_paths=10, seed=0)


def test_dpp_subdomain_must_be_strictly_inside(laplace_pde):
    spec, pde = laplace_pde
    with pytest.raises(ArgumentError):
        check_dpp(spec, [0.0, 0.0], Intermediate.exit(Domain.ball([0.5, 0.0], 0.6)), ONLY,
                  0.02, pde, dt=1e-3, n_paths=10, seed=0)


def test_value_table_csv(tmp_path):
    spec = ProblemSpec.elliptic(two_drift(2), BALL)
    pols = [FeedbackPolicy.constant(0, "plus"), FeedbackPolicy.constant(1, "minus")]
    est = value_elliptic_mc(spec, pols, [0.0, 0.0], 1e-2, 100, seed=0)
    lines = est.table_csv(tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "policy_id,estimate,stderr"
    assert len(lines) == 3
