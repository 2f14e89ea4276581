import math

import numpy as np
import pytest
from scipy.linalg import sqrtm

from ldcontrol.control_problem import Domain, ProblemSpec
from ldcontrol.errors import ArgumentError, DataError, EllipticityError
from ldcontrol.grid import Grid, GridFunction
from ldcontrol.presets import identity, laplacian, ld_singular, two_drift
from ldcontrol.sde_engine import (FeedbackPolicy, exit_exp_moment, exit_stats, simulate_batch,
                                  simulate_many, simulate_path, sqrt_spd, sqrt_spd_batch,
                                  tail_fit)

BALL = Domain.ball([0.0, 0.0], 1.0)
ONLY = FeedbackPolicy.constant(0, "only")


def test_sqrt_spd_batch_matches_scipy():
    rng = np.random.default_rng(0)
    for d in (2, 3):
        M = rng.normal(size=(20, d, d))
        A = np.eye(d) + M @ np.swapaxes(M, 1, 2)
        S = sqrt_spd_batch(A)
        for a, s in zip(A, S):
            np.testing.assert_allclose(s, sqrtm(a).real, atol=1e-10)


def test_sqrt_spd_rejects_indefinite():
    with pytest.raises(EllipticityError):
        sqrt_spd(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_same_seed_same_paths():
    a = simulate_many(identity(2), BALL, ONLY, [0, 0], 1e-3, 200, seed=7)
    b = simulate_many(identity(2), BALL, ONLY, [0, 0], 1e-3, 200, seed=7)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.end, b.end)


def test_chunking_and_block_size_do_not_change_paths():
    f = identity(2)
    a = simulate_many(f, BALL, ONLY, [0.2, 0], 1e-3, 300, seed=3)
    b = simulate_many(f, BALL, ONLY, [0.2, 0], 1e-3, 300, seed=3, chunk=77, block=5)
    assert np.array_equal(a.tau, b.tau)
    assert np.array_equal(a.end, b.end)


def test_path_subset_reproduces_same_ids():
    f = identity(2)
    full = simulate_batch(f, BALL, ONLY, [0, 0], 1e-3, np.arange(50), seed=1)
    part = simulate_batch(f, BALL, ONLY, [0, 0], 1e-3, np.arange(20, 30), seed=1)
    assert np.array_equal(full.tau[20:30], part.tau)


def test_compiled_and_fallback_paths_identical():
    from ldcontrol import kernels
    if kernels.BACKEND != "cython":
        pytest.skip("compiled extension not built")
    f = two_drift(2)
    a = simulate_batch(f, BALL, FeedbackPolicy.constant(1), [0, 0], 1e-3, np.arange(64), 2,
                       backend="cython")
    b = simulate_batch(f, BALL, FeedbackPolicy.constant(1), [0, 0], 1e-3, np.arange(64), 2,
                       backend="python")
    assert np.array_equal(a.end, b.end)
    assert np.array_equal(a.tau, b.tau)


def test_antithetic_pairs_mirror():
    f = identity(2)
    res = simulate_many(f, None, ONLY, [0.3, -0.1], 1e-2, 10, seed=0, horizon=0.5,
                        antithetic=True)
    np.testing.assert_allclose(res.end[0::2] + res.end[1::2],
                               np.tile([0.6, -0.2], (5, 1)), atol=1e-12)


def test_boundary_start_exits_immediately():
    res = simulate_many(identity(2), BALL, ONLY, [1.0, 0.0], 1e-3, 5, seed=0)
    assert res.exited.all()
    assert np.all(res.tau == 0)
    np.testing.assert_allclose(res.end, [[1.0, 0.0]] * 5)


def test_outside_start_is_rejected():
    with pytest.raises(ArgumentError):
        simulate_many(identity(2), BALL, ONLY, [1.5, 0.0], 1e-3, 5, seed=0)


def test_exit_points_on_sphere_and_times_positive():
    res = simulate_many(identity(2), BALL, ONLY, [0, 0], 1e-3, 500, seed=4)
    np.testing.assert_allclose(np.linalg.norm(res.end, axis=1), 1.0, atol=1e-12)
    assert np.all(res.tau > 0)
    assert not res.truncated.any()


def test_mean_exit_time_of_unit_disc():
    # E tau = (1 - |x|^2) / d for Brownian motion; Euler exit detection adds O(sqrt dt)
    dt = 1e-3
    st = exit_stats(ProblemSpec.elliptic(identity(2), BALL), ONLY, [0, 0], dt, 20_000, seed=5)
    assert abs(st["mean_tau"] - 0.5) <= 3 * st["stderr"] + 0.6 * math.sqrt(dt)


def test_horizon_stops_paths_at_final_time():
    res = simulate_many(identity(2), None, ONLY, [0, 0], 0.03, 20, seed=0, horizon=0.1)
    # 0.1 / 0.03 rounds up to 4 steps of 0.025
    assert res.dt == pytest.approx(0.025)
    np.testing.assert_allclose(res.tau, 0.1)


def test_max_steps_truncates():
    res = simulate_many(identity(2), BALL, ONLY, [0, 0], 1e-4, 20, seed=0, max_steps=10)
    assert res.truncated.all()


def test_discounted_cost_of_constant_rate():
    f = identity(2, running_cost=1.0)
    res = simulate_many(f, None, ONLY, [0, 0], 0.1, 3, seed=0, horizon=2.0, rho=0.5)
    np.testing.assert_allclose(res.disc_cost, (1 - math.exp(-1.0)) / 0.5, rtol=1e-12)


def test_grid_policy_lookup():
    g = Grid.box([-1, -1], [1, 1], 0.5)
    pol = FeedbackPolicy.from_grid(GridFunction.from_function(g, lambda X: (X[:, 0] > 0) * 1.0))
    ks = pol.controls(0.0, np.array([[-0.6, 0.0], [0.6, 0.0]]))
    assert list(ks) == [0, 1]
    with pytest.raises(DataError):
        FeedbackPolicy.constant(3).validate(2)


def test_time_dependent_policy_index():
    g = Grid.box([-1, -1], [1, 1], 0.5)
    grids = [GridFunction.from_function(g, lambda X, k=k: np.full(X.shape[0], float(k % 2)))
             for k in range(4)]
    pol = FeedbackPolicy.time_dependent(grids, 0.25, 1.0)
    # at time t the remaining horizon is 1 - t, so step ceil((1 - t) / 0.25)
    assert int(np.ravel(pol.controls(0.0, np.zeros((1, 2))))[0]) == 1
    assert int(np.ravel(pol.controls(0.8, np.zeros((1, 2))))[0]) == 0


def test_simulate_path_csv(tmp_path):
    spec = ProblemSpec.elliptic(laplacian(2), BALL)
    ps = simulate_path(spec, ONLY, [0, 0], 1e-2, seed=0, max_steps=10_000)
    path = ps.to_csv(tmp_path / "p.csv")
    lines = path.read_text().splitlines()
    assert lines[0].startswith("t,x1,x2")
    assert lines[-1].endswith(",-1")
    assert ps.exited


def test_exit_exp_moment_finite():
    spec = ProblemSpec.elliptic(identity(2), BALL)
    m = exit_exp_moment(spec, ONLY, [0, 0], 0.5, 2000, 1e-3, seed=0)
    assert 1.0 < m["estimate"] < 2.0
    assert not m["lower_bound"]


def test_tail_fit_recovers_exponential_rate():
    t = np.linspace(0, 3, 31)
    tail = list(zip(t, np.exp(-2.0 * t)))
    fit = tail_fit(tail)
    assert fit["slope"] == pytest.approx(-2.0)
    assert fit["r2"] == pytest.approx(1.0)


def test_singular_drift_uses_exact_flow_without_clipping():
    f = ld_singular(2, truncation=1000.0)
    res = simulate_many(f, BALL, ONLY, [0, 0], 1e-4, 200, seed=0, horizon=0.2)
    assert res.clips.sum() == 0
