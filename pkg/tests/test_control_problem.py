import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldcontrol.control_problem import (CoefficientField, ControlSet, Domain, ProblemSpec,
                                       check_domination, check_ellipticity, equicontinuity_report,
                                       hamiltonian,
                                       hamiltonian_batch, lp_norm, mollifier_nodes, mollify)
from ldcontrol.errors import ArgumentError, DataError
from ldcontrol.presets import (checkerboard, identity, laplacian, ld_singular, singular_profile,
                               two_drift)


def test_control_set_rejects_duplicates_and_empty():
    with pytest.raises(DataError):
        ControlSet.from_params([[1.0], [1.0]])
    with pytest.raises(DataError):
        ControlSet.from_params([])


def test_control_set_labels_and_index():
    cs = ControlSet.from_params([[1.0], [-1.0]], labels=["plus", "minus"])
    assert cs.labels == ["plus", "minus"]
    assert cs.index("minus") == 1
    assert cs.params.shape == (2, 1)


def test_uniform_mesh_size():
    cs = ControlSet.uniform_mesh([-1, -1], [1, 1], 3)
    assert cs.params.shape == (9, 2)


def test_field_validates_delta():
    f = identity(2)
    with pytest.raises(DataError):
        f.replace(delta=0.0)
    with pytest.raises(DataError):
        f.replace(delta=1.5)


def test_ellipticity_identity_passes():
    X = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    rep = check_ellipticity(identity(2), (0, X))
    assert rep.passed
    assert rep.min_eig == pytest.approx(1.0)


def test_ellipticity_flags_out_of_band_spectrum():
    # a = diag(3, 3) is outside [1/2, 2] for delta = 1/2
    f = identity(2).replace(diffusion=lambda lam, X: np.broadcast_to(3 * np.eye(2),
                                                                     (X.shape[0], 2, 2)),
                            delta=0.5)
    assert not check_ellipticity(f, [(0, [0.0, 0.0])]).passed


def test_asymmetric_diffusion_names_the_sample():
    def diffusion(lam, X):
        A = np.tile(np.eye(2), (X.shape[0], 1, 1))
        A[:, 0, 1] = np.where(X[:, 0] > 0.4, 0.2, 0.0)
        return A
    f = identity(2).replace(diffusion=diffusion)
    with pytest.raises(DataError, match="sample 1"):
        check_ellipticity(f, [(0, [0.0, 0.0]), (0, [0.5, 0.5])])


def test_checkerboard_satisfies_its_band():
    f = checkerboard(2)
    X = np.random.default_rng(1).uniform(-1, 1, (400, 2))
    rep = check_ellipticity(f, (0, X))
    assert rep.passed
    assert rep.min_eig == pytest.approx(0.5)


def test_domination_of_two_drift():
    f = two_drift(2, speed=0.5)
    X = np.zeros((5, 2))
    assert check_domination(f, (0, X))["passed"]
    assert check_domination(f, (1, X))["passed"]


def test_hamiltonian_laplacian_value():
    val, k = hamiltonian(laplacian(2), [0.1, 0.2], [0.0, 0.0], -np.eye(2))
    # 0.5 tr(-I) + 1
    assert val == pytest.approx(0.0)
    assert k == 0


def test_hamiltonian_two_drift_picks_minus_for_positive_gradient():
    val, k = hamiltonian(two_drift(2), [0.0, 0.0], [1.0, 0.0], np.zeros((2, 2)))
    assert k == 1
    assert val == pytest.approx(-0.5)


def test_hamiltonian_tie_goes_to_lowest_index():
    _, k = hamiltonian(two_drift(2), [0.0, 0.0], [0.0, 0.0], np.zeros((2, 2)))
    assert k == 0


def test_hamiltonian_rejects_asymmetric_hessian():
    with pytest.raises(ArgumentError):
        hamiltonian(laplacian(2), [0, 0], [0, 0], np.array([[0.0, 1.0], [0.0, 0.0]]))


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2))
def test_hamiltonian_batch_is_min_of_table(p1, p2, m):
    f = two_drift(2)
    X = np.zeros((1, 2))
    vals, idx, table = hamiltonian_batch(f, X, [[p1, p2]], [m * np.eye(2)], return_all=True)
    assert vals[0] == table[:, 0].min()
    assert idx[0] == int(np.argmin(table[:, 0]))


def test_domain_projection_ball_and_box():
    ball = Domain.ball([0.0, 0.0], 1.0)
    P = ball.project(np.array([[2.0, 0.0], [0.0, 0.5]]))
    np.testing.assert_allclose(P, [[1.0, 0.0], [0.0, 1.0]])
    box = Domain.box([0, 0], [1, 1])
    np.testing.assert_allclose(box.project(np.array([[2.0, 0.5]])), [[1.0, 0.5]])
    np.testing.assert_allclose(box.project(np.array([[0.9, 0.5]])), [[1.0, 0.5]])


def test_signed_distance_sign_convention():
    ball = Domain.ball([0.0, 0.0], 1.0)
    sd = ball.signed_distance(np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_allclose(sd, [-1.0, 0.0, 1.0])


def test_problem_spec_fingerprint_is_stable():
    a = ProblemSpec.elliptic(laplacian(2), Domain.ball([0, 0], 1))
    b = ProblemSpec.elliptic(laplacian(2), Domain.ball([0, 0], 1))
    assert a.fingerprint == b.fingerprint


def test_lp_norm_unit_profile_closed_forms():
    ball = Domain.ball([0.0, 0.0], 1.0)
    # int_B1 1/(2|x|) dx = pi
    assert lp_norm(singular_profile, ball, 1) == pytest.approx(math.pi, abs=1e-9)
    # p = 3/2: (2 pi 2^{-3/2} / (1/2))^{2/3}
    expected = (2 * math.pi * 2 ** -1.5 / 0.5) ** (2 / 3)
    assert lp_norm(singular_profile, ball, 1.5) == pytest.approx(expected, rel=1e-8)


def test_lp_norm_log_divergence():
    ball = Domain.ball([0.0, 0.0], 1.0)
    for a in (1e-2, 1e-4):
        sq = lp_norm(singular_profile, ball, 2, inner_cutoff=a) ** 2
        assert sq == pytest.approx(math.pi / 2 * math.log(1 / a), rel=1e-8)


def test_lp_norm_three_dimensions():
    ball = Domain.ball([0.0, 0.0, 0.0], 1.0)
    # int_B1 1 dx = 4 pi / 3
    one = lambda X: np.ones(X.shape[0])  # noqa: E731
    assert lp_norm(one, ball, 1) == pytest.approx(4 * math.pi / 3, rel=1e-9)


def test_lp_norm_non_finite_integrand_is_data_error():
    ball = Domain.ball([0.0, 0.0], 1.0)
    with pytest.raises(DataError):
        lp_norm(lambda X: np.full(X.shape[0], np.nan), ball, 1)


def test_mollifier_weights_sum_to_one():
    nodes, w = mollifier_nodes(2, 8)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.linalg.norm(nodes, axis=1) < 1)


def test_mollify_keeps_linear_drift_and_smooths_checkerboard():
    f = identity(2).replace(drift=lambda lam, X: X.copy())
    m = mollify(f, 0.1)
    X = np.array([[0.3, -0.2]])
    # the bump is symmetric, so linear functions are reproduced
    np.testing.assert_allclose(m.b(0, X), X, atol=1e-12)
    cb = mollify(checkerboard(2), 0.05)
    A = cb.a(0, np.array([[0.25 / 3, 0.0]]))   # on an interface
    assert 0.5 < A[0, 0, 0] < 1.5


def test_mollify_rejects_nonpositive_radius():
    with pytest.raises(ArgumentError):
        mollify(identity(2), 0.0)


def test_ld_singular_drift_points_inward_and_truncates():
    f = ld_singular(2, truncation=10.0)
    X = np.array([[0.5, 0.0], [0.01, 0.0], [2.0, 0.0], [0.0, 0.0]])
    B = f.b(0, X)
    assert B[0, 0] == pytest.approx(-2 / (2 * 0.5))
    assert np.linalg.norm(B[1]) == pytest.approx(10.0)
    np.testing.assert_array_equal(B[2], 0.0)
    np.testing.assert_array_equal(B[3], 0.0)


def test_ld_singular_flow_matches_ode():
    f = ld_singular(2)
    X = np.array([[0.5, 0.0]])
    # |x|^2 decreases at rate d = 2
    Y = f.drift.flow(None, X, 0.01)
    assert Y[0, 0] == pytest.approx(math.sqrt(0.25 - 0.02))
    assert f.drift.flow(None, X, 1.0)[0, 0] == 0.0


def test_field_requires_dim_two():
    with pytest.raises(DataError):
        CoefficientField(dim=1, controls=ControlSet.single(), drift=None, diffusion=None,
                         delta=1.0, running_cost=None)


def test_equicontinuity_report_of_two_drift():
    X = np.array([[0.0, 0.0], [0.3, -0.2]])
    rep = equicontinuity_report(two_drift(speed=0.5), X)
    # controls +1 and -1 sit 2 apart and move the drift by 1
    assert rep["pairs"] == 2
    assert rep["max_jump"] == pytest.approx(1.0)
    assert rep["max_ratio"] == pytest.approx(0.5)
    assert equicontinuity_report(laplacian(2), X)["pairs"] == 0
