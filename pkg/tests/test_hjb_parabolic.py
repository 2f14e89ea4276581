import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ldcontrol.errors import ArgumentError
from ldcontrol.grid import Grid, GridFunction
from ldcontrol.hjb_parabolic import (SemigroupRun, check_semigroup, joint_modulus,
                                     regularization_probe, semigroup_apply, trusted_box)
from ldcontrol.presets import identity, two_drift

BOX = Grid.box([-1.5, -1.5], [1.5, 1.5], 1 / 16)
SMALL = Grid.box([-1, -1], [1, 1], 1 / 8)


def test_zero_time_is_identity():
    run = semigroup_apply(identity(2), "x1^2 + x2", 0.0, BOX, 0.01)
    assert run.n_steps == 0
    assert np.array_equal(run.output.values, run.terminal.values)


def test_constants_evolve_linearly():
    field = identity(2, running_cost=0.5, terminal="const", value=2.0)
    run = semigroup_apply(field, field.f, 0.3, SMALL, 0.05)
    np.testing.assert_allclose(run.output.values, 2.0 + 0.5 * 0.3, atol=1e-8)


def test_heat_quadratic_at_center():
    run = semigroup_apply(identity(2), "x1^2 + x2^2", 0.2, BOX, 0.01)
    vals, ok = run.values_at([[0.0, 0.0]])
    # E|W_t|^2 = d t
    assert ok[0]
    assert vals[0] == pytest.approx(0.4, abs=1e-2)


def test_explicit_step_guard():
    with pytest.raises(ArgumentError):
        semigroup_apply(identity(2), "x1", 0.1, SMALL, 0.01, mode="explicit")


def test_explicit_and_implicit_agree():
    h = SMALL.h
    dt = h * h / 4
    f = "min(abs(x1), 0.5)"
    ex = semigroup_apply(two_drift(2), f, 0.1, SMALL, dt, mode="explicit")
    im = semigroup_apply(two_drift(2), f, 0.1, SMALL, dt)
    tr = im.trusted
    assert np.abs(ex.output.values - im.output.values)[tr].max() < 0.02


def test_trusted_box_shrinks_with_time():
    lo, hi = trusted_box(BOX, 0.04, 1.0)
    np.testing.assert_allclose(lo, [-1.1, -1.1])
    np.testing.assert_allclose(hi, [1.1, 1.1])


def test_policies_and_feedback():
    run = semigroup_apply(two_drift(2), "x1", 0.1, SMALL, 0.05)
    assert run.policies.shape == (2, SMALL.size)
    fb = run.feedback()
    k = fb.controls(0.0, np.array([[0.0, 0.0]]))
    assert int(np.ravel(k)[0]) in (0, 1)


def test_save_load_roundtrip(tmp_path):
    run = semigroup_apply(two_drift(2), "x1", 0.1, SMALL, 0.05)
    manifest = run.save(tmp_path)
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((tmp_path / name).read_bytes()).hexdigest() == digest
    back = SemigroupRun.load(tmp_path)
    assert np.array_equal(back.output.values, run.output.values)
    assert np.array_equal(back.policies, run.policies)
    assert "wall_time" not in json.loads((tmp_path / "manifest.json").read_text())["stats"]


def test_zero_split_has_zero_gap():
    rep = check_semigroup(two_drift(2), "x1", 0.1, 0.0, SMALL, 0.05)
    assert rep["gap"] == 0.0
    assert rep["pass"]


def test_semigroup_law_heat():
    rep = check_semigroup(identity(2), "x1^2", 0.1, 0.1, BOX, 0.02,
                          exact=lambda t, X: X[:, 0] ** 2 + t)
    assert rep["pass"]
    assert rep["error_full"] < 0.05


def test_mismatched_terminal_grid():
    other = GridFunction.from_function(Grid.box([-1, -1], [1, 1], 1 / 4), lambda X: X[:, 0])
    with pytest.raises(ArgumentError):
        check_semigroup(identity(2), other, 0.1, 0.1, SMALL, 0.05)


def _terminal(seed):
    rng = np.random.default_rng(seed)
    return GridFunction(SMALL, rng.uniform(-1, 1, SMALL.size))


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0), st.floats(-2.0, 2.0))
def test_monotone_contractive_and_shift_equivariant(seed, bump, c):
    field = two_drift(2)
    f1 = _terminal(seed)
    noise = np.random.default_rng(seed + 1).uniform(0, 1, SMALL.size)
    f2 = GridFunction(SMALL, f1.values + bump * noise)
    u1 = semigroup_apply(field, f1, 0.1, SMALL, 0.05, tol=1e-12).output.values
    u2 = semigroup_apply(field, f2, 0.1, SMALL, 0.05, tol=1e-12).output.values
    assert np.all(u2 >= u1 - 1e-9)
    assert np.abs(u2 - u1).max() <= np.abs(f2.values - f1.values).max() + 1e-9
    shifted = GridFunction(SMALL, f1.values + c)
    u3 = semigroup_apply(field, shifted, 0.1, SMALL, 0.05, tol=1e-12).output.values
    np.testing.assert_allclose(u3, u1 + c, atol=1e-8)


def test_regularization_of_indicator():
    step = lambda X: (X[:, 0] > 0) * 1.0  # noqa: E731
    rows = regularization_probe(identity(2), step, [0.0, 0.1], BOX, 0.01)
    assert rows[0]["discontinuous"]
    assert rows[1]["alpha"] > 0.8
    assert not rows[1]["discontinuous"]


def test_joint_modulus_fit():
    rep = joint_modulus(identity(2), "min(abs(x1), 1)", 0.1, BOX, 0.005, [1, 2, 4, 8, 16],
                        f_modulus=lambda r: r)
    values = [row["value"] for row in rep["rows"]]
    assert values == sorted(values)
    assert 0.5 < rep["fit"]["exponent"] < 1.5
    assert rep["fit"]["residual"] < 0.1
    with pytest.raises(ArgumentError):
        joint_modulus(identity(2), "x1", 0.1, SMALL, 0.05, [5])
