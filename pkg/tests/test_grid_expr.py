import numpy as np
import pytest

from ldcontrol.control_problem import Domain
from ldcontrol.errors import ArgumentError
from ldcontrol.expr import ExpressionError, compile_expression
from ldcontrol.grid import BOUNDARY, EXTERIOR, INTERIOR, Grid, GridFunction


def test_expression_evaluates_states_and_params():
    e = compile_expression("x1 * lambda1 + abs(x2)^2", 2, 1)
    X = np.array([[1.0, 0.0], [2.0, -1.0]])
    np.testing.assert_allclose(e(X, np.array([3.0])), [3.0, 7.0])


def test_expression_error_reports_column():
    with pytest.raises(ExpressionError, match="column"):
        compile_expression("x1 + * 2", 2)


def test_expression_rejects_unknown_names():
    with pytest.raises(ExpressionError):
        compile_expression("x3", 2)
    with pytest.raises(ExpressionError):
        compile_expression("__import__('os')", 2)


def test_expression_constant_has_row_shape():
    e = compile_expression("2", 2)
    assert e(np.zeros((4, 2)), np.zeros(0)).shape == (4,)


def test_grid_requires_aligned_extent():
    with pytest.raises(ArgumentError):
        Grid.box([0, 0], [1, 1], 0.3)


def test_grid_classification_for_ball():
    g = Grid.for_domain(Domain.ball([0, 0], 1), 1 / 8)
    X = g.coords()
    inside = np.linalg.norm(X, axis=1) < 1
    assert np.array_equal(g.node_class == INTERIOR, inside)
    assert np.all(g.node_class[~inside] != INTERIOR)
    assert (g.node_class == BOUNDARY).any() and (g.node_class == EXTERIOR).any()


def test_box_grid_is_neumann_with_all_nodes_interior():
    g = Grid.box([-1, -1], [1, 1], 0.25)
    assert g.closure == "neumann"
    assert g.n_interior == g.size


def test_ravel_unravel_roundtrip():
    g = Grid.box([0, 0, 0], [1, 1, 1], 0.25)
    idx = np.arange(g.size)
    assert np.array_equal(g.ravel(g.unravel(idx)), idx)


def test_nearest_node():
    g = Grid.box([0, 0], [1, 1], 0.25)
    i = g.nearest(np.array([[0.26, 0.74]]))
    np.testing.assert_allclose(g.coords(i), [[0.25, 0.75]])


def test_grid_function_interpolates_linear_exactly():
    g = Grid.box([0, 0], [1, 1], 0.125)
    u = GridFunction.from_function(g, lambda X: 2 * X[:, 0] - X[:, 1])
    np.testing.assert_allclose(u.at(np.array([[0.3, 0.7]])), [-0.1], atol=1e-12)


def test_grid_function_rejects_nan_on_live_nodes():
    g = Grid.box([0, 0], [1, 1], 0.5)
    with pytest.raises(Exception):
        GridFunction(g, np.full(g.size, np.nan))


def test_grid_function_csv_roundtrip(tmp_path):
    g = Grid.for_domain(Domain.ball([0, 0], 1), 0.25)
    u = GridFunction.from_function(g, lambda X: np.sin(X[:, 0]) + X[:, 1] ** 2)
    u.to_csv(tmp_path / "u.csv")
    v = GridFunction.from_csv(tmp_path / "u.csv")
    assert v.grid.same_lattice(g)
    assert np.array_equal(v.values, u.values)
    assert np.array_equal(v.grid.node_class, g.node_class)
