"""Small arithmetic-expression language for user-defined coefficient fields.

Grammar: numbers, the constant ``pi``, variables ``x1..xd`` and
``lambda1..lambdam``, binary ``+ - * / ^``, unary ``-``, and the functions
``abs exp log sqrt min max norm``. ``norm()`` is the Euclidean norm of the
state; ``norm(e1, ..., ek)`` is the norm of its arguments.

Expressions are parsed with :mod:`ast` and compiled into closures that
evaluate on numpy arrays of states.
"""

from __future__ import annotations

import ast
import re
from typing import Callable

import numpy as np

_VAR = re.compile(r"^(x|lambda)([1-9][0-9]*)$")

_UNARY_FUNCS = {"abs": np.abs, "exp": np.exp, "log": np.log, "sqrt": np.sqrt}


class ExpressionError(ValueError):
    def __init__(self, message, source, col=None):
        where = f" at column {col + 1}" if col is not None else ""
        super().__init__(f"{message}{where} in expression {source!r}")
        self.col = col


Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Expression:
    """A compiled expression ``e(x, lam)``.

    ``x`` has shape ``(n, d)``; ``lam`` is the control parameter vector. The
    result always has shape ``(n,)``.
    """

    def __init__(self, source: str, dim: int, n_params: int = 0):
        self.source = source
        self.dim = dim
        self.n_params = n_params
        text = source.replace("^", "**")
        try:
            tree = ast.parse(text.strip(), mode="eval")
        except SyntaxError as exc:
            col = (exc.offset - 1) if exc.offset else None
            raise ExpressionError("syntax error", source, col) from None
        self._names: set[str] = set()
        self._fn = self._compile(tree.body)
        self.variables = sorted(self._names)

    def _compile(self, node) -> Evaluator:
        src = self.source
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            v = float(node.value)
            return lambda x, lam: np.full(x.shape[0], v)
        if isinstance(node, ast.Name):
            if node.id == "pi":
                return lambda x, lam: np.full(x.shape[0], np.pi)
            m = _VAR.match(node.id)
            if not m:
                raise ExpressionError(f"unknown name {node.id!r}", src, node.col_offset)
            kind, idx = m.group(1), int(m.group(2)) - 1
            self._names.add(node.id)
            if kind == "x":
                if idx >= self.dim:
                    raise ExpressionError(f"{node.id} exceeds dimension {self.dim}", src,
                                          node.col_offset)
                return lambda x, lam: x[:, idx]
            if idx >= self.n_params:
                raise ExpressionError(f"{node.id} exceeds control parameter count "
                                      f"{self.n_params}", src, node.col_offset)
            return lambda x, lam: np.full(x.shape[0], float(lam[idx]))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda x, lam: -inner(x, lam)
            return inner
        if isinstance(node, ast.BinOp):
            left, right = self._compile(node.left), self._compile(node.right)
            op = node.op
            if isinstance(op, ast.Add):
                return lambda x, lam: left(x, lam) + right(x, lam)
            if isinstance(op, ast.Sub):
                return lambda x, lam: left(x, lam) - right(x, lam)
            if isinstance(op, ast.Mult):
                return lambda x, lam: left(x, lam) * right(x, lam)
            if isinstance(op, ast.Div):
                return lambda x, lam: left(x, lam) / right(x, lam)
            if isinstance(op, ast.Pow):
                return lambda x, lam: np.power(left(x, lam), right(x, lam))
            raise ExpressionError("unsupported operator", src, node.col_offset)
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            name = node.func.id
            if node.keywords:
                raise ExpressionError("keyword arguments are not allowed", src, node.col_offset)
            args = [self._compile(a) for a in node.args]
            if name in _UNARY_FUNCS:
                if len(args) != 1:
                    raise ExpressionError(f"{name} takes one argument", src, node.col_offset)
                fn, a0 = _UNARY_FUNCS[name], args[0]
                return lambda x, lam: fn(a0(x, lam))
            if name in ("min", "max"):
                if len(args) < 2:
                    raise ExpressionError(f"{name} needs at least two arguments", src,
                                          node.col_offset)
                red = np.minimum if name == "min" else np.maximum

                def _minmax(x, lam, args=args, red=red):
                    out = args[0](x, lam)
                    for a in args[1:]:
                        out = red(out, a(x, lam))
                    return out

                return _minmax
            if name == "norm":
                if not args:
                    def _norm_x(x, lam):
                        s = np.zeros(x.shape[0])
                        for j in range(x.shape[1]):
                            s = s + x[:, j] * x[:, j]
                        return np.sqrt(s)

                    return _norm_x

                def _norm(x, lam, args=args):
                    s = np.zeros(x.shape[0])
                    for a in args:
                        v = a(x, lam)
                        s = s + v * v
                    return np.sqrt(s)

                return _norm
            raise ExpressionError(f"unknown function {name!r}", src, node.col_offset)
        col = getattr(node, "col_offset", None)
        raise ExpressionError(f"unsupported syntax {type(node).__name__}", src, col)

    def __call__(self, x, lam=()):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self._fn(x, np.asarray(lam, dtype=float))
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    def __repr__(self):
        return f"Expression({self.source!r})"


def compile_expression(source, dim: int, n_params: int = 0) -> Expression:
    if isinstance(source, (int, float)):
        source = repr(float(source))
    return Expression(str(source), dim, n_params)
