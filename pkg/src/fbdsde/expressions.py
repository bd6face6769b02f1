"""Arithmetic expressions over model variables, with symbolic derivatives.

Only a whitelisted subset of Python expression syntax is accepted: numbers,
the model variables, named parameters, ``+ - * / **``, unary minus and calls
to a fixed set of elementary functions. The parsed tree is converted to
sympy for differentiation and compiled to numpy with ``lambdify``.
"""
from __future__ import annotations

import ast
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np
import sympy as sp

__all__ = ["ExpressionError", "Expression", "VARIABLES"]

VARIABLES = ("t", "x", "y", "Y", "z", "Z", "v")

_FUNCS = {
    "exp": sp.exp, "log": sp.log, "sin": sp.sin, "cos": sp.cos, "tanh": sp.tanh,
    "sqrt": sp.sqrt, "abs": sp.Abs, "atan": sp.atan, "cosh": sp.cosh, "sinh": sp.sinh,
}
_BINOPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b,
           ast.Mult: lambda a, b: a * b, ast.Div: lambda a, b: a / b,
           ast.Pow: lambda a, b: a ** b}


class ExpressionError(ValueError):
    pass


def _build(node, env: Mapping[str, sp.Basic]):
    if isinstance(node, ast.Expression):
        return _build(node.body, env)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return sp.nsimplify(node.value) if isinstance(node.value, int) else sp.Float(node.value)
    if isinstance(node, ast.Name):
        if node.id not in env:
            raise ExpressionError(f"unknown name {node.id!r}")
        return env[node.id]
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_build(node.left, env), _build(node.right, env))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        e = _build(node.operand, env)
        return -e if isinstance(node.op, ast.USub) else e
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        if node.func.id not in _FUNCS:
            raise ExpressionError(f"function {node.func.id!r} is not allowed")
        if len(node.args) != 1:
            raise ExpressionError(f"{node.func.id} takes one argument")
        return _FUNCS[node.func.id](_build(node.args[0], env))
    raise ExpressionError(f"unsupported syntax: {ast.dump(node)[:60]}")


class Expression:
    """A scalar expression in a fixed ordered set of variables.

    >>> e = Expression("0.5*(y**2 + v**2)", ("t", "y", "v"))
    >>> float(e(0.0, 2.0, 1.0)), float(e.derivative("y")(0.0, 2.0, 1.0))
    (2.5, 2.0)
    """

    def __init__(self, text: str, variables: Sequence[str], params: Optional[Mapping[str, float]] = None):
        self.text = str(text)
        self.variables = tuple(variables)
        self.params = dict(params or {})
        bad = set(self.variables) - set(VARIABLES)
        if bad:
            raise ExpressionError(f"unknown variables {sorted(bad)}")
        self._symbols = {name: sp.Symbol(name, real=True) for name in self.variables}
        env: Dict[str, sp.Basic] = dict(self._symbols)
        for k, val in self.params.items():
            if k in env or k in _FUNCS:
                raise ExpressionError(f"parameter {k!r} shadows a variable or function")
            env[k] = sp.Float(val)
        try:
            tree = ast.parse(self.text, mode="eval")
        except SyntaxError as exc:
            raise ExpressionError(f"cannot parse {self.text!r}: {exc.msg}") from None
        self.sym = _build(tree, env)
        self._fn = self._compile(self.sym)

    def _compile(self, expr) -> Callable:
        args = [self._symbols[n] for n in self.variables]
        fn = sp.lambdify(args, expr, modules="numpy")
        self.constant = None if expr.free_symbols else float(expr)
        if expr.free_symbols:
            return fn
        const = self.constant
        # lambdify returns a bare scalar for constants; broadcast against the inputs instead
        return lambda *a: np.full(np.broadcast(*a).shape, const) if a else const

    @classmethod
    def _from_sym(cls, sym, like: "Expression") -> "Expression":
        e = cls.__new__(cls)
        e.text, e.variables, e.params = str(sym), like.variables, like.params
        e._symbols, e.sym = like._symbols, sym
        e._fn = e._compile(sym)
        return e

    def __call__(self, *args):
        return self._fn(*args)

    def derivative(self, var: str) -> "Expression":
        if var not in self._symbols:
            raise ExpressionError(f"{var!r} is not a variable of {self.text!r}")
        return Expression._from_sym(sp.diff(self.sym, self._symbols[var]), self)

    def depends_on(self, var: str) -> bool:
        return var in self._symbols and self._symbols[var] in self.sym.free_symbols

    def __repr__(self):
        return f"Expression({self.text!r})"
