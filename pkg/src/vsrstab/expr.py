"""Small infix expression language used in configs.

Expressions are parsed with :mod:`ast` against a whitelist and evaluated
element-wise on numpy arrays.  Supported: ``+ - * / **`` (``^`` is accepted as
power), unary minus, numeric constants and the functions ``exp``, ``log``,
``sqrt``, ``abs``, ``pow``, ``min``, ``max``, ``tanh``, ``sin``, ``cos``.

>>> Expr("3*pow(s,4)+pow(s,2)")(s=1.0)
4.0
"""

from __future__ import annotations

import ast
import math
from typing import Callable

import numpy as np

from .errors import InvalidExpression

_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
    ast.BitXor: np.power,
}


def _variadic(op):
    def f(*args):
        if len(args) < 2:
            raise InvalidExpression("min/max need at least two arguments")
        out = args[0]
        for a in args[1:]:
            out = op(out, a)
        return out

    return f


_FUNCS: dict[str, tuple[Callable, int | None]] = {
    "exp": (np.exp, 1),
    "log": (np.log, 1),
    "sqrt": (np.sqrt, 1),
    "abs": (np.abs, 1),
    "tanh": (np.tanh, 1),
    "sin": (np.sin, 1),
    "cos": (np.cos, 1),
    "pow": (np.power, 2),
    "min": (_variadic(np.minimum), None),
    "max": (_variadic(np.maximum), None),
}

_CONSTANTS = {"pi": math.pi, "e_const": math.e}


class Expr:
    """A compiled expression over named variables."""

    def __init__(self, text: str):
        if not isinstance(text, str) or not text.strip():
            raise InvalidExpression("expression must be a non-empty string")
        self.text = text.strip()
        try:
            tree = ast.parse(self.text.replace("^", "**"), mode="eval")
        except SyntaxError as exc:
            raise InvalidExpression(f"cannot parse {text!r}: {exc.msg}") from None
        self._tree = tree.body
        self.variables: set[str] = set()
        self._fn = self._compile(self._tree)

    def __repr__(self):
        return f"Expr({self.text!r})"

    def __call__(self, **env):
        missing = self.variables - env.keys()
        if missing:
            raise InvalidExpression(f"unbound variables {sorted(missing)} in {self.text!r}")
        with np.errstate(over="ignore", invalid="ignore"):
            out = self._fn(env)
        if np.ndim(out) == 0:
            return float(out)
        return out

    def _compile(self, node):
        if isinstance(node, ast.Constant):
            if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
                raise InvalidExpression(f"unsupported constant {node.value!r}")
            value = float(node.value)
            return lambda env: value
        if isinstance(node, ast.Name):
            name = node.id
            if name in _CONSTANTS:
                value = _CONSTANTS[name]
                return lambda env: value
            if name in _FUNCS:
                raise InvalidExpression(f"function {name!r} used as a variable")
            self.variables.add(name)
            return lambda env: np.asarray(env[name], dtype=float)
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            inner = self._compile(node.operand)
            if isinstance(node.op, ast.USub):
                return lambda env: np.negative(inner(env))
            return inner
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            op = _BINOPS[type(node.op)]
            left = self._compile(node.left)
            right = self._compile(node.right)
            return lambda env: op(left(env), right(env))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            name = node.func.id
            if name not in _FUNCS or node.keywords:
                raise InvalidExpression(f"unsupported function {name!r}")
            fn, arity = _FUNCS[name]
            if arity is not None and len(node.args) != arity:
                raise InvalidExpression(f"{name} takes {arity} argument(s)")
            args = [self._compile(a) for a in node.args]
            return lambda env: fn(*(a(env) for a in args))
        raise InvalidExpression(f"unsupported syntax in {self.text!r}: {ast.dump(node)[:60]}")

    def monomial(self, var: str = "s") -> tuple[float, float] | None:
        """Return ``(c, p)`` if the expression is exactly ``c * var**p`` with c, p > 0."""
        return _match_monomial(self._tree, var)


def _const(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        inner = _const(node.operand)
        return None if inner is None else -inner
    return None


def _match_monomial(node, var):
    if isinstance(node, ast.Name) and node.id == var:
        return 1.0, 1.0
    power = None
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Pow, ast.BitXor)):
        power = (node.left, node.right)
    elif isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "pow":
        if len(node.args) == 2:
            power = tuple(node.args)
    if power is not None:
        base = _match_monomial(power[0], var)
        p = _const(power[1])
        if base is None or p is None or p <= 0:
            return None
        c, q = base
        return c**p, q * p
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id == "sqrt":
        base = _match_monomial(node.args[0], var) if len(node.args) == 1 else None
        if base is None:
            return None
        return math.sqrt(base[0]), base[1] / 2
    if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Mult, ast.Div)):
        lc, rc = _const(node.left), _const(node.right)
        if isinstance(node.op, ast.Mult):
            if lc is not None:
                m = _match_monomial(node.right, var)
                return None if m is None or lc <= 0 else (lc * m[0], m[1])
            if rc is not None:
                m = _match_monomial(node.left, var)
                return None if m is None or rc <= 0 else (rc * m[0], m[1])
        elif rc is not None and rc > 0:
            m = _match_monomial(node.left, var)
            return None if m is None else (m[0] / rc, m[1])
    return None
