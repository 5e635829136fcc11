"""Tiny arithmetic expression language used by search-space grammars.

Module shapes and constraints in space files are written as expressions such
as ``"ffn_dim"``, ``"d_embed // k ** 2"`` or ``"d_inner >= 2 * d_model"``.
Only literals, names, arithmetic, comparisons, boolean operators and the
``min``/``max`` functions are accepted.
"""

import ast
from functools import lru_cache

from .errors import ValidationError

_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.BoolOp, ast.Compare, ast.IfExp,
    ast.Name, ast.Load, ast.Constant, ast.Call,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.FloorDiv, ast.Mod, ast.Pow,
    ast.USub, ast.UAdd, ast.Not, ast.And, ast.Or,
    ast.Eq, ast.NotEq, ast.Lt, ast.LtE, ast.Gt, ast.GtE,
)
_FUNCTIONS = {"min": min, "max": max}


@lru_cache(maxsize=None)
def _compile(source):
    try:
        tree = ast.parse(str(source), mode="eval")
    except SyntaxError as exc:
        raise ValidationError(f"bad expression {source!r}: {exc.msg}") from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ValidationError(f"expression {source!r} uses unsupported syntax {type(node).__name__}")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCTIONS or node.keywords:
                raise ValidationError(f"expression {source!r} calls an unsupported function")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float, str, bool)):
            raise ValidationError(f"expression {source!r} has an unsupported literal")
    names = frozenset(
        n.id for n in ast.walk(tree) if isinstance(n, ast.Name) and n.id not in _FUNCTIONS
    )
    return compile(tree, f"<expr {source}>", "eval"), names


def names_in(source):
    """Return the free variable names referenced by an expression."""
    return _compile(source)[1]


def evaluate(source, env):
    if isinstance(source, (int, float)) and not isinstance(source, bool):
        return source
    code, names = _compile(source)
    missing = names - env.keys()
    if missing:
        raise ValidationError(
            f"expression {source!r} references unknown name(s) {sorted(missing)}",
            dimension=sorted(missing)[0],
        )
    return eval(code, {"__builtins__": {}, **_FUNCTIONS}, dict(env))
