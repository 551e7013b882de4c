"""A small guard language over record fields, parsed with ``ast`` and never eval'd.

Grammar (a subset of Python expressions)::

    expr  := expr and expr | expr or expr | not expr | cmp | NAME
    cmp   := operand (== | != | < | <= | > | >= | in | not in) operand
    operand := NAME | literal | (literal, ...) | [literal, ...]

Literals compared with an enum-valued field are coerced to that field's type,
so ``stage <= 'IIIB'`` uses the stage order. Ordered comparisons involving a
missing value (None) are False.
"""

from __future__ import annotations

import ast
import operator
from enum import Enum
from typing import Any, Callable, Iterable


class PredicateError(ValueError):
    pass


class UnknownField(PredicateError):
    def __init__(self, field: str):
        super().__init__(f"predicate references unknown field {field!r}")
        self.field = field


_ORDERED = {
    ast.Lt: operator.lt,
    ast.LtE: operator.le,
    ast.Gt: operator.gt,
    ast.GtE: operator.ge,
}


def _coerce(value: Any, like: Any) -> Any:
    if isinstance(like, Enum) and not isinstance(value, Enum) and value is not None:
        try:
            return type(like)(value)
        except ValueError:
            return value
    return value


def _compare(op: ast.cmpop, left: Any, right: Any) -> bool:
    left, right = _coerce(left, right), _coerce(right, left)
    if isinstance(op, ast.Eq):
        return left == right
    if isinstance(op, ast.NotEq):
        return left != right
    if isinstance(op, (ast.In, ast.NotIn)):
        if not isinstance(right, (tuple, list, frozenset, set)):
            raise PredicateError("right side of 'in' must be a collection")
        members = [_coerce(r, left) for r in right]
        hit = left in members
        return hit if isinstance(op, ast.In) else not hit
    if left is None or right is None:
        return False
    try:
        return _ORDERED[type(op)](left, right)
    except TypeError:
        return False


class Predicate:
    """A compiled guard; call it with a mapping or an object with attributes."""

    def __init__(self, source: str, fields: Iterable[str] | None = None):
        self.source = source
        try:
            tree = ast.parse(source.strip(), mode="eval")
        except SyntaxError as exc:
            raise PredicateError(f"cannot parse {source!r}: {exc.msg}") from exc
        self.fields: set[str] = set()
        self._allowed = set(fields) if fields is not None else None
        self._fn = self._compile(tree.body)

    def __call__(self, record) -> bool:
        get = record.__getitem__ if isinstance(record, dict) else record.__getattribute__
        return bool(self._fn(get))

    def __repr__(self) -> str:
        return f"Predicate({self.source!r})"

    def _compile(self, node: ast.AST) -> Callable:
        if isinstance(node, ast.BoolOp):
            parts = [self._compile(v) for v in node.values]
            if isinstance(node.op, ast.And):

                def conj(get):
                    for p in parts:
                        if not p(get):
                            return False
                    return True

                return conj

            def disj(get):
                for p in parts:
                    if p(get):
                        return True
                return False

            return disj
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.Not):
            inner = self._compile(node.operand)
            return lambda get: not inner(get)
        if isinstance(node, ast.Compare):
            if len(node.ops) != 1:
                raise PredicateError("chained comparisons are not supported; combine with 'and'")
            op = node.ops[0]
            if not isinstance(op, (ast.Eq, ast.NotEq, ast.In, ast.NotIn, *_ORDERED)):
                raise PredicateError(f"operator {type(op).__name__} is not allowed")
            fast = self._field_vs_literal(op, node.left, node.comparators[0])
            if fast is not None:
                return fast
            left = self._operand(node.left)
            right = self._operand(node.comparators[0])
            return lambda get: _compare(op, left(get), right(get))
        if isinstance(node, ast.Name):
            return self._operand(node)
        if isinstance(node, ast.Constant) and isinstance(node.value, bool):
            value = node.value
            return lambda get: value
        raise PredicateError(f"expression element {type(node).__name__} is not allowed")

    def _field_vs_literal(self, op: ast.cmpop, left: ast.AST, right: ast.AST) -> Callable | None:
        # the common "field OP literal" shape, with the literal coerced once per field type
        if not isinstance(left, ast.Name) or isinstance(right, ast.Name):
            return None
        name = left.id
        read = self._operand(left)
        literal = self._operand(right)(None)
        cache: dict[type, Any] = {}

        def coerced(value):
            cls = type(value)
            if cls not in cache:
                if isinstance(op, (ast.In, ast.NotIn)):
                    if not isinstance(literal, tuple):
                        raise PredicateError(f"right side of 'in' must be a collection (field {name})")
                    cache[cls] = frozenset(_coerce(r, value) for r in literal)
                else:
                    cache[cls] = _coerce(literal, value)
            return cache[cls]

        if isinstance(op, ast.Eq):
            return lambda get: (lambda v: v == coerced(v))(read(get))
        if isinstance(op, ast.NotEq):
            return lambda get: (lambda v: v != coerced(v))(read(get))
        if isinstance(op, ast.In):
            return lambda get: (lambda v: v in coerced(v))(read(get))
        if isinstance(op, ast.NotIn):
            return lambda get: (lambda v: v not in coerced(v))(read(get))
        fn = _ORDERED[type(op)]

        def ordered(get):
            v = read(get)
            if v is None or literal is None:
                return False
            try:
                return fn(v, coerced(v))
            except TypeError:
                return False

        return ordered

    def _operand(self, node: ast.AST) -> Callable:
        if isinstance(node, ast.Name):
            name = node.id
            if self._allowed is not None and name not in self._allowed:
                raise UnknownField(name)
            self.fields.add(name)
            return lambda get: get(name)
        if isinstance(node, ast.Constant) and isinstance(node.value, (str, int, float, bool, type(None))):
            value = node.value
            return lambda get: value
        if isinstance(node, (ast.Tuple, ast.List)):
            items = []
            for elt in node.elts:
                if not (isinstance(elt, ast.Constant) and isinstance(elt.value, (str, int, float, bool))):
                    raise PredicateError("collections may contain literals only")
                items.append(elt.value)
            value = tuple(items)
            return lambda get: value
        raise PredicateError(f"operand {type(node).__name__} is not allowed")


def compile_predicate(source: str, fields: Iterable[str] | None = None) -> Predicate:
    return Predicate(source, fields)
