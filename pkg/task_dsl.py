# task_dsl.py
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from scene_model import SceneSpec

logger = logging.getLogger(__name__)

OBS_LAYOUT_VERSION = "v2p-obs-1"
BASE_DIM = 7  # eef.pos(3) + eef.euler(3) + gripper.width(1)
OBJECT_DIM = 13  # pos(3) + quat(4) + vel_linear(3) + size(3)
EXP_CLAMP = 50.0
RESERVED_COMPONENTS = {"total_reward", "step_penalty"}

Span = Tuple[int, int]


# ---------------------------
# Errors
# ---------------------------
class DSLError(ValueError):
    pass


class DSLSyntaxError(DSLError):
    def __init__(self, offset: int, expected: Sequence[str], found: str):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        self.found = found
        super().__init__(f"syntax error at offset {offset}: expected one of {list(self.expected)}, found {found!r}")


class DSLTypeError(DSLError):
    def __init__(self, message: str, span: Span):
        self.span = span
        super().__init__(f"{message} at {span[0]}..{span[1]}")


class ContractViolation(RuntimeError):
    pass


# ---------------------------
# Types and AST
# ---------------------------
class ValueType(str, Enum):
    SCALAR = "scalar"
    VEC2 = "vec2"
    VEC3 = "vec3"
    VEC4 = "vec4"
    BOOL = "bool"

    @property
    def dim(self) -> int:
        return {"scalar": 1, "vec2": 2, "vec3": 3, "vec4": 4, "bool": 0}[self.value]

    @property
    def is_vec(self) -> bool:
        return self.value.startswith("vec")


def vec_type(n: int) -> ValueType:
    return {1: ValueType.SCALAR, 2: ValueType.VEC2, 3: ValueType.VEC3, 4: ValueType.VEC4}[n]


def _span() -> Any:
    return field(default=(0, 0), compare=False, repr=False)


@dataclass(frozen=True)
class Const:
    value: float
    span: Span = _span()


@dataclass(frozen=True)
class Feature:
    obj: str
    field: str
    span: Span = _span()

    @property
    def key(self) -> str:
        return f"{self.obj}.{self.field}"


@dataclass(frozen=True)
class Ref:
    name: str
    span: Span = _span()


@dataclass(frozen=True)
class Unary:
    op: str
    child: "Expr"
    span: Span = _span()


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span = _span()


@dataclass(frozen=True)
class Call:
    fn: str
    args: Tuple["Expr", ...]
    span: Span = _span()


@dataclass(frozen=True)
class Index:
    child: "Expr"
    k: int
    span: Span = _span()


@dataclass(frozen=True)
class Slice:
    child: "Expr"
    a: int
    b: int
    span: Span = _span()


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span = _span()


@dataclass(frozen=True)
class BoolOp:
    op: str
    left: "Expr"
    right: "Expr"
    span: Span = _span()


@dataclass(frozen=True)
class Not:
    child: "Expr"
    span: Span = _span()


Expr = Union[Const, Feature, Ref, Unary, Binary, Call, Index, Slice, Compare, BoolOp, Not]

FUNCTIONS: Dict[str, int] = {
    "norm": 1,
    "tanh": 1,
    "exp": 1,
    "abs": 1,
    "sqrt": 1,
    "min": 2,
    "max": 2,
    "dot": 2,
    "clamp": 3,
    "ind": 1,
}
COMPARE_OPS = ("<", ">", "<=", ">=")


# ---------------------------
# Tokenizer / parser
# ---------------------------
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|[-+*/()\[\],:.<>&|!])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num | ident | op | eof
    text: str
    offset: int  # byte offset
    end: int


def _tokenize(text: str) -> List[_Tok]:
    toks: List[_Tok] = []
    pos = 0
    byte = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise DSLSyntaxError(byte, ["token"], text[pos])
        chunk = m.group(0)
        nbytes = len(chunk.encode("utf-8"))
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup or "op", chunk, byte, byte + nbytes))
        pos = m.end()
        byte += nbytes
    toks.append(_Tok("eof", "", byte, byte))
    return toks


class _Parser:
    """
    Precedence, loosest first:
      |   &   !   comparisons (non-chained)   + -   * /   unary -   postfix [k] [a:b]
    """

    _PRIMARY_START = ("number", "identifier", "(", "-")

    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at(self, *texts: str) -> bool:
        t = self.peek()
        return t.kind == "op" and t.text in texts

    def fail(self, expected: Sequence[str]) -> DSLSyntaxError:
        t = self.peek()
        return DSLSyntaxError(t.offset, expected, t.text or "<end>")

    def expect(self, text: str) -> _Tok:
        if not self.at(text):
            raise self.fail([text])
        return self.advance()

    def parse(self) -> Expr:
        e = self.or_()
        if self.peek().kind != "eof":
            raise self.fail(["<end>", "|", "&", "+", "-", "*", "/", *COMPARE_OPS])
        return e

    def or_(self) -> Expr:
        left = self.and_()
        while self.at("|"):
            self.advance()
            right = self.and_()
            left = BoolOp("|", left, right, (left.span[0], right.span[1]))
        return left

    def and_(self) -> Expr:
        left = self.not_()
        while self.at("&"):
            self.advance()
            right = self.not_()
            left = BoolOp("&", left, right, (left.span[0], right.span[1]))
        return left

    def not_(self) -> Expr:
        if self.at("!"):
            start = self.advance().offset
            child = self.not_()
            return Not(child, (start, child.span[1]))
        return self.compare()

    def compare(self) -> Expr:
        left = self.sum()
        if self.at(*COMPARE_OPS):
            op = self.advance().text
            right = self.sum()
            return Compare(op, left, right, (left.span[0], right.span[1]))
        return left

    def sum(self) -> Expr:
        left = self.term()
        while self.at("+", "-"):
            op = self.advance().text
            right = self.term()
            left = Binary(op, left, right, (left.span[0], right.span[1]))
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.at("*", "/"):
            op = self.advance().text
            right = self.unary()
            left = Binary(op, left, right, (left.span[0], right.span[1]))
        return left

    def unary(self) -> Expr:
        if self.at("-"):
            start = self.advance().offset
            child = self.unary()
            return Unary("-", child, (start, child.span[1]))
        return self.postfix()

    def _int(self) -> int:
        t = self.peek()
        if t.kind != "num" or not t.text.isdigit():
            raise self.fail(["integer"])
        self.advance()
        return int(t.text)

    def postfix(self) -> Expr:
        e = self.primary()
        while self.at("["):
            self.advance()
            a = self._int()
            if self.at(":"):
                self.advance()
                b = self._int()
                end = self.expect("]").end
                e = Slice(e, a, b, (e.span[0], end))
            else:
                end = self.expect("]").end
                e = Index(e, a, (e.span[0], end))
        return e

    def primary(self) -> Expr:
        t = self.peek()
        if t.kind == "num":
            self.advance()
            return Const(float(t.text), (t.offset, t.end))
        if t.kind == "ident":
            self.advance()
            if self.at("."):
                self.advance()
                f = self.peek()
                if f.kind != "ident":
                    raise self.fail(["identifier"])
                self.advance()
                return Feature(t.text, f.text, (t.offset, f.end))
            if self.at("("):
                self.advance()
                args: List[Expr] = []
                if not self.at(")"):
                    args.append(self.or_())
                    while self.at(","):
                        self.advance()
                        args.append(self.or_())
                if not self.at(")"):
                    raise self.fail([",", ")"])
                end = self.advance().end
                return Call(t.text, tuple(args), (t.offset, end))
            return Ref(t.text, (t.offset, t.end))
        if self.at("("):
            self.advance()
            e = self.or_()
            self.expect(")")
            return e
        raise self.fail(self._PRIMARY_START)


def parse_expr(text: str) -> Expr:
    """Parse DSL text into an AST. Raises DSLSyntaxError with a byte offset."""
    return _Parser(text).parse()


# ---------------------------
# Printer
# ---------------------------
def _prec(e: Expr) -> int:
    if isinstance(e, BoolOp):
        return 1 if e.op == "|" else 2
    if isinstance(e, Not):
        return 3
    if isinstance(e, Compare):
        return 4
    if isinstance(e, Binary):
        return 5 if e.op in "+-" else 6
    if isinstance(e, Unary):
        return 7
    if isinstance(e, (Index, Slice)):
        return 8
    return 9


def format_number(v: float) -> str:
    """Floats print with repr: 1.0 -> "1.0", 1e-05 -> "1e-05"."""
    return repr(float(v))


def print_expr(e: Expr) -> str:
    def wrap(child: Expr, paren: bool) -> str:
        s = print_expr(child)
        return f"({s})" if paren else s

    if isinstance(e, Const):
        return format_number(e.value)
    if isinstance(e, Feature):
        return e.key
    if isinstance(e, Ref):
        return e.name
    if isinstance(e, Unary):
        return "-" + wrap(e.child, _prec(e.child) < 7)
    if isinstance(e, Not):
        return "!" + wrap(e.child, _prec(e.child) < 3)
    if isinstance(e, (Binary, BoolOp)):
        p = _prec(e)
        return f"{wrap(e.left, _prec(e.left) < p)} {e.op} {wrap(e.right, _prec(e.right) <= p)}"
    if isinstance(e, Compare):
        return f"{wrap(e.left, _prec(e.left) <= 4)} {e.op} {wrap(e.right, _prec(e.right) <= 4)}"
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(print_expr(a) for a in e.args)})"
    if isinstance(e, Index):
        return f"{wrap(e.child, _prec(e.child) < 8)}[{e.k}]"
    if isinstance(e, Slice):
        return f"{wrap(e.child, _prec(e.child) < 8)}[{e.a}:{e.b}]"
    raise TypeError(f"not an expression node: {e!r}")


def walk(e: Expr):
    """Pre-order traversal."""
    yield e
    if isinstance(e, (Unary, Not, Index, Slice)):
        yield from walk(e.child)
    elif isinstance(e, (Binary, Compare, BoolOp)):
        yield from walk(e.left)
        yield from walk(e.right)
    elif isinstance(e, Call):
        for a in e.args:
            yield from walk(a)


# ---------------------------
# Feature namespace
# ---------------------------
GLOBAL_FEATURES: Dict[str, ValueType] = {
    "eef.pos": ValueType.VEC3,
    "eef.euler": ValueType.VEC3,
    "eef.vel": ValueType.VEC3,
    "gripper.width": ValueType.SCALAR,
    "table.height": ValueType.SCALAR,
}
OBJECT_FIELDS: Dict[str, ValueType] = {
    "pos": ValueType.VEC3,
    "quat": ValueType.VEC4,
    "vel_linear": ValueType.VEC3,
    "size": ValueType.VEC3,
    "held": ValueType.SCALAR,
    "upright": ValueType.SCALAR,
}
# Only hand-written evaluation programs may read these.
EVALUATION_FIELDS: Dict[str, ValueType] = {"init_pos": ValueType.VEC3}


@dataclass
class FeatureTable:
    features: Dict[str, ValueType]
    refs: Dict[str, ValueType] = field(default_factory=dict)

    def with_refs(self, refs: Mapping[str, ValueType]) -> "FeatureTable":
        merged = dict(self.refs)
        merged.update(refs)
        return FeatureTable(dict(self.features), merged)

    def __len__(self) -> int:
        return len(self.features)


def feature_table(object_names: Sequence[str], include_evaluation: bool = False) -> FeatureTable:
    table = dict(GLOBAL_FEATURES)
    fields = dict(OBJECT_FIELDS)
    if include_evaluation:
        fields.update(EVALUATION_FIELDS)
    for name in object_names:
        for f, t in fields.items():
            table[f"{name}.{f}"] = t
    return FeatureTable(table)


# ---------------------------
# Type checker
# ---------------------------
def typecheck(expr: Expr, table: FeatureTable) -> ValueType:
    """
    Returns the expression's ValueType or raises DSLTypeError on the offending node.
    """
    S, B = ValueType.SCALAR, ValueType.BOOL

    def numeric(t: ValueType, node: Expr) -> None:
        if t == B:
            raise DSLTypeError("boolean used arithmetically", node.span)

    def check(e: Expr) -> ValueType:
        if isinstance(e, Const):
            return S
        if isinstance(e, Feature):
            t = table.features.get(e.key)
            if t is None:
                raise DSLTypeError(f"unknown feature {e.key}", e.span)
            return t
        if isinstance(e, Ref):
            t = table.refs.get(e.name)
            if t is None:
                raise DSLTypeError(f"unknown name {e.name}", e.span)
            return t
        if isinstance(e, Unary):
            t = check(e.child)
            numeric(t, e.child)
            return t
        if isinstance(e, Binary):
            lt, rt = check(e.left), check(e.right)
            numeric(lt, e.left)
            numeric(rt, e.right)
            if lt == S:
                return rt
            if rt == S or lt == rt:
                return lt
            raise DSLTypeError(f"dimension mismatch ({lt.dim} vs {rt.dim})", e.span)
        if isinstance(e, Call):
            arity = FUNCTIONS.get(e.fn)
            if arity is None:
                raise DSLTypeError(f"unknown function {e.fn}", e.span)
            if len(e.args) != arity:
                raise DSLTypeError(f"{e.fn} takes {arity} argument(s), got {len(e.args)}", e.span)
            ts = [check(a) for a in e.args]
            if e.fn == "ind":
                if ts[0] != B:
                    raise DSLTypeError("ind expects a boolean", e.args[0].span)
                return S
            for t, a in zip(ts, e.args):
                numeric(t, a)
            if e.fn == "norm":
                if not ts[0].is_vec:
                    raise DSLTypeError("norm expects a vector", e.args[0].span)
                return S
            if e.fn == "dot":
                if not (ts[0].is_vec and ts[0] == ts[1]):
                    raise DSLTypeError(f"dot expects two vectors of equal size ({ts[0].value}, {ts[1].value})", e.span)
                return S
            for t, a in zip(ts, e.args):
                if t != S:
                    raise DSLTypeError(f"{e.fn} expects scalars, got {t.value}", a.span)
            return S
        if isinstance(e, Index):
            t = check(e.child)
            if not t.is_vec:
                raise DSLTypeError(f"cannot index a {t.value}", e.span)
            if e.k >= t.dim:
                raise DSLTypeError(f"index {e.k} out of range for {t.value}", e.span)
            return S
        if isinstance(e, Slice):
            t = check(e.child)
            if not t.is_vec:
                raise DSLTypeError(f"cannot slice a {t.value}", e.span)
            if not (e.a < e.b <= t.dim):
                raise DSLTypeError(f"slice [{e.a}:{e.b}] out of range for {t.value}", e.span)
            if e.b - e.a < 2:
                raise DSLTypeError("single-element slice; use indexing", e.span)
            return vec_type(e.b - e.a)
        if isinstance(e, Compare):
            for side in (e.left, e.right):
                t = check(side)
                if t != S:
                    raise DSLTypeError(f"comparison expects scalars, got {t.value}", side.span)
            return B
        if isinstance(e, BoolOp):
            for side in (e.left, e.right):
                if check(side) != B:
                    raise DSLTypeError(f"'{e.op}' expects booleans", side.span)
            return B
        if isinstance(e, Not):
            if check(e.child) != B:
                raise DSLTypeError("'!' expects a boolean", e.child.span)
            return B
        raise TypeError(f"not an expression node: {e!r}")

    return check(expr)


# ---------------------------
# Batched evaluation
# ---------------------------
@dataclass
class EvalDiagnostics:
    negative_sqrt: int = 0
    zero_division: int = 0
    exp_clamped: int = 0

    def total(self) -> int:
        return self.negative_sqrt + self.zero_division + self.exp_clamped


class FeatureBinding(dict):
    """name -> (B,) or (B, N) array, plus the object order of the batch."""

    def __init__(self, data: Mapping[str, np.ndarray], object_names: Sequence[str] = ()):
        super().__init__(data)
        self.object_names = tuple(object_names)

    @property
    def batch_size(self) -> int:
        for v in self.values():
            return int(np.shape(v)[0])
        return 0


def _binding(states: Any) -> Mapping[str, np.ndarray]:
    if hasattr(states, "features"):
        return states.features(include_evaluation=True)
    return states


_Value = Union[np.ndarray, Tuple[np.ndarray, ...]]


class _Evaluator:
    def __init__(
        self,
        binding: Mapping[str, np.ndarray],
        refs: Optional[Mapping[str, Expr]],
        dtype: Any,
        diag: EvalDiagnostics,
    ):
        self.binding = binding
        self.refs = dict(refs or {})
        self.dtype = np.dtype(dtype)
        self.diag = diag
        self.cache: Dict[str, _Value] = {}
        self.ref_cache: Dict[str, _Value] = {}
        self.n = _batch_size(binding)

    def feature(self, e: Feature) -> _Value:
        hit = self.cache.get(e.key)
        if hit is not None:
            return hit
        if e.key not in self.binding:
            raise ContractViolation(f"feature {e.key} not bound")
        arr = np.asarray(self.binding[e.key])
        if arr.ndim == 2:
            val: _Value = tuple(np.ascontiguousarray(arr[:, k], dtype=self.dtype) for k in range(arr.shape[1]))
        else:
            val = np.asarray(arr, dtype=self.dtype)
        self.cache[e.key] = val
        return val

    def num(self, v: _Value, node: Expr) -> _Value:
        if not isinstance(v, tuple) and v.dtype == np.bool_:
            raise ContractViolation(f"boolean value used arithmetically at {node.span}")
        return v

    def scalar(self, v: _Value, node: Expr) -> np.ndarray:
        if isinstance(v, tuple):
            raise ContractViolation(f"vector where scalar expected at {node.span}")
        return self.num(v, node)  # type: ignore[return-value]

    def zip2(self, l: _Value, r: _Value, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], node: Expr) -> _Value:
        if isinstance(l, tuple) and isinstance(r, tuple):
            if len(l) != len(r):
                raise ContractViolation(f"dimension mismatch at {node.span}")
            return tuple(fn(a, b) for a, b in zip(l, r))
        if isinstance(l, tuple):
            return tuple(fn(a, r) for a in l)
        if isinstance(r, tuple):
            return tuple(fn(l, b) for b in r)
        return fn(l, r)

    def div(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        zero = b == 0
        nz = int(np.count_nonzero(zero))
        if nz:
            self.diag.zero_division += nz
            safe = np.where(zero, self.dtype.type(1), b)
            return np.where(zero, self.dtype.type(0), a / safe)
        return a / b

    def ev(self, e: Expr) -> _Value:
        if isinstance(e, Const):
            return np.full(self.n, e.value, dtype=self.dtype)
        if isinstance(e, Feature):
            return self.feature(e)
        if isinstance(e, Ref):
            hit = self.ref_cache.get(e.name)
            if hit is None:
                if e.name not in self.refs:
                    raise ContractViolation(f"name {e.name} not bound")
                hit = self.ev(self.refs[e.name])
                self.ref_cache[e.name] = hit
            return hit
        if isinstance(e, Unary):
            v = self.num(self.ev(e.child), e)
            return tuple(np.negative(c) for c in v) if isinstance(v, tuple) else np.negative(v)
        if isinstance(e, Binary):
            l = self.num(self.ev(e.left), e.left)
            r = self.num(self.ev(e.right), e.right)
            if e.op == "+":
                return self.zip2(l, r, np.add, e)
            if e.op == "-":
                return self.zip2(l, r, np.subtract, e)
            if e.op == "*":
                return self.zip2(l, r, np.multiply, e)
            return self.zip2(l, r, self.div, e)
        if isinstance(e, Call):
            return self.call(e)
        if isinstance(e, Index):
            v = self.ev(e.child)
            if not isinstance(v, tuple) or e.k >= len(v):
                raise ContractViolation(f"bad index at {e.span}")
            return v[e.k]
        if isinstance(e, Slice):
            v = self.ev(e.child)
            if not isinstance(v, tuple) or not (e.a < e.b <= len(v)):
                raise ContractViolation(f"bad slice at {e.span}")
            return v[e.a : e.b]
        if isinstance(e, Compare):
            l = self.scalar(self.ev(e.left), e.left)
            r = self.scalar(self.ev(e.right), e.right)
            return {"<": np.less, ">": np.greater, "<=": np.less_equal, ">=": np.greater_equal}[e.op](l, r)
        if isinstance(e, BoolOp):
            l, r = self.ev(e.left), self.ev(e.right)
            fn = np.logical_and if e.op == "&" else np.logical_or
            return fn(l, r)
        if isinstance(e, Not):
            return np.logical_not(self.ev(e.child))
        raise ContractViolation(f"not an expression node: {e!r}")

    def call(self, e: Call) -> _Value:
        args = [self.ev(a) for a in e.args]
        fn = e.fn
        if fn == "ind":
            b = args[0]
            if isinstance(b, tuple) or b.dtype != np.bool_:
                raise ContractViolation(f"ind expects a boolean at {e.span}")
            return b.astype(self.dtype)
        if fn in ("norm", "dot"):
            u = args[0]
            v = args[1] if fn == "dot" else u
            if not isinstance(u, tuple) or not isinstance(v, tuple) or len(u) != len(v):
                raise ContractViolation(f"{fn} expects vectors at {e.span}")
            acc = u[0] * v[0]
            for k in range(1, len(u)):
                acc = acc + u[k] * v[k]
            return np.sqrt(acc) if fn == "norm" else acc
        xs = [self.scalar(a, e) for a in args]
        if fn == "tanh":
            return np.tanh(xs[0])
        if fn == "abs":
            return np.abs(xs[0])
        if fn == "exp":
            over = xs[0] > EXP_CLAMP
            n_over = int(np.count_nonzero(over))
            if n_over:
                self.diag.exp_clamped += n_over
                return np.exp(np.minimum(xs[0], self.dtype.type(EXP_CLAMP)))
            return np.exp(xs[0])
        if fn == "sqrt":
            neg = xs[0] < 0
            n_neg = int(np.count_nonzero(neg))
            if n_neg:
                self.diag.negative_sqrt += n_neg
                return np.sqrt(np.where(neg, self.dtype.type(0), xs[0]))
            return np.sqrt(xs[0])
        if fn == "min":
            return np.minimum(xs[0], xs[1])
        if fn == "max":
            return np.maximum(xs[0], xs[1])
        if fn == "clamp":
            return np.minimum(np.maximum(xs[0], xs[1]), xs[2])
        raise ContractViolation(f"unknown function {fn}")


def _batch_size(binding: Mapping[str, np.ndarray]) -> int:
    for v in binding.values():
        return int(np.shape(v)[0])
    raise ContractViolation("empty feature binding")


def _stack(v: _Value) -> np.ndarray:
    if isinstance(v, tuple):
        return np.stack(v, axis=1)
    return v


def eval_batch(
    expr: Expr,
    states: Any,
    *,
    refs: Optional[Mapping[str, Expr]] = None,
    dtype: Any = np.float64,
    diagnostics: Optional[EvalDiagnostics] = None,
) -> np.ndarray:
    """
    Evaluate a typechecked expression for every environment in the batch.

    Vectors are evaluated component-wise (norm and dot add components left to
    right), so each row gets exactly the arithmetic a per-environment
    interpreter would perform. Returns (B,) for scalars/bools, (B, N) for vectors.
    """
    diag = diagnostics if diagnostics is not None else EvalDiagnostics()
    ev = _Evaluator(_binding(states), refs, dtype, diag)
    return _stack(ev.ev(expr))


# ---------------------------
# Programs
# ---------------------------
@dataclass(frozen=True)
class RewardComponent:
    name: str
    expr: Expr
    weight: float


@dataclass(frozen=True)
class RewardProgram:
    components: Tuple[RewardComponent, ...]
    step_penalty: float = 0.0

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(c.name for c in self.components)


@dataclass(frozen=True)
class SuccessProgram:
    expr: Expr

    @property
    def text(self) -> str:
        return print_expr(self.expr)


@dataclass(frozen=True)
class ObservationSpec:
    extras: Tuple[Tuple[str, Expr], ...] = ()

    def refs(self) -> Dict[str, Expr]:
        return {name: e for name, e in self.extras}

    def dimension(self, n_objects: int) -> int:
        return BASE_DIM + OBJECT_DIM * n_objects + len(self.extras)


def eval_reward(
    program: RewardProgram,
    actions: Optional[np.ndarray],
    states: Any,
    *,
    refs: Optional[Mapping[str, Expr]] = None,
    dtype: Any = np.float64,
    diagnostics: Optional[EvalDiagnostics] = None,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Returns (totals, components).

    components[name] holds weight * value for every named component, plus
    "step_penalty" and "total_reward". Weighted terms are summed in sorted-name
    order and the penalty subtracted last:
        totals = ((0 + c_a) + c_b) + ... - step_penalty
    """
    binding = _binding(states)
    diag = diagnostics if diagnostics is not None else EvalDiagnostics()
    ev = _Evaluator(binding, refs, dtype, diag)
    n = ev.n
    if actions is not None and len(actions) != n:
        raise ContractViolation(f"action batch has {len(actions)} rows, states have {n}")
    dt = np.dtype(dtype)
    components: Dict[str, np.ndarray] = {}
    for c in program.components:
        value = ev.scalar(ev.ev(c.expr), c.expr)
        components[c.name] = dt.type(c.weight) * value
    totals = np.zeros(n, dtype=dt)
    for name in sorted(components):
        totals = totals + components[name]
    penalty = np.full(n, program.step_penalty, dtype=dt)
    totals = totals - penalty
    components["step_penalty"] = penalty
    components["total_reward"] = totals
    return totals, components


def eval_success(
    program: SuccessProgram,
    states: Any,
    *,
    refs: Optional[Mapping[str, Expr]] = None,
    dtype: Any = np.float64,
) -> np.ndarray:
    out = eval_batch(program.expr, states, refs=refs, dtype=dtype)
    if out.dtype != np.bool_:
        raise ContractViolation("success program did not produce booleans")
    return out


def observation_vector(spec: ObservationSpec, states: Any, *, dtype: Any = np.float32) -> np.ndarray:
    """
    (B, dim) observation: eef.pos, eef.euler, gripper.width, then per object
    pos, quat, vel_linear, size, then extras in declaration order.
    """
    binding = _binding(states)
    names = getattr(binding, "object_names", None)
    if names is None:
        names = getattr(states, "object_names", ())
    cols: List[np.ndarray] = [
        np.asarray(binding["eef.pos"], dtype=dtype),
        np.asarray(binding["eef.euler"], dtype=dtype),
        np.asarray(binding["gripper.width"], dtype=dtype)[:, None],
    ]
    for name in names:
        for f in ("pos", "quat", "vel_linear", "size"):
            cols.append(np.asarray(binding[f"{name}.{f}"], dtype=dtype))
    if spec.extras:
        ev = _Evaluator(binding, spec.refs(), dtype, EvalDiagnostics())
        for name, e in spec.extras:
            cols.append(ev.scalar(ev.ev(e), e)[:, None])
    return np.concatenate(cols, axis=1)


# ---------------------------
# Reset specification
# ---------------------------
PLACEMENT_MODES = ("uniform", "fixed", "relative")


@dataclass(frozen=True)
class Placement:
    """
    One object's initial placement.

    uniform:  x_range, y_range, yaw_range (beyond_reach lets ranges leave the
              reachable workspace)
    fixed:    pos (x, y), yaw
    relative: anchor, x_range / y_range as offsets from the anchor, yaw_range;
              on_top rests the object on the anchor's top face
    """

    obj: str
    mode: str = "uniform"
    x_range: Tuple[float, float] = (0.0, 0.0)
    y_range: Tuple[float, float] = (0.0, 0.0)
    yaw_range: Tuple[float, float] = (0.0, 0.0)
    pos: Tuple[float, float] = (0.0, 0.0)
    yaw: float = 0.0
    anchor: Optional[str] = None
    on_top: bool = False
    beyond_reach: bool = False

    def to_dict(self) -> Dict[str, Any]:
        d: Dict[str, Any] = {"object": self.obj, "mode": self.mode}
        if self.mode == "fixed":
            d["pos"] = list(self.pos)
            d["yaw"] = self.yaw
        else:
            d["x"] = list(self.x_range)
            d["y"] = list(self.y_range)
            d["yaw"] = list(self.yaw_range)
        if self.mode == "relative":
            d["anchor"] = self.anchor
            if self.on_top:
                d["on_top"] = True
        if self.beyond_reach:
            d["beyond_reach"] = True
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], where: str = "reset") -> "Placement":
        if not isinstance(d, Mapping):
            raise ValueError(f"{where}: placement must be an object")
        mode = d.get("mode", "uniform")
        if mode not in PLACEMENT_MODES:
            raise ValueError(f"{where}.mode: unknown placement mode {mode!r}")
        obj = d.get("object")
        if not isinstance(obj, str):
            raise ValueError(f"{where}.object: expected a name")

        def rng(key: str, default: Tuple[float, float] = (0.0, 0.0)) -> Tuple[float, float]:
            v = d.get(key, list(default))
            if not isinstance(v, (list, tuple)) or len(v) != 2:
                raise ValueError(f"{where}.{key}: expected [lo, hi]")
            return (float(v[0]), float(v[1]))

        if mode == "fixed":
            pos = d.get("pos", [0.0, 0.0])
            if not isinstance(pos, (list, tuple)) or len(pos) != 2:
                raise ValueError(f"{where}.pos: expected [x, y]")
            return cls(obj, mode, pos=(float(pos[0]), float(pos[1])), yaw=float(d.get("yaw", 0.0)),
                       beyond_reach=bool(d.get("beyond_reach", False)))
        return cls(
            obj,
            mode,
            x_range=rng("x"),
            y_range=rng("y"),
            yaw_range=rng("yaw"),
            anchor=d.get("anchor"),
            on_top=bool(d.get("on_top", False)),
            beyond_reach=bool(d.get("beyond_reach", False)),
        )


@dataclass(frozen=True)
class ResetSpec:
    placements: Tuple[Placement, ...]

    def get(self, name: str) -> Optional[Placement]:
        for p in self.placements:
            if p.obj == name:
                return p
        return None


# ---------------------------
# Task specification
# ---------------------------
@dataclass(frozen=True)
class TaskSpec:
    task_description: str
    reset: ResetSpec
    success: SuccessProgram
    observation: ObservationSpec
    observation_dim: int
    reward: RewardProgram
    family: Optional[str] = None
    scene: Optional[SceneSpec] = field(default=None, compare=False, repr=False)

    def with_reward(self, reward: RewardProgram) -> "TaskSpec":
        return replace(self, reward=reward)

    def with_success(self, success: SuccessProgram) -> "TaskSpec":
        return replace(self, success=success)

    def refs(self) -> Dict[str, Expr]:
        return self.observation.refs()


def reward_to_dict(program: RewardProgram) -> Dict[str, Any]:
    return {
        "components": [
            {"name": c.name, "expr": print_expr(c.expr), "weight": float(c.weight)} for c in program.components
        ],
        "step_penalty": float(program.step_penalty),
    }


def _parse_at(text: Any, where: str) -> Expr:
    if not isinstance(text, str):
        raise ValueError(f"{where}: expected DSL text")
    return parse_expr(text)


def reward_from_dict(d: Any, where: str = "reward") -> RewardProgram:
    if not isinstance(d, Mapping):
        raise ValueError(f"{where}: expected an object")
    comps_raw = d.get("components")
    if not isinstance(comps_raw, list):
        raise ValueError(f"{where}.components: expected a list")
    comps = []
    for k, c in enumerate(comps_raw):
        cw = f"{where}.components[{k}]"
        if not isinstance(c, Mapping) or not isinstance(c.get("name"), str):
            raise ValueError(f"{cw}: component needs a name")
        weight = c.get("weight", 1.0)
        if isinstance(weight, bool) or not isinstance(weight, (int, float)):
            raise ValueError(f"{cw}.weight: expected a number")
        comps.append(RewardComponent(c["name"], _parse_at(c.get("expr"), f"{cw}.expr"), float(weight)))
    penalty = d.get("step_penalty", 0.0)
    if isinstance(penalty, bool) or not isinstance(penalty, (int, float)):
        raise ValueError(f"{where}.step_penalty: expected a number")
    return RewardProgram(tuple(comps), float(penalty))


def task_to_dict(spec: TaskSpec) -> Dict[str, Any]:
    d: Dict[str, Any] = {"task_description": spec.task_description}
    if spec.family:
        d["family"] = spec.family
    d.update(
        {
            "reset": [p.to_dict() for p in spec.reset.placements],
            "success": print_expr(spec.success.expr),
            "observation_extras": [{"name": n, "expr": print_expr(e)} for n, e in spec.observation.extras],
            "observation_dim": int(spec.observation_dim),
            "reward": reward_to_dict(spec.reward),
        }
    )
    return d


def task_from_dict(d: Any, scene: Optional[SceneSpec] = None) -> TaskSpec:
    """
    Build a TaskSpec from its JSON form.

    Raises DSLSyntaxError for bad program text and ValueError (with a key path)
    for structural problems.
    """
    if not isinstance(d, Mapping):
        raise ValueError("task: expected a JSON object")
    reset_raw = d.get("reset")
    if not isinstance(reset_raw, list):
        raise ValueError("reset: expected a list of placements")
    placements = tuple(Placement.from_dict(p, f"reset[{k}]") for k, p in enumerate(reset_raw))
    extras_raw = d.get("observation_extras", [])
    if not isinstance(extras_raw, list):
        raise ValueError("observation_extras: expected a list")
    extras = []
    for k, x in enumerate(extras_raw):
        if not isinstance(x, Mapping) or not isinstance(x.get("name"), str):
            raise ValueError(f"observation_extras[{k}]: extra needs a name")
        extras.append((x["name"], _parse_at(x.get("expr"), f"observation_extras[{k}].expr")))
    dim = d.get("observation_dim")
    if isinstance(dim, bool) or not isinstance(dim, int):
        raise ValueError("observation_dim: expected an integer")
    family = d.get("family")
    return TaskSpec(
        task_description=str(d.get("task_description", "")),
        reset=ResetSpec(placements),
        success=SuccessProgram(_parse_at(d.get("success"), "success")),
        observation=ObservationSpec(tuple(extras)),
        observation_dim=dim,
        reward=reward_from_dict(d.get("reward")),
        family=family if isinstance(family, str) else None,
        scene=scene,
    )


# ---------------------------
# Validation
# ---------------------------
@dataclass(frozen=True)
class Issue:
    kind: str
    message: str
    where: str = ""
    span: Optional[Span] = None

    def __str__(self) -> str:
        loc = f" [{self.where}]" if self.where else ""
        sp = f" @{self.span[0]}..{self.span[1]}" if self.span else ""
        return f"{self.kind}{loc}{sp}: {self.message}"


@dataclass
class ValidationReport:
    failures: List[Issue] = field(default_factory=list)
    flags: List[Issue] = field(default_factory=list)
    spec: Optional[TaskSpec] = None

    @property
    def runnable(self) -> bool:
        return not self.failures

    @property
    def score(self) -> Optional[float]:
        """None when disqualified, else minus the number of flags."""
        if not self.runnable:
            return None
        return -float(len(self.flags))

    def summary(self) -> str:
        lines = [f"runnable={self.runnable} flags={len(self.flags)}"]
        lines += [f"  FAIL {i}" for i in self.failures]
        lines += [f"  FLAG {i}" for i in self.flags]
        return "\n".join(lines)


def _check_reset(reset: ResetSpec, scene: SceneSpec, workspace: Tuple[float, float, float, float], report: ValidationReport) -> None:
    x_lo, x_hi, y_lo, y_hi = workspace
    names = set(scene.object_names)
    placed: List[str] = []
    for k, p in enumerate(reset.placements):
        where = f"reset[{k}]"
        if p.obj not in names:
            report.failures.append(Issue("undeclared_object", f"placement for unknown object {p.obj!r}", where))
            continue
        if p.obj in placed:
            report.failures.append(Issue("reset", f"object {p.obj!r} placed twice", where))
        if p.mode == "relative":
            if p.anchor not in names:
                report.failures.append(Issue("undeclared_object", f"anchor {p.anchor!r} is not a scene object", where))
            elif p.anchor not in placed:
                report.failures.append(Issue("reset", f"anchor {p.anchor!r} must be placed before {p.obj!r}", where))
        ranges = [] if p.mode == "fixed" else [p.x_range, p.y_range, p.yaw_range]
        for r in ranges:
            if not (math.isfinite(r[0]) and math.isfinite(r[1]) and r[0] <= r[1]):
                report.failures.append(Issue("reset", f"invalid interval {list(r)}", where))
        if not p.beyond_reach:
            if p.mode == "uniform":
                inside = x_lo <= p.x_range[0] and p.x_range[1] <= x_hi and y_lo <= p.y_range[0] and p.y_range[1] <= y_hi
                if not inside:
                    report.failures.append(Issue("reset", "placement range leaves the workspace", where))
            elif p.mode == "fixed":
                if not (x_lo <= p.pos[0] <= x_hi and y_lo <= p.pos[1] <= y_hi):
                    report.failures.append(Issue("reset", "fixed position outside the workspace", where))
        placed.append(p.obj)
    for name in scene.object_names:
        if name not in placed:
            report.failures.append(Issue("reset", f"object {name!r} has no placement", "reset"))


def _check(expr: Expr, table: FeatureTable, want: ValueType, where: str, report: ValidationReport) -> bool:
    try:
        got = typecheck(expr, table)
    except DSLTypeError as e:
        kind = "undeclared_object" if "unknown feature" in str(e) else "type"
        report.failures.append(Issue(kind, str(e), where, e.span))
        return False
    if got != want:
        report.failures.append(Issue("type", f"expected {want.value}, got {got.value}", where, expr.span))
        return False
    return True


def validate_task_spec(
    spec: Union[TaskSpec, Mapping[str, Any]],
    scene: Optional[SceneSpec] = None,
    *,
    sim_config: Any = None,
    n_states: int = 1000,
    seed: int = 0,
) -> ValidationReport:
    """
    Report-based validation; never raises.

    Hard failures: parse/structure errors, type errors (with spans), unknown
    objects, wrong observation_dim, invalid reset placements.
    Flags: success trivially true/false on random reachable states, zero-weight
    reward components.
    """
    report = ValidationReport()
    if not isinstance(spec, TaskSpec):
        try:
            spec = task_from_dict(spec, scene)
        except DSLSyntaxError as e:
            report.failures.append(Issue("parse", str(e), "", (e.offset, e.offset)))
            return report
        except (ValueError, TypeError) as e:
            report.failures.append(Issue("structure", str(e)))
            return report
    report.spec = spec
    scene = scene or spec.scene
    if scene is None:
        report.failures.append(Issue("structure", "task has no scene"))
        return report

    # local import: the simulator depends on this module
    import simulator

    cfg = sim_config or simulator.SimConfig()
    table = feature_table(scene.object_names)

    ref_types: Dict[str, ValueType] = {}
    for k, (name, e) in enumerate(spec.observation.extras):
        where = f"observation_extras[{k}]"
        if name in ref_types:
            report.failures.append(Issue("structure", f"duplicate extra {name!r}", where))
            continue
        if _check(e, table.with_refs(ref_types), ValueType.SCALAR, where, report):
            ref_types[name] = ValueType.SCALAR
    full = table.with_refs(ref_types)

    success_ok = _check(spec.success.expr, full, ValueType.BOOL, "success", report)

    seen = set()
    for k, c in enumerate(spec.reward.components):
        where = f"reward.components[{k}]"
        if c.name in seen or c.name in RESERVED_COMPONENTS:
            report.failures.append(Issue("structure", f"component name {c.name!r} is duplicated or reserved", where))
        seen.add(c.name)
        _check(c.expr, full, ValueType.SCALAR, where, report)
        if not math.isfinite(c.weight):
            report.failures.append(Issue("structure", "weight must be finite", where))
        elif c.weight == 0:
            report.flags.append(Issue("zero_weight", f"component {c.name!r} has zero weight", where))
    if not (math.isfinite(spec.reward.step_penalty) and spec.reward.step_penalty >= 0):
        report.failures.append(Issue("structure", "step_penalty must be a non-negative number", "reward.step_penalty"))
    if not spec.reward.components:
        report.flags.append(Issue("empty_reward", "reward has no components", "reward"))

    expected_dim = spec.observation.dimension(len(scene.objects))
    if spec.observation_dim != expected_dim:
        report.failures.append(
            Issue("dimension", f"observation_dim {spec.observation_dim} != computed {expected_dim}", "observation_dim")
        )

    x_lo, x_hi = cfg.workspace[0], cfg.workspace[1]
    y_lo, y_hi = cfg.workspace[2], cfg.workspace[3]
    _check_reset(spec.reset, scene, (x_lo, x_hi, y_lo, y_hi), report)

    if success_ok and report.runnable and n_states > 0:
        states = simulator.random_states(scene, n_states, seed=seed, config=cfg)
        ok = eval_success(spec.success, states, refs=spec.refs())
        if ok.all():
            report.flags.append(Issue("trivially_true", "success holds on every sampled state", "success"))
        elif not ok.any():
            report.flags.append(Issue("trivially_false", "success holds on no sampled state", "success"))
    return report


def dsl_reference() -> str:
    """Plain-text grammar reference (printed by `cli docs-dsl`, embedded in prompts)."""
    fields = ", ".join(f".{f} ({t.value})" for f, t in OBJECT_FIELDS.items())
    globals_ = ", ".join(f"{k} ({t.value})" for k, t in GLOBAL_FEATURES.items())
    return "\n".join(
        [
            "Task DSL reference",
            "",
            "expr    := or",
            "or      := and ('|' and)*",
            "and     := not ('&' not)*",
            "not     := '!' not | compare",
            "compare := sum (('<' | '>' | '<=' | '>=') sum)?",
            "sum     := term (('+' | '-') term)*",
            "term    := unary (('*' | '/') unary)*",
            "unary   := '-' unary | postfix",
            "postfix := primary ('[' INT ']' | '[' INT ':' INT ']')*",
            "primary := NUMBER | NAME '.' FIELD | FN '(' expr (',' expr)* ')' | NAME | '(' expr ')'",
            "",
            "Types: scalar, vec2, vec3, vec4, bool. Arithmetic needs equal vector sizes or a scalar operand.",
            "Functions: norm(vec)->scalar, dot(vec, vec)->scalar, tanh/exp/abs/sqrt(scalar)->scalar,",
            "           min/max(scalar, scalar), clamp(x, lo, hi), ind(bool)->scalar 0/1.",
            "Indexing e[k] gives a scalar; slicing e[a:b] gives vec(b-a) and needs b-a >= 2.",
            "Comparisons < > <= >= take scalars and give bool; combine with & | !.",
            "Numbers are non-negative literals; write -x for negation.",
            "sqrt of a negative gives 0; division by zero gives 0; exp input is capped at 50.",
            "",
            f"Global features: {globals_}",
            f"Per-object features: <name>{fields}",
            "A bare NAME refers to an observation extra declared in the same task.",
        ]
    )
