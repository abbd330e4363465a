"""Small scalar automatic differentiation engine.

Two independent mechanisms live here:

* ``DualScalar`` -- truncated second-order forward mode.  Each value carries
  first derivatives along seeded input directions and the symmetric matrix of
  second derivatives between those directions.
* ``Tape`` / ``Var`` -- classic reverse mode over an append-only tape, used for
  gradients with respect to a flat ``ParamVector``.

Both work on plain Python floats and on numpy object arrays of themselves, so
small networks can be written with ``W @ x`` and ``np.tanh``.  The training
code runs on JAX for speed; this module is the reference engine that the
geometry oracle suite uses as an independent derivative route.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "DomainError",
    "UnsupportedPrimitiveError",
    "SymPairDict",
    "DualScalar",
    "forward_eval",
    "Tape",
    "Var",
    "backward_grad",
    "ParamVector",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sqrt",
    "erf",
    "gelu",
]

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class AutodiffError(Exception):
    pass


class UnsupportedPrimitiveError(AutodiffError):
    def __init__(self, primitive: str):
        super().__init__(f"unsupported primitive: {primitive}")
        self.primitive = primitive


class DomainError(AutodiffError, ValueError):
    """Raised for division by zero or log/sqrt of a non-positive value."""

    def __init__(self, op: str, node):
        super().__init__(f"{op}: argument outside domain (value={_value_of(node)!r})")
        self.op = op
        self.node = node


def _value_of(x):
    return getattr(x, "value", x)


class SymPairDict(dict):
    """Dict keyed by unordered pairs: ``d[(a, b)] is d[(b, a)]``."""

    @staticmethod
    def _key(k):
        a, b = k
        try:
            return (a, b) if a <= b else (b, a)
        except TypeError:
            return (a, b) if repr(a) <= repr(b) else (b, a)

    def __getitem__(self, k):
        return super().__getitem__(self._key(k))

    def __setitem__(self, k, v):
        super().__setitem__(self._key(k), v)

    def __contains__(self, k):
        return super().__contains__(self._key(k))

    def get(self, k, default=None):
        return super().get(self._key(k), default)


# ---------------------------------------------------------------------------
# forward mode
# ---------------------------------------------------------------------------


class DualScalar:
    """Real number with first and second derivatives along seeded directions."""

    __slots__ = ("value", "d1", "d2")
    __array_priority__ = 1000

    def __init__(self, value, d1=None, d2=None):
        self.value = float(value)
        self.d1 = dict(d1) if d1 else {}
        self.d2 = d2 if isinstance(d2, SymPairDict) else SymPairDict(d2 or {})

    @classmethod
    def seed(cls, value, direction: Hashable) -> "DualScalar":
        return cls(value, {direction: 1.0})

    def __repr__(self):
        return f"DualScalar({self.value!r}, d1={self.d1!r}, d2={dict(self.d2)!r})"

    def __float__(self):
        return self.value

    # generic chain rule for f(self) given f, f', f''
    def _unary(self, f0, f1, f2):
        d1 = {k: f1 * v for k, v in self.d1.items()}
        d2 = SymPairDict()
        keys = list(self.d1)
        for i, a in enumerate(keys):
            for b in keys[i:]:
                d2[(a, b)] = f2 * self.d1[a] * self.d1[b]
        for k, v in self.d2.items():
            d2[k] = d2.get(k, 0.0) + f1 * v
        return DualScalar(f0, d1, d2)

    def _binary(self, other, f0, fx, fy, fxx, fxy, fyy):
        # f(x, y) with x = self, y = other (both DualScalar)
        keys = list(dict.fromkeys(list(self.d1) + list(other.d1)))
        xd = {k: self.d1.get(k, 0.0) for k in keys}
        yd = {k: other.d1.get(k, 0.0) for k in keys}
        d1 = {k: fx * xd[k] + fy * yd[k] for k in keys}
        d2 = SymPairDict()
        for i, a in enumerate(keys):
            for b in keys[i:]:
                d2[(a, b)] = (
                    fxx * xd[a] * xd[b]
                    + fxy * (xd[a] * yd[b] + xd[b] * yd[a])
                    + fyy * yd[a] * yd[b]
                )
        for k, v in self.d2.items():
            d2[k] = d2.get(k, 0.0) + fx * v
        for k, v in other.d2.items():
            d2[k] = d2.get(k, 0.0) + fy * v
        return DualScalar(f0, d1, d2)

    @staticmethod
    def _lift(x):
        if isinstance(x, DualScalar):
            return x
        if isinstance(x, (int, float, np.floating, np.integer)):
            return DualScalar(x)
        return NotImplemented

    def __add__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        return self._binary(o, self.value + o.value, 1.0, 1.0, 0.0, 0.0, 0.0)

    __radd__ = __add__

    def __sub__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        return self._binary(o, self.value - o.value, 1.0, -1.0, 0.0, 0.0, 0.0)

    def __rsub__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        return o - self

    def __mul__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        return self._binary(o, self.value * o.value, o.value, self.value, 0.0, 1.0, 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        y = o.value
        if y == 0.0:
            raise DomainError("div", o)
        x = self.value
        return self._binary(o, x / y, 1.0 / y, -x / y**2, 0.0, -1.0 / y**2, 2.0 * x / y**3)

    def __rtruediv__(self, other):
        o = self._lift(other)
        if o is NotImplemented:
            return o
        return o / self

    def __neg__(self):
        return self._unary(-self.value, -1.0, 0.0)

    def __pos__(self):
        return self

    def __pow__(self, p):
        if isinstance(p, DualScalar):
            if self.value <= 0.0:
                raise DomainError("pow", self)
            return exp(p * log(self))
        p = float(p)
        x = self.value
        if p == 0.0:
            return DualScalar(1.0)
        if x == 0.0 and p < 2.0 and p != 1.0:
            raise DomainError("pow", self)
        if x < 0.0 and not p.is_integer():
            raise DomainError("pow", self)
        f1 = 1.0 if p == 1.0 else p * x ** (p - 1.0)
        f2 = {1.0: 0.0, 2.0: 2.0}.get(p)
        if f2 is None:
            f2 = p * (p - 1.0) * x ** (p - 2.0)
        return self._unary(x**p, f1, f2)

    def __rpow__(self, base):
        return exp(self * math.log(float(base)))

    def __abs__(self):
        raise UnsupportedPrimitiveError("abs")

    # comparisons act on the value channel only
    def __lt__(self, o):
        return self.value < _value_of(o)

    def __le__(self, o):
        return self.value <= _value_of(o)

    def __gt__(self, o):
        return self.value > _value_of(o)

    def __ge__(self, o):
        return self.value >= _value_of(o)

    # numpy object-array ufuncs look these up by name
    def exp(self):
        e = math.exp(self.value)
        return self._unary(e, e, e)

    def log(self):
        x = self.value
        if x <= 0.0:
            raise DomainError("log", self)
        return self._unary(math.log(x), 1.0 / x, -1.0 / x**2)

    def sqrt(self):
        x = self.value
        if x <= 0.0:
            raise DomainError("sqrt", self)
        s = math.sqrt(x)
        return self._unary(s, 0.5 / s, -0.25 / (s * x))

    def sin(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return self._unary(s, c, -s)

    def cos(self):
        s, c = math.sin(self.value), math.cos(self.value)
        return self._unary(c, -s, -c)

    def tanh(self):
        t = math.tanh(self.value)
        s = 1.0 - t * t
        return self._unary(t, s, -2.0 * t * s)

    def erf(self):
        x = self.value
        g = 2.0 / math.sqrt(math.pi) * math.exp(-x * x)
        return self._unary(math.erf(x), g, -2.0 * x * g)

    def gelu(self):
        x = self.value
        cdf = 0.5 * (1.0 + math.erf(x / _SQRT_2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * x * x)
        return self._unary(x * cdf, cdf + x * pdf, pdf * (2.0 - x * x))

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__":
            return NotImplemented
        name = ufunc.__name__
        binary = {
            "add": lambda a, b: a + b,
            "subtract": lambda a, b: a - b,
            "multiply": lambda a, b: a * b,
            "true_divide": lambda a, b: a / b,
            "divide": lambda a, b: a / b,
            "power": lambda a, b: a**b,
        }
        if name in binary and len(inputs) == 2:
            a, b = inputs
            if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
                return NotImplemented
            # numpy scalars would hand the op straight back to this method
            a = float(a) if isinstance(a, np.generic) else a
            b = float(b) if isinstance(b, np.generic) else b
            return binary[name](a, b)
        if name == "negative":
            return -inputs[0]
        if len(inputs) == 1 and name in _UNARY:
            return _UNARY[name](inputs[0])
        raise UnsupportedPrimitiveError(name)


def _dispatch(name: str, fallback: Callable[[float], float]):
    def op(x):
        if isinstance(x, np.ndarray):
            return np.vectorize(op, otypes=[object])(x)
        meth = getattr(x, name, None)
        if meth is not None and isinstance(x, (DualScalar, Var)):
            return meth()
        return fallback(float(x))

    op.__name__ = name
    return op


def _gelu_float(x: float) -> float:
    return x * 0.5 * (1.0 + math.erf(x / _SQRT_2))


def _checked_log(x: float) -> float:
    if x <= 0.0:
        raise DomainError("log", x)
    return math.log(x)


exp = _dispatch("exp", math.exp)
log = _dispatch("log", _checked_log)
sin = _dispatch("sin", math.sin)
cos = _dispatch("cos", math.cos)
tanh = _dispatch("tanh", math.tanh)
sqrt = _dispatch("sqrt", math.sqrt)
erf = _dispatch("erf", math.erf)
gelu = _dispatch("gelu", _gelu_float)

_UNARY = {"exp": exp, "log": log, "sin": sin, "cos": cos, "tanh": tanh, "sqrt": sqrt}


def forward_eval(f: Callable, inputs: Sequence[float], seeds: Iterable[int] = ()) -> list[DualScalar]:
    """Evaluate ``f`` on dual inputs; ``seeds`` lists the input indices to differentiate.

    Direction ids are the input indices.  Returns a flat list of DualScalar outputs.
    """
    seeds = list(seeds)
    if len(set(seeds)) != len(seeds):
        raise ValueError("seed directions must be pairwise distinct")
    xs = [DualScalar(v) for v in inputs]
    for s in seeds:
        xs[s] = DualScalar.seed(float(inputs[s]), s)
    try:
        out = f(*xs)
    except TypeError as exc:
        msg = str(exc)
        marker = "no callable "
        if marker in msg:
            raise UnsupportedPrimitiveError(msg.split(marker)[1].split()[0]) from exc
        raise
    flat = np.ravel(np.asarray(out, dtype=object)) if not isinstance(out, DualScalar) else [out]
    return [o if isinstance(o, DualScalar) else DualScalar(o) for o in flat]


# ---------------------------------------------------------------------------
# reverse mode
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    parents: tuple[int, ...]
    partials: tuple[float, ...]


@dataclass
class Tape:
    """Append-only record of scalar operations.

    ``param_ids[k]`` is the node id of parameter ``k`` of the ParamVector the
    tape was built from.
    """

    nodes: list[_Node] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    param_ids: list[int] = field(default_factory=list)

    def _push(self, op, parents, partials, value) -> "Var":
        for p in parents:
            if p >= len(self.nodes):
                raise AutodiffError("parent id must precede node")
        self.nodes.append(_Node(op, tuple(parents), tuple(partials)))
        self.values.append(float(value))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value: float) -> "Var":
        return self._push("leaf", (), (), value)

    def params(self, pv: "ParamVector") -> np.ndarray:
        """Register every entry of ``pv`` as a leaf; returns an object array of Vars."""
        out = np.empty(pv.data.size, dtype=object)
        for k, v in enumerate(pv.data):
            var = self.leaf(v)
            self.param_ids.append(var.id)
            out[k] = var
        return out


class Var:
    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, id_: int):
        self.tape = tape
        self.id = id_

    @property
    def value(self) -> float:
        return self.tape.values[self.id]

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"

    def _const(self, x) -> "Var":
        if isinstance(x, Var):
            return x
        if isinstance(x, (int, float, np.floating, np.integer)):
            return self.tape._push("const", (), (), x)
        return NotImplemented

    def __add__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        return self.tape._push("add", (self.id, o.id), (1.0, 1.0), self.value + o.value)

    __radd__ = __add__

    def __sub__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        return self.tape._push("sub", (self.id, o.id), (1.0, -1.0), self.value - o.value)

    def __rsub__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        return o - self

    def __mul__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        return self.tape._push("mul", (self.id, o.id), (o.value, self.value), self.value * o.value)

    __rmul__ = __mul__

    def __truediv__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        if o.value == 0.0:
            raise DomainError("div", o)
        y = o.value
        return self.tape._push("div", (self.id, o.id), (1.0 / y, -self.value / y**2), self.value / y)

    def __rtruediv__(self, o):
        o = self._const(o)
        if o is NotImplemented:
            return o
        return o / self

    def __neg__(self):
        return self.tape._push("neg", (self.id,), (-1.0,), -self.value)

    def __pow__(self, p):
        if isinstance(p, Var):
            return exp(p * log(self))
        p = float(p)
        x = self.value
        if x < 0.0 and not p.is_integer():
            raise DomainError("pow", self)
        if x == 0.0 and p < 1.0:
            raise DomainError("pow", self)
        return self.tape._push("pow", (self.id,), (p * x ** (p - 1.0),), x**p)

    def __abs__(self):
        raise UnsupportedPrimitiveError("abs")

    def _u(self, op, value, partial):
        return self.tape._push(op, (self.id,), (partial,), value)

    def exp(self):
        e = math.exp(self.value)
        return self._u("exp", e, e)

    def log(self):
        if self.value <= 0.0:
            raise DomainError("log", self)
        return self._u("log", math.log(self.value), 1.0 / self.value)

    def sqrt(self):
        if self.value <= 0.0:
            raise DomainError("sqrt", self)
        s = math.sqrt(self.value)
        return self._u("sqrt", s, 0.5 / s)

    def sin(self):
        return self._u("sin", math.sin(self.value), math.cos(self.value))

    def cos(self):
        return self._u("cos", math.cos(self.value), -math.sin(self.value))

    def tanh(self):
        t = math.tanh(self.value)
        return self._u("tanh", t, 1.0 - t * t)

    def erf(self):
        x = self.value
        return self._u("erf", math.erf(x), 2.0 / math.sqrt(math.pi) * math.exp(-x * x))

    def gelu(self):
        x = self.value
        cdf = 0.5 * (1.0 + math.erf(x / _SQRT_2))
        return self._u("gelu", x * cdf, cdf + x * _INV_SQRT_2PI * math.exp(-0.5 * x * x))


def backward_grad(tape: Tape, output_id) -> np.ndarray:
    """Gradient of node ``output_id`` with respect to the registered parameters.

    The tape is not modified, so repeated calls give identical results.
    """
    if isinstance(output_id, Var):
        output_id = output_id.id
    if not isinstance(output_id, (int, np.integer)) or isinstance(output_id, bool):
        raise AutodiffError("output must be a single scalar node id")
    if not 0 <= output_id < len(tape.nodes):
        raise AutodiffError(f"node id {output_id} not on tape")
    adj = np.zeros(output_id + 1)
    adj[output_id] = 1.0
    for nid in range(output_id, -1, -1):
        a = adj[nid]
        if a == 0.0:
            continue
        node = tape.nodes[nid]
        for p, d in zip(node.parents, node.partials):
            adj[p] += a * d
    out = np.zeros(len(tape.param_ids))
    for k, pid in enumerate(tape.param_ids):
        if pid <= output_id:
            out[k] = adj[pid]
    return out


# ---------------------------------------------------------------------------
# flat parameter storage
# ---------------------------------------------------------------------------


class ParamVector:
    """Flat float64 parameter array plus a layout table.

    ``layout`` maps ``(network, layer, role)`` to ``(offset, shape)``; the
    entries tile ``data`` exactly, in insertion order.
    """

    def __init__(self, data: np.ndarray, layout: dict[tuple[str, str, str], tuple[int, tuple[int, ...]]]):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.layout = dict(layout)
        self.validate()

    @classmethod
    def from_blocks(cls, blocks: Iterable[tuple[tuple[str, str, str], np.ndarray]]) -> "ParamVector":
        layout, chunks, off = {}, [], 0
        for key, arr in blocks:
            arr = np.asarray(arr, dtype=np.float64)
            if key in layout:
                raise ValueError(f"duplicate layout key {key}")
            layout[key] = (off, tuple(arr.shape))
            chunks.append(arr.ravel())
            off += arr.size
        data = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(data, layout)

    def validate(self):
        spans = sorted((off, off + int(np.prod(shape, dtype=int))) for off, shape in self.layout.values())
        pos = 0
        for lo, hi in spans:
            if lo != pos:
                raise ValueError(f"layout gap or overlap at offset {pos}")
            pos = hi
        if pos != self.data.size:
            raise ValueError("layout does not cover parameter array exactly")

    def __len__(self):
        return self.data.size

    def networks(self) -> list[str]:
        return list(dict.fromkeys(k[0] for k in self.layout))

    def block(self, key, data=None):
        off, shape = self.layout[key]
        src = self.data if data is None else data
        return src[off : off + int(np.prod(shape, dtype=int))].reshape(shape)

    def view(self, network: str, data=None) -> dict[tuple[str, str], object]:
        """All blocks of ``network`` as ``{(layer, role): array}`` (views into ``data``)."""
        return {(k[1], k[2]): self.block(k, data) for k in self.layout if k[0] == network}

    def owner(self, index: int) -> tuple[str, str, str]:
        for key, (off, shape) in self.layout.items():
            if off <= index < off + int(np.prod(shape, dtype=int)):
                return key
        raise IndexError(index)

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.layout)
