"""Reverse-mode differentiation on a scalar tape.

Every arithmetic result involving a :class:`Var` is appended to the owning
:class:`Tape` together with its local partial derivatives.  Operations on
plain floats stay plain floats, so code written against this module runs
unchanged (and fast) when no gradient is needed.

Example
-------
>>> tape = Tape()
>>> a, b = tape.var(2.0), tape.var(3.0)
>>> f = a * b + sin(a)
>>> grads = tape.backward(f)
>>> round(grads[b.index], 12)
2.0
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence, Union

__all__ = [
    "DivisionByZero",
    "TapeMismatch",
    "Tape",
    "Var",
    "Scalar",
    "add",
    "sub",
    "mul",
    "div",
    "sin",
    "cos",
    "absolute",
    "sigmoid",
    "sqrt",
    "total",
    "linear",
    "sum_abs_diff",
    "record",
    "value_of",
]

DIV_EPS = 1e-300


class DivisionByZero(ZeroDivisionError):
    pass


class TapeMismatch(ValueError):
    pass


class Tape:
    """Append-only node store.

    Node ``k`` is represented only by ``parents[k]``, a flat tuple
    ``(i, di, j, dj, ...)`` of parent indices and local partials.  Leaves have
    an empty tuple.  Parents always precede children, so one reverse sweep
    yields all adjoints.
    """

    __slots__ = ("parents", "abs_args")

    def __init__(self) -> None:
        self.parents: list[tuple] = []
        # arguments of every abs evaluation, kept for kink inspection
        self.abs_args: list[float] = []

    def __len__(self) -> int:
        return len(self.parents)

    def reset(self) -> None:
        """Drop every node; Vars created before the reset become invalid."""
        self.parents.clear()
        self.abs_args.clear()

    def var(self, value: float) -> "Var":
        """Create a leaf."""
        parents = self.parents
        parents.append(())
        return Var(self, len(parents) - 1, float(value))

    def vars(self, values: Iterable[float]) -> list["Var"]:
        return [self.var(v) for v in values]

    def push(self, value: float, parents: tuple) -> "Var":
        p = self.parents
        p.append(parents)
        return Var(self, len(p) - 1, value)

    def is_leaf(self, index: int) -> bool:
        return not self.parents[index]

    def adjoints(self, seed: "Var") -> list[float]:
        """Reverse sweep from ``seed``; adjoints of every node up to it."""
        if seed.tape is not self:
            raise TapeMismatch("seed belongs to another tape")
        adj = [0.0] * (seed.index + 1)
        adj[seed.index] = 1.0
        parents = self.parents
        for k in range(seed.index, -1, -1):
            a = adj[k]
            if a == 0.0:
                continue
            p = parents[k]
            n = len(p)
            if n == 2:
                adj[p[0]] += a * p[1]
            elif n == 4:
                adj[p[0]] += a * p[1]
                adj[p[2]] += a * p[3]
            elif n:
                for m in range(0, n, 2):
                    adj[p[m]] += a * p[m + 1]
        return adj

    def backward(self, seed: "Var") -> dict[int, float]:
        """Gradient of ``seed`` with respect to every leaf, keyed by leaf index."""
        adj = self.adjoints(seed)
        parents = self.parents
        return {i: a for i, a in enumerate(adj) if not parents[i]}

    def gradient(self, seed: "Scalar", leaves: Sequence["Var"]) -> list[float]:
        """Gradient of ``seed`` with respect to ``leaves`` (zeros for a constant seed)."""
        if type(seed) is not Var:
            return [0.0] * len(leaves)
        adj = self.adjoints(seed)
        n = len(adj)
        return [adj[v.index] if v.index < n else 0.0 for v in leaves]


class Var:
    """A scalar recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: Tape, index: int, value: float) -> None:
        self.tape = tape
        self.index = index
        self.value = value

    def __repr__(self) -> str:
        return f"Var({self.value!r}, index={self.index})"

    def __float__(self) -> float:
        return self.value

    def __add__(self, other):
        tape = self.tape
        if type(other) is Var:
            if other.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            p = tape.parents
            p.append((self.index, 1.0, other.index, 1.0))
            return Var(tape, len(p) - 1, self.value + other.value)
        if other == 0.0:
            return self
        p = tape.parents
        p.append((self.index, 1.0))
        return Var(tape, len(p) - 1, self.value + other)

    __radd__ = __add__

    def __sub__(self, other):
        tape = self.tape
        if type(other) is Var:
            if other.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            p = tape.parents
            p.append((self.index, 1.0, other.index, -1.0))
            return Var(tape, len(p) - 1, self.value - other.value)
        if other == 0.0:
            return self
        p = tape.parents
        p.append((self.index, 1.0))
        return Var(tape, len(p) - 1, self.value - other)

    def __rsub__(self, other):
        p = self.tape.parents
        p.append((self.index, -1.0))
        return Var(self.tape, len(p) - 1, other - self.value)

    def __neg__(self):
        p = self.tape.parents
        p.append((self.index, -1.0))
        return Var(self.tape, len(p) - 1, -self.value)

    def __mul__(self, other):
        tape = self.tape
        if type(other) is Var:
            if other.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            p = tape.parents
            p.append((self.index, other.value, other.index, self.value))
            return Var(tape, len(p) - 1, self.value * other.value)
        if other == 0.0:
            return 0.0
        if other == 1.0:
            return self
        p = tape.parents
        p.append((self.index, other))
        return Var(tape, len(p) - 1, self.value * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        tape = self.tape
        if type(other) is Var:
            if other.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            d = other.value
            if -DIV_EPS < d < DIV_EPS:
                raise DivisionByZero(f"denominator {d!r}")
            q = self.value / d
            p = tape.parents
            p.append((self.index, 1.0 / d, other.index, -q / d))
            return Var(tape, len(p) - 1, q)
        if other == 1.0:
            return self
        p = tape.parents
        p.append((self.index, 1.0 / other))
        return Var(tape, len(p) - 1, self.value / other)

    def __rtruediv__(self, other):
        d = self.value
        if -DIV_EPS < d < DIV_EPS:
            raise DivisionByZero(f"denominator {d!r}")
        q = other / d
        p = self.tape.parents
        p.append((self.index, -q / d))
        return Var(self.tape, len(p) - 1, q)

    def __abs__(self):
        return absolute(self)

    # comparisons act on values and never record
    def __lt__(self, other):
        return self.value < value_of(other)

    def __le__(self, other):
        return self.value <= value_of(other)

    def __gt__(self, other):
        return self.value > value_of(other)

    def __ge__(self, other):
        return self.value >= value_of(other)


Scalar = Union[float, Var]


def value_of(x: Scalar) -> float:
    return x.value if type(x) is Var else float(x)


def add(a: Scalar, b: Scalar) -> Scalar:
    return a + b


def sub(a: Scalar, b: Scalar) -> Scalar:
    return a - b


def mul(a: Scalar, b: Scalar) -> Scalar:
    return a * b


def div(a: Scalar, b: Scalar) -> Scalar:
    if type(b) is not Var and -DIV_EPS < b < DIV_EPS:
        raise DivisionByZero(f"denominator {b!r}")
    return a / b


def sin(x: Scalar) -> Scalar:
    if type(x) is Var:
        return x.tape.push(math.sin(x.value), (x.index, math.cos(x.value)))
    return math.sin(x)


def cos(x: Scalar) -> Scalar:
    if type(x) is Var:
        return x.tape.push(math.cos(x.value), (x.index, -math.sin(x.value)))
    return math.cos(x)


def absolute(x: Scalar) -> Scalar:
    """``|x|`` with subgradient 0 at the kink."""
    if type(x) is Var:
        v = x.value
        x.tape.abs_args.append(v)
        s = 1.0 if v > 0.0 else (-1.0 if v < 0.0 else 0.0)
        return x.tape.push(abs(v), (x.index, s))
    return abs(x)


def _sigmoid(v: float) -> float:
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def sigmoid(x: Scalar) -> Scalar:
    if type(x) is Var:
        s = _sigmoid(x.value)
        return x.tape.push(s, (x.index, s * (1.0 - s)))
    return _sigmoid(x)


def sqrt(x: Scalar) -> Scalar:
    """Square root; the derivative at exactly 0 is taken as 0."""
    if type(x) is Var:
        r = math.sqrt(x.value)
        return x.tape.push(r, (x.index, 0.5 / r if r > 0.0 else 0.0))
    return math.sqrt(x)


def total(xs: Iterable[Scalar]) -> Scalar:
    """Sum as a single n-ary node (constants folded into the value)."""
    const = 0.0
    value = 0.0
    parents: list = []
    tape = None
    for x in xs:
        if type(x) is Var:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            value += x.value
            parents.append(x.index)
            parents.append(1.0)
        else:
            const += x
    if tape is None:
        return const
    if len(parents) == 2 and const == 0.0:
        return Var(tape, parents[0], value)
    return tape.push(value + const, tuple(parents))


def linear(coefs: Sequence[float], xs: Sequence[Scalar]) -> Scalar:
    """``sum_k coefs[k] * xs[k]`` with float coefficients, as one node."""
    value = 0.0
    parents: list = []
    tape = None
    for c, x in zip(coefs, xs):
        if type(x) is Var:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            if c != 0.0:
                parents.append(x.index)
                parents.append(c)
            value += c * x.value
        else:
            value += c * x
    if tape is None or not parents:
        return value
    return tape.push(value, tuple(parents))


def sum_abs_diff(pred: Sequence[Scalar], actual: Sequence[float]) -> Scalar:
    """``sum_i |pred_i - actual_i|`` as one node; subgradient 0 at kinks."""
    const = 0.0
    value = 0.0
    parents: list = []
    tape = None
    for p, a in zip(pred, actual):
        if type(p) is Var:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise TapeMismatch("operands live on different tapes")
            r = p.value - a
            tape.abs_args.append(r)
            if r > 0.0:
                value += r
                parents.append(p.index)
                parents.append(1.0)
            elif r < 0.0:
                value -= r
                parents.append(p.index)
                parents.append(-1.0)
            elif r != r:
                value += r  # NaN must reach the result
        else:
            const += abs(p - a)
    if not parents:
        # every recorded residual sits exactly on a kink: constant w.r.t. inputs
        return value + const
    return tape.push(value + const, tuple(parents))


_OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sin": sin,
    "cos": cos,
    "abs": absolute,
    "sigmoid": sigmoid,
    "sqrt": sqrt,
}


def record(op: str, *args: Scalar) -> Scalar:
    """Apply a named primitive (``add``, ``sub``, ``mul``, ``div``, ``sin``,
    ``cos``, ``abs``, ``sigmoid``, ``sqrt``)."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise ValueError(f"unknown op {op!r}") from None
    return fn(*args)
