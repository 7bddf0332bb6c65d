"""Reverse-mode differentiation over a recorded tape of float64 array nodes.

Every operation is recorded on a :class:`Tape` in creation order, which is
also a topological order.  The reverse sweep in :func:`grad` can either
produce plain arrays or, with ``create_graph=True``, record the adjoint
computation as new nodes on the same tape.  Differentiating such a result a
second time yields mixed partials, e.g. the parameter gradient of a loss that
contains an input gradient.

The operations in this module accept either :class:`Node` objects or plain
arrays.  When no argument is a node the operation is evaluated eagerly and a
plain ``ndarray`` is returned, so network code can be written once and run
both on and off a tape.
"""

from __future__ import annotations

import math
import numbers
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DiffError",
    "EvaluationError",
    "TapeStateError",
    "UnsupportedOpError",
    "Node",
    "Tape",
    "forward",
    "grad",
    "grad_inputs",
    "grad_params_of_composite",
    "register_activation",
    "activation_derivative",
    "registered_activations",
]


class DiffError(Exception):
    """Base class for differentiation engine errors."""


class EvaluationError(DiffError, ArithmeticError):
    """A node produced a non-finite value during evaluation."""

    def __init__(self, index: int, op: str):
        super().__init__(f"non-finite value at node {index} ({op})")
        self.index = index
        self.op = op


class TapeStateError(DiffError, RuntimeError):
    """The tape is not in a state that allows the requested operation."""


class UnsupportedOpError(DiffError, NotImplementedError):
    """A derivative was requested that no primitive provides."""


# ---------------------------------------------------------------------------
# activation registry


def _sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_d1(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


def _sigmoid_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _silu(x):
    return x * _sigmoid(x)


def _silu_d1(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _silu_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


_ACTIVATIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], ...]] = {}


def register_activation(name: str, *derivatives: Callable[[np.ndarray], np.ndarray]) -> None:
    """Register an elementwise activation as ``(f, f', f'', ...)``.

    The number of callables bounds the differentiation order available for
    the activation: a function registered with ``f, f'`` can be used in a
    first-order reverse sweep only.
    """
    if not derivatives:
        raise ValueError("at least the activation itself is required")
    _ACTIVATIONS[name] = tuple(derivatives)


def activation_derivative(name: str, order: int) -> Callable[[np.ndarray], np.ndarray]:
    try:
        table = _ACTIVATIONS[name]
    except KeyError:
        raise UnsupportedOpError(f"unknown activation {name!r}") from None
    if order >= len(table):
        raise UnsupportedOpError(f"activation {name!r} has no registered derivative of order {order}")
    return table[order]


def registered_activations() -> list[str]:
    return sorted(_ACTIVATIONS)


register_activation("silu", _silu, _silu_d1, _silu_d2)
register_activation("sigmoid", _sigmoid, _sigmoid_d1, _sigmoid_d2)


# ---------------------------------------------------------------------------
# nodes and tapes


class Node:
    """One recorded value on a tape."""

    __slots__ = ("tape", "index", "kind", "prim", "parents", "attrs", "value", "name")
    __array_priority__ = 1000

    def __init__(self, tape, index, kind, value, prim=None, parents=(), attrs=None, name=None):
        self.tape = tape
        self.index = index
        self.kind = kind
        self.value = value
        self.prim = prim
        self.parents = parents
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        op = self.prim.name if self.prim is not None else self.kind
        return f"Node(#{self.index} {op} shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, numbers.Real):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, numbers.Real):
            return scale(self, 1.0 / float(other))
        return mul(self, recip(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered node list plus the replaceable slots of a computation.

    Slots come in three flavours: ``input`` (differentiable data, e.g. the
    noisy point y), ``feed`` (non-differentiable data such as clean targets or
    latent noise draws) and ``param``.  :meth:`forward` rebinds slot values
    and replays every recorded operation, so a tape built once can be reused
    for every minibatch of the same shape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: list[Node] = []
        self.feeds: list[Node] = []
        self.params: list[Node] = []
        self.output: Node | None = None
        self._stale = False
        # recorded nodes never change, so dependency masks stay valid as the tape grows
        self._dep_cache: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, kind, value, name=None):
        value = np.array(value, dtype=np.float64)
        node = Node(self, len(self.nodes), kind, value, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._leaf("constant", value)

    def input(self, value, name=None) -> Node:
        node = self._leaf("input", value, name)
        self.inputs.append(node)
        return node

    def feed(self, value, name=None) -> Node:
        node = self._leaf("feed", value, name)
        self.feeds.append(node)
        return node

    def param(self, value, name=None) -> Node:
        node = self._leaf("param", value, name)
        self.params.append(node)
        return node

    def set_output(self, node: Node) -> Node:
        if node.tape is not self:
            raise TapeStateError("output node belongs to another tape")
        self.output = node
        return node

    def bind(self, inputs=None, params=None, feeds=None) -> None:
        """Overwrite slot values; the tape is stale until :meth:`replay`."""
        for slots, values, label in (
            (self.inputs, inputs, "input"),
            (self.params, params, "param"),
            (self.feeds, feeds, "feed"),
        ):
            if values is None:
                continue
            if len(values) != len(slots):
                raise ValueError(f"expected {len(slots)} {label} values, got {len(values)}")
            for node, v in zip(slots, values):
                v = np.asarray(v, dtype=np.float64)
                if v.shape != node.value.shape:
                    raise ValueError(
                        f"{label} slot {node.name or node.index}: shape {v.shape} != {node.value.shape}"
                    )
                node.value = v
            self._stale = True

    def replay(self) -> None:
        for node in self.nodes:
            if node.prim is None:
                continue
            value = node.prim.fwd(*(p.value for p in node.parents), **node.attrs)
            if not _finite(value):
                self._stale = True
                raise EvaluationError(node.index, node.prim.name)
            node.value = value
        self._stale = False

    def forward(self, inputs=None, params=None, feeds=None):
        self.bind(inputs, params, feeds)
        self.replay()
        out = self.output if self.output is not None else self.nodes[-1]
        return out.value


def forward(tape: Tape, inputs=None, params=None, feeds=None):
    """Rebind slots, replay the tape and return the output value."""
    value = tape.forward(inputs, params, feeds)
    return float(value) if value.shape == () else value


# ---------------------------------------------------------------------------
# primitives


def _finite(value) -> bool:
    # any nan or inf entry makes the sum non-finite
    return math.isfinite(np.add.reduce(value, axis=None))


class Primitive:
    __slots__ = ("name", "fwd", "vjp")

    def __init__(self, name, fwd, vjp):
        self.name = name
        self.fwd = fwd
        self.vjp = vjp

    def __repr__(self):
        return f"Primitive({self.name})"


def _apply(prim: Primitive, *args, **attrs):
    tape = None
    for a in args:
        if type(a) is Node:
            tape = a.tape
            break
    if tape is None:
        return prim.fwd(*(a if type(a) is np.ndarray else np.asarray(a, dtype=np.float64) for a in args), **attrs)
    parents = []
    for a in args:
        if isinstance(a, Node):
            if a.tape is not tape:
                raise DiffError("operands live on different tapes")
            parents.append(a)
        else:
            parents.append(tape.constant(a))
    value = prim.fwd(*(p.value for p in parents), **attrs)
    index = len(tape.nodes)
    if not _finite(value):
        raise EvaluationError(index, prim.name)
    node = Node(tape, index, "op", value, prim, tuple(parents), attrs)
    tape.nodes.append(node)
    return node


def _shape(x):
    t = type(x)
    if t is Node or t is np.ndarray:
        return x.shape
    return np.shape(x)


# vjp signature: (g, args, out, attrs, needs) -> tuple of adjoints or None


def _add_vjp(g, args, out, attrs, needs):
    return (g if needs[0] else None, g if needs[1] else None)


def _sub_vjp(g, args, out, attrs, needs):
    return (g if needs[0] else None, neg(g) if needs[1] else None)


def _neg_vjp(g, args, out, attrs, needs):
    return (neg(g),)


def _mul_vjp(g, args, out, attrs, needs):
    a, b = args
    return (mul(g, b) if needs[0] else None, mul(g, a) if needs[1] else None)


def _scale_vjp(g, args, out, attrs, needs):
    return (scale(g, attrs["c"]),)


def _matmul_vjp(g, args, out, attrs, needs):
    a, b = args
    return (
        matmul(g, transpose(b)) if needs[0] else None,
        matmul(transpose(a), g) if needs[1] else None,
    )


def _transpose_vjp(g, args, out, attrs, needs):
    return (transpose(g),)


def _exp_vjp(g, args, out, attrs, needs):
    return (mul(g, out),)


def _log_vjp(g, args, out, attrs, needs):
    return (mul(g, recip(args[0])),)


def _recip_vjp(g, args, out, attrs, needs):
    return (neg(mul(g, mul(out, out))),)


def _act_fwd(a, name, order):
    return activation_derivative(name, order)(a)


def _act_vjp(g, args, out, attrs, needs):
    name, order = attrs["name"], attrs["order"]
    # raises before any node is created when the next order is missing
    activation_derivative(name, order + 1)
    return (mul(g, act(args[0], name, order + 1)),)


def _sum_all_vjp(g, args, out, attrs, needs):
    return (fill(g, _shape(args[0])),)


def _fill_vjp(g, args, out, attrs, needs):
    return (sum_all(g),)


def _sum_cols_vjp(g, args, out, attrs, needs):
    return (broadcast_cols(g, _shape(args[0])[1]),)


def _broadcast_cols_vjp(g, args, out, attrs, needs):
    return (sum_cols(g),)


def _sum_rows_vjp(g, args, out, attrs, needs):
    return (broadcast_rows(g, _shape(args[0])[0]),)


def _broadcast_rows_vjp(g, args, out, attrs, needs):
    return (sum_rows(g),)


def _tile_rows_vjp(g, args, out, attrs, needs):
    return (fold_rows(g, attrs["reps"]),)


def _fold_rows_vjp(g, args, out, attrs, needs):
    return (tile_rows(g, attrs["reps"]),)


def _nondiff_vjp(g, args, out, attrs, needs):
    return (None,) * len(args)


def _tile_rows_fwd(a, reps):
    return np.concatenate([a] * reps, axis=0)


def _fold_rows_fwd(a, reps):
    n = a.shape[0] // reps
    return a.reshape((reps, n) + a.shape[1:]).sum(axis=0)


_P_ADD = Primitive("add", np.add, _add_vjp)
_P_SUB = Primitive("sub", np.subtract, _sub_vjp)
_P_NEG = Primitive("neg", np.negative, _neg_vjp)
_P_MUL = Primitive("mul", np.multiply, _mul_vjp)
_P_SCALE = Primitive("scale", lambda a, c: a * c, _scale_vjp)
_P_MATMUL = Primitive("matmul", np.matmul, _matmul_vjp)
_P_TRANSPOSE = Primitive("transpose", lambda a: np.ascontiguousarray(a.T), _transpose_vjp)
_P_EXP = Primitive("exp", np.exp, _exp_vjp)
_P_LOG = Primitive("log", np.log, _log_vjp)
_P_RECIP = Primitive("recip", np.reciprocal, _recip_vjp)
_P_ACT = Primitive("act", _act_fwd, _act_vjp)
_P_SUM_ALL = Primitive("sum_all", lambda a: np.asarray(a.sum()), _sum_all_vjp)
_P_FILL = Primitive("fill", lambda a, shape: np.full(shape, float(a)), _fill_vjp)
_P_SUM_COLS = Primitive("sum_cols", lambda a: a.sum(axis=1), _sum_cols_vjp)
_P_BCAST_COLS = Primitive(
    "broadcast_cols", lambda a, k: np.repeat(a[:, None], k, axis=1), _broadcast_cols_vjp
)
_P_SUM_ROWS = Primitive("sum_rows", lambda a: a.sum(axis=0), _sum_rows_vjp)
_P_BCAST_ROWS = Primitive(
    "broadcast_rows", lambda a, n: np.repeat(a[None, :], n, axis=0), _broadcast_rows_vjp
)
_P_TILE_ROWS = Primitive("tile_rows", _tile_rows_fwd, _tile_rows_vjp)
_P_FOLD_ROWS = Primitive("fold_rows", _fold_rows_fwd, _fold_rows_vjp)
_P_ROW_MAX = Primitive("row_max", lambda a: a.max(axis=1), _nondiff_vjp)


def _same_shape(name, a, b):
    sa, sb = _shape(a), _shape(b)
    if sa != sb:
        raise ValueError(f"{name}: shape mismatch {sa} vs {sb}")


def _coerce(a, b):
    # python scalars become full constant arrays of the other operand's shape
    if isinstance(b, numbers.Real):
        b = np.full(_shape(a), float(b))
    if isinstance(a, numbers.Real):
        a = np.full(_shape(b), float(a))
    return a, b


def add(a, b):
    a, b = _coerce(a, b)
    _same_shape("add", a, b)
    return _apply(_P_ADD, a, b)


def sub(a, b):
    a, b = _coerce(a, b)
    _same_shape("sub", a, b)
    return _apply(_P_SUB, a, b)


def neg(a):
    return _apply(_P_NEG, a)


def mul(a, b):
    _same_shape("mul", a, b)
    return _apply(_P_MUL, a, b)


def scale(a, c: float):
    return _apply(_P_SCALE, a, c=float(c))


def matmul(a, b):
    sa, sb = _shape(a), _shape(b)
    if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
        raise ValueError(f"matmul: incompatible shapes {sa} and {sb}")
    return _apply(_P_MATMUL, a, b)


def transpose(a):
    return _apply(_P_TRANSPOSE, a)


def exp(a):
    return _apply(_P_EXP, a)


def log(a):
    return _apply(_P_LOG, a)


def recip(a):
    return _apply(_P_RECIP, a)


def act(a, name: str, order: int = 0):
    """Elementwise registered activation, or its ``order``-th derivative."""
    activation_derivative(name, order)
    return _apply(_P_ACT, a, name=name, order=order)


def silu(a):
    return act(a, "silu")


def sigmoid(a):
    return act(a, "sigmoid")


def sum_all(a):
    return _apply(_P_SUM_ALL, a)


def fill(a, shape):
    return _apply(_P_FILL, a, shape=tuple(shape))


def sum_cols(a):
    """Row sums of a matrix, ``(n, k) -> (n,)``."""
    return _apply(_P_SUM_COLS, a)


def broadcast_cols(a, k: int):
    """Repeat a vector as ``k`` columns, ``(n,) -> (n, k)``."""
    return _apply(_P_BCAST_COLS, a, k=int(k))


def sum_rows(a):
    """Column sums of a matrix, ``(n, k) -> (k,)``."""
    return _apply(_P_SUM_ROWS, a)


def broadcast_rows(a, n: int):
    """Repeat a vector as ``n`` rows, ``(k,) -> (n, k)``."""
    return _apply(_P_BCAST_ROWS, a, n=int(n))


def tile_rows(a, reps: int):
    """Stack ``reps`` copies of ``a`` along the first axis."""
    return _apply(_P_TILE_ROWS, a, reps=int(reps))


def fold_rows(a, reps: int):
    """Sum the ``reps`` equal blocks of the first axis (adjoint of tile_rows)."""
    if _shape(a)[0] % reps:
        raise ValueError("fold_rows: leading dimension not divisible by reps")
    return _apply(_P_FOLD_ROWS, a, reps=int(reps))


def row_max(a):
    """Per-row maximum, treated as a constant by the reverse sweep."""
    return _apply(_P_ROW_MAX, a)


def add_row(a, b):
    """``a + b`` with the vector ``b`` added to every row of ``a``."""
    return add(a, broadcast_rows(b, _shape(a)[0]))


def square(a):
    return mul(a, a)


def mean_all(a):
    return scale(sum_all(a), 1.0 / int(np.prod(_shape(a))))


# ---------------------------------------------------------------------------
# reverse sweep


def _dependency_mask(tape: Tape, top: int, targets: set[int]) -> bytearray:
    """Flags for nodes up to ``top`` that depend on any target node (cached)."""
    key = (top, frozenset(targets))
    cache = tape._dep_cache
    mask = cache.get(key)
    if mask is not None:
        return mask
    mask = bytearray(top + 1)
    for node in tape.nodes[: top + 1]:
        if node.index in targets:
            mask[node.index] = 1
        elif node.prim is not None:
            for p in node.parents:
                if mask[p.index]:
                    mask[node.index] = 1
                    break
    cache[key] = mask
    return mask


def grad(output: Node, wrt: Sequence[Node], create_graph: bool = False):
    """Adjoints of a scalar ``output`` with respect to the nodes in ``wrt``.

    With ``create_graph`` the adjoints are returned as nodes recorded on the
    output's tape, so they can take part in further computation and be
    differentiated again.  Otherwise plain arrays are returned.
    """
    tape = output.tape
    if tape._stale:
        raise TapeStateError("tape values are stale; run forward() first")
    if output.value.shape != ():
        raise DiffError(f"gradient requires a scalar output, got shape {output.shape}")
    for w in wrt:
        if w.tape is not tape:
            raise DiffError("wrt node belongs to another tape")

    nodes = tape.nodes
    top = output.index
    targets = {w.index for w in wrt}
    depends = _dependency_mask(tape, top, targets)

    found: dict[int, object] = {}
    if depends[top]:
        seed = tape.constant(1.0) if create_graph else np.float64(1.0)
        adjoints: dict[int, object] = {top: seed}
        for i in range(top, -1, -1):
            g = adjoints.pop(i, None)
            if g is None:
                continue
            node = nodes[i]
            if i in targets:
                found[i] = g
            if node.prim is None:
                continue
            needs = tuple(bool(depends[p.index]) for p in node.parents)
            if create_graph:
                args, out = node.parents, node
            else:
                args, out = tuple(p.value for p in node.parents), node.value
            contribs = node.prim.vjp(g, args, out, node.attrs, needs)
            for p, need, c in zip(node.parents, needs, contribs):
                if not need or c is None:
                    continue
                prev = adjoints.get(p.index)
                adjoints[p.index] = c if prev is None else add(prev, c)

    result = []
    for w in wrt:
        g = found.get(w.index)
        if g is None:
            zeros = np.zeros_like(w.value)
            g = tape.constant(zeros) if create_graph else zeros
        elif not create_graph:
            g = np.asarray(g, dtype=np.float64)
        result.append(g)
    return result


def grad_inputs(tape: Tape) -> list[np.ndarray]:
    """Gradient of the tape's scalar output with respect to every input slot."""
    if tape.output is None:
        raise TapeStateError("tape has no output; call set_output() first")
    return grad(tape.output, tape.inputs)


def grad_params_of_composite(builder, y, params, feeds=()) -> list[np.ndarray]:
    """Parameter gradient of a loss whose construction may use input gradients.

    ``builder(tape, y_node, param_nodes, feed_nodes)`` must return a scalar
    node.  It is free to call ``grad(..., create_graph=True)`` with respect to
    ``y_node``; the returned gradient then includes the pathway through that
    inner derivative.
    """
    tape = Tape()
    y_node = tape.input(y, name="y")
    param_nodes = [tape.param(p, name=f"param{i}") for i, p in enumerate(params)]
    feed_nodes = [tape.feed(f, name=f"feed{i}") for i, f in enumerate(feeds)]
    loss = builder(tape, y_node, param_nodes, feed_nodes)
    tape.set_output(loss)
    return grad(loss, param_nodes)
