"""Reverse-mode automatic differentiation on a re-entrant tape.

Every tensor lives on (at most) one :class:`Tape`.  A backward pass walks the
tape in reverse topological order; with ``create_graph=True`` the backward
arithmetic is itself recorded, so the resulting gradients can be
differentiated once more.  That second-order capability is what lets the
toolkit differentiate through squared gradient norms exactly instead of
falling back to finite differences.

All values are dense float64 numpy arrays.  A single tape is strictly
single-threaded; independent tapes may live on independent threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for tape and gradient failures."""


class TapeConsumedError(AutodiffError):
    """A tape whose graph was freed by a plain backward pass was reused."""


class DegenerateStepError(AutodiffError):
    """A finite-difference probe step was too small to move the parameters."""


@dataclass(frozen=True)
class GradMode:
    """How to differentiate through a squared gradient norm.

    ``double_backprop`` is exact (re-entrant backward).  ``finite_difference``
    uses the directional probe 2*(grad(theta + eps*v) - grad(theta))/eps with
    v = grad(theta), which avoids the second backward pass at O(eps) error.
    """

    kind: str
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in ("double_backprop", "finite_difference"):
            raise ValueError(f"unknown grad mode {self.kind!r}")
        if self.kind == "finite_difference":
            if self.eps is not None and self.eps <= 0:
                raise ValueError("finite-difference step must be positive")

    @classmethod
    def double_backprop(cls) -> "GradMode":
        return cls("double_backprop")

    @classmethod
    def finite_difference(cls, eps: float | None = None) -> "GradMode":
        return cls("finite_difference", eps)


def default_fd_eps(theta: np.ndarray) -> float:
    """Probe step scaled by parameter magnitude.

    1e-5 balances the O(eps) truncation of the one-sided probe against f64
    cancellation (~1e-16/eps, so roughly 1e-11 relative noise); larger
    defaults measurably disagree with the exact double-backprop path on
    small softmax models.
    """
    return 1e-5 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))


class Tensor:
    """Dense float64 array, optionally registered on a tape."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: "Tape | None" = None, node_id: int | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = "detached" if self.tape is None else f"node {self.node_id}"
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("op", "input_ids", "vjp")

    def __init__(self, op: str, input_ids: tuple[int, ...], vjp):
        self.op = op
        self.input_ids = input_ids
        # vjp(grad_out) -> gradients aligned with input_ids; None for leaves
        self.vjp = vjp


class GradientMap:
    """Gradients keyed by tape node id, as produced by one backward pass."""

    def __init__(self, grads: dict[int, Tensor]):
        self._grads = grads

    def wrt(self, tensor: Tensor) -> Tensor:
        """Gradient with respect to ``tensor`` (zeros if it was not reached)."""
        if tensor.node_id is None:
            raise AutodiffError("tensor is detached from any tape")
        g = self._grads.get(tensor.node_id)
        if g is None:
            return Tensor(np.zeros(tensor.shape))
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.node_id in self._grads


class Tape:
    """Ordered record of primitive applications, re-entrant for second order.

    ``backward(..., create_graph=False)`` marks the tape consumed; a second
    backward on a consumed tape raises :class:`TapeConsumedError` rather than
    silently producing garbage.  ``create_graph=True`` keeps the tape live and
    records the backward arithmetic as new nodes.
    """

    __slots__ = ("_nodes", "_recording", "_consumed", "check_finite")

    def __init__(self, check_finite: bool = True):
        self._nodes: list[_Node] = []
        self._recording = True
        self._consumed = False
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def leaf(self, values, name: str = "leaf") -> Tensor:
        """Register an input tensor.  Its gradient is available after backward."""
        arr = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise AutodiffError(f"non-finite values in {name}")
        self._nodes.append(_Node(name, (), None))
        return Tensor(arr, self, len(self._nodes) - 1)

    def constant(self, values) -> Tensor:
        """A leaf that is semantically constant (gradient unused)."""
        return self.leaf(values, name="const")

    @contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def _record(self, op: str, input_ids: tuple[int, ...]) -> int:
        self._nodes.append(_Node(op, input_ids, None))
        return len(self._nodes) - 1

    def backward(self, output: Tensor, create_graph: bool = False) -> GradientMap:
        """Accumulate d(output)/d(node) for every node reachable from output.

        ``output`` must be a scalar (0-d) tensor on this tape.  Accumulation
        happens in fixed reverse node order, so results are bit-deterministic.
        """
        if self._consumed:
            raise TapeConsumedError(
                "tape already consumed by a backward pass without create_graph"
            )
        if output.tape is not self:
            raise AutodiffError("output tensor does not belong to this tape")
        if output.shape != ():
            raise AutodiffError(f"backward requires a scalar output, got shape {output.shape}")

        if create_graph:
            seed = self.constant(np.ones(()))
        else:
            seed = Tensor(np.ones(()))
        grads: dict[int, Tensor] = {output.node_id: seed}

        stop = output.node_id
        ctx = _null_ctx() if create_graph else self.paused()
        with ctx:
            for nid in range(stop, -1, -1):
                g = grads.get(nid)
                if g is None:
                    continue
                node = self._nodes[nid]
                if node.vjp is None:
                    continue
                for iid, ig in zip(node.input_ids, node.vjp(g)):
                    if ig is None:
                        continue
                    prev = grads.get(iid)
                    grads[iid] = ig if prev is None else add(prev, ig)
        if not create_graph:
            self._consumed = True
        return GradientMap(grads)


@contextmanager
def _null_ctx():
    yield


# ---------------------------------------------------------------------------
# primitive recording
# ---------------------------------------------------------------------------

def _common_tape(inputs: Iterable[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise AutodiffError("inputs belong to different tapes")
    return tape


def _apply(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, make_vjp) -> Tensor:
    """Record one primitive if an active tape is recording, else detach.

    ``make_vjp(inputs, out)`` builds the vjp closure over the on-tape input
    and output tensors; it is only invoked when the node is actually recorded,
    which keeps the paused (plain backward) path cheap.
    """
    tape = _common_tape(inputs)
    if tape is None or not tape._recording:
        return Tensor(values)
    if tape.check_finite:
        for t in inputs:
            if not np.all(np.isfinite(t.values)):
                raise AutodiffError(f"non-finite input to primitive {op!r}")
    # lift detached operands so input ids line up with the vjp outputs
    inputs = tuple(t if t.tape is tape else tape.constant(t.values) for t in inputs)
    nid = tape._record(op, tuple(t.node_id for t in inputs))
    out = Tensor(values, tape, nid)
    tape._nodes[nid].vjp = make_vjp(inputs, out)
    return out


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` (sum over expanded axes)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    return reshape(sum(g, axis=axes), shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def make_vjp(ins, out):
        ia, ib = ins
        return lambda g: (_unbroadcast(g, ia.shape), _unbroadcast(g, ib.shape))

    return _apply("add", (a, b), a.values + b.values, make_vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def make_vjp(ins, out):
        ia, ib = ins
        return lambda g: (_unbroadcast(g, ia.shape), _unbroadcast(scale(g, -1.0), ib.shape))

    return _apply("sub", (a, b), a.values - b.values, make_vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python float constant."""
    a = _as_tensor(a)
    c = float(c)

    def make_vjp(ins, out):
        return lambda g: (scale(g, c),)

    return _apply("scale", (a,), a.values * c, make_vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (numpy broadcasting rules)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def make_vjp(ins, out):
        ia, ib = ins
        return lambda g: (
            _unbroadcast(mul(g, ib), ia.shape),
            _unbroadcast(mul(g, ia), ib.shape),
        )

    return _apply("mul", (a, b), a.values * b.values, make_vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise AutodiffError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def make_vjp(ins, out):
        ia, ib = ins
        return lambda g: (matmul(g, transpose(ib)), matmul(transpose(ia), g))

    return _apply("matmul", (a, b), a.values @ b.values, make_vjp)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise AutodiffError("transpose expects a 2-d operand")

    def make_vjp(ins, out):
        return lambda g: (transpose(g),)

    return _apply("transpose", (a,), a.values.T.copy(), make_vjp)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # the derivative mask is constant under further differentiation
    mask = (a.values > 0.0).astype(np.float64)

    def make_vjp(ins, out):
        return lambda g: (mul(g, Tensor(mask)),)

    return _apply("relu", (a,), np.maximum(a.values, 0.0), make_vjp)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def make_vjp(ins, out):
        return lambda g: (mul(g, out),)

    return _apply("exp", (a,), np.exp(a.values), make_vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log of the softmax along ``axis``, numerically stabilized."""
    a = _as_tensor(a)
    shift = a.values - np.max(a.values, axis=axis, keepdims=True)
    values = shift - np.log(np.sum(np.exp(shift), axis=axis, keepdims=True))

    def make_vjp(ins, out):
        return lambda g: (sub(g, mul(exp(out), sum(g, axis=axis, keepdims=True))),)

    return _apply("log_softmax", (a,), values, make_vjp)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise pick: out[i] = a[i, index[i]] for a 2-d ``a``."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise AutodiffError(f"gather: need (n, c) values and (n,) index, got {a.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise AutodiffError("gather: index out of range")

    def make_vjp(ins, out):
        cols = a.shape[1]
        return lambda g: (scatter_rows(g, idx, cols),)

    return _apply("gather", (a,), a.values[np.arange(a.shape[0]), idx], make_vjp)


def scatter_rows(g: Tensor, index: np.ndarray, num_cols: int) -> Tensor:
    """Adjoint of :func:`gather`: place g[i] at column index[i] of a zero matrix."""
    g = _as_tensor(g)
    idx = np.asarray(index)
    values = np.zeros((g.shape[0], num_cols))
    values[np.arange(g.shape[0]), idx] = g.values

    def make_vjp(ins, out):
        return lambda gg: (gather(gg, idx),)

    return _apply("scatter_rows", (g,), values, make_vjp)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    values = np.sum(a.values, axis=axis, keepdims=keepdims)

    def make_vjp(ins, out):
        in_shape = a.shape

        def vjp(g):
            if axis is None or keepdims:
                gk = g
            else:
                kshape = list(in_shape)
                for ax in (axis if isinstance(axis, tuple) else (axis,)):
                    kshape[ax] = 1
                gk = reshape(g, tuple(kshape))
            return (mul(gk, Tensor(np.ones(in_shape))),)

        return vjp

    return _apply("sum", (a,), values, make_vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def square(a: Tensor) -> Tensor:
    a = _as_tensor(a)

    def make_vjp(ins, out):
        (ia,) = ins
        return lambda g: (scale(mul(g, ia), 2.0),)

    return _apply("square", (a,), a.values * a.values, make_vjp)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values < 0):
        raise AutodiffError("sqrt of negative values")

    def make_vjp(ins, out):
        return lambda g: (scale(mul(g, reciprocal(out)), 0.5),)

    return _apply("sqrt", (a,), np.sqrt(a.values), make_vjp)


def reciprocal(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values == 0):
        raise AutodiffError("reciprocal of zero")

    def make_vjp(ins, out):
        return lambda g: (scale(mul(g, square(out)), -1.0),)

    return _apply("reciprocal", (a,), 1.0 / a.values, make_vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise AutodiffError(f"reshape: cannot view {a.shape} as {shape}")

    def make_vjp(ins, out):
        orig = a.shape
        return lambda g: (reshape(g, orig),)

    return _apply("reshape", (a,), a.values.reshape(shape), make_vjp)


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """Contiguous 1-d slice a[start : start + length]."""
    a = _as_tensor(a)
    if a.ndim != 1:
        raise AutodiffError("narrow expects a 1-d operand")
    if start < 0 or start + length > a.shape[0]:
        raise AutodiffError(f"narrow: slice [{start}, {start + length}) out of range")

    def make_vjp(ins, out):
        after = a.shape[0] - start - length
        return lambda g: (pad_zeros(g, start, after),)

    return _apply("narrow", (a,), a.values[start:start + length].copy(), make_vjp)


def pad_zeros(a: Tensor, before: int, after: int) -> Tensor:
    """Adjoint of :func:`narrow`: embed a 1-d block into a longer zero vector."""
    a = _as_tensor(a)
    values = np.zeros(before + a.shape[0] + after)
    values[before:before + a.shape[0]] = a.values

    def make_vjp(ins, out):
        length = a.shape[0]
        return lambda g: (narrow(g, before, length),)

    return _apply("pad_zeros", (a,), values, make_vjp)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-d tensors."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise AutodiffError("concat of zero tensors")
    for p in parts:
        if p.ndim != 1:
            raise AutodiffError("concat expects 1-d operands")
    values = np.concatenate([p.values for p in parts])

    def make_vjp(ins, out):
        lengths = [p.shape[0] for p in parts]
        offs = [0]
        for n in lengths:
            offs.append(offs[-1] + n)

        def vjp(g):
            return tuple(narrow(g, offs[i], lengths[i]) for i in range(len(lengths)))

        return vjp

    return _apply("concat", tuple(parts), values, make_vjp)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "scale": scale,
    "mul": mul,
    "matmul": matmul,
    "transpose": transpose,
    "relu": relu,
    "exp": exp,
    "log_softmax": log_softmax,
    "gather": gather,
    "scatter_rows": scatter_rows,
    "sum": sum,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "reciprocal": reciprocal,
    "concat": concat,
    "reshape": reshape,
    "narrow": narrow,
    "pad_zeros": pad_zeros,
}


def record_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name; unknown kinds are rejected."""
    try:
        op = PRIMITIVES[kind]
    except KeyError:
        raise AutodiffError(f"unknown primitive kind {kind!r}") from None
    return op(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient helpers over flat parameter vectors
# ---------------------------------------------------------------------------

def value_and_gradient(loss_fn: Callable[[Tensor], Tensor], theta: np.ndarray,
                       check_finite: bool = True) -> tuple[float, np.ndarray]:
    """Loss and its gradient at ``theta`` via one forward/backward pass."""
    tape = Tape(check_finite=check_finite)
    leaf = tape.leaf(theta, name="theta")
    loss = loss_fn(leaf)
    grads = tape.backward(loss)
    return loss.item(), grads.wrt(leaf).values


def gradient(loss_fn: Callable[[Tensor], Tensor], theta: np.ndarray) -> np.ndarray:
    return value_and_gradient(loss_fn, theta)[1]


def grad_norm_sq_gradient(loss_fn: Callable[[Tensor], Tensor], theta: np.ndarray,
                          mode: GradMode = GradMode.double_backprop()) -> np.ndarray:
    """Gradient of ||grad(loss_fn)(theta)||^2 with respect to theta.

    The double-backprop branch differentiates the squared norm exactly; the
    finite-difference branch returns 2*(grad(theta + eps*v) - grad(theta))/eps
    with v = grad(theta), i.e. twice a Hessian-vector probe along the gradient.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if mode.kind == "double_backprop":
        tape = Tape()
        leaf = tape.leaf(theta, name="theta")
        loss = loss_fn(leaf)
        first = tape.backward(loss, create_graph=True)
        g = first.wrt(leaf)
        sq = sum(square(g))
        second = tape.backward(sq)
        return second.wrt(leaf).values

    g = gradient(loss_fn, theta)
    if not np.any(g):
        return np.zeros_like(theta)
    eps = mode.eps if mode.eps is not None else default_fd_eps(theta)
    probe = theta + eps * g
    if np.array_equal(probe, theta):
        raise DegenerateStepError(
            f"finite-difference step eps={eps:g} does not move the parameters"
        )
    g_probe = gradient(loss_fn, probe)
    return 2.0 * (g_probe - g) / eps


def finite_diff_gradient(loss_fn: Callable[[Tensor], Tensor], theta: np.ndarray,
                         eps: float = 1e-5) -> np.ndarray:
    """Coordinate-wise central differences; the independent testing oracle.

    O(eps^2) truncation error; cost is two loss evaluations per coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    out = np.zeros_like(theta)

    def eval_at(t: np.ndarray) -> float:
        tape = Tape()
        return loss_fn(tape.leaf(t, name="theta")).item()

    for i in range(theta.size):
        bump = np.zeros_like(theta)
        bump.flat[i] = eps
        out.flat[i] = (eval_at(theta + bump) - eval_at(theta - bump)) / (2.0 * eps)
    return out
