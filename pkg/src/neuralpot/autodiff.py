"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation on tensors that require gradients appends a
node to an implicit tape (creation order is a topological order, so
``backward`` can replay it strictly in reverse). Vector-Jacobian products
are themselves written in terms of tensor operations; calling
``backward(create_graph=True)`` records them, which is how second
derivatives (forces differentiated again for the force loss) are obtained.

Broadcasting in binary operations is deliberately restricted: identical
shapes, scalars, a trailing-suffix operand (bias over a leading batch
dimension), or same-rank operands with explicit size-1 axes. Anything else
must be reshaped explicitly.
"""

from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


_counter = itertools.count()
_grad_enabled = True
_debug_nan = False


def set_debug_nan(flag: bool) -> None:
    """When enabled, every op raises FloatingPointError on non-finite output."""
    global _debug_nan
    _debug_nan = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """Dense float64 array participating in a reverse-mode computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id",
                 "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], tuple[Tensor | None, ...]] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, create_graph: bool = False) -> dict["Tensor", "Tensor"]:
        return backward(self, create_graph=create_graph)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _scalar_err(t: Tensor):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if _debug_nan and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by tensor operation")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# broadcasting rules

def _broadcast_allowed(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) != len(sb):
        big, small = (sa, sb) if len(sa) > len(sb) else (sb, sa)
        return big[len(big) - len(small):] == small
    return all(a == b or a == 1 or b == 1 for a, b in zip(sa, sb))


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if not _broadcast_allowed(a.shape, b.shape):
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not align "
                         "(only leading-batch or explicit size-1 broadcasting is allowed)")


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a gradient computed at broadcast shape back to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def vjp(g: Tensor):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def vjp(g: Tensor):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")

    def vjp(g: Tensor):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    def vjp(g: Tensor):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose requires a 2-D tensor, got {a.shape}")

    def vjp(g: Tensor):
        return (transpose(g),)

    # a view: BLAS reads strided operands natively and op outputs are
    # never written in place, so materializing it would be pure cost
    return _make(a.data.T, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in (shape if isinstance(shape, Iterable) else (shape,)))
    new = a.data.reshape(shape)

    def vjp(g: Tensor):
        return (reshape(g, a.shape),)

    return _make(new, (a,), vjp)  # view when contiguous; see transpose


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if not _broadcast_allowed(a.shape, shape):
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}")

    def vjp(g: Tensor):
        return (_unbroadcast(g, a.shape),)

    return _make(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (int(axis),)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: Tensor):
        if axis is None:
            gk = reshape(g, (1,) * a.ndim) if a.ndim else g
        elif keepdims:
            gk = g
        else:
            kshape = list(a.shape)
            for ax in axis:
                kshape[ax % a.ndim] = 1
            gk = reshape(g, kshape)
        return (broadcast_to(gk, a.shape),)

    return _make(np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), (a,), None)
    if out._parents:
        # the vjp reuses the output, but only through a weak reference: a
        # strong closure back onto the node is a reference cycle, which
        # parks whole graphs in the garbage collector's lap
        ref = weakref.ref(out)

        def vjp(g: Tensor):
            o = ref()
            return (mul(g, o if o is not None else exp(a)),)

        out._vjp = vjp
    return out


def sin(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (mul(g, cos(a)),)

    return _make(np.sin(a.data), (a,), vjp)


def cos(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (neg(mul(g, sin(a))),)

    return _make(np.cos(a.data), (a,), vjp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.sqrt(a.data), (a,), None)
    if out._parents:
        ref = weakref.ref(out)  # weak: see exp

        def vjp(g: Tensor):
            o = ref()
            return (div(mul(g, 0.5), o if o is not None else sqrt(a)),)

        out._vjp = vjp
    return out


def square(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor):
        return (mul(mul(g, a), 2.0),)

    return _make(a.data * a.data, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # exp of a non-positive argument cannot overflow; both branches then
    # share the one exp evaluation
    z = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _make(val, (a,), None)
    if out._parents:
        ref = weakref.ref(out)  # weak: see exp

        def vjp(g: Tensor):
            s = ref()
            if s is None:
                s = sigmoid(a)
            return (mul(g, mul(s, sub(1.0, s))),)

        out._vjp = vjp
    return out


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = Tensor((a.data > floor).astype(np.float64))

    def vjp(g: Tensor):
        return (mul(g, mask),)

    return _make(np.maximum(a.data, floor), (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat of an empty sequence")
    nd = parts[0].ndim
    axis = axis % nd
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeError("concat: rank mismatch")
        if any(p.shape[i] != parts[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: off-axis extents differ: {[q.shape for q in parts]}")
    sizes = [p.shape[axis] for p in parts]
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g: Tensor):
        return tuple(slice_axis(g, axis, int(offs[i]), int(offs[i + 1]))
                     for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)

    def vjp(g: Tensor):
        before = list(a.shape)
        before[axis] = start
        after = list(a.shape)
        after[axis] = n - stop
        pieces = []
        if start:
            pieces.append(Tensor(np.zeros(before)))
        pieces.append(g)
        if n - stop:
            pieces.append(Tensor(np.zeros(after)))
        return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)

    return _make(a.data[tuple(idx)].copy(), (a,), vjp)


def _check_index(index: np.ndarray, n: int, opname: str) -> np.ndarray:
    index = np.asarray(index)
    if index.ndim != 1 or not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"{opname}: index must be a 1-D integer array")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"{opname}: index out of range [0, {n})")
    return index


def gather(a, index) -> Tensor:
    """Select rows ``a[index]`` along the leading axis."""
    a = as_tensor(a)
    index = _check_index(index, a.shape[0], "gather")

    def vjp(g: Tensor):
        return (scatter_add(g, index, a.shape[0]),)

    return _make(a.data[index], (a,), vjp)


def _segment_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=np.float64)
    if index.size == 0:
        return out
    if not np.all(index[:-1] <= index[1:]):
        order = np.argsort(index, kind="stable")
        values = values[order]
        index = index[order]
    counts = np.bincount(index, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    nonempty = counts > 0
    out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def scatter_add(a, index, num_rows: int) -> Tensor:
    """Adjoint of gather: accumulate rows of ``a`` into ``num_rows`` slots."""
    a = as_tensor(a)
    index = _check_index(index, num_rows, "scatter_add")
    if index.shape[0] != a.shape[0]:
        raise ShapeError("scatter_add: index length must match leading extent")

    def vjp(g: Tensor):
        return (gather(g, index),)

    return _make(_segment_sum(a.data, index, num_rows), (a,), vjp)


# ---------------------------------------------------------------------------
# composites

def silu(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, sigmoid(a))


def soft_norm(a, axis: int = -1, keepdims: bool = False, eps: float = 0.0) -> Tensor:
    """Euclidean norm along an axis, softened as sqrt(sum(x^2) + eps^2).

    eps > 0 keeps the gradient finite when the vector is exactly zero
    (coincident atoms, e.g. a masked node anchored on its oxygen).
    """
    s = sum_(square(a), axis=axis, keepdims=keepdims)
    if eps:
        s = add(s, eps * eps)
    return sqrt(s)


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return soft_norm(a, axis=axis, keepdims=keepdims, eps=0.0)


# ---------------------------------------------------------------------------
# backward

def _consumed_vjp(_g):
    raise RuntimeError("graph already consumed by a previous backward; "
                       "pass create_graph=True on the first call to keep the tape")


def backward(loss: Tensor, create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Returns a map {leaf tensor -> gradient tensor} over every reachable leaf
    with requires_grad, and populates each such leaf's ``.grad``. With
    ``create_graph=True`` the returned gradients carry history, so they can
    be differentiated again.

    Unless ``create_graph`` is set, the sweep consumes the tape: interior
    nodes drop their parent links as soon as their contribution is
    propagated, so the graph's memory is reclaimed immediately instead of
    lingering until a collector pass. Values are untouched; differentiating
    the same graph a second time needs ``create_graph=True`` on the first
    call, and sweeping a consumed tape raises RuntimeError rather than
    returning silently wrong gradients.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not require grad; nothing to differentiate")

    # collect reachable subgraph; creation ids give a topological order
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    order = sorted(seen.values(), key=lambda t: t._id, reverse=True)
    grads: dict[int, Tensor] = {loss._id: Tensor(np.ones_like(loss.data))}

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in order:
            g = grads.pop(node._id, None)
            if g is None or node._vjp is None:
                if g is not None:
                    grads[node._id] = g
                continue
            parents = node._parents
            parent_grads = node._vjp(g)
            if not create_graph:
                node._parents = ()
                node._vjp = _consumed_vjp
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else add(prev, pg)
    if not create_graph:
        for node in seen.values():
            if node._vjp is not None:
                node._parents = ()
                node._vjp = _consumed_vjp

    result: dict[Tensor, Tensor] = {}
    for nid, g in grads.items():
        node = seen[nid]
        if node._vjp is None and node.requires_grad:
            node.grad = g
            result[node] = g
    return result


# ---------------------------------------------------------------------------
# finite-difference oracle

def finite_difference_gradient(f: Callable[..., float], arrays: Sequence[np.ndarray],
                               h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of numpy arrays."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(f: Callable[..., Tensor], arrays: Sequence[np.ndarray],
              h: float = 1e-5, rtol: float = 1e-5, atol_scale: float = 1e-3) -> float:
    """Compare reverse-mode gradients of f against central differences.

    f maps Tensors to a scalar Tensor. Returns the worst relative error and
    raises AssertionError when it exceeds rtol. The denominator is floored
    at atol_scale so near-zero gradients are compared absolutely.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    backward(out)
    ad = [l.grad.data for l in leaves]

    def fval(*arrs):
        with no_grad():
            return float(f(*[Tensor(a) for a in arrs]).data)

    fd = finite_difference_gradient(fval, arrays, h=h)
    worst = 0.0
    for g_ad, g_fd in zip(ad, fd):
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), atol_scale)
        worst = max(worst, float(np.max(np.abs(g_ad - g_fd) / denom)))
    if worst > rtol:
        raise AssertionError(f"gradient check failed: rel err {worst:.3e} > {rtol:.1e}")
    return worst
