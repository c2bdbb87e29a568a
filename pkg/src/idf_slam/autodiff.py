"""Reverse-mode automatic differentiation on dense numpy arrays.

A small tape-based engine: every operation on :class:`Tensor` records its
parents and a closure that propagates the incoming gradient to them.
``backward()`` on a scalar loss walks the tape in reverse topological order
and accumulates ``d(loss)/d(x)`` into every reachable tensor that has
``requires_grad`` set.

The engine computes in 32-bit floats by default; gradient-check tests switch
to 64-bit through :func:`set_default_dtype` / :func:`using_dtype`.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

# Floor used inside sqrt/normalisation backward passes so that gradients stay
# finite when the forward value touches zero.
_SQRT_GUARD = 1e-12


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def using_dtype(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; operations run as plain numpy."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A dense array plus an optional slot on the gradient tape.

    ``data`` is always a numpy array; ``grad`` is filled in (or accumulated
    into) by :func:`backward`. Tensors produced by operations inherit
    ``requires_grad`` from their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- gradient accumulation -----------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- operator sugar --------------------------------------------------------

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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def as_tensor(value, dtype=None) -> Tensor:
    """Wrap ``value`` as a constant Tensor unless it already is one."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** exponent

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            # guard keeps the gradient finite when the argument touches 0
            a._accumulate(g * 0.5 / np.sqrt(np.maximum(a.data, _SQRT_GUARD)))

    return _make(out_data, (a,), backward)


def sin(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sin(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.cos(a.data))

    return _make(out_data, (a,), backward)


def cos(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.cos(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g * np.sin(a.data))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0))

    return _make(out_data, (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    return _make(out_data, (a,), backward)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, ``b`` elsewhere.

    ``mask`` is a plain boolean array (not differentiated through).
    """
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.where(mask, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * mask, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~mask, b.shape))

    return _make(out_data, (a, b), backward)


# -- linear algebra and reductions ---------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data
    a_vec = a.data.ndim == 1
    b_vec = b.data.ndim == 1

    def backward(g):
        # promote 1-D operands to row/column matrices so the matrix rule applies
        gm = np.asarray(g)
        if a_vec and b_vec:
            gm = gm.reshape((1, 1))
        elif a_vec:
            gm = np.expand_dims(gm, -2)
        elif b_vec:
            gm = np.expand_dims(gm, -1)
        a2 = a.data[None, :] if a_vec else a.data
        b2 = b.data[:, None] if b_vec else b.data
        if a.requires_grad:
            ga = gm @ b2.swapaxes(-1, -2)
            if a_vec:
                ga = ga[..., 0, :]
                while ga.ndim > 1:
                    ga = ga.sum(axis=0)
            elif ga.shape != a.shape:
                ga = _unbroadcast(ga, a.shape)
            a._accumulate(ga)
        if b.requires_grad:
            gb = a2.swapaxes(-1, -2) @ gm
            if b_vec:
                gb = gb[..., 0]
                while gb.ndim > 1:
                    gb = gb.sum(axis=0)
            elif gb.shape != b.shape:
                gb = _unbroadcast(gb, b.shape)
            b._accumulate(gb)

    return _make(out_data, (a, b), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        g_arr = np.asarray(g)
        if axis is None:
            a._accumulate(np.broadcast_to(g_arr, a.shape))
        else:
            if not keepdims:
                g_arr = np.expand_dims(g_arr, axis)
            a._accumulate(np.broadcast_to(g_arr, a.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.shape[ax] for ax in axis]))
    else:
        n = a.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.transpose(axes) if axes is not None else a.data.T

    def backward(g):
        if a.requires_grad:
            if axes is None:
                a._accumulate(g.T)
            else:
                a._accumulate(g.transpose(np.argsort(axes)))

    return _make(out_data, (a,), backward)


def take(a, index) -> Tensor:
    """Index / gather with a constant index (slices or integer arrays)."""
    a = as_tensor(a)
    out_data = a.data[index]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, index, g)
            a._accumulate(ga)

    return _make(out_data, (a,), backward)


def concatenate(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(parts), backward)


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def backward(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(np.take(g, i, axis=axis))

    return _make(out_data, tuple(parts), backward)


def rotation_from_covariance(m) -> Tensor:
    """Closest rotation (proper orthogonal) to a 3x3 cross-covariance matrix.

    Forward: SVD ``m = U S V^T`` and ``R = U diag(1, 1, det(U V^T)) V^T``.
    Backward: the incoming gradient on R is pulled back through the SVD; the
    pairwise singular-value denominators are clamped so near-degenerate
    spectra do not blow up.
    """
    m = as_tensor(m)
    if m.shape != (3, 3):
        raise ContractViolation(f"expected a 3x3 matrix, got shape {m.shape}")
    u, s, vt = np.linalg.svd(m.data.astype(np.float64))
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(u @ vt))
    if d[2] == 0.0:
        d[2] = 1.0
    r = (u * d) @ vt
    out_data = r.astype(m.dtype, copy=False)

    def backward(g):
        if not m.requires_grad:
            return
        ghat = u.T @ np.asarray(g, dtype=np.float64) @ vt.T
        sd = s * d
        # denom[i, j] = s_j^2 - s_i^2, clamped away from zero so a (near-)
        # degenerate spectrum yields a large but finite gradient
        denom = s[None, :] ** 2 - s[:, None] ** 2
        tiny = 1e-12 * max(float(s[0] ** 2), 1.0)
        denom = np.where(np.abs(denom) < tiny, np.where(denom < 0, -tiny, tiny), denom)
        gp = (ghat * (sd[None, :] - sd[:, None])
              + ghat.T * (s[:, None] * d[None, :] - s[None, :] * d[:, None])) / denom
        np.fill_diagonal(gp, 0.0)
        gm = u @ gp @ vt
        m._accumulate(gm.astype(m.dtype, copy=False))

    return _make(out_data, (m,), backward)


# -- backward driver -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative DFS postorder: every node appears after all of its parents.

    Nodes are marked visited when expanded, not when first discovered; marking
    at discovery lets a node reached through a second consumer finish before a
    parent that is still pending on the stack, which breaks the ordering.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(x) into every reachable tensor with requires_grad.

    Repeated backward calls (from fresh forward passes) without
    :meth:`Tensor.zero_grad` in between add up, which is what gradient
    accumulation over several sub-batches relies on. The tape of ``loss`` is
    released afterwards, so a graph can only be walked once.
    """
    if loss.size != 1:
        raise ContractViolation(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractViolation("loss does not require grad; no tape was recorded")
    if loss._backward is None:
        raise ContractViolation("loss has no tape (it is a leaf, or backward already ran)")
    order = _topo_order(loss)
    seed: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = seed.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        _propagate(node, g, seed)
    for node in order:
        if node._parents:
            node._backward = None
            node._parents = ()


def _propagate(node: Tensor, g: np.ndarray, seed: dict[int, np.ndarray]) -> None:
    # The op closures accumulate into parent .grad slots. Route intermediate
    # contributions through the per-walk seed dict instead, so only leaves
    # keep gradients after backward; parent lists are deduplicated so ops
    # like mul(x, x) do not re-route a stale leaf gradient.
    unique = list({id(p): p for p in node._parents}.values())
    saved = [(p, p.grad) for p in unique]
    for p, _ in saved:
        p.grad = None
    node._backward(g)
    for p, old in saved:
        contributed = p.grad
        p.grad = old
        if contributed is None:
            continue
        if p._parents:
            key = id(p)
            if key in seed:
                seed[key] = seed[key] + contributed
            else:
                seed[key] = contributed
        elif p.requires_grad:
            p._accumulate(contributed)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
