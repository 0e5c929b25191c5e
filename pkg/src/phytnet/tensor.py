"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that
require gradients records a closure that maps the output gradient to input
gradients; :func:`backward` replays those closures in reverse topological
order.

Gradients accumulate on leaves (and on tensors marked with
:meth:`Tensor.retain_grad`) until :meth:`Tensor.zero_grad` is called, so two
``backward`` calls on the same graph add up.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import NumericalError, UsageError

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation, metrics)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        if isinstance(data, (np.ndarray, np.floating)) and np.issubdtype(data.dtype, np.floating):
            return np.asarray(data)
        dtype = DEFAULT_DTYPE
    return np.asarray(data, dtype=dtype)


def check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        bad = int(arr.size - np.isfinite(arr).sum())
        raise NumericalError(f"{op}: forward produced {bad} non-finite value(s)")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_retain", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._retain = False
        self.name = name

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of a non-leaf tensor after :func:`backward`."""
        self._retain = True
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return make(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return _lift(other, self.dtype) - self

    def __neg__(self):
        return make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.dtype)
        a, b = self, other

        def bw(g):
            ga = g / b.data
            return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

        return make(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return _lift(other, self.dtype) / self

    def __pow__(self, p: float):
        if isinstance(p, Tensor):
            raise UsageError("tensor exponents are not supported")
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return make(a.data**p, (a,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ---------------------------------------------------------------

    def exp(self):
        out = np.exp(self.data)
        return make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def abs(self):
        a = self
        # subgradient sign(x), 0 at x == 0
        return make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).astype(a.dtype),)

        return make(out, (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else int(np.prod([self.shape[i] for i in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")

    def __getitem__(self, idx):
        a = self

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return make(a.data[idx], (a,), bw, "getitem")


def _raise_item(t: Tensor):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def make(data: np.ndarray, parents: tuple, backward_fn, op: str = "op") -> Tensor:
    """Create an op output, recording ``backward_fn`` if any parent needs grads.

    ``backward_fn(g)`` returns one gradient (or None) per parent.
    """
    check_finite(data, op)
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make(a.data @ b.data, (a, b), bw, "matmul")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss is not connected to any tensor that requires grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def finite_diff_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps tensors to a scalar tensor and must read ``x`` (and nothing
    that changes between calls). The error per element is
    ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if not (x.data.flags.c_contiguous and x.data.flags.writeable):
        x.data = x.data.copy()
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data, dtype=np.float64) if x.grad is None else x.grad.astype(np.float64)
    x.zero_grad()

    numeric = np.empty_like(analytic)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data.reshape(-1)[0])
            flat[i] = orig - eps
            fm = float(f(x).data.reshape(-1)[0])
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
