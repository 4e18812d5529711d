"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous row-major numpy buffer. Differentiable ops
record a node (parents + backward closure) on the implicit tape; calling
``backward()`` on a scalar replays the graph in reverse topological order
and accumulates gradients into every tensor with ``requires_grad``.

Broadcasting follows the numpy rule: shapes are right-aligned and axes of
extent 1 (or missing leading axes) stretch to match. Backward passes sum
gradients over the stretched axes, so ``shape(op(a, b))`` is a pure
function of the input shapes.

Gradient policy: ``backward()`` may be called more than once on the same
graph; each call re-runs the recorded closures, which are deterministic,
so repeated passes (after zeroing grads) are bit-identical. Gradients
accumulate, callers zero them between optimization steps.
"""

from __future__ import annotations

import contextlib

import numpy as np

_default_dtype = np.float32
_grad_enabled = True
_finite_checks = False

# Test hook: name of an op whose backward rule is sign-flipped, used by the
# gradcheck sabotage test to prove the checker catches a wrong rule.
_sabotaged_op: str | None = None


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def set_finite_checks(enabled: bool) -> None:
    """When enabled, every op output is checked for NaN/Inf and raises."""
    global _finite_checks
    _finite_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure numerical forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def default_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf, or a numerical check failed."""


def broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Shape of a broadcast binary op; raises ValueError if incompatible."""
    out = []
    for a, b in zip((1,) * (len(sb) - len(sa)) + tuple(sa),
                    (1,) * (len(sa) - len(sb)) + tuple(sb)):
        if a != b and a != 1 and b != 1:
            raise ValueError(f"shapes {sa} and {sb} are not broadcastable")
        out.append(max(a, b))
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were stretched to reach its current shape."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional array participating in the reverse-mode tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dt = dtype if dtype is not None else _default_dtype
        arr = np.asarray(data, dtype=dt)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data: np.ndarray = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self.op = "leaf"

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag}, op={self.op})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> "Tensor":
        if _finite_checks and not np.all(np.isfinite(data)):
            raise NumericalError(f"non-finite values produced by op '{op}'")
        out = Tensor.__new__(Tensor)
        data = np.asarray(data)
        out.data = np.ascontiguousarray(data) if data.ndim else data
        out.grad = None
        needs = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out.op = op
        if needs:
            out._parents = parents
            if _sabotaged_op == op:
                orig = backward_fn
                backward_fn = lambda g: tuple(
                    None if gi is None else -gi for gi in orig(g))
            out._backward_fn = backward_fn
        else:
            out._parents = ()
            out._backward_fn = None
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of self w.r.t. every requires_grad tensor.

        ``self`` must be scalar unless an explicit seed gradient is given.
        """
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient requires a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ValueError("seed gradient shape mismatch")

        # Iterative topological order (inputs before consumers).
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        flowing: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                # leaf: this is where gradients land
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    # method forms used throughout the package
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def flip(self, axis=0):
        return flip(self, axis)

    def take(self, indices, axis=0):
        return take(self, indices, axis)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.data.dtype != b.data.dtype:
            raise TypeError(
                f"mixed dtypes {a.data.dtype}/{b.data.dtype}; convert explicitly")
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b), b


# -- elementwise binary ops ----------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)), "mul")


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return Tensor._make(
        ad / bd, (a, b),
        lambda g: (_unbroadcast(g / bd, sa),
                   _unbroadcast(-g * ad / (bd * bd), sb)), "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p) -> Tensor:
    """Elementwise a**p for a scalar (non-tensor) exponent."""
    p = float(p)
    ad = a.data
    out = ad ** p
    return Tensor._make(out, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


# -- elementwise unary ops -------------------------------------------------


def texp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._make(e, (a,), lambda g: (g * e,), "exp")


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tsqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return Tensor._make(r, (a,), lambda g: (g * 0.5 / r,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(
        np.where(mask, a.data, 0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # stable in both tails
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    ad = a.data
    return Tensor._make(
        ad * s, (a,), lambda g: (g * (s * (1.0 + ad * (1.0 - s))),), "silu")


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0.0, ad)
    s = _sigmoid(ad)
    return Tensor._make(out, (a,), lambda g: (g * s,), "softplus")


# -- matmul and reductions ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad @ bd, (a, b),
        lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=False).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[i] for i in axis]))

    def bwd(g):
        if axis is None:
            gx = g
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / count, shape).copy(),)

    return Tensor._make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd, "mean")


def tmax_detached(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max as a constant (no gradient); used only for numerical shifts."""
    return Tensor(a.data.max(axis=axis, keepdims=keepdims), dtype=a.data.dtype)


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    return Tensor._make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(
        a.data.transpose(axes), (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def flip(a: Tensor, axis: int = 0) -> Tensor:
    return Tensor._make(
        np.flip(a.data, axis=axis).copy(), (a,),
        lambda g: (np.flip(g, axis=axis).copy(),), "flip")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along an axis; backward scatter-adds (handles repeats)."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    shape = a.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return Tensor._make(np.take(a.data, idx, axis=axis), (a,), bwd, "take")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors), bwd, "concat")


# -- composed ops ----------------------------------------------------------


def softmax(a: Tensor, axis: int = 0) -> Tensor:
    shifted = sub(a, tmax_detached(a, axis=axis, keepdims=True))
    e = texp(shifted)
    return div(e, tsum(e, axis=axis, keepdims=True))


def log_softmax(a: Tensor, axis: int = 0) -> Tensor:
    shifted = sub(a, tmax_detached(a, axis=axis, keepdims=True))
    return sub(shifted, tlog(tsum(texp(shifted), axis=axis, keepdims=True)))


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along `axis` (no affine)."""
    mu = tmean(a, axis=axis, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axis=axis, keepdims=True)
    return div(centered, tsqrt(add(var, eps)))


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)
