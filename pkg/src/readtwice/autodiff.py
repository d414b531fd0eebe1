"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array. Every differentiable operation is a small
:class:`Op` subclass registered in :data:`OPS`; calling an op records a node
holding references to its inputs, and :meth:`Tensor.backward` walks the graph
in reverse topological order (the tape) accumulating gradients.

Training runs in float32; gradient checks switch the default dtype to float64
with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Op",
    "OPS",
    "tensor",
    "zeros",
    "precision",
    "get_default_dtype",
    "no_grad",
    "grad_enabled",
    "matmul",
    "softmax",
    "log_softmax",
    "logsumexp",
    "layer_norm",
    "gelu",
    "sigmoid",
    "concat",
    "stack",
    "where",
    "dropout",
    "topo_order",
]

_state = threading.local()


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype="float64"):
    """Temporarily change the dtype used for newly created tensors."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def _as_array(x, dtype=None) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind in "fc" or arr.dtype.kind in "iub":
        return arr.astype(get_default_dtype(), copy=False)
    return arr


class Tensor:
    """A dense array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._op: Op | None = None
        self._ctx: dict | None = None
        self.name = name

    # -- basic introspection -------------------------------------------------
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

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- backward ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = node._op.backward(node._ctx, g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------------
    def __add__(self, other):
        return OPS["add"](self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return OPS["sub"](self, other)

    def __rsub__(self, other):
        return OPS["sub"](other, self)

    def __mul__(self, other):
        return OPS["mul"](self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return OPS["div"](self, other)

    def __rtruediv__(self, other):
        return OPS["div"](other, self)

    def __neg__(self):
        return OPS["mul"](self, -1.0)

    def __pow__(self, exponent: float):
        return OPS["pow"](self, exponent=float(exponent))

    def __matmul__(self, other):
        return OPS["matmul"](self, other)

    def __getitem__(self, index):
        return OPS["getitem"](self, index=index)

    def sum(self, axis=None, keepdims=False):
        return OPS["sum"](self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / max(int(n), 1))

    def exp(self):
        return OPS["exp"](self)

    def log(self):
        return OPS["log"](self)

    def tanh(self):
        return OPS["tanh"](self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return OPS["reshape"](self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return OPS["transpose"](self, axes=axes or None)

    @property
    def T(self):
        return self.transpose()


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=requires_grad, name=name)


def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each placed after all of its inputs."""
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


# ---------------------------------------------------------------------------
# op machinery
# ---------------------------------------------------------------------------

OPS: dict[str, Op] = {}


class Op:
    """A differentiable primitive.

    ``forward(ctx, *arrays, **kw)`` returns the output array and may stash
    whatever the backward rule needs in ``ctx``. ``backward(ctx, grad)`` returns
    one gradient (or None) per tensor input.
    """

    name = ""

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.name:
            OPS[cls.name] = cls()

    def forward(self, ctx, *arrays, **kw):  # pragma: no cover - interface
        raise NotImplementedError

    def backward(self, ctx, grad):  # pragma: no cover - interface
        raise NotImplementedError

    def __call__(self, *inputs, **kw) -> Tensor:
        tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
        ctx: dict = {}
        out = Tensor(self.forward(ctx, *(t.data for t in tensors), **kw))
        if grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._parents = tensors
            out._op = self
            out._ctx = ctx
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Op):
    name = "add"

    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    def backward(self, ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Op):
    name = "sub"

    def forward(self, ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    def backward(self, ctx, grad):
        sa, sb = ctx["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Op):
    name = "mul"

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    def backward(self, ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Div(Op):
    name = "div"

    def forward(self, ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a / b

    def backward(self, ctx, grad):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)


class Pow(Op):
    name = "pow"

    def forward(self, ctx, a, exponent):
        ctx["a"], ctx["p"] = a, exponent
        return a**exponent

    def backward(self, ctx, grad):
        a, p = ctx["a"], ctx["p"]
        return (grad * p * a ** (p - 1),)


class MatMul(Op):
    name = "matmul"

    def forward(self, ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    def backward(self, ctx, grad):
        a, b = ctx["a"], ctx["b"]
        ga = grad @ np.swapaxes(b, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one contraction
            gb = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            gb = np.swapaxes(a, -1, -2) @ grad
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Exp(Op):
    name = "exp"

    def forward(self, ctx, a):
        out = np.exp(a)
        ctx["out"] = out
        return out

    def backward(self, ctx, grad):
        return (grad * ctx["out"],)


class Log(Op):
    name = "log"

    def forward(self, ctx, a):
        ctx["a"] = a
        return np.log(a)

    def backward(self, ctx, grad):
        return (grad / ctx["a"],)


class Tanh(Op):
    name = "tanh"

    def forward(self, ctx, a):
        out = np.tanh(a)
        ctx["out"] = out
        return out

    def backward(self, ctx, grad):
        return (grad * (1.0 - ctx["out"] * ctx["out"]),)


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, ctx, a):
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        ctx["out"] = out
        return out

    def backward(self, ctx, grad):
        s = ctx["out"]
        return (grad * s * (1.0 - s),)


_GELU_C = float(np.sqrt(2.0 / np.pi))


class Gelu(Op):
    """Tanh approximation of GELU."""

    name = "gelu"

    def forward(self, ctx, a):
        a2 = a * a
        inner = _GELU_C * (a + 0.044715 * a2 * a)
        t = np.tanh(inner)
        ctx["a"], ctx["t"] = a, t
        return 0.5 * a * (1.0 + t)

    def backward(self, ctx, grad):
        a, t = ctx["a"], ctx["t"]
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        d = 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * dinner
        return (grad * d,)


class Sum(Op):
    name = "sum"

    def forward(self, ctx, a, axis=None, keepdims=False):
        ctx["shape"], ctx["axis"], ctx["keepdims"] = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, ctx, grad):
        shape, axis, keepdims = ctx["shape"], ctx["axis"], ctx["keepdims"]
        if axis is not None and not keepdims:
            axes = tuple(ax % len(shape) for ax in np.atleast_1d(axis))
            grad = np.expand_dims(grad, axes)
        return (np.broadcast_to(grad, shape).copy(),)


class Reshape(Op):
    name = "reshape"

    def forward(self, ctx, a, shape):
        ctx["shape"] = a.shape
        return a.reshape(shape)

    def backward(self, ctx, grad):
        return (grad.reshape(ctx["shape"]),)


class Transpose(Op):
    name = "transpose"

    def forward(self, ctx, a, axes=None):
        axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
        ctx["axes"] = axes
        return np.transpose(a, axes)

    def backward(self, ctx, grad):
        return (np.transpose(grad, np.argsort(ctx["axes"])),)


class GetItem(Op):
    """Basic or advanced indexing; the backward pass scatter-adds."""

    name = "getitem"

    def forward(self, ctx, a, index):
        ctx["shape"], ctx["index"], ctx["dtype"] = a.shape, index, a.dtype
        return np.array(a[index])

    def backward(self, ctx, grad):
        out = np.zeros(ctx["shape"], dtype=grad.dtype)
        np.add.at(out, ctx["index"], grad)
        return (out,)


class Concat(Op):
    name = "concat"

    def forward(self, ctx, *arrays, axis=0):
        ctx["sizes"] = [x.shape[axis] for x in arrays]
        ctx["axis"] = axis
        return np.concatenate(arrays, axis=axis)

    def backward(self, ctx, grad):
        cuts = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(grad, cuts, axis=ctx["axis"]))


class Stack(Op):
    name = "stack"

    def forward(self, ctx, *arrays, axis=0):
        ctx["axis"], ctx["n"] = axis, len(arrays)
        return np.stack(arrays, axis=axis)

    def backward(self, ctx, grad):
        return tuple(np.moveaxis(grad, ctx["axis"], 0))


class Where(Op):
    """``where(cond, a, b)`` with a constant boolean condition."""

    name = "where"

    def forward(self, ctx, a, b, cond):
        ctx["cond"], ctx["shapes"] = cond, (a.shape, b.shape)
        return np.where(cond, a, b)

    def backward(self, ctx, grad):
        cond = ctx["cond"]
        sa, sb = ctx["shapes"]
        return (
            _unbroadcast(np.where(cond, grad, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, grad), sb),
        )


def _masked(x: np.ndarray, mask) -> np.ndarray:
    if mask is None:
        return x
    return np.where(mask, x, -np.inf)


class Softmax(Op):
    """Max-stabilized softmax. Positions where ``mask`` is False get probability 0."""

    name = "softmax"

    def forward(self, ctx, a, axis=-1, mask=None):
        z = _masked(a, mask)
        m = np.max(z, axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ValueError("softmax over a fully masked slice")
        e = np.exp(z - m)
        out = e / e.sum(axis=axis, keepdims=True)
        ctx["out"], ctx["axis"] = out, axis
        return out

    def backward(self, ctx, grad):
        y, axis = ctx["out"], ctx["axis"]
        return (y * (grad - (grad * y).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Op):
    name = "log_softmax"

    def forward(self, ctx, a, axis=-1, mask=None):
        z = _masked(a, mask)
        m = np.max(z, axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ValueError("log_softmax over a fully masked slice")
        shifted = z - m
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        ctx["p"] = np.exp(out)
        ctx["axis"], ctx["mask"] = axis, mask
        if mask is not None:
            # keep masked entries finite so downstream arithmetic stays clean
            out = np.where(mask, out, 0.0)
        return out

    def backward(self, ctx, grad):
        p, axis, mask = ctx["p"], ctx["axis"], ctx["mask"]
        if mask is not None:
            grad = np.where(mask, grad, 0.0)
        return (grad - p * grad.sum(axis=axis, keepdims=True),)


class LogSumExp(Op):
    name = "logsumexp"

    def forward(self, ctx, a, axis=None, mask=None):
        z = _masked(a, mask)
        m = np.max(z, axis=axis, keepdims=True)
        if not np.all(np.isfinite(m)):
            raise ValueError("logsumexp over an empty or fully masked slice")
        e = np.exp(z - m)
        s = e.sum(axis=axis, keepdims=True)
        ctx["p"], ctx["axis"], ctx["shape"] = e / s, axis, a.shape
        out = np.log(s) + m
        return out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def backward(self, ctx, grad):
        p, axis = ctx["p"], ctx["axis"]
        g = np.asarray(grad)
        if axis is None:
            g = g.reshape((1,) * p.ndim)
        else:
            g = np.expand_dims(g, axis)
        return (g * p,)


class LayerNormOp(Op):
    """Normalize over the last axis, then scale and shift."""

    name = "layer_norm"

    def forward(self, ctx, x, gamma, beta, eps=1e-12):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        ctx["xhat"], ctx["inv"], ctx["gamma"] = xhat, inv, gamma
        return xhat * gamma + beta

    def backward(self, ctx, grad):
        xhat, inv, gamma = ctx["xhat"], ctx["inv"], ctx["gamma"]
        red = tuple(range(grad.ndim - 1))
        dgamma = (grad * xhat).sum(axis=red)
        dbeta = grad.sum(axis=red)
        gx = grad * gamma
        n = xhat.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True) - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    return OPS["matmul"](a, b)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    return OPS["softmax"](x, axis=axis, mask=mask)


def log_softmax(x, axis: int = -1, mask=None) -> Tensor:
    return OPS["log_softmax"](x, axis=axis, mask=mask)


def logsumexp(x, axis=None, mask=None) -> Tensor:
    return OPS["logsumexp"](x, axis=axis, mask=mask)


def layer_norm(x, gamma, beta, eps: float = 1e-12) -> Tensor:
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty normalization axis")
    return OPS["layer_norm"](x, gamma, beta, eps=eps)


def gelu(x) -> Tensor:
    return OPS["gelu"](x)


def sigmoid(x) -> Tensor:
    return OPS["sigmoid"](x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return OPS["concat"](*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return OPS["stack"](*tensors, axis=axis)


def where(cond, a, b) -> Tensor:
    return OPS["where"](a, b, cond=np.asarray(cond, dtype=bool))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep

