"""Small reverse-mode autodiff over dense float64 arrays of rank <= 3.

Graphs are built define-by-run: every op returns a new :class:`Tensor` that
remembers its parents and a closure pushing gradients back to them. A
"graph" in the functional API (:func:`forward`, :func:`backward`,
:func:`grad_check`) is any callable mapping a dict of named leaf tensors to
an output tensor.

Broadcasting is deliberately absent. The only implicit mixing of shapes is a
Python scalar times a tensor; bias rows and per-sequence vectors go through
the explicit :func:`add_bias` and :func:`expand_frames` ops.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "ShapeError", "no_grad", "is_grad_enabled",
    "tensor", "const", "add", "sub", "mul", "div", "neg", "scale", "matmul",
    "transpose", "concat", "slice_", "reshape", "sum_", "mean", "softmax",
    "layernorm", "gelu", "exp", "sqrt", "clip", "minimum", "squared_error",
    "frob_norm", "add_bias", "expand_frames", "embedding", "split_heads",
    "merge_heads", "forward", "backward", "grad_check",
]

MAX_RANK = 3
LAYERNORM_EPS = 1e-5

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording parents (inference fast path)."""
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
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite entries in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed_grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if seed_grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed_grad needs a scalar output")
            seed_grad = np.ones_like(self.data)
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != self.shape:
            raise ShapeError(f"seed_grad shape {seed_grad.shape} != output shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            order.append(node)
            stack.extend(node._parents)
        # parents always carry a smaller id than their children
        order.sort(key=lambda n: n._id, reverse=True)

        grads: dict[int, np.ndarray] = {self._id: seed_grad}
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                prev = grads.get(parent._id)
                grads[parent._id] = pg if prev is None else prev + pg


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def const(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    q = a.data / b.data
    return _make(q, (a, b), lambda g: (g / b.data, -g * q / b.data))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = const(a), const(b)
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a))


def squared_error(a, b) -> Tensor:
    a, b = const(a), const(b)
    _same_shape(a, b, "squared_error")
    d = a.data - b.data
    return _make(d * d, (a, b), lambda g: (2 * g * d, -2 * g * d))


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    k = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = np.tanh(k * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = k * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _make(out, (a,), bw)


# --- structural ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), (B,m,k)@(k,n) or (B,m,k)@(B,k,n)."""
    a, b = const(a), const(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batch mismatch {a.shape} @ {b.shape}")
    A, Bm = a.data, b.data
    flat = A.ndim == 3 and Bm.ndim == 2
    if flat:
        # one large GEMM instead of a batched loop
        out = (A.reshape(-1, A.shape[-1]) @ Bm).reshape(A.shape[:-1] + (Bm.shape[-1],))
    else:
        out = A @ Bm

    def bw(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ Bm.T).reshape(A.shape)
            gb = A.reshape(-1, A.shape[-1]).T @ g2
        else:
            ga = g @ np.swapaxes(Bm, -1, -2)
            gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if len(shape) > MAX_RANK:
        raise ShapeError(f"reshape to rank {len(shape)} exceeds {MAX_RANK}")
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [const(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in ts]}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for extent {n}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), bw)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    src = a.shape
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    ax = axis % a.ndim
    return _make(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), src).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), bw)


def layernorm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalise over the last axis. Constant rows map to exactly zero before the affine."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    d = x.shape[-1]

    def bw_norm(g):
        return (inv * (g - g.mean(axis=-1, keepdims=True)
                       - xhat * (g * xhat).mean(axis=-1, keepdims=True)),)

    out = _make(xhat, (a,), bw_norm)
    if gain is not None:
        if gain.shape != (d,):
            raise ShapeError(f"layernorm gain shape {gain.shape} != ({d},)")
        out = _mul_row(out, gain)
    if bias is not None:
        out = add_bias(out, bias)
    return out


def _mul_row(a: Tensor, w: Tensor) -> Tensor:
    lead = tuple(range(a.ndim - 1))
    return _make(a.data * w.data, (a, w),
                 lambda g: (g * w.data, (g * a.data).sum(axis=lead)))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a vector of shape (d,) to every row of ``a`` (last axis d)."""
    b = const(b)
    if b.ndim != 1 or b.shape[0] != a.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} vs input {a.shape}")
    lead = tuple(range(a.ndim - 1))
    return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))


def expand_frames(a: Tensor, n_frames: int) -> Tensor:
    """(B, d) -> (B, n_frames, d) by repetition along a new frame axis."""
    if a.ndim != 2:
        raise ShapeError("expand_frames expects (B, d)")
    data = np.repeat(a.data[:, None, :], n_frames, axis=1)
    return _make(data, (a,), lambda g: (g.sum(axis=1),))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim + 1 > MAX_RANK:
        raise ShapeError("embedding ids rank too large")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")
    n, d = table.shape

    def bw(g):
        gt = np.zeros((n, d))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


def split_heads(a: Tensor, n_heads: int) -> Tensor:
    """(B, T, H*dh) -> (B*H, T, dh)."""
    B, T, C = a.shape
    if C % n_heads:
        raise ShapeError("channels not divisible by heads")
    dh = C // n_heads
    out = a.data.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3).reshape(B * n_heads, T, dh)

    def bw(g):
        return (g.reshape(B, n_heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, C),)

    return _make(out, (a,), bw)


def merge_heads(a: Tensor, n_heads: int) -> Tensor:
    """(B*H, T, dh) -> (B, T, H*dh); inverse of :func:`split_heads`."""
    BH, T, dh = a.shape
    if BH % n_heads:
        raise ShapeError("leading extent not divisible by heads")
    B = BH // n_heads
    out = a.data.reshape(B, n_heads, T, dh).transpose(0, 2, 1, 3).reshape(B, T, n_heads * dh)

    def bw(g):
        return (g.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3).reshape(BH, T, dh),)

    return _make(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("sqrt needs positive input")
    r = np.sqrt(a.data)
    return _make(r, (a,), lambda g: (g * 0.5 / r,))


def frob_norm(a: Tensor) -> Tensor:
    n = float(np.sqrt((a.data * a.data).sum()))
    if n == 0.0:
        return _make(np.asarray(0.0), (a,), lambda g: (np.zeros_like(a.data),))
    return _make(np.asarray(n), (a,), lambda g: (g * a.data / n,))


# --- functional API --------------------------------------------------------

Graph = Callable[[Mapping[str, Tensor]], Tensor]


def _leaves(bindings: Mapping[str, np.ndarray], requires_grad: bool) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad, name=k)
            for k, v in bindings.items()}


def forward(graph: Graph, bindings: Mapping[str, np.ndarray]) -> Tensor:
    """Evaluate ``graph`` on copies of ``bindings``; the inputs are never mutated."""
    return graph(_leaves(bindings, requires_grad=False))


def backward(graph: Graph, bindings: Mapping[str, np.ndarray],
             seed_grad: np.ndarray | None = None) -> dict[str, np.ndarray]:
    leaves = _leaves(bindings, requires_grad=True)
    out = graph(leaves)
    out.backward(seed_grad)
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def grad_check(graph: Graph, bindings: Mapping[str, np.ndarray], fd_step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients."""
    analytic = backward(graph, bindings)
    work = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    worst = 0.0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + fd_step
            fp = forward(graph, work).item()
            flat[i] = orig - fd_step
            fm = forward(graph, work).item()
            flat[i] = orig
            fd = (fp - fm) / (2 * fd_step)
            err = abs(ga[i] - fd) / max(abs(ga[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
