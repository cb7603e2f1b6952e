"""Dense tensors with reverse-mode differentiation.

Every differentiable op builds its output eagerly with numpy and, when any
input requires a gradient, records a closure mapping the output gradient to
input gradients. :func:`backward` linearises the recorded graph into a tape
(reverse topological order) and replays it.

The op set is deliberately closed: exactly what the document encoder,
its visual backbone and its losses need.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("dtype", default=np.float32)

_PRECISIONS = {"single": np.float32, "double": np.float64}


def default_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def precision(mode: str):
    """Run a block in ``"single"`` (float32) or ``"double"`` (float64) mode.

    Double mode exists for gradient checking; training runs in single.
    """
    if mode not in _PRECISIONS:
        raise ContractError(f"unknown precision {mode!r}")
    token = _DTYPE.set(_PRECISIONS[mode])
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (inputs first)."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, store=None, accumulate: bool = False) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    When ``store`` is given its parameters' gradients are reset to zero first
    (unless ``accumulate``), so unreachable parameters end with zero grads.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if store is not None:
        for p in store.values():
            if p.grad is None or not accumulate:
                p.grad = np.zeros_like(p.data)
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (smooth everywhere, so gradient checks are clean)."""
    x2 = x.data * x.data
    t = np.tanh(_GELU_C * x.data * (1.0 + 0.044715 * x2))
    out = 0.5 * x.data * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du),)

    return _result(out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in parts)


def index(x: Tensor, key) -> Tensor:
    basic = _is_basic_key(key)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] += g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def scatter_rows(shape, rows: np.ndarray, values: np.ndarray, dtype) -> np.ndarray:
    """``out[rows[k]] += values[k]`` with a fixed summation order (sort, then segment sums);
    much faster than ``np.add.at`` for many repeated rows."""
    out = np.zeros(shape, dtype=dtype)
    if rows.size == 0:
        return out
    order = np.argsort(rows, kind="stable")
    uniq, starts = np.unique(rows[order], return_index=True)
    out[uniq] += np.add.reduceat(values[order], starts, axis=0)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; the gradient scatters back into looked-up rows only."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding index out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    width = table.shape[1:]

    def bw(g):
        return (scatter_rows(table.shape, ids.reshape(-1), g.reshape((-1,) + width), table.dtype),)

    return _result(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise ContractError("softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(x.data).any():
        raise ContractError("log_softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(0)
        gb = g.reshape(-1, n).sum(0)
        return gx, gg, gb

    return _result(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> tuple[Tensor, int]:
    """Mean cross-entropy over rows whose target != ``ignore_index``.

    Returns ``(loss, count)``; with no labelled rows the loss is a constant 0.
    """
    targets = np.asarray(targets).reshape(-1)
    flat = logits.data.reshape(-1, logits.shape[-1])
    valid = targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.dtype)), 0
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / count

    def bw(g):
        p = np.exp(logp)
        p[rows, targets[rows]] -= 1.0
        p[~valid] = 0.0
        return ((p * (g / count)).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw), count


def bce_with_logits(logits: Tensor, targets, mask=None) -> tuple[Tensor, int]:
    """Mean binary cross-entropy over entries where ``mask`` is true."""
    x = logits.data
    t = np.asarray(targets, dtype=x.dtype).reshape(x.shape)
    m = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(x.shape)
    count = int(m.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=x.dtype)), 0
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    loss = (per * m).sum() / count

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        return ((sig - t) * m * (g / count),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), bw), count


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``x``: (B, C, H, W); ``weight``: (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d shapes incompatible: {x.shape} and {weight.shape}")
    bsz, cin, _, _ = x.shape
    cout, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]  # (B, C, ho, wo, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:hp - padding, padding:wp - padding]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, bw)


def pad_edge(x: Tensor, p: int) -> Tensor:
    """Replicate-pad the last two axes by ``p``; a constant input stays constant."""
    if p == 0:
        return x
    H, W = x.shape[-2:]

    def fold(g, axis, n):
        g = np.moveaxis(g, axis, -1)
        out = g[..., p:p + n].copy()
        out[..., 0] += g[..., :p].sum(-1)
        out[..., -1] += g[..., p + n:].sum(-1)
        return np.moveaxis(out, -1, axis)

    def bw(g):
        return (fold(fold(g, -2, H), -1, W),)

    widths = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return _result(np.pad(x.data, widths, mode="edge"), (x,), bw)


def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


def adaptive_avg_pool2d(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average-pool (B, C, H, W) to (B, C, out_h, out_w) with floor/ceil bin edges."""
    rows = _bins(x.shape[2], out_h)
    cols = _bins(x.shape[3], out_w)
    out = np.empty(x.shape[:2] + (out_h, out_w), dtype=x.dtype)
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            out[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bw(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                area = (r1 - r0) * (c1 - c0)
                gx[:, :, r0:r1, c0:c1] += (g[:, :, i, j] / area)[:, :, None, None]
        return (gx,)

    return _result(out, (x,), bw)

