"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation builds its output eagerly and records a closure that maps the
output gradient to the gradients of its parents.  ``backward`` walks the
recorded graph in reverse topological order.  Broadcasting is limited to
identical shapes or scalar-vs-tensor; ops that need more (bias add, attention
masks, positional tables) have dedicated entry points.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name", "is_param")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name
        self.is_param = False

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operators ----------------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported; use mul/exp/log")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out.is_param = False
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.data.ndim == 0
    return np.ndim(x) == 0


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# -- backward driver -----------------------------------------------------------


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad: np.ndarray | None = None) -> None:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``root``.

    Gradients accumulate into existing buffers, so call ``zero_grad`` between
    independent passes.
    """
    if grad is None:
        if root.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        grad = np.ones_like(root.data)
    if not root.requires_grad:
        raise ValueError("root is not on the tape (requires_grad=False)")
    grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")

    def bw(g):
        ga = _reduce_to(g * b.data, a) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if not np.isfinite(a.data).all() or (a.data <= 0).any():
        raise ValueError("log: input must be finite and strictly positive")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def bw(g):
        return g * take_a, g * ~take_a

    return _make(np.where(take_a, a.data, b.data), (a, b), bw, "maximum")


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axes, keepdims), 1.0 / count)


# -- shape ops -------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    """Slicing / integer-array indexing with scatter-add backward."""
    out = a.data[idx]
    basic = _is_basic_index(idx)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    if basic:
        out = out.copy()
    return _make(np.asarray(out), (a,), bw, "index")


# slice is the spec-level name for basic indexing
def slice_(a: Tensor, idx) -> Tensor:
    return index(a, idx)


# -- reductions with structure -------------------------------------------------------


def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (broadcastable bool) marks allowed entries."""
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("softmax of non-finite input")
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not np.isfinite(x).all():
        raise ValueError("log_softmax of non-finite input")
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize over ``axis`` (the last axis when affine params are given)."""
    if (gamma is not None or beta is not None) and axis % x.ndim != x.ndim - 1:
        raise ValueError("affine layer_norm requires axis=-1")
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = x.shape[axis]
    g_data = gamma.data if gamma is not None else None
    out = xhat * g_data if gamma is not None else xhat
    if beta is not None:
        out = out + beta.data
    parents = [x] + [t for t in (gamma, beta) if t is not None]
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = g * g_data if gamma is not None else g
        dx = inv * (gx - gx.mean(axis=axis, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=axis, keepdims=True) / n)
        res = [dx]
        if gamma is not None:
            res.append((g * xhat).sum(axis=lead) if gamma.requires_grad else None)
        if beta is not None:
            res.append(g.sum(axis=lead) if beta.requires_grad else None)
        return res

    return _make(out, parents, bw, "layer_norm")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``table`` may itself be an activation."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    rows = table.shape[0]
    tail = table.shape[1:]

    def bw(g):
        flat = g.reshape(-1, *tail)
        out = np.zeros((rows,) + tail, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), flat)
        return (out,)

    return _make(table.data[ids], (table,), bw, "embedding")


# -- linear algebra --------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product or batched product with identical leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out.reshape(lead + (w.shape[1],)), parents, bw, "linear")


# -- convolution -------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding. x: B×C×H×W, w: O×C×kh×kw."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ValueError("conv2d: kernel larger than padded input")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # cols: B×Ho×Wo×C×kh×kw
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros((B, C, Hp, Wp), dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(np.ascontiguousarray(out), parents, bw, "conv2d")


def avg_pool_global(x: Tensor) -> Tensor:
    """B×C×H×W -> B×C spatial mean."""
    return mean(x, axis=(2, 3))


# -- sampling ------------------------------------------------------------------------

_SNAP = 1e-9


def grid_sample_bilinear(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling with align-corners and zero padding.

    ``grid[b, i, j] = (gx, gy)`` in [-1, 1]; -1 is the first pixel centre and
    +1 the last.  Coordinates within 1e-9 px of an integer are snapped so the
    identity lattice reproduces the input exactly.
    """
    if x.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2 or grid.shape[0] != x.shape[0]:
        raise ValueError(f"grid_sample: incompatible shapes {x.shape} and {grid.shape}")
    B, C, H, W = x.shape
    _, Ho, Wo, _ = grid.shape
    gx = grid.data[..., 0]
    gy = grid.data[..., 1]
    sx = (W - 1) / 2.0
    sy = (H - 1) / 2.0
    ix = (gx + 1.0) * sx
    iy = (gy + 1.0) * sy
    rx, ry = np.rint(ix), np.rint(iy)
    ix = np.where(np.abs(ix - rx) < _SNAP, rx, ix)
    iy = np.where(np.abs(iy - ry) < _SNAP, ry, iy)
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    wx1 = ix - x0
    wy1 = iy - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    flat = x.data.reshape(B, C, H * W)
    bidx = np.arange(B)[:, None, None]
    corners = []
    for yy, xx, wgt_y, wgt_x in ((y0, x0, wy0, wx0), (y0, x1, wy0, wx1),
                                 (y1, x0, wy1, wx0), (y1, x1, wy1, wx1)):
        valid = (xx >= 0) & (xx < W) & (yy >= 0) & (yy < H)
        lin = np.where(valid, yy * W + xx, 0)
        vals = flat[bidx, :, lin]  # B×Ho×Wo×C
        vals = np.where(valid[..., None], vals, 0.0)
        corners.append((lin, valid, vals, wgt_y, wgt_x))

    out = np.zeros((B, Ho, Wo, C), dtype=DTYPE)
    for _, _, vals, wy, wx in corners:
        out += vals * (wy * wx)[..., None]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # B×Ho×Wo×C
        gxin = None
        if x.requires_grad:
            acc = np.zeros((B, C, H * W), dtype=DTYPE)
            offs = (np.arange(B) * (H * W))[:, None, None]
            for lin, valid, _, wy, wx in corners:
                contrib = gt * (wy * wx * valid)[..., None]  # B×Ho×Wo×C
                keys = (lin + offs).reshape(-1)
                for c in range(C):
                    acc[:, c, :] += np.bincount(keys, weights=contrib[..., c].reshape(-1),
                                                minlength=B * H * W).reshape(B, H * W)
            gxin = acc.reshape(B, C, H, W)
        ggrid = None
        if grid.requires_grad:
            (_, _, v00, _, _), (_, _, v01, _, _), (_, _, v10, _, _), (_, _, v11, _, _) = corners
            dval_dx = (v01 - v00) * wy0[..., None] + (v11 - v10) * wy1[..., None]
            dval_dy = (v10 - v00) * wx0[..., None] + (v11 - v01) * wx1[..., None]
            ggrid = np.stack([(gt * dval_dx).sum(-1) * sx, (gt * dval_dy).sum(-1) * sy], axis=-1)
        return gxin, ggrid

    return _make(out, (x, grid), bw, "grid_sample")


# -- losses --------------------------------------------------------------------------


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over rows where ``ignore_mask`` is False.

    ``logits`` is T×V; ``ignore_mask[t]`` True drops row ``t`` from the mean.
    """
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects T×V logits")
    T, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != T:
        raise ValueError("targets length must match logits rows")
    keep = np.ones(T, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool)
    if not keep.any():
        raise ValueError("cross_entropy: all positions masked")
    if ((targets[keep] < 0) | (targets[keep] >= V)).any():
        raise IndexError("cross_entropy: target id out of range")
    x = logits.data
    if not np.isfinite(x).all():
        raise ValueError("cross_entropy of non-finite logits")
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    safe_t = np.where(keep, targets, 0)
    nll = lse - shifted[np.arange(T), safe_t]
    count = keep.sum()
    loss = nll[keep].sum() / count

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(T), safe_t] -= 1.0
        p *= (keep / count)[:, None]
        return (p * g,)

    return _make(np.asarray(loss), (logits,), bw, "cross_entropy")


# -- checking & utilities -------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    Error per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    base = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(Tensor(base.copy())).item()
            flat[i] = orig - eps
            fm = f(Tensor(base.copy())).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def to_csv(t, path) -> None:
    """Dump a tensor row-major; the header line is the shape."""
    arr = as_tensor(t).data
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(str(s) for s in arr.shape) + "\n")
        flat = arr.reshape(-1) if arr.ndim else arr.reshape(1)
        width = arr.shape[-1] if arr.ndim else 1
        for row in flat.reshape(-1, width):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def from_csv(path) -> Tensor:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        shape = tuple(int(s) for s in header.split(",")) if header else ()
        vals = [float(v) for line in fh for v in line.strip().split(",") if line.strip()]
    return Tensor(np.array(vals).reshape(shape))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
