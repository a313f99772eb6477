"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: every op builds a node holding its parents and a
closure that maps the upstream gradient to one gradient per parent. Only the
operations the demosaicking network and its loss need are provided.

Convolutions use cross-correlation semantics (no kernel flip), stride 1, and
independent low/high zero padding per spatial axis.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

# Upper bound on elements materialised by one im2col window copy.
_WINDOW_BUDGET = 1 << 24


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class Tensor:
    """N-dimensional array node in a reverse-mode autodiff graph.

    Parameters
    ----------
    data : array_like
        Values. Integer and boolean input is promoted to float64.
    requires_grad : bool
        Leaf tensors with ``requires_grad`` receive ``.grad`` after
        :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}

        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def relu(x) -> Tensor:
    """Elementwise ``max(0, x)``; the gradient is the 0/1 mask ``x > 0``."""
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def tensor_sum(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; the gradient is split back to each part."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat: no tensors given")
    ndim = parts[0].ndim
    axis = axis % ndim
    for i, p in enumerate(parts):
        if p.ndim != ndim:
            raise ShapeError(f"concat: part {i} has {p.ndim} dims, expected {ndim}")
        for ax in range(ndim):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(
                    f"concat: part {i} extent {p.shape[ax]} on axis {ax} differs from {parts[0].shape[ax]}"
                )
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous range ``[start, stop)`` along one axis."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice: range [{start}, {stop}) outside axis {axis} of extent {n}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)

    return _result(x.data[sl], (x,), backward)


def pad_zero(x, pads: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad every axis by ``(lo, hi)``; ``pads`` has one pair per axis."""
    x = as_tensor(x)
    pads = [(int(lo), int(hi)) for lo, hi in pads]
    if len(pads) != x.ndim:
        raise ShapeError(f"pad_zero: {len(pads)} pad pairs given for a {x.ndim}-d tensor")
    if any(lo < 0 or hi < 0 for lo, hi in pads):
        raise ShapeError("pad_zero: negative pad")
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape))
    return _result(np.pad(x.data, pads), (x,), lambda g: (g[sl],))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _normalize_pad(pad, nsp: int) -> list[tuple[int, int]]:
    if pad is None:
        return [(0, 0)] * nsp
    if isinstance(pad, int):
        return [(pad, pad)] * nsp
    pad = list(pad)
    if len(pad) == nsp + 1 and all(isinstance(p, int) for p in pad):
        # (first_lo, first_hi, rest...) shorthand: only the leading axis is asymmetric
        return [(pad[0], pad[1])] + [(p, p) for p in pad[2:]]
    if len(pad) != nsp:
        raise ShapeError(f"conv: expected {nsp} pad entries, got {len(pad)}")
    return [(p, p) if isinstance(p, int) else (int(p[0]), int(p[1])) for p in pad]


def _im2col(xp: np.ndarray, k: Sequence[int], lo: int = 0, hi: int | None = None, ax: int = 0) -> np.ndarray:
    """Columns ``(C*prod(k), N*prod(O))`` of the valid windows of ``xp`` (N, C, *S).

    ``lo``/``hi`` restrict output positions along spatial axis ``ax``.
    """
    nsp = len(k)
    n, cin = xp.shape[:2]
    out_ext = [s - kk + 1 for s, kk in zip(xp.shape[2:], k)]
    if hi is None:
        hi = out_ext[ax]
    out_ext[ax] = hi - lo
    xt = xp.transpose(1, 0, *range(2, 2 + nsp))
    cols = np.empty((cin, *k, n, *out_ext), dtype=xp.dtype)
    for off in itertools.product(*(range(kk) for kk in k)):
        src = [slice(None), slice(None)]
        for a, (o, e) in enumerate(zip(off, out_ext)):
            start = o + (lo if a == ax else 0)
            src.append(slice(start, start + e))
        cols[(slice(None),) + off] = xt[tuple(src)]
    return cols.reshape(cin * math.prod(k), -1)


def _col2im(cols: np.ndarray, xp_shape: tuple[int, ...], k: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to an (N, C, *S) array."""
    nsp = len(k)
    n, cin = xp_shape[:2]
    out_ext = [s - kk + 1 for s, kk in zip(xp_shape[2:], k)]
    cols = cols.reshape(cin, *k, n, *out_ext)
    acc = np.zeros((cin, n, *xp_shape[2:]), dtype=cols.dtype)
    for off in itertools.product(*(range(kk) for kk in k)):
        dst = (slice(None), slice(None)) + tuple(slice(o, o + e) for o, e in zip(off, out_ext))
        acc[dst] += cols[(slice(None),) + off]
    return acc.transpose(1, 0, *range(2, 2 + nsp))


def _chunks(xp_shape, k) -> tuple[int, list[tuple[int, int]]]:
    """Split output positions along the longest axis so each column block fits the budget."""
    n, cin = xp_shape[:2]
    out_ext = [s - kk + 1 for s, kk in zip(xp_shape[2:], k)]
    ax = int(np.argmax(out_ext))
    per_slab = n * cin * math.prod(k) * math.prod(out_ext) // out_ext[ax]
    step = max(1, _WINDOW_BUDGET // max(1, per_slab))
    return ax, [(lo, min(out_ext[ax], lo + step)) for lo in range(0, out_ext[ax], step)]


def _conv(x, kernel, bias, pad, nsp: int, name: str) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    bias = None if bias is None else as_tensor(bias)
    if x.ndim != nsp + 2:
        raise ShapeError(f"{name}: input must be (N, C_in, {'D, ' if nsp == 3 else ''}H, W), got {x.shape}")
    if kernel.ndim != nsp + 2:
        raise ShapeError(f"{name}: kernel must have {nsp + 2} dims (C_out, C_in, ...), got {kernel.shape}")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"{name}: kernel C_in={kernel.shape[1]} does not match input C_in={x.shape[1]}"
        )
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ShapeError(f"{name}: bias shape {bias.shape} != (C_out={kernel.shape[0]},)")
    pads = _normalize_pad(pad, nsp)
    axis_names = ("D", "H", "W")[-nsp:]
    k = kernel.shape[2:]
    for ax, ((lo, hi), s, kk) in enumerate(zip(pads, x.shape[2:], k)):
        if lo < 0 or hi < 0:
            raise ShapeError(f"{name}: negative padding on axis {axis_names[ax]}")
        if kk > s + lo + hi:
            raise ShapeError(
                f"{name}: kernel extent {kk} on axis {axis_names[ax]} exceeds padded input extent {s + lo + hi}"
            )

    n = x.shape[0]
    cout = kernel.shape[0]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads)
    out_ext = [s - kk + 1 for s, kk in zip(xp.shape[2:], k)]
    w2 = kernel.data.reshape(cout, -1)
    ax, chunks = _chunks(xp.shape, k)
    cached = None
    if len(chunks) == 1:
        cached = _im2col(xp, k)
        out = (w2 @ cached).reshape(cout, n, *out_ext)
    else:
        out = np.empty((cout, n, *out_ext), dtype=np.result_type(xp, w2))
        for lo, hi in chunks:
            sl = [slice(None), slice(None)] + [slice(None)] * nsp
            sl[2 + ax] = slice(lo, hi)
            out[tuple(sl)] = (w2 @ _im2col(xp, k, lo, hi, ax)).reshape(cout, n, *[
                (hi - lo) if a == ax else e for a, e in enumerate(out_ext)])
    out = out.transpose(1, 0, *range(2, 2 + nsp))
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * nsp)
    out = np.ascontiguousarray(out)

    crop = (slice(None), slice(None)) + tuple(slice(lo, lo + s) for (lo, _), s in zip(pads, x.shape[2:]))

    def backward(g):
        gx = gk = gb = None
        g2 = g.transpose(1, 0, *range(2, 2 + nsp))  # (Cout, N, *O)
        if kernel.requires_grad:
            if cached is not None:
                gk = (g2.reshape(cout, -1) @ cached.T).reshape(kernel.shape)
            else:
                gk = np.zeros(kernel.shape, dtype=g.dtype)
                for lo, hi in chunks:
                    sl = [slice(None), slice(None)] + [slice(None)] * nsp
                    sl[2 + ax] = slice(lo, hi)
                    gk += (g2[tuple(sl)].reshape(cout, -1) @ _im2col(xp, k, lo, hi, ax).T).reshape(kernel.shape)
        if x.requires_grad:
            if cached is not None:
                gx = _col2im(w2.T @ g2.reshape(cout, -1), xp.shape, k)[crop]
            else:
                gp = np.pad(g, [(0, 0), (0, 0)] + [(kk - 1, kk - 1) for kk in k])
                flipped = np.ascontiguousarray(
                    np.flip(kernel.data, axis=tuple(range(2, 2 + nsp))).swapaxes(0, 1))
                gx = _conv(Tensor(gp), Tensor(flipped), None, 0, nsp, name).data[crop]
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nsp)))
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out, parents, backward)


def conv3d(x, kernel, bias=None, pad=None) -> Tensor:
    """3D cross-correlation, stride 1.

    ``x`` is (N, C_in, D, H, W) and ``kernel`` (C_out, C_in, kd, kh, kw).
    ``pad`` is an int, three ``(lo, hi)`` pairs, or the shorthand
    ``(d_lo, d_hi, h, w)``.
    """
    return _conv(x, kernel, bias, pad, 3, "conv3d")


def conv2d(x, kernel, bias=None, pad=None) -> Tensor:
    """2D counterpart of :func:`conv3d` on (N, C_in, H, W) input."""
    return _conv(x, kernel, bias, pad, 2, "conv2d")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), 1e-300)
    return num / den


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> list[float]:
    """Relative error between reverse-mode and central-difference gradients, per input.

    ``fn`` must rebuild the graph from ``inputs`` on every call and return a scalar.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    errs = []
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        numeric = numerical_gradient(fn, t.data, eps)
        errs.append(relative_error(analytic, numeric))
    return errs
