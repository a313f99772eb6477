"""Training loss: squared Frobenius error plus a weighted gradient-map error."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cube import ImageCube
from .tensor import Tensor


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ImageCube) else np.asarray(x)


def gradient_map(x) -> np.ndarray:
    """Forward differences of an ``m x n x c x 4`` image.

    Returns ``m x n x c x 4 x 2``: ``[..., 0]`` is the vertical difference
    ``x[y+1, x] - x[y, x]`` (zero on the last row) and ``[..., 1]`` the
    horizontal one (zero on the last column).
    """
    v = _values(x)
    g = np.zeros(v.shape + (2,), dtype=v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64)
    g[:-1, :, ..., 0] = v[1:] - v[:-1]
    g[:, :-1, ..., 1] = v[:, 1:] - v[:, :-1]
    return g


def _sq_sum(t: Tensor) -> Tensor:
    return T.tensor_sum(T.square(t))


def loss(pred, truth, gradient_weight: float = 1.0):
    """``(1/M) sum_k ||X_k - F_k||_F^2 + lambda ||G(X_k) - G(F_k)||_F^2``.

    ``pred``/``truth`` are single ``m x n x c x 4`` images or batches with a
    leading axis of size ``M``. A Tensor ``pred`` returns a differentiable
    scalar Tensor; otherwise a float.
    """
    as_float = not isinstance(pred, Tensor)
    p = pred if isinstance(pred, Tensor) else Tensor(_values(pred))
    t = _values(truth)
    if p.shape != t.shape:
        raise ValueError(f"loss: prediction shape {p.shape} != truth shape {t.shape}")
    if p.ndim not in (4, 5):
        raise ValueError(f"loss: expected m x n x c x 4 images (optionally batched), got {p.shape}")
    batch = p.shape[0] if p.ndim == 5 else 1
    row_axis = p.ndim - 4
    err = p - t
    total = _sq_sum(err)
    if gradient_weight:
        m, n = p.shape[row_axis], p.shape[row_axis + 1]
        dv = T.slice_axis(err, row_axis, 1, m) - T.slice_axis(err, row_axis, 0, m - 1)
        dh = T.slice_axis(err, row_axis + 1, 1, n) - T.slice_axis(err, row_axis + 1, 0, n - 1)
        total = total + gradient_weight * (_sq_sum(dv) + _sq_sum(dh))
    if batch != 1:
        total = total * (1.0 / batch)
    return float(total.data) if as_float else total
