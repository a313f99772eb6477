"""Reconstruction metrics: PSNR, Stokes parameters, DoLP, reflectance RMSE, RGB rendering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cube import ImageCube

# Returned by psnr() when the two inputs are identical.
PSNR_IDENTICAL = math.inf

# Gaussian stand-ins for colour-matching functions: (centre nm, sigma nm) per R, G, B.
RGB_LOBES = ((600.0, 40.0), (550.0, 40.0), (450.0, 30.0))


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, ImageCube) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class StokesCube:
    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray


def stokes(cube) -> StokesCube:
    """Linear Stokes planes from the 0/45/90/135 degree intensities (last axis)."""
    v = _values(cube)
    if v.shape[-1] != 4:
        raise ValueError(f"expected four polarization angles on the last axis, got {v.shape}")
    i0, i45, i90, i135 = (v[..., k] for k in range(4))
    return StokesCube(s0=(i0 + i45 + i90 + i135) / 2.0, s1=i0 - i90, s2=i45 - i135)


def dolp(s: StokesCube, scale: float = 1.0) -> np.ndarray:
    """``sqrt(s1^2 + s2^2) / s0``, defined as 0 where ``s0 < 1e-8 * scale``.

    Not clipped to [0, 1]: inconsistent reconstructions may exceed 1.
    """
    eps = 1e-8 * scale
    dark = s.s0 < eps
    safe = np.where(dark, 1.0, s.s0)
    out = np.sqrt(s.s1 ** 2 + s.s2 ** 2) / safe
    return np.where(dark, 0.0, out)


def psnr(a, b, peak: float = 1.0, per_channel: bool = False) -> float:
    """``10 log10(peak^2 / MSE)`` with the MSE pooled over every element.

    ``per_channel=True`` instead averages the PSNR of each (wavelength, angle)
    plane of an ``m x n x c x 4`` pair. Identical inputs give ``PSNR_IDENTICAL``.
    """
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("psnr: peak must be positive")
    if per_channel:
        if a.ndim < 3:
            raise ValueError("per-channel psnr needs at least m x n x channel arrays")
        flat_a = a.reshape(a.shape[0] * a.shape[1], -1)
        flat_b = b.reshape(flat_a.shape)
        vals = [psnr(flat_a[:, k], flat_b[:, k], peak) for k in range(flat_a.shape[1])]
        return float(np.mean(vals))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def dolp_psnr(pred, truth, scale: float = 1.0) -> float:
    return psnr(dolp(stokes(pred), scale), dolp(stokes(truth), scale), peak=1.0)


def white_reference(s0: np.ndarray, region: tuple[slice, slice] | None = None) -> np.ndarray:
    """Per-wavelength maximum of ``s0`` (m x n x c) over a white patch (default: whole image)."""
    patch = s0 if region is None else s0[region]
    return patch.reshape(-1, s0.shape[-1]).max(axis=0)


def reflectance_rmse(pred_s0: np.ndarray, truth_s0: np.ndarray, white) -> np.ndarray:
    """Per-wavelength RMSE of ``s0 / white`` over all pixels."""
    pred_s0 = np.asarray(pred_s0, dtype=np.float64)
    truth_s0 = np.asarray(truth_s0, dtype=np.float64)
    if pred_s0.shape != truth_s0.shape:
        raise ValueError(f"reflectance_rmse: shapes differ, {pred_s0.shape} vs {truth_s0.shape}")
    white = np.broadcast_to(np.asarray(white, dtype=np.float64), (pred_s0.shape[-1],))
    if np.any(white <= 0) or not np.all(np.isfinite(white)):
        raise ValueError(f"white reference must be finite and positive per wavelength, got {white}")
    err = (pred_s0 - truth_s0) / white
    return np.sqrt(np.mean(err.reshape(-1, err.shape[-1]) ** 2, axis=0))


def rgb_weights(wavelengths: Sequence[float]) -> np.ndarray:
    """(3, c) weights; each row is a Gaussian lobe sampled at the bands and normalized to sum 1."""
    lam = np.asarray(wavelengths, dtype=np.float64)
    rows = np.array([np.exp(-0.5 * ((lam - mu) / sd) ** 2) for mu, sd in RGB_LOBES])
    totals = rows.sum(axis=1)
    if np.any(totals < 1e-6):
        raise ValueError(f"wavelengths {list(lam)} do not cover the visible range needed for RGB rendering")
    return rows / totals[:, None]


def render_rgb(cube: ImageCube, angle: float | None = 0.0) -> np.ndarray:
    """m x n x 3 image in [0, 1] for one polarization angle (``None``: S0 / 2)."""
    w = rgb_weights(cube.wavelengths)
    if angle is None:
        planes = stokes(cube).s0 / 2.0
    else:
        planes = cube.values[..., cube.angle_index(angle)]
    return np.clip(planes @ w.T, 0.0, 1.0)


@dataclass
class MetricsReport:
    """Per-scene scores for one method; averages are plain means over scenes."""

    method: str
    mspi: dict[str, float] = field(default_factory=dict)
    dolp: dict[str, float] = field(default_factory=dict)
    reflectance: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, scene: str, pred: ImageCube, truth: ImageCube, white_region=None) -> None:
        self.mspi[scene] = psnr(pred, truth)
        self.dolp[scene] = dolp_psnr(pred, truth)
        t0 = stokes(truth).s0
        self.reflectance[scene] = reflectance_rmse(stokes(pred).s0, t0, white_reference(t0, white_region))

    @property
    def scenes(self) -> list[str]:
        return list(self.mspi)

    @property
    def average_mspi(self) -> float:
        return float(np.mean(list(self.mspi.values())))

    @property
    def average_dolp(self) -> float:
        return float(np.mean(list(self.dolp.values())))

    @property
    def average_reflectance(self) -> np.ndarray:
        return np.mean(np.stack(list(self.reflectance.values())), axis=0)
