"""Non-learning demosaickers: per-channel bilinear interpolation and Wiener estimation."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cube import ImageCube
from .pattern import NUM_ANGLES, MosaicImage, PatternError, PatternSpec, channel_masks, mosaic, \
    pattern_from_text, pattern_to_text


def _wavelengths(y: MosaicImage, wavelengths):
    if wavelengths is not None:
        return wavelengths
    return y.pattern.wavelengths or tuple(float(i) for i in range(y.pattern.num_wavelengths))


# ---------------------------------------------------------------------------
# bilinear
# ---------------------------------------------------------------------------

def interpolate_channel(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Fill one channel from its observed samples, rows first, then columns.

    Each row holding samples is linearly interpolated between its nearest
    observed neighbours; columns are then interpolated between those rows.
    Outside the outermost samples the nearest sample is repeated.
    """
    m, n = mask.shape
    rows = np.nonzero(mask.any(axis=1))[0]
    if rows.size == 0:
        raise PatternError("pair-balance", "channel has no observed samples")
    grid = np.arange(n)
    filled = np.empty((rows.size, n), dtype=np.float64)
    for i, r in enumerate(rows):
        xs = np.nonzero(mask[r])[0]
        filled[i] = np.interp(grid, xs, values[r, xs])
    if rows.size == 1:
        return np.broadcast_to(filled[0], (m, n)).copy()
    ys = np.arange(m)
    j = np.clip(np.searchsorted(rows, ys, side="right"), 1, rows.size - 1)
    y0, y1 = rows[j - 1], rows[j]
    t = np.clip((ys - y0) / (y1 - y0), 0.0, 1.0)[:, None]
    return (1.0 - t) * filled[j - 1] + t * filled[j]


def bilinear_demosaic(y: MosaicImage, wavelengths: Sequence[float] | None = None) -> ImageCube:
    p = y.pattern
    m, n = y.values.shape
    out = np.empty((m, n, p.num_wavelengths, NUM_ANGLES))
    for a in range(NUM_ANGLES):
        masks = channel_masks(p, m, n, a)
        for lam in range(p.num_wavelengths):
            if not masks[..., lam].any():
                raise PatternError(
                    "pair-balance", f"pattern never observes wavelength {lam} at angle index {a}")
            out[:, :, lam, a] = interpolate_channel(y.values, masks[..., lam])
    return ImageCube(out, _wavelengths(y, wavelengths), reconstructed=True)


# ---------------------------------------------------------------------------
# Wiener (linear minimum mean-square error) estimation
# ---------------------------------------------------------------------------

class WienerConditioningError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearFit:
    matrix: np.ndarray
    rho: float
    condition: float
    residual: float


def fit_linear_estimator(obs: np.ndarray, targets: np.ndarray, regularization: float = 1e-4,
                         relative: bool = True, max_condition: float = 1e13) -> LinearFit:
    """Solve ``W = R_xy (R_yy + rho I)^-1`` from sample rows.

    ``obs`` is (N, ydim), ``targets`` (N, xdim). With ``relative`` the
    regularization is scaled by the mean diagonal of ``R_yy``. ``residual`` is
    ``||(R_yy + rho I) W^T - R_xy^T|| / ||R_xy^T||``.
    """
    obs = np.asarray(obs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if obs.ndim != 2 or targets.ndim != 2 or obs.shape[0] != targets.shape[0]:
        raise ValueError(f"need paired sample matrices, got {obs.shape} and {targets.shape}")
    count = obs.shape[0]
    r_yy = obs.T @ obs / count
    r_xy = targets.T @ obs / count
    rho = float(regularization * np.mean(np.diag(r_yy))) if relative else float(regularization)
    system = r_yy + rho * np.eye(r_yy.shape[0])
    cond = float(np.linalg.cond(system))
    if not np.isfinite(cond) or cond > max_condition:
        raise WienerConditioningError(
            f"regularized system is singular or ill-conditioned (condition number {cond:.3e} > {max_condition:.1e}); "
            f"increase regularization (rho={rho:.3e}) or add training data ({count} samples for {obs.shape[1]} inputs)"
        )
    wt = np.linalg.solve(system, r_xy.T)
    scale = max(float(np.linalg.norm(r_xy)), 1e-300)
    residual = float(np.linalg.norm(system @ wt - r_xy.T)) / scale
    return LinearFit(wt.T, rho, cond, residual)


@dataclass
class WienerOperator:
    """Blockwise linear estimator: one tile of the cube from a tile plus context of the mosaic."""

    pattern: PatternSpec
    margin_h: int
    margin_w: int
    matrix: np.ndarray
    regularization: float
    rho: float = 0.0
    residual: float = 0.0

    @property
    def context_shape(self) -> tuple[int, int]:
        return (self.pattern.period_h + 2 * self.margin_h, self.pattern.period_w + 2 * self.margin_w)

    @property
    def block_size(self) -> int:
        return self.pattern.period_h * self.pattern.period_w * self.pattern.num_wavelengths * NUM_ANGLES

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"pattern": pattern_to_text(self.pattern), "pattern_sha256": self.pattern.digest(),
                "margin": [self.margin_h, self.margin_w], "regularization": self.regularization,
                "rho": self.rho, "residual": self.residual}
        with open(path, "wb") as fh:
            np.savez(fh, matrix=self.matrix, meta=np.array(json.dumps(meta)))
        return path

    @classmethod
    def load(cls, path) -> "WienerOperator":
        with np.load(path) as z:
            meta = json.loads(str(z["meta"]))
            matrix = z["matrix"]
        pattern = pattern_from_text(meta["pattern"])
        if pattern.digest() != meta["pattern_sha256"]:
            raise PatternError("digest", f"{path}: stored pattern does not match its recorded hash")
        return cls(pattern, *meta["margin"], matrix, meta["regularization"], meta["rho"], meta["residual"])


def context_windows(y: np.ndarray, period_h: int, period_w: int, margin_h: int, margin_w: int) -> np.ndarray:
    """(tiles, context) matrix of mosaic windows around every tile, edge-extended at borders."""
    padded = np.pad(y, ((margin_h, margin_h), (margin_w, margin_w)), mode="edge")
    win = sliding_window_view(padded, (period_h + 2 * margin_h, period_w + 2 * margin_w))
    win = win[::period_h, ::period_w]
    return win.reshape(win.shape[0] * win.shape[1], -1)


def cube_blocks(values: np.ndarray, period_h: int, period_w: int) -> np.ndarray:
    """(tiles, h*w*c*4) matrix of tile-aligned cube blocks, row-major over tiles."""
    m, n, c, a = values.shape
    ty, tx = m // period_h, n // period_w
    blocks = values.reshape(ty, period_h, tx, period_w, c, a).transpose(0, 2, 1, 3, 4, 5)
    return blocks.reshape(ty * tx, -1)


def blocks_to_cube(blocks: np.ndarray, m: int, n: int, period_h: int, period_w: int, c: int) -> np.ndarray:
    ty, tx = m // period_h, n // period_w
    vol = blocks.reshape(ty, tx, period_h, period_w, c, NUM_ANGLES).transpose(0, 2, 1, 3, 4, 5)
    return vol.reshape(m, n, c, NUM_ANGLES)


def wiener_train(cubes: Sequence[ImageCube], pattern: PatternSpec, margin: tuple[int, int] | None = None,
                 regularization: float = 1e-4) -> WienerOperator:
    """Estimate the operator from every tile position of the training cubes."""
    if not cubes:
        raise ValueError("wiener_train needs at least one training cube")
    mh, mw = margin if margin is not None else (pattern.period_h, pattern.period_w)
    obs, targets = [], []
    for cube in cubes:
        y = mosaic(cube, pattern)
        obs.append(context_windows(y.values, pattern.period_h, pattern.period_w, mh, mw))
        targets.append(cube_blocks(cube.values, pattern.period_h, pattern.period_w))
    fit = fit_linear_estimator(np.concatenate(obs), np.concatenate(targets), regularization)
    return WienerOperator(pattern, mh, mw, fit.matrix, regularization, fit.rho, fit.residual)


def wiener_demosaic(y: MosaicImage, op: WienerOperator, wavelengths: Sequence[float] | None = None) -> ImageCube:
    if y.pattern.digest() != op.pattern.digest():
        raise PatternError("digest", "mosaic pattern differs from the pattern the Wiener operator was trained on")
    p = op.pattern
    m, n = y.values.shape
    ctx = context_windows(y.values, p.period_h, p.period_w, op.margin_h, op.margin_w)
    if ctx.shape[1] != op.matrix.shape[1]:
        raise ValueError(f"context size {ctx.shape[1]} does not match operator input size {op.matrix.shape[1]}")
    est = ctx @ op.matrix.T
    values = blocks_to_cube(est, m, n, p.period_h, p.period_w, p.num_wavelengths)
    return ImageCube(values, _wavelengths(y, wavelengths), reconstructed=True)
