"""Builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from mspd.cube import ImageCube
from mspd.pattern import PatternSpec


def tiny_pattern() -> PatternSpec:
    """2x2 tile, c=2: one cell per angle, wavelengths alternating."""
    return PatternSpec(np.array([[[0, 0], [1, 1]], [[1, 2], [0, 3]]]), 2)


def quad_pattern(c: int = 1) -> PatternSpec:
    """2x2 angle block repeated over a 2 x 2c tile, wavelength constant per 2x2 block."""
    cells = np.zeros((2, 2 * c, 2), dtype=np.int64)
    for k in range(c):
        cells[:, 2 * k:2 * k + 2, 0] = k
        cells[:, 2 * k:2 * k + 2, 1] = [[0, 1], [2, 3]]
    return PatternSpec(cells, c)


def parity_pattern_c4() -> PatternSpec:
    """Hand-built c=4, 4x4 tile with every (wavelength, angle) pair once."""
    lam = np.array([[0, 0, 2, 2],
                    [0, 0, 2, 2],
                    [3, 3, 1, 1],
                    [3, 3, 1, 1]])
    ang = np.tile(np.array([[0, 1], [2, 3]]), (2, 2))
    return PatternSpec(np.stack([lam, ang], axis=-1), 4, wavelengths=(450.0, 520.0, 590.0, 660.0))


def random_cube(m: int, n: int, c: int, seed: int = 0) -> ImageCube:
    rng = np.random.default_rng(seed)
    return ImageCube(rng.uniform(0.0, 1.0, (m, n, c, 4)), [400.0 + 20 * k for k in range(c)])
