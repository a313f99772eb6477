"""Multispectral polarization image cubes and their on-disk formats.

Cube values are laid out ``(row, column, wavelength, angle)``. The native file
is a two-line text header followed by the raw little-endian buffer in
``(angle, wavelength, row, column)`` order::

    MSPCUBE 1
    {"height": 32, "width": 32, "wavelengths_nm": [...], "angles_deg": [0, 45, 90, 135],
     "dtype": "<f8", "scale": 1.0, "order": "angle,wavelength,row,column"}
    <raw bytes>

For integer dtypes, stored values are ``round(value / scale)``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ANGLES = (0.0, 45.0, 90.0, 135.0)
MAGIC = b"MSPCUBE 1\n"
TWELVE_BIT_PEAK = 4095.0


class CubeFormatError(ValueError):
    pass


@dataclass
class ImageCube:
    """An ``m x n x c x 4`` multispectral polarization image.

    Ground-truth cubes must be non-negative. Reconstructions set
    ``reconstructed=True``: they may dip below zero and are kept unclipped so
    downstream metrics see the raw estimate.
    """

    values: np.ndarray
    wavelengths: tuple[float, ...]
    angles: tuple[float, ...] = ANGLES
    reconstructed: bool = False
    name: str = field(default="", compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not np.issubdtype(self.values.dtype, np.floating):
            self.values = self.values.astype(np.float64)
        self.wavelengths = tuple(float(w) for w in self.wavelengths)
        self.angles = tuple(float(a) for a in self.angles)
        if self.values.ndim != 4:
            raise CubeFormatError(f"cube values must be 4-d (m, n, c, angles), got shape {self.values.shape}")
        m, n, c, a = self.values.shape
        if c != len(self.wavelengths):
            raise CubeFormatError(f"cube has {c} wavelength planes but {len(self.wavelengths)} wavelengths listed")
        if a != len(self.angles):
            raise CubeFormatError(f"cube has {a} angle planes but {len(self.angles)} angles listed")
        if np.any(np.diff(self.wavelengths) <= 0):
            raise CubeFormatError("wavelength list must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise CubeFormatError("cube contains non-finite intensities")
        if not self.reconstructed and np.any(self.values < 0):
            raise CubeFormatError("ground-truth cube contains negative intensities")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def num_wavelengths(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def angle_index(self, angle: float) -> int:
        return self.angles.index(float(angle))

    def with_values(self, values, reconstructed: bool = True) -> "ImageCube":
        return ImageCube(values, self.wavelengths, self.angles, reconstructed=reconstructed, name=self.name)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------

def center_crop(cube: ImageCube, period_h: int, period_w: int) -> ImageCube:
    """Center-crop to the largest extents that are multiples of the period."""
    m = cube.height - cube.height % period_h
    n = cube.width - cube.width % period_w
    if m == 0 or n == 0:
        raise CubeFormatError(f"cube {cube.height}x{cube.width} is smaller than one {period_h}x{period_w} period")
    top = (cube.height - m) // 2
    left = (cube.width - n) // 2
    return ImageCube(cube.values[top:top + m, left:left + n], cube.wavelengths, cube.angles,
                     reconstructed=cube.reconstructed, name=cube.name)


def select_wavelengths(cube: ImageCube, wanted: Sequence[float], tol: float = 1e-6) -> ImageCube:
    """Keep only the planes whose wavelength matches an entry of ``wanted``."""
    idx = []
    for w in wanted:
        hits = [i for i, cw in enumerate(cube.wavelengths) if abs(cw - w) <= tol]
        if not hits:
            raise CubeFormatError(f"wavelength {w} nm not present in cube")
        idx.append(hits[0])
    return ImageCube(cube.values[:, :, idx], [cube.wavelengths[i] for i in idx], cube.angles,
                     reconstructed=cube.reconstructed, name=cube.name)


def wavelength_grid(start: float, stop: float, step: float) -> list[float]:
    """Inclusive arithmetic grid, e.g. ``wavelength_grid(420, 720, 20)`` -> 16 bands."""
    count = int(round((stop - start) / step)) + 1
    return [float(start + i * step) for i in range(count)]


# ---------------------------------------------------------------------------
# native cube files
# ---------------------------------------------------------------------------

def write_cube(path, cube: ImageCube, dtype="<f8", scale: float = 1.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dt = np.dtype(dtype).newbyteorder("<")
    planes = np.transpose(cube.values, (3, 2, 0, 1))
    if np.issubdtype(dt, np.integer):
        info = np.iinfo(dt)
        stored = np.clip(np.round(planes / scale), info.min, info.max).astype(dt)
    else:
        stored = (planes / scale if scale != 1.0 else planes).astype(dt)
    header = {
        "height": cube.height,
        "width": cube.width,
        "wavelengths_nm": list(cube.wavelengths),
        "angles_deg": list(cube.angles),
        "dtype": dt.str,
        "scale": scale,
        "order": "angle,wavelength,row,column",
        "name": cube.name,
        "reconstructed": cube.reconstructed,
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header).encode() + b"\n")
        fh.write(np.ascontiguousarray(stored).tobytes())
    return path


def read_cube(path) -> ImageCube:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CubeFormatError(f"{path}: not a cube file (bad magic line)")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CubeFormatError(f"{path}: malformed header") from exc
        raw = fh.read()
    dt = np.dtype(header["dtype"])
    m, n = header["height"], header["width"]
    c, a = len(header["wavelengths_nm"]), len(header["angles_deg"])
    expected = a * c * m * n * dt.itemsize
    if len(raw) != expected:
        raise CubeFormatError(f"{path}: buffer holds {len(raw)} bytes, header implies {expected}")
    planes = np.frombuffer(raw, dtype=dt).reshape(a, c, m, n)
    values = np.transpose(planes, (2, 3, 1, 0))
    if np.issubdtype(dt, np.integer) or header.get("scale", 1.0) != 1.0:
        values = values.astype(np.float64) * header.get("scale", 1.0)
    else:
        values = values.astype(dt.newbyteorder("="))
    return ImageCube(np.ascontiguousarray(values), header["wavelengths_nm"], header["angles_deg"],
                     reconstructed=header.get("reconstructed", False), name=header.get("name", path.stem))


# ---------------------------------------------------------------------------
# PNG plane directories
# ---------------------------------------------------------------------------

_WAVE_RE = re.compile(r"(\d+(?:\.\d+)?)\s*nm", re.IGNORECASE)
_ANGLE_RE = re.compile(r"(\d+(?:\.\d+)?)\s*deg", re.IGNORECASE)


def plane_filename(wavelength: float, angle: float) -> str:
    return f"{wavelength:g}nm_{angle:g}deg.png"


def read_png_scene(directory, peak: float = TWELVE_BIT_PEAK, wavelengths: Sequence[float] | None = None) -> ImageCube:
    """Import a directory of per-(wavelength, angle) 16-bit grayscale PNG planes.

    Filenames must contain ``<wavelength>nm`` and ``<angle>deg`` (for example
    ``550nm_45deg.png``). Pixel values are divided by ``peak`` (4095 for
    12-bit captures).
    """
    from PIL import Image

    directory = Path(directory)
    planes: dict[tuple[float, float], Path] = {}
    for p in sorted(directory.glob("*.png")):
        wm, am = _WAVE_RE.search(p.name), _ANGLE_RE.search(p.name)
        if wm and am:
            planes[(float(wm.group(1)), float(am.group(1)))] = p
    if not planes:
        raise CubeFormatError(f"{directory}: no '<wavelength>nm_<angle>deg.png' planes found")
    waves = sorted({w for w, _ in planes}) if wavelengths is None else [float(w) for w in wavelengths]
    angles = sorted({a for _, a in planes})
    if tuple(angles) != ANGLES:
        raise CubeFormatError(f"{directory}: expected angles {ANGLES}, found {tuple(angles)}")
    missing = [(w, a) for w in waves for a in angles if (w, a) not in planes]
    if missing:
        raise CubeFormatError(f"{directory}: missing planes {missing[:5]}{'...' if len(missing) > 5 else ''}")
    shape = None
    stack = np.empty((0,))
    for i, w in enumerate(waves):
        for j, a in enumerate(angles):
            with Image.open(planes[(w, a)]) as im:
                arr = np.asarray(im)
            if arr.ndim != 2:
                raise CubeFormatError(f"{planes[(w, a)]}: expected a grayscale plane, got shape {arr.shape}")
            if shape is None:
                shape = arr.shape
                stack = np.empty(shape + (len(waves), len(angles)))
            elif arr.shape != shape:
                raise CubeFormatError(f"{planes[(w, a)]}: plane shape {arr.shape} differs from {shape}")
            stack[:, :, i, j] = arr.astype(np.float64) / peak
    return ImageCube(stack, waves, angles, name=directory.name)


def write_png_scene(directory, cube: ImageCube, peak: float = TWELVE_BIT_PEAK) -> Path:
    """Write one 16-bit PNG per (wavelength, angle); inverse of :func:`read_png_scene`."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, w in enumerate(cube.wavelengths):
        for j, a in enumerate(cube.angles):
            plane = np.clip(np.round(cube.values[:, :, i, j] * peak), 0, 65535).astype(np.uint16)
            Image.fromarray(plane).save(directory / plane_filename(w, a))
    return directory


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def synthetic_cube(height: int, width: int, wavelengths: Sequence[float], seed: int = 0,
                   blobs: int = 4, max_dolp: float = 0.6, name: str = "synthetic") -> ImageCube:
    """Smooth, physically consistent test scene.

    Intensity ``s0`` is a sum of Gaussian blobs, each with its own smooth
    spectrum; polarization follows Malus' law
    ``I_theta = s0/2 * (1 + p cos(2 theta - 2 phi))`` with smooth degree ``p``
    and angle ``phi`` fields, so ``I0 + I90 == I45 + I135`` holds exactly.
    """
    rng = np.random.default_rng(seed)
    lam = np.asarray(wavelengths, dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)

    s0 = np.full((height, width, lam.size), 0.15)
    lo, hi = lam.min(), max(lam.max(), lam.min() + 1.0)
    for _ in range(blobs):
        cy, cx = rng.uniform(0.0, 1.0, 2)
        sigma = rng.uniform(0.2, 0.45)
        spatial = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        peak_nm = rng.uniform(lo, hi)
        width_nm = rng.uniform(0.25, 0.6) * (hi - lo)
        spectrum = 0.2 + 0.8 * np.exp(-((lam - peak_nm) ** 2) / (2 * width_nm**2))
        s0 += rng.uniform(0.15, 0.3) * spatial[..., None] * spectrum[None, None, :]
    s0 = np.clip(s0, 0.0, None)
    s0 *= 0.95 / max(s0.max(), 1e-12)

    a, b = rng.uniform(-1, 1, 2)
    p = max_dolp * (0.5 + 0.5 * np.sin(np.pi * (a * yy + b * xx + rng.uniform())))
    phi = np.pi * (0.5 * yy + 0.3 * xx + rng.uniform())
    theta = np.deg2rad(np.asarray(ANGLES))
    malus = 1.0 + p[..., None] * np.cos(2 * theta[None, None, :] - 2 * phi[..., None])
    values = 0.5 * s0[..., None] * malus[:, :, None, :]
    return ImageCube(values, lam, ANGLES, name=name)
