"""Multispectral polarization filter array (MSPFA) patterns and mosaicking.

A pattern is an ``h x w`` tile, repeated over the sensor, that assigns each
pixel one ``(wavelength index, angle index)`` pair. Angle indices 0..3 stand
for 0, 45, 90 and 135 degrees.

Layout rules enforced by :func:`generate_pattern` and checked by
:func:`validate_pattern`:

* ``angle-balance``: each angle occupies exactly ``h*w/4`` cells.
* ``angle-block``: every 2x2 window of the periodic tile holds all four angles.
* ``pair-balance``: when ``h*w >= 4c`` every (wavelength, angle) pair is present,
  and each pair occurs equally often when ``h*w`` is a multiple of ``4c``.
* ``adjacent-bands``: no two 4-neighbours (toroidal, since the tile repeats)
  carry consecutive wavelength indices.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cube import ImageCube

logger = logging.getLogger(__name__)

NUM_ANGLES = 4


class PatternError(ValueError):
    """Pattern generation or application failed; ``constraint`` names the rule."""

    def __init__(self, constraint: str, message: str):
        super().__init__(f"[{constraint}] {message}")
        self.constraint = constraint


@dataclass(frozen=True)
class Violation:
    rule: str
    cells: tuple[tuple[int, int], ...]
    message: str

    def __str__(self) -> str:
        return f"{self.rule} at {list(self.cells)}: {self.message}"


@dataclass(eq=False)
class PatternSpec:
    """Periodic filter-array tile.

    ``cells[y, x] == (wavelength_index, angle_index)``.
    """

    cells: np.ndarray
    num_wavelengths: int
    wavelengths: tuple[float, ...] | None = None
    _hash: str | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.ndim != 3 or self.cells.shape[2] != 2:
            raise PatternError("shape", f"cells must be (h, w, 2), got {self.cells.shape}")
        c = int(self.num_wavelengths)
        self.num_wavelengths = c
        if c < 1:
            raise PatternError("shape", "num_wavelengths must be positive")
        lam, ang = self.cells[..., 0], self.cells[..., 1]
        if lam.min() < 0 or lam.max() >= c:
            raise PatternError("range", f"wavelength indices must lie in [0, {c})")
        if ang.min() < 0 or ang.max() >= NUM_ANGLES:
            raise PatternError("range", f"angle indices must lie in [0, {NUM_ANGLES})")
        if self.wavelengths is not None:
            self.wavelengths = tuple(float(w) for w in self.wavelengths)
            if len(self.wavelengths) != c:
                raise PatternError("shape", f"{len(self.wavelengths)} wavelengths listed for c={c}")

    @property
    def period_h(self) -> int:
        return self.cells.shape[0]

    @property
    def period_w(self) -> int:
        return self.cells.shape[1]

    @property
    def wavelength_map(self) -> np.ndarray:
        return self.cells[..., 0]

    @property
    def angle_map(self) -> np.ndarray:
        return self.cells[..., 1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, PatternSpec) and self.num_wavelengths == other.num_wavelengths
                and self.wavelengths == other.wavelengths and np.array_equal(self.cells, other.cells))

    def occurrences(self, wavelength: int, angle: int) -> int:
        return int(np.sum((self.cells[..., 0] == wavelength) & (self.cells[..., 1] == angle)))

    def tiled_maps(self, m: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel wavelength and angle index maps for an ``m x n`` sensor."""
        ry = np.arange(m) % self.period_h
        rx = np.arange(n) % self.period_w
        return self.cells[ry[:, None], rx[None, :], 0], self.cells[ry[:, None], rx[None, :], 1]

    def digest(self) -> str:
        """SHA-256 of the canonical text form."""
        if self._hash is None:
            self._hash = hashlib.sha256(pattern_to_text(self).encode()).hexdigest()
        return self._hash


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

def _neighbour_pairs(h: int, w: int):
    seen = set()
    for y in range(h):
        for x in range(w):
            for dy, dx in ((1, 0), (0, 1)):
                ny, nx = (y + dy) % h, (x + dx) % w
                if (ny, nx) == (y, x):
                    continue
                key = frozenset(((y, x), (ny, nx)))
                if key in seen:
                    continue
                seen.add(key)
                yield (y, x), (ny, nx)


def validate_pattern(p: PatternSpec) -> list[Violation]:
    """Return every broken layout rule; an empty list means the pattern is valid."""
    h, w, c = p.period_h, p.period_w, p.num_wavelengths
    lam, ang = p.wavelength_map, p.angle_map
    out: list[Violation] = []

    if (h * w) % NUM_ANGLES:
        out.append(Violation("angle-balance", (), f"tile of {h * w} cells cannot hold the four angles equally"))
    else:
        want = h * w // NUM_ANGLES
        counts = np.bincount(ang.ravel(), minlength=NUM_ANGLES)
        if np.any(counts != want):
            bad = [a for a in range(NUM_ANGLES) if counts[a] != want]
            cells = tuple((int(y), int(x)) for y, x in zip(*np.nonzero(np.isin(ang, bad))))
            out.append(Violation("angle-balance", cells,
                                 f"angle counts {counts.tolist()} differ from {want} each"))

    for y in range(h):
        for x in range(w):
            window = [((y + dy) % h, (x + dx) % w) for dy in (0, 1) for dx in (0, 1)]
            present = {int(ang[c_]) for c_ in window}
            if len(present) != NUM_ANGLES:
                missing = sorted(set(range(NUM_ANGLES)) - present)
                out.append(Violation("angle-block", tuple(window),
                                     f"2x2 window at ({y}, {x}) lacks angle indices {missing}"))

    if h * w >= NUM_ANGLES * c:
        counts = np.zeros((c, NUM_ANGLES), dtype=np.int64)
        np.add.at(counts, (lam.ravel(), ang.ravel()), 1)
        balanced = (h * w) % (NUM_ANGLES * c) == 0
        want = h * w // (NUM_ANGLES * c)
        bad = counts == 0 if not balanced else counts != want
        if np.any(bad):
            pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(bad))]
            cells = tuple((int(y), int(x)) for y in range(h) for x in range(w)
                          if (int(lam[y, x]), int(ang[y, x])) in pairs)
            detail = "missing" if not balanced else f"not occurring exactly {want} times"
            out.append(Violation("pair-balance", cells,
                                 f"(wavelength, angle) pairs {pairs} {detail}"))

    for a, b in _neighbour_pairs(h, w):
        if abs(int(lam[a]) - int(lam[b])) == 1:
            out.append(Violation("adjacent-bands", (a, b),
                                 f"consecutive wavelength indices {int(lam[a])} and {int(lam[b])} are 4-neighbours"))
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _conflicts(lam: np.ndarray) -> int:
    total = 0
    for axis in (0, 1):
        if lam.shape[axis] > 1:
            total += int(np.sum(np.abs(lam - np.roll(lam, 1, axis=axis)) == 1))
    return total


def _cell_conflicts(lam: np.ndarray, y: int, x: int) -> int:
    h, w = lam.shape
    v = lam[y, x]
    n = 0
    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ny, nx = (y + dy) % h, (x + dx) % w
        if (ny, nx) != (y, x) and abs(lam[ny, nx] - v) == 1:
            n += 1
    return n


def generate_pattern(c: int, period_h: int, period_w: int, seed: int = 0, *,
                     wavelengths: Sequence[float] | None = None, max_restarts: int = 50,
                     max_iters: int = 2000, patience: int = 200, strict: bool = True) -> PatternSpec:
    """Randomised search for a tile satisfying every layout rule.

    Angles use the 2x2 parity layout under a seeded permutation. Wavelengths are
    dealt evenly within each angle class, then repaired by min-conflict swaps
    inside a class (swaps keep angle and pair balance intact) with bounded
    restarts.

    With ``strict=False`` the tile with the fewest adjacency conflicts is
    returned instead of raising; useful for small tiles where the adjacency
    rule is unsatisfiable.
    """
    if c < 1 or period_h < 1 or period_w < 1:
        raise PatternError("precondition", "c, period_h and period_w must be positive")
    if (period_h * period_w) % (NUM_ANGLES * c):
        raise PatternError(
            "pair-balance",
            f"period {period_h}x{period_w} ({period_h * period_w} cells) is not a multiple of 4c = {4 * c}",
        )
    if period_h % 2 or period_w % 2:
        raise PatternError("angle-block", "2x2 angle blocks need even tile extents")

    rng = np.random.default_rng(seed)
    h, w = period_h, period_w
    perm = rng.permutation(NUM_ANGLES)
    yy, xx = np.mgrid[0:h, 0:w]
    ang = perm[2 * (yy % 2) + (xx % 2)]
    classes = [list(zip(*np.nonzero(ang == a))) for a in range(NUM_ANGLES)]
    reps = h * w // (NUM_ANGLES * c)

    best_lam, best_score = None, None
    for restart in range(max_restarts):
        lam = np.empty((h, w), dtype=np.int64)
        for cls in classes:
            vals = rng.permutation(np.repeat(np.arange(c), reps))
            for (y, x), v in zip(cls, vals):
                lam[y, x] = v
        score = _conflicts(lam)
        best_in_run, since_best = score, 0
        for _ in range(max_iters):
            if score == 0 or since_best > patience:
                break
            conflicted = [(y, x) for y in range(h) for x in range(w) if _cell_conflicts(lam, y, x)]
            y, x = conflicted[rng.integers(len(conflicted))]
            cls = classes[ang[y, x]]
            candidates = []
            for (y2, x2) in cls:
                if (y2, x2) == (y, x) or lam[y2, x2] == lam[y, x]:
                    continue
                lam[y, x], lam[y2, x2] = lam[y2, x2], lam[y, x]
                candidates.append((_conflicts(lam), y2, x2))
                lam[y, x], lam[y2, x2] = lam[y2, x2], lam[y, x]
            if not candidates:
                break
            low = min(s for s, _, _ in candidates)
            options = [(y2, x2) for s, y2, x2 in candidates if s == low]
            y2, x2 = options[rng.integers(len(options))]
            if low <= score:
                lam[y, x], lam[y2, x2] = lam[y2, x2], lam[y, x]
                score = low
            if score < best_in_run:
                best_in_run, since_best = score, 0
            else:
                since_best += 1
        if best_score is None or score < best_score:
            best_lam, best_score = lam.copy(), score
        if score == 0:
            logger.debug("pattern c=%d %dx%d found after %d restarts", c, h, w, restart)
            break

    pattern = PatternSpec(np.stack([best_lam, ang], axis=-1), c, wavelengths)
    if best_score:
        if strict:
            raise PatternError(
                "adjacent-bands",
                f"no {h}x{w} tile for c={c} without adjacent consecutive bands after {max_restarts} restarts",
            )
        logger.warning("pattern c=%d %dx%d keeps %d adjacent-band conflicts", c, h, w,
                       len([v for v in validate_pattern(pattern) if v.rule == "adjacent-bands"]))
    return pattern


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def pattern_to_text(p: PatternSpec) -> str:
    lines = ["# MSPFA pattern: grid cells are wavelength_index:angle_index (angles 0,45,90,135 deg)",
             f"period: {p.period_h} {p.period_w}",
             f"num_wavelengths: {p.num_wavelengths}"]
    if p.wavelengths is not None:
        lines.append("wavelengths_nm: " + " ".join(f"{v:g}" for v in p.wavelengths))
    lines.append("angles_deg: 0 45 90 135")
    lines.append("grid:")
    for y in range(p.period_h):
        lines.append(" ".join(f"{int(p.cells[y, x, 0])}:{int(p.cells[y, x, 1])}" for x in range(p.period_w)))
    return "\n".join(lines) + "\n"


def pattern_from_text(text: str) -> PatternSpec:
    header: dict[str, str] = {}
    rows: list[list[tuple[int, int]]] = []
    in_grid = False
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if in_grid:
            rows.append([tuple(int(v) for v in tok.split(":")) for tok in line.split()])
            continue
        key, _, value = line.partition(":")
        key = key.strip()
        if key == "grid":
            in_grid = True
        else:
            header[key] = value.strip()
    if "period" not in header or not rows:
        raise PatternError("format", "pattern text needs 'period:' and a 'grid:' block")
    h, w = (int(v) for v in header["period"].split())
    if len(rows) != h or any(len(r) != w for r in rows):
        raise PatternError("format", f"grid does not match declared period {h}x{w}")
    cells = np.array(rows, dtype=np.int64)
    waves = header.get("wavelengths_nm")
    wavelengths = tuple(float(v) for v in waves.split()) if waves else None
    c = int(header.get("num_wavelengths", len(wavelengths) if wavelengths else cells[..., 0].max() + 1))
    return PatternSpec(cells, c, wavelengths)


def save_pattern(path, p: PatternSpec) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(pattern_to_text(p))
    return path


def load_pattern(path) -> PatternSpec:
    return pattern_from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# mosaic formation and sparse images
# ---------------------------------------------------------------------------

@dataclass
class MosaicImage:
    """Single-plane sensor observation produced through ``pattern``."""

    values: np.ndarray
    pattern: PatternSpec

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64) if not np.issubdtype(
            np.asarray(self.values).dtype, np.floating) else np.asarray(self.values)
        if self.values.ndim != 2:
            raise PatternError("shape", f"mosaic must be 2-d, got shape {self.values.shape}")
        m, n = self.values.shape
        if m % self.pattern.period_h or n % self.pattern.period_w:
            raise PatternError(
                "shape",
                f"mosaic {m}x{n} is not a multiple of the {self.pattern.period_h}x{self.pattern.period_w} period",
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class SparseImage:
    """Observed samples of one polarization angle at their true positions, zeros elsewhere."""

    angle: int
    values: np.ndarray
    mask: np.ndarray


def mosaic(cube: ImageCube, p: PatternSpec) -> MosaicImage:
    """Band-pass sampling: pixel (y, x) records the cube at the tile's (wavelength, angle)."""
    m, n, c, a = cube.values.shape
    if c != p.num_wavelengths:
        raise PatternError("shape", f"cube has {c} wavelengths, pattern expects {p.num_wavelengths}")
    if a != NUM_ANGLES:
        raise PatternError("shape", f"cube has {a} angles, pattern expects {NUM_ANGLES}")
    if m % p.period_h or n % p.period_w:
        raise PatternError("shape", f"cube {m}x{n} is not a multiple of the {p.period_h}x{p.period_w} period")
    lam, ang = p.tiled_maps(m, n)
    yy, xx = np.mgrid[0:m, 0:n]
    return MosaicImage(cube.values[yy, xx, lam, ang], p)


def channel_masks(p: PatternSpec, m: int, n: int, angle: int) -> np.ndarray:
    """Boolean ``m x n x c`` mask of positions observing ``angle`` at each wavelength."""
    lam, ang = p.tiled_maps(m, n)
    return (ang == angle)[..., None] & (lam[..., None] == np.arange(p.num_wavelengths))


def extract_sparse(y: MosaicImage, angle: int) -> SparseImage:
    """Sparse ``m x n x c`` volume holding the samples of one polarization angle."""
    if not 0 <= angle < NUM_ANGLES:
        raise PatternError("range", f"angle index {angle} outside [0, {NUM_ANGLES})")
    mask = channel_masks(y.pattern, y.height, y.width, angle)
    values = np.where(mask, y.values[..., None], 0.0)
    return SparseImage(angle, values, mask)


def sparse_stack(y: MosaicImage) -> np.ndarray:
    """All four sparse images as an ``(4, c, m, n)`` array in angle order."""
    return np.stack([np.transpose(extract_sparse(y, a).values, (2, 0, 1)) for a in range(NUM_ANGLES)])
