"""MSPDNet: sparse images -> Tri-Modules -> MS-Modules -> joint MS-Module.

Tensor layout inside the network is ``(N, C, D, H, W)`` with the wavelength
axis as depth ``D`` and a separate learned feature-channel axis ``C``. The 2D
ablation (Net2) folds depth into channels and uses ``(N, C, H, W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .cube import ImageCube
from .pattern import NUM_ANGLES, MosaicImage, PatternError, sparse_stack
from .tensor import Tensor

VARIANTS = ("Full", "Net1", "Net2", "Net3", "Net4")
MS_FILTERS = (8, 16, 32, 64)


@dataclass
class NetworkConfig:
    """Declarative description of one network variant.

    ``ms_filters`` are the hidden widths after the single-channel input
    (the 1 -> 8 -> 16 -> 32 -> 64 progression); the residual block runs at
    the second width. ``gradient_weight`` is the gradient-loss balance,
    forced to 0 for Net4.
    """

    c: int
    period_h: int
    period_w: int
    variant: str = "Full"
    ms_filters: tuple[int, ...] = MS_FILTERS
    gradient_weight: float = 1.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.ms_filters = tuple(int(f) for f in self.ms_filters)
        if len(self.ms_filters) != 4 or min(self.ms_filters) < 1:
            raise ValueError("ms_filters needs four positive widths")
        if self.c < 1 or self.period_h < 1 or self.period_w < 1:
            raise ValueError("c and the period extents must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")

    @property
    def conv_mode(self) -> str:
        return "2d" if self.variant == "Net2" else "3d"

    @property
    def use_mapping(self) -> bool:
        return self.variant != "Net1"

    @property
    def use_joint(self) -> bool:
        return self.variant not in ("Net1", "Net3")

    @property
    def loss_weight(self) -> float:
        return 0.0 if self.variant == "Net4" else float(self.gradient_weight)

    @property
    def tri_kernel(self) -> tuple[int, int, int]:
        return (self.c, 2 * self.period_h - 1, 2 * self.period_w - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ms_filters"] = list(self.ms_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _ms_layers(cin: int, filters: Sequence[int], nsp: int) -> list[tuple[str, int, int, int]]:
    """(name, C_out, C_in, kernel edge) for one MS-Module."""
    f0, f1, f2, f3 = filters
    return [
        ("conv1", f0, cin, 3),
        ("conv2", f1, f0, 3),
        ("res1", f1, f1, 3),
        ("res2", f1, f1, 3),
        ("conv3", f2, f1, 3),
        ("conv4", f3, f2, 3),
        ("out", cin, f3, 1),
    ]


@dataclass
class MSPDNet:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        if not self.params:
            self.params = init_params(self.config)

    # -- parameters -------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise ValueError(f"parameter '{k}' has shape {p.shape}, checkpoint has {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=p.dtype)

    def save(self, stem) -> Path:
        return save_checkpoint(stem, self.state_dict(), {"config": self.config.to_dict()})

    @classmethod
    def load(cls, stem) -> "MSPDNet":
        arrays, meta = load_checkpoint(stem)
        net = cls(NetworkConfig.from_dict(meta["config"]))
        net.load_state_dict(arrays)
        return net

    # -- forward ----------------------------------------------------------
    def forward_sparse(self, sparse: np.ndarray) -> Tensor:
        """``sparse``: (4, c, m, n) stack of sparse images -> Tensor (m, n, c, 4)."""
        cfg = self.config
        if sparse.ndim != 4 or sparse.shape[:2] != (NUM_ANGLES, cfg.c):
            raise ValueError(f"sparse stack must be (4, {cfg.c}, m, n), got {sparse.shape}")
        sparse = sparse.astype(cfg.dtype, copy=False)
        _, c, m, n = sparse.shape
        p = self.params
        branches = []
        for a in range(NUM_ANGLES):
            if cfg.conv_mode == "3d":
                x = Tensor(sparse[a][None, None])
            else:
                x = Tensor(sparse[a][None])
            out = tri_module(x, p[f"tri{a}.weight"], p[f"tri{a}.bias"], cfg)
            if cfg.use_mapping:
                out = ms_module(out, p, f"ms{a}", cfg.conv_mode)
            branches.append(out)
        # 0, 45, 90, 135 blocks stacked wavelength-wise: depth (3D) or channel (2D) axis
        axis = 2 if cfg.conv_mode == "3d" else 1
        joined = T.concat(branches, axis=axis)
        if cfg.use_joint:
            joined = ms_module(joined, p, "joint", cfg.conv_mode)
        vol = joined.reshape(NUM_ANGLES, c, m, n)
        return vol.transpose(2, 3, 1, 0)

    def forward(self, y: MosaicImage) -> Tensor:
        cfg = self.config
        if y.pattern.num_wavelengths != cfg.c or (y.pattern.period_h, y.pattern.period_w) != (
                cfg.period_h, cfg.period_w):
            raise PatternError(
                "shape",
                f"mosaic pattern (c={y.pattern.num_wavelengths}, {y.pattern.period_h}x{y.pattern.period_w}) "
                f"does not match network (c={cfg.c}, {cfg.period_h}x{cfg.period_w})",
            )
        return self.forward_sparse(sparse_stack(y))

    def demosaic(self, y: MosaicImage, wavelengths: Sequence[float] | None = None) -> ImageCube:
        values = self.forward(y).data.astype(np.float64)
        if wavelengths is None:
            wavelengths = y.pattern.wavelengths or tuple(float(i) for i in range(self.config.c))
        return ImageCube(values, wavelengths, reconstructed=True)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def tri_pad(cfg: NetworkConfig):
    """Extent-preserving padding for the (c, 2h-1, 2w-1) kernel; depth split floor/ceil."""
    lo = (cfg.c - 1) // 2
    spatial = [(cfg.period_h - 1,) * 2, (cfg.period_w - 1,) * 2]
    if cfg.conv_mode == "2d":
        return spatial
    return [(lo, cfg.c - 1 - lo)] + spatial


def tri_module(x: Tensor, weight: Tensor, bias: Tensor, cfg: NetworkConfig) -> Tensor:
    """Single wide convolution interpolating a sparse volume to the intermediate image."""
    conv = T.conv3d if cfg.conv_mode == "3d" else T.conv2d
    return conv(x, weight, bias, tri_pad(cfg))


def ms_module(x: Tensor, params: dict[str, Tensor], prefix: str, conv_mode: str = "3d") -> Tensor:
    """Residual 3D-conv stack with a global shortcut: ``x + f(x)``."""
    conv = T.conv3d if conv_mode == "3d" else T.conv2d

    def layer(h, name, pad=1):
        return conv(h, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"], pad)

    h = T.relu(layer(x, "conv1"))
    h = T.relu(layer(h, "conv2"))
    r = T.relu(layer(h, "res1"))
    r = layer(r, "res2")
    h = T.relu(h + r)
    h = T.relu(layer(h, "conv3"))
    h = T.relu(layer(h, "conv4"))
    return x + layer(h, "out", pad=0)


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    kd, kh, kw = cfg.tri_kernel
    for a in range(NUM_ANGLES):
        if cfg.conv_mode == "3d":
            shapes[f"tri{a}.weight"] = (1, 1, kd, kh, kw)
            shapes[f"tri{a}.bias"] = (1,)
        else:
            shapes[f"tri{a}.weight"] = (cfg.c, cfg.c, kh, kw)
            shapes[f"tri{a}.bias"] = (cfg.c,)
    modules = []
    if cfg.use_mapping:
        modules += [(f"ms{a}", cfg.c) for a in range(NUM_ANGLES)]
    if cfg.use_joint:
        modules.append(("joint", NUM_ANGLES * cfg.c))
    nsp = 3 if cfg.conv_mode == "3d" else 2
    for prefix, depth in modules:
        cin = 1 if cfg.conv_mode == "3d" else depth
        for name, cout, ci, k in _ms_layers(cin, cfg.ms_filters, nsp):
            shapes[f"{prefix}.{name}.weight"] = (cout, ci) + (k,) * nsp
            shapes[f"{prefix}.{name}.bias"] = (cout,)
    return shapes


def init_params(cfg: NetworkConfig) -> dict[str, Tensor]:
    """Weights ~ U[-b, b] with ``b = sqrt(1 / fan_in)``; biases zero; seeded by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = math.prod(shape[1:])
            bound = math.sqrt(1.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(cfg.dtype), requires_grad=True)
    return params


def zero_mapping_weights(net: MSPDNet) -> None:
    """Zero every MS-Module weight and bias so each module reduces to its shortcut."""
    for name, p in net.params.items():
        if not name.startswith("tri"):
            p.data[...] = 0.0
