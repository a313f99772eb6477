"""Dataset ingestion, patching and experiment orchestration."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .baselines import bilinear_demosaic, wiener_demosaic, wiener_train
from .cube import CubeFormatError, ImageCube, center_crop, read_cube, read_png_scene, select_wavelengths, \
    synthetic_cube, TWELVE_BIT_PEAK, write_cube
from .metrics import MetricsReport, dolp, render_rgb, stokes
from .model import VARIANTS, MSPDNet, NetworkConfig
from .pattern import MosaicImage, PatternSpec, load_pattern, mosaic, pattern_from_text, pattern_to_text, save_pattern
from .report import REFERENCE_ABLATION, REFERENCE_COMPARISON, VARIANT_LABELS, write_psnr_table, \
    write_reflectance_table
from .train import Patch, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "MSPD_DATA_ROOT"
CUBE_SUFFIX = ".mspc"
BASELINES = ("bilinear", "wiener")
METHODS = BASELINES + VARIANTS


class IngestError(RuntimeError):
    def __init__(self, errors: dict[str, str]):
        super().__init__("; ".join(f"{scene}: {msg}" for scene, msg in errors.items()))
        self.errors = errors


class StageError(RuntimeError):
    def __init__(self, stage: str, scene: str | None, cause: BaseException):
        where = f" (scene '{scene}')" if scene else ""
        super().__init__(f"stage '{stage}'{where} failed: {cause}")
        self.stage, self.scene = stage, scene


def default_data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------

@dataclass
class SceneEntry:
    name: str
    source: str
    kind: str  # "png" or "cube"
    height: int
    width: int
    wavelengths: list[float]


@dataclass
class Catalog:
    scenes: dict[str, SceneEntry] = field(default_factory=dict)
    wavelengths: list[float] | None = None
    peak: float = TWELVE_BIT_PEAK

    def __len__(self) -> int:
        return len(self.scenes)

    def names(self) -> list[str]:
        return list(self.scenes)

    def load(self, name: str) -> ImageCube:
        e = self.scenes[name]
        if e.kind == "png":
            cube = read_png_scene(e.source, peak=self.peak, wavelengths=self.wavelengths)
        else:
            cube = read_cube(e.source)
            if self.wavelengths is not None:
                cube = select_wavelengths(cube, self.wavelengths)
        cube.name = name
        return cube

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"wavelengths_nm": self.wavelengths, "peak": self.peak,
               "scenes": [asdict(e) for e in self.scenes.values()]}
        path.write_text(json.dumps(doc, indent=2) + "\n")
        return path

    @classmethod
    def load_file(cls, path) -> "Catalog":
        doc = json.loads(Path(path).read_text())
        scenes = {d["name"]: SceneEntry(**d) for d in doc["scenes"]}
        return cls(scenes, doc.get("wavelengths_nm"), doc.get("peak", TWELVE_BIT_PEAK))


def _scene_sources(root: Path) -> list[tuple[str, Path, str]]:
    found = []
    for p in sorted(root.rglob(f"*{CUBE_SUFFIX}")):
        found.append((p.stem, p, "cube"))
    dirs = sorted({p.parent for p in root.rglob("*.png")})
    for d in dirs:
        found.append((d.name if d != root else root.name, d, "png"))
    return found


def ingest(root, wavelengths: Sequence[float] | None = None, peak: float = TWELVE_BIT_PEAK,
           catalog_path=None, strict: bool = True) -> Catalog:
    """Scan ``root`` for scenes and check each one loads.

    A scene is either a native cube file (``*.mspc``) or a directory of
    ``<w>nm_<a>deg.png`` planes. Loading is lazy afterwards; the catalog only
    stores sources and dimensions. Failures are collected per scene and raised
    together (``strict``) or logged and skipped.
    """
    root = Path(root)
    if not root.exists():
        raise IngestError({str(root): "dataset root does not exist"})
    waves = [float(w) for w in wavelengths] if wavelengths is not None else None
    catalog = Catalog(wavelengths=waves, peak=peak)
    errors: dict[str, str] = {}
    for name, src, kind in _scene_sources(root):
        if name in catalog.scenes or name in errors:
            errors[name] = f"duplicate scene name ({src})"
            continue
        entry = SceneEntry(name, str(src), kind, 0, 0, [])
        catalog.scenes[name] = entry
        try:
            cube = catalog.load(name)
        except (CubeFormatError, OSError, ValueError) as exc:
            del catalog.scenes[name]
            errors[name] = str(exc)
            continue
        entry.height, entry.width, entry.wavelengths = cube.height, cube.width, list(cube.wavelengths)
    shapes = {(e.height, e.width) for e in catalog.scenes.values()}
    if len(shapes) > 1:
        log.warning("scenes have differing extents: %s", sorted(shapes))
    if errors:
        if strict:
            raise IngestError(errors)
        for scene, msg in errors.items():
            log.warning("skipping scene %s: %s", scene, msg)
    if not catalog.scenes and not errors:
        raise IngestError({str(root): "no scenes found"})
    if catalog_path is not None:
        catalog.save(catalog_path)
    log.info("ingested %d scenes from %s", len(catalog), root)
    return catalog


def make_synthetic_dataset(root, scenes: int = 4, height: int = 64, width: int = 64,
                           wavelengths: Sequence[float] = (450.0, 520.0, 590.0, 660.0), seed: int = 0,
                           fmt: str = "cube") -> list[Path]:
    root = Path(root)
    paths = []
    for k in range(scenes):
        cube = synthetic_cube(height, width, wavelengths, seed=seed + k, name=f"scene{k:02d}")
        if fmt == "cube":
            paths.append(write_cube(root / f"scene{k:02d}{CUBE_SUFFIX}", cube))
        elif fmt == "png":
            from .cube import write_png_scene
            paths.append(write_png_scene(root / f"scene{k:02d}", cube))
        else:
            raise ValueError(f"unknown synthetic format {fmt!r}")
    return paths


def save_mosaic(path, y: MosaicImage) -> Path:
    """``.npz`` holding the mosaic plane and the text form of its pattern."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, values=y.values, pattern=np.array(pattern_to_text(y.pattern)))
    return path


def load_mosaic(path) -> MosaicImage:
    with np.load(path) as z:
        return MosaicImage(z["values"].copy(), pattern_from_text(str(z["pattern"])))


# ---------------------------------------------------------------------------
# experiment specification and patching
# ---------------------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """Everything needed to rerun one experiment.

    ``val_scenes`` empty means validation patches are a seeded ``val_fraction``
    of the training-scene patches.
    """

    pattern: str
    data_root: str | None = None
    train_scenes: list[str] = field(default_factory=list)
    val_scenes: list[str] = field(default_factory=list)
    test_scenes: list[str] = field(default_factory=list)
    wavelengths: list[float] | None = None
    patch_size: int = 32
    stride: int | None = None
    val_fraction: float = 0.125
    methods: list[str] = field(default_factory=lambda: ["bilinear"])
    epochs: int = 1
    variant_epochs: dict[str, int] = field(default_factory=dict)
    max_steps: int | None = 500
    learning_rate: float = 1e-4
    gradient_weight: float = 1.0
    ms_filters: list[int] | None = None
    checkpoint: str | None = None
    wiener_margin: int | None = None
    wiener_regularization: float = 1e-4
    peak: float = TWELVE_BIT_PEAK
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
        sets = {"train": set(self.train_scenes), "validation": set(self.val_scenes), "test": set(self.test_scenes)}
        for a, b in (("train", "validation"), ("train", "test"), ("validation", "test")):
            both = sets[a] & sets[b]
            if both:
                raise ValueError(f"{a} and {b} scenes overlap: {sorted(both)}")
        if self.patch_size < 1 or not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("patch_size must be positive and val_fraction in [0, 1)")

    @property
    def patch_stride(self) -> int:
        return self.stride or self.patch_size

    def load_pattern(self) -> PatternSpec:
        return load_pattern(self.pattern)

    def check_pattern(self, p: PatternSpec) -> None:
        if self.patch_size % p.period_h or self.patch_size % p.period_w or \
                self.patch_stride % p.period_h or self.patch_stride % p.period_w:
            raise ValueError(f"patch size {self.patch_size} and stride {self.patch_stride} must be multiples "
                             f"of the {p.period_h}x{p.period_w} period")

    def epochs_for(self, variant: str) -> int:
        return int(self.variant_epochs.get(variant, self.epochs))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls(**json.loads(Path(path).read_text()))


def patch_grid(m: int, n: int, size: int, stride: int | None = None) -> list[tuple[int, int]]:
    """Top-left corners of every ``size`` square crop on a ``stride`` lattice."""
    stride = stride or size
    if size > m or size > n:
        raise ValueError(f"patch size {size} exceeds scene extent {m}x{n}")
    return [(y, x) for y in range(0, m - size + 1, stride) for x in range(0, n - size + 1, stride)]


@dataclass
class PatchSets:
    train: list[Patch]
    val: list[Patch]
    sources: dict[str, list[tuple[str, int, int]]] = field(default_factory=dict)


def _crop_to(cube: ImageCube, y: int, x: int, size: int) -> ImageCube:
    return ImageCube(cube.values[y:y + size, x:x + size].copy(), cube.wavelengths, cube.angles, name=cube.name)


def make_patches(catalog: Catalog, spec: ExperimentSpec, pattern: PatternSpec | None = None) -> PatchSets:
    """Period-aligned crops of the training (and validation) scenes.

    Scenes are first center-cropped to period multiples. With explicit
    ``val_scenes`` the split follows scene membership; otherwise the pooled
    training patches are shuffled under ``spec.seed`` and the last
    ``val_fraction`` becomes validation.
    """
    pattern = pattern or spec.load_pattern()
    spec.check_pattern(pattern)
    size, stride = spec.patch_size, spec.patch_stride

    def crops(names):
        out = []
        for name in names:
            cube = center_crop(catalog.load(name), pattern.period_h, pattern.period_w)
            for y, x in patch_grid(cube.height, cube.width, size, stride):
                out.append(((name, y, x), _crop_to(cube, y, x, size)))
            log.info("scene %s: %d patches", name, len(patch_grid(cube.height, cube.width, size, stride)))
        return out

    pool = crops(spec.train_scenes)
    if spec.val_scenes:
        tr, va = pool, crops(spec.val_scenes)
    else:
        order = np.random.default_rng(spec.seed).permutation(len(pool))
        n_val = int(round(spec.val_fraction * len(pool)))
        cut = len(pool) - n_val
        tr = [pool[i] for i in order[:cut]]
        va = [pool[i] for i in order[cut:]]
    log.info("patches: %d train, %d validation", len(tr), len(va))
    to_patch = lambda items: [Patch(mosaic(c, pattern), c) for _, c in items]
    return PatchSets(to_patch(tr), to_patch(va), {"train": [k for k, _ in tr], "val": [k for k, _ in va]})


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_directory(base, label: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(base)
    path = base / f"{label}-{stamp}"
    k = 1
    while path.exists():
        k += 1
        path = base / f"{label}-{stamp}-{k}"
    path.mkdir(parents=True)
    return path


def _save_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)).save(path)


def _write_artifacts(directory: Path, scene: str, pred: ImageCube) -> None:
    """Reconstructed cube, 0-degree RGB rendering and DoLP of the last band."""
    write_cube(directory / f"{scene}{CUBE_SUFFIX}", pred)
    _save_png(directory / f"{scene}_dolp.png", dolp(stokes(pred))[..., -1])
    try:
        rgb = render_rgb(pred, 0.0)
    except ValueError as exc:
        log.warning("no RGB rendering for %s: %s", scene, exc)
        return
    _save_png(directory / f"{scene}_rgb.png", rgb)


def _label(method: str) -> str:
    return VARIANT_LABELS.get(method, method.capitalize())


@dataclass
class ExperimentResult:
    run_dir: Path
    reports: list[MetricsReport]
    table: Path
    reflectance_table: Path


def _network_config(spec: ExperimentSpec, pattern: PatternSpec, variant: str) -> NetworkConfig:
    extra = {"ms_filters": tuple(spec.ms_filters)} if spec.ms_filters else {}
    return NetworkConfig(pattern.num_wavelengths, pattern.period_h, pattern.period_w, variant=variant,
                         gradient_weight=spec.gradient_weight, seed=spec.seed, **extra)


def _build_method(method: str, spec: ExperimentSpec, pattern: PatternSpec, catalog: Catalog,
                  patches: PatchSets | None, out: Path):
    """Return a ``MosaicImage -> ImageCube`` callable for ``method``."""
    if method == "bilinear":
        return bilinear_demosaic
    if method == "wiener":
        margin = (spec.wiener_margin,) * 2 if spec.wiener_margin is not None else None
        cubes = [center_crop(catalog.load(s), pattern.period_h, pattern.period_w) for s in spec.train_scenes]
        op = wiener_train(cubes, pattern, margin, spec.wiener_regularization)
        op.save(out / "wiener.npz")
        return lambda y, wavelengths=None: wiener_demosaic(y, op, wavelengths)
    if spec.checkpoint:
        net = MSPDNet.load(spec.checkpoint)
        if net.config.variant != method:
            raise ValueError(f"checkpoint holds variant {net.config.variant}, requested {method}")
        return net.demosaic
    cfg = _network_config(spec, pattern, method)
    net = MSPDNet(cfg)
    tc = TrainConfig(epochs=spec.epochs_for(method), learning_rate=spec.learning_rate, seed=spec.seed,
                     max_steps=spec.max_steps, output_dir=str(out / f"train-{method}"))
    cfg.save(out / f"train-{method}" / "network.json")
    train(net, patches.train, patches.val, tc)
    return net.demosaic


def run_experiment(spec: ExperimentSpec, catalog: Catalog | None = None, references: dict | None = None,
                   label: str = "experiment") -> ExperimentResult:
    """Train/fit each method, demosaic every test scene, score and write all artifacts."""

    def stage(name, fn, scene=None):
        try:
            return fn()
        except Exception as exc:
            raise StageError(name, scene, exc) from exc

    pattern = stage("pattern", spec.load_pattern)
    stage("pattern", lambda: spec.check_pattern(pattern))
    if catalog is None:
        root = spec.data_root or default_data_root()
        if root is None:
            raise StageError("ingest", None, ValueError(f"no data root given and ${DATA_ROOT_ENV} unset"))
        catalog = stage("ingest", lambda: ingest(root, spec.wavelengths, spec.peak))
    for s in spec.train_scenes + spec.val_scenes + spec.test_scenes:
        if s not in catalog.scenes:
            raise StageError("ingest", s, KeyError(f"scene not in catalog ({catalog.names()})"))
    if not spec.test_scenes:
        raise StageError("split", None, ValueError("no test scenes"))

    out = run_directory(spec.output_dir, label)
    spec.save(out / "spec.json")
    save_pattern(out / "pattern.txt", pattern)
    catalog.save(out / "catalog.json")

    learned = [m for m in spec.methods if m in VARIANTS]
    patches = None
    if learned and not spec.checkpoint:
        if not spec.train_scenes:
            raise StageError("patch", None, ValueError("learned methods need training scenes"))
        patches = stage("patch", lambda: make_patches(catalog, spec, pattern))
        (out / "patches.json").write_text(json.dumps(patches.sources) + "\n")

    tests = {}
    for s in spec.test_scenes:
        truth = stage("load", lambda: center_crop(catalog.load(s), pattern.period_h, pattern.period_w), s)
        tests[s] = (truth, stage("mosaic", lambda: mosaic(truth, pattern), s))

    reports = []
    for method in spec.methods:
        demosaic = stage(f"fit:{method}", lambda: _build_method(method, spec, pattern, catalog, patches, out))
        report = MetricsReport(_label(method))
        for s, (truth, y) in tests.items():
            pred = stage(f"demosaic:{method}", lambda: demosaic(y, truth.wavelengths), s)
            stage(f"evaluate:{method}", lambda: report.add(s, pred, truth), s)
            stage("write", lambda: _write_artifacts(out / "recon" / method, s, pred), s)
        log.info("%s: average MSPI %.3f dB, DoLP %.3f dB", report.method, report.average_mspi,
                 report.average_dolp)
        reports.append(report)

    table = write_psnr_table(out / "psnr.csv", reports, references)
    wl = tests[spec.test_scenes[0]][0].wavelengths
    refl = write_reflectance_table(out / "reflectance_rmse.csv", wl, reports)
    return ExperimentResult(out, reports, table, refl)


def train_model(spec: ExperimentSpec, variant: str, catalog: Catalog | None = None) -> tuple[Path, TrainResult]:
    """Train one variant on the spec's training scenes; checkpoint and log land in a run directory."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    pattern = spec.load_pattern()
    if catalog is None:
        root = spec.data_root or default_data_root()
        if root is None:
            raise StageError("ingest", None, ValueError(f"no data root given and ${DATA_ROOT_ENV} unset"))
        catalog = ingest(root, spec.wavelengths, spec.peak)
    out = run_directory(spec.output_dir, f"train-{variant}")
    spec.save(out / "spec.json")
    save_pattern(out / "pattern.txt", pattern)
    patches = make_patches(catalog, spec, pattern)
    cfg = _network_config(spec, pattern, variant)
    cfg.save(out / "network.json")
    net = MSPDNet(cfg)
    tc = TrainConfig(epochs=spec.epochs_for(variant), learning_rate=spec.learning_rate, seed=spec.seed,
                     max_steps=spec.max_steps, output_dir=str(out))
    return out, train(net, patches.train, patches.val, tc)


def ablate(spec: ExperimentSpec, catalog: Catalog | None = None,
           variants: Iterable[str] = ("Net1", "Net2", "Net3", "Net4", "Full")) -> ExperimentResult:
    """All network variants in one table, with the published ablation rows appended."""
    spec = ExperimentSpec(**{**spec.to_dict(), "methods": list(variants), "checkpoint": None})
    return run_experiment(spec, catalog, references=REFERENCE_ABLATION, label="ablate")


def compare(spec: ExperimentSpec, catalog: Catalog | None = None) -> ExperimentResult:
    return run_experiment(spec, catalog, references=REFERENCE_COMPARISON, label="compare")
