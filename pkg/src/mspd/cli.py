"""Command-line entry point: ``mspd <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .baselines import WienerOperator, bilinear_demosaic, wiener_demosaic
from .cube import read_cube, wavelength_grid, write_cube
from .model import VARIANTS, MSPDNet
from .pattern import PatternError, generate_pattern, load_pattern, mosaic, save_pattern, validate_pattern
from .report import REFERENCE_ABLATION, REFERENCE_COMPARISON, REFERENCE_SCENES, psnr_header, read_psnr_table

log = logging.getLogger("mspd")

SPEC_FLAGS = {
    "pattern": "pattern", "data_root": "data_root", "train_scenes": "train_scenes",
    "val_scenes": "val_scenes", "test_scenes": "test_scenes", "wavelengths": "wavelengths",
    "patch_size": "patch_size", "stride": "stride", "val_fraction": "val_fraction", "methods": "methods",
    "epochs": "epochs", "max_steps": "max_steps", "learning_rate": "lr", "gradient_weight": "gradient_weight",
    "ms_filters": "ms_filters", "checkpoint": "checkpoint", "wiener_margin": "wiener_margin",
    "wiener_regularization": "wiener_regularization", "peak": "peak", "seed": "seed",
    "output_dir": "output_dir",
}


class UsageError(Exception):
    """Missing or inconsistent command-line input."""


def parse_wavelengths(text: str | None) -> list[float] | None:
    """``"420:720:20"`` (inclusive grid) or ``"450,520,590"``."""
    if not text:
        return None
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        return wavelength_grid(start, stop, step)
    return [float(t) for t in text.split(",")]


def parse_period(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) == 1:
        return int(parts[0]), int(parts[0])
    return int(parts[0]), int(parts[1])


def _add_spec_args(p: argparse.ArgumentParser, methods: bool = True) -> None:
    p.add_argument("--spec", help="experiment spec JSON; flags given explicitly override it")
    p.add_argument("--pattern", help="pattern file")
    p.add_argument("--data-root", help=f"dataset root (default ${pipeline.DATA_ROOT_ENV})")
    p.add_argument("--train-scenes", nargs="*")
    p.add_argument("--val-scenes", nargs="*")
    p.add_argument("--test-scenes", nargs="*")
    p.add_argument("--wavelengths", type=parse_wavelengths, help="subset, e.g. 420:720:20")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--val-fraction", type=float)
    if methods:
        p.add_argument("--methods", nargs="+", choices=pipeline.METHODS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--gradient-weight", type=float)
    p.add_argument("--ms-filters", type=int, nargs=4, metavar="N",
                   help="hidden MS-Module widths (default 8 16 32 64)")
    p.add_argument("--checkpoint")
    p.add_argument("--wiener-margin", type=int)
    p.add_argument("--wiener-regularization", type=float)
    p.add_argument("--peak", type=float, help="source full-scale value (4095 for 12-bit)")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")


def spec_from_args(args) -> pipeline.ExperimentSpec:
    base = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for field_name, attr in SPEC_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            base[field_name] = value
    if not base.get("data_root"):
        env = pipeline.default_data_root()
        base["data_root"] = str(env) if env else None
    if "pattern" not in base:
        raise UsageError("a pattern file is required (--pattern or --spec)")
    return pipeline.ExperimentSpec(**base)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    h, w = parse_period(args.size)
    paths = pipeline.make_synthetic_dataset(args.out, args.scenes, h, w, parse_wavelengths(args.wavelengths),
                                            args.seed, args.format)
    for p in paths:
        print(p)
    return 0


def cmd_pattern_gen(args) -> int:
    ph, pw = parse_period(args.period)
    p = generate_pattern(args.c, ph, pw, args.seed, wavelengths=parse_wavelengths(args.wavelengths),
                         strict=not args.allow_violations)
    save_pattern(args.out, p)
    violations = validate_pattern(p)
    print(f"wrote {args.out} (sha256 {p.digest()[:12]}, {len(violations)} violations)")
    return 0


def cmd_pattern_validate(args) -> int:
    violations = validate_pattern(load_pattern(args.pattern_file))
    for v in violations:
        print(v)
    print(f"{len(violations)} violation(s)")
    return 1 if violations else 0


def cmd_ingest(args) -> int:
    root = args.data_root or pipeline.default_data_root()
    if root is None:
        raise UsageError(f"pass --data-root or set ${pipeline.DATA_ROOT_ENV}")
    out = pipeline.run_directory(args.output_dir, "ingest")
    cat = pipeline.ingest(root, parse_wavelengths(args.wavelengths), args.peak, out / "catalog.json",
                          strict=not args.skip_bad)
    for e in cat.scenes.values():
        print(f"{e.name}\t{e.height}x{e.width}\t{len(e.wavelengths)} bands\t{e.kind}\t{e.source}")
    print(f"catalog: {out / 'catalog.json'}")
    return 0


def cmd_mosaic(args) -> int:
    cube = read_cube(args.cube)
    y = mosaic(cube, load_pattern(args.pattern))
    pipeline.save_mosaic(args.out, y)
    print(f"wrote {args.out}")
    return 0


def cmd_demosaic(args) -> int:
    y = pipeline.load_mosaic(args.mosaic)
    waves = parse_wavelengths(args.wavelengths)
    if args.method == "bilinear":
        cube = bilinear_demosaic(y, waves)
    elif args.method == "wiener":
        if not args.wiener:
            raise UsageError("--wiener operator file required")
        cube = wiener_demosaic(y, WienerOperator.load(args.wiener), waves)
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint required for network demosaicking")
        cube = MSPDNet.load(args.checkpoint).demosaic(y, waves)
    write_cube(args.out, cube)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    spec = spec_from_args(args)
    out, result = pipeline.train_model(spec, args.variant)
    last = result.log[-1] if result.log else None
    if last:
        print(f"epoch {last['epoch']}: train {last['train_loss']:.6g} val {last['val_loss']:.6g}")
    print(f"checkpoint: {out / 'last'}")
    return 0


def cmd_eval(args) -> int:
    spec = spec_from_args(args)
    res = pipeline.compare(spec) if args.with_reference else pipeline.run_experiment(spec, label="eval")
    _print_reports(res)
    return 0


def cmd_ablate(args) -> int:
    spec = spec_from_args(args)
    res = pipeline.ablate(spec, variants=args.variants)
    _print_reports(res)
    return 0


def cmd_report(args) -> int:
    rows = []
    for run in args.runs:
        table = Path(run) / "psnr.csv" if Path(run).is_dir() else Path(run)
        rows += read_psnr_table(table)
    if not rows:
        raise UsageError("no measured rows found")
    refs = {"ablation": REFERENCE_ABLATION, "comparison": REFERENCE_COMPARISON}.get(args.reference)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
        if refs:
            raw = csv.writer(fh)
            raw.writerow([])
            raw.writerow(psnr_header(REFERENCE_SCENES))
            for method, cells in refs.items():
                raw.writerow([method] + [f"{v:.2f}" for pair in cells for v in pair] + ["published"])
    print(f"wrote {out} ({len(rows)} rows)")
    return 0


def _print_reports(res) -> None:
    for r in res.reports:
        print(f"{r.method:10s} MSPI {r.average_mspi:8.3f} dB  DoLP {r.average_dolp:8.3f} dB")
    print(f"run directory: {res.run_dir}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mspd", description="Multispectral polarization demosaicking")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=4)
    p.add_argument("--size", default="64x64")
    p.add_argument("--wavelengths", default="450,520,590,660")
    p.add_argument("--format", choices=("cube", "png"), default="cube")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pattern-gen", help="generate a filter-array pattern")
    p.add_argument("--c", type=int, required=True, help="number of wavelengths")
    p.add_argument("--period", required=True, help="tile extent, e.g. 8x8")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--wavelengths")
    p.add_argument("--allow-violations", action="store_true",
                   help="write the best pattern found even if constraints cannot all be met")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pattern_gen)

    p = sub.add_parser("pattern-validate", help="list constraint violations of a pattern file")
    p.add_argument("pattern_file")
    p.set_defaults(func=cmd_pattern_validate)

    p = sub.add_parser("ingest", help="catalog a dataset directory")
    p.add_argument("--data-root")
    p.add_argument("--wavelengths", help="subset, e.g. 420:720:20")
    p.add_argument("--peak", type=float, default=4095.0)
    p.add_argument("--skip-bad", action="store_true")
    p.add_argument("--output-dir", default="runs")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("mosaic", help="simulate the filter-array observation of a cube file")
    p.add_argument("--cube", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mosaic)

    p = sub.add_parser("demosaic", help="reconstruct a cube from a mosaic file")
    p.add_argument("--mosaic", required=True)
    p.add_argument("--method", choices=("bilinear", "wiener", "network"), default="bilinear")
    p.add_argument("--wiener")
    p.add_argument("--checkpoint")
    p.add_argument("--wavelengths")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_demosaic)

    p = sub.add_parser("train", help="train one network variant")
    _add_spec_args(p, methods=False)
    p.add_argument("--variant", choices=VARIANTS, default="Full")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="demosaic and score the test scenes")
    _add_spec_args(p)
    p.add_argument("--with-reference", action="store_true", help="append published comparison rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and score every network variant")
    _add_spec_args(p, methods=False)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=["Net1", "Net2", "Net3", "Net4", "Full"])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge psnr.csv tables from several runs")
    p.add_argument("runs", nargs="+", help="run directories or psnr.csv files")
    p.add_argument("--reference", choices=("none", "ablation", "comparison"), default="none")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, PatternError, pipeline.IngestError, pipeline.StageError, ValueError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
