"""CSV emission for PSNR tables (method x scene x {MSPI, DoLP}) and reflectance RMSE."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .metrics import MetricsReport

REFERENCE_SCENES = ("Buildings", "Flowers", "GlassesAndBeads", "Mobile")

# Published full-dataset results, (MSPI, DoLP) per scene then the published average.
# The published averages are kept verbatim; they are not the column means.
REFERENCE_ABLATION = {
    "Net1": ((31.26, 19.54), (31.52, 18.86), (26.75, 24.59), (32.19, 21.82), (29.82, 20.69)),
    "Net2": ((33.82, 23.89), (32.90, 20.58), (29.43, 27.83), (36.27, 26.71), (32.39, 23.82)),
    "Net3": ((34.29, 23.96), (33.41, 21.00), (30.40, 28.20), (37.01, 26.59), (33.14, 24.07)),
    "Net4": ((34.56, 24.15), (33.59, 20.79), (30.53, 28.23), (37.22, 26.87), (33.32, 24.05)),
    "MSPDNet": ((34.62, 24.04), (33.68, 20.85), (30.66, 28.43), (37.25, 26.72), (33.42, 24.05)),
}

REFERENCE_COMPARISON = {
    "Bilinear": ((26.43, 23.03), (27.28, 21.02), (25.70, 26.07), (28.66, 26.00), (28.02, 21.56)),
    "Wiener": ((30.70, 21.43), (32.13, 19.92), (28.42, 25.31), (24.67, 21.21), (26.88, 23.50)),
    "CPDNet (2DConv)": ((17.63, 18.38), (17.71, 17.97), (14.95, 18.50), (16.20, 14.73), (16.47, 17.08)),
    "CPDNet (3DConv)": ((32.77, 23.50), (31.95, 20.16), (21.76, 25.44), (34.49, 25.57), (26.89, 23.07)),
    "TCPDNet (2DConv)": ((30.02, 21.14), (29.79, 19.24), (22.84, 23.51), (29.53, 22.62), (26.91, 21.32)),
    "TCPDNet (3DConv)": ((31.96, 22.13), (30.96, 18.73), (24.52, 24.67), (32.53, 22.57), (28.65, 21.48)),
    "MSPDNet": ((34.62, 24.04), (33.68, 20.85), (30.66, 28.43), (37.25, 26.72), (33.42, 24.05)),
}

# Row label used in tables for each network variant.
VARIANT_LABELS = {"Full": "MSPDNet", "Net1": "Net1", "Net2": "Net2", "Net3": "Net3", "Net4": "Net4"}


def _fmt(x: float) -> str:
    return "inf" if x == float("inf") else f"{x:.4f}"


def psnr_header(scenes: Sequence[str]) -> list[str]:
    cols = ["method"]
    for s in scenes:
        cols += [f"{s}_MSPI", f"{s}_DoLP"]
    return cols + ["Average_MSPI", "Average_DoLP", "source"]


def write_psnr_table(path, reports: Iterable[MetricsReport], references: dict | None = None) -> Path:
    """One row per method; optional reference rows appended with source ``published``."""
    reports = list(reports)
    scenes = reports[0].scenes if reports else list(REFERENCE_SCENES)
    for r in reports:
        if r.scenes != scenes:
            raise ValueError(f"report '{r.method}' covers scenes {r.scenes}, expected {scenes}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(psnr_header(scenes))
        for r in reports:
            row = [r.method]
            for s in scenes:
                row += [_fmt(r.mspi[s]), _fmt(r.dolp[s])]
            w.writerow(row + [_fmt(r.average_mspi), _fmt(r.average_dolp), "measured"])
        if references:
            w.writerow([])
            w.writerow(psnr_header(REFERENCE_SCENES))
            for method, cells in references.items():
                row = [method]
                for mspi, dolp in cells:
                    row += [f"{mspi:.2f}", f"{dolp:.2f}"]
                w.writerow(row + ["published"])
    return path


def read_psnr_table(path) -> list[dict[str, str]]:
    """Measured rows of a table written by ``write_psnr_table``."""
    with open(path, newline="") as fh:
        rows = []
        for row in csv.DictReader(fh):
            if not row.get("method") or row.get("source") != "measured":
                break
            rows.append(row)
    return rows


def write_reflectance_table(path, wavelengths: Sequence[float], reports: Iterable[MetricsReport]) -> Path:
    """Columns: wavelength then one scene-averaged RMSE column per method."""
    reports = list(reports)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curves = [np.asarray(r.average_reflectance) for r in reports]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wavelength_nm"] + [r.method for r in reports])
        for k, lam in enumerate(wavelengths):
            w.writerow([f"{lam:g}"] + [f"{c[k]:.6g}" for c in curves])
    return path
