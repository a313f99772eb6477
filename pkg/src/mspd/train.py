"""Training loop: batch size 1, Adam, per-epoch CSV log and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cube import ImageCube
from .loss import loss
from .model import MSPDNet
from .optim import AdamState, NonFiniteGradient, adam_step
from .pattern import MosaicImage, sparse_stack

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "wall_time")


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    shuffle: bool = True
    max_steps: int | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass
class Patch:
    """One training pair with its sparse stack precomputed."""

    mosaic: MosaicImage
    truth: ImageCube
    sparse: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.mosaic.values.shape != self.truth.values.shape[:2]:
            raise ValueError(
                f"mosaic {self.mosaic.values.shape} and cube {self.truth.values.shape[:2]} extents differ")
        self.sparse = sparse_stack(self.mosaic)


@dataclass
class TrainResult:
    net: MSPDNet
    state: AdamState
    log: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def _check(patches: Sequence[Patch], net: MSPDNet, label: str) -> None:
    cfg = net.config
    for i, p in enumerate(patches):
        pat = p.mosaic.pattern
        if (pat.num_wavelengths, pat.period_h, pat.period_w) != (cfg.c, cfg.period_h, cfg.period_w):
            raise ValueError(
                f"{label} patch {i}: pattern (c={pat.num_wavelengths}, {pat.period_h}x{pat.period_w}) "
                f"does not match network (c={cfg.c}, {cfg.period_h}x{cfg.period_w})")


def evaluate_loss(net: MSPDNet, patches: Sequence[Patch]) -> float:
    """Mean per-patch loss without touching gradients; NaN for an empty set."""
    if not patches:
        return math.nan
    w = net.config.loss_weight
    return float(np.mean([loss(net.forward_sparse(p.sparse).data, p.truth.values, w) for p in patches]))


def write_log(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({"epoch": r["epoch"], "train_loss": repr(r["train_loss"]),
                        "val_loss": repr(r["val_loss"]), "wall_time": f"{r['wall_time']:.3f}"})
    return path


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]),
                 "val_loss": float(r["val_loss"]), "wall_time": float(r["wall_time"])}
                for r in csv.DictReader(fh)]


def train(net: MSPDNet, train_set: Sequence[Patch], val_set: Sequence[Patch] = (),
          cfg: TrainConfig | None = None, state: AdamState | None = None) -> TrainResult:
    """Optimize ``net`` in place, one patch per Adam step.

    Visiting order is reshuffled each epoch from ``cfg.seed``. After each
    epoch the log row is appended and, with ``output_dir``, ``train_log.csv``
    and the ``last`` checkpoint are rewritten.
    """
    cfg = cfg or TrainConfig()
    if not train_set:
        raise ValueError("train() needs at least one training patch")
    _check(train_set, net, "training")
    _check(val_set, net, "validation")
    state = state or AdamState(alpha=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    weight = net.config.loss_weight
    result = TrainResult(net, state)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
        losses = []
        for idx in order:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            step += 1
            patch = train_set[idx]
            for p in net.params.values():
                p.grad = None
            value = loss(net.forward_sparse(patch.sparse), patch.truth.values, weight)
            lv = float(value.data)
            if not math.isfinite(lv):
                raise DivergenceError(step, f"loss is {lv} (epoch {epoch}, patch {idx})")
            value.backward()
            try:
                adam_step(net.params, state)
            except NonFiniteGradient as exc:
                raise DivergenceError(step, str(exc)) from exc
            losses.append(lv)
        if not losses:
            break
        result.step_losses.extend(losses)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": evaluate_loss(net, val_set),
               "wall_time": time.perf_counter() - start}
        result.log.append(row)
        log.info("epoch %d: train %.6g val %.6g (%.1fs)", epoch, row["train_loss"], row["val_loss"],
                 row["wall_time"])
        if out_dir is not None:
            write_log(out_dir / "train_log.csv", result.log)
            net.save(out_dir / "last")
    return result
