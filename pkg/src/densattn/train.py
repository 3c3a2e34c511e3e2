"""Euclidean loss, momentum SGD, patch augmentation and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import DensityMap, KernelSpec, downsample_sum
from .model import Model, save_weights
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "val_mae", "val_mse", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-6
    momentum: float = 0.95
    weight_decay: float = 5e-4
    epochs: int = 400
    batch_size: int = 1
    seed: int = 0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    augment: bool = True
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["kernel"] = self.kernel.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if isinstance(d.get("kernel"), dict):
            d["kernel"] = KernelSpec.from_dict(d["kernel"])
        elif isinstance(d.get("kernel"), str):
            d["kernel"] = KernelSpec.parse(d["kernel"])
        return cls(**d)


@dataclass
class Sample:
    """One training image (C x H x W) with its full-resolution density map."""
    image_id: str
    image: np.ndarray
    density: np.ndarray

    @property
    def count(self) -> float:
        return math.fsum(self.density.ravel())


def euclidean_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """(1 / 2N) * sum_i ||pred_i - gt_i||^2 over a batch of N maps."""
    if pred.shape != gt.shape:
        raise ValueError(f"loss: prediction shape {pred.shape} != ground truth shape {gt.shape}")
    diff = pred - gt
    return (diff * diff).sum() * (0.5 / pred.shape[0])


class SGD:
    """Momentum SGD with coupled L2 decay on conv weights.

    v <- momentum * v + (grad + weight_decay * w);  w <- w - lr * v
    """

    def __init__(self, store: ParamStore, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.store = store
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    @classmethod
    def from_config(cls, store: ParamStore, cfg: TrainConfig) -> SGD:
        return cls(store, cfg.lr, cfg.momentum, cfg.weight_decay)

    def step(self) -> None:
        missing = [name for name, p in self.store.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"sgd step with missing gradients for: {missing[:5]}")
        for name, p in self.store.items():
            g = p.grad
            if self.weight_decay and name.endswith(".weight"):
                g = g + self.weight_decay * p.data
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p.data = p.data - self.lr * v


def sgd_step(store: ParamStore, optimizer: SGD) -> None:
    optimizer.step()


def make_patches(image: np.ndarray, density: np.ndarray | DensityMap, rng: np.random.Generator):
    """Four quadrants plus five random crops, each also mirrored left-right: 18 pairs."""
    dens = density.values if isinstance(density, DensityMap) else np.asarray(density)
    _, h, w = image.shape
    if h % 2 or w % 2:
        raise ValueError(f"make_patches needs even height/width, got {h}x{w}; pad the image first")
    if dens.shape != (h, w):
        raise ValueError(f"density shape {dens.shape} does not match image {h}x{w}")
    ph, pw = h // 2, w // 2
    corners = [(0, 0), (0, pw), (ph, 0), (ph, pw)]
    corners += [(int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))) for _ in range(5)]
    pairs = []
    for top, left in corners:
        img = image[:, top:top + ph, left:left + pw].copy()
        den = dens[top:top + ph, left:left + pw].copy()
        pairs.append((img, den))
        pairs.append((img[:, :, ::-1].copy(), den[:, ::-1].copy()))
    return pairs


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = math.inf
    best_state: dict | None = None

    @property
    def final_loss(self) -> float:
        return self.rows[-1]["loss"] if self.rows else math.nan

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow([row["epoch"], repr(row["loss"]), repr(row["val_mae"]),
                                 repr(row["val_mse"]), row["wall_ms"]])


def _targets(samples: Sequence[Sample], stride: int, cfg: TrainConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    items = []
    for idx, s in enumerate(samples):
        pairs = make_patches(s.image, s.density, np.random.default_rng([cfg.seed, idx])) \
            if cfg.augment else [(s.image, s.density)]
        items.extend((img, downsample_sum(den, stride).values) for img, den in pairs)
    return items


def predict_counts(model: Model, samples: Sequence[Sample]) -> list[float]:
    out = []
    for s in samples:
        pred = model(Tensor(s.image[None]))
        out.append(math.fsum(pred.data.ravel()))
    return out


def train_loop(
    model: Model,
    train: Sequence[Sample],
    cfg: TrainConfig,
    val: Sequence[Sample] | None = None,
    checkpoint: str | Path | None = None,
    log_csv: str | Path | None = None,
) -> TrainLog:
    """Train in place; validation defaults to the training set itself."""
    if not train:
        raise ValueError("train_loop needs a non-empty dataset")
    val = train if val is None else val
    items = _targets(train, model.cfg.stride, cfg)
    shapes = {img.shape for img, _ in items}
    if cfg.batch_size > 1 and len(shapes) > 1:
        raise ValueError("batch_size > 1 needs equally sized samples")
    opt = SGD.from_config(model.params, cfg)
    result = TrainLog()

    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, 1_000_003, epoch]).permutation(len(items))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            x = Tensor(np.stack([img for img, _ in batch]))
            gt = Tensor(np.stack([den[None] for _, den in batch]))
            model.params.zero_grad()
            loss = euclidean_loss(model(x), gt)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1

        preds = predict_counts(model, val)
        errs = [p - s.count for p, s in zip(preds, val)]
        val_mae = math.fsum(abs(e) for e in errs) / len(errs)
        val_mse = math.sqrt(math.fsum(e * e for e in errs) / len(errs))
        wall = int(round((time.perf_counter() - t0) * 1000)) if cfg.record_wall_time else 0
        result.rows.append({"epoch": epoch, "loss": math.fsum(losses) / len(losses),
                            "val_mae": val_mae, "val_mse": val_mse, "wall_ms": wall})
        if val_mae < result.best_val_mae:
            result.best_val_mae, result.best_epoch = val_mae, epoch
            result.best_state = model.params.state()
        log.debug("epoch %d loss %.6g val_mae %.4f", epoch, result.rows[-1]["loss"], val_mae)

    if checkpoint is not None and result.best_state is not None:
        save_weights(checkpoint, result.best_state)
    if log_csv is not None:
        result.write_csv(log_csv)
    return result
