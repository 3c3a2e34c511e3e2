"""Counting metrics and density-binned accuracy.

``mse`` follows the crowd-counting convention: it is the *root* of the mean
squared count error, kept under the conventional name.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .density import DensityMap

COMPARISON_COLUMNS = ("config", "mae", "mse", "accuracy", "params", "added_params")
BIN_COLUMNS = ("config", "lo", "hi", "n_images", "mean_accuracy", "std_accuracy")


def count_from_density(dmap: DensityMap | np.ndarray) -> float:
    values = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return math.fsum(values.ravel())


@dataclass(frozen=True)
class ImageResult:
    image_id: str
    pred: float
    gt: float

    @property
    def abs_error(self) -> float:
        return abs(self.pred - self.gt)

    @property
    def rel_error(self) -> float | None:
        return self.abs_error / self.gt if self.gt > 0 else None

    @property
    def accuracy(self) -> float | None:
        rel = self.rel_error
        return None if rel is None else 1.0 - rel


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    accuracy: float | None
    n: int
    skipped: int = 0

    def __iter__(self):
        return iter((self.mae, self.mse, self.accuracy))


def metrics(pairs: Iterable[tuple[float, float]]) -> Metrics:
    """MAE, root-mean-square error and accuracy over (predicted, ground truth) counts.

    Images with a zero ground-truth count are left out of the accuracy and
    reported in ``skipped``; accuracy is None if every image is skipped.
    """
    pairs = [(float(p), float(g)) for p, g in pairs]
    if not pairs:
        raise ValueError("metrics needs at least one (pred, gt) pair")
    n = len(pairs)
    errs = [p - g for p, g in pairs]
    mae = math.fsum(abs(e) for e in errs) / n
    mse = math.sqrt(math.fsum(e * e for e in errs) / n)
    rel = [abs(p - g) / g for p, g in pairs if g > 0]
    accuracy = 1.0 - math.fsum(rel) / len(rel) if rel else None
    return Metrics(mae, mse, accuracy, n, n - len(rel))


@dataclass(frozen=True)
class Bin:
    lo: float
    hi: float
    n: int
    mean: float | None
    std: float | None


def binned_accuracy(
    per_image: Sequence[ImageResult],
    bin_width: float = 20,
    max_bin: float = 500,
    ddof: int = 0,
) -> list[Bin]:
    """Group images by ground-truth count into [lo, lo + bin_width) bins.

    Bins up to ``max_bin`` are always emitted (empty ones with n=0); images at or
    above ``max_bin`` go to a trailing [max_bin, inf) bin when there are any.
    """
    if bin_width <= 0:
        raise ValueError(f"bin_width must be positive, got {bin_width}")
    n_bins = int(math.ceil(max_bin / bin_width))
    groups: list[list[float]] = [[] for _ in range(n_bins + 1)]
    for r in per_image:
        acc = r.accuracy
        if acc is None:
            continue
        idx = min(int(r.gt // bin_width), n_bins)
        groups[idx].append(acc)
    bins = []
    for i, accs in enumerate(groups):
        lo = i * bin_width
        hi = math.inf if i == n_bins else min((i + 1) * bin_width, max_bin)
        if i == n_bins and not accs:
            break
        if accs:
            mean = math.fsum(accs) / len(accs)
            denom = len(accs) - ddof
            std = math.sqrt(math.fsum((a - mean) ** 2 for a in accs) / denom) if denom > 0 else 0.0
        else:
            mean = std = None
        bins.append(Bin(lo, hi, len(accs), mean, std))
    return bins


@dataclass
class MetricsReport:
    label: str
    per_image: list[ImageResult]
    mae: float
    mse: float
    accuracy: float | None
    skipped: int
    bins: list[Bin]
    params: int = 0
    added_params: int = 0

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "mae": self.mae, "mse": self.mse, "accuracy": self.accuracy, "skipped": self.skipped,
            "params": self.params, "added_params": self.added_params,
            "per_image": [{"image_id": r.image_id, "pred": r.pred, "gt": r.gt,
                           "abs_error": r.abs_error, "rel_error": r.rel_error} for r in self.per_image],
            "bins": [asdict(b) | {"hi": None if math.isinf(b.hi) else b.hi} for b in self.bins],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def build_report(
    label: str,
    results: Sequence[ImageResult],
    bin_width: float = 20,
    max_bin: float = 500,
    params: int = 0,
    added_params: int = 0,
) -> MetricsReport:
    m = metrics((r.pred, r.gt) for r in results)
    return MetricsReport(label, list(results), m.mae, m.mse, m.accuracy, m.skipped,
                         binned_accuracy(results, bin_width, max_bin), params, added_params)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def write_comparison_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """One row per configuration; ``added_params`` is a Yes/No flag."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_COLUMNS)
        for r in reports:
            writer.writerow([r.label, _fmt(r.mae), _fmt(r.mse), _fmt(r.accuracy), r.params,
                             "Yes" if r.added_params else "No"])


def write_bins_csv(reports: Sequence[MetricsReport], path: str | Path) -> None:
    """Plot-ready per-bin accuracy; ``n_images`` doubles as the histogram."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BIN_COLUMNS)
        for r in reports:
            for b in r.bins:
                writer.writerow([r.label, _fmt(float(b.lo)), _fmt(float(b.hi)), b.n,
                                 _fmt(b.mean), _fmt(b.std)])


def report(reports: Sequence[MetricsReport], out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table, bins = out_dir / "comparison.csv", out_dir / "bins.csv"
    write_comparison_csv(reports, table)
    write_bins_csv(reports, bins)
    return table, bins
