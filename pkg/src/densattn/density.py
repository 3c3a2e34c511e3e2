"""Ground-truth density maps from head annotations.

Each head contributes a 2-D Gaussian integrated exactly over every pixel cell
(pixel ``(r, c)`` covers ``[c, c+1) x [r, r+1)``), truncated to a box of
radius ``ceil(3 sigma)`` around the head and *not* renormalised afterwards.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import ndtr

log = logging.getLogger(__name__)

DMAP_MAGIC = b"DMAP"
SIGMA_FLOOR = 0.5
SINGLE_POINT_SIGMA = 15.0
TRUNCATE = 3.0


@dataclass
class PointAnnotation:
    image_id: str
    width: int
    height: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    rejected: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")
        inside = (pts[:, 0] >= 0) & (pts[:, 0] < self.width) & (pts[:, 1] >= 0) & (pts[:, 1] < self.height)
        if not inside.all():
            self.rejected += int((~inside).sum())
            log.warning("%s: dropped %d out-of-bounds points", self.image_id, int((~inside).sum()))
        self.points = pts[inside]

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_dict(cls, d: dict) -> PointAnnotation:
        try:
            return cls(str(d["image_id"]), int(d["width"]), int(d["height"]),
                       np.asarray(d.get("points", []), dtype=np.float64).reshape(-1, 2))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed annotation: {exc}") from exc

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "width": self.width, "height": self.height,
                "points": self.points.tolist()}


def load_annotation(path: str | Path) -> PointAnnotation:
    """Read a JSON annotation, or a CSV of ``x,y`` lines with a ``<stem>.size`` sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return PointAnnotation.from_dict(doc)
    if path.suffix.lower() == ".csv":
        sidecar = path.with_suffix(".size")
        if not sidecar.exists():
            raise ValueError(f"{path}: missing size sidecar {sidecar.name}")
        parts = sidecar.read_text().replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{sidecar}: expected 'width height'")
        width, height = int(parts[0]), int(parts[1])
        with path.open(newline="") as fh:
            pts = [[float(row[0]), float(row[1])] for row in csv.reader(fh) if row and row[0].strip()]
        return PointAnnotation(path.stem, width, height, np.asarray(pts).reshape(-1, 2))
    raise ValueError(f"{path}: unsupported annotation format")


@dataclass(frozen=True)
class KernelSpec:
    variant: str = "adaptive"
    beta: float = 0.3
    k: int = 3
    sigma: float = 15.0

    def __post_init__(self):
        if self.variant not in ("adaptive", "fixed"):
            raise ValueError(f"kernel variant must be 'adaptive' or 'fixed', got {self.variant!r}")
        if self.beta <= 0 or self.k < 1 or self.sigma <= 0:
            raise ValueError("kernel needs beta > 0, k >= 1, sigma > 0")

    @classmethod
    def adaptive(cls, beta: float = 0.3, k: int = 3) -> KernelSpec:
        return cls("adaptive", beta=beta, k=k)

    @classmethod
    def fixed(cls, sigma: float = 15.0) -> KernelSpec:
        return cls("fixed", sigma=sigma)

    @classmethod
    def parse(cls, text: str) -> KernelSpec:
        """``adaptive:beta=0.3,k=3`` or ``fixed:sigma=15``."""
        variant, _, rest = text.partition(":")
        kw = {}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, _, value = item.partition("=")
            if key == "k":
                kw["k"] = int(value)
            elif key in ("beta", "sigma"):
                kw[key] = float(value)
            else:
                raise ValueError(f"unknown kernel option {key!r}")
        return cls(variant.strip(), **kw)

    def to_dict(self) -> dict:
        if self.variant == "fixed":
            return {"variant": "fixed", "sigma": self.sigma}
        return {"variant": "adaptive", "beta": self.beta, "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> KernelSpec:
        return cls(**d)


@dataclass
class DensityMap:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("density map must be 2-D")
        if (self.values < 0).any():
            raise ValueError("density map values must be non-negative")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> float:
        return math.fsum(self.values.ravel())


def knn_mean_distance(points, k: int) -> np.ndarray:
    """Mean distance from each point to its k nearest other points.

    With fewer than k other points the mean is over all of them; a lone point
    raises, since it has no neighbours at all.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(pts) < 2:
        raise ValueError("knn_mean_distance needs at least two points")
    kk = min(k, len(pts) - 1)
    dist, _ = cKDTree(pts).query(pts, k=kk + 1)
    # column 0 is the point itself
    return dist[:, 1:].mean(axis=1)


def kernel_sigmas(ann: PointAnnotation, spec: KernelSpec) -> np.ndarray:
    n = len(ann)
    if n == 0:
        return np.zeros(0)
    if spec.variant == "fixed":
        sig = np.full(n, spec.sigma)
    elif n == 1:
        log.warning("%s: single point, falling back to fixed sigma=%g", ann.image_id, SINGLE_POINT_SIGMA)
        sig = np.full(1, SINGLE_POINT_SIGMA)
    else:
        sig = spec.beta * knn_mean_distance(ann.points, spec.k)
    low = sig < SIGMA_FLOOR
    if low.any():
        log.warning("%s: %d kernel widths below %.1f px clamped", ann.image_id, int(low.sum()), SIGMA_FLOOR)
        sig = np.where(low, SIGMA_FLOOR, sig)
    return sig


def _cell_mass(center: float, sigma: float, lo: int, hi: int) -> np.ndarray:
    edges = np.arange(lo, hi + 2, dtype=np.float64)
    cdf = ndtr((edges - center) / sigma)
    return np.diff(cdf)


def gaussian_stamp(values: np.ndarray, x: float, y: float, sigma: float) -> None:
    """Add one truncated unit-mass Gaussian centred at (x, y) into ``values`` in place."""
    h, w = values.shape
    radius = math.ceil(TRUNCATE * sigma)
    c0, c1 = max(0, math.floor(x - radius)), min(w - 1, math.floor(x + radius))
    r0, r1 = max(0, math.floor(y - radius)), min(h - 1, math.floor(y + radius))
    if c0 > c1 or r0 > r1:
        return
    values[r0:r1 + 1, c0:c1 + 1] += np.outer(_cell_mass(y, sigma, r0, r1), _cell_mass(x, sigma, c0, c1))


def generate_density_map(ann: PointAnnotation, spec: KernelSpec) -> DensityMap:
    values = np.zeros((ann.height, ann.width))
    sigmas = kernel_sigmas(ann, spec)
    for (x, y), s in zip(ann.points, sigmas):
        gaussian_stamp(values, float(x), float(y), float(s))
    return DensityMap(values, {"image_id": ann.image_id, "points": len(ann), "sigmas": sigmas})


def downsample_sum(dmap: DensityMap | np.ndarray, factor: int) -> DensityMap:
    """Sum-pool by ``factor``; zero-pads the bottom/right edge if needed."""
    if factor <= 0:
        raise ValueError(f"downsample factor must be positive, got {factor}")
    values = dmap.values if isinstance(dmap, DensityMap) else np.asarray(dmap, dtype=np.float64)
    h, w = values.shape
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        values = np.pad(values, ((0, ph), (0, pw)))
    blocks = values.reshape((h + ph) // factor, factor, (w + pw) // factor, factor)
    out = blocks.sum(axis=(1, 3))
    return DensityMap(out, {"factor": factor, "padded": (ph, pw)})


def write_dmap(path: str | Path, dmap: DensityMap) -> None:
    """Binary layout: b"DMAP", u32 height, u32 width, then float32 row-major (all little-endian)."""
    with open(path, "wb") as fh:
        fh.write(DMAP_MAGIC)
        fh.write(struct.pack("<II", dmap.height, dmap.width))
        fh.write(dmap.values.astype("<f4").tobytes())


def read_dmap(path: str | Path) -> DensityMap:
    raw = Path(path).read_bytes()
    if raw[:4] != DMAP_MAGIC:
        raise ValueError(f"{path}: not a DMAP file")
    h, w = struct.unpack("<II", raw[4:12])
    body = raw[12:]
    if len(body) != 4 * h * w:
        raise ValueError(f"{path}: expected {h}x{w} float32 payload, got {len(body)} bytes")
    return DensityMap(np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float64))


def write_dmap_csv(path: str | Path, dmap: DensityMap) -> None:
    np.savetxt(path, dmap.values, delimiter=",", fmt="%.9g")
