"""Synthetic crowd images: Gaussian-blob heads on smooth textured noise."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import zoom

from .density import KernelSpec, PointAnnotation, generate_density_map
from .train import Sample


@dataclass(frozen=True)
class SyntheticSpec:
    n_images: int = 20
    height: int = 64
    width: int = 64
    count_bins: tuple = ((1, 10), (10, 20), (20, 40))
    head_sigma: float = 1.5
    margin: float = 4.0
    texture: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1 or self.height < 8 or self.width < 8:
            raise ValueError("synthetic spec needs >= 1 image of at least 8x8")
        for lo, hi in self.count_bins:
            if not 0 <= lo < hi:
                raise ValueError(f"bad count bin [{lo}, {hi})")
        if 2 * self.margin >= min(self.height, self.width):
            raise ValueError("margin leaves no room for heads")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["count_bins"] = [list(b) for b in self.count_bins]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticSpec:
        d = dict(d)
        if "count_bins" in d:
            d["count_bins"] = tuple(tuple(b) for b in d["count_bins"])
        return cls(**d)


def _background(rng: np.random.Generator, h: int, w: int, amplitude: float) -> np.ndarray:
    coarse = rng.uniform(-1.0, 1.0, size=(3, max(2, h // 8), max(2, w // 8)))
    smooth = zoom(coarse, (1, h / coarse.shape[1], w / coarse.shape[2]), order=1)
    return amplitude * smooth[:, :h, :w]


def make_image(rng: np.random.Generator, spec: SyntheticSpec, count: int, image_id: str):
    h, w, m = spec.height, spec.width, spec.margin
    pts = np.column_stack([rng.uniform(m, w - m, count), rng.uniform(m, h - m, count)])
    img = _background(rng, h, w, spec.texture) + spec.noise * rng.standard_normal((3, h, w))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    tint = rng.uniform(0.7, 1.0, size=(count, 3))
    for (x, y), t in zip(pts, tint):
        blob = np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * spec.head_sigma ** 2))
        img += t[:, None, None] * blob
    return img, PointAnnotation(image_id, w, h, pts)


def generate(spec: SyntheticSpec):
    """Images (3 x H x W) and annotations; head counts are drawn bin-first."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(spec.n_images):
        lo, hi = spec.count_bins[int(rng.integers(len(spec.count_bins)))]
        count = int(rng.integers(lo, hi))
        out.append(make_image(rng, spec, count, f"syn{i:04d}"))
    return out


def synthetic_samples(spec: SyntheticSpec, kernel: KernelSpec) -> list[Sample]:
    return [Sample(ann.image_id, img, generate_density_map(ann, kernel).values)
            for img, ann in generate(spec)]
