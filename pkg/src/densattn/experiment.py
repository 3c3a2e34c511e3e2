"""Ablation harness: one model per attention config, same data, same seed."""

from __future__ import annotations

import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import AttentionConfig, param_count
from .density import KernelSpec, generate_density_map, load_annotation
from .evaluation import ImageResult, MetricsReport, build_report, report
from .model import ModelConfig, build
from .synthetic import SyntheticSpec, synthetic_samples
from .train import Sample, TrainConfig, predict_counts, train_loop

log = logging.getLogger(__name__)

THREADS_ENV = "DENSATTN_THREADS"


@dataclass
class ExperimentConfig:
    output_dir: str = "runs/ablation"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attention: list[AttentionConfig] = field(default_factory=lambda: [AttentionConfig()])
    synthetic: SyntheticSpec | None = field(default_factory=SyntheticSpec)
    annotations_dir: str | None = None
    images_dir: str | None = None
    val_fraction: float = 0.2
    bin_width: float = 20
    max_bin: float = 500
    seed: int = 0

    def validate(self) -> None:
        if self.synthetic is None and not (self.annotations_dir and self.images_dir):
            raise ValueError("config needs either a synthetic dataset or annotations_dir + images_dir")
        if self.synthetic is None:
            for p in (self.annotations_dir, self.images_dir):
                if not Path(p).is_dir():
                    raise ValueError(f"data directory {p} does not exist")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if not self.attention:
            raise ValueError("no attention configurations to ablate")
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        channels = self.model.slot_channels
        for cfg in self.attention:
            cfg.validate_channels(channels)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = set(cls.__dataclass_fields__) | {"data"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment config keys: {sorted(unknown)}")
        kw: dict = {}
        for key in ("output_dir", "val_fraction", "bin_width", "max_bin", "seed"):
            if key in d:
                kw[key] = d[key]
        data = d.get("data", {})
        if "synthetic" in data:
            kw["synthetic"] = SyntheticSpec.from_dict(data["synthetic"])
        elif data:
            kw["synthetic"] = None
            kw["annotations_dir"] = data.get("annotations")
            kw["images_dir"] = data.get("images")
        if "model" in d:
            kw["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(d["train"])
        if "attention" in d:
            kw["attention"] = [AttentionConfig.parse(a) if isinstance(a, str) else AttentionConfig.from_dict(a)
                               for a in d["attention"]]
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label.replace("r=", "r")).strip("_")


def _load_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
    else:
        from PIL import Image  # only needed for real image folders

        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3)
    elif arr.shape[-1] == 3 and arr.shape[0] != 3:
        arr = arr.transpose(2, 0, 1)
    return arr


def _pad_to(sample: Sample, multiple: int) -> Sample:
    _, h, w = sample.image.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return sample
    return Sample(sample.image_id, np.pad(sample.image, ((0, 0), (0, ph), (0, pw))),
                  np.pad(sample.density, ((0, ph), (0, pw))))


def load_samples(exp: ExperimentConfig) -> list[Sample]:
    kernel = exp.train.kernel
    if exp.synthetic is not None:
        samples = synthetic_samples(exp.synthetic, kernel)
    else:
        samples = []
        img_dir = Path(exp.images_dir)
        for ann_path in sorted(Path(exp.annotations_dir).glob("*.json")):
            ann = load_annotation(ann_path)
            matches = sorted(img_dir.glob(f"{ann.image_id}.*"))
            if not matches:
                raise ValueError(f"no image found for {ann.image_id} in {img_dir}")
            img = _load_image(matches[0])
            if img.shape[1:] != (ann.height, ann.width):
                raise ValueError(f"{ann.image_id}: image {img.shape[1:]} != annotation size")
            samples.append(Sample(ann.image_id, img, generate_density_map(ann, kernel).values))
    multiple = exp.model.stride * (2 if exp.train.augment else 1)
    return [_pad_to(s, multiple) for s in samples]


def split(samples: list[Sample], val_fraction: float, seed: int) -> tuple[list[Sample], list[Sample]]:
    if len(samples) < 2 or val_fraction == 0:
        return samples, samples
    n_val = max(1, int(math.ceil(val_fraction * len(samples))))
    order = np.random.default_rng([seed, 7]).permutation(len(samples))
    val = sorted(order[:n_val])
    train = sorted(order[n_val:])
    return [samples[i] for i in train], [samples[i] for i in val]


def run_one(exp: ExperimentConfig, att: AttentionConfig, train_set, val_set) -> MetricsReport:
    out = Path(exp.output_dir) / slug(att.label)
    out.mkdir(parents=True, exist_ok=True)
    model = build(replace(exp.model, attention=att, seed=exp.seed))
    tcfg = replace(exp.train, seed=exp.seed)
    result = train_loop(model, train_set, tcfg, val=val_set,
                        checkpoint=out / "checkpoint.wts", log_csv=out / "train_log.csv")
    if result.best_state is not None:
        model.params.load(result.best_state)
    preds = predict_counts(model, val_set)
    rows = [ImageResult(s.image_id, p, s.count) for p, s in zip(preds, val_set)]
    rep = build_report(att.label, rows, exp.bin_width, exp.max_bin,
                       params=model.count_params(),
                       added_params=param_count(att, exp.model.slot_channels))
    rep.write_json(out / "metrics.json")
    log.info("%s: mae %.4f mse %.4f", att.label, rep.mae, rep.mse)
    return rep


def _worker(args):
    return run_one(*args)


def run_ablation(exp: ExperimentConfig) -> list[MetricsReport]:
    """Validate every config up front, then train/evaluate each; writes comparison.csv and bins.csv."""
    exp.validate()
    samples = load_samples(exp)
    train_set, val_set = split(samples, exp.val_fraction, exp.seed)
    Path(exp.output_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(exp, att, train_set, val_set) for att in exp.attention]
    workers = max(1, int(os.environ.get(THREADS_ENV, "1")))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            reports = list(pool.map(_worker, jobs))
    else:
        reports = [run_one(*job) for job in jobs]
    report(reports, exp.output_dir)
    return reports
