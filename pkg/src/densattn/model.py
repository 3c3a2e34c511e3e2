"""CSRNet-shaped density regressor with a single attention slot.

Layout: VGG-16 conv1_1..conv4_3 frontend (3 max-pools, output stride 8),
attention slot, six 3x3 dilation-2 convs, 1x1 head to one channel.  Widths
are scaled by ``width_scale`` so the same architecture trains at desk scale.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attention import Attention, AttentionConfig, make_attention
from .tensor import ParamStore, Tensor, conv2d, max_pool2d, relu

VGG16_FRONTEND = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512)
CSRNET_BACKEND = (512, 512, 512, 256, 128, 64)
WTS_MAGIC = b"WTS1"


@dataclass(frozen=True)
class ModelConfig:
    frontend: tuple = VGG16_FRONTEND
    backend: tuple = CSRNET_BACKEND
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    width_scale: float = 1 / 8
    in_channels: int = 3
    dilation: int = 2
    init: str = "gaussian"
    init_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        if self.init not in ("gaussian", "he"):
            raise ValueError("init must be 'gaussian' or 'he'")
        for spec in self.frontend:
            if spec != "M" and not (isinstance(spec, int) and spec > 0):
                raise ValueError(f"bad frontend layer spec {spec!r}")

    def width(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    @property
    def scaled_frontend(self) -> tuple:
        return tuple(s if s == "M" else self.width(s) for s in self.frontend)

    @property
    def scaled_backend(self) -> tuple:
        return tuple(self.width(c) for c in self.backend)

    @property
    def slot_channels(self) -> int:
        convs = [s for s in self.scaled_frontend if s != "M"]
        return convs[-1] if convs else self.in_channels

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for s in self.frontend if s == "M")

    def to_dict(self) -> dict:
        return {
            "frontend": list(self.frontend), "backend": list(self.backend),
            "attention": self.attention.to_dict(), "width_scale": self.width_scale,
            "in_channels": self.in_channels, "dilation": self.dilation,
            "init": self.init, "init_std": self.init_std, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "frontend" in d:
            d["frontend"] = tuple(d["frontend"])
        if "backend" in d:
            d["backend"] = tuple(d["backend"])
        if "attention" in d and isinstance(d["attention"], dict):
            d["attention"] = AttentionConfig.from_dict(d["attention"])
        return cls(**d)

    def with_attention(self, attention: AttentionConfig) -> ModelConfig:
        return replace(self, attention=attention)


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params = ParamStore()
        self.layers: list[tuple] = []
        rng = np.random.default_rng(cfg.seed)
        c = cfg.in_channels

        for i, spec in enumerate(cfg.scaled_frontend):
            if spec == "M":
                self.layers.append(("pool",))
                continue
            self._conv(f"frontend.{i}", c, spec, 3, rng)
            self.layers.append(("conv", f"frontend.{i}", 1, 1, True))
            c = spec

        self.attention: Attention = make_attention(
            cfg.attention, c, self.params, rng, prefix="attention", init_std=cfg.init_std
        )
        self.layers.append(("attention",))

        d = cfg.dilation
        for i, width in enumerate(cfg.scaled_backend):
            self._conv(f"backend.{i}", c, width, 3, rng)
            self.layers.append(("conv", f"backend.{i}", d, d, True))
            c = width

        self._conv("head", c, 1, 1, rng)
        self.layers.append(("conv", "head", 1, 0, False))

    def _conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator) -> None:
        std = math.sqrt(2.0 / (cin * k * k)) if self.cfg.init == "he" else self.cfg.init_std
        self.params.add(f"{name}.weight", rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.params.add(f"{name}.bias", np.zeros(cout))

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected N x {self.cfg.in_channels} x H x W input, got {x.shape}")
        s = self.cfg.stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ValueError(f"input height/width {x.shape[2]}x{x.shape[3]} must be divisible by "
                             f"{s}; pad the image first")

    def _apply(self, layer: tuple, x: Tensor) -> Tensor:
        op = layer[0]
        if op == "pool":
            return max_pool2d(x, 2)
        if op == "attention":
            return self.attention(x)
        _, name, dilation, padding, act = layer
        x = conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"],
                   padding=padding, dilation=dilation)
        return relu(x) if act else x

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        for layer in self.layers:
            x = self._apply(layer, x)
        return x

    def slot_input(self, x: Tensor) -> Tensor:
        """Frontend features as they enter the attention slot."""
        self._check_input(x)
        for layer in self.layers:
            if layer[0] == "attention":
                return x
            x = self._apply(layer, x)
        raise RuntimeError("model has no attention slot")

    __call__ = forward

    def count_params(self) -> int:
        return self.params.count()


def build(cfg: ModelConfig) -> Model:
    return Model(cfg)


def forward(m: Model, x: Tensor) -> Tensor:
    return m.forward(x)


def count_params(m: Model | ParamStore) -> int:
    return m.count() if isinstance(m, ParamStore) else m.count_params()


def save_weights(path: str | Path, state) -> None:
    """WTS1 container: magic, u32 entries, then per entry u16 name length, name,
    u8 rank, u32 dims, float64 payload; all little-endian."""
    if isinstance(state, Model):
        state = state.params.state()
    elif isinstance(state, ParamStore):
        state = state.state()
    with open(path, "wb") as fh:
        fh.write(WTS_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_weights(path: str | Path) -> OrderedDict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != WTS_MAGIC:
        raise ValueError(f"{path}: not a WTS1 file")
    (count,), pos = struct.unpack_from("<I", raw, 4), 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return out
