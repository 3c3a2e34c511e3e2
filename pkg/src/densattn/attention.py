"""Attention mechanisms for the slot between frontend and backend.

Parameter-free: PFCA (channel), SA (spatial), SimAM (per-neuron), PFCASA
(PFCA then SA).  Parameterized baselines: SE, CBAM, CAM (coordinate
attention).  ``param_count`` gives closed-form sizes and ``budget_audit``
checks them against the 1% added-parameter ceiling.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .tensor import (
    ParamStore,
    Tensor,
    channel_sum,
    concat,
    conv2d,
    global_avg_pool,
    mean_var,
    relu,
    sigmoid,
    softmax,
)

PARAMETER_FREE = ("None", "PFCA", "SA", "PFCASA", "SimAM")
PARAMETERIZED = ("SE", "CBAM", "CAM")
KINDS = PARAMETER_FREE + PARAMETERIZED
SA_ACTIVATIONS = ("softmax", "sigmoid")

CBAM_SPATIAL_KERNEL = 7
CAM_MIN_HIDDEN = 8
BN_EPS = 1e-5
BUDGET = 0.01


@dataclass(frozen=True)
class AttentionConfig:
    kind: str = "None"
    lam: float = 1e-4
    r: int | None = None
    sa_activation: str = "sigmoid"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}; expected one of {KINDS}")
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if self.sa_activation not in SA_ACTIVATIONS:
            raise ValueError(f"sa_activation must be one of {SA_ACTIVATIONS}")
        if self.kind in PARAMETERIZED:
            if self.r is None or int(self.r) != self.r or self.r < 1:
                raise ValueError(f"{self.kind} needs a positive integer reduction ratio r")

    @property
    def parameter_free(self) -> bool:
        return self.kind in PARAMETER_FREE

    @property
    def label(self) -> str:
        if self.kind in PARAMETERIZED:
            return f"{self.kind}(r={self.r})"
        if self.kind in ("SA", "PFCASA") and self.sa_activation == "softmax":
            return f"{self.kind}[softmax]"
        return self.kind

    def validate_channels(self, channels: int) -> None:
        if channels < 1:
            raise ValueError(f"channel count must be positive, got {channels}")
        if self.kind in PARAMETERIZED and channels % self.r:
            raise ValueError(f"{self.label}: r={self.r} does not divide C={channels}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AttentionConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        unknown = set(d) - {"kind", "lam", "r", "sa_activation"}
        if unknown:
            raise ValueError(f"unknown attention config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> AttentionConfig:
        """Parse ``KIND[:key=value,...]``, e.g. ``SE:r=4`` or ``SA:act=softmax``."""
        kind, _, rest = text.partition(":")
        kw: dict = {"kind": kind.strip()}
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, _, value = item.partition("=")
            key = key.strip()
            if key == "r":
                kw["r"] = int(value)
            elif key in ("lam", "lambda"):
                kw["lam"] = float(value)
            elif key in ("act", "sa_activation"):
                kw["sa_activation"] = value.strip()
            else:
                raise ValueError(f"unknown attention option {key!r} in {text!r}")
        return cls(**kw)


# -- parameter-free operators ------------------------------------------------------

def pfca_weights(x: Tensor, lam: float = 1e-4) -> Tensor:
    """Per-channel weights sigmoid(V), shape N x C x 1 x 1."""
    u = global_avg_pool(x)
    mu, var = mean_var(u, axis=1, keepdims=True)
    denom = var + lam
    v = ((u - mu) ** 2 + 2.0 * denom) / (4.0 * denom)
    return sigmoid(v)


def pfca(x: Tensor, lam: float = 1e-4) -> Tensor:
    return x * pfca_weights(x, lam)


def sa_weights(x: Tensor, activation: str = "sigmoid") -> Tensor:
    """Spatial weights p(i, j), shape N x 1 x H x W.

    The softmax variant normalises over all H*W positions of each sample.
    """
    s = channel_sum(x)
    if activation == "softmax":
        return softmax(s, axis=(2, 3))
    if activation == "sigmoid":
        return sigmoid(s)
    raise ValueError(f"sa activation must be one of {SA_ACTIVATIONS}, got {activation!r}")


def sa(x: Tensor, activation: str = "sigmoid") -> Tensor:
    return x * sa_weights(x, activation)


def simam_weights(x: Tensor, lam: float = 1e-4) -> Tensor:
    """sigmoid(1 / e*) for every neuron; statistics over the H*W activations of a channel."""
    mu, var = mean_var(x, axis=(2, 3), keepdims=True)
    denom = var + lam
    inv_energy = ((x - mu) ** 2 + 2.0 * denom) / (4.0 * denom)
    return sigmoid(inv_energy)


def simam(x: Tensor, lam: float = 1e-4) -> Tensor:
    return x * simam_weights(x, lam)


def pfcasa(x: Tensor, lam: float = 1e-4, sa_activation: str = "sigmoid") -> Tensor:
    return sa(pfca(x, lam), sa_activation)


# -- parameterized baselines -----------------------------------------------------------

def _gauss(rng: np.random.Generator, std: float, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def cam_hidden(channels: int, r: int) -> int:
    return max(CAM_MIN_HIDDEN, channels // r)


def init_se(channels: int, r: int, rng: np.random.Generator, std: float = 0.01) -> dict[str, Tensor]:
    hidden = channels // r
    return {
        "fc1.weight": _gauss(rng, std, hidden, channels, 1, 1),
        "fc2.weight": _gauss(rng, std, channels, hidden, 1, 1),
    }


def init_cbam(channels: int, r: int, rng: np.random.Generator, std: float = 0.01) -> dict[str, Tensor]:
    params = init_se(channels, r, rng, std)
    k = CBAM_SPATIAL_KERNEL
    params["spatial.weight"] = _gauss(rng, std, 1, 2, k, k)
    return params


def init_cam(channels: int, r: int, rng: np.random.Generator, std: float = 0.01) -> dict[str, Tensor]:
    hidden = cam_hidden(channels, r)
    return {
        "conv1.weight": _gauss(rng, std, hidden, channels, 1, 1),
        "conv1.bias": Tensor(np.zeros(hidden), requires_grad=True),
        "bn.gamma": Tensor(np.ones(hidden), requires_grad=True),
        "bn.beta": Tensor(np.zeros(hidden), requires_grad=True),
        "conv_h.weight": _gauss(rng, std, channels, hidden, 1, 1),
        "conv_h.bias": Tensor(np.zeros(channels), requires_grad=True),
        "conv_w.weight": _gauss(rng, std, channels, hidden, 1, 1),
        "conv_w.bias": Tensor(np.zeros(channels), requires_grad=True),
    }


def _check_params(name: str, params: dict[str, Tensor], expected: dict[str, tuple]) -> None:
    if set(params) != set(expected):
        raise ValueError(f"{name}: parameter names {sorted(params)} != {sorted(expected)}")
    for key, shape in expected.items():
        if params[key].shape != shape:
            raise ValueError(f"{name}: {key} has shape {params[key].shape}, expected {shape} "
                             f"(params built for a different C or r?)")


def _mlp(u: Tensor, params: dict[str, Tensor]) -> Tensor:
    return conv2d(relu(conv2d(u, params["fc1.weight"])), params["fc2.weight"])


def se(x: Tensor, params: dict[str, Tensor], r: int) -> Tensor:
    c = x.shape[1]
    if c % r:
        raise ValueError(f"SE: r={r} does not divide C={c}")
    _check_params("SE", params, {"fc1.weight": (c // r, c, 1, 1), "fc2.weight": (c, c // r, 1, 1)})
    return x * sigmoid(_mlp(global_avg_pool(x), params))


def cbam(x: Tensor, params: dict[str, Tensor], r: int) -> Tensor:
    c = x.shape[1]
    if c % r:
        raise ValueError(f"CBAM: r={r} does not divide C={c}")
    k = CBAM_SPATIAL_KERNEL
    _check_params("CBAM", params, {
        "fc1.weight": (c // r, c, 1, 1), "fc2.weight": (c, c // r, 1, 1),
        "spatial.weight": (1, 2, k, k),
    })
    channel = sigmoid(_mlp(global_avg_pool(x), params) + _mlp(x.max(axis=(2, 3), keepdims=True), params))
    xc = x * channel
    desc = concat([xc.mean(axis=1, keepdims=True), xc.max(axis=1, keepdims=True)], axis=1)
    spatial = sigmoid(conv2d(desc, params["spatial.weight"], padding=k // 2))
    return xc * spatial


def _batch_norm(y: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    # batch statistics in every pass; no running averages are kept
    mu, var = mean_var(y, axis=(0, 2, 3), keepdims=True)
    yhat = (y - mu) / (var + BN_EPS) ** 0.5
    return yhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def cam(x: Tensor, params: dict[str, Tensor], r: int) -> Tensor:
    n, c, h, w = x.shape
    if c % r:
        raise ValueError(f"CAM: r={r} does not divide C={c}")
    m = cam_hidden(c, r)
    _check_params("CAM", params, {
        "conv1.weight": (m, c, 1, 1), "conv1.bias": (m,), "bn.gamma": (m,), "bn.beta": (m,),
        "conv_h.weight": (c, m, 1, 1), "conv_h.bias": (c,),
        "conv_w.weight": (c, m, 1, 1), "conv_w.bias": (c,),
    })
    pooled_h = x.mean(axis=3, keepdims=True)                       # N, C, H, 1
    pooled_w = x.mean(axis=2, keepdims=True).transpose(0, 1, 3, 2)  # N, C, W, 1
    y = conv2d(concat([pooled_h, pooled_w], axis=2), params["conv1.weight"], params["conv1.bias"])
    y = relu(_batch_norm(y, params["bn.gamma"], params["bn.beta"]))
    a_h = sigmoid(conv2d(y[:, :, :h], params["conv_h.weight"], params["conv_h.bias"]))
    a_w = sigmoid(conv2d(y[:, :, h:].transpose(0, 1, 3, 2), params["conv_w.weight"], params["conv_w.bias"]))
    return x * a_h * a_w


_INIT = {"SE": init_se, "CBAM": init_cbam, "CAM": init_cam}
_FORWARD = {"SE": se, "CBAM": cbam, "CAM": cam}


class Attention:
    """A configured attention slot; parameterized kinds own their tensors."""

    def __init__(self, cfg: AttentionConfig, channels: int, params: dict[str, Tensor] | None = None):
        cfg.validate_channels(channels)
        self.cfg = cfg
        self.channels = channels
        self.params = params or {}
        self._fn: Callable[[Tensor], Tensor] = self._bind()

    def _bind(self):
        cfg = self.cfg
        if cfg.kind == "None":
            return lambda x: x
        if cfg.kind == "PFCA":
            return lambda x: pfca(x, cfg.lam)
        if cfg.kind == "SA":
            return lambda x: sa(x, cfg.sa_activation)
        if cfg.kind == "SimAM":
            return lambda x: simam(x, cfg.lam)
        if cfg.kind == "PFCASA":
            return lambda x: pfcasa(x, cfg.lam, cfg.sa_activation)
        fwd = _FORWARD[cfg.kind]
        return lambda x: fwd(x, self.params, cfg.r)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.cfg.label}: built for C={self.channels}, got C={x.shape[1]}")
        return self._fn(x)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())


def make_attention(
    cfg: AttentionConfig,
    channels: int,
    store: ParamStore | None = None,
    rng: np.random.Generator | None = None,
    prefix: str = "attention",
    init_std: float = 0.01,
) -> Attention:
    """Build an attention slot; parameterized kinds register into ``store``."""
    cfg.validate_channels(channels)
    params: dict[str, Tensor] = {}
    if cfg.kind in PARAMETERIZED:
        rng = rng if rng is not None else np.random.default_rng(0)
        params = _INIT[cfg.kind](channels, cfg.r, rng, init_std)
        if store is not None:
            for name, t in params.items():
                store.add(f"{prefix}.{name}", t)
    return Attention(cfg, channels, params)


def param_count(cfg: AttentionConfig, channels: int) -> int:
    """Closed-form number of learnable parameters the slot adds."""
    cfg.validate_channels(channels)
    c = channels
    if cfg.kind in PARAMETER_FREE:
        return 0
    hidden = c // cfg.r
    if cfg.kind == "SE":
        return 2 * c * hidden
    if cfg.kind == "CBAM":
        return 2 * c * hidden + 2 * CBAM_SPATIAL_KERNEL ** 2
    m = cam_hidden(c, cfg.r)
    # conv1 (w + b), bn (gamma + beta), conv_h and conv_w (w + b each)
    return c * m + m + 2 * m + 2 * (m * c + c)


@dataclass(frozen=True)
class BudgetReport:
    label: str
    base_params: int
    added_params: int
    ratio: float
    within_budget: bool


def budget_audit(base: int, cfg: AttentionConfig, channels: int, budget: float = BUDGET) -> BudgetReport:
    if base <= 0:
        raise ValueError(f"base parameter count must be positive, got {base}")
    added = param_count(cfg, channels)
    ratio = added / base
    return BudgetReport(cfg.label, base, added, ratio, ratio <= budget)


# the eleven reference configurations, in reporting order
TABLE_CONFIGS = (
    AttentionConfig("None"),
    AttentionConfig("PFCA"),
    AttentionConfig("SA"),
    AttentionConfig("PFCASA"),
    AttentionConfig("SimAM"),
    AttentionConfig("SE", r=4),
    AttentionConfig("CAM", r=8),
    AttentionConfig("CBAM", r=4),
    AttentionConfig("SE", r=16),
    AttentionConfig("CAM", r=16),
    AttentionConfig("CBAM", r=16),
)
