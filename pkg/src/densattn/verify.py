"""Self-check suite behind ``densattn verify``.

Each check compares the library against an independent oracle or asserts an
invariant.  Library functions are looked up through their modules at call
time so a patched implementation is what gets checked.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention, density, evaluation, model, oracles, tensor, train
from .tensor import Tensor

ORACLE_TOL = 1e-12
GRAD_TOL = 1e-4
GRAD_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _max_err(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# -- oracle equivalence --------------------------------------------------------------

def _random_shapes(rng, count):
    for _ in range(count):
        yield (int(rng.integers(1, 3)), int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.integers(1, 7)))


def check_conv2d_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for d in (1, 2, 3):
        for pad in (0, d):
            # dyadic values: every product and partial sum is exact in float64,
            # so any summation order must reproduce the loop oracle bit for bit
            x = rng.integers(-64, 65, size=(2, 4, 8, 8)) / 64.0
            w = rng.integers(-64, 65, size=(3, 4, 3, 3)) / 64.0
            b = rng.integers(-64, 65, size=3) / 64.0
            got = tensor.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad, dilation=d).data
            ref = oracles.conv2d_loops(x, w, b, padding=pad, dilation=d)
            if not np.array_equal(got, ref):
                return False, f"dilation {d} pad {pad}: max diff {_max_err(got, ref):.3g}"
            xf, wf = rng.uniform(-1, 1, (2, 4, 8, 8)), rng.uniform(-1, 1, (3, 4, 3, 3))
            got = tensor.conv2d(Tensor(xf), Tensor(wf), padding=pad, dilation=d).data
            worst = max(worst, _max_err(got, oracles.conv2d_loops(xf, wf, padding=pad, dilation=d)))
    return worst < ORACLE_TOL, f"exact on dyadic inputs; float max diff {worst:.3g}"


def _oracle_check(fn, ref, n=50):
    rng = np.random.default_rng(1)
    worst = 0.0
    for shape in _random_shapes(rng, n):
        x = rng.uniform(-1, 1, size=shape)
        worst = max(worst, _max_err(fn(Tensor(x)).data, ref(x)))
    return worst < ORACLE_TOL, f"max abs diff {worst:.3g} over {n} tensors"


def check_pfca_oracle():
    return _oracle_check(lambda x: attention.pfca(x, 1e-4), lambda x: oracles.pfca_scalar(x, 1e-4))


def check_sa_softmax_oracle():
    return _oracle_check(lambda x: attention.sa(x, "softmax"), lambda x: oracles.sa_scalar(x, "softmax"))


def check_sa_sigmoid_oracle():
    return _oracle_check(lambda x: attention.sa(x, "sigmoid"), lambda x: oracles.sa_scalar(x, "sigmoid"))


def check_simam_oracle():
    return _oracle_check(lambda x: attention.simam(x, 1e-4), lambda x: oracles.simam_scalar(x, 1e-4))


def check_pfcasa_oracle():
    return _oracle_check(lambda x: attention.pfcasa(x, 1e-4, "sigmoid"),
                         lambda x: oracles.pfcasa_scalar(x, 1e-4, "sigmoid"))


# -- gradients -------------------------------------------------------------------------

def _grad_over_seeds(make):
    worst = 0.0
    for seed in GRAD_SEEDS:
        f, x, wrt = make(np.random.default_rng(100 + seed))
        worst = max(worst, tensor.grad_check(f, x, wrt=wrt, seed=seed))
    return worst < GRAD_TOL, f"max relative error {worst:.3g} over {len(GRAD_SEEDS)} seeds"


def check_grad_conv2d():
    def make(rng):
        w, b = _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
        return (lambda x: tensor.conv2d(x, w, b, padding=2, dilation=2)), _rand(rng, 1, 2, 5, 5), (w, b)
    return _grad_over_seeds(make)


def check_grad_pool():
    def make(rng):
        return (lambda x: tensor.pool(x, "max", 2) + tensor.pool(x, "avg", 2)), _rand(rng, 2, 2, 4, 6), ()
    return _grad_over_seeds(make)


def _attention_grad(fn):
    return _grad_over_seeds(lambda rng: (fn, _rand(rng, 2, 4, 3, 3), ()))


def check_grad_pfca():
    return _attention_grad(lambda x: attention.pfca(x))


def check_grad_sa_softmax():
    return _attention_grad(lambda x: attention.sa(x, "softmax"))


def check_grad_sa_sigmoid():
    return _attention_grad(lambda x: attention.sa(x, "sigmoid"))


def check_grad_simam():
    return _attention_grad(lambda x: attention.simam(x))


def check_grad_pfcasa():
    return _attention_grad(lambda x: attention.pfcasa(x))


def _param_grad(kind, r):
    def make(rng):
        att = attention.make_attention(attention.AttentionConfig(kind, r=r), 8, rng=rng, init_std=0.5)
        return att, _rand(rng, 2, 8, 4, 5), tuple(att.params.values())
    return _grad_over_seeds(make)


def check_grad_se():
    return _param_grad("SE", 2)


def check_grad_cbam():
    return _param_grad("CBAM", 2)


def check_grad_cam():
    return _param_grad("CAM", 2)


def check_grad_loss():
    def make(rng):
        gt = _rand(rng, 2, 1, 3, 3)
        return (lambda p: train.euclidean_loss(p, gt)), _rand(rng, 2, 1, 3, 3), ()
    return _grad_over_seeds(make)


def toy_model_config(attention_cfg=None, seed=0):
    return model.ModelConfig(width_scale=1 / 16, init="he", seed=seed,
                             attention=attention_cfg or attention.AttentionConfig("PFCASA"))


def check_grad_model():
    def make(rng):
        m = model.build(toy_model_config(seed=int(rng.integers(1 << 30))))
        return m, _rand(rng, 1, 3, 16, 16), ()
    return _grad_over_seeds(make)


# -- invariants -------------------------------------------------------------------------

def check_zero_params():
    store = tensor.ParamStore()
    for kind in attention.PARAMETER_FREE:
        for c in (1, 7, 64, 512):
            if attention.param_count(attention.AttentionConfig(kind), c):
                return False, f"{kind} at C={c} reports parameters"
            attention.make_attention(attention.AttentionConfig(kind), c, store)
    if store.count():
        return False, "parameter-free slot registered tensors"
    base = model.build(model.ModelConfig(width_scale=1 / 8)).count_params()
    for kind in attention.PARAMETER_FREE:
        cfg = model.ModelConfig(width_scale=1 / 8, attention=attention.AttentionConfig(kind))
        if model.build(cfg).count_params() != base:
            return False, f"model with {kind} differs from baseline"
    return True, "0 added parameters for every parameter-free kind"


def check_budget():
    base = 16_263_041
    worst = 0.0
    for cfg in attention.TABLE_CONFIGS:
        rep = attention.budget_audit(base, cfg, 512)
        worst = max(worst, rep.ratio)
        if not rep.within_budget:
            return False, f"{cfg.label} ratio {rep.ratio:.4%}"
    for r in (4, 16):
        delta = attention.param_count(attention.AttentionConfig("CBAM", r=r), 512) \
            - attention.param_count(attention.AttentionConfig("SE", r=r), 512)
        if delta != 98:
            return False, f"CBAM - SE = {delta} at r={r}"
    return True, f"worst ratio {worst:.4%}; CBAM - SE = 98"


def check_softmax_mass():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        x = _rand(rng, 2, 4, 5, 6, lo=-3, hi=3)
        p = attention.sa_weights(x, "softmax").data
        worst = max(worst, float(np.abs(p.sum(axis=(1, 2, 3)) - 1.0).max()))
    return worst < ORACLE_TOL, f"max |sum p - 1| = {worst:.3g}"


def check_density_mass():
    rng = np.random.default_rng(5)
    worst, tested = 0.0, 0
    for spec in (density.KernelSpec.adaptive(0.3, 3), density.KernelSpec.fixed(15.0)):
        for i in range(20):
            h, w = 160, 200
            n = int(rng.integers(5, 30))
            margin = 45.0
            pts = np.column_stack([rng.uniform(margin, w - margin, n), rng.uniform(margin, h - margin, n)])
            ann = density.PointAnnotation(f"v{i}", w, h, pts)
            dm = density.generate_density_map(ann, spec)
            sig = dm.meta["sigmas"]
            inside = np.all((pts - 3 * sig[:, None] >= 0) & (pts + 3 * sig[:, None] <= [w, h]), axis=1)
            if not inside.all():
                continue
            tested += 1
            worst = max(worst, abs(dm.count - n) / n)
            coarse = density.downsample_sum(dm, 8)
            if abs(coarse.count - dm.count) > 1e-12 * max(1.0, dm.count):
                return False, "downsample_sum changed the count"
    if tested < 10:
        return False, f"only {tested} interior annotations drawn"
    return worst <= 0.005, f"worst relative mass error {worst:.4%} over {tested} maps"


def check_metrics():
    m = evaluation.metrics([(10, 12), (20, 18)])
    expect = (2.0, 2.0, 1 - (2 / 12 + 2 / 18) / 2)
    if max(abs(a - b) for a, b in zip(m, expect)) > ORACLE_TOL:
        return False, f"got {tuple(m)}"
    rows = [evaluation.ImageResult("a", 9.0, 10.0), evaluation.ImageResult("b", 12.0, 10.0)]
    (b,) = [b for b in evaluation.binned_accuracy(rows) if b.n]
    if abs(b.mean - 0.85) > ORACLE_TOL or abs(b.std - 0.05) > ORACLE_TOL:
        return False, f"bin mean/std {b.mean}, {b.std}"
    return True, "hand triple and constructed bin reproduced"


CHECKS: list[tuple[str, Callable]] = [
    ("oracle.conv2d", check_conv2d_oracle),
    ("oracle.pfca", check_pfca_oracle),
    ("oracle.sa_softmax", check_sa_softmax_oracle),
    ("oracle.sa_sigmoid", check_sa_sigmoid_oracle),
    ("oracle.simam", check_simam_oracle),
    ("oracle.pfcasa", check_pfcasa_oracle),
    ("grad.conv2d", check_grad_conv2d),
    ("grad.pool", check_grad_pool),
    ("grad.pfca", check_grad_pfca),
    ("grad.sa_softmax", check_grad_sa_softmax),
    ("grad.sa_sigmoid", check_grad_sa_sigmoid),
    ("grad.simam", check_grad_simam),
    ("grad.pfcasa", check_grad_pfcasa),
    ("grad.se", check_grad_se),
    ("grad.cbam", check_grad_cbam),
    ("grad.cam", check_grad_cam),
    ("grad.loss", check_grad_loss),
    ("grad.model", check_grad_model),
    ("invariant.zero_params", check_zero_params),
    ("invariant.budget", check_budget),
    ("invariant.softmax_mass", check_softmax_mass),
    ("density.mass", check_density_mass),
    ("metrics.fidelity", check_metrics),
]


def run_checks(filter_: str | None = None, echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if filter_ and filter_ not in name:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        res = CheckResult(name, bool(ok), detail, time.perf_counter() - t0)
        results.append(res)
        if echo:
            echo(f"{'PASS' if res.passed else 'FAIL'}  {name:<24} {detail}")
    return results


def summary(results: list[CheckResult]) -> str:
    return json.dumps({
        "passed": sum(r.passed for r in results),
        "failed": sum(not r.passed for r in results),
        "failures": [r.name for r in results if not r.passed],
    }, sort_keys=True)
