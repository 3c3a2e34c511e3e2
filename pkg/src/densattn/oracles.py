"""Scalar reference implementations used as independent checks.

Everything here is plain Python loops over nested lists / numpy scalars, with no
use of the tensor module, so a bug in the vectorised path cannot hide in both.
"""

import math

import numpy as np


def _sigmoid(v):
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def conv2d_loops(x, w, b=None, stride=1, padding=0, dilation=1):
    """Direct nested-loop cross-correlation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for bn in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(kh):
                            for j in range(kw):
                                iy = oy * stride - padding + i * dilation
                                ix = ox * stride - padding + j * dilation
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += w[co, ci, i, j] * x[bn, ci, iy, ix]
                    if b is not None:
                        acc += b[co]
                    out[bn, co, oy, ox] = acc
    return out


def pfca_scalar(x, lam=1e-4):
    """Channel weights from spatial means, per sample, one channel at a time."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for bn in range(n):
        u = [sum(float(v) for v in x[bn, j].ravel()) / (h * w) for j in range(c)]
        mu = sum(u) / c
        var = sum((uj - mu) ** 2 for uj in u) / c
        for j in range(c):
            v = ((u[j] - mu) ** 2 + 2 * (var + lam)) / (4 * (var + lam))
            out[bn, j] = x[bn, j] * _sigmoid(v)
    return out


def sa_weights_scalar(x, activation="softmax"):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    p = np.empty((n, 1, h, w))
    for bn in range(n):
        s = [[sum(float(x[bn, k, i, j]) for k in range(c)) for j in range(w)] for i in range(h)]
        if activation == "softmax":
            top = max(max(row) for row in s)
            e = [[math.exp(v - top) for v in row] for row in s]
            z = sum(sum(row) for row in e)
            for i in range(h):
                for j in range(w):
                    p[bn, 0, i, j] = e[i][j] / z
        else:
            for i in range(h):
                for j in range(w):
                    p[bn, 0, i, j] = _sigmoid(s[i][j])
    return p


def sa_scalar(x, activation="softmax"):
    x = np.asarray(x, dtype=np.float64)
    p = sa_weights_scalar(x, activation)
    out = np.empty_like(x)
    n, c, h, w = x.shape
    for bn in range(n):
        for k in range(c):
            for i in range(h):
                for j in range(w):
                    out[bn, k, i, j] = x[bn, k, i, j] * p[bn, 0, i, j]
    return out


def simam_energy_scalar(channel, lam=1e-4):
    """Minimal energy e* of every neuron in one H x W channel."""
    vals = [float(v) for v in np.asarray(channel).ravel()]
    m = len(vals)
    mu = sum(vals) / m
    var = sum((v - mu) ** 2 for v in vals) / m
    e = [4 * (var + lam) / ((t - mu) ** 2 + 2 * var + 2 * lam) for t in vals]
    return np.array(e).reshape(np.shape(channel))


def simam_scalar(x, lam=1e-4):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for bn in range(n):
        for k in range(c):
            e = simam_energy_scalar(x[bn, k], lam)
            for i in range(h):
                for j in range(w):
                    out[bn, k, i, j] = x[bn, k, i, j] * _sigmoid(1.0 / e[i, j])
    return out


def pfcasa_scalar(x, lam=1e-4, activation="sigmoid"):
    return sa_scalar(pfca_scalar(x, lam), activation)


def knn_mean_distance_bruteforce(points, k):
    pts = [(float(a), float(b)) for a, b in points]
    out = []
    for i, (xi, yi) in enumerate(pts):
        d = sorted(math.hypot(xi - xj, yi - yj) for j, (xj, yj) in enumerate(pts) if j != i)
        take = d[:k]
        out.append(sum(take) / len(take) if take else float("nan"))
    return out


def vgg_param_count(frontend, backend, in_channels=3):
    """Closed-form conv parameter count: sum of cin*cout*9 + cout, plus the 1x1 head."""
    total, c = 0, in_channels
    for spec in frontend:
        if spec == "M":
            continue
        total += c * spec * 9 + spec
        c = spec
    for spec in backend:
        total += c * spec * 9 + spec
        c = spec
    return total + c + 1
