"""Dense float64 tensors with a per-pass reverse-mode gradient tape.

Every op records a closure that maps the upstream gradient to gradients of its
inputs.  ``Tensor.backward`` walks the recorded graph once in reverse
topological order, accumulates gradients into leaf tensors and then drops the
tape so the next forward pass starts clean.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

Axis = int | tuple[int, ...] | None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ValueError(f"{op}: shapes {a} and {b} are not broadcast-compatible") from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @staticmethod
    def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(*shape: int, requires_grad: bool = False) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = _lift(other)
        _broadcast_shape(self.shape, other.shape, "add")
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        return self + (-_lift(other))

    def __rsub__(self, other) -> Tensor:
        return _lift(other) + (-self)

    def __mul__(self, other) -> Tensor:
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _lift(other)
        _broadcast_shape(self.shape, other.shape, "div")
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward)

    def __rtruediv__(self, other) -> Tensor:
        return _lift(other) / self

    def __pow__(self, exponent: float) -> Tensor:
        a = self.data
        return Tensor._from_op(
            a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    # -- shape ops ------------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes: int) -> Tensor:
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),)
        )

    def __getitem__(self, idx) -> Tensor:
        src = self.shape

        def backward(g):
            out = np.zeros(src)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._from_op(np.array(self.data[idx]), (self,), backward)

    # -- reductions -----------------------------------------------------------
    def sum(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        src = self.shape
        kept = self.data.sum(axis=axis, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g.reshape(kept.shape), src).copy(),)

        data = kept if keepdims else self.data.sum(axis=axis)
        return Tensor._from_op(np.asarray(data), (self,), backward)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max(self, axis: Axis = None, keepdims: bool = False) -> Tensor:
        """Maximum along ``axis``; ties share the gradient equally."""
        src = self.data
        kept = src.max(axis=axis, keepdims=True)

        def backward(g):
            mask = (src == kept).astype(np.float64)
            mask /= mask.sum(axis=axis, keepdims=True)
            return (mask * g.reshape(kept.shape),)

        data = kept if keepdims else src.max(axis=axis)
        return Tensor._from_op(np.asarray(data), (self,), backward)

    # -- pointwise ------------------------------------------------------------
    def relu(self) -> Tensor:
        return relu(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def exp(self) -> Tensor:
        e = np.exp(self.data)
        return Tensor._from_op(e, (self,), lambda g: (g * e,))

    # -- autodiff ---------------------------------------------------------------
    def backward(self) -> None:
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            # tape is single-use
            node._parents = ()
            node._backward = None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# -- pointwise ops ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return Tensor._from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def pointwise(x: Tensor, f: str) -> Tensor:
    if f == "relu":
        return relu(x)
    if f == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise function {f!r}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting over singleton dims."""
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


elementwise_mul = mul


def softmax(x: Tensor, axis: Axis = -1) -> Tensor:
    """Max-shifted softmax over ``axis`` (an int or tuple of axes)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(p, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


# -- reductions -----------------------------------------------------------------

def global_avg_pool(x: Tensor) -> Tensor:
    """N x C x H x W -> N x C x 1 x 1 spatial mean."""
    return x.mean(axis=(2, 3), keepdims=True)


def channel_sum(x: Tensor) -> Tensor:
    """N x C x H x W -> N x 1 x H x W sum over channels."""
    return x.sum(axis=1, keepdims=True)


def mean_var(v: Tensor, axis: Axis = None, ddof: int = 0, keepdims: bool = False):
    """Mean and variance along ``axis``; ``ddof=0`` gives the population variance."""
    if v.size == 0:
        raise ValueError("mean_var of an empty tensor")
    if axis is None:
        n = v.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([v.shape[a] for a in axes]))
    mean = v.mean(axis=axis, keepdims=True)
    var = ((v - mean) ** 2).sum(axis=axis, keepdims=True) * (1.0 / (n - ddof))
    if not keepdims:
        squeezed = np.squeeze(mean.data, axis=axis).shape if axis is not None else ()
        mean, var = mean.reshape(squeezed), var.reshape(squeezed)
    return mean, var


# -- convolution & pooling -------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """2-D cross-correlation via im2col + one GEMM.

    ``x`` is N x Cin x H x W, ``w`` is Cout x Cin x kh x kw, ``b`` is (Cout,).
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be 4-D (N, C, H, W), got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-D (Cout, Cin, kh, kw), got shape {w.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride>=1, dilation>=1, padding>=0 "
                         f"(got {stride}, {dilation}, {padding})")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input channels C={cin} do not match weight Cin={wcin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} does not match Cout={cout}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(wd, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) exceeds padded "
                         f"input height/width {h + 2 * padding}x{wd + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    slices = [
        (np.s_[i * dilation: i * dilation + stride * (ho - 1) + 1: stride],
         np.s_[j * dilation: j * dilation + stride * (wo - 1) + 1: stride])
        for i in range(kh) for j in range(kw)
    ]
    # cols: (Cin, kh*kw, N, Ho, Wo) -> (Cin*kh*kw, N*Ho*Wo), matching w.reshape(Cout, -1)
    cols = np.empty((cin, kh * kw, n, ho, wo))
    for idx, (si, sj) in enumerate(slices):
        cols[:, idx] = xp[:, :, si, sj].transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * kh * kw, n * ho * wo)
    wmat = w.data.reshape(cout, -1)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gmat).reshape(cin, kh * kw, n, ho, wo)
            dxp = np.zeros(xp.shape)
            for idx, (si, sj) in enumerate(slices):
                dxp[:, :, si, sj] += dcols[:, idx].transpose(1, 0, 2, 3)
            gx = dxp[:, :, padding: padding + h, padding: padding + wd] if padding else dxp
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def pool(x: Tensor, kind: str, k: int, stride: int | None = None) -> Tensor:
    """Windowed max or average reduction over H and W."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k < 1 or k > h or k > w:
        raise ValueError(f"pool window {k} exceeds input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    slices = [
        (np.s_[i: i + stride * (ho - 1) + 1: stride], np.s_[j: j + stride * (wo - 1) + 1: stride])
        for i in range(k) for j in range(k)
    ]
    windows = np.stack([x.data[:, :, si, sj] for si, sj in slices])

    if kind == "max":
        arg = windows.argmax(axis=0)
        out = np.take_along_axis(windows, arg[None], axis=0)[0]

        def backward(g):
            gx = np.zeros(x.shape)
            for idx, (si, sj) in enumerate(slices):
                gx[:, :, si, sj] += g * (arg == idx)
            return (gx,)
    else:
        out = windows.mean(axis=0)
        scale = 1.0 / (k * k)

        def backward(g):
            gx = np.zeros(x.shape)
            for si, sj in slices:
                gx[:, :, si, sj] += g * scale
            return (gx,)

    return Tensor._from_op(out, (x,), backward)


def max_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    return pool(x, "max", k, stride)


def avg_pool2d(x: Tensor, k: int = 2, stride: int | None = None) -> Tensor:
    return pool(x, "avg", k, stride)


# -- parameters -------------------------------------------------------------------

class ParamStore:
    """Ordered name -> Tensor map of trainable parameters."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: Tensor | np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((k, t.data.copy()) for k, t in self._params.items())

    def load(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


# -- gradient checking ---------------------------------------------------------------

def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    wrt: Iterable[Tensor] = (),
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection so every
    output element contributes.  Per element the error is
    ``|a - n| / max(|a|, |n|, 1e-3 * scale)`` where ``scale`` is the largest
    gradient magnitude; the floor keeps near-zero entries from dividing
    rounding noise by ~0.
    """
    targets = [x, *wrt]
    for t in targets:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check requires float64 tensors")
    flags = [t.requires_grad for t in targets]
    for t in targets:
        t.requires_grad = True
        t.grad = None

    projection: list[np.ndarray] = []

    def scalar() -> Tensor:
        out = f(x)
        if out.size == 1:
            return out.reshape(())
        if not projection:
            projection.append(np.random.default_rng(seed).uniform(-1.0, 1.0, out.shape))
        return (out * Tensor(projection[0])).sum()

    loss = scalar()
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in targets]

    numeric = []
    for t in targets:
        num = np.zeros(t.shape)
        flat = t.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = scalar().data.item()
            flat[i] = orig - eps
            fm = scalar().data.item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * eps)
        numeric.append(num)

    for t, flag in zip(targets, flags):
        t.requires_grad = flag
        t.grad = None

    a = np.concatenate([g.reshape(-1) for g in analytic])
    n = np.concatenate([g.reshape(-1) for g in numeric])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())
