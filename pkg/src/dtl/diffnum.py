"""Small reverse-mode autodiff over float64 numpy arrays.

Every layer and loss in the package is composed from the ops in this module,
so every gradient can be checked against central differences with
:func:`grad_check`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

# When not None, ops with kinks (relu, abs) append their inputs here so that
# grad_check can reject points too close to a non-differentiable location.
_kink_monitor: list | None = None


def _watch_kinks(x: np.ndarray) -> None:
    if _kink_monitor is not None:
        _kink_monitor.append(x)


class Tensor:
    """Shaped float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad and not _parents else None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), op=op)
    if needs:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _node(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _node(a.data ** exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    _watch_kinks(a.data)
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    _watch_kinks(x.data)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _tanh_backward(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (1.0 - y * y)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (_tanh_backward(y, g),), "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y = np.logaddexp(0.0, x.data)
    sig = np.exp(x.data - y)  # sigmoid(x), stable for both signs
    return _node(y, (x,), lambda g: (g * sig,), "softplus")


def softmax(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _node(p, (x,), backward, "softmax")


def log_softmax(x, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape: tuple) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _node(x.data[index], (x,), backward, "take")


def pick(x, index: np.ndarray, axis: int) -> Tensor:
    """Select one entry along `axis` per position, like np.take_along_axis.

    `index` has x's shape with `axis` removed.
    """
    x = as_tensor(x)
    idx = np.expand_dims(np.asarray(index, dtype=np.intp), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(out, (x,), backward, "pick")


def l2_normalize(x, axis: int, eps: float = 1e-12) -> Tensor:
    """x / ||x|| along `axis`; vectors with norm below `eps` map to zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    ok = norm >= eps
    inv = np.where(ok, 1.0 / np.where(ok, norm, 1.0), 0.0)
    y = x.data * inv

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) * inv,)

    return _node(y, (x,), backward, "l2_normalize")


# ---------------------------------------------------------------------------
# spatial ops (inputs are C×H×W or N×C×H×W)
# ---------------------------------------------------------------------------

def _batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected C×H×W or N×C×H×W input, got shape {x.shape}")
    return x, False


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding, via im2col and one GEMM."""
    x, weight = as_tensor(x), as_tensor(weight)
    x, squeeze = _batched(x)
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernels {weight.shape}")
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d output would be empty for input {x.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias shape {bias.shape} does not match {c_out} output channels")

    if stride == 1:
        return _conv2d_stride1(x, weight, bias, padding, squeeze)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :h_out, :w_out]
    # cols: (C*k*k, N*Ho*Wo), so forward and both weight/input grads are plain GEMMs
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * h_out * w_out)
    wmat = weight.data.reshape(c_out, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(c_out, n, h_out, w_out).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c, k, k, n, h_out, w_out)
            gxp = np.zeros((c, n) + xp.shape[2:])
            span_h = stride * (h_out - 1) + 1
            span_w = stride * (w_out - 1) + 1
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gw)
        return grads + (gb,) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _node(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def _conv2d_stride1(x: Tensor, weight: Tensor, bias: Tensor | None, padding: int, squeeze: bool) -> Tensor:
    """Stride-1 conv as k*k shifted GEMMs over a padded, flattened image.

    With channels first and (N, Hp, Wp) flattened, the input seen by kernel tap
    (i, j) is one contiguous column range of the flat array, so no im2col
    buffer is materialised. Output columns that fall on padding are discarded.
    """
    n, c, h, w = x.shape
    c_out, _, k, _ = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    h_out, w_out = hp - k + 1, wp - k + 1
    total = n * hp * wp
    span = total - (k - 1) * wp - (k - 1)
    xp = np.zeros((c, n, hp, wp))
    xp[:, :, padding:padding + h, padding:padding + w] = x.data.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, total)
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))  # k, k, C_out, C_in
    offsets = [(i, j, i * wp + j) for i in range(k) for j in range(k)]
    acc = np.zeros((c_out, total))
    buf = np.empty((c_out, span))
    for i, j, off in offsets:
        np.matmul(taps[i, j], xf[:, off:off + span], out=buf)
        acc[:, :span] += buf
    out = acc.reshape(c_out, n, hp, wp)[:, :, :h_out, :w_out]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gfull = np.zeros((c_out, n, hp, wp))
        gfull[:, :, :h_out, :w_out] = g.transpose(1, 0, 2, 3)
        gf = gfull.reshape(c_out, total)[:, :span]
        gw = gx = gb = None
        if weight.requires_grad:
            gtaps = np.empty((k, k, c_out, c))
            for i, j, off in offsets:
                np.matmul(gf, xf[:, off:off + span].T, out=gtaps[i, j])
            gw = gtaps.transpose(2, 3, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxf = np.zeros((c, total))
            gbuf = np.empty((c, span))
            for i, j, off in offsets:
                np.matmul(taps[i, j].T, gf, out=gbuf)
                gxf[:, off:off + span] += gbuf
            gx = gxf.reshape(c, n, hp, wp)[:, :, padding:padding + h, padding:padding + w].transpose(1, 0, 2, 3)
        grads = (gx, gw)
        return grads + (gb,) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    res = _node(out, parents, backward, "conv2d")
    return reshape(res, res.shape[1:]) if squeeze else res


def _bilinear_matrix(n: int) -> np.ndarray:
    """(2n × n) interpolation matrix, align_corners=False, edge-clamped."""
    out = np.arange(2 * n)
    src = np.maximum((out + 0.5) / 2.0 - 0.5, 0.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    m = np.zeros((2 * n, n))
    np.add.at(m, (out, i0), 1.0 - frac)
    np.add.at(m, (out, i1), frac)
    return m


def upsample2x(x, mode: str = "nearest") -> Tensor:
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"upsample2x expects C×H×W or N×C×H×W, got {x.shape}")
    h, w = x.shape[-2:]
    if mode == "nearest":
        out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

        def backward(g):
            g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
            return (g.sum(axis=(-3, -1)),)

        return _node(out, (x,), backward, "upsample_nearest")
    if mode == "bilinear":
        mh, mw = _bilinear_matrix(h), _bilinear_matrix(w)
        out = mh @ x.data @ mw.T

        def backward(g):
            return (mh.T @ g @ mw,)

        return _node(out, (x,), backward, "upsample_bilinear")
    raise ValueError(f"unknown upsample mode {mode!r}")


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every requires_grad leaf's `.grad`."""
    if root.data.size != 1 or root.ndim > 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=DTYPE, copy=True).reshape(parent.shape)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

def kink_margin(f: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[Tensor]) -> float:
    """Smallest |argument| seen by any relu/abs while evaluating f."""
    global _kink_monitor
    _kink_monitor = []
    try:
        f(inputs)
        seen = _kink_monitor
    finally:
        _kink_monitor = None
    if not seen:
        return float("inf")
    return float(min(np.abs(a).min() for a in seen if a.size))


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    *,
    resample: Callable[[int], Sequence[Tensor]] | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    max_resamples: int = 50,
) -> float:
    """Max relative error between backprop and central differences.

    `f` maps the input list to a scalar Tensor. Only inputs with
    ``requires_grad`` are checked. If any relu/abs argument lies within
    ``10 * eps`` of its kink, fresh inputs are drawn from ``resample(attempt)``.
    With ``max_coords`` set, a random subset of coordinates per input is checked.
    """
    inputs = list(inputs)
    attempt = 0
    while kink_margin(f, inputs) <= 10 * eps:
        if resample is None:
            raise ValueError("inputs lie on a relu/abs kink and no resampler was given")
        attempt += 1
        if attempt > max_resamples:
            raise RuntimeError("could not sample inputs away from kinks")
        inputs = list(resample(attempt))

    for t in inputs:
        t.zero_grad()
    out = f(inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(inputs).item()
            flat[i] = orig - eps
            fm = f(inputs).item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
