"""Randomized gradient checks over every op, layer, loss and the full objective.

Each item builds a scalar function of freshly drawn inputs and reports the
worst relative error of :func:`dtl.diffnum.grad_check`. Non-scalar ops are
reduced with a fixed random weighting so that no gradient is trivially zero
(a plain sum of a softmax, for instance, is constant).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffnum as dn
from . import losses as L
from . import networks as nw
from .diffnum import Tensor

TOLERANCE = 1e-4


@dataclass
class ItemResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= TOLERANCE


def _leaf(rng, *shape, low=None, high=None) -> Tensor:
    if low is None:
        data = rng.normal(size=shape)
    else:
        data = rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(y: Tensor, weights: np.ndarray) -> Tensor:
    return (y * weights).sum()


def _probs(rng, *shape) -> np.ndarray:
    z = rng.normal(size=shape)
    e = np.exp(z - z.max(axis=-3, keepdims=True))
    return e / e.sum(axis=-3, keepdims=True)


# Each builder draws inputs from rng and returns (f, inputs).
Builder = Callable[[np.random.Generator], tuple]


def _unary(op, low=None, high=None, shape=(3, 4)) -> Builder:
    def build(rng):
        x = _leaf(rng, *shape, low=low, high=high)
        w = rng.normal(size=shape)
        return (lambda a: _weighted(op(a[0]), w)), [x]
    return build


def _binary(op, b_shape=(3, 4), positive_b=False) -> Builder:
    def build(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, *b_shape, low=0.5 if positive_b else None, high=2.0 if positive_b else None)
        w = rng.normal(size=(3, 4))
        return (lambda t: _weighted(op(t[0], t[1]), w)), [a, b]
    return build


def _conv(stride: int) -> Builder:
    def build(rng):
        x = _leaf(rng, 2, 3, 6, 6)
        k = _leaf(rng, 4, 3, 3, 3)
        b = _leaf(rng, 4)
        ho = (6 + 2 - 3) // stride + 1
        w = rng.normal(size=(2, 4, ho, ho))
        return (lambda t: _weighted(dn.conv2d(t[0], t[1], t[2], stride=stride, padding=1), w)), [x, k, b]
    return build


def _upsample(mode: str) -> Builder:
    def build(rng):
        x = _leaf(rng, 2, 3, 3)
        w = rng.normal(size=(2, 6, 6))
        return (lambda t: _weighted(dn.upsample2x(t[0], mode), w)), [x]
    return build


def _take(rng):
    x = _leaf(rng, 4, 5)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 4, 0]))  # repeated entry checks accumulation
    w = rng.normal(size=4)
    return (lambda t: _weighted(t[0][idx], w)), [x]


def _pick(rng):
    x = _leaf(rng, 2, 3, 4)
    index = rng.integers(0, 3, size=(2, 4))
    w = rng.normal(size=(2, 4))
    return (lambda t: _weighted(dn.pick(t[0], index, axis=1), w)), [x]


def _reduce(op, axis) -> Builder:
    def build(rng):
        x = _leaf(rng, 3, 4, 2)
        shape = np.sum(np.zeros((3, 4, 2)), axis=axis).shape
        w = rng.normal(size=shape)
        return (lambda t: _weighted(op(t[0], axis=axis), w)), [x]
    return build


def _reshape(rng):
    x = _leaf(rng, 3, 4)
    w = rng.normal(size=(2, 6))
    return (lambda t: _weighted(t[0].reshape(2, 6), w)), [x]


# losses --------------------------------------------------------------------

def _cross_entropy(rng):
    logits = _leaf(rng, 2, 4, 3, 3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = 255
    return (lambda t: L.cross_entropy(t[0], labels)), [logits]


def _log_l1(rng):
    pred = _leaf(rng, 1, 4, 4, low=0.5, high=3.0)
    gt = rng.uniform(0.5, 3.0, size=(1, 4, 4))
    return (lambda t: L.log_l1(t[0], gt)), [pred]


def _eit(rng):
    image = _leaf(rng, 1, 4, 4, low=-0.9, high=0.9)
    aps = rng.uniform(-1, 1, size=(1, 4, 4))
    return (lambda t: L.eit_reconstruction(t[0], aps)), [image]


def _kl(rng):
    # logits feed softmax so both arguments stay on the simplex under perturbation
    zp = _leaf(rng, 3, 4, 4)
    zq = _leaf(rng, 3, 4, 4)
    return (lambda t: L.kl_per_pixel(dn.softmax(t[0], 0), dn.softmax(t[1], 0))), [zp, zq]


def _sc_seg(rng):
    z = _leaf(rng, 2, 3, 4, 4)
    q = _probs(rng, 2, 3, 4, 4)
    return (lambda t: L.semantic_consistency(dn.softmax(t[0], 1), q)), [z]


def _sc_depth(rng):
    d = _leaf(rng, 1, 4, 4, low=1.0, high=5.0)
    ref = rng.uniform(1.0, 5.0, size=(1, 4, 4))
    return (lambda t: L.semantic_consistency(t[0], ref, "depth")), [d]


def _affinity(rng):
    f = _leaf(rng, 3, 4, 4)
    w = rng.normal(size=(16, 9))
    return (lambda t: _weighted(L.affinity_graph(t[0]).values, w)), [f]


def _feature_transfer(rng):
    a = _leaf(rng, 2, 3, 4, 4)
    b = _leaf(rng, 2, 3, 4, 4)
    return (lambda t: L.feature_transfer(L.affinity_graph(t[0]), L.affinity_graph(t[1]))), [a, b]


def _pl_seg(rng):
    z = _leaf(rng, 2, 4, 4, 4)
    q = _probs(rng, 2, 4, 4, 4)
    return (lambda t: L.prediction_transfer(t[0], q)), [z]


def _pl_depth(rng):
    d = _leaf(rng, 1, 4, 4, low=1.0, high=5.0)
    ref = rng.uniform(1.0, 5.0, size=(1, 4, 4))
    return (lambda t: L.prediction_transfer(t[0], ref, "depth")), [d]


def _total(rng):
    parts = [_leaf(rng, low=0.1, high=2.0) for _ in range(5)]
    return (lambda t: L.total_loss(*t, lambdas=(1.0, 1.0, 0.1, 1.0)).tensor), parts


# networks ------------------------------------------------------------------

SIZE = 8  # spatial size for network-level checks


def _net_params(rng, manifest) -> dict[str, Tensor]:
    params = nw.init_params(manifest, int(rng.integers(2**31)))
    for p in params.values():  # non-zero biases move pre-activations off exact zeros
        if p.ndim == 1:
            p.data[:] = rng.normal(scale=0.1, size=p.shape)
    return params


def _net_item(kind: str) -> Builder:
    def build(rng):
        params = _net_params(rng, nw.model_manifest(8, 4))
        if kind == "encoder":
            x = _leaf(rng, 1, 8, SIZE, SIZE)
            w = rng.normal(size=(1, 64, SIZE // 4, SIZE // 4))
            names = [k for k in params if k.startswith("encoder.")]

            def f(t):
                return _weighted(nw.encoder_forward(dict(zip(names, t[1:])), t[0]), w)
            return f, [x] + [params[k] for k in names]
        if kind == "eel_decoder":
            z = _leaf(rng, 1, 64, SIZE // 4, SIZE // 4)
            w = rng.normal(size=(1, 4, SIZE, SIZE))
            names = [k for k in params if k.startswith("eel.")]

            def f(t):
                return _weighted(nw.eel_decoder_forward(dict(zip(names, t[1:])), t[0]).logits, w)
            return f, [z] + [params[k] for k in names]
        if kind == "eit_decoder":
            z = _leaf(rng, 1, 64, SIZE // 4, SIZE // 4)
            w = rng.normal(size=(1, 1, SIZE, SIZE))
            names = [k for k in params if k.startswith("eit.")]

            def f(t):
                return _weighted(nw.eit_decoder_forward(dict(zip(names, t[1:])), t[0]).image, w)
            return f, [z] + [params[k] for k in names]
        # teacher: gradient w.r.t. the input image only
        teacher = {k: Tensor(v.data) for k, v in _net_params(rng, nw.eel_manifest(1, 4)).items()}
        image = _leaf(rng, 1, 1, SIZE, SIZE, low=-0.9, high=0.9)
        w = rng.normal(size=(1, 4, SIZE, SIZE))
        return (lambda t: _weighted(nw.teacher_forward(teacher, t[0]), w)), [image]
    return build


def _end_to_end(task: str) -> Builder:
    def build(rng):
        k = 4 if task == "segmentation" else 1
        params = _net_params(rng, nw.model_manifest(8, k))
        teacher = {key: Tensor(v.data) for key, v in _net_params(rng, nw.eel_manifest(1, k)).items()}
        x = rng.uniform(0, 1, size=(2, 8, SIZE, SIZE))
        aps = rng.uniform(-1, 1, size=(2, 1, SIZE, SIZE))
        names = list(params)
        if task == "segmentation":
            labels = rng.integers(0, 4, size=(2, SIZE, SIZE))
        else:
            depth = rng.uniform(2.0, 10.0, size=(2, SIZE, SIZE))
        t_aps = nw.teacher_forward(teacher, aps, task).data

        def f(t):
            p = dict(zip(names, t))
            out = nw.eel_forward(p, x, task)
            if task == "segmentation":
                ce = L.cross_entropy(out.logits, labels)
            else:
                ce = L.log_l1(out.depth.reshape(2, SIZE, SIZE), depth)
            gen = nw.eit_decoder_forward(p, out.penultimate)
            eit = L.eit_reconstruction(gen.image, aps)
            sc = L.semantic_consistency(nw.teacher_forward(teacher, gen.image, task), t_aps, task)
            fl = L.feature_transfer(L.affinity_graph(gen.penultimate), L.affinity_graph(out.penultimate))
            pl = L.prediction_transfer(out.prediction, t_aps, task)
            return L.total_loss(ce, eit, sc, fl, pl).tensor
        return f, [params[n] for n in names]
    return build


ITEMS: dict[str, Builder] = {
    "add": _binary(dn.add, b_shape=(1, 4)),
    "sub": _binary(dn.sub, b_shape=(3, 1)),
    "mul": _binary(dn.mul),
    "div": _binary(dn.div, positive_b=True),
    "power": _unary(lambda x: dn.power(x, 2.5), 0.3, 2.0),
    "exp": _unary(dn.exp),
    "log": _unary(dn.log, 0.2, 3.0),
    "sqrt": _unary(dn.sqrt, 0.2, 3.0),
    "abs": _unary(dn.absolute),
    "relu": _unary(dn.relu),
    "tanh": _unary(dn.tanh),
    "softplus": _unary(dn.softplus),
    "softmax": _unary(lambda x: dn.softmax(x, axis=0)),
    "log_softmax": _unary(lambda x: dn.log_softmax(x, axis=1)),
    "l2_normalize": _unary(lambda x: dn.l2_normalize(x, axis=0)),
    "sum": _reduce(dn.tsum, 1),
    "mean": _reduce(dn.mean, (0, 2)),
    "reshape": _reshape,
    "take": _take,
    "pick": _pick,
    "conv2d_stride1": _conv(1),
    "conv2d_stride2": _conv(2),
    "upsample_nearest": _upsample("nearest"),
    "upsample_bilinear": _upsample("bilinear"),
    "cross_entropy": _cross_entropy,
    "log_l1": _log_l1,
    "eit_reconstruction": _eit,
    "kl_per_pixel": _kl,
    "semantic_consistency": _sc_seg,
    "semantic_consistency_depth": _sc_depth,
    "affinity_graph": _affinity,
    "feature_transfer": _feature_transfer,
    "prediction_transfer": _pl_seg,
    "prediction_transfer_depth": _pl_depth,
    "total_loss": _total,
    "encoder": _net_item("encoder"),
    "eel_decoder": _net_item("eel_decoder"),
    "eit_decoder": _net_item("eit_decoder"),
    "teacher": _net_item("teacher"),
    "end_to_end_segmentation": _end_to_end("segmentation"),
    "end_to_end_depth": _end_to_end("depth"),
}

# per-input coordinate budget; small inputs are checked exhaustively
MAX_COORDS = 24


def check_item(name: str, seed: int = 0) -> ItemResult:
    builder = ITEMS[name]
    index = list(ITEMS).index(name)
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    f, inputs = builder(rng)

    def resample(_attempt):
        nonlocal f
        f, fresh = builder(rng)
        return fresh

    try:
        err = dn.grad_check(
            lambda t: f(t), inputs, resample=resample, max_coords=MAX_COORDS,
            rng=np.random.default_rng(np.random.SeedSequence([seed, index, 1])),
        )
    except (FloatingPointError, ValueError, RuntimeError):
        err = float("inf")
    return ItemResult(name, float(err))


def run_suite(seed: int = 0, names=None) -> list[ItemResult]:
    return [check_item(name, seed) for name in (names or ITEMS)]
