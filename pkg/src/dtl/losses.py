"""Training objectives of the dual-branch model and the affinity graph.

All functions take :class:`~dtl.diffnum.Tensor` inputs shaped C×H×W or
N×C×H×W (channels at axis -3) and return scalar tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffnum as dn
from .diffnum import Tensor

LOG_EPS = 1e-8
NORM_EPS = 1e-12
DEFAULT_LAMBDAS = (1.0, 1.0, 0.1, 1.0)


class EmptySupervision(ValueError):
    """Every pixel carries the ignore label."""


class DivergenceError(FloatingPointError):
    """A loss term became non-finite."""


def _channel_axis(x: Tensor) -> int:
    return x.ndim - 3


def cross_entropy(logits, labels: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean of -log softmax(logits)[label] over pixels whose label is not ignored."""
    logits = dn.as_tensor(logits)
    labels = np.asarray(labels)
    axis = _channel_axis(logits)
    k = logits.shape[axis]
    expected = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expected:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    valid = labels != ignore_label
    n = int(valid.sum())
    if n == 0:
        raise EmptySupervision("all pixels carry the ignore label")
    if np.any((labels[valid] < 0) | (labels[valid] >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or equal ignore_label")
    logp = dn.log_softmax(logits, axis=axis)
    picked = dn.pick(logp, np.where(valid, labels, 0), axis=axis)
    return -(picked * valid.astype(np.float64)).sum() * (1.0 / n)


def log_l1(pred_depth, gt_depth: np.ndarray) -> Tensor:
    """Mean |log(pred) - log(gt)|, the depth-task supervision."""
    pred_depth = dn.as_tensor(pred_depth)
    gt = np.asarray(gt_depth, dtype=np.float64)
    if pred_depth.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred_depth.shape} vs {gt.shape}")
    return dn.absolute(dn.log(pred_depth) - np.log(gt)).mean()


def mean_abs_diff(a, b) -> Tensor:
    a, b = dn.as_tensor(a), dn.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return dn.absolute(a - b).mean()


def eit_reconstruction(image, aps_target) -> Tensor:
    """L1 between the translated image and the intensity frame."""
    return mean_abs_diff(image, aps_target)


def _check_simplex(p: Tensor, name: str, tol: float = 1e-6) -> None:
    sums = p.data.sum(axis=_channel_axis(p))
    if np.any(np.abs(sums - 1.0) > tol) or np.any(p.data < 0):
        raise ValueError(f"{name} is not a per-pixel probability distribution")


def kl_per_pixel(p, q) -> Tensor:
    """Mean over pixels of sum_k p_k (log(p_k + eps) - log(q_k + eps))."""
    p, q = dn.as_tensor(p), dn.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    axis = _channel_axis(p)
    terms = p * (dn.log(p + LOG_EPS) - dn.log(q + LOG_EPS))
    return terms.sum(axis=axis).mean()


def semantic_consistency(teacher_on_generated, teacher_on_aps, task: str = "segmentation") -> Tensor:
    """KL[T(generated) || T(aps)]; L1 between teacher depths for the depth task."""
    if task == "depth":
        return mean_abs_diff(teacher_on_generated, teacher_on_aps)
    return kl_per_pixel(teacher_on_generated, teacher_on_aps)


def prediction_transfer(student, teacher_on_aps, task: str = "segmentation") -> Tensor:
    """KL[softmax(student logits) || T(aps)]; L1 between depths for the depth task."""
    student, teacher_on_aps = dn.as_tensor(student), dn.as_tensor(teacher_on_aps)
    if student.shape != teacher_on_aps.shape:
        raise ValueError(f"student {student.shape} and teacher {teacher_on_aps.shape} disagree")
    if task == "depth":
        return mean_abs_diff(student, teacher_on_aps)
    return kl_per_pixel(dn.softmax(student, axis=_channel_axis(student)), teacher_on_aps)


# ---------------------------------------------------------------------------
# affinity graph
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class AffinityGraph:
    height: int
    width: int
    sigma: int
    values: Tensor  # (..., H*W, sigma)


def neighbour_offsets(sigma: int) -> list[tuple[int, int]]:
    """Row-major (dy, dx) offsets of the sqrt(sigma) × sqrt(sigma) window."""
    side = math.isqrt(sigma)
    if side * side != sigma or side % 2 == 0:
        raise ValueError(f"sigma must be an odd square (1, 9, 25, ...), got {sigma}")
    r = side // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


def neighbour_index(height: int, width: int, sigma: int) -> np.ndarray:
    """(H*W, sigma) flat node indices, replicate-clamped at the borders."""
    yy, xx = np.mgrid[0:height, 0:width]
    cols = []
    for dy, dx in neighbour_offsets(sigma):
        ny = np.clip(yy + dy, 0, height - 1)
        nx = np.clip(xx + dx, 0, width - 1)
        cols.append((ny * width + nx).reshape(-1))
    return np.stack(cols, axis=1)


def affinity_graph(features, sigma: int = 9) -> AffinityGraph:
    """Cosine similarity of every node's channel vector with its sigma neighbours."""
    features = dn.as_tensor(features)
    axis = _channel_axis(features)
    if axis < 0:
        raise ValueError(f"features must be C×H×W or N×C×H×W, got {features.shape}")
    c, h, w = features.shape[-3:]
    lead = features.shape[:-3]
    unit = dn.l2_normalize(features, axis=axis, eps=NORM_EPS).reshape(lead + (c, h * w))
    idx = neighbour_index(h, w, sigma)
    neighbours = unit[(Ellipsis, idx)]  # (..., C, H*W, sigma)
    centre = unit.reshape(lead + (c, h * w, 1))
    values = (centre * neighbours).sum(axis=axis)
    return AffinityGraph(height=h, width=w, sigma=sigma, values=values)


def feature_transfer(a_eit: AffinityGraph, a_eel: AffinityGraph, stop_gradient: bool = False) -> Tensor:
    """Mean squared difference of two affinity graphs over all H*W*sigma entries."""
    if (a_eit.height, a_eit.width, a_eit.sigma) != (a_eel.height, a_eel.width, a_eel.sigma):
        raise ValueError("affinity graphs differ in grid size or neighbourhood")
    if a_eit.values.shape != a_eel.values.shape:
        raise ValueError(f"affinity value shapes differ: {a_eit.values.shape} vs {a_eel.values.shape}")
    target = a_eit.values.detach() if stop_gradient else a_eit.values
    diff = target - a_eel.values
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# full objective
# ---------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    ce: float
    eit: float
    sc: float
    fl: float
    pl: float
    total: float
    lambdas: tuple[float, float, float, float]
    tensor: Tensor | None = field(default=None, repr=False, compare=False)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("ce", "eit", "sc", "fl", "pl", "total")}


def total_loss(ce, eit=0.0, sc=0.0, fl=0.0, pl=0.0, lambdas=DEFAULT_LAMBDAS) -> LossBreakdown:
    """L = ce + l1*eit + l2*sc + l3*fl + l4*pl; parts may be floats or scalar tensors."""
    lambdas = tuple(float(v) for v in lambdas)
    if len(lambdas) != 4 or any(v < 0 for v in lambdas):
        raise ValueError(f"need four non-negative lambdas, got {lambdas}")
    parts = [dn.as_tensor(v) for v in (ce, eit, sc, fl, pl)]
    names = ("ce", "eit", "sc", "fl", "pl")
    for name, part in zip(names, parts):
        if not np.all(np.isfinite(part.data)):
            raise DivergenceError(f"loss term {name} is not finite")
    total = parts[0]
    for lam, part in zip(lambdas, parts[1:]):
        if lam != 0.0:
            total = total + part * lam
    values = [p.item() for p in parts]
    return LossBreakdown(*values, total=total.item(), lambdas=lambdas, tensor=total)
