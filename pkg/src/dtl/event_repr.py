"""Dense tensor embeddings of an event window."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .event_io import EventWindow

DEFAULT_BINS = 4
PERCENTILE = 98.0


class ReprKind(str, Enum):
    MULTICHANNEL = "multichannel"
    VOXEL_GRID = "voxel_grid"
    SIX_CHANNEL = "six_channel"


@dataclass(eq=False)
class EventTensor:
    kind: ReprKind
    data: np.ndarray  # C×H×W float64

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _check_geometry(w: EventWindow, height: int, width: int) -> None:
    if (w.height, w.width) != (height, width):
        raise ValueError(f"window geometry {w.width}x{w.height} does not match requested {width}x{height}")


def _normalized_time(w: EventWindow) -> np.ndarray:
    return (w.t - w.t_start) / w.duration


def _percentile_normalize(counts: np.ndarray) -> np.ndarray:
    nonzero = counts[counts > 0]
    divisor = max(float(np.percentile(nonzero, PERCENTILE)), 1.0) if nonzero.size else 1.0
    return np.clip(counts / divisor, 0.0, 1.0)


def raw_counts(w: EventWindow, bins: int, height: int, width: int) -> np.ndarray:
    """Unnormalized (2*bins)×H×W event counts; channel = 2*bin + (0 if p>0 else 1)."""
    if bins < 1:
        raise ValueError(f"bin count must be >= 1, got {bins}")
    _check_geometry(w, height, width)
    b = np.clip(np.floor(_normalized_time(w) * bins).astype(np.int64), 0, bins - 1)
    ch = 2 * b + (w.p < 0)
    counts = np.zeros(2 * bins * height * width)
    np.add.at(counts, (ch * height + w.y) * width + w.x, 1.0)
    return counts.reshape(2 * bins, height, width)


def to_multichannel(w: EventWindow, bins: int = DEFAULT_BINS, height: int | None = None, width: int | None = None) -> EventTensor:
    height = w.height if height is None else height
    width = w.width if width is None else width
    return EventTensor(ReprKind.MULTICHANNEL, _percentile_normalize(raw_counts(w, bins, height, width)))


def to_voxel_grid(w: EventWindow, bins: int = DEFAULT_BINS, height: int | None = None, width: int | None = None) -> EventTensor:
    """Signed-polarity voxel grid with linear interpolation between temporal bins."""
    height = w.height if height is None else height
    width = w.width if width is None else width
    if bins < 2:
        raise ValueError(f"voxel grid needs at least 2 bins, got {bins}")
    _check_geometry(w, height, width)
    ts = _normalized_time(w) * (bins - 1)
    k0 = np.floor(ts).astype(np.int64)
    frac = ts - k0
    pix = w.y * width + w.x
    grid = np.zeros(bins * height * width)
    pol = w.p.astype(np.float64)
    inside = (k0 >= 0) & (k0 < bins)
    np.add.at(grid, k0[inside] * height * width + pix[inside], (pol * (1.0 - frac))[inside])
    upper = (k0 + 1 < bins) & (frac > 0) & (k0 + 1 >= 0)
    np.add.at(grid, (k0[upper] + 1) * height * width + pix[upper], (pol * frac)[upper])
    return EventTensor(ReprKind.VOXEL_GRID, grid.reshape(bins, height, width))


def to_six_channel(w: EventWindow, height: int | None = None, width: int | None = None) -> EventTensor:
    """Per polarity: normalized count, mean and population std of normalized timestamps."""
    height = w.height if height is None else height
    width = w.width if width is None else width
    _check_geometry(w, height, width)
    tau = _normalized_time(w)
    n_pix = height * width
    pix = w.y * width + w.x
    out = np.zeros((6, n_pix))
    counts = np.zeros((2, n_pix))
    for k, sign in enumerate((1, -1)):
        sel = w.p == sign
        np.add.at(counts[k], pix[sel], 1.0)
        total = np.zeros(n_pix)
        np.add.at(total, pix[sel], tau[sel])
        has = counts[k] > 0
        mean = np.where(has, total / np.where(has, counts[k], 1.0), 0.0)
        dev = np.zeros(n_pix)
        np.add.at(dev, pix[sel], (tau[sel] - mean[pix[sel]]) ** 2)
        std = np.sqrt(np.where(has, dev / np.where(has, counts[k], 1.0), 0.0))
        out[3 * k + 1] = mean
        out[3 * k + 2] = std
    norm = _percentile_normalize(counts)
    out[0], out[3] = norm[0], norm[1]
    return EventTensor(ReprKind.SIX_CHANNEL, out.reshape(6, height, width))


def embed(w: EventWindow, kind: ReprKind | str, bins: int = DEFAULT_BINS) -> EventTensor:
    kind = ReprKind(kind)
    if kind is ReprKind.MULTICHANNEL:
        return to_multichannel(w, bins)
    if kind is ReprKind.VOXEL_GRID:
        return to_voxel_grid(w, bins)
    return to_six_channel(w)


def input_channels(kind: ReprKind | str, bins: int = DEFAULT_BINS) -> int:
    kind = ReprKind(kind)
    if kind is ReprKind.MULTICHANNEL:
        return 2 * bins
    if kind is ReprKind.VOXEL_GRID:
        return bins
    return 6
