"""Synthetic moving-shapes world with intensity, labels, depth and events.

Stands in for a DAVIS-style recording: :func:`render` gives the intensity
frame (the APS role) with per-pixel class ids and metric depth, and
:func:`simulate_events` runs a log-intensity contrast-threshold pixel model
over linearly interpolated frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .event_io import EventStream, EventWindow, quantize_timestamps, tile_windows

KINDS = ("circle", "square", "triangle")
CLASS_IDS = {"background": 0, "circle": 1, "square": 2, "triangle": 3}
NUM_CLASSES = 4
LOG_OFFSET = 0.01
SUPERSAMPLE = 4
BACKGROUND_DEPTH = 10.0


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    center: tuple[float, float]  # (x, y) at t = 0, pixels
    size: float  # circumscribed-circle-ish radius, pixels
    gray: float  # intensity in [0.2, 0.9]
    velocity: tuple[float, float]  # (vx, vy), px/s
    depth: float  # metres

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not 0.2 <= self.gray <= 0.9:
            raise ValueError(f"shape gray level {self.gray} outside [0.2, 0.9]")
        if self.depth <= 0:
            raise ValueError("shape depth must be positive")


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    height: int = 64
    width: int = 64
    shapes: tuple[ShapeSpec, ...] = ()
    background_gray: float = 0.5
    texture_amplitude: float = 0.06
    fps: float = 100.0
    duration: float = 5.0
    threshold: float = 0.15
    background_depth: float = BACKGROUND_DEPTH
    _texture: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if any(s.depth >= self.background_depth for s in self.shapes):
            raise ValueError("every shape must be nearer than the background")
        if self.threshold <= 0:
            raise ValueError("contrast threshold must be positive")

    @property
    def frame_count(self) -> int:
        return int(round(self.duration * self.fps)) + 1

    def texture(self) -> np.ndarray:
        if self._texture is None:
            rng = np.random.default_rng([self.seed, 7])
            noise = gaussian_filter(rng.standard_normal((self.height, self.width)), sigma=3.0, mode="wrap")
            noise /= max(np.abs(noise).max(), 1e-12)
            object.__setattr__(self, "_texture", noise * self.texture_amplitude)
        return self._texture

    def scaled(self, speed_factor: float) -> "SceneSpec":
        """Same scene with every velocity multiplied by `speed_factor`."""
        shapes = tuple(replace(s, velocity=(s.velocity[0] * speed_factor, s.velocity[1] * speed_factor)) for s in self.shapes)
        return replace(self, shapes=shapes, _texture=None)


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    n_shapes: int = 3,
    fps: float = 100.0,
    duration: float = 5.0,
    threshold: float = 0.15,
    speed_range: tuple[float, float] = (40.0, 100.0),
    size_range: tuple[float, float] = (5.0, 8.0),
) -> SceneSpec:
    """Scene whose first three shapes cover every kind once, in random order."""
    rng = np.random.default_rng(seed)
    bg = float(rng.uniform(0.2, 0.9))  # same range as shapes: brightness alone carries no class
    kinds = list(rng.permutation(KINDS))[: min(n_shapes, 3)]
    kinds += [KINDS[i] for i in rng.integers(0, 3, size=max(n_shapes - 3, 0))]
    depths = np.sort(rng.uniform(2.0, 8.0, size=n_shapes))[::-1]
    shapes = []
    for kind, depth in zip(kinds, depths):
        gray = float(rng.uniform(0.2, 0.9))
        while abs(gray - bg) < 0.15:
            gray = float(rng.uniform(0.2, 0.9))
        speed = rng.uniform(*speed_range)
        angle = rng.uniform(0, 2 * np.pi)
        shapes.append(
            ShapeSpec(
                kind=str(kind),
                center=(float(rng.uniform(0, width)), float(rng.uniform(0, height))),
                size=float(rng.uniform(*size_range)),
                gray=gray,
                velocity=(float(speed * np.cos(angle)), float(speed * np.sin(angle))),
                depth=float(depth),
            )
        )
    return SceneSpec(
        seed=seed,
        height=height,
        width=width,
        shapes=tuple(shapes),
        background_gray=bg,
        fps=fps,
        duration=duration,
        threshold=threshold,
    )


@dataclass(eq=False)
class FrameTriple:
    intensity: np.ndarray  # 1×H×W in [-1, 1]
    labels: np.ndarray  # H×W int64
    depth: np.ndarray  # H×W metres
    timestamp: float


def _inside(kind: str, size: float, dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if kind == "circle":
        return dx * dx + dy * dy <= size * size
    if kind == "square":
        half = 0.9 * size
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    # equilateral triangle, apex up (image y grows downward)
    r = 1.4 * size
    return (dy <= r / 2) & (dy >= math.sqrt(3) * np.abs(dx) - r)


def shape_center(shape: ShapeSpec, t: float, width: int, height: int) -> tuple[float, float]:
    return (
        (shape.center[0] + shape.velocity[0] * t) % width,
        (shape.center[1] + shape.velocity[1] * t) % height,
    )


def _wrapped_offsets(coord: np.ndarray, centre: float, period: int) -> np.ndarray:
    return (coord - centre + period / 2) % period - period / 2


def render(spec: SceneSpec, t: float) -> FrameTriple:
    """Frame at time t; painter's algorithm back to front, toroidal wrap-around."""
    h, w, s = spec.height, spec.width, SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s - 0.5
    sub_y = (np.arange(h)[:, None] + offs[None, :]).reshape(-1)
    sub_x = (np.arange(w)[:, None] + offs[None, :]).reshape(-1)
    py, px = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)

    intensity = np.clip(spec.background_gray + spec.texture(), 0.0, 1.0)
    labels = np.zeros((h, w), dtype=np.int64)
    depth = np.full((h, w), spec.background_depth)
    for shape in sorted(spec.shapes, key=lambda sh: -sh.depth):
        cx, cy = shape_center(shape, t, w, h)
        dy = _wrapped_offsets(sub_y, cy, h)[:, None]
        dx = _wrapped_offsets(sub_x, cx, w)[None, :]
        cover = _inside(shape.kind, shape.size, dx, dy).reshape(h, s, w, s).mean(axis=(1, 3))
        intensity = intensity * (1.0 - cover) + shape.gray * cover
        centre_mask = _inside(shape.kind, shape.size, _wrapped_offsets(px, cx, w)[None, :], _wrapped_offsets(py, cy, h)[:, None])
        labels[centre_mask] = CLASS_IDS[shape.kind]
        depth[centre_mask] = shape.depth
    return FrameTriple(intensity=(2.0 * intensity - 1.0)[None], labels=labels, depth=depth, timestamp=float(t))


def log_intensity(intensity: np.ndarray) -> np.ndarray:
    """log(0.01 + I) with I in [0, 1] recovered from a [-1, 1] frame."""
    return np.log(LOG_OFFSET + (np.asarray(intensity) + 1.0) / 2.0)


def frame_times(spec: SceneSpec) -> np.ndarray:
    if spec.fps < 2:
        raise ValueError("frame rate must be at least 2 Hz")
    return np.arange(spec.frame_count) / spec.fps


def events_from_log_frames(
    log_frames: np.ndarray, times: np.ndarray, threshold: float, width: int, height: int
) -> tuple[EventStream, np.ndarray]:
    """Contrast-threshold events from a (T, H, W) stack of log-intensity frames.

    Returns the stream and the final per-pixel reference level.
    """
    tol = 1e-9
    ref = log_frames[0].reshape(-1).copy()
    chunks = []
    for k in range(len(times) - 1):
        l0 = log_frames[k].reshape(-1)
        l1 = log_frames[k + 1].reshape(-1)
        delta = l1 - ref
        n = np.floor(np.abs(delta) / threshold + tol).astype(np.int64)
        pix = np.flatnonzero(n)
        if pix.size == 0:
            continue
        counts = n[pix]
        sign = np.sign(delta[pix]).astype(np.int64)
        rep_pix = np.repeat(pix, counts)
        rep_sign = np.repeat(sign, counts)
        j = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
        level = ref[rep_pix] + rep_sign * j * threshold
        slope = l1[rep_pix] - l0[rep_pix]
        frac = np.clip((level - l0[rep_pix]) / slope, 0.0, 1.0)
        t = times[k] + frac * (times[k + 1] - times[k])
        chunks.append((t, rep_pix, rep_sign))
        ref[pix] += sign * counts * threshold
    if not chunks:
        return EventStream(width, height), ref.reshape(height, width)
    t = quantize_timestamps(np.concatenate([c[0] for c in chunks]))
    pix = np.concatenate([c[1] for c in chunks])
    pol = np.concatenate([c[2] for c in chunks])
    y, x = pix // width, pix % width
    order = np.lexsort((pol, x, y, t))
    stream = EventStream(width, height, t[order], x[order], y[order], pol[order], validate=False)
    return stream, ref.reshape(height, width)


def render_log_frames(spec: SceneSpec) -> np.ndarray:
    return np.stack([log_intensity(render(spec, t).intensity[0]) for t in frame_times(spec)])


def simulate_events(spec: SceneSpec) -> EventStream:
    stream, _ = events_from_log_frames(render_log_frames(spec), frame_times(spec), spec.threshold, spec.width, spec.height)
    return stream


@dataclass(eq=False)
class Sample:
    window: EventWindow
    frame: FrameTriple


def make_dataset(spec: SceneSpec, window: float = 0.05, stream: EventStream | None = None) -> list[Sample]:
    """Tiling windows over the clip, each paired with the frame at its end time."""
    count = spec.duration / window
    if abs(count - round(count)) > 1e-9:
        raise ValueError(f"window {window} does not divide duration {spec.duration}")
    stream = simulate_events(spec) if stream is None else stream
    windows = tile_windows(stream, window, spec.duration)
    return [Sample(w, render(spec, w.t_end)) for w in windows]
