"""On-disk synthetic datasets: event files plus per-sample frame images.

Layout of one clip directory::

    events.txt                 event_io text format
    frames.txt                 "index timestamp" per sample (frame at window end)
    frames/0000_intensity.pgm  16-bit, [-1, 1] mapped onto [0, 65535]
    frames/0000_labels.pgm     8-bit class ids
    frames/0000_depth.pgm      16-bit millimetres

A dataset directory holds ``train/clip_000``, ``train/clip_001``, ... and the
same under ``test``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .event_io import parse_events, tile_windows, write_events
from .synth import FrameTriple, Sample, SceneSpec, make_dataset, random_scene, simulate_events

INTENSITY_MAX = 65535
DEPTH_SCALE = 1000.0  # stored in millimetres


@dataclass(frozen=True)
class SimConfig:
    """Scene and split parameters accepted by ``dtl simulate``."""

    seed: int = 0
    height: int = 64
    width: int = 64
    n_shapes: int = 3
    fps: float = 100.0
    threshold: float = 0.15
    window: float = 0.05
    clip_seconds: float = 0.5
    train_seconds: float = 60.0
    test_seconds: float = 10.0
    speed_min: float = 40.0
    speed_max: float = 100.0
    size_min: float = 5.0
    size_max: float = 8.0

    def __post_init__(self):
        from .config import ConfigError

        if self.height % 4 or self.width % 4 or self.height <= 0 or self.width <= 0:
            raise ConfigError("height and width must be positive multiples of 4", "height")
        if self.n_shapes < 1:
            raise ConfigError("n_shapes must be >= 1", "n_shapes")
        if self.fps < 2:
            raise ConfigError("fps must be at least 2", "fps")
        if self.threshold <= 0:
            raise ConfigError("threshold must be positive", "threshold")
        if self.window <= 0 or self.clip_seconds <= 0:
            raise ConfigError("window and clip_seconds must be positive", "window")
        ratio = self.clip_seconds / self.window
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("window must divide clip_seconds", "window")
        if self.train_seconds < 0 or self.test_seconds < 0:
            raise ConfigError("split durations must be non-negative", "train_seconds")
        if not 0 < self.size_min <= self.size_max:
            raise ConfigError("need 0 < size_min <= size_max", "size_min")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ConfigError("need 0 <= speed_min <= speed_max", "speed_min")

    def clip_count(self, split: str) -> int:
        seconds = self.train_seconds if split == "train" else self.test_seconds
        return int(round(seconds / self.clip_seconds))

    def scene(self, scene_seed: int) -> SceneSpec:
        return random_scene(
            scene_seed,
            height=self.height,
            width=self.width,
            n_shapes=self.n_shapes,
            fps=self.fps,
            duration=self.clip_seconds,
            threshold=self.threshold,
            speed_range=(self.speed_min, self.speed_max),
            size_range=(self.size_min, self.size_max),
        )


def clip_seeds(data_seed: int, split: str, count: int) -> list[int]:
    """Distinct scene seeds per split; train and test never share one."""
    tag = {"train": 1, "test": 2}[split]
    return [int(np.random.SeedSequence([data_seed, tag, i]).generate_state(1)[0]) for i in range(count)]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def encode_intensity(intensity: np.ndarray) -> np.ndarray:
    return np.round((np.clip(intensity, -1.0, 1.0) + 1.0) / 2.0 * INTENSITY_MAX).astype(np.uint16)


def decode_intensity(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / INTENSITY_MAX * 2.0 - 1.0


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype not in (np.uint8, np.uint16):
        raise TypeError(f"PGM images must be uint8 or uint16, got {image.dtype}")
    Image.fromarray(image).save(path, format="PPM")


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as img:
        data = np.array(img)
        # Pillow widens 16-bit PGM to 32-bit integers
        return data.astype(np.uint8 if img.mode == "L" else np.uint16)


# ---------------------------------------------------------------------------
# clips
# ---------------------------------------------------------------------------

def write_frame(frame_dir: Path, index: int, frame: FrameTriple) -> list[Path]:
    stem = frame_dir / f"{index:04d}"
    paths = [Path(f"{stem}_intensity.pgm"), Path(f"{stem}_labels.pgm"), Path(f"{stem}_depth.pgm")]
    write_pgm(paths[0], encode_intensity(frame.intensity[0]))
    write_pgm(paths[1], frame.labels.astype(np.uint8))
    write_pgm(paths[2], np.round(frame.depth * DEPTH_SCALE).astype(np.uint16))
    return paths


def write_clip(clip_dir: str | os.PathLike, spec: SceneSpec, window: float) -> list[Path]:
    """Simulate `spec` and write its events and window-end frames; returns written files."""
    clip_dir = Path(clip_dir)
    frame_dir = clip_dir / "frames"
    frame_dir.mkdir(parents=True, exist_ok=True)
    stream = simulate_events(spec)
    events_path = clip_dir / "events.txt"
    with open(events_path, "wb") as fh:
        write_events(stream, fh)
    written = [events_path]
    lines = []
    for i, sample in enumerate(make_dataset(spec, window, stream=stream)):
        written += write_frame(frame_dir, i, sample.frame)
        lines.append(f"{i} {sample.frame.timestamp:.6f}\n")
    frames_path = clip_dir / "frames.txt"
    frames_path.write_text("".join(lines))
    written.append(frames_path)
    return written


def read_clip(clip_dir: str | os.PathLike, window: float) -> list[Sample]:
    clip_dir = Path(clip_dir)
    with open(clip_dir / "events.txt", "rb") as fh:
        stream = parse_events(fh)
    entries = [line.split() for line in (clip_dir / "frames.txt").read_text().splitlines() if line.strip()]
    if not entries:
        return []
    duration = float(entries[-1][1])
    windows = tile_windows(stream, window, duration)
    if len(windows) != len(entries):
        raise ValueError(f"{clip_dir}: {len(entries)} frames but {len(windows)} windows of {window} s")
    samples = []
    for w, (index, stamp) in zip(windows, entries):
        stem = clip_dir / "frames" / f"{int(index):04d}"
        frame = FrameTriple(
            intensity=decode_intensity(read_pgm(f"{stem}_intensity.pgm"))[None],
            labels=read_pgm(f"{stem}_labels.pgm").astype(np.int64),
            depth=read_pgm(f"{stem}_depth.pgm").astype(np.float64) / DEPTH_SCALE,
            timestamp=float(stamp),
        )
        samples.append(Sample(w, frame))
    return samples


def write_dataset(root: str | os.PathLike, config: SimConfig) -> dict[str, list[dict]]:
    """Simulate every clip of both splits under `root`; returns per-split clip records."""
    root = Path(root)
    record: dict[str, list[dict]] = {}
    for split in ("train", "test"):
        record[split] = []
        for i, seed in enumerate(clip_seeds(config.seed, split, config.clip_count(split))):
            clip_dir = root / split / f"clip_{i:03d}"
            files = write_clip(clip_dir, config.scene(seed), config.window)
            record[split].append({"dir": str(clip_dir.relative_to(root)), "scene_seed": seed, "files": len(files)})
    return record


def read_split(root: str | os.PathLike, split: str, window: float) -> list[Sample]:
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FileNotFoundError(f"no {split} split under {root}")
    samples: list[Sample] = []
    for clip_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        samples.extend(read_clip(clip_dir, window))
    return samples


def render_split(config: SimConfig, split: str) -> list[Sample]:
    """In-memory equivalent of a written split (frames not quantized)."""
    samples: list[Sample] = []
    for seed in clip_seeds(config.seed, split, config.clip_count(split)):
        samples.extend(make_dataset(config.scene(seed), config.window))
    return samples

