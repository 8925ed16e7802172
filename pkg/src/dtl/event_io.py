"""Event streams: validation, text serialization and time windowing.

File format (UTF-8, ``\\n`` terminated lines)::

    W H
    t x y p
    ...

``t`` is seconds written with six fractional digits, ``p`` is ``1`` or ``-1``.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import BinaryIO, Iterable, TextIO

import numpy as np

DEFAULT_WINDOW = 0.05


class EventFormatError(ValueError):
    """Base class for rejected event data."""


class MalformedLine(EventFormatError):
    pass


class OutOfBounds(EventFormatError):
    pass


class BadPolarity(EventFormatError):
    pass


class UnsortedStream(EventFormatError):
    pass


@dataclass(frozen=True)
class Event:
    t: float
    x: int
    y: int
    p: int


class EventStream:
    """Time-sorted events from a sensor of known geometry.

    Stored column-wise (``t``, ``x``, ``y``, ``p`` arrays); arrays are made
    read-only so a stream can be shared safely.
    """

    def __init__(self, width: int, height: int, t=(), x=(), y=(), p=(), *, validate: bool = True):
        self.width = int(width)
        self.height = int(height)
        self.t = np.asarray(t, dtype=np.float64).reshape(-1)
        self.x = np.asarray(x, dtype=np.int64).reshape(-1)
        self.y = np.asarray(y, dtype=np.int64).reshape(-1)
        self.p = np.asarray(p, dtype=np.int64).reshape(-1)
        if not (len(self.t) == len(self.x) == len(self.y) == len(self.p)):
            raise ValueError("t, x, y, p must have equal length")
        if validate:
            _validate(self.width, self.height, self.t, self.x, self.y, self.p)
        for a in (self.t, self.x, self.y, self.p):
            a.flags.writeable = False

    @classmethod
    def from_events(cls, width: int, height: int, events: Iterable[Event]) -> "EventStream":
        events = list(events)
        return cls(
            width,
            height,
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
        )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Event:
        return Event(float(self.t[i]), int(self.x[i]), int(self.y[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def __repr__(self) -> str:
        return f"EventStream({self.width}x{self.height}, {len(self)} events)"


@dataclass(frozen=True, eq=False)
class EventWindow:
    """Events of a stream with ``t_start <= t < t_start + duration``."""

    t_start: float
    duration: float
    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @property
    def t_end(self) -> float:
        return self.t_start + self.duration


def _validate(width, height, t, x, y, p, first_line: int | None = None) -> None:
    def where(i):
        return f" (line {first_line + i})" if first_line is not None else f" (event {i})"

    if width <= 0 or height <= 0:
        raise OutOfBounds(f"sensor geometry must be positive, got {width}x{height}")
    if len(t) == 0:
        return
    if not np.all(np.isfinite(t)) or np.any(t < 0):
        i = int(np.flatnonzero(~np.isfinite(t) | (t < 0))[0])
        raise MalformedLine(f"timestamp must be a finite non-negative number{where(i)}")
    bad = (x < 0) | (x >= width) | (y < 0) | (y >= height)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise OutOfBounds(f"pixel ({x[i]}, {y[i]}) outside {width}x{height} sensor{where(i)}")
    bad = (p != 1) & (p != -1)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise BadPolarity(f"polarity must be 1 or -1, got {p[i]}{where(i)}")
    dec = np.diff(t) < 0
    if dec.any():
        i = int(np.flatnonzero(dec)[0]) + 1
        raise UnsortedStream(f"timestamp {t[i]} precedes {t[i - 1]}{where(i)}")


def _as_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8")
    if isinstance(source, str):
        return source
    data = source.read()
    return data.decode("utf-8") if isinstance(data, bytes) else data


def parse_events(source, sensor_width: int | None = None, sensor_height: int | None = None) -> EventStream:
    """Parse the text event format from bytes, str or a file object.

    If a geometry is given it must agree with the header line.
    """
    lines = _as_text(source).split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MalformedLine("missing 'W H' header line")
    header = lines[0].split(" ")
    try:
        if len(header) != 2:
            raise ValueError
        width, height = int(header[0]), int(header[1])
    except ValueError:
        raise MalformedLine(f"header must be 'W H', got {lines[0]!r} (line 1)") from None
    if sensor_width is not None and sensor_height is not None and (width, height) != (sensor_width, sensor_height):
        raise OutOfBounds(f"file geometry {width}x{height} does not match sensor {sensor_width}x{sensor_height}")

    n = len(lines) - 1
    t = np.empty(n)
    x = np.empty(n, dtype=np.int64)
    y = np.empty(n, dtype=np.int64)
    p = np.empty(n, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        tok = line.split(" ")
        if len(tok) != 4:
            raise MalformedLine(f"expected 4 fields, got {len(tok)}: {line!r} (line {i + 2})")
        try:
            t[i] = float(tok[0])
            x[i], y[i], p[i] = int(tok[1]), int(tok[2]), int(tok[3])
        except ValueError:
            raise MalformedLine(f"non-numeric field in {line!r} (line {i + 2})") from None
    _validate(width, height, t, x, y, p, first_line=2)
    return EventStream(width, height, t, x, y, p, validate=False)


def format_events(stream: EventStream) -> str:
    out = io.StringIO()
    out.write(f"{stream.width} {stream.height}\n")
    for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
        out.write(f"{t:.6f} {x} {y} {p}\n")
    return out.getvalue()


def write_events(stream: EventStream, sink: BinaryIO | TextIO) -> None:
    text = format_events(stream)
    try:
        sink.write(text.encode("utf-8"))
    except TypeError:
        sink.write(text)


def quantize_timestamps(t: np.ndarray) -> np.ndarray:
    """Round to the microsecond grid the text format can represent exactly."""
    return np.round(np.asarray(t, dtype=np.float64) * 1e6) / 1e6


def window_events(stream: EventStream, t_start: float, duration: float = DEFAULT_WINDOW) -> EventWindow:
    if not duration > 0:
        raise ValueError(f"window duration must be positive, got {duration}")
    lo = np.searchsorted(stream.t, t_start, side="left")
    hi = np.searchsorted(stream.t, t_start + duration, side="left")
    return EventWindow(
        t_start=float(t_start),
        duration=float(duration),
        width=stream.width,
        height=stream.height,
        t=stream.t[lo:hi],
        x=stream.x[lo:hi],
        y=stream.y[lo:hi],
        p=stream.p[lo:hi],
    )


def tile_windows(stream: EventStream, duration: float, t_end: float) -> list[EventWindow]:
    """Consecutive windows covering [0, t_end); every event lands in exactly one.

    Boundaries are ``i * duration`` and each window's duration is the exact
    float difference of neighbouring boundaries, so ``t_start + duration`` of
    one window equals the next window's ``t_start`` bit for bit.
    """
    count = int(round(t_end / duration))
    bounds = [i * duration for i in range(count + 1)]
    return [window_events(stream, bounds[i], bounds[i + 1] - bounds[i]) for i in range(count)]
