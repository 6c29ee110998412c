"""Event stream ingestion, grouping between frames and voxel-grid encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ContractError, OrderingError, ParseError

EVENT_DTYPE = np.dtype([("t", "<f8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])
DEFAULT_BINS = 5


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: float
    p: int


@dataclass
class EventArray:
    """Columnar event storage; the canonical in-memory stream."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ContractError("EventArray: columns have different lengths")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return Event(int(self.x[idx]), int(self.y[idx]), float(self.t[idx]), int(self.p[idx]))
        return EventArray(self.t[idx], self.x[idx], self.y[idx], self.p[idx])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_events(cls, events):
        events = list(events)
        return cls(
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
        )

    def validate(self, width=None, height=None):
        if len(self) == 0:
            return self
        if np.any(np.diff(self.t) < 0):
            raise OrderingError("timestamps must be non-decreasing")
        if not np.all(np.isin(self.p, (-1, 1))):
            raise ContractError("polarities must be +1 or -1")
        if self.t[0] < 0:
            raise ContractError("timestamps must be non-negative")
        if width is not None and (self.x.min() < 0 or self.x.max() >= width):
            raise ContractError(f"x outside [0, {width})")
        if height is not None and (self.y.min() < 0 or self.y.max() >= height):
            raise ContractError(f"y outside [0, {height})")
        return self


@dataclass
class EventGroup:
    events: EventArray
    t_start: float
    t_end: float

    def __post_init__(self):
        ev = self.events
        if len(ev) and (ev.t.min() < self.t_start or ev.t.max() >= self.t_end):
            raise ContractError(f"events outside [{self.t_start}, {self.t_end})")


@dataclass
class VoxelGrid:
    data: np.ndarray  # (bins, H, W)
    bins: int = field(init=False)

    def __post_init__(self):
        self.bins = self.data.shape[0]


def _map_polarity(p, convention, line):
    if convention == "signed":
        if p in (1, -1):
            return p
        if p == 0:
            raise ParseError("polarity 0 under the signed convention (use zero_one)", line)
    elif convention == "zero_one":
        if p in (0, 1):
            return 2 * p - 1
    else:
        raise ValueError(f"unknown polarity convention {convention!r}")
    raise ParseError(f"invalid polarity {p}", line)


def iter_events(path, polarity_convention="signed"):
    """Stream events from an ASCII ``t x y p`` file in file order.

    Blank lines and ``#`` comments are skipped.
    """
    last_t = -np.inf
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields 't x y p', got {len(parts)}", lineno)
            try:
                t = float(parts[0])
                x, y, p = int(parts[1]), int(parts[2]), int(parts[3])
            except ValueError:
                raise ParseError(f"cannot parse {line!r}", lineno) from None
            if not np.isfinite(t) or t < 0 or x < 0 or y < 0:
                raise ParseError(f"invalid values in {line!r}", lineno)
            if t < last_t:
                raise OrderingError(f"timestamp {t} decreases (previous {last_t})", lineno)
            last_t = t
            yield Event(x=x, y=y, t=t, p=_map_polarity(p, polarity_convention, lineno))


def parse_events(path, polarity_convention="signed"):
    """Read a whole ASCII event file into an :class:`EventArray`."""
    return EventArray.from_events(iter_events(path, polarity_convention))


def read_events_bin(path, polarity_convention="signed"):
    """Read packed little-endian records ``[f64 t][u16 x][u16 y][i8 p]``."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % EVENT_DTYPE.itemsize:
        raise ParseError(f"file size {raw.size} is not a multiple of the {EVENT_DTYPE.itemsize}-byte record")
    rec = raw.view(EVENT_DTYPE)
    p = rec["p"].astype(np.int64)
    if polarity_convention == "zero_one":
        if not np.all(np.isin(p, (0, 1))):
            raise ParseError("polarity outside {0, 1}")
        p = 2 * p - 1
    elif not np.all(np.isin(p, (-1, 1))):
        raise ParseError("polarity outside {-1, +1}")
    ev = EventArray(rec["t"], rec["x"], rec["y"], p)
    bad = np.flatnonzero(np.diff(ev.t) < 0)
    if bad.size:
        raise OrderingError("timestamps decrease", int(bad[0]) + 2)
    return ev


def write_events(path, events):
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# t x y p\n")
        for t, x, y, p in zip(events.t, events.x, events.y, events.p):
            fh.write(f"{t:.9f} {x} {y} {p}\n")


def write_events_bin(path, events):
    rec = np.empty(len(events), dtype=EVENT_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = events.t, events.x, events.y, events.p
    rec.tofile(path)


def read_timestamps(path):
    values = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(float(line.split()[0]))
            except ValueError:
                raise ParseError(f"cannot parse timestamp {line!r}", lineno) from None
            if len(values) > 1 and values[-1] <= values[-2]:
                raise OrderingError("frame timestamps must be strictly increasing", lineno)
    return np.asarray(values, dtype=np.float64)


def write_timestamps(path, times):
    with open(path, "w", encoding="ascii") as fh:
        for t in times:
            fh.write(f"{t:.9f}\n")


def group_between_frames(events, frame_times):
    """Split events into half-open windows ``[s_{k-1}, s_k)`` with ``s_0 = 0``.

    Events at or after the last frame time are discarded.
    """
    frame_times = np.asarray(frame_times, dtype=np.float64)
    if frame_times.size and np.any(np.diff(frame_times) <= 0):
        raise ContractError("frame_times must be strictly increasing")
    if not isinstance(events, EventArray):
        events = EventArray.from_events(events)
    bounds = np.concatenate([[0.0], frame_times])
    # side="left": an event exactly at s_k lands in the next group
    cuts = np.searchsorted(events.t, bounds, side="left")
    return [
        EventGroup(events[cuts[k] : cuts[k + 1]], float(bounds[k]), float(bounds[k + 1]))
        for k in range(len(frame_times))
    ]


def normalized_timestamps(t, t_start, t_end, bins):
    """Map timestamps to ``[0, bins-1]``; a lone event maps to 0."""
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        return t
    if t.size == 1:
        return np.zeros(1)
    dt = t_end - t_start
    if dt <= 0:
        raise ContractError(f"group duration must be positive, got {dt}")
    tn = (bins - 1) * (t - t_start) / dt
    # roundoff at the interval edges
    return np.clip(tn, 0.0, bins - 1)


def voxelize(group, bins=DEFAULT_BINS, width=None, height=None):
    """Encode a group as a ``(bins, H, W)`` float32 voxel grid.

    Every event adds ``p * max(0, 1 - |b - t*|)`` to temporal bin ``b`` of
    its pixel. No count normalization is applied.
    """
    if bins < 2:
        raise ContractError(f"bins must be >= 2, got {bins}")
    if width is None or height is None:
        raise ContractError("voxelize needs width and height")
    ev = group.events
    if len(ev) == 0:
        return VoxelGrid(np.zeros((bins, height, width), dtype=np.float32))
    if ev.t.min() < group.t_start or ev.t.max() >= group.t_end:
        raise ContractError(f"event outside [{group.t_start}, {group.t_end})")
    if ev.x.min() < 0 or ev.x.max() >= width or ev.y.min() < 0 or ev.y.max() >= height:
        raise ContractError(f"event coordinates outside {width}x{height}")
    tn = normalized_timestamps(ev.t, group.t_start, group.t_end, bins)
    grid = kernels.active.voxel_accumulate(ev.x, ev.y, tn, ev.p.astype(np.float64), bins, height, width)
    return VoxelGrid(grid.astype(np.float32))


def voxelize_stream(events, frame_times, width, height, bins=DEFAULT_BINS):
    """Voxel grids for every frame interval, stacked as ``(K, bins, H, W)``."""
    groups = group_between_frames(events, frame_times)
    if not groups:
        return np.zeros((0, bins, height, width), dtype=np.float32)
    return np.stack([voxelize(g, bins, width, height).data for g in groups])
