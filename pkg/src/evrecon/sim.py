"""Synthetic 2D multi-object scenes with exact flow and threshold events.

Objects are procedurally textured sprites following affine trajectories
(constant velocity, angular rate and log-scale rate). A textured background
translates to imitate 2D camera motion. Frames are rendered at an
oversampled rate and converted to events with a per-pixel log-intensity
integrator.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import eventio
from .errors import ContractError
from .eventio import EventArray
from .formats import read_flo2, read_pgm, write_flo2, write_pgm

LOG_EPS = 1e-3
MAX_OBJECTS = 30
THRESHOLD_RANGE = (0.1, 1.5)


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    duration: float = 2.0
    frame_rate: float = 25.0
    n_objects: int = 6
    contrast_threshold: float | None = None  # None: drawn from THRESHOLD_RANGE
    seed: int = 0
    oversample: int = 8
    threshold_jitter: bool = False
    max_speed: float = 0.35  # object speed bound, image widths per second
    max_spin: float = 0.8  # rad/s
    max_zoom: float = 0.15  # log-scale rate bound, 1/s
    background_speed: float = 0.1  # image widths per second
    smooth: bool = False  # only smooth textures (no checkerboards)

    def __post_init__(self):
        if not 0 <= self.n_objects <= MAX_OBJECTS:
            raise ContractError(f"n_objects must be in [0, {MAX_OBJECTS}], got {self.n_objects}")
        if self.contrast_threshold is not None and not (
            THRESHOLD_RANGE[0] <= self.contrast_threshold <= THRESHOLD_RANGE[1]
        ):
            raise ContractError(f"contrast threshold {self.contrast_threshold} outside {THRESHOLD_RANGE}")
        if self.oversample < 8:
            raise ContractError("temporal oversampling must be at least 8x the frame rate")
        if self.width < 1 or self.height < 1 or self.duration <= 0 or self.frame_rate <= 0:
            raise ContractError("width, height, duration and frame_rate must be positive")


@dataclass
class GroundTruthBundle:
    frames: np.ndarray  # (K, H, W) in [0, 1]
    times: np.ndarray  # (K,) seconds
    flows: np.ndarray  # (K-1, 2, H, W); flows[k-1] maps frame k to frame k-1
    events: EventArray
    contrast_threshold: float
    spec: SceneSpec = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# textures, evaluated in object-local pixel coordinates


def _texture(rng, smooth):
    kinds = ["gradient", "blobs"] if smooth else ["checker", "gradient", "blobs"]
    kind = kinds[rng.integers(len(kinds))]
    lo, hi = sorted(rng.uniform(0.1, 0.9, size=2))
    if hi - lo < 0.25:
        hi = min(0.9, lo + 0.25)
        lo = hi - 0.25
    if kind == "checker":
        period = rng.uniform(5.0, 12.0)

        def tex(u, v):
            s = np.sin(np.pi * u / period) * np.sin(np.pi * v / period)
            return lo + (hi - lo) * (0.5 + 0.5 * np.tanh(4.0 * s))

    elif kind == "gradient":
        ang = rng.uniform(0, 2 * np.pi)
        scale = rng.uniform(10.0, 25.0)

        def tex(u, v):
            s = (np.cos(ang) * u + np.sin(ang) * v) / scale
            return lo + (hi - lo) * (0.5 + 0.5 * np.tanh(s))

    else:
        n = rng.integers(2, 5)
        centers = rng.uniform(-10, 10, size=(n, 2))
        widths = rng.uniform(3.0, 8.0, size=n)
        signs = rng.choice([-1.0, 1.0], size=n)

        def tex(u, v):
            acc = np.zeros(np.broadcast(u, v).shape)
            for (cx, cy), wd, sg in zip(centers, widths, signs):
                acc += sg * np.exp(-((u - cx) ** 2 + (v - cy) ** 2) / (2 * wd * wd))
            return lo + (hi - lo) * (0.5 + 0.5 * np.tanh(acc))

    return tex


@dataclass
class _Sprite:
    c0: np.ndarray
    vel: np.ndarray
    theta0: float
    omega: float
    s0: float
    zoom: float
    shape: str
    radius: float
    aspect: float
    tex: object
    is_background: bool = False

    def pose(self, t):
        c = self.c0 + self.vel * t
        th = self.theta0 + self.omega * t
        s = self.s0 * np.exp(self.zoom * t)
        return c, th, s

    def to_local(self, t, qx, qy):
        c, th, s = self.pose(t)
        dx, dy = qx - c[0], qy - c[1]
        ct, st = np.cos(th), np.sin(th)
        return (ct * dx + st * dy) / s, (-st * dx + ct * dy) / s

    def to_world(self, t, u, v):
        c, th, s = self.pose(t)
        ct, st = np.cos(th), np.sin(th)
        return c[0] + s * (ct * u - st * v), c[1] + s * (st * u + ct * v)

    def alpha(self, u, v):
        """Coverage in [0, 1] with a one-pixel soft edge."""
        if self.is_background:
            return np.ones(np.broadcast(u, v).shape)
        if self.shape == "rect":
            d = np.maximum(np.abs(u) - self.radius, np.abs(v) - self.radius * self.aspect)
        else:
            d = np.sqrt(u * u + (v / self.aspect) ** 2) - self.radius
        return np.clip(0.5 - d, 0.0, 1.0)


def _make_sprites(spec, rng):
    w, h = spec.width, spec.height
    size = min(w, h)
    bg_speed = spec.background_speed * size
    sprites = [
        _Sprite(
            c0=np.array([w / 2.0, h / 2.0]),
            vel=rng.uniform(-bg_speed, bg_speed, size=2),
            theta0=0.0,
            omega=0.0,
            s0=1.0,
            zoom=0.0,
            shape="plane",
            radius=np.inf,
            aspect=1.0,
            tex=_texture(rng, True),
            is_background=True,
        )
    ]
    vmax = spec.max_speed * size
    for _ in range(spec.n_objects):
        sprites.append(
            _Sprite(
                c0=rng.uniform([0.1 * w, 0.1 * h], [0.9 * w, 0.9 * h]),
                vel=rng.uniform(-vmax, vmax, size=2),
                theta0=rng.uniform(0, 2 * np.pi),
                omega=rng.uniform(-spec.max_spin, spec.max_spin),
                s0=rng.uniform(0.8, 1.2),
                zoom=rng.uniform(-spec.max_zoom, spec.max_zoom),
                shape=("disc", "rect")[rng.integers(2)],
                radius=rng.uniform(0.08, 0.2) * size,
                aspect=rng.uniform(0.6, 1.0),
                tex=_texture(rng, spec.smooth),
            )
        )
    return sprites


def _render_at(sprites, t, qx, qy):
    """Painter's-order composite; also returns the top-most owner per pixel."""
    img = np.zeros(qx.shape)
    owner = np.zeros(qx.shape, dtype=np.int64)
    for i, sp in enumerate(sprites):
        u, v = sp.to_local(t, qx, qy)
        a = sp.alpha(u, v)
        img = a * sp.tex(u, v) + (1 - a) * img
        owner = np.where(a >= 0.5, i, owner)
    return img, owner


def _backward_flow(sprites, owner, t_now, t_prev, qx, qy):
    u_out = np.zeros(qx.shape)
    v_out = np.zeros(qx.shape)
    for i, sp in enumerate(sprites):
        m = owner == i
        if not m.any():
            continue
        lu, lv = sp.to_local(t_now, qx[m], qy[m])
        px, py = sp.to_world(t_prev, lu, lv)
        u_out[m] = px - qx[m]
        v_out[m] = py - qy[m]
    return np.stack([u_out, v_out])


def emit_events(frames_hi, times_hi, threshold, rng=None, jitter=False, eps=LOG_EPS):
    """Contrast-threshold events from an oversampled intensity sequence.

    Each pixel keeps a reference log intensity. When the current log
    intensity departs from it by at least ``threshold``, one event per
    whole threshold crossed is emitted, timestamped by linear interpolation
    inside the sampling interval, and the reference moves by ``±threshold``
    per event.
    """
    frames_hi = np.asarray(frames_hi, dtype=np.float64)
    times_hi = np.asarray(times_hi, dtype=np.float64)
    _, h, w = frames_hi.shape
    cthr = np.full((h, w), float(threshold))
    if jitter:
        rng = rng if rng is not None else np.random.default_rng(0)
        cthr = np.maximum(cthr + rng.normal(0.0, 0.03 * threshold, size=(h, w)), 0.01 * threshold)
    logs = np.log(frames_hi + eps)
    ref = logs[0].copy()
    ys, xs = np.mgrid[0:h, 0:w]
    chunks = []
    for j in range(1, len(frames_hi)):
        prev, cur = logs[j - 1], logs[j]
        delta = cur - ref
        # tolerance so a change of exactly k thresholds yields k events
        count = np.floor(np.abs(delta) / cthr + 1e-9).astype(np.int64)
        hit = count > 0
        if not hit.any():
            continue
        sign = np.sign(delta[hit])
        n = count[hit]
        idx = np.repeat(np.arange(n.size), n)
        k = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n) + 1
        level = ref[hit][idx] + sign[idx] * k * cthr[hit][idx]
        span = (cur - prev)[hit][idx]
        safe = np.where(np.abs(span) > 1e-12, span, 1.0)
        frac = np.where(np.abs(span) > 1e-12, (level - prev[hit][idx]) / safe, 1.0)
        t = times_hi[j - 1] + np.clip(frac, 0.0, 1.0) * (times_hi[j] - times_hi[j - 1])
        chunks.append((t, xs[hit][idx], ys[hit][idx], sign[idx].astype(np.int64)))
        ref[hit] += sign * n * cthr[hit]
    if not chunks:
        return EventArray.empty()
    t, x, y, p = (np.concatenate(c) for c in zip(*chunks))
    order = np.argsort(t, kind="stable")
    return EventArray(t[order], x[order], y[order], p[order])


def frame_times(spec):
    n = int(round(spec.duration * spec.frame_rate)) + 1
    return np.arange(n) / spec.frame_rate


def render(spec):
    """Render frames, backward flows and events for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    threshold = spec.contrast_threshold
    if threshold is None:
        threshold = float(rng.uniform(*THRESHOLD_RANGE))
    sprites = _make_sprites(spec, rng)
    qy, qx = np.mgrid[0 : spec.height, 0 : spec.width].astype(np.float64)

    times = frame_times(spec)
    n_hi = (len(times) - 1) * spec.oversample + 1
    times_hi = np.linspace(0.0, times[-1], n_hi) if len(times) > 1 else times.copy()
    frames_hi = np.empty((n_hi, spec.height, spec.width))
    owners = {}
    for j, t in enumerate(times_hi):
        frames_hi[j], owner = _render_at(sprites, t, qx, qy)
        if j % spec.oversample == 0:
            owners[j // spec.oversample] = owner
    frames = frames_hi[:: spec.oversample].copy()
    flows = np.stack(
        [_backward_flow(sprites, owners[k], times[k], times[k - 1], qx, qy) for k in range(1, len(times))]
    ) if len(times) > 1 else np.zeros((0, 2, spec.height, spec.width))
    events = emit_events(frames_hi, times_hi, threshold, rng=rng, jitter=spec.threshold_jitter)
    return GroundTruthBundle(frames, times, flows, events, threshold, spec)


def write_dataset(out_dir, bundle):
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "flows").mkdir(parents=True, exist_ok=True)
    eventio.write_events(out / "events.txt", bundle.events)
    eventio.write_timestamps(out / "timestamps.txt", bundle.times)
    for k, frame in enumerate(bundle.frames):
        write_pgm(out / "frames" / f"{k:05d}.pgm", frame)
    for k, flow in enumerate(bundle.flows, start=1):
        write_flo2(out / "flows" / f"{k:05d}.flo2", flow)
    return out


@dataclass
class Sequence:
    """A dataset directory loaded for training or evaluation."""

    voxels: np.ndarray  # (K, B, H, W)
    frames: np.ndarray  # (K, H, W)
    flows: np.ndarray  # (K, 2, H, W); flows[0] is zero (no previous frame)
    times: np.ndarray


def load_sequence(data_dir, bins=eventio.DEFAULT_BINS):
    d = Path(data_dir)
    times = eventio.read_timestamps(d / "timestamps.txt")
    frames = np.stack([read_pgm(d / "frames" / f"{k:05d}.pgm") for k in range(len(times))])
    h, w = frames.shape[1:]
    flows = np.zeros((len(times), 2, h, w))
    for k in range(1, len(times)):
        p = d / "flows" / f"{k:05d}.flo2"
        if p.exists():
            flows[k] = read_flo2(p)
    events = eventio.parse_events(d / "events.txt").validate(w, h)
    voxels = eventio.voxelize_stream(events, times, w, h, bins)
    return Sequence(voxels, frames, flows, times)


def spec_dict(spec):
    return asdict(spec)
