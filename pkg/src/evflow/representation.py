"""Voxel-grid event representations, batch and streaming.

Two closely related tensor encodings of an event window, both B x H x W:

* Voxel Grid: event timestamps are normalized by the first/last event of the
  window, ``t* = (B-1) * (t - t_1) / (t_N - t_1)``, then accumulated with a
  triangular kernel ``k(a) = max(0, 1 - |a|)`` in t and bilinearly in x, y.
* Unified Voxel Grid (UVG): bin centers sit at ``t_b = t0 + b * tau`` for a
  fixed spacing tau, and every bin integrates events from ``(t_b - tau,
  t_b + tau)`` with the same kernel. Because each bin depends only on a
  2*tau-wide slice of the stream, bins can be emitted online, one at a time,
  as soon as the stream passes ``t_b + tau``.

Accumulation is float64 in event order and cast to float32 once at the end.
Batch and streaming builders share the same per-bin fold so their outputs are
byte-identical.

Grid file "EVGR" (little-endian): magic 'E','V','G','R'; u32 B, H, W;
u8 kind (0 = voxel grid, 1 = UVG); f64 tau_s; f64 t0_s; then B*H*W f32
values, bin-major, row-major within a bin.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, StreamOrderError
from .events import EventWindow, SensorGeometry

EVGR_MAGIC = b"EVGR"
_EVGR_HEADER = struct.Struct("<4sIIIBdd")

KIND_VOXEL_GRID = "voxel_grid"
KIND_UVG = "unified_voxel_grid"
_KIND_CODE = {KIND_VOXEL_GRID: 0, KIND_UVG: 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}

# Coverage slack between integer-us window bounds and float bin timing.
_COVER_SLACK_S = 1e-6


@dataclass(frozen=True)
class BinSpec:
    """Temporal binning layout: B bin centers at t0 + b * tau seconds."""

    B: int
    tau: float
    t0: float
    geometry: SensorGeometry

    def __post_init__(self):
        if self.B < 2:
            raise ValueError(f"need at least 2 bins, got {self.B}")
        if not self.tau > 0:
            raise ValueError(f"bin spacing must be positive, got {self.tau}")

    @property
    def centers(self):
        return self.t0 + np.arange(self.B) * self.tau

    @property
    def duration(self):
        """Time covered between the first and last bin center."""
        return (self.B - 1) * self.tau

    @property
    def t_end(self):
        return self.t0 + (self.B - 1) * self.tau


@dataclass
class BuildReport:
    """Counts of events that could not contribute to a grid."""

    n_events: int = 0
    n_dropped_time: int = 0
    n_dropped_space: int = 0

    def merge(self, other):
        self.n_events += other.n_events
        self.n_dropped_time += other.n_dropped_time
        self.n_dropped_space += other.n_dropped_space


@dataclass
class Grid:
    """A voxelized event tensor (float32, B x H x W) plus its timing spec."""

    data: np.ndarray
    spec: BinSpec
    kind: str
    report: BuildReport | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError("grid data must be B x H x W")
        if self.kind not in _KIND_CODE:
            raise ValueError(f"unknown grid kind {self.kind!r}")

    @property
    def total(self):
        return float(self.data.sum(dtype=np.float64))


def kernel(a):
    """Triangular (bilinear) sampling kernel k(a) = max(0, 1 - |a|)."""
    return np.maximum(0.0, 1.0 - np.abs(a))


def uvg_spec_for_window(window: EventWindow, B, tau=None) -> BinSpec:
    """BinSpec anchored at the window start; tau defaults to duration/(B-1)."""
    t0 = window.t_start * 1e-6
    if tau is None:
        if window.t_end <= window.t_start:
            raise FormatError(
                "cannot derive bin spacing from a zero-duration window; pass tau"
            )
        tau = (window.t_end - window.t_start) * 1e-6 / (B - 1)
    return BinSpec(B=B, tau=float(tau), t0=t0, geometry=window.geometry)


def _fold_bin(tstar, x, y, p, b, width, height):
    """Accumulate one temporal bin's image (float64) from the given events.

    Preconditions: floor(tstar) is b-1 or b for every event (so the kernel
    weight is simply 1 - |tstar - b|) and coordinates lie in
    [0, width-1] x [0, height-1]. The +1 corners can then only leave the
    frame at the exact right/bottom edge where their bilinear weight is 0;
    clamping them is free of mass and lets the fold run without masks.
    Events are folded with a single sequential bincount in input order so
    that any caller presenting the same event subsequence gets a
    bit-identical image.
    """
    wt = 1.0 - np.abs(tstar - b)

    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)

    n = len(tstar)
    flat = np.empty((n, 4), np.int64)
    w4 = np.empty((n, 4), np.float64)
    row0 = y0 * width
    row1 = y1 * width
    flat[:, 0] = row0 + x0
    flat[:, 1] = row0 + x1
    flat[:, 2] = row1 + x0
    flat[:, 3] = row1 + x1
    pw = p * wt
    w4[:, 0] = pw * ((1.0 - fx) * (1.0 - fy))
    w4[:, 1] = pw * (fx * (1.0 - fy))
    w4[:, 2] = pw * ((1.0 - fx) * fy)
    w4[:, 3] = pw * (fx * fy)

    img = np.bincount(flat.ravel(), weights=w4.ravel(), minlength=width * height)
    return img.reshape(height, width)


def _drop_counts(tstar, x, y, B, width, height):
    """Report-style counts: events with no temporal weight / no spatial landing.

    The triangular kernel is positive iff the sample sits strictly within
    distance 1 of some in-range center, i.e. tstar in (-1, B) and likewise
    x in (-1, width), y in (-1, height).
    """
    t_ok = (tstar > -1.0) & (tstar < B)
    s_ok = (x > -1.0) & (x < width) & (y > -1.0) & (y < height)
    n = len(tstar)
    n_dt = int(n - np.count_nonzero(t_ok))
    n_ds = int(np.count_nonzero(t_ok & ~s_ok))
    return BuildReport(n_events=n, n_dropped_time=n_dt, n_dropped_space=n_ds)


def _accumulate_grid(tstar, x, y, p, spec):
    """Per-bin fold over the events whose kernel support touches each bin."""
    W, H = spec.geometry.width, spec.geometry.height
    data = np.empty((spec.B, H, W), np.float32)
    fl = np.floor(tstar)  # non-decreasing because tstar is
    for b in range(spec.B):
        lo = int(np.searchsorted(fl, b - 1, side="left"))
        hi = int(np.searchsorted(fl, b, side="right"))
        data[b] = _fold_bin(tstar[lo:hi], x[lo:hi], y[lo:hi], p[lo:hi], b, W, H)
    return data


def build_voxel_grid(window: EventWindow, B) -> Grid:
    """Voxel Grid of a window: timestamps normalized by first/last event.

    ``t* = (B-1) * (t_i - t_1) / (t_N - t_1)``; a single-event window uses
    t* = 0 by convention; an empty window has no defined normalization.
    """
    if len(window) == 0:
        raise FormatError("voxel grid of an empty window is undefined")
    if B < 2:
        raise ValueError(f"need at least 2 bins, got {B}")
    t_s = window.t_seconds
    t1, tN = t_s[0], t_s[-1]
    if tN > t1:
        # Ratio before scaling keeps the last event exactly at B-1.
        tstar = (B - 1) * ((t_s - t1) / (tN - t1))
        tau = (tN - t1) / (B - 1)
    else:
        tstar = np.zeros(len(window))
        tau = 1e-6  # degenerate window; spacing is nominal only
    spec = BinSpec(B=B, tau=tau, t0=t1, geometry=window.geometry)
    data = _accumulate_grid(tstar, window.x, window.y, window.p.astype(np.float64), spec)
    report = _drop_counts(tstar, window.x, window.y, B, spec.geometry.width, spec.geometry.height)
    return Grid(data=data, spec=spec, kind=KIND_VOXEL_GRID, report=report)


def build_unified_voxel_grid(window: EventWindow, spec: BinSpec) -> Grid:
    """UVG of a window under a fixed bin layout; bins cover (t_b - tau, t_b + tau)."""
    if spec.geometry != window.geometry:
        raise FormatError(
            f"spec geometry {spec.geometry} does not match window {window.geometry}"
        )
    if len(window):
        if spec.t0 > window.t_start * 1e-6 + _COVER_SLACK_S or (
            spec.t_end < window.t_end * 1e-6 - _COVER_SLACK_S
        ):
            raise FormatError(
                f"bin spec [{spec.t0:g}, {spec.t_end:g}]s does not cover window "
                f"[{window.t_start * 1e-6:g}, {window.t_end * 1e-6:g}]s"
            )
    tstar = (window.t_seconds - spec.t0) / spec.tau
    data = _accumulate_grid(tstar, window.x, window.y, window.p.astype(np.float64), spec)
    report = _drop_counts(
        tstar, window.x, window.y, spec.B, spec.geometry.width, spec.geometry.height
    )
    return Grid(data=data, spec=spec, kind=KIND_UVG, report=report)


class StreamingBinner:
    """Online UVG builder: emits finalized bins with per-bin latency.

    Bin b is emitted as soon as an event at or past ``t_b + tau`` arrives
    (or the feed ends); emitted bins are immutable. Events are buffered per
    touched bin and folded once at emission time with the same kernel math
    as :func:`build_unified_voxel_grid`, so the concatenated emissions equal
    the batch build bit-for-bit.
    """

    def __init__(self, spec: BinSpec):
        self.spec = spec
        self.report = BuildReport()
        self._pending = [[] for _ in range(spec.B)]  # chunks of (tstar, x, y, p)
        self._next_emit = 0
        self._last_t = None
        self._finished = False

    @property
    def bins_emitted(self):
        return self._next_emit

    def push(self, t, x, y, p):
        """Feed one event; returns any bins finalized by it."""
        return self.push_chunk(
            np.asarray([t], np.int64),
            np.asarray([x], np.float64),
            np.asarray([y], np.float64),
            np.asarray([p], np.float64),
        )

    def push_chunk(self, t, x, y, p):
        """Feed a non-decreasing run of events; returns finalized (b, image) pairs."""
        if self._finished:
            raise StreamOrderError("stream already finished")
        t = np.asarray(t, np.int64)
        if len(t) == 0:
            return []
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        p = np.asarray(p, np.float64)

        prev = self._last_t if self._last_t is not None else t[0]
        diffs_ok = np.empty(len(t), bool)
        diffs_ok[0] = t[0] >= prev
        np.greater_equal(t[1:], t[:-1], out=diffs_ok[1:])
        if not diffs_ok.all():
            i = int(np.nonzero(~diffs_ok)[0][0])
            bad_ts = float(t[i]) * 1e-6
            fl_bad = int(np.floor((bad_ts - self.spec.t0) / self.spec.tau))
            touched = [
                b for b in (fl_bad, fl_bad + 1) if 0 <= b < self._next_emit
            ]
            raise StreamOrderError(
                f"out-of-order event at t={int(t[i])}us would touch "
                f"already-emitted bins {touched}",
                index=i,
                bins=touched,
            )
        self._last_t = int(t[-1])

        tstar = (t.astype(np.float64) * 1e-6 - self.spec.t0) / self.spec.tau
        fl = np.floor(tstar)
        B = self.spec.B
        self.report.merge(
            _drop_counts(
                tstar, x, y, B, self.spec.geometry.width, self.spec.geometry.height
            )
        )

        # Buffer the chunk slice touching each still-open bin: events with
        # floor(tstar) in {b-1, b}, exactly the batch builder's selection.
        first_bin = max(self._next_emit, int(fl[0]))
        last_bin = min(B - 1, int(fl[-1]) + 1)
        for b in range(first_bin, last_bin + 1):
            lo = int(np.searchsorted(fl, b - 1, side="left"))
            hi = int(np.searchsorted(fl, b, side="right"))
            if hi > lo:
                self._pending[b].append(
                    (tstar[lo:hi], x[lo:hi], y[lo:hi], p[lo:hi])
                )

        # An event with floor(tstar) >= b+1 lies at or past t_b + tau and can
        # no longer touch bin b: finalize everything strictly below.
        return self._emit_through(min(int(fl[-1]) - 1, B - 1))

    def finish(self):
        """End of feed: finalize all remaining bins (empty ones stay zero)."""
        out = self._emit_through(self.spec.B - 1)
        self._finished = True
        return out

    def _emit_through(self, last):
        W, H = self.spec.geometry.width, self.spec.geometry.height
        out = []
        while self._next_emit <= last:
            b = self._next_emit
            chunks = self._pending[b]
            if chunks:
                ts = np.concatenate([c[0] for c in chunks])
                xs = np.concatenate([c[1] for c in chunks])
                ys = np.concatenate([c[2] for c in chunks])
                ps = np.concatenate([c[3] for c in chunks])
                img = _fold_bin(ts, xs, ys, ps, b, W, H).astype(np.float32)
            else:
                img = np.zeros((H, W), np.float32)
            self._pending[b] = None
            out.append((b, img))
            self._next_emit += 1
        return out


def stream_bins(window: EventWindow, spec: BinSpec, chunk=65536):
    """Drive a StreamingBinner over a window; yields (b, image) in emission order."""
    binner = StreamingBinner(spec)
    for lo in range(0, len(window), chunk):
        hi = min(lo + chunk, len(window))
        for em in binner.push_chunk(
            window.t[lo:hi], window.x[lo:hi], window.y[lo:hi],
            window.p[lo:hi].astype(np.float64),
        ):
            yield em
    for em in binner.finish():
        yield em


def grid_from_emissions(emissions, spec: BinSpec, report=None) -> Grid:
    """Assemble streamed (b, image) pairs into a UVG Grid."""
    W, H = spec.geometry.width, spec.geometry.height
    data = np.zeros((spec.B, H, W), np.float32)
    seen = np.zeros(spec.B, bool)
    for b, img in emissions:
        data[b] = img
        seen[b] = True
    if not seen.all():
        missing = np.nonzero(~seen)[0]
        raise FormatError(f"missing emissions for bins {missing.tolist()}")
    return Grid(data=data, spec=spec, kind=KIND_UVG, report=report)


def write_grid(grid: Grid, path):
    """Write a grid as an EVGR file."""
    B, H, W = grid.data.shape
    header = _EVGR_HEADER.pack(
        EVGR_MAGIC, B, H, W, _KIND_CODE[grid.kind], grid.spec.tau, grid.spec.t0
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(grid.data, dtype="<f4").tobytes())


def read_grid(path) -> Grid:
    """Read an EVGR file back into a Grid (no build report)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _EVGR_HEADER.size:
        raise FormatError(f"{path}: truncated EVGR header")
    magic, B, H, W, code, tau, t0 = _EVGR_HEADER.unpack_from(raw, 0)
    if magic != EVGR_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if code not in _KIND_NAME:
        raise FormatError(f"{path}: unknown grid kind code {code}")
    body = raw[_EVGR_HEADER.size:]
    if len(body) != B * H * W * 4:
        raise FormatError(f"{path}: expected {B * H * W} f32 values")
    data = np.frombuffer(body, dtype="<f4").reshape(B, H, W).copy()
    spec = BinSpec(B=B, tau=tau, t0=t0, geometry=SensorGeometry(W, H))
    return Grid(data=data, spec=spec, kind=_KIND_NAME[code])
