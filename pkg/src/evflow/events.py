"""Event data model, file I/O, and time-window slicing.

Events carry integer microsecond timestamps, pixel coordinates (fractional
allowed for undistorted streams), and signed polarity. Raw files store
polarity as {0,1}; everything in memory uses {-1,+1} so accumulation kernels
can multiply by it directly.

Binary format "EVT1" (little-endian):
  magic 'E','V','T','1' | u32 version=1 | u32 width | u32 height | u64 count
  then count records of {u64 t_us, u16 x_q8, u16 y_q8, u8 p in {0,1}, u8 pad=0}
where x_q8 = round(x * 256) (Q8.8 fixed point), 14 bytes per record.

Text format: header line '# evt1 W H', then lines 't_us,x,y,p'.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, StreamOrderError

US_PER_S = 1_000_000

EVT1_MAGIC = b"EVT1"
EVT1_VERSION = 1
_EVT1_HEADER = struct.Struct("<4sIIIQ")
_EVT1_RECORD = np.dtype(
    [("t", "<u8"), ("xq", "<u2"), ("yq", "<u2"), ("p", "u1"), ("pad", "u1")]
)
_Q8 = 256.0


@dataclass(frozen=True)
class SensorGeometry:
    """Sensor resolution in pixels."""

    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid geometry {self.width}x{self.height}")


@dataclass(frozen=True)
class Event:
    """A single sensor event: time (us), pixel position, polarity in {-1,+1}."""

    t: int
    x: float
    y: float
    p: int


class EventWindow:
    """An ordered, immutable batch of events covering [t_start, t_end] us.

    Backed by parallel numpy arrays for throughput; ``window[i]`` yields an
    :class:`Event` view of one record. Events are sorted by t (stable, ties
    keep ingestion order) and every event satisfies t_start <= t <= t_end.
    """

    __slots__ = ("t", "x", "y", "p", "t_start", "t_end", "geometry")

    def __init__(self, t, x, y, p, t_start, t_end, geometry, validate=True):
        t = np.ascontiguousarray(t, dtype=np.int64)
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.float64)
        p = np.ascontiguousarray(p, dtype=np.int8)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ValueError("event field arrays must have equal length")
        if validate and len(t):
            regress = np.nonzero(np.diff(t) < 0)[0]
            if regress.size:
                i = int(regress[0]) + 1
                raise StreamOrderError(
                    f"timestamp regression at index {i}: "
                    f"t[{i}]={int(t[i])} after t[{i - 1}]={int(t[i - 1])}",
                    index=i,
                )
            if not np.all(np.isin(p, (-1, 1))):
                bad = int(np.nonzero(~np.isin(p, (-1, 1)))[0][0])
                raise FormatError(f"polarity not in {{-1,+1}} at index {bad}")
            oob = (x < 0) | (x > geometry.width - 1) | (y < 0) | (y > geometry.height - 1)
            if np.any(oob):
                bad = int(np.nonzero(oob)[0][0])
                raise FormatError(
                    f"coordinate out of bounds at index {bad}: "
                    f"({x[bad]:g},{y[bad]:g}) for {geometry.width}x{geometry.height}"
                )
            if t[0] < t_start or t[-1] > t_end:
                raise ValueError("events outside [t_start, t_end]")
        for arr in (t, x, y, p):
            arr.setflags(write=False)
        self.t = t
        self.x = x
        self.y = y
        self.p = p
        self.t_start = int(t_start)
        self.t_end = int(t_end)
        self.geometry = geometry

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> Event:
        return Event(int(self.t[i]), float(self.x[i]), float(self.y[i]), int(self.p[i]))

    @property
    def t_seconds(self):
        """Timestamps converted to float64 seconds (the kernel-math boundary)."""
        return self.t.astype(np.float64) * 1e-6

    @property
    def duration_s(self):
        return (self.t_end - self.t_start) * 1e-6

    def __repr__(self):
        return (
            f"EventWindow(n={len(self)}, t=[{self.t_start},{self.t_end}]us, "
            f"{self.geometry.width}x{self.geometry.height})"
        )


def _empty_window(geometry, t_start=0, t_end=0):
    z = np.zeros(0)
    return EventWindow(z, z, z, z, t_start, t_end, geometry, validate=False)


def load_events(path, format="binary") -> EventWindow:
    """Load a full event stream from an EVT1 binary or text file.

    Polarity is mapped from raw {0,1} to {-1,+1}. Timestamps must be
    non-decreasing; the first regression is reported by record index.
    """
    if format == "binary":
        return _load_binary(path)
    if format == "text":
        return _load_text(path)
    raise ValueError(f"unknown event format {format!r}")


def _load_binary(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _EVT1_HEADER.size:
        raise FormatError(f"{path}: truncated EVT1 header")
    magic, version, width, height, count = _EVT1_HEADER.unpack_from(raw, 0)
    if magic != EVT1_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != EVT1_VERSION:
        raise FormatError(f"{path}: unsupported EVT1 version {version}")
    body = raw[_EVT1_HEADER.size:]
    if len(body) != count * _EVT1_RECORD.itemsize:
        raise FormatError(
            f"{path}: expected {count} records "
            f"({count * _EVT1_RECORD.itemsize} bytes), got {len(body)} bytes"
        )
    geometry = SensorGeometry(width, height)
    rec = np.frombuffer(body, dtype=_EVT1_RECORD)
    if count == 0:
        return _empty_window(geometry)
    if np.any(~np.isin(rec["p"], (0, 1))):
        bad = int(np.nonzero(~np.isin(rec["p"], (0, 1)))[0][0])
        raise FormatError(f"{path}: raw polarity not in {{0,1}} at record {bad}")
    t = rec["t"].astype(np.int64)
    x = rec["xq"].astype(np.float64) / _Q8
    y = rec["yq"].astype(np.float64) / _Q8
    p = rec["p"].astype(np.int8) * 2 - 1
    return EventWindow(t, x, y, p, int(t[0]), int(t[-1]), geometry)


def _load_text(path):
    with open(path, "r") as f:
        header = f.readline()
        parts = header.split()
        if len(parts) != 4 or parts[0] != "#" or parts[1] != "evt1":
            raise FormatError(f"{path}: bad text header {header!r}")
        try:
            geometry = SensorGeometry(int(parts[2]), int(parts[3]))
        except ValueError as e:
            raise FormatError(f"{path}: bad text header {header!r}") from e
        t, x, y, p = [], [], [], []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if len(fields) != 4:
                raise FormatError(f"{path}:{lineno}: expected 't_us,x,y,p'")
            try:
                t.append(int(fields[0]))
                x.append(float(fields[1]))
                y.append(float(fields[2]))
                praw = int(fields[3])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: unparseable record") from e
            if praw not in (0, 1):
                raise FormatError(f"{path}:{lineno}: raw polarity must be 0 or 1")
            p.append(praw * 2 - 1)
    if not t:
        return _empty_window(geometry)
    return EventWindow(t, x, y, p, t[0], t[-1], geometry)


def write_events(window: EventWindow, path, format="binary"):
    """Write a window back to disk; the binary form round-trips byte-for-byte."""
    if format == "binary":
        xq = np.round(window.x * _Q8)
        yq = np.round(window.y * _Q8)
        if len(window) and (xq.max() > 0xFFFF or yq.max() > 0xFFFF):
            raise FormatError(
                "EVT1 stores coordinates as Q8.8 u16; values must be < 256 px"
            )
        rec = np.zeros(len(window), dtype=_EVT1_RECORD)
        rec["t"] = window.t.astype(np.uint64)
        rec["xq"] = xq.astype(np.uint16)
        rec["yq"] = yq.astype(np.uint16)
        rec["p"] = ((window.p.astype(np.int16) + 1) // 2).astype(np.uint8)
        header = _EVT1_HEADER.pack(
            EVT1_MAGIC,
            EVT1_VERSION,
            window.geometry.width,
            window.geometry.height,
            len(window),
        )
        with open(path, "wb") as f:
            f.write(header)
            f.write(rec.tobytes())
    elif format == "text":
        with open(path, "w") as f:
            f.write(f"# evt1 {window.geometry.width} {window.geometry.height}\n")
            for i in range(len(window)):
                praw = (int(window.p[i]) + 1) // 2
                f.write(
                    f"{int(window.t[i])},{window.x[i]:.17g},{window.y[i]:.17g},{praw}\n"
                )
    else:
        raise ValueError(f"unknown event format {format!r}")


def slice_window(window: EventWindow, t0, t1, half_open=False) -> EventWindow:
    """Events with t0 <= t <= t1 (closed) or t0 <= t < t1 (``half_open``).

    Order is preserved; the result claims exactly [t0, t1]. The half-open
    mode exists so consecutive slices over a partition recover every event
    exactly once.
    """
    t0, t1 = int(t0), int(t1)
    if t0 > t1:
        raise ValueError(f"slice interval reversed: {t0} > {t1}")
    lo = int(np.searchsorted(window.t, t0, side="left"))
    hi = int(np.searchsorted(window.t, t1, side="left" if half_open else "right"))
    return EventWindow(
        window.t[lo:hi],
        window.x[lo:hi],
        window.y[lo:hi],
        window.p[lo:hi],
        t0,
        t1,
        window.geometry,
        validate=False,
    )


def concat_windows(windows, t_start, t_end, geometry) -> EventWindow:
    """Concatenate slices back into one window (partition-recovery helper)."""
    if not windows:
        return _empty_window(geometry, t_start, t_end)
    return EventWindow(
        np.concatenate([w.t for w in windows]),
        np.concatenate([w.x for w in windows]),
        np.concatenate([w.y for w in windows]),
        np.concatenate([w.p for w in windows]),
        t_start,
        t_end,
        geometry,
    )
