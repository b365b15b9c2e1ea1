"""Motion compensation and warp-sharpness metrics.

Compensating an event stream with a candidate flow aligns every event to a
reference time: ``(x', y') = (x, y) + (t_ref - t_i) * V(x_i, y_i)`` where V
is the per-pixel velocity (displacement / duration). A correct flow stacks
events into sharp structures, so the variance of the compensated count
image rises: ``FWL = var(I(E, V)) / var(I(E, 0))``.

FWL is misleading near frame borders: compensation can push events out of
the frame, deleting mass and deflating the variance, so a visibly sharper
frame can still score below 1. RFWL repairs this by normalizing each count
image by its own total before comparing variances, which makes the score
invariant to how many events survived the warp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .events import EventWindow

__all__ = [
    "FlowField",
    "MCFrame",
    "zero_flow",
    "bilinear_sample",
    "backward_warp",
    "motion_compensate",
    "fwl",
    "rfwl",
]


@dataclass
class FlowField:
    """Per-pixel displacement (pixels) spanning a known duration (seconds)."""

    u: np.ndarray
    v: np.ndarray
    duration: float
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.u = np.asarray(self.u, np.float64)
        self.v = np.asarray(self.v, np.float64)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u/v must be matching H x W rasters, got {self.u.shape} vs {self.v.shape}")
        if not self.duration > 0:
            raise ValueError(f"flow duration must be positive, got {self.duration}")
        if self.valid is None:
            self.valid = np.ones(self.u.shape, bool)
        else:
            self.valid = np.asarray(self.valid, bool)
            if self.valid.shape != self.u.shape:
                raise ValueError("valid mask shape must match u/v")
        if not (np.isfinite(self.u[self.valid]).all() and np.isfinite(self.v[self.valid]).all()):
            raise ValueError("flow must be finite wherever valid")

    @property
    def shape(self):
        return self.u.shape

    @property
    def magnitude(self):
        return np.hypot(self.u, self.v)


def zero_flow(shape, duration) -> FlowField:
    """All-zero displacement field over the given (H, W) and duration."""
    h, w = shape
    return FlowField(np.zeros((h, w)), np.zeros((h, w)), duration)


@dataclass
class MCFrame:
    """Motion-compensated event count image."""

    counts: np.ndarray
    n_in: int
    n_total: int
    t_ref: float

    @property
    def variance(self):
        """Population variance over all pixels, zeros included."""
        return float(self.counts.var(dtype=np.float64))


def bilinear_sample(raster, x, y):
    """4-neighbor bilinear interpolation; positions outside the raster give 0.

    The raster's sampling domain is [0, W-1] x [0, H-1]; anything outside is
    zero padding (a hard cutoff, not a partial blend).
    """
    raster = np.asarray(raster, np.float64)
    h, w = raster.shape
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    val = (
        raster[y0, x0] * ((1.0 - fx) * (1.0 - fy))
        + raster[y0, x1] * (fx * (1.0 - fy))
        + raster[y1, x0] * ((1.0 - fx) * fy)
        + raster[y1, x1] * (fx * fy)
    )
    out = np.where(inside, val, 0.0)
    return float(out) if out.ndim == 0 else out


def backward_warp(arr, flow: FlowField):
    """Warp a raster (H x W) or feature stack (C x H x W) by a flow.

    output(y, x) = bilinear_sample(input, (x + u(x, y), y + v(x, y))).
    Zero flow is the identity.
    """
    arr = np.asarray(arr, np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != flow.shape:
        raise ValueError(f"cannot warp array of shape {arr.shape} with flow {flow.shape}")
    h, w = flow.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = xs + flow.u
    sy = ys + flow.v
    out = np.stack([bilinear_sample(c, sx, sy) for c in arr])
    return out[0] if squeeze else out


def _splat_unit(x, y, width, height):
    """Weight-1 bilinear splat of in-frame positions into a count image.

    Positions must lie in [0, width-1] x [0, height-1]; the +1 corners can
    then leave the frame only with zero weight and are clamped.
    """
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    n = len(x)
    flat = np.empty((n, 4), np.int64)
    w4 = np.empty((n, 4), np.float64)
    flat[:, 0] = y0 * width + x0
    flat[:, 1] = y0 * width + x1
    flat[:, 2] = y1 * width + x0
    flat[:, 3] = y1 * width + x1
    w4[:, 0] = (1.0 - fx) * (1.0 - fy)
    w4[:, 1] = fx * (1.0 - fy)
    w4[:, 2] = (1.0 - fx) * fy
    w4[:, 3] = fx * fy
    img = np.bincount(flat.ravel(), weights=w4.ravel(), minlength=width * height)
    return img.reshape(height, width)


def motion_compensate(window: EventWindow, flow: FlowField, t_ref=None) -> MCFrame:
    """Align events to t_ref using the flow-derived velocity at each event.

    Per event: velocity = (u, v)/duration sampled bilinearly at the event's
    own position; landing = (x, y) + (t_ref - t) * velocity. Events landing
    outside [0, W-1] x [0, H-1] are dropped whole, so each retained event
    contributes exactly weight 1 and sum(counts) == n_in. Counting is
    polarity-agnostic: opposite polarities must pile up, not cancel.
    t_ref defaults to the window start.
    """
    geo = window.geometry
    if flow.shape != (geo.height, geo.width):
        raise ValueError(f"flow shape {flow.shape} does not match sensor {geo}")
    if t_ref is None:
        t_ref = window.t_start * 1e-6
    dt = t_ref - window.t_seconds
    ui = bilinear_sample(flow.u, window.x, window.y)
    vi = bilinear_sample(flow.v, window.x, window.y)
    xl = window.x + dt * (ui / flow.duration)
    yl = window.y + dt * (vi / flow.duration)
    keep = (xl >= 0) & (xl <= geo.width - 1) & (yl >= 0) & (yl <= geo.height - 1)
    counts = _splat_unit(xl[keep], yl[keep], geo.width, geo.height)
    return MCFrame(
        counts=counts,
        n_in=int(np.count_nonzero(keep)),
        n_total=len(window),
        t_ref=float(t_ref),
    )


def fwl(window: EventWindow, flow: FlowField, t_ref=None):
    """Flow warp loss: variance of the compensated frame over the zero-flow one.

    > 1 means the candidate flow sharpened the event image. Sensitive to
    border loss: expelled events deflate the numerator.
    """
    if len(window) == 0:
        raise NumericError("FWL of an empty window is undefined")
    mc_v = motion_compensate(window, flow, t_ref)
    mc_0 = motion_compensate(window, zero_flow(flow.shape, flow.duration), t_ref)
    var0 = mc_0.variance
    if var0 == 0.0:
        raise NumericError("zero-flow frame has zero variance; FWL undefined")
    return mc_v.variance / var0


def rfwl(window: EventWindow, flow: FlowField, t_ref=None):
    """Reliable FWL: each count image is normalized by its own total first.

    Dividing each frame by its pixel sum removes the penalty for events
    warped out of the frame, so the score reflects sharpness alone.
    """
    if len(window) == 0:
        raise NumericError("RFWL of an empty window is undefined")
    mc_v = motion_compensate(window, flow, t_ref)
    mc_0 = motion_compensate(window, zero_flow(flow.shape, flow.duration), t_ref)
    sum_v = mc_v.counts.sum(dtype=np.float64)
    sum_0 = mc_0.counts.sum(dtype=np.float64)
    if sum_v <= 0 or sum_0 <= 0:
        raise NumericError("cannot normalize a frame with zero total count")
    norm_v = mc_v.counts / sum_v
    norm_0 = mc_0.counts / sum_0
    var0 = float(norm_0.var(dtype=np.float64))
    if var0 == 0.0:
        raise NumericError("zero-flow frame has zero variance; RFWL undefined")
    return float(norm_v.var(dtype=np.float64)) / var0
