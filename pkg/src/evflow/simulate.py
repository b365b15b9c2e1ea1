"""Synthetic event generation with analytic ground truth.

The event model is geometric, not photometric: a scene is a set of
high-contrast generator points (edge samples), each dragged along an exact
motion trajectory. A point fires an event every 1/rate pixels of traversed
arc length, timestamped by the motion's own time parameterization, so the
resulting stream has closed-form ground-truth flow and trajectories. Points
that leave the frame stop emitting.

Supported motions: constant velocity (vx, vy pixels/second) and a circular
arc about a fixed center at a constant angular rate (radians/second). Both
have exact, invertible position functions, which is what makes the
generated data usable as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventWindow, SensorGeometry
from .mocomp import FlowField

__all__ = [
    "MotionModel",
    "ScenePattern",
    "checkerboard_corners",
    "vertical_bars",
    "generate_events",
    "ground_truth_flow",
    "ground_truth_trajectory",
]

CONSTANT_VELOCITY = "constant_velocity"
CIRCULAR_ARC = "circular_arc"


@dataclass(frozen=True)
class MotionModel:
    """Exact, invertible rigid motion of the scene pattern."""

    kind: str
    v: tuple = (0.0, 0.0)
    center: tuple = (0.0, 0.0)
    omega: float = 0.0

    @staticmethod
    def constant(vx, vy) -> "MotionModel":
        return MotionModel(kind=CONSTANT_VELOCITY, v=(float(vx), float(vy)))

    @staticmethod
    def arc(cx, cy, omega) -> "MotionModel":
        return MotionModel(kind=CIRCULAR_ARC, center=(float(cx), float(cy)), omega=float(omega))

    def pos(self, x0, y0, t):
        """Position at time t of the point that sat at (x0, y0) at t = 0."""
        x0 = np.asarray(x0, np.float64)
        y0 = np.asarray(y0, np.float64)
        t = np.asarray(t, np.float64)
        if self.kind == CONSTANT_VELOCITY:
            return x0 + self.v[0] * t, y0 + self.v[1] * t
        if self.kind == CIRCULAR_ARC:
            cx, cy = self.center
            ang = self.omega * t
            c, s = np.cos(ang), np.sin(ang)
            rx = x0 - cx
            ry = y0 - cy
            return cx + c * rx - s * ry, cy + s * rx + c * ry
        raise ValueError(f"unknown motion kind {self.kind!r}")

    def pos_inv(self, x, y, t):
        """The t = 0 position of the point found at (x, y) at time t."""
        if self.kind == CONSTANT_VELOCITY:
            x = np.asarray(x, np.float64)
            y = np.asarray(y, np.float64)
            return x - self.v[0] * t, y - self.v[1] * t
        if self.kind == CIRCULAR_ARC:
            inv = MotionModel(kind=CIRCULAR_ARC, center=self.center, omega=-self.omega)
            return inv.pos(x, y, t)
        raise ValueError(f"unknown motion kind {self.kind!r}")

    def speed(self, x0, y0):
        """Traversal speed (px/s) of the point starting at (x0, y0)."""
        if self.kind == CONSTANT_VELOCITY:
            sp = float(np.hypot(self.v[0], self.v[1]))
            return np.full(np.shape(np.asarray(x0)), sp) if np.ndim(x0) else sp
        if self.kind == CIRCULAR_ARC:
            r = np.hypot(np.asarray(x0, np.float64) - self.center[0],
                         np.asarray(y0, np.float64) - self.center[1])
            return abs(self.omega) * r
        raise ValueError(f"unknown motion kind {self.kind!r}")


@dataclass(frozen=True)
class ScenePattern:
    """Generator points (edge samples) with per-point polarity signs."""

    points: np.ndarray  # (n, 2) float64 start positions
    signs: np.ndarray  # (n,) int8 in {-1, +1}
    geometry: SensorGeometry

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, np.float64).reshape(-1, 2))
        object.__setattr__(self, "signs", np.asarray(self.signs, np.int8).reshape(-1))
        if len(self.points) != len(self.signs):
            raise ValueError("points and signs must have equal length")
        w, h = self.geometry.width, self.geometry.height
        x, y = self.points[:, 0], self.points[:, 1]
        if len(x) and not ((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).all():
            raise ValueError("all generator points must start within frame bounds")

    def __len__(self):
        return len(self.points)


def checkerboard_corners(geometry: SensorGeometry, pitch, margin=2) -> ScenePattern:
    """Corner lattice with alternating polarity, `pitch` pixels apart."""
    xs = np.arange(margin, geometry.width - margin, pitch)
    ys = np.arange(margin, geometry.height - margin, pitch)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
    signs = np.where((gx.ravel() // pitch + gy.ravel() // pitch) % 2 == 0, 1, -1)
    return ScenePattern(pts, signs.astype(np.int8), geometry)


def vertical_bars(geometry: SensorGeometry, xs, y_margin=2, y_step=1) -> ScenePattern:
    """Vertical edge lines at the given x positions, alternating polarity."""
    ys = np.arange(y_margin, geometry.height - y_margin, y_step, dtype=np.float64)
    pts = []
    signs = []
    for i, x in enumerate(xs):
        for y in ys:
            pts.append((float(x), y))
            signs.append(1 if i % 2 == 0 else -1)
    return ScenePattern(np.array(pts), np.array(signs, np.int8), geometry)


def generate_events(
    pattern: ScenePattern,
    motion: MotionModel,
    duration,
    rate,
    fractional=False,
    noise_rate=0.0,
    seed=0,
) -> EventWindow:
    """Sample events along each generator point's trajectory.

    Each point emits an event every 1/rate pixels of arc length, starting
    at t = 0, until it leaves the frame or the window ends. A zero-speed
    point emits a single event at t = 0. Positions are rounded to the
    nearest integer pixel unless `fractional` is set. Events are merged
    time-sorted; polarity is the generator's sign.
    """
    if len(pattern) == 0:
        raise ValueError("pattern has no generator points")
    if not rate > 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    geo = pattern.geometry
    w, h = geo.width, geo.height

    all_t, all_x, all_y, all_p = [], [], [], []
    for (x0, y0), sign in zip(pattern.points, pattern.signs):
        speed = motion.speed(x0, y0)
        if speed > 0:
            # Event k sits at arc length k/rate along the path.
            n_steps = int(np.floor(speed * duration * rate * (1 + 1e-12)))
            t_k = np.arange(n_steps + 1) / (rate * speed)
        else:
            t_k = np.zeros(1)
        px, py = motion.pos(x0, y0, t_k)
        if not fractional:
            px = np.round(px)
            py = np.round(py)
        inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        # A point that leaves the frame stops emitting for good, even if
        # its trajectory would re-enter later.
        exit_idx = int(np.argmin(inside)) if not inside.all() else len(t_k)
        if exit_idx == 0:
            continue
        all_t.append(np.round(t_k[:exit_idx] * 1e6).astype(np.int64))
        all_x.append(px[:exit_idx])
        all_y.append(py[:exit_idx])
        all_p.append(np.full(exit_idx, sign, np.int8))

    if noise_rate > 0:
        rng = np.random.default_rng(seed)
        n_noise = int(rng.poisson(noise_rate * duration * w * h))
        if n_noise:
            all_t.append(rng.integers(0, int(round(duration * 1e6)) + 1, n_noise))
            all_x.append(rng.integers(0, w, n_noise).astype(np.float64))
            all_y.append(rng.integers(0, h, n_noise).astype(np.float64))
            all_p.append(rng.choice(np.array([-1, 1], np.int8), n_noise))

    if all_t:
        t = np.concatenate(all_t)
        order = np.argsort(t, kind="stable")
        t = t[order]
        x = np.concatenate(all_x)[order]
        y = np.concatenate(all_y)[order]
        p = np.concatenate(all_p)[order]
    else:
        t = np.zeros(0, np.int64)
        x = np.zeros(0)
        y = np.zeros(0)
        p = np.zeros(0, np.int8)
    return EventWindow(t, x, y, p, 0, int(round(duration * 1e6)), geo)


def ground_truth_flow(motion: MotionModel, t0, t1, geometry: SensorGeometry) -> FlowField:
    """Exact per-pixel displacement from t0 to t1: pos(p, t1) - p for the
    point occupying pixel p at t0. Duration metadata is t1 - t0; the
    validity mask is all-true."""
    if not t1 > t0:
        raise ValueError(f"need t1 > t0, got [{t0}, {t1}]")
    ys, xs = np.mgrid[0 : geometry.height, 0 : geometry.width].astype(np.float64)
    x_at0, y_at0 = motion.pos_inv(xs, ys, t0)
    x1, y1 = motion.pos(x_at0, y_at0, t1)
    return FlowField(u=x1 - xs, v=y1 - ys, duration=float(t1 - t0))


def ground_truth_trajectory(motion: MotionModel, seeds, times):
    """Exact positions pos(seed, t) for each seed at each requested time.

    seeds: (n, 2) start positions at t = 0; times: ascending seconds.
    Returns an (n, len(times), 2) array.
    """
    seeds = np.asarray(seeds, np.float64).reshape(-1, 2)
    times = np.asarray(times, np.float64)
    if len(times) > 1 and (np.diff(times) < 0).any():
        raise ValueError("times must be ascending")
    out = np.empty((len(seeds), len(times), 2))
    for j, t in enumerate(times):
        px, py = motion.pos(seeds[:, 0], seeds[:, 1], t)
        out[:, j, 0] = px
        out[:, j, 1] = py
    return out
