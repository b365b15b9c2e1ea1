"""Supervised flow metrics, time-dense evaluation, and flow file I/O.

Point metrics (EPE, angular error, N-pixel error, outlier rate, L1 loss)
compare a predicted FlowField against ground truth over the pixels the
ground truth marks valid. The time-dense harness takes a FlowSequence
(flows V_{0,1} ... V_{0,B-1}, all anchored at the window start) and scores
every intermediate flow with RFWL on the event slice it spans, next to a
linear-interpolation baseline built from the final flow alone. Trajectories
are read directly off the sequence: position at t_j is seed + V_{0,j}(seed).

Flow file "EVAF" (little-endian): magic 'E','V','A','F'; u32 H, W;
u8 has_mask; f64 duration_s; H*W f32 u-plane; H*W f32 v-plane; H*W u8 mask
if has_mask.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError
from .events import EventWindow, slice_window
from .mocomp import FlowField, bilinear_sample, rfwl
from .representation import BinSpec

EVAF_MAGIC = b"EVAF"
_EVAF_HEADER = struct.Struct("<4sIIBd")

CSV_HEADER = "epe,ae_deg,npe1,npe3,outlier_pct,n_valid"


@dataclass
class EvalReport:
    """One row of supervised metrics over the valid ground-truth pixels."""

    epe: float
    ae_degrees: float
    npe_1px: float
    npe_3px: float
    outlier_pct: float
    n_valid: int

    def csv_row(self):
        return (
            f"{self.epe:.6f},{self.ae_degrees:.6f},{self.npe_1px:.6f},"
            f"{self.npe_3px:.6f},{self.outlier_pct:.6f},{self.n_valid}"
        )


@dataclass
class FlowSequence:
    """Anchored flows V_{0,1} ... V_{0,B-1} over one bin layout.

    flows[j-1] spans t_0 to t_j = t_0 + j*tau; durations strictly increase.
    """

    flows: list
    spec: BinSpec

    def __post_init__(self):
        if len(self.flows) != self.spec.B - 1:
            raise ValueError(
                f"expected {self.spec.B - 1} flows for {self.spec.B} bins, got {len(self.flows)}"
            )
        shape = self.flows[0].shape
        durs = []
        for f in self.flows:
            if f.shape != shape:
                raise ValueError("all flows in a sequence must share geometry")
            durs.append(f.duration)
        if not all(b > a for a, b in zip(durs, durs[1:])):
            raise ValueError("flow durations must strictly increase")

    def __len__(self):
        return len(self.flows)

    def __getitem__(self, j):
        """V_{0,j} for j in 1 .. B-1."""
        if not 1 <= j <= len(self.flows):
            raise IndexError(f"flow index {j} outside 1..{len(self.flows)}")
        return self.flows[j - 1]

    @property
    def final(self) -> FlowField:
        return self.flows[-1]


def _valid_deltas(pred: FlowField, gt: FlowField):
    if pred.shape != gt.shape:
        raise ValueError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    m = gt.valid
    n = int(np.count_nonzero(m))
    if n == 0:
        raise NumericError("no valid ground-truth pixels to evaluate")
    return pred.u[m] - gt.u[m], pred.v[m] - gt.v[m], m, n


def epe(pred: FlowField, gt: FlowField):
    """Mean endpoint error: sqrt(du^2 + dv^2) averaged over valid pixels."""
    du, dv, _, n = _valid_deltas(pred, gt)
    return float(np.hypot(du, dv).sum() / n)


def n_pixel_error(pred: FlowField, gt: FlowField, n_px):
    """Percent of valid pixels whose endpoint error strictly exceeds n_px."""
    du, dv, _, n = _valid_deltas(pred, gt)
    return float(100.0 * np.count_nonzero(np.hypot(du, dv) > n_px) / n)


def angular_error(pred: FlowField, gt: FlowField, convention="3d"):
    """Mean angle between predicted and true flow, in degrees.

    "3d" (default) measures between homogeneous (u, v, 1) vectors, which
    stays defined at zero flow and tempers the error where motion is small.
    "2d" measures the plain angle between (u, v) vectors; degenerate pixels
    score 0 deg when both vectors vanish and 90 deg when only one does.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"flow shapes differ: {pred.shape} vs {gt.shape}")
    m = gt.valid
    n = int(np.count_nonzero(m))
    if n == 0:
        raise NumericError("no valid ground-truth pixels to evaluate")
    up, vp = pred.u[m], pred.v[m]
    ug, vg = gt.u[m], gt.v[m]
    if convention == "3d":
        dot = 1.0 + up * ug + vp * vg
        den = np.sqrt(1.0 + up * up + vp * vp) * np.sqrt(1.0 + ug * ug + vg * vg)
        ang = np.arccos(np.clip(dot / den, -1.0, 1.0))
        # arccos is ill-conditioned at 1: pin exactly-equal vectors to zero
        ang = np.where((up == ug) & (vp == vg), 0.0, ang)
    elif convention == "2d":
        np_mag = np.hypot(up, vp)
        ng_mag = np.hypot(ug, vg)
        both = (np_mag > 0) & (ng_mag > 0)
        ang = np.where(
            both,
            np.arccos(
                np.clip(
                    (up * ug + vp * vg) / np.maximum(np_mag * ng_mag, 1e-300),
                    -1.0,
                    1.0,
                )
            ),
            np.where((np_mag > 0) != (ng_mag > 0), np.pi / 2, 0.0),
        )
    else:
        raise ValueError(f"unknown angular error convention {convention!r}")
    return float(np.degrees(ang.sum() / n))


def outlier_pct(pred: FlowField, gt: FlowField, relative=True):
    """Percent of valid pixels failing the outlier rule.

    Default rule: endpoint error > 3 px AND > 5% of the ground-truth
    magnitude. With relative=False only the 3 px clause applies.
    """
    du, dv, m, n = _valid_deltas(pred, gt)
    err = np.hypot(du, dv)
    bad = err > 3.0
    if relative:
        bad &= err > 0.05 * np.hypot(gt.u[m], gt.v[m])
    return float(100.0 * np.count_nonzero(bad) / n)


def l1_loss(pred: FlowField, gt: FlowField):
    """Training loss: mean over valid pixels of |du| + |dv|."""
    du, dv, _, n = _valid_deltas(pred, gt)
    return float((np.abs(du) + np.abs(dv)).sum() / n)


def evaluate(pred: FlowField, gt: FlowField, ae_convention="3d") -> EvalReport:
    """All point metrics in one report row."""
    return EvalReport(
        epe=epe(pred, gt),
        ae_degrees=angular_error(pred, gt, ae_convention),
        npe_1px=n_pixel_error(pred, gt, 1),
        npe_3px=n_pixel_error(pred, gt, 3),
        outlier_pct=outlier_pct(pred, gt),
        n_valid=int(np.count_nonzero(gt.valid)),
    )


def merge_reports(reports) -> EvalReport:
    """Combine rows by n_valid-weighted average (for sharded evaluation)."""
    reports = list(reports)
    if not reports:
        raise NumericError("nothing to merge")
    n = sum(r.n_valid for r in reports)
    if n == 0:
        raise NumericError("merged reports cover zero valid pixels")

    def wavg(field):
        return sum(getattr(r, field) * r.n_valid for r in reports) / n

    return EvalReport(
        epe=wavg("epe"),
        ae_degrees=wavg("ae_degrees"),
        npe_1px=wavg("npe_1px"),
        npe_3px=wavg("npe_3px"),
        outlier_pct=wavg("outlier_pct"),
        n_valid=n,
    )


def integrate_trajectory(seq: FlowSequence, seeds):
    """Positions along each seed's track: row j is seed + V_{0,j}(seed).

    Returns an (n_seeds, B, 2) array whose column 0 is the seed itself
    (position at t_0). Flows are sampled bilinearly at the seed; a seed
    outside the raster samples zero displacement by the padding rule.
    """
    seeds = np.asarray(seeds, np.float64).reshape(-1, 2)
    B = seq.spec.B
    out = np.empty((len(seeds), B, 2))
    out[:, 0, 0] = seeds[:, 0]
    out[:, 0, 1] = seeds[:, 1]
    for j in range(1, B):
        f = seq[j]
        out[:, j, 0] = seeds[:, 0] + bilinear_sample(f.u, seeds[:, 0], seeds[:, 1])
        out[:, j, 1] = seeds[:, 1] + bilinear_sample(f.v, seeds[:, 0], seeds[:, 1])
    return out


@dataclass
class ProfileEntry:
    """RFWL of one intermediate flow on the event slice it spans."""

    j: int
    t_j: float
    n_events: int
    rfwl: float | None
    rfwl_baseline: float | None


def dense_rfwl_profile(seq: FlowSequence, window: EventWindow):
    """Score every V_{0,j} with RFWL on events in [t_0, t_j].

    Also scores the linear-interpolation baseline built from the final flow
    alone, scaled as (j/(B-1)) * V_{0,B-1}: the yardstick an estimator that
    only predicts the full-window flow can reach. Slices with too few events
    to define RFWL yield entries with None scores.
    """
    spec = seq.spec
    B = spec.B
    t0_us = int(round(spec.t0 * 1e6))
    final = seq.final
    out = []
    for j in range(1, B):
        t_j = spec.t0 + j * spec.tau
        sub = slice_window(window, t0_us, int(round(t_j * 1e6)))
        dur = j * spec.tau
        base = FlowField(
            final.u * (j / (B - 1)), final.v * (j / (B - 1)), dur, final.valid
        )
        model = seq[j]
        entry = ProfileEntry(j=j, t_j=t_j, n_events=len(sub), rfwl=None, rfwl_baseline=None)
        if len(sub):
            try:
                entry.rfwl = rfwl(sub, model, t_ref=spec.t0)
                entry.rfwl_baseline = rfwl(sub, base, t_ref=spec.t0)
            except NumericError:
                entry.rfwl = entry.rfwl_baseline = None
        out.append(entry)
    return out


def write_flow(flow: FlowField, path, with_mask=None):
    """Write a FlowField as an EVAF file.

    By default the mask plane is stored only when it is not all-true.
    """
    h, w = flow.shape
    if with_mask is None:
        with_mask = not flow.valid.all()
    header = _EVAF_HEADER.pack(EVAF_MAGIC, h, w, 1 if with_mask else 0, flow.duration)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(flow.u, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(flow.v, dtype="<f4").tobytes())
        if with_mask:
            f.write(np.ascontiguousarray(flow.valid, dtype=np.uint8).tobytes())


def read_flow(path) -> FlowField:
    """Read an EVAF file back into a FlowField."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _EVAF_HEADER.size:
        raise FormatError(f"{path}: truncated EVAF header")
    magic, h, w, has_mask, duration = _EVAF_HEADER.unpack_from(raw, 0)
    if magic != EVAF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if has_mask not in (0, 1):
        raise FormatError(f"{path}: has_mask must be 0 or 1, got {has_mask}")
    plane = h * w
    want = _EVAF_HEADER.size + plane * 8 + (plane if has_mask else 0)
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    off = _EVAF_HEADER.size
    u = np.frombuffer(raw, "<f4", plane, off).reshape(h, w).astype(np.float64)
    v = np.frombuffer(raw, "<f4", plane, off + plane * 4).reshape(h, w).astype(np.float64)
    if has_mask:
        mask = np.frombuffer(raw, np.uint8, plane, off + plane * 8).reshape(h, w) != 0
    else:
        mask = None
    return FlowField(u=u, v=v, duration=duration, valid=mask)
