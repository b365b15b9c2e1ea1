"""Raster output: flow color wheels (PPM) and 16-bit count frames (PGM)."""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .mocomp import FlowField

__all__ = [
    "flow_to_rgb",
    "render_flow_image",
    "write_ppm",
    "read_ppm",
    "write_pgm16",
    "read_pgm16",
]


def flow_to_rgb(flow: FlowField, max_mag=None):
    """Color-wheel raster: hue is direction, saturation is relative magnitude.

    Zero flow maps to white (zero saturation at full value). max_mag
    defaults to the largest magnitude in the field; a uniform or zero field
    normalizes against 1 to avoid dividing by nothing.
    """
    u, v = flow.u, flow.v
    if not (np.isfinite(u).all() and np.isfinite(v).all()):
        raise ValueError("flow must be finite to render")
    mag = np.hypot(u, v)
    if max_mag is None:
        max_mag = float(mag.max())
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    val = np.ones_like(sat)

    k = hue * 6.0
    i = np.floor(k).astype(np.int64) % 6
    f = k - np.floor(k)
    p = val * (1.0 - sat)
    q = val * (1.0 - f * sat)
    t = val * (1.0 - (1.0 - f) * sat)
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [val, q, p, p, t, val])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [t, val, val, q, p, p])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [p, p, t, val, val, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def write_ppm(rgb, path):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected uint8 H x W x 3, got {rgb.dtype} {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes(order="C"))


def render_flow_image(flow: FlowField, path, max_mag=None):
    """Write the flow's color-wheel rendering as a binary 8-bit PPM."""
    write_ppm(flow_to_rgb(flow, max_mag=max_mag), path)


def _read_pnm_header(fh, magic, path):
    if fh.read(2) != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = fh.read(1)
        if not tok.isdigit():
            raise FormatError(f"{path}: malformed header token {tok!r}")
        vals.append(int(tok))
    return vals  # width, height, maxval


def read_ppm(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P6", path)
        if maxval != 255:
            raise FormatError(f"{path}: expected 8-bit pixmap, maxval {maxval}")
        data = fh.read(w * h * 3)
    if len(data) != w * h * 3:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, np.uint8).reshape(h, w, 3)


def write_pgm16(img, path):
    """Grayscale frame normalized so the peak maps to 65535 (big-endian P5)."""
    img = np.asarray(img, np.float64)
    if img.ndim != 2:
        raise ValueError("expected an H x W raster")
    if not np.isfinite(img).all():
        raise ValueError("raster must be finite to render")
    lo = float(img.min())
    shifted = img - lo if lo < 0 else img
    peak = float(shifted.max())
    scaled = np.round(shifted / peak * 65535.0) if peak > 0 else np.zeros_like(shifted)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(scaled.astype(">u2").tobytes(order="C"))


def read_pgm16(path):
    with open(path, "rb") as fh:
        w, h, maxval = _read_pnm_header(fh, b"P5", path)
        if maxval != 65535:
            raise FormatError(f"{path}: expected 16-bit graymap, maxval {maxval}")
        data = fh.read(w * h * 2)
    if len(data) != w * h * 2:
        raise FormatError(f"{path}: truncated pixel data")
    return np.frombuffer(data, ">u2").reshape(h, w).astype(np.uint16)
