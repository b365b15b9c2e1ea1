"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough machinery for a small recurrent flow network: tensors carry a
value, an optional gradient buffer, and a closure that scatters incoming
gradients to their parents. All arithmetic is float64; determinism matters
more here than speed, so convolution is an explicit im2col + GEMM with a
fixed evaluation order and no threading surprises beyond BLAS itself.

Every op treats its array arguments as read-only. Gradients at kinks
(|x| at 0, warp at pixel-grid crossings, relu at 0) use the standard
subgradient conventions.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None):
        self.data = np.asarray(data, np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents) if _GRAD_ENABLED else ()
        self._bwd = bwd if _GRAD_ENABLED else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, np.float64)
        else:
            self.grad += g

    def backward(self):
        """Reverse-accumulate gradients from this scalar to every leaf."""
        if self.data.shape != ():
            raise ValueError("backward() expects a scalar loss tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.array(1.0)
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"


def _needs(*tensors):
    return _GRAD_ENABLED and any(t.requires_grad for t in tensors)


def _make(data, parents, bwd, track):
    if track:
        return Tensor(data, requires_grad=True, parents=parents, bwd=bwd)
    return Tensor(data)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def add(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")
    track = _needs(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), bwd, track)


def sub(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")
    track = _needs(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), bwd, track)


def mul(a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")
    track = _needs(a, b)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), bwd, track)


def scale(a: Tensor, s: float):
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * s)

    return _make(a.data * s, (a,), bwd, track)


def sigmoid(a: Tensor):
    out = 1.0 / (1.0 + np.exp(-a.data))
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * out * (1.0 - out))

    return _make(out, (a,), bwd, track)


def tanh(a: Tensor):
    out = np.tanh(a.data)
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (1.0 - out * out))

    return _make(out, (a,), bwd, track)


def relu(a: Tensor):
    mask = a.data > 0
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * mask)

    return _make(a.data * mask, (a,), bwd, track)


def leaky_relu(a: Tensor, slope=0.1):
    factor = np.where(a.data > 0, 1.0, slope)
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * factor)

    return _make(a.data * factor, (a,), bwd, track)


def concat_ch(parts):
    """Concatenate (C_i, H, W) tensors along the channel axis."""
    parts = list(parts)
    hw = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != hw:
            raise ValueError("concat parts must share spatial shape")
    track = _needs(*parts)
    sizes = [p.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, c in zip(parts, sizes):
            if p.requires_grad:
                p._accum(g[off : off + c])
            off += c

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd, track)


def _im2col(x, kh, kw, stride, pad):
    """(C, H, W) -> (C*kh*kw, Ho*Wo) patch matrix."""
    c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c, kh, kw, ho, wo), np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def _col2im(dcols, x_shape, kh, kw, stride, pad, ho, wo):
    c, h, w = x_shape
    dcols = dcols.reshape(c, kh, kw, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad), np.float64)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
    if pad:
        return dxp[:, pad : h + pad, pad : w + pad]
    return dxp


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, pad=1):
    """Cross-correlation of (C_in, H, W) with (C_out, C_in, kh, kw) + bias."""
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight expects {cin_w}")
    if b.shape != (cout,):
        raise ValueError(f"conv2d bias must be ({cout},), got {b.shape}")
    cols, ho, wo = _im2col(x.data, kh, kw, stride, pad)
    wf = w.data.reshape(cout, cin * kh * kw)
    out = (wf @ cols + b.data[:, None]).reshape(cout, ho, wo)
    track = _needs(x, w, b)

    def bwd(g):
        gf = g.reshape(cout, ho * wo)
        if w.requires_grad:
            w._accum((gf @ cols.T).reshape(w.shape))
        if b.requires_grad:
            b._accum(gf.sum(axis=1))
        if x.requires_grad:
            x._accum(_col2im(wf.T @ gf, x.shape, kh, kw, stride, pad, ho, wo))

    return _make(out, (x, w, b), bwd, track)


def bilinear_upsample2x(x: Tensor):
    """Double the spatial size of (C, H, W) with edge-clamped bilinear.

    Output pixel centers map to source coordinates (i + 0.5)/2 - 0.5.
    """
    c, h, w = x.shape
    sy = np.clip((np.arange(2 * h) + 0.5) / 2.0 - 0.5, 0, h - 1)
    sx = np.clip((np.arange(2 * w) + 0.5) / 2.0 - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    fy = sy - y0
    fx = sx - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy0, wy1 = (1.0 - fy)[:, None], fy[:, None]
    wx0, wx1 = (1.0 - fx)[None, :], fx[None, :]
    out = (
        x.data[:, y0[:, None], x0[None, :]] * (wy0 * wx0)
        + x.data[:, y0[:, None], x1[None, :]] * (wy0 * wx1)
        + x.data[:, y1[:, None], x0[None, :]] * (wy1 * wx0)
        + x.data[:, y1[:, None], x1[None, :]] * (wy1 * wx1)
    )
    track = _needs(x)

    def bwd(g):
        if not x.requires_grad:
            return
        dx = np.zeros_like(x.data)
        flat = dx.reshape(c, h * w)
        for yy, wy in ((y0, wy0), (y1, wy1)):
            for xx, wx in ((x0, wx0), (x1, wx1)):
                idx = (yy[:, None] * w + xx[None, :]).ravel()
                contrib = (g * (wy * wx)).reshape(c, -1)
                np.add.at(flat.T, idx, contrib.T)
        x._accum(dx)

    return _make(out, (x,), bwd, track)


def warp(x: Tensor, flow: Tensor):
    """Backward-warp (C, H, W) features by a (2, H, W) flow tensor.

    output(y, x) samples input at (x + u, y + v), zero outside the raster;
    differentiable in both the features and the flow. At exact pixel-grid
    crossings and at the border cutoff the flow gradient uses the
    right-continuous subgradient.
    """
    c, h, w = x.shape
    if flow.shape != (2, h, w):
        raise ValueError(f"flow must be (2, {h}, {w}), got {flow.shape}")
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    px = xs + flow.data[0]
    py = ys + flow.data[1]
    # non-finite positions (a diverging flow) must not crash the gather;
    # they sample the safe origin and the inside mask erases the result,
    # while the NaN flow itself still reaches the loss through other paths
    finite = np.isfinite(px) & np.isfinite(py)
    inside = finite & (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
    pxc = np.clip(np.where(finite, px, 0.0), 0, w - 1)
    pyc = np.clip(np.where(finite, py, 0.0), 0, h - 1)
    x0 = np.floor(pxc).astype(np.int64)
    y0 = np.floor(pyc).astype(np.int64)
    fx = pxc - x0
    fy = pyc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    w00 = (1.0 - fx) * (1.0 - fy)
    w10 = fx * (1.0 - fy)
    w01 = (1.0 - fx) * fy
    w11 = fx * fy
    v00 = x.data[:, y0, x0]
    v10 = x.data[:, y0, x1]
    v01 = x.data[:, y1, x0]
    v11 = x.data[:, y1, x1]
    out = inside * (v00 * w00 + v10 * w10 + v01 * w01 + v11 * w11)
    track = _needs(x, flow)

    def bwd(g):
        gm = g * inside
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            flat = dx.reshape(c, h * w)
            for yy, xx, wt in ((y0, x0, w00), (y0, x1, w10), (y1, x0, w01), (y1, x1, w11)):
                idx = (yy * w + xx).ravel()
                np.add.at(flat.T, idx, (gm * wt).reshape(c, -1).T)
            x._accum(dx)
        if flow.requires_grad:
            # d/dfx and d/dfy of the bilinear blend; the clip kills the
            # derivative where the position is clamped to the border.
            open_x = (px > 0) & (px < w - 1)
            open_y = (py > 0) & (py < h - 1)
            ddfx = ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) * gm
            ddfy = ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) * gm
            df = np.stack([ddfx.sum(axis=0) * open_x, ddfy.sum(axis=0) * open_y])
            flow._accum(df)

    return _make(out, (x, flow), bwd, track)


def weighted_sum(a: Tensor, weights):
    """Scalar sum(a * weights) against a constant weight array."""
    wts = np.asarray(weights, np.float64)
    if wts.shape != a.shape:
        raise ValueError(f"weights shape {wts.shape} != tensor shape {a.shape}")
    track = _needs(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * wts)

    return _make((a.data * wts).sum(), (a,), bwd, track)


def l1_flow_loss(pred: Tensor, target):
    """Mean over pixels of |du| + |dv| between a (2, H, W) prediction and target."""
    target = np.asarray(target, np.float64)
    if pred.shape != target.shape or pred.shape[0] != 2:
        raise ValueError(f"expected matching (2, H, W), got {pred.shape} vs {target.shape}")
    n_px = pred.shape[1] * pred.shape[2]
    diff = pred.data - target
    track = _needs(pred)

    def bwd(g):
        if pred.requires_grad:
            pred._accum(g * np.sign(diff) / n_px)

    return _make(np.abs(diff).sum() / n_px, (pred,), bwd, track)
