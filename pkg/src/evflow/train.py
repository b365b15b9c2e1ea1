"""Desk-scale training: Adam over the recurrent flow network.

The loss touches ONLY the final flow estimate of each window. Intermediate
per-bin flows get no direct supervision; whatever accuracy they acquire
comes through the shared recurrence, which is exactly the property the
time-dense evaluation harness measures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import FormatError, NumericError
from .model import (
    _CONFIG_KEYS,
    ModelConfig,
    ModelParams,
    config_from_kv,
    init_params,
    model_step,
    parse_kv_file,
    prime_state,
)

# Reference settings. Only "toy" is exercised here; the full-scale rows
# mirror the published recipes for the two standard driving/indoor
# benchmarks and exist for configuration completeness.
PRESETS = {
    "toy": {"lr": 1e-3, "batch": 1, "iters": 500, "crop": None, "hflip": 0.0},
    "dsec": {"lr": 5e-4, "batch": 6, "iters": 100_000, "lr_decay": (0.1, 10_000), "crop": (288, 384), "hflip": 0.5},
    "mvsec": {"lr": 1e-3, "batch": 3, "iters": 120_000, "crop": (256, 256), "hflip": 0.5},
}


_TRAIN_KEYS = ("iters", "lr", "augment", "hflip_prob")


def load_train_config(path):
    """One key=value file carrying both the architecture and the loop knobs.

    Returns (ModelConfig, dict of train options with defaults filled in).
    """
    kv = parse_kv_file(path, _CONFIG_KEYS + _TRAIN_KEYS)
    extras = {k: kv.pop(k) for k in _TRAIN_KEYS if k in kv}
    config = config_from_kv(kv, path)
    try:
        opts = {
            "iters": int(extras.get("iters", 500)),
            "lr": float(extras.get("lr", 1e-3)),
            "augment": extras.get("augment", "false").lower() in ("true", "1", "yes"),
            "hflip_prob": float(extras.get("hflip_prob", 0.5)),
        }
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return config, opts


class Adam:
    """Standard first/second-moment adaptive step with bias correction."""

    def __init__(self, params: ModelParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
        self._v = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, tens in self.params.tensors.items():
            g = tens.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            tens.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def final_flow(params: ModelParams, bins):
    """Grad-enabled forward over a (B, H, W) bin stack; returns the last flow tensor."""
    bins = np.asarray(bins, np.float64)
    state = prime_state(bins[0], params)
    full = None
    for j in range(1, bins.shape[0]):
        full, state = model_step(state, bins[j], params)
    if full is None:
        raise ValueError("need at least 2 bins to estimate flow")
    return full


@dataclass(frozen=True)
class TrainResult:
    params: ModelParams
    loss_curve: tuple
    n_iters: int


def _prep_sample(grid, gt, config, augment):
    if grid.kind != "unified_voxel_grid":
        raise ValueError(f"training expects unified_voxel_grid samples, got {grid.kind}")
    if grid.spec.B != config.bins:
        raise ValueError(f"sample has {grid.spec.B} bins, config expects {config.bins}")
    h, w = grid.data.shape[1:]
    gt_arr = np.stack([gt.u, gt.v])
    if gt_arr.shape[1:] != (h, w):
        raise ValueError("ground-truth flow raster does not match the grid")
    if augment:
        if h < config.height or w < config.width:
            raise ValueError(f"sample {w}x{h} too small to crop to {config.width}x{config.height}")
    elif (h, w) != (config.height, config.width):
        raise ValueError(f"sample {w}x{h} does not match model frame {config.width}x{config.height}")
    return np.asarray(grid.data, np.float64), gt_arr


def _hflip(bins, gt):
    bins = bins[:, :, ::-1].copy()
    gt = np.stack([-gt[0, :, ::-1], gt[1, :, ::-1]])
    return bins, gt


def train_toy(
    dataset,
    config: ModelConfig,
    seed=0,
    iters=500,
    lr=1e-3,
    augment=False,
    hflip_prob=0.5,
    init=None,
) -> TrainResult:
    """Iterate Adam on samples of (unified grid, full-window flow target).

    One sample per iteration, drawn uniformly with a seeded generator, so a
    given (dataset, config, seed, flags) tuple reproduces parameters
    bit-for-bit. `augment` enables random cropping to the model frame plus
    horizontal flips; without it, sample frames must match the model frame
    exactly. A non-finite loss raises NumericError (the partial loss curve
    rides along on the exception).
    """
    if not dataset:
        raise ValueError("empty training dataset")
    prepared = [_prep_sample(grid, gt, config, augment) for grid, gt in dataset]
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(config, seed)
    opt = Adam(params, lr=lr)
    curve = []
    for it in range(iters):
        bins, gt = prepared[int(rng.integers(len(prepared)))]
        if augment:
            oy = int(rng.integers(bins.shape[1] - config.height + 1))
            ox = int(rng.integers(bins.shape[2] - config.width + 1))
            bins = bins[:, oy : oy + config.height, ox : ox + config.width]
            gt = gt[:, oy : oy + config.height, ox : ox + config.width]
            if rng.random() < hflip_prob:
                bins, gt = _hflip(bins, gt)
        params.zero_grads()
        pred = final_flow(params, bins)
        loss = ad.l1_flow_loss(pred, gt)
        value = float(loss.data)
        if not np.isfinite(value):
            exc = NumericError(f"training diverged: non-finite loss at iteration {it}")
            exc.loss_curve = tuple(curve)
            raise exc
        curve.append(value)
        loss.backward()
        opt.step()
    return TrainResult(params=params, loss_curve=tuple(curve), n_iters=iters)
