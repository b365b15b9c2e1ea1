"""Recurrent coarse-to-fine flow network over unified voxel grid bins.

One grid bin at a time flows through a small convolutional encoder and a
stack of per-scale recurrent update cells. Each cell keeps a hidden state
across bins (that is where temporal context lives) and refines the flow
estimate handed up from the coarser scale, so after bin j the network has
an estimate of the displacement accumulated from the window start to bin
center j. Bin 0 only primes the hidden states; its flow output is
discarded because no motion can be observed from a single slice.

All math runs through the float64 autodiff engine in `autodiff`;
parameters are stored as float32 on disk.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import FormatError
from .mocomp import FlowField
from .metrics import FlowSequence
from .representation import Grid

_MAGIC = b"EVP1"


@dataclass(frozen=True)
class ModelConfig:
    bins: int
    width: int
    height: int
    levels: int = 4
    channels: tuple = (8, 16, 24, 32)
    head_mid: int = 32
    feed_flow_prior: bool = False
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        chans = tuple(int(c) for c in self.channels)
        object.__setattr__(self, "channels", chans)
        if len(chans) != self.levels:
            raise ValueError(f"need {self.levels} channel counts, got {len(chans)}")
        if any(c < 1 for c in chans):
            raise ValueError("channel counts must be positive")
        div = 1 << self.levels
        if self.width % div or self.height % div:
            raise ValueError(
                f"frame {self.width}x{self.height} must be divisible by {div} "
                f"for {self.levels} halvings"
            )

    def level_shape(self, level):
        """Spatial shape at scale `level` (1 = finest = stride 2)."""
        return (self.height >> level, self.width >> level)

    def gru_in_channels(self, level):
        # flow (2) + warped features + hidden handed down from the coarser scale
        c = self.channels[level - 1]
        return 2 + c + c


class ModelParams:
    """Named parameter tensors plus the architecture they belong to."""

    def __init__(self, config: ModelConfig, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy_values(self):
        return {k: t.data.copy() for k, t in self.tensors.items()}


def _conv_init(rng, cout, cin, k):
    bound = 1.0 / np.sqrt(cin * k * k)
    w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
    b = np.zeros(cout)
    return w, b


def init_params(config: ModelConfig, seed=0) -> ModelParams:
    """Uniform fan-in weights, zero biases, fixed creation order."""
    rng = np.random.default_rng(seed)
    tensors = {}

    def conv(name, cout, cin, k):
        w, b = _conv_init(rng, cout, cin, k)
        tensors[name + ".w"] = ad.tensor(w, requires_grad=True)
        tensors[name + ".b"] = ad.tensor(b, requires_grad=True)

    ch = config.channels
    conv("enc.stem", ch[0], 1, 3)
    prev = ch[0]
    for i in range(1, config.levels + 1):
        conv(f"enc.l{i}", ch[i - 1], prev, 3)
        prev = ch[i - 1]
    for i in range(1, config.levels + 1):
        hid = ch[i - 1]
        xin = config.gru_in_channels(i)
        conv(f"lvl{i}.gru.z", hid, hid + xin, 3)
        conv(f"lvl{i}.gru.r", hid, hid + xin, 3)
        conv(f"lvl{i}.gru.h", hid, hid + xin, 3)
        conv(f"lvl{i}.head.a", config.head_mid, hid, 3)
        conv(f"lvl{i}.head.b", 2, config.head_mid, 3)
        if i < config.levels:
            conv(f"lvl{i}.adapt", hid, ch[i], 1)
    return ModelParams(config, tensors)


def encoder_forward(params: ModelParams, bin_arr):
    """Map one (H, W) bin to a feature pyramid [finest .. coarsest]."""
    cfg = params.config
    x = np.asarray(bin_arr, np.float64)
    if x.shape != (cfg.height, cfg.width):
        raise ValueError(f"bin shape {x.shape} != configured {(cfg.height, cfg.width)}")
    t = ad.tensor(x[None])
    t = ad.leaky_relu(ad.conv2d(t, params["enc.stem.w"], params["enc.stem.b"]), cfg.leaky_slope)
    feats = []
    for i in range(1, cfg.levels + 1):
        t = ad.leaky_relu(
            ad.conv2d(t, params[f"enc.l{i}.w"], params[f"enc.l{i}.b"], stride=2),
            cfg.leaky_slope,
        )
        feats.append(t)
    return feats


def encode_bins(params: ModelParams, bins):
    """Feature pyramids for a stack of (B, H, W) bins, one bin at a time."""
    return [encoder_forward(params, b) for b in np.asarray(bins, np.float64)]


def convgru_cell(params: ModelParams, level, h_prev, x):
    """Gated recurrent update: h' = (1 - z) * h + z * tanh-candidate."""
    hx = ad.concat_ch([h_prev, x])
    z = ad.sigmoid(ad.conv2d(hx, params[f"lvl{level}.gru.z.w"], params[f"lvl{level}.gru.z.b"]))
    r = ad.sigmoid(ad.conv2d(hx, params[f"lvl{level}.gru.r.w"], params[f"lvl{level}.gru.r.b"]))
    rhx = ad.concat_ch([ad.mul(r, h_prev), x])
    cand = ad.tanh(ad.conv2d(rhx, params[f"lvl{level}.gru.h.w"], params[f"lvl{level}.gru.h.b"]))
    one_minus_z = ad.sub(ad.tensor(np.ones_like(z.data)), z)
    return ad.add(ad.mul(one_minus_z, h_prev), ad.mul(z, cand))


def flow_head(params: ModelParams, level, h):
    mid = ad.relu(ad.conv2d(h, params[f"lvl{level}.head.a.w"], params[f"lvl{level}.head.a.b"]))
    return ad.conv2d(mid, params[f"lvl{level}.head.b.w"], params[f"lvl{level}.head.b.b"])


def smr_step(params: ModelParams, level, feat, flow_coarse, hidden_coarse, h_prev):
    """One per-scale update: warp features by the coarse flow, refine it.

    Returns (flow at this scale, new hidden). The flow is strictly
    flow_coarse + head(hidden), so zeroed head weights pass the coarse
    estimate through untouched.
    """
    warped = ad.warp(feat, flow_coarse)
    x = ad.concat_ch([flow_coarse, warped, hidden_coarse])
    h_new = convgru_cell(params, level, h_prev, x)
    return ad.add(flow_coarse, flow_head(params, level, h_new)), h_new


@dataclass(frozen=True)
class ModelState:
    """Recurrent hidden states after bin j (hiddens[i] is scale i+1)."""

    hiddens: tuple
    prev_coarse_flow: object
    j: int


def init_state(config: ModelConfig) -> ModelState:
    hiddens = tuple(
        ad.tensor(np.zeros((config.channels[i - 1],) + config.level_shape(i)))
        for i in range(1, config.levels + 1)
    )
    return ModelState(hiddens=hiddens, prev_coarse_flow=None, j=-1)


def _upsampled_flow(flow):
    # doubling the raster doubles the pixel units of displacement
    return ad.scale(ad.bilinear_upsample2x(flow), 2.0)


def model_step(state: ModelState, bin_arr, params: ModelParams):
    """Advance one bin: returns (full-resolution flow tensor, new state)."""
    if state.j < 0:
        raise ValueError("state not primed; pass bin 0 through prime_state first")
    return _advance(state, bin_arr, params)


def _advance(state, bin_arr, params):
    cfg = params.config
    feats = encoder_forward(params, bin_arr)
    new_hiddens = list(state.hiddens)
    flow = None
    hidden_down = None
    for level in range(cfg.levels, 0, -1):
        hid_shape = (cfg.channels[level - 1],) + cfg.level_shape(level)
        if level == cfg.levels:
            if cfg.feed_flow_prior and state.prev_coarse_flow is not None:
                flow = ad.tensor(state.prev_coarse_flow.data)
            else:
                flow = ad.tensor(np.zeros((2,) + cfg.level_shape(level)))
            hidden_down = ad.tensor(np.zeros(hid_shape))
        flow, h_new = smr_step(params, level, feats[level - 1], flow, hidden_down, state.hiddens[level - 1])
        new_hiddens[level - 1] = h_new
        if level == cfg.levels:
            coarse_flow = flow
        if level > 1:
            hidden_down = ad.conv2d(
                ad.bilinear_upsample2x(h_new),
                params[f"lvl{level - 1}.adapt.w"],
                params[f"lvl{level - 1}.adapt.b"],
                pad=0,
            )
            flow = _upsampled_flow(flow)
    full = _upsampled_flow(flow)
    next_state = ModelState(hiddens=tuple(new_hiddens), prev_coarse_flow=coarse_flow, j=state.j + 1)
    return full, next_state


def prime_state(bin_arr, params: ModelParams) -> ModelState:
    """Consume bin 0: hidden states get set, the flow output is dropped."""
    _, state = _advance(init_state(params.config), bin_arr, params)
    return state


def model_forward(grid: Grid, params: ModelParams):
    """Run a full grid through the network.

    Returns (FlowSequence of B-1 flows, final state). flows[j] estimates
    the displacement from the window start to bin center j, so durations
    grow linearly with j.
    """
    cfg = params.config
    if grid.kind != "unified_voxel_grid":
        raise ValueError(f"model expects a unified_voxel_grid, got {grid.kind}")
    spec = grid.spec
    if spec.B != cfg.bins:
        raise ValueError(f"grid has {spec.B} bins, model configured for {cfg.bins}")
    if (spec.geometry.width, spec.geometry.height) != (cfg.width, cfg.height):
        raise ValueError("grid geometry does not match model configuration")
    flows = []
    with ad.no_grad():
        state = prime_state(grid.data[0], params)
        for j in range(1, spec.B):
            full, state = model_step(state, grid.data[j], params)
            flows.append(
                FlowField(u=full.data[0].copy(), v=full.data[1].copy(), duration=j * spec.tau)
            )
    return FlowSequence(flows, spec), state


def _write_entry(fh, name, arr):
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    arr = np.asarray(arr)
    fh.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        fh.write(struct.pack("<I", ext))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def save_params(path, params: ModelParams):
    """Named-tensor parameter file; architecture travels as config.* entries."""
    cfg = params.config
    entries = [
        ("config.bins", np.float32(cfg.bins)),
        ("config.width", np.float32(cfg.width)),
        ("config.height", np.float32(cfg.height)),
        ("config.levels", np.float32(cfg.levels)),
        ("config.channels", np.asarray(cfg.channels, np.float32)),
        ("config.head_mid", np.float32(cfg.head_mid)),
        ("config.feed_flow_prior", np.float32(1.0 if cfg.feed_flow_prior else 0.0)),
        ("config.leaky_slope", np.float32(cfg.leaky_slope)),
    ]
    entries += [(name, t.data) for name, t in params.tensors.items()]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sI", _MAGIC, len(entries)))
        for name, arr in entries:
            _write_entry(fh, name, arr)


def _read_exact(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"{path}: truncated parameter file")
    return buf


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic, count = struct.unpack("<4sI", _read_exact(fh, 8, path))
        if magic != _MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        raw = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path)) if rank else ()
            n_vals = int(np.prod(shape, dtype=np.int64)) if rank else 1
            data = np.frombuffer(_read_exact(fh, 4 * n_vals, path), "<f4").reshape(shape)
            raw[name] = data
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} tensors")
    try:
        cfg = ModelConfig(
            bins=int(raw.pop("config.bins")),
            width=int(raw.pop("config.width")),
            height=int(raw.pop("config.height")),
            levels=int(raw.pop("config.levels")),
            channels=tuple(int(c) for c in raw.pop("config.channels")),
            head_mid=int(raw.pop("config.head_mid")),
            feed_flow_prior=bool(float(raw.pop("config.feed_flow_prior"))),
            # stored single precision; snap so 0.1 survives the round-trip
            leaky_slope=round(float(raw.pop("config.leaky_slope")), 6),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing config entry {exc}") from exc
    tensors = {name: ad.tensor(arr.astype(np.float64), requires_grad=True) for name, arr in raw.items()}
    expect = set(init_params(cfg, seed=0).tensors)
    if set(tensors) != expect:
        missing = expect - set(tensors)
        extra = set(tensors) - expect
        raise FormatError(f"{path}: tensor names do not match architecture (missing {sorted(missing)}, extra {sorted(extra)})")
    return ModelParams(cfg, tensors)


_CONFIG_KEYS = ("bins", "width", "height", "levels", "channels", "head_mid", "feed_flow_prior", "leaky_slope")


def write_config_text(path, config: ModelConfig):
    lines = [
        f"bins={config.bins}",
        f"width={config.width}",
        f"height={config.height}",
        f"levels={config.levels}",
        "channels=" + ",".join(str(c) for c in config.channels),
        f"head_mid={config.head_mid}",
        f"feed_flow_prior={'true' if config.feed_flow_prior else 'false'}",
        f"leaky_slope={config.leaky_slope!r}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def parse_kv_file(path, allowed):
    """key=value lines; '#' starts a comment; keys outside `allowed` reject."""
    kv = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in allowed:
                raise FormatError(f"{path}:{lineno}: unknown key {key!r}")
            kv[key] = val
    return kv


def config_from_kv(kv, path) -> ModelConfig:
    for req in ("bins", "width", "height"):
        if req not in kv:
            raise FormatError(f"{path}: missing required key {req!r}")
    try:
        out = ModelConfig(
            bins=int(kv["bins"]),
            width=int(kv["width"]),
            height=int(kv["height"]),
            levels=int(kv.get("levels", 4)),
            channels=tuple(int(c) for c in kv["channels"].split(",")) if "channels" in kv else (8, 16, 24, 32),
            head_mid=int(kv.get("head_mid", 32)),
            feed_flow_prior=kv.get("feed_flow_prior", "false").lower() in ("true", "1", "yes"),
            leaky_slope=float(kv.get("leaky_slope", 0.1)),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return out


def read_config_text(path) -> ModelConfig:
    return config_from_kv(parse_kv_file(path, _CONFIG_KEYS), path)


def config_with_bins(config: ModelConfig, bins: int) -> ModelConfig:
    """Same architecture applied to a different bin count (recurrence is shared)."""
    return replace(config, bins=bins)
