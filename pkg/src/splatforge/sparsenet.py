"""Sparse 3D convolution engine and the P2ENet forward pass.

Convolutions are evaluated only at occupied voxels, summing over occupied
taps; transposed convolutions emit 2x2x2 children pruned to an explicit
target occupancy, so decoder geometry always matches the encoder. Weights
live in a bit-exact little-endian file format ("P2EN").
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .voxelgrid import COORD_LIMIT, SparseVoxelGrid, VoxelizedCloud, pack_coords, pool_2x2x2

WEIGHT_MAGIC = b"P2EN"
WEIGHT_VERSION = 1
HEAD_CHANNELS = 14

_KIND_CODES = {"conv": 0, "transposed_conv": 1, "mlp": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
# (kernel, stride) a layer kind gets when the caller does not say otherwise
_KIND_DEFAULTS = {"conv": (3, 1), "transposed_conv": (2, 2), "mlp": (1, 1)}


class WeightFormatError(ValueError):
    """Weight file with a bad magic, version, or layer-kind byte."""


class WeightTruncationError(WeightFormatError):
    """Weight file that ends before its own headers say it should."""


class WeightShapeError(WeightFormatError):
    """Weight file whose sizes or topology disagree with its metadata."""


@dataclass(frozen=True)
class ConvLayerSpec:
    """Shape contract for one layer: conv (odd kernel), transposed_conv (kernel
    2, stride 2), or mlp (per-voxel dense, kernel 1)."""

    kind: str
    in_channels: int
    out_channels: int
    kernel: int = None
    stride: int = None

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind '{self.kind}'")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise ValueError("channel counts must be positive")
        default_kernel, default_stride = _KIND_DEFAULTS[self.kind]
        if self.kernel is None:
            object.__setattr__(self, "kernel", default_kernel)
        if self.stride is None:
            object.__setattr__(self, "stride", default_stride)
        if self.kind == "conv" and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ValueError(f"conv kernels must be odd, got {self.kernel}")
        if self.kind != "conv" and self.kernel != default_kernel:
            raise ValueError(f"{self.kind} kernel is fixed at {default_kernel}")
        if self.stride != default_stride:
            raise ValueError(f"{self.kind} stride is fixed at {default_stride}")

    @property
    def weight_shape(self) -> tuple:
        """Tap-major tensor shape; tap index [a, b, c] is offset (dz, dy, dx) = (a-r, b-r, c-r)."""
        if self.kind == "mlp":
            return (self.in_channels, self.out_channels)
        k = self.kernel
        return (k, k, k, self.in_channels, self.out_channels)


@dataclass(frozen=True)
class NetworkPlan:
    """Channel widths: encoder conv outputs (first entry is the input width),
    decoder transposed-conv outputs (deepest first), and the head hidden width.

    Levels = len(encoder_channels) - 2; each level is one conv + one pool on
    the way down and one pruned transposed conv + skip concatenation on the
    way up, with a final conv at the bottleneck and a 2-layer MLP head.
    """

    encoder_channels: tuple = (9, 16, 32, 64, 128)
    decoder_channels: tuple = (64, 32, 16)
    head_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if len(self.encoder_channels) < 3:
            raise ValueError("encoder needs an input width, one level, and a bottleneck")
        if len(self.decoder_channels) != self.levels:
            raise ValueError(
                f"decoder must have {self.levels} stages to mirror the encoder, "
                f"got {len(self.decoder_channels)}")
        if any(c <= 0 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel widths must be positive")
        if self.head_hidden <= 0:
            raise ValueError("head width must be positive")

    @property
    def levels(self) -> int:
        return len(self.encoder_channels) - 2

    def layer_specs(self) -> list:
        """The fixed layer order: encoder convs, decoder transposed convs, head MLP."""
        enc = self.encoder_channels
        specs = [ConvLayerSpec("conv", cin, cout) for cin, cout in zip(enc[:-1], enc[1:])]
        width = enc[-1]
        for cout, skip in zip(self.decoder_channels, enc[-2:0:-1]):
            specs.append(ConvLayerSpec("transposed_conv", width, cout))
            width = cout + skip
        specs.append(ConvLayerSpec("mlp", width, self.head_hidden))
        specs.append(ConvLayerSpec("mlp", self.head_hidden, HEAD_CHANNELS))
        return specs


@dataclass(eq=False)
class NetworkWeights:
    """Plan plus one (spec, weights, bias) triple per layer, in forward order.

    Weights are float32; conv tensors are (k, k, k, in, out), mlp matrices
    (in, out), biases (out,). The layer list must match plan.layer_specs().
    """

    plan: NetworkPlan
    layers: list

    def __post_init__(self):
        expected = self.plan.layer_specs()
        if len(self.layers) != len(expected):
            raise ValueError(f"plan expects {len(expected)} layers, got {len(self.layers)}")
        checked = []
        for i, ((spec, w, b), want) in enumerate(zip(self.layers, expected)):
            if spec != want:
                raise ValueError(f"layer {i} is {spec}, plan expects {want}")
            w = np.ascontiguousarray(w, dtype=np.float32)
            b = np.ascontiguousarray(b, dtype=np.float32)
            if w.shape != spec.weight_shape:
                raise ValueError(f"layer {i} weights must be {spec.weight_shape}, got {w.shape}")
            if b.shape != (spec.out_channels,):
                raise ValueError(f"layer {i} bias must be ({spec.out_channels},), got {b.shape}")
            checked.append((spec, w, b))
        self.layers = checked


def init_random(plan: NetworkPlan, seed: int) -> NetworkWeights:
    """Fan-in-scaled uniform weights in +/-sqrt(6/fan_in), zero biases, float32."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in plan.layer_specs():
        fan_in = spec.in_channels if spec.kind == "mlp" else spec.kernel ** 3 * spec.in_channels
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32)
        layers.append((spec, w, np.zeros(spec.out_channels, dtype=np.float32)))
    return NetworkWeights(plan, layers)


def _check_layer(grid: SparseVoxelGrid, spec: ConvLayerSpec, kind: str,
                 weights: np.ndarray, bias: np.ndarray) -> tuple:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got '{spec.kind}'")
    if grid.channel_count != spec.in_channels:
        raise ValueError(
            f"grid has {grid.channel_count} channels, layer expects {spec.in_channels}")
    weights = np.asarray(weights, dtype=np.float32)
    bias = np.asarray(bias, dtype=np.float32)
    if weights.shape != spec.weight_shape:
        raise ValueError(f"weights must be {spec.weight_shape}, got {weights.shape}")
    if bias.shape != (spec.out_channels,):
        raise ValueError(f"bias must be ({spec.out_channels},), got {bias.shape}")
    return weights, bias


def _lookup_clipped(grid: SparseVoxelGrid, query: np.ndarray) -> np.ndarray:
    """grid.lookup that treats coordinates beyond the packable range as misses."""
    idx = np.full(query.shape[0], -1, dtype=np.int64)
    ok = (np.abs(query) < COORD_LIMIT).all(axis=1)
    if ok.any():
        idx[ok] = grid.lookup(query[ok])
    return idx


def sparse_conv(grid: SparseVoxelGrid, spec: ConvLayerSpec, weights, bias,
                relu: bool = False) -> SparseVoxelGrid:
    """Stride-1 convolution at the occupied sites only.

    out[v] = bias + sum over occupied taps of W[tap] applied to in[v + offset],
    offsets spanning (-r..r)^3 with r = kernel // 2; occupancy is preserved.
    Tap order is fixed, so results are identical for any worker count.
    """
    weights, bias = _check_layer(grid, spec, "conv", weights, bias)
    m = len(grid)
    out = np.empty((m, spec.out_channels), dtype=np.float64)
    out[:] = bias
    coords = grid.coords.astype(np.int64)
    r = spec.kernel // 2
    for a in range(spec.kernel):          # dz
        for b in range(spec.kernel):      # dy
            for c in range(spec.kernel):  # dx
                if m == 0:
                    break
                offset = np.array([c - r, b - r, a - r], dtype=np.int64) * grid.stride
                idx = _lookup_clipped(grid, coords + offset)
                hit = idx >= 0
                if hit.any():
                    out[hit] += grid.feats[idx[hit]] @ weights[a, b, c]
    if relu:
        np.maximum(out, 0.0, out=out)
    return SparseVoxelGrid(grid.coords, out, stride=grid.stride,
                           scale_to_world=grid.scale_to_world)


def transposed_conv_pruned(grid: SparseVoxelGrid, spec: ConvLayerSpec, weights, bias,
                           target_occupancy, relu: bool = False) -> SparseVoxelGrid:
    """Upsample parents to their 2x2x2 children, keeping exactly the target set.

    A child at parent + half_stride * (dx, dy, dz) receives W[dz, dy, dx] applied
    to the parent's features, plus bias. Targets whose parent is unoccupied get
    the bias alone. Output occupancy equals target_occupancy exactly.
    """
    weights, bias = _check_layer(grid, spec, "transposed_conv", weights, bias)
    if grid.stride < 2:
        raise ValueError("transposed conv needs a stride >= 2 grid to subdivide")
    child_stride = grid.stride // 2
    targets = np.ascontiguousarray(np.atleast_2d(target_occupancy), dtype=np.int64)
    if targets.ndim != 2 or targets.shape[1] != 3:
        raise ValueError(f"target occupancy must be (K, 3), got {targets.shape}")
    if targets.size and (targets % child_stride != 0).any():
        raise ValueError(f"target coordinates must be multiples of {child_stride}")

    parents = (targets // grid.stride) * grid.stride
    taps = (targets - parents) // child_stride          # (K, 3) of 0/1 = (dx, dy, dz)
    pidx = _lookup_clipped(grid, parents)
    out = np.empty((targets.shape[0], spec.out_channels), dtype=np.float64)
    out[:] = bias
    for a in range(2):          # dz
        for b in range(2):      # dy
            for c in range(2):  # dx
                sel = (taps[:, 0] == c) & (taps[:, 1] == b) & (taps[:, 2] == a) & (pidx >= 0)
                if sel.any():
                    out[sel] += grid.feats[pidx[sel]] @ weights[a, b, c]
    if relu:
        np.maximum(out, 0.0, out=out)
    return SparseVoxelGrid(targets, out, stride=child_stride,
                           scale_to_world=grid.scale_to_world)


def unet_forward(vox: VoxelizedCloud, weights: NetworkWeights) -> np.ndarray:
    """Run the UNet and head; returns one raw 14-vector per input point.

    Encoder: [conv, pool] per level plus a bottleneck conv. Decoder: per level,
    a transposed conv pruned to that encoder level's occupancy, concatenated
    with the skip features. Head: shared per-voxel 2-layer MLP; voxel outputs
    broadcast to each voxel's source points. ReLU follows every layer except
    the last.
    """
    plan = weights.plan
    grid = vox.grid
    if grid.channel_count != plan.encoder_channels[0]:
        raise ValueError(
            f"input grid has {grid.channel_count} channels, "
            f"plan expects {plan.encoder_channels[0]}")
    layers = iter(weights.layers)

    skips = []
    for _ in range(plan.levels):
        spec, w, b = next(layers)
        grid = sparse_conv(grid, spec, w, b, relu=True)
        skips.append(grid)
        grid = pool_2x2x2(grid)
    spec, w, b = next(layers)
    grid = sparse_conv(grid, spec, w, b, relu=True)

    for skip in reversed(skips):
        spec, w, b = next(layers)
        grid = transposed_conv_pruned(grid, spec, w, b, skip.coords, relu=True)
        grid = SparseVoxelGrid(skip.coords, np.concatenate([grid.feats, skip.feats], axis=1),
                               stride=skip.stride, scale_to_world=skip.scale_to_world)

    (_, w1, b1), (_, w2, b2) = next(layers), next(layers)
    hidden = np.maximum(grid.feats @ w1 + b1, 0.0)
    raw = hidden @ w2 + b2
    return raw[vox.point_to_voxel]


@dataclass(eq=False)
class HeadOutput:
    """Activated head fields; leading shape matches the raw input batch."""

    delta: np.ndarray      # (..., 3) world-unit center offset, |each| <= voxel_scale
    sigma: np.ndarray      # (..., 3) strictly positive world-unit scales
    quat: np.ndarray       # (..., 4) unit, identity-biased
    opacity: np.ndarray    # (...,) in (0, 1)
    normal: np.ndarray     # (..., 3) unit, (0, 0, 1) fallback


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate_head(raw: np.ndarray, voxel_scale: float) -> HeadOutput:
    """Map raw (..., 14) head outputs to bounded splat parameters.

    delta = tanh * voxel_scale; sigma = softplus * voxel_scale (clamped away
    from zero so extreme negatives stay positive); quat = normalize(raw + e_w);
    opacity = sigmoid; normal = normalize with (0, 0, 1) fallback below 1e-8.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != HEAD_CHANNELS:
        raise ValueError(f"raw head output must have {HEAD_CHANNELS} channels")
    if voxel_scale <= 0:
        raise ValueError("voxel_scale must be positive")

    delta = np.tanh(raw[..., 0:3]) * voxel_scale
    sigma = np.maximum(np.logaddexp(0.0, raw[..., 3:6]), 1e-12) * voxel_scale

    quat = raw[..., 6:10].copy()
    quat[..., 0] += 1.0
    qnorm = np.linalg.norm(quat, axis=-1, keepdims=True)
    identity = np.zeros_like(quat)
    identity[..., 0] = 1.0
    quat = np.where(qnorm < 1e-12, identity, quat / np.maximum(qnorm, 1e-300))

    opacity = _sigmoid(raw[..., 10])

    normal = raw[..., 11:14]
    nnorm = np.linalg.norm(normal, axis=-1, keepdims=True)
    fallback = np.zeros_like(normal)
    fallback[..., 2] = 1.0
    normal = np.where(nnorm < 1e-8, fallback, normal / np.maximum(nnorm, 1e-300))

    return HeadOutput(delta, sigma, quat, opacity, normal)


def save_weights(weights: NetworkWeights, path) -> None:
    """Write the P2EN file: header, plan metadata, then per-layer records.

    Layout (little-endian): magic "P2EN", u32 version, u32 level count,
    u32-counted encoder and decoder channel lists, u32 head width, u32 layer
    count, then per layer u8 kind, u8 kernel, u32 in, u32 out, float32 weights
    in lexicographic (dz, dy, dx) tap order, float32 bias.
    """
    plan = weights.plan
    parts = [WEIGHT_MAGIC, struct.pack("<II", WEIGHT_VERSION, plan.levels)]
    for chans in (plan.encoder_channels, plan.decoder_channels):
        parts.append(struct.pack(f"<I{len(chans)}I", len(chans), *chans))
    parts.append(struct.pack("<II", plan.head_hidden, len(weights.layers)))
    for spec, w, b in weights.layers:
        parts.append(struct.pack("<BBII", _KIND_CODES[spec.kind], spec.kernel,
                                 spec.in_channels, spec.out_channels))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write weights {path}: {exc}") from exc


class _Cursor:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise WeightTruncationError(f"{self.path}: file ends inside a field")
        chunk = self.blob[self.pos: self.pos + count]
        self.pos += count
        return chunk

    def u32(self, n: int = 1) -> tuple:
        return struct.unpack(f"<{n}I", self.take(4 * n))

    def f32(self, count: int, shape: tuple) -> np.ndarray:
        flat = np.frombuffer(self.take(4 * count), dtype="<f4")
        return flat.reshape(shape).astype(np.float32)


def load_weights(path) -> NetworkWeights:
    """Read a P2EN file; magic, sizes, and topology are all validated."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read weights {path}: {exc}") from exc
    cur = _Cursor(blob, path)
    if cur.take(4) != WEIGHT_MAGIC:
        raise WeightFormatError(f"{path}: not a weight file (bad magic)")
    (version,) = cur.u32()
    if version != WEIGHT_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    (levels,) = cur.u32()
    (n_enc,) = cur.u32()
    encoder = cur.u32(n_enc)
    (n_dec,) = cur.u32()
    decoder = cur.u32(n_dec)
    head_hidden, layer_count = cur.u32(2)
    try:
        plan = NetworkPlan(encoder, decoder, head_hidden)
    except ValueError as exc:
        raise WeightShapeError(f"{path}: {exc}") from exc
    if plan.levels != levels:
        raise WeightShapeError(f"{path}: header says {levels} levels, plan has {plan.levels}")

    layers = []
    for i in range(layer_count):
        kind_code, kernel = struct.unpack("<BB", cur.take(2))
        cin, cout = cur.u32(2)
        if kind_code not in _KIND_NAMES:
            raise WeightFormatError(f"{path}: layer {i} has unknown kind byte {kind_code}")
        try:
            spec = ConvLayerSpec(_KIND_NAMES[kind_code], cin, cout, kernel=kernel)
        except ValueError as exc:
            raise WeightShapeError(f"{path}: layer {i}: {exc}") from exc
        w = cur.f32(int(np.prod(spec.weight_shape)), spec.weight_shape)
        b = cur.f32(cout, (cout,))
        layers.append((spec, w, b))
    if cur.pos != len(blob):
        raise WeightShapeError(f"{path}: {len(blob) - cur.pos} trailing bytes after last layer")
    try:
        return NetworkWeights(plan, layers)
    except ValueError as exc:
        raise WeightShapeError(f"{path}: {exc}") from exc
