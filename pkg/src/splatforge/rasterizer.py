"""Tile-based forward splatting, the brute-force reference path, late-shading
relight, and the analytic backward pass.

The tiled path and `render_reference` implement the same blending contract:
front-to-back over camera depth (ties by input index), alpha clamped to
alpha_max, per-pixel skip below 1/255. Early termination at transmittance
1/255 exists only in the tiled path and is switchable for oracle comparisons.
"""
from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _raster_kernels as _k
from .gaussians import ALPHA_MAX, COV_DILATION, Camera, Splats, Z_NEAR, project, quat_to_rotmat

PLANE_MAGIC = b"FBF1"
_MODES = ("rgb", "normal", "depth")


@dataclass
class RenderOptions:
    tile_size: int = 16
    alpha_max: float = ALPHA_MAX
    early_termination: bool = True


@dataclass(eq=False)
class FrameBuffer:
    """Output planes of one render; transmittance is the residual T_final."""

    width: int
    height: int
    rgb: np.ndarray
    transmittance: np.ndarray
    background: np.ndarray
    normal: np.ndarray = None
    depth: np.ndarray = None

    def __post_init__(self):
        shape = (self.height, self.width)
        if self.rgb.shape != shape + (3,):
            raise ValueError("rgb plane must be (height, width, 3)")
        if self.transmittance.shape != shape:
            raise ValueError("transmittance plane must match image dimensions")
        for plane in (self.normal, self.depth):
            if plane is not None and plane.shape[:2] != shape:
                raise ValueError("all planes must share dimensions")
        if self.transmittance.min() < -1e-9 or self.transmittance.max() > 1.0 + 1e-9:
            raise ValueError("transmittance out of [0, 1]")
        np.clip(self.transmittance, 0.0, 1.0, out=self.transmittance)


@dataclass(eq=False)
class RenderGradients:
    """Loss partials per input splat; culled splats hold zeros."""

    d_centers: np.ndarray
    d_scales: np.ndarray
    d_quaternions: np.ndarray
    d_opacities: np.ndarray
    d_colors: np.ndarray
    d_normals: np.ndarray


@dataclass(eq=False)
class _Prepared:
    """Depth-sorted screen-space scene shared by forward and backward."""

    source: np.ndarray          # (K,) original splat indices, blend order
    sx: np.ndarray
    sy: np.ndarray
    depth: np.ndarray
    cov: np.ndarray             # (K, 3) packed a, b, c
    inv: np.ndarray             # (K, 3) packed inverse
    opac: np.ndarray
    attr: np.ndarray            # (K, 3) blended attribute for the mode
    radius: np.ndarray          # (K,) alpha-cutoff support radius, pixels
    offsets: np.ndarray
    ids: np.ndarray
    ntx: int
    nty: int


def _mode_attr(splats: Splats, mode: str, depth: np.ndarray, source: np.ndarray) -> np.ndarray:
    if mode == "rgb":
        return np.ascontiguousarray(splats.colors[source])
    if mode == "normal":
        return np.ascontiguousarray(splats.normals[source])
    attr = np.zeros((source.shape[0], 3), dtype=np.float64)
    attr[:, 0] = depth
    return attr


def _prepare(splats: Splats, cam: Camera, mode: str, options: RenderOptions) -> _Prepared:
    sx, sy, depth, ca, cb, cc, _, keep = _k.project_kernel(
        splats.centers, splats.quaternions, splats.scales,
        cam.rotation, cam.translation, cam.fx, cam.fy, cam.cx, cam.cy,
        cam.width, cam.height, Z_NEAR, COV_DILATION)
    kept = np.nonzero(keep)[0]
    order = np.argsort(depth[kept], kind="stable")   # ties keep input order
    source = kept[order]

    sx = sx[source]
    sy = sy[source]
    depth = depth[source]
    cov = np.stack([ca[source], cb[source], cc[source]], axis=1)
    det = cov[:, 0] * cov[:, 2] - cov[:, 1] ** 2
    inv = np.stack([cov[:, 2] / det, -cov[:, 1] / det, cov[:, 0] / det], axis=1)

    # bin by the full alpha >= 1/255 support, not the 3-sigma radius: the
    # reference contract skips only below the cutoff, and for opacity above
    # exp(-4.5)*255 that ring lies outside 3 sigma
    opac = np.ascontiguousarray(splats.opacities[source])
    mid = 0.5 * (cov[:, 0] + cov[:, 2])
    gap = np.sqrt(np.maximum(0.25 * (cov[:, 0] - cov[:, 2]) ** 2 + cov[:, 1] ** 2, 0.0))
    lam_max = np.maximum(mid + gap, 0.0)
    support = 2.0 * np.log(np.maximum(255.0 * opac, 1e-300))
    radius = np.sqrt(np.maximum(support, 0.0) * lam_max) + 1e-9

    ntx = -(-cam.width // options.tile_size)
    nty = -(-cam.height // options.tile_size)
    offsets, ids = _k.bin_tiles(sx, sy, radius, options.tile_size, ntx, nty)
    return _Prepared(source, sx, sy, depth, cov, inv, opac,
                     _mode_attr(splats, mode, depth, source), radius,
                     offsets, ids, ntx, nty)


def _check_render_args(cam: Camera, mode: str):
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}, got {mode!r}")
    if cam.width < 1 or cam.height < 1:
        raise ValueError("image must have positive dimensions")


def _compose(out: np.ndarray, trans: np.ndarray, mode: str,
             background: np.ndarray, width: int, height: int) -> FrameBuffer:
    fb = dict(width=width, height=height, transmittance=trans, background=background)
    if mode == "rgb":
        return FrameBuffer(rgb=out + trans[:, :, None] * background, **fb)
    if mode == "normal":
        norms = np.linalg.norm(out, axis=2, keepdims=True)
        normal = np.divide(out, norms, out=np.zeros_like(out), where=norms > 0.0)
        return FrameBuffer(rgb=np.zeros_like(out), normal=normal, **fb)
    return FrameBuffer(rgb=np.zeros_like(out), depth=out[:, :, 0].copy(), **fb)


def render(splats: Splats, cam: Camera, mode: str = "rgb",
           background=(0.0, 0.0, 0.0), options: RenderOptions = None) -> FrameBuffer:
    """Tiled front-to-back splatting; see module docstring for the contract."""
    _check_render_args(cam, mode)
    options = options or RenderOptions()
    background = np.asarray(background, dtype=np.float64).reshape(3)
    prep = _prepare(splats, cam, mode, options)
    out = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    trans = np.ones((cam.height, cam.width), dtype=np.float64)
    _k.forward_kernel(cam.width, cam.height, options.tile_size, prep.ntx, prep.nty,
                      prep.offsets, prep.ids, prep.sx, prep.sy, prep.radius,
                      prep.inv[:, 0], prep.inv[:, 1], prep.inv[:, 2],
                      prep.opac, prep.attr, options.alpha_max,
                      options.early_termination, out, trans)
    return _compose(out, trans, mode, background, cam.width, cam.height)


def render_reference(splats: Splats, cam: Camera, mode: str = "rgb",
                     background=(0.0, 0.0, 0.0), options: RenderOptions = None) -> FrameBuffer:
    """Per-pixel blend over every projected splat; the correctness oracle.

    No tiling and no early termination; alpha clamp and the 1/255 skip match
    the tiled path.
    """
    _check_render_args(cam, mode)
    options = options or RenderOptions()
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project(splats, cam)
    order = np.lexsort((proj.source_index, proj.depths))

    xs, ys = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                         np.arange(cam.height, dtype=np.float64))
    out = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    trans = np.ones((cam.height, cam.width), dtype=np.float64)
    if mode == "rgb":
        attrs = proj.colors
    elif mode == "normal":
        attrs = proj.normals
    else:
        attrs = np.zeros((len(proj), 3))
        attrs[:, 0] = proj.depths

    for row in order:
        a, b = proj.screen_covs[row, 0, 0], proj.screen_covs[row, 0, 1]
        c = proj.screen_covs[row, 1, 1]
        det = a * c - b * b
        dx = xs - proj.screen_centers[row, 0]
        dy = ys - proj.screen_centers[row, 1]
        q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
        alpha = np.minimum(proj.opacities[row] * np.exp(-0.5 * q), options.alpha_max)
        live = alpha >= _k.ALPHA_CUTOFF
        w = np.where(live, trans * alpha, 0.0)
        out += w[:, :, None] * attrs[row]
        trans = np.where(live, trans * (1.0 - alpha), trans)
    return _compose(out, trans, mode, background, cam.width, cam.height)


def relight(normal_fb: FrameBuffer, rgb_fb: FrameBuffer, light_dir,
            ambient: float, diffuse: float) -> np.ndarray:
    """Lambertian late shading: rgb * (ambient + diffuse * max(0, n.l)).

    Background pixels (T_final > 0.999) pass through untouched; output is
    clamped to [0, 1].
    """
    if normal_fb.normal is None:
        raise ValueError("normal_fb must carry a normal plane")
    if (normal_fb.width, normal_fb.height) != (rgb_fb.width, rgb_fb.height):
        raise ValueError("frame buffers must share dimensions")
    light = np.asarray(light_dir, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise ValueError("light_dir must be unit length")
    lambert = np.maximum(normal_fb.normal @ light, 0.0)
    shaded = rgb_fb.rgb * (ambient + diffuse * lambert)[:, :, None]
    passthrough = (rgb_fb.transmittance > 0.999)[:, :, None]
    return np.clip(np.where(passthrough, rgb_fb.rgb, shaded), 0.0, 1.0)


def render_backward(splats: Splats, cam: Camera, upstream: np.ndarray,
                    mode: str = "rgb", background=(0.0, 0.0, 0.0),
                    options: RenderOptions = None) -> RenderGradients:
    """Analytic gradients of render() w.r.t. every splat parameter.

    upstream is dL/d(output plane): (H, W, 3) for rgb and normal modes,
    (H, W) for depth. Clamped alphas and sub-1/255 contributions are
    zero-gradient zones, matching the forward contract exactly.
    """
    _check_render_args(cam, mode)
    options = options or RenderOptions()
    background = np.asarray(background, dtype=np.float64).reshape(3)
    if mode == "depth":
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape == (cam.height, cam.width):
            lifted = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
            lifted[:, :, 0] = upstream
            upstream = lifted
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ValueError("upstream shape must match the rendered plane")

    prep = _prepare(splats, cam, mode, options)
    k = len(prep.source)
    entries = prep.ids.shape[0]
    g_mu = np.zeros((entries, 2), dtype=np.float64)
    g_q = np.zeros((entries, 3), dtype=np.float64)
    g_opac = np.zeros(entries, dtype=np.float64)
    g_attr = np.zeros((entries, 3), dtype=np.float64)
    mode_id = _MODES.index(mode)
    _k.backward_kernel(cam.width, cam.height, options.tile_size, prep.ntx, prep.nty,
                       prep.offsets, prep.ids, prep.sx, prep.sy,
                       prep.inv[:, 0], prep.inv[:, 1], prep.inv[:, 2],
                       prep.opac, prep.attr, options.alpha_max,
                       options.early_termination, mode_id, background, upstream,
                       g_mu, g_q, g_opac, g_attr)

    # deterministic entry -> splat reduction (np.add.at is sequential)
    d_mu = np.zeros((k, 2))
    d_qf = np.zeros((k, 3))
    d_op = np.zeros(k)
    d_at = np.zeros((k, 3))
    np.add.at(d_mu, prep.ids, g_mu)
    np.add.at(d_qf, prep.ids, g_q)
    np.add.at(d_op, prep.ids, g_opac)
    np.add.at(d_at, prep.ids, g_attr)

    n = len(splats)
    grads = RenderGradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                            np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)))
    if k == 0:
        return grads
    src = prep.source

    # inverse-covariance form -> screen covariance
    inv_m = np.empty((k, 2, 2))
    inv_m[:, 0, 0] = prep.inv[:, 0]
    inv_m[:, 0, 1] = inv_m[:, 1, 0] = prep.inv[:, 1]
    inv_m[:, 1, 1] = prep.inv[:, 2]
    g_inv = np.empty((k, 2, 2))
    g_inv[:, 0, 0] = d_qf[:, 0]
    g_inv[:, 0, 1] = g_inv[:, 1, 0] = 0.5 * d_qf[:, 1]
    g_inv[:, 1, 1] = d_qf[:, 2]
    g_cov = -np.einsum("kij,kjl,klm->kim", inv_m, g_inv, inv_m)

    # screen covariance -> world covariance and camera point through J
    p_cam = splats.centers[src] @ cam.rotation.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    jac = np.zeros((k, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    a2 = jac @ cam.rotation
    g_s3 = np.einsum("kji,kjl,klm->kim", a2, g_cov, a2)

    quats = splats.quaternions[src]
    scales = splats.scales[src]
    rot = quat_to_rotmat(quats)
    sigma3 = np.einsum("kji,kj,kjl->kil", rot, scales * scales, rot)
    m_cam = np.einsum("ij,kjl,ml->kim", cam.rotation, sigma3, cam.rotation)
    g_jac = 2.0 * np.einsum("kij,kjl,klm->kim", g_cov, jac, m_cam)

    d_pcam = np.zeros((k, 3))
    d_pcam[:, 0] = g_jac[:, 0, 2] * (-cam.fx / (z * z))
    d_pcam[:, 1] = g_jac[:, 1, 2] * (-cam.fy / (z * z))
    d_pcam[:, 2] = (g_jac[:, 0, 0] * (-cam.fx / (z * z))
                    + g_jac[:, 0, 2] * (2.0 * cam.fx * x / z ** 3)
                    + g_jac[:, 1, 1] * (-cam.fy / (z * z))
                    + g_jac[:, 1, 2] * (2.0 * cam.fy * y / z ** 3))
    d_pcam[:, 0] += d_mu[:, 0] * cam.fx / z
    d_pcam[:, 1] += d_mu[:, 1] * cam.fy / z
    d_pcam[:, 2] += d_mu[:, 0] * (-cam.fx * x / (z * z)) + d_mu[:, 1] * (-cam.fy * y / (z * z))
    if mode == "depth":
        d_pcam[:, 2] += d_at[:, 0]
    grads.d_centers[src] = d_pcam @ cam.rotation

    # world covariance -> scales and quaternion (through normalization)
    g_d = np.einsum("kij,kjl,kml->kim", rot, g_s3, rot)
    grads.d_scales[src] = 2.0 * scales * np.stack(
        [g_d[:, 0, 0], g_d[:, 1, 1], g_d[:, 2, 2]], axis=1)
    g_r = 2.0 * (scales * scales)[:, :, None] * (rot @ g_s3)

    qn = np.linalg.norm(quats, axis=1, keepdims=True)
    w, qx, qy, qz = (quats / qn).T
    zero = np.zeros(k)
    drdq = np.empty((k, 4, 3, 3))
    drdq[:, 0] = 2.0 * np.stack([zero, -qz, qy, qz, zero, -qx, -qy, qx, zero],
                                axis=1).reshape(k, 3, 3)
    drdq[:, 1] = 2.0 * np.stack([zero, qy, qz, qy, -2 * qx, -w, qz, w, -2 * qx],
                                axis=1).reshape(k, 3, 3)
    drdq[:, 2] = 2.0 * np.stack([-2 * qy, qx, w, qx, zero, qz, -w, qz, -2 * qy],
                                axis=1).reshape(k, 3, 3)
    drdq[:, 3] = 2.0 * np.stack([-2 * qz, -w, qx, w, -2 * qz, qy, qx, qy, zero],
                                axis=1).reshape(k, 3, 3)
    d_qhat = np.einsum("kij,kqij->kq", g_r, drdq)
    qhat = quats / qn
    grads.d_quaternions[src] = (d_qhat - qhat * np.sum(qhat * d_qhat, axis=1,
                                                       keepdims=True)) / qn

    grads.d_opacities[src] = d_op
    if mode == "rgb":
        grads.d_colors[src] = d_at
    elif mode == "normal":
        grads.d_normals[src] = d_at
    return grads


def bench_render(splats: Splats, cam: Camera, iterations: int,
                 mode: str = "rgb", background=(0.0, 0.0, 0.0),
                 options: RenderOptions = None) -> dict:
    """Wall-clock render latency over `iterations` runs after one warmup."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    render(splats, cam, mode, background, options)   # warmup, compiles kernels
    samples = np.empty(iterations)
    for i in range(iterations):
        start = time.perf_counter()
        render(splats, cam, mode, background, options)
        samples[i] = (time.perf_counter() - start) * 1e3
    pixels = cam.width * cam.height
    mean_ms = float(samples.mean())
    return {
        "mean_ms": mean_ms,
        "p50_ms": float(np.percentile(samples, 50)),
        "p99_ms": float(np.percentile(samples, 99)),
        "pixels": pixels,
        "mpix_per_s": pixels / mean_ms / 1e3,
    }


def save_png(fb: FrameBuffer, path, plane: str = "rgb",
             include_alpha: bool = False) -> None:
    """8-bit PNG of the rgb plane, or of normals mapped to (n + 1) / 2."""
    if plane == "rgb":
        img = fb.rgb
    elif plane == "normal":
        if fb.normal is None:
            raise ValueError("frame buffer has no normal plane")
        img = fb.normal * 0.5 + 0.5
    else:
        raise ValueError("plane must be rgb or normal")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    if include_alpha:
        alpha = np.clip(np.rint((1.0 - fb.transmittance) * 255.0), 0, 255).astype(np.uint8)
        data = np.concatenate([data, alpha[:, :, None]], axis=2)
    Image.fromarray(data, "RGBA" if include_alpha else "RGB").save(path)


def save_plane(path, plane: np.ndarray) -> None:
    """Raw float32 dump: magic FBF1, u32 width, u32 height, u8 channels, LE."""
    plane = np.asarray(plane)
    if plane.ndim == 2:
        plane = plane[:, :, None]
    if plane.ndim != 3 or plane.shape[2] > 255:
        raise ValueError("plane must be (H, W) or (H, W, C<=255)")
    h, w, c = plane.shape
    with open(path, "wb") as fh:
        fh.write(PLANE_MAGIC)
        fh.write(struct.pack("<IIB", w, h, c))
        fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def load_plane(path) -> np.ndarray:
    """Read an FBF1 dump; returns float32 (H, W) or (H, W, C)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != PLANE_MAGIC:
        raise ValueError(f"{path}: not a plane dump (bad magic)")
    w, h, c = struct.unpack("<IIB", blob[4:13])
    if len(blob) != 13 + w * h * c * 4:
        raise ValueError(f"{path}: truncated plane payload")
    plane = np.frombuffer(blob, dtype="<f4", offset=13).reshape(h, w, c)
    return plane[:, :, 0] if c == 1 else plane
