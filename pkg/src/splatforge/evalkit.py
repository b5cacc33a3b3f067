"""Quality metrics, analytic test scenes, and hole diagnostics.

Scenes pair a seeded point sampling of an analytic surface with a pure
callback that ray-casts the same surface for any camera, so rendered output
can be scored against exact RGB, normals, and silhouettes. The point baseline
render_1px_points projects each point to a single z-buffered pixel.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussians import Camera, Z_NEAR
from .pcio import PointCloud
from .rasterizer import FrameBuffer

SCENE_KINDS = ("checker_sphere", "checker_plane", "two_box")

# Canonical multi-scale structural similarity constants.
_MS_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
_WINDOW = 11
_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_MIN_DIM = _WINDOW * 2 ** (len(_MS_WEIGHTS) - 1)      # 176

_CHECKER_A = np.array([0.92, 0.88, 0.80])
_CHECKER_B = np.array([0.12, 0.22, 0.35])

_SPHERE_RADIUS = 1.0
_SPHERE_CELL = 1.0    # octant coloring: only the coordinate planes cut r=1
_PLANE_Z = 2.5
_PLANE_EXTENT = 1.0
_BOX_CELL = 0.4
# center, half-extents per box; faces avoid checker cell boundaries
_BOXES = (
    (np.array([-0.55, 0.0, 2.5]), np.array([0.35, 0.35, 0.35])),
    (np.array([0.55, 0.15, 2.9]), np.array([0.30, 0.45, 0.30])),
)


@dataclass(eq=False)
class MetricReport:
    """One scored view; psnr_db is math.inf (serialized "inf") when exact."""

    psnr_db: float
    ms_ssim: float
    hole_ratio: float
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        psnr = "inf" if np.isinf(self.psnr_db) else self.psnr_db
        return json.dumps({"psnr_db": psnr, "ms_ssim": self.ms_ssim,
                           "hole_ratio": self.hole_ratio,
                           "metadata": self.metadata})


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) over all pixels and channels; inf when identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.square(a - b).mean()
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel() -> np.ndarray:
    x = np.arange(_WINDOW, dtype=np.float64) - (_WINDOW - 1) / 2.0
    g = np.exp(-0.5 * (x / _SIGMA) ** 2)
    return g / g.sum()


def _blur_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation (exact sums, no FFT)."""
    k = len(kernel)
    h, w = img.shape
    tmp = np.zeros((h, w - k + 1))
    for i, g in enumerate(kernel):
        tmp += g * img[:, i:w - k + 1 + i]
    out = np.zeros((h - k + 1, w - k + 1))
    for i, g in enumerate(kernel):
        out += g * tmp[i:h - k + 1 + i]
    return out


def _halve(img: np.ndarray) -> np.ndarray:
    """2x2 mean downsample; odd dims are reflect-padded to even first."""
    h, w = img.shape
    if h % 2:
        img = np.concatenate([img, img[-1:]], axis=0)
    if w % 2:
        img = np.concatenate([img, img[:, -1:]], axis=1)
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] +
                   img[0::2, 1::2] + img[1::2, 1::2])


def _ssim_maps(x: np.ndarray, y: np.ndarray, kernel: np.ndarray):
    c1 = _K1 ** 2
    c2 = _K2 ** 2
    mx = _blur_valid(x, kernel)
    my = _blur_valid(y, kernel)
    vx = _blur_valid(x * x, kernel) - mx * mx
    vy = _blur_valid(y * y, kernel) - my * my
    cov = _blur_valid(x * y, kernel) - mx * my
    luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    contrast = (2.0 * cov + c2) / (vx + vy + c2)
    return luminance, contrast


def ms_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Multi-scale structural similarity, luminance on the final scale only.

    Per channel: four contrast-structure means over dyadic scales plus the
    full SSIM mean at the coarsest, combined as a weighted geometric mean
    (negative means clamped to zero first); channels averaged at the end.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError("ms_ssim expects (height, width, 3) images")
    if min(a.shape[:2]) < _MIN_DIM:
        raise ValueError(f"ms_ssim needs min(height, width) >= {_MIN_DIM}, "
                         f"got {min(a.shape[:2])}")
    kernel = _gaussian_kernel()
    weights = np.asarray(_MS_WEIGHTS)
    values = np.zeros(3)
    for ch in range(3):
        x, y = a[:, :, ch], b[:, :, ch]
        factors = np.zeros(len(weights))
        for scale in range(len(weights)):
            luminance, contrast = _ssim_maps(x, y, kernel)
            if scale < len(weights) - 1:
                factors[scale] = contrast.mean()
                x, y = _halve(x), _halve(y)
            else:
                factors[scale] = (luminance * contrast).mean()
        values[ch] = np.prod(np.maximum(factors, 0.0) ** weights)
    return float(values.mean())


def hole_ratio(fb: FrameBuffer, silhouette: np.ndarray) -> float:
    """Fraction of silhouette pixels the background leaks through (T > 0.5)."""
    silhouette = np.asarray(silhouette, dtype=bool)
    if silhouette.shape != fb.transmittance.shape:
        raise ValueError(f"silhouette shape {silhouette.shape} does not match "
                         f"frame {fb.transmittance.shape}")
    inside = int(silhouette.sum())
    if inside == 0:
        return 0.0
    return float((fb.transmittance[silhouette] > 0.5).sum() / inside)


@dataclass(eq=False)
class ReferenceFrame:
    """Exact ray-cast planes: rgb with background, zero-filled normals
    outside the silhouette."""

    rgb: np.ndarray
    normal: np.ndarray
    silhouette: np.ndarray


def _checker_colors(points: np.ndarray, cell: float) -> np.ndarray:
    parity = np.floor(points / cell).astype(np.int64).sum(axis=-1) & 1
    return np.where(parity[..., None] == 0, _CHECKER_A, _CHECKER_B)


def _camera_rays(cam: Camera):
    ix, iy = np.meshgrid(np.arange(cam.width), np.arange(cam.height))
    dirs = np.stack([(ix - cam.cx) / cam.fx, (iy - cam.cy) / cam.fy,
                     np.ones_like(ix, dtype=np.float64)], axis=-1)
    origin = -cam.rotation.T @ cam.translation
    return origin, dirs @ cam.rotation


def _hit_points(origin, dirs, t, hit):
    return origin + np.where(hit, t, 0.0)[..., None] * dirs


def _reference_frame(origin, dirs, t, normals, cell, background) -> ReferenceFrame:
    hit = np.isfinite(t) & (t > Z_NEAR)
    points = _hit_points(origin, dirs, t, hit)
    rgb = np.tile(np.asarray(background, dtype=np.float64), t.shape + (1,))
    rgb[hit] = _checker_colors(points[hit], cell)
    normal = np.zeros(t.shape + (3,))
    normal[hit] = normals[hit]
    return ReferenceFrame(rgb, normal, hit)


def _sphere_callback(cam: Camera, background=(0.0, 0.0, 0.0)) -> ReferenceFrame:
    origin, dirs = _camera_rays(cam)
    dd = (dirs * dirs).sum(axis=-1)
    b = (dirs * origin).sum(axis=-1) / dd
    c = (origin @ origin - _SPHERE_RADIUS ** 2) / dd
    disc = b * b - c
    t = np.full(dd.shape, np.inf)
    ok = disc >= 0.0
    t[ok] = -b[ok] - np.sqrt(disc[ok])
    hit = np.isfinite(t) & (t > Z_NEAR)
    normals = _hit_points(origin, dirs, t, hit) / _SPHERE_RADIUS
    return _reference_frame(origin, dirs, t, normals, _SPHERE_CELL, background)


def _plane_callback(cam: Camera, background=(0.0, 0.0, 0.0)) -> ReferenceFrame:
    origin, dirs = _camera_rays(cam)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (_PLANE_Z - origin[2]) / dirs[..., 2]
    forward = np.isfinite(t) & (t > 0.0)
    points = _hit_points(origin, dirs, t, forward)
    on_square = forward & (np.abs(points[..., 0]) <= _PLANE_EXTENT) & \
        (np.abs(points[..., 1]) <= _PLANE_EXTENT)
    t = np.where(on_square, t, np.inf)
    normals = np.tile([0.0, 0.0, -1.0], t.shape + (1,))
    return _reference_frame(origin, dirs, t, normals, _BOX_CELL, background)


def _box_callback(cam: Camera, background=(0.0, 0.0, 0.0)) -> ReferenceFrame:
    origin, dirs = _camera_rays(cam)
    best_t = np.full(dirs.shape[:2], np.inf)
    best_n = np.zeros(dirs.shape)
    for center, half in _BOXES:
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (center - half - origin) / dirs
            t2 = (center + half - origin) / dirs
        near = np.minimum(t1, t2)
        far = np.maximum(t1, t2)
        t_in = near.max(axis=-1)
        t_out = far.min(axis=-1)
        axis = near.argmax(axis=-1)
        hit = (t_out >= t_in) & (t_in > 0.0) & (t_in < best_t)
        sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
        normal = np.zeros(dirs.shape)
        np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
        best_t = np.where(hit, t_in, best_t)
        best_n = np.where(hit[..., None], normal, best_n)
    return _reference_frame(origin, dirs, best_t, best_n, _BOX_CELL, background)


def _sample_sphere(rng, n):
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    points = _SPHERE_RADIUS * u
    return points, u.copy(), _SPHERE_CELL


def _sample_plane(rng, n):
    xy = rng.uniform(-_PLANE_EXTENT, _PLANE_EXTENT, size=(n, 2))
    points = np.column_stack([xy, np.full(n, _PLANE_Z)])
    normals = np.tile([0.0, 0.0, -1.0], (n, 1))
    return points, normals, _BOX_CELL


def _sample_boxes(rng, n):
    # face picked proportional to area: per box the 6 faces in axis pairs
    areas = []
    faces = []
    for center, half in _BOXES:
        for axis in range(3):
            u_axis, v_axis = [i for i in range(3) if i != axis]
            area = 4.0 * half[u_axis] * half[v_axis]
            for side in (-1.0, 1.0):
                areas.append(area)
                faces.append((center, half, axis, side, u_axis, v_axis))
    areas = np.asarray(areas)
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    coords = rng.uniform(-1.0, 1.0, size=(n, 2))
    points = np.zeros((n, 3))
    normals = np.zeros((n, 3))
    for f, (center, half, axis, side, u_axis, v_axis) in enumerate(faces):
        rows = pick == f
        points[rows, axis] = center[axis] + side * half[axis]
        points[rows, u_axis] = center[u_axis] + coords[rows, 0] * half[u_axis]
        points[rows, v_axis] = center[v_axis] + coords[rows, 1] * half[v_axis]
        normals[rows, axis] = side
    return points, normals, _BOX_CELL


_SCENES = {
    "checker_sphere": (_sample_sphere, _sphere_callback),
    "checker_plane": (_sample_plane, _plane_callback),
    "two_box": (_sample_boxes, _box_callback),
}


def make_scene(kind: str, n_points: int, seed: int):
    """Seeded surface sampling plus the exact ray-cast callback for scoring.

    Returns (PointCloud with analytic normals and checker colors, callback);
    callback(camera, background) -> ReferenceFrame.
    """
    if kind not in _SCENES:
        raise ValueError(f"unknown scene kind '{kind}'; expected one of {SCENE_KINDS}")
    if n_points < 100:
        raise ValueError(f"scene needs at least 100 points, got {n_points}")
    sampler, callback = _SCENES[kind]
    points, normals, cell = sampler(np.random.default_rng(seed), n_points)
    cloud = PointCloud(points, _checker_colors(points, cell), normals)
    return cloud, callback


def render_1px_points(cloud: PointCloud, cam: Camera,
                      background=(0.0, 0.0, 0.0)) -> FrameBuffer:
    """Each point as one z-buffered pixel; nearest depth wins, input order
    breaks exact ties."""
    background = np.asarray(background, dtype=np.float64).reshape(3)
    rgb = np.tile(background, (cam.height, cam.width, 1))
    trans = np.ones((cam.height, cam.width))
    p_cam = cloud.positions @ cam.rotation.T + cam.translation
    z = p_cam[:, 2]
    ix = np.rint(cam.fx * p_cam[:, 0] / np.where(z > Z_NEAR, z, 1.0) + cam.cx)
    iy = np.rint(cam.fy * p_cam[:, 1] / np.where(z > Z_NEAR, z, 1.0) + cam.cy)
    keep = (z > Z_NEAR) & (ix >= 0) & (ix < cam.width) & (iy >= 0) & (iy < cam.height)
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, z[idx]))]
    keys = (iy[order].astype(np.int64) * cam.width + ix[order].astype(np.int64))
    unique_keys, first = np.unique(keys, return_index=True)
    rgb.reshape(-1, 3)[unique_keys] = cloud.colors[order[first]]
    trans.reshape(-1)[unique_keys] = 0.0
    return FrameBuffer(cam.width, cam.height, rgb, trans, background)
