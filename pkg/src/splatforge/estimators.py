"""Point cloud -> splat estimators: global isotropic, local PCA, and neural.

All three emit one splat per input point with the point's color copied
verbatim; they differ only in how covariance, opacity, and normals are chosen.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._neighbors import mean_nn_distance, nearest_neighbors
from .gaussians import Splats, rotmat_to_quat
from .pcio import DegenerateCloudError, PointCloud
from .sparsenet import NetworkPlan, NetworkWeights, activate_head, init_random, load_weights, unet_forward
from .voxelgrid import voxelize_adaptive

ESTIMATOR_KINDS = ("global_isotropic", "local_pca", "neural")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "local_pca"
    sigma_multiplier: float = 1.5
    k_neighbors: int = 16
    weights_path: str = None
    default_opacity: float = 1.0

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind '{self.kind}'")
        if self.sigma_multiplier <= 0:
            raise ValueError("sigma_multiplier must be positive")
        if self.k_neighbors < 4:
            raise ValueError("k_neighbors must be at least 4")
        if not 0.0 <= self.default_opacity <= 1.0:
            raise ValueError("default_opacity must lie in [0, 1]")


def symeig3x3(mats: np.ndarray) -> tuple:
    """Eigenvalues (ascending) and row-stacked eigenvector frames of symmetric
    3x3 batches, by the trigonometric closed form.

    Returns ((N, 3) eigenvalues, (N, 3, 3) right-handed orthonormal frames with
    row i the eigenvector of eigenvalue i). Repeated eigenvalues get a
    deterministic basis of their eigenspace.
    """
    a = np.ascontiguousarray(mats, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    n = a.shape[0]
    scale = np.abs(a).max(axis=(1, 2))
    s = np.where(scale > 0, scale, 1.0)
    a = a / s[:, None, None]

    a00, a11, a22 = a[:, 0, 0], a[:, 1, 1], a[:, 2, 2]
    a01, a02, a12 = a[:, 0, 1], a[:, 0, 2], a[:, 1, 2]
    off = a01 ** 2 + a02 ** 2 + a12 ** 2
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * off
    p = np.sqrt(np.maximum(p2 / 6.0, 0.0))
    safe_p = np.where(p > 0, p, 1.0)
    b = (a - q[:, None, None] * np.eye(3)) / safe_p[:, None, None]
    det_b = (b[:, 0, 0] * (b[:, 1, 1] * b[:, 2, 2] - b[:, 1, 2] ** 2)
             - b[:, 0, 1] * (b[:, 0, 1] * b[:, 2, 2] - b[:, 1, 2] * b[:, 0, 2])
             + b[:, 0, 2] * (b[:, 0, 1] * b[:, 1, 2] - b[:, 1, 1] * b[:, 0, 2]))
    phi = np.arccos(np.clip(det_b / 2.0, -1.0, 1.0)) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    lam = np.stack([lo, mid, hi], axis=1)

    # primary eigenvector: the extreme eigenvalue farther from the middle one
    # (best separated, so the cross-row construction is stable)
    hi_primary = (hi - mid) >= (mid - lo)
    lam_p = np.where(hi_primary, hi, lo)
    lam_s = np.where(hi_primary, lo, hi)
    v_p, ok_p = _cross_row_eigvec(a, lam_p)
    v_s, ok_s = _cross_row_eigvec(a, lam_s)

    # triple degeneracy: no separated direction at all, any frame diagonalizes
    v_p = np.where(ok_p[:, None], v_p, np.array([1.0, 0.0, 0.0]))
    v_s = v_s - np.sum(v_s * v_p, axis=1, keepdims=True) * v_p
    s_norm = np.linalg.norm(v_s, axis=1)
    v_s = np.where((ok_s & (s_norm > 1e-8))[:, None],
                   v_s / np.maximum(s_norm, 1e-300)[:, None],
                   _any_perpendicular(v_p))

    frames = np.empty((n, 3, 3))
    rows_hi = np.where(hi_primary[:, None], v_p, v_s)
    rows_lo = np.where(hi_primary[:, None], v_s, v_p)
    frames[:, 2] = rows_hi
    frames[:, 0] = rows_lo
    frames[:, 1] = np.cross(frames[:, 2], frames[:, 0])

    # exactly diagonal input: sorted diagonal beats the trig formula's
    # sqrt(eps) error at repeated eigenvalues, and the frame is a permutation
    diag = off == 0.0
    if diag.any():
        d_vals = np.stack([a00[diag], a11[diag], a22[diag]], axis=1)
        order = np.argsort(d_vals, axis=1, kind="stable")
        lam[diag] = np.take_along_axis(d_vals, order, axis=1)
        perm = np.zeros((diag.sum(), 3, 3))
        rows = np.arange(diag.sum())
        perm[rows, 0, order[:, 0]] = 1.0
        perm[rows, 2, order[:, 2]] = 1.0
        perm[:, 1] = np.cross(perm[:, 2], perm[:, 0])
        frames[diag] = perm
    return lam * s[:, None], frames


def _cross_row_eigvec(a: np.ndarray, lam: np.ndarray) -> tuple:
    """Unit null vector of a - lam*I via the largest cross product of its rows."""
    b = a - lam[:, None, None] * np.eye(3)
    crosses = np.stack([
        np.cross(b[:, 0], b[:, 1]),
        np.cross(b[:, 0], b[:, 2]),
        np.cross(b[:, 1], b[:, 2]),
    ], axis=1)
    norms = np.linalg.norm(crosses, axis=2)
    pick = norms.argmax(axis=1)
    rows = np.arange(a.shape[0])
    best = crosses[rows, pick]
    best_norm = norms[rows, pick]
    ok = best_norm > 1e-12
    return best / np.maximum(best_norm, 1e-300)[:, None], ok


def _any_perpendicular(v: np.ndarray) -> np.ndarray:
    """A deterministic unit vector orthogonal to each row of v."""
    axis = np.abs(v).argmin(axis=1)
    e = np.zeros_like(v)
    e[np.arange(v.shape[0]), axis] = 1.0
    w = e - np.sum(e * v, axis=1, keepdims=True) * v
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def _cloud_normals(cloud: PointCloud) -> np.ndarray:
    if cloud.normals is not None:
        return cloud.normals.copy()
    out = np.zeros((len(cloud), 3))
    out[:, 2] = 1.0
    return out


def estimate_global(cloud: PointCloud, cfg: EstimatorConfig) -> Splats:
    """One isotropic splat per point, sized by the mean nearest-neighbor distance."""
    n = len(cloud)
    if n < 2:
        raise ValueError("global estimation needs at least 2 points")
    d_bar = mean_nn_distance(cloud.positions)
    if d_bar == 0.0:
        raise DegenerateCloudError("all points coincident; density scale is zero")
    sigma = cfg.sigma_multiplier * d_bar
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return Splats(
        centers=cloud.positions.copy(),
        scales=np.full((n, 3), sigma),
        quaternions=quats,
        opacities=np.full(n, float(cfg.default_opacity)),
        colors=cloud.colors.copy(),
        normals=_cloud_normals(cloud),
    )


def estimate_local_pca(cloud: PointCloud, cfg: EstimatorConfig) -> Splats:
    """Anisotropic splats from the covariance of each point's k nearest neighbors.

    Frame rows are the eigenvectors in ascending eigenvalue order, signs fixed
    by the largest-component-positive rule on the first two rows and a cross
    product for the third. Scales are sigma_multiplier * sqrt(eigenvalue),
    clamped below at 0.1 * d-bar; the stored normal is the smallest-eigenvalue
    direction flipped away from the cloud centroid.
    """
    n = len(cloud)
    k = cfg.k_neighbors
    if n < k + 1:
        raise ValueError(f"local PCA needs at least {k + 1} points, got {n}")
    d2, idx = nearest_neighbors(cloud.positions, k)
    d_bar = float(np.sqrt(d2[:, 0]).mean())
    if d_bar == 0.0:
        raise DegenerateCloudError("all points coincident; density scale is zero")

    neigh = cloud.positions[idx]                       # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    lam, frames = symeig3x3(cov)

    # deterministic signs: largest-|component|-positive on the first two rows
    for row in (0, 1):
        v = frames[:, row]
        lead = v[np.arange(n), np.abs(v).argmax(axis=1)]
        frames[:, row] *= np.where(lead < 0, -1.0, 1.0)[:, None]
    frames[:, 2] = np.cross(frames[:, 0], frames[:, 1])

    scales = np.maximum(cfg.sigma_multiplier * np.sqrt(np.maximum(lam, 0.0)), 0.1 * d_bar)

    normal = frames[:, 0].copy()
    outward = np.sum(normal * (cloud.positions - cloud.positions.mean(axis=0)), axis=1)
    normal *= np.where(outward < 0, -1.0, 1.0)[:, None]

    return Splats(
        centers=cloud.positions.copy(),
        scales=scales,
        quaternions=rotmat_to_quat(frames),
        opacities=np.full(n, float(cfg.default_opacity)),
        colors=cloud.colors.copy(),
        normals=normal,
    )


def estimate_neural(cloud: PointCloud, weights: NetworkWeights, cfg: EstimatorConfig) -> Splats:
    """Voxelize, run the network, activate the head: one splat per source point.

    Centers are the reconstructed voxel positions plus the bounded per-point
    offset; colors come from the source points, everything else from the head.
    """
    vox = voxelize_adaptive(cloud)
    raw = unet_forward(vox, weights)
    head = activate_head(raw, vox.grid.scale_to_world)
    centers = vox.reconstructed_positions()[vox.point_to_voxel] + head.delta
    return Splats(
        centers=centers,
        scales=head.sigma,
        quaternions=head.quat,
        opacities=head.opacity,
        colors=cloud.colors.copy(),
        normals=head.normal,
    )


def run_estimator(cloud: PointCloud, cfg: EstimatorConfig,
                  weights: NetworkWeights = None) -> Splats:
    """Dispatch on cfg.kind; the neural path loads cfg.weights_path when no
    weights are passed, or falls back to seed-0 random weights."""
    if cfg.kind == "global_isotropic":
        return estimate_global(cloud, cfg)
    if cfg.kind == "local_pca":
        return estimate_local_pca(cloud, cfg)
    if weights is None:
        weights = (load_weights(cfg.weights_path) if cfg.weights_path is not None
                   else init_random(NetworkPlan(), 0))
    return estimate_neural(cloud, weights, cfg)


def bench_preprocess(cloud: PointCloud, cfg: EstimatorConfig, iterations: int = 10,
                     weights: NetworkWeights = None) -> dict:
    """Wall-clock statistics for the full estimate path (cloud in, splats out)."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    run_estimator(cloud, cfg, weights)                 # warmup, compiles kernels
    samples = np.empty(iterations)
    for i in range(iterations):
        start = time.perf_counter()
        run_estimator(cloud, cfg, weights)
        samples[i] = (time.perf_counter() - start) * 1e3
    mean_ms = float(samples.mean())
    return {
        "mean_ms": mean_ms,
        "p50_ms": float(np.percentile(samples, 50)),
        "p99_ms": float(np.percentile(samples, 99)),
        "points": len(cloud),
        "points_per_s": len(cloud) / mean_ms * 1e3,
    }
