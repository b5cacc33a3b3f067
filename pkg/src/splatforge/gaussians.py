"""Gaussian surface primitives and the camera model.

Splats are stored as structure-of-arrays batches. All functions here are pure
numpy; the tiled rasterizer re-implements the projection math in compiled form
and is tested against this module.

Conventions, fixed across the package:
  - points are column vectors; camera space is p_cam = T @ p + t, camera looks
    along +z, z_near = 0.01
  - covariance factors as sigma = R^T diag(s^2) R with R built from a unit
    quaternion (w, x, y, z)
  - pixel (ix, iy) samples the image plane exactly at (ix, iy)
"""
from __future__ import annotations

import struct
from dataclasses import InitVar, dataclass

import numpy as np

Z_NEAR = 0.01            # J diverges at z -> 0
COV_DILATION = 0.3       # px^2 added to screen covariance diagonals
ALPHA_MAX = 0.99         # keeps transmittance strictly positive for blending
SPLAT_MAGIC = b"SPL1"
_SPLAT_FLOATS = 17       # center 3, scales 3, quaternion 4, opacity, color 3, normal 3


@dataclass(eq=False)
class Splats:
    """Batch of Gaussian splats, one row per primitive.

    centers world units; scales strictly positive world-unit sigmas;
    quaternions unit (w, x, y, z); opacities in [0, 1]; colors in [0, 1];
    normals unit. Pass validate=False for optimizer-internal batches whose
    quaternions are mid-update (projection renormalizes internally).
    """

    centers: np.ndarray
    scales: np.ndarray
    quaternions: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    validate: InitVar[bool] = True

    def __post_init__(self, validate):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64)
        self.scales = np.ascontiguousarray(self.scales, dtype=np.float64)
        self.quaternions = np.ascontiguousarray(self.quaternions, dtype=np.float64)
        self.opacities = np.ascontiguousarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        n = self.centers.shape[0]
        shapes = {
            "centers": (n, 3), "scales": (n, 3), "quaternions": (n, 4),
            "colors": (n, 3), "normals": (n, 3),
        }
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        if self.opacities.shape != (n,):
            raise ValueError(f"opacities must have shape ({n},)")
        if not validate:
            return
        qn = np.linalg.norm(self.quaternions, axis=1)
        if n and np.abs(qn - 1.0).max() > 1e-6:
            raise ValueError("quaternions must be unit norm within 1e-6")
        if n and self.scales.min() <= 0.0:
            raise ValueError("scales must be strictly positive")
        if n and (self.opacities.min() < 0.0 or self.opacities.max() > 1.0):
            raise ValueError("opacities must lie in [0, 1]")
        nn = np.linalg.norm(self.normals, axis=1)
        if n and np.abs(nn - 1.0).max() > 1e-6:
            raise ValueError("normals must be unit norm within 1e-6")

    def __len__(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def single(cls, center=(0.0, 0.0, 0.0), scales=(1.0, 1.0, 1.0),
               quaternion=(1.0, 0.0, 0.0, 0.0), opacity=1.0,
               color=(1.0, 1.0, 1.0), normal=(0.0, 0.0, 1.0)) -> "Splats":
        return cls(np.array([center]), np.array([scales]), np.array([quaternion]),
                   np.array([opacity]), np.array([color]), np.array([normal]))


@dataclass(eq=False)
class Camera:
    """Pinhole camera: rotation rows are the camera axes, p_cam = T @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        if self.rotation.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation must be orthonormal within 1e-6")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation must have determinant +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height,
                cx=None, cy=None) -> "Camera":
        """Camera at eye looking toward target; +z forward, +x right, +y up-ish."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(fwd)
        if norm < 1e-12:
            raise ValueError("eye and target coincide")
        z = fwd / norm
        x = np.cross(np.asarray(up, dtype=np.float64), z)
        xn = np.linalg.norm(x)
        if xn < 1e-12:
            raise ValueError("up is parallel to the view direction")
        x /= xn
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(rot, -rot @ eye, fx, fy,
                   width / 2.0 if cx is None else cx,
                   height / 2.0 if cy is None else cy, width, height)

    def eye(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation


@dataclass(eq=False)
class ProjectedSplats:
    """Screen-space splats surviving the near-plane and bbox culls.

    source_index maps each row back to the input batch; rows keep input order.
    """

    source_index: np.ndarray      # (K,) int64
    screen_centers: np.ndarray    # (K, 2) pixels
    depths: np.ndarray            # (K,) camera-space z
    screen_covs: np.ndarray       # (K, 2, 2) px^2
    radii: np.ndarray             # (K,) pixels, 3 sigma extent
    opacities: np.ndarray
    colors: np.ndarray
    normals: np.ndarray

    def __len__(self) -> int:
        return self.source_index.shape[0]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit-normalized rotation matrix from (..., 4) quaternions (w, x, y, z)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if (norm < 1e-12).any():
        raise ValueError("zero quaternion")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)
    r = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(..., 3, 3) proper rotations -> unit quaternions, largest component positive.

    Uses the most numerically stable of the four extraction branches per input;
    picking the largest-magnitude component also canonicalizes the sign.
    """
    r = np.asarray(r, dtype=np.float64)
    # 4x the squared quaternion components
    m = np.stack([
        1.0 + r[..., 0, 0] + r[..., 1, 1] + r[..., 2, 2],
        1.0 + r[..., 0, 0] - r[..., 1, 1] - r[..., 2, 2],
        1.0 - r[..., 0, 0] + r[..., 1, 1] - r[..., 2, 2],
        1.0 - r[..., 0, 0] - r[..., 1, 1] + r[..., 2, 2],
    ], axis=-1)
    best = np.argmax(m, axis=-1)[..., None]
    big = 0.5 * np.sqrt(np.take_along_axis(m, best, axis=-1)[..., 0])
    quarter = 0.25 / big
    wx = r[..., 2, 1] - r[..., 1, 2]
    wy = r[..., 0, 2] - r[..., 2, 0]
    wz = r[..., 1, 0] - r[..., 0, 1]
    xy = r[..., 1, 0] + r[..., 0, 1]
    xz = r[..., 0, 2] + r[..., 2, 0]
    yz = r[..., 2, 1] + r[..., 1, 2]
    b = best[..., 0]
    q = np.empty(r.shape[:-2] + (4,), dtype=np.float64)
    q[..., 0] = np.select([b == 0, b == 1, b == 2], [big, wx * quarter, wy * quarter], wz * quarter)
    q[..., 1] = np.select([b == 0, b == 1, b == 2], [wx * quarter, big, xy * quarter], xz * quarter)
    q[..., 2] = np.select([b == 0, b == 1, b == 2], [wy * quarter, xy * quarter, big], yz * quarter)
    q[..., 3] = np.select([b == 0, b == 1, b == 2], [wz * quarter, xz * quarter, yz * quarter], big)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def assemble_covariance(quaternions: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """World covariance R^T diag(s^2) R from (..., 4) quats and (..., 3) sigmas."""
    s = np.asarray(scales, dtype=np.float64)
    if (s <= 0).any():
        raise ValueError("scales must be strictly positive")
    r = quat_to_rotmat(quaternions)
    return np.einsum("...ji,...j,...jk->...ik", r, s * s, r)


def project(splats: Splats, cam: Camera) -> ProjectedSplats:
    """Perspective-project a batch through the paper's first-order Jacobian.

    Splats behind z_near or whose 3-sigma screen bbox misses the image are
    culled; the screen covariance is dilated by COV_DILATION * I.
    """
    p_cam = splats.centers @ cam.rotation.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    keep = z > Z_NEAR
    # evaluate only survivors; z is clamped defensively on the dead lanes
    zs = np.where(keep, z, 1.0)
    sx = cam.fx * x / zs + cam.cx
    sy = cam.fy * y / zs + cam.cy

    sigma = assemble_covariance(splats.quaternions, splats.scales)
    m = np.einsum("ij,njk,lk->nil", cam.rotation, sigma, cam.rotation)
    jac = np.zeros((len(splats), 2, 3), dtype=np.float64)
    jac[:, 0, 0] = cam.fx / zs
    jac[:, 0, 2] = -cam.fx * x / (zs * zs)
    jac[:, 1, 1] = cam.fy / zs
    jac[:, 1, 2] = -cam.fy * y / (zs * zs)
    cov = np.einsum("nij,njk,nlk->nil", jac, m, jac)
    cov[:, 0, 0] += COV_DILATION
    cov[:, 1, 1] += COV_DILATION

    mid = 0.5 * (cov[:, 0, 0] + cov[:, 1, 1])
    gap = np.sqrt(np.maximum(0.25 * (cov[:, 0, 0] - cov[:, 1, 1]) ** 2
                             + cov[:, 0, 1] ** 2, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(mid + gap, 0.0))

    keep &= (sx + radius >= 0.0) & (sx - radius <= cam.width - 1.0)
    keep &= (sy + radius >= 0.0) & (sy - radius <= cam.height - 1.0)
    idx = np.nonzero(keep)[0]
    return ProjectedSplats(
        idx.astype(np.int64),
        np.stack([sx[idx], sy[idx]], axis=1),
        z[idx],
        cov[idx],
        radius[idx],
        splats.opacities[idx],
        splats.colors[idx],
        splats.normals[idx],
    )


def eval_alpha(proj: ProjectedSplats, pixel, alpha_max: float = ALPHA_MAX) -> np.ndarray:
    """Per-splat alpha at one pixel: min(o * exp(-d^T cov^-1 d / 2), alpha_max)."""
    d = np.asarray(pixel, dtype=np.float64) - proj.screen_centers
    a = proj.screen_covs[:, 0, 0]
    b = proj.screen_covs[:, 0, 1]
    c = proj.screen_covs[:, 1, 1]
    det = a * c - b * b
    quad = (c * d[:, 0] ** 2 - 2.0 * b * d[:, 0] * d[:, 1] + a * d[:, 1] ** 2) / det
    return np.minimum(proj.opacities * np.exp(-0.5 * quad), alpha_max)


def save_splats(path, splats: Splats) -> None:
    """Write the SPL1 cache: magic, u32 count, 17 little-endian f32 per splat."""
    rows = np.concatenate([
        splats.centers, splats.scales, splats.quaternions,
        splats.opacities[:, None], splats.colors, splats.normals,
    ], axis=1).astype("<f4")
    try:
        with open(path, "wb") as fh:
            fh.write(SPLAT_MAGIC)
            fh.write(struct.pack("<I", len(splats)))
            fh.write(rows.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write splat cache {path}: {exc}") from exc


def load_splats(path) -> Splats:
    """Read an SPL1 cache; validates magic and exact payload length."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read splat cache {path}: {exc}") from exc
    if blob[:4] != SPLAT_MAGIC:
        raise ValueError(f"{path}: not a splat cache (bad magic)")
    if len(blob) < 8:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack("<I", blob[4:8])
    expected = 8 + count * _SPLAT_FLOATS * 4
    if len(blob) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {count} splats, "
                         f"got {len(blob)}")
    rows = np.frombuffer(blob, dtype="<f4", offset=8).reshape(count, _SPLAT_FLOATS)
    rows = rows.astype(np.float64)
    return Splats(rows[:, 0:3], rows[:, 3:6], rows[:, 6:10], rows[:, 10],
                  rows[:, 11:14], rows[:, 14:17], validate=False)
