"""Adaptive voxelization and the sparse integer-lattice grids the network runs on.

A SparseVoxelGrid maps integer voxel coordinates (multiples of its stride) to
fixed-width feature vectors. Grids are kept in a canonical order (sorted by a
packed coordinate key) so every downstream reduction is deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pcio import DegenerateCloudError, PointCloud

# Coordinates are packed three-per-int64 (21 bits each) for hashing; this caps
# the addressable lattice at +/-2^20 voxels per axis, far beyond any density-1
# voxelization (2^60 voxels) while keeping lookups branch-free.
COORD_LIMIT = 1 << 20
_BIAS = 1 << 20


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """(M, 3) int array -> (M,) int64 keys, monotone in (z, y, x) lexicographic order."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (np.abs(c) >= COORD_LIMIT).any():
        raise ValueError(f"voxel coordinates must satisfy |c| < {COORD_LIMIT}")
    return ((c[:, 2] + _BIAS) << 42) | ((c[:, 1] + _BIAS) << 21) | (c[:, 0] + _BIAS)


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    mask = (1 << 21) - 1
    out = np.empty((k.shape[0], 3), dtype=np.int32)
    out[:, 0] = (k & mask) - _BIAS
    out[:, 1] = ((k >> 21) & mask) - _BIAS
    out[:, 2] = ((k >> 42) & mask) - _BIAS
    return out


@dataclass(eq=False)
class SparseVoxelGrid:
    """Hash-indexed sparse voxel tensor.

    coords: (M, 3) int32, unique, every entry a multiple of stride
    feats:  (M, C) float64
    stride: power-of-two lattice spacing (1 at full resolution)
    scale_to_world: world units per stride-1 voxel
    Rows are sorted by packed key; `keys` is the sorted key array for lookups.
    """

    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1
    scale_to_world: float = 1.0
    keys: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.int32)
        self.feats = np.ascontiguousarray(self.feats, dtype=np.float64)
        if self.feats.ndim == 1:                      # scalar channel shorthand
            self.feats = self.feats[:, None]
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (M, 3), got {self.coords.shape}")
        if self.feats.shape[0] != self.coords.shape[0]:
            raise ValueError("feats row count must match coords")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.scale_to_world <= 0:
            raise ValueError("scale_to_world must be positive")
        if self.coords.size and (self.coords % self.stride != 0).any():
            raise ValueError(f"all coordinates must be multiples of stride {self.stride}")
        keys = pack_coords(self.coords)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if keys.size > 1 and (keys[1:] == keys[:-1]).any():
            raise ValueError("duplicate voxel coordinates")
        self.coords = np.ascontiguousarray(self.coords[order])
        self.feats = np.ascontiguousarray(self.feats[order])
        self.keys = keys

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channel_count(self) -> int:
        return self.feats.shape[1]

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, or -1 where unoccupied."""
        q = pack_coords(np.atleast_2d(coords))
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, max(len(self) - 1, 0))
        hit = (self.keys[pos] == q) if len(self) else np.zeros(q.shape, dtype=bool)
        return np.where(hit, pos, -1).astype(np.int64)


@dataclass(eq=False)
class VoxelizedCloud:
    """Density-1 voxelization with 9 feature channels per occupied voxel.

    Channels: world-space centroid (3), mean color (3), residual in voxel units
    (3, each in [-0.5, 0.5]). point_to_voxel maps each original point index to
    its voxel row; source CSR arrays record the inverse (merge bookkeeping).
    """

    grid: SparseVoxelGrid
    point_to_voxel: np.ndarray           # (N,) int64
    source_order: np.ndarray             # (N,) int64, point ids grouped by voxel
    source_offsets: np.ndarray           # (M+1,) int64

    @property
    def source_indices(self) -> list[np.ndarray]:
        """Per-voxel arrays of contributing original point indices."""
        return [
            self.source_order[self.source_offsets[i]: self.source_offsets[i + 1]]
            for i in range(len(self.grid))
        ]

    def reconstructed_positions(self) -> np.ndarray:
        """(M, 3) world-space positions: (coordinate + 0.5 + residual) * scale."""
        g = self.grid
        return (g.coords.astype(np.float64) + 0.5 + g.feats[:, 6:9]) * g.scale_to_world


def voxelize_adaptive(cloud: PointCloud) -> VoxelizedCloud:
    """Voxelize at density one point per voxel, merging collisions by centroid.

    The lattice scale is s = (N / V_bbox)^(1/3); voxel (i, j, k) covers
    [i, i+1)^3 in scaled space with its center at i + 0.5. Points sharing a
    voxel merge to their centroid and mean color; the residual channel stores
    centroid minus voxel center, in voxel units.
    """
    n = len(cloud)
    if n < 2:
        raise ValueError("voxelization needs at least 2 points")
    lo, hi = cloud.bbox
    extent = hi - lo
    volume = float(np.prod(extent))
    if volume <= 0.0:
        raise DegenerateCloudError("bbox volume is zero; cannot pick a density-1 scale")
    s = (n / volume) ** (1.0 / 3.0)

    scaled = cloud.positions * s                       # (N, 3) voxel units
    idx = np.floor(scaled).astype(np.int64)
    keys = pack_coords(idx)
    uniq_keys, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    m = uniq_keys.shape[0]

    centroid = np.zeros((m, 3), dtype=np.float64)
    np.add.at(centroid, inverse, scaled)
    centroid /= counts[:, None]
    color = np.zeros((m, 3), dtype=np.float64)
    np.add.at(color, inverse, cloud.colors)
    color /= counts[:, None]

    coords = unpack_coords(uniq_keys)
    residual = centroid - (coords.astype(np.float64) + 0.5)
    # guard half-open-interval roundoff: residuals live in [-0.5, 0.5]
    residual = np.clip(residual, -0.5, 0.5)

    feats = np.concatenate([centroid / s, color, residual], axis=1)
    grid = SparseVoxelGrid(coords, feats, stride=1, scale_to_world=1.0 / s)

    # np.unique returns keys sorted, matching the grid's canonical order
    order = np.argsort(inverse, kind="stable")
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return VoxelizedCloud(grid, inverse.astype(np.int64), order.astype(np.int64), offsets)


def pool_2x2x2(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    """Mean-pool occupied children into stride-doubled parents.

    Each parent averages only its occupied children (1 to 8 of them); empty
    children do not dilute the mean.
    """
    parent_step = grid.stride * 2
    parents = (grid.coords.astype(np.int64) // parent_step) * parent_step
    keys = pack_coords(parents)
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    feats = np.zeros((uniq.shape[0], grid.channel_count), dtype=np.float64)
    np.add.at(feats, inverse, grid.feats)
    feats /= counts[:, None]
    return SparseVoxelGrid(unpack_coords(uniq), feats, stride=parent_step,
                           scale_to_world=grid.scale_to_world)


def occupancy_at_stride(grid: SparseVoxelGrid, stride: int) -> np.ndarray:
    """Parent coordinate set of the grid at a coarser stride, by repeated halving.

    Returns a (K, 3) int32 array in canonical (sorted-key) order; used to prune
    transposed convolutions so decoder geometry matches the encoder exactly.
    """
    if stride < grid.stride or (stride & (stride - 1)) != 0 or stride % grid.stride != 0:
        raise ValueError(f"stride must be a power-of-two multiple of {grid.stride}")
    coords = grid.coords.astype(np.int64)
    step = grid.stride
    while step < stride:
        step *= 2
        coords = (coords // step) * step
    keys = np.unique(pack_coords(coords))
    return unpack_coords(keys)
