"""Point cloud I/O, normalization, and lattice transforms.

Clouds carry positions in world units, colors as reals in [0, 1], and optional
unit normals. The only file format is PLY (ascii or binary little-endian) with
float32 x/y/z, uint8 red/green/blue, and optional float32 nx/ny/nz; uint8 is a
file-boundary encoding only, everything in memory is real-valued.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np


class PlyParseError(ValueError):
    """Malformed PLY header or body; the message names the offending line."""


class PlyUnsupportedError(ValueError):
    """Well-formed PLY that uses a property, type, or encoding outside the contract."""


class EmptyCloudError(ValueError):
    """A cloud with zero points where at least one is required."""


class DegenerateCloudError(ValueError):
    """Geometry without the extent an operation needs (e.g. all points coincident)."""


def round_away_from_zero(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero: 2.5 -> 3, -2.5 -> -3 (np.round is half-even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass
class PointCloud:
    """Immutable-by-convention point set.

    positions: (N, 3) float64, world units
    colors:    (N, 3) float64 in [0, 1]
    normals:   optional (N, 3) float64, unit rows
    """

    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    _bbox: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {self.positions.shape}")
        if self.colors.shape != self.positions.shape:
            raise ValueError("colors must match positions shape")
        if self.colors.size and (self.colors.min() < 0.0 or self.colors.max() > 1.0):
            raise ValueError("color channels must lie in [0, 1]")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.positions.shape:
                raise ValueError("normals must match positions shape")
            norms = np.linalg.norm(self.normals, axis=1)
            if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length (within 1e-6)")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        """(min, max) corners; cached after first use."""
        if self._bbox is None:
            if len(self) == 0:
                raise EmptyCloudError("empty cloud has no bbox")
            self._bbox = (self.positions.min(axis=0), self.positions.max(axis=0))
        return self._bbox

    def with_positions(self, positions: np.ndarray) -> "PointCloud":
        return PointCloud(positions, self.colors, self.normals)


@dataclass(frozen=True)
class ScaleOffset:
    """Affine map p -> (p - offset) * scale, with its inverse."""

    scale: float
    offset: np.ndarray  # (3,)

    def apply(self, p: np.ndarray) -> np.ndarray:
        return (np.asarray(p, dtype=np.float64) - self.offset) * self.scale

    def invert(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) / self.scale + self.offset


@dataclass(frozen=True)
class QuantizationSpec:
    """Coordinate quantizer: x -> round(x * scale) / scale, stored in bit_depth ints."""

    scale: float = 512.0
    bit_depth: int = 10

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if self.bit_depth < 1:
            raise ValueError("bit_depth must be positive")
        # Quantized coordinates of the [-1, 1] box span 2*scale+1 levels.
        if 2 ** self.bit_depth < 2 * self.scale:
            raise ValueError(
                f"2^{self.bit_depth} integers cannot hold +/-{self.scale} coordinate range"
            )


# PLY property names and the only types accepted for them.
_FLOAT_NAMES = ("x", "y", "z", "nx", "ny", "nz")
_UCHAR_NAMES = ("red", "green", "blue")
_FLOAT_TYPES = {"float", "float32"}
_UCHAR_TYPES = {"uchar", "uint8"}


def _parse_header(stream: io.BufferedReader, path: str):
    """Returns (is_binary, vertex_count, ordered property names). Raises PlyParseError."""
    def next_line():
        raw = stream.readline()
        if not raw:
            raise PlyParseError(f"{path}: unexpected end of file inside header")
        return raw.decode("ascii", errors="replace").strip()

    magic = next_line()
    if magic != "ply":
        raise PlyParseError(f"{path}: first line must be 'ply', got '{magic}'")

    is_binary = None
    vertex_count = None
    props: list[str] = []
    in_vertex_element = False

    while True:
        line = next_line()
        if line == "" or line.startswith("comment") or line.startswith("obj_info"):
            continue
        if line == "end_header":
            break
        fields = line.split()
        keyword = fields[0]
        if keyword == "format":
            if len(fields) != 3 or fields[2] != "1.0":
                raise PlyParseError(f"{path}: bad format line '{line}'")
            if fields[1] == "ascii":
                is_binary = False
            elif fields[1] == "binary_little_endian":
                is_binary = True
            elif fields[1] == "binary_big_endian":
                raise PlyUnsupportedError(f"{path}: big-endian PLY is not supported")
            else:
                raise PlyParseError(f"{path}: unknown format '{fields[1]}'")
        elif keyword == "element":
            if len(fields) != 3:
                raise PlyParseError(f"{path}: bad element line '{line}'")
            if fields[1] != "vertex":
                raise PlyUnsupportedError(
                    f"{path}: only 'vertex' elements are supported, got '{fields[1]}'"
                )
            if vertex_count is not None:
                raise PlyParseError(f"{path}: duplicate vertex element '{line}'")
            try:
                vertex_count = int(fields[2])
            except ValueError:
                raise PlyParseError(f"{path}: bad vertex count in '{line}'") from None
            in_vertex_element = True
        elif keyword == "property":
            if not in_vertex_element:
                raise PlyParseError(f"{path}: property before any element: '{line}'")
            if len(fields) != 3:
                raise PlyUnsupportedError(f"{path}: unsupported property '{line}'")
            ptype, name = fields[1], fields[2]
            if name in _FLOAT_NAMES:
                if ptype not in _FLOAT_TYPES:
                    raise PlyUnsupportedError(f"{path}: '{name}' must be float32, got {ptype}")
            elif name in _UCHAR_NAMES:
                if ptype not in _UCHAR_TYPES:
                    raise PlyUnsupportedError(f"{path}: '{name}' must be uchar, got {ptype}")
            else:
                raise PlyUnsupportedError(f"{path}: unsupported property name '{name}'")
            props.append(name)
        else:
            raise PlyParseError(f"{path}: unrecognized header line '{line}'")

    if is_binary is None:
        raise PlyParseError(f"{path}: missing format line")
    if vertex_count is None:
        raise PlyParseError(f"{path}: missing vertex element")

    base = set(_FLOAT_NAMES[:3]) | set(_UCHAR_NAMES)
    got = set(props)
    if len(props) != len(got):
        raise PlyParseError(f"{path}: duplicate vertex property")
    if got != base and got != base | {"nx", "ny", "nz"}:
        missing = sorted(base - got)
        raise PlyUnsupportedError(f"{path}: vertex properties must be x y z red green blue"
                                  f" (+ optional nx ny nz); missing {missing}")
    return is_binary, vertex_count, props


def load_ply(path: str | os.PathLike) -> PointCloud:
    """Read an ascii or binary little-endian PLY into a PointCloud.

    Colors come back divided by 255; normals, when present, are renormalized
    (file normals are often only approximately unit). Point order is preserved.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        is_binary, count, props = _parse_header(fh, path)
        if count == 0:
            raise EmptyCloudError(f"{path}: vertex count is zero")
        if is_binary:
            dtype = np.dtype([(p, "<f4" if p in _FLOAT_NAMES else "u1") for p in props])
            raw = fh.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise PlyParseError(
                    f"{path}: body truncated, expected {count * dtype.itemsize} bytes"
                )
            table = np.frombuffer(raw, dtype=dtype, count=count)
            col = {p: table[p] for p in props}
        else:
            try:
                body = np.loadtxt(fh, dtype=np.float64, ndmin=2, max_rows=count)
            except ValueError as exc:
                raise PlyParseError(f"{path}: bad ascii body ({exc})") from None
            if body.shape[0] < count:
                raise PlyParseError(f"{path}: body has {body.shape[0]} rows, header says {count}")
            if body.shape[1] != len(props):
                raise PlyParseError(
                    f"{path}: rows have {body.shape[1]} values, header declares {len(props)}"
                )
            col = {p: body[:, i] for i, p in enumerate(props)}
            # ascii positions round-trip through float32, matching the binary encoding
            for p in _FLOAT_NAMES:
                if p in col:
                    col[p] = col[p].astype(np.float32)

    positions = np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float64)
    colors = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.float64) / 255.0
    normals = None
    if "nx" in col:
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1).astype(np.float64)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        fallback = norms[:, 0] < 1e-12
        norms[fallback] = 1.0
        normals = normals / norms
        normals[fallback] = (0.0, 0.0, 1.0)
    return PointCloud(positions, colors, normals)


def _format_f32(v: float) -> str:
    # shortest decimal string that parses back to the same float32
    return np.format_float_positional(np.float32(v), unique=True, trim="-")


def save_ply(cloud: PointCloud, path: str | os.PathLike, binary: bool = True) -> None:
    """Write a PLY consumable by load_ply. Positions stored as float32, colors as uint8."""
    path = os.fspath(path)
    n = len(cloud)
    has_normals = cloud.normals is not None
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {n}",
              "property float x", "property float y", "property float z",
              "property uchar red", "property uchar green", "property uchar blue"]
    if has_normals:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")

    pos = cloud.positions.astype(np.float32)
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    nrm = cloud.normals.astype(np.float32) if has_normals else None

    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")]
                if has_normals:
                    fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
                table = np.empty(n, dtype=np.dtype(fields))
                table["x"], table["y"], table["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
                table["red"], table["green"], table["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
                if has_normals:
                    table["nx"], table["ny"], table["nz"] = nrm[:, 0], nrm[:, 1], nrm[:, 2]
                fh.write(table.tobytes())
            else:
                lines = []
                for i in range(n):
                    parts = [_format_f32(pos[i, 0]), _format_f32(pos[i, 1]), _format_f32(pos[i, 2]),
                             str(rgb[i, 0]), str(rgb[i, 1]), str(rgb[i, 2])]
                    if has_normals:
                        parts += [_format_f32(nrm[i, 0]), _format_f32(nrm[i, 1]),
                                  _format_f32(nrm[i, 2])]
                    lines.append(" ".join(parts))
                fh.write(("\n".join(lines) + "\n").encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write PLY to {path}: {exc}") from exc


def normalize_to_unit_box(cloud: PointCloud) -> tuple[PointCloud, ScaleOffset]:
    """Uniformly scale and center the cloud so its bbox fits [-1, 1]^3.

    A single scale (2 / largest extent) preserves aspect ratio. Returns the
    transform so callers can round-trip back to world units.
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot normalize an empty cloud")
    lo, hi = cloud.bbox
    extent = hi - lo
    largest = float(extent.max())
    if largest <= 0.0:
        raise DegenerateCloudError("all points coincident; no extent to normalize")
    transform = ScaleOffset(scale=2.0 / largest, offset=(lo + hi) / 2.0)
    return cloud.with_positions(transform.apply(cloud.positions)), transform


def quantize(cloud: PointCloud, spec: QuantizationSpec = QuantizationSpec()) -> PointCloud:
    """Snap every coordinate to round(x * scale) / scale, ties away from zero.

    Points must already lie in [-1, 1]^3; duplicates produced by snapping are
    retained (merging is the voxelizer's job).
    """
    p = cloud.positions
    out_of_range = np.any((p < -1.0) | (p > 1.0), axis=1)
    if out_of_range.any():
        first = int(np.argmax(out_of_range))
        raise ValueError(f"positions must lie in [-1, 1]^3; point {first} = {p[first]}")
    snapped = round_away_from_zero(p * spec.scale) / spec.scale
    return cloud.with_positions(snapped)


def downsample_lattice(cloud: PointCloud, alpha: float) -> PointCloud:
    """Coarsen coordinates to round(alpha * x) / alpha, alpha in [0.25, 1]."""
    if not (0.25 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0.25, 1], got {alpha}")
    snapped = round_away_from_zero(cloud.positions * alpha) / alpha
    return cloud.with_positions(snapped)


def subsample_random(cloud: PointCloud, beta: float, seed: int) -> PointCloud:
    """Keep exactly round(beta * N) points, chosen without replacement.

    Selection is deterministic for a given seed; surviving points keep their
    original relative order.
    """
    if not (0.0 < beta <= 1.0):
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    n = len(cloud)
    keep = int(np.floor(beta * n + 0.5))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return PointCloud(
        cloud.positions[idx],
        cloud.colors[idx],
        None if cloud.normals is None else cloud.normals[idx],
    )
