"""Hashed 3D feature containers: dense voxel grids and triplanes.

Both containers cover the world cube [-1, 1]^3, mapped affinely onto index
space so that -1 lands on the first grid line and +1 on the last one. World
axis x runs along H, y along W and z along D. Points outside the cube sample
to zero and splat nowhere.

Internally every container is one flat ``(cells, K)`` table; see
:mod:`raysplat._interp` for the weight kernels shared by sampling and
splatting.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import _interp
from .errors import DimensionError, DomainError, FormatError

GRID_MAGIC = b"LPG1"
TAG_VOXEL = 0
TAG_TRIPLANE = 1


class VoxelGrid:
    """Dense H x W x D x K feature grid sampled by trilinear interpolation."""

    kind = "voxel"
    corners_per_point = 8

    def __init__(self, data: np.ndarray):
        data = np.asarray(data)
        if data.ndim != 4:
            raise DimensionError(f"voxel data must be H x W x D x K, got shape {data.shape}")
        if min(data.shape[:3]) < 2 or data.shape[3] < 1:
            raise DimensionError(f"voxel grid needs >= 2 points per axis and K >= 1, got {data.shape}")
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        self.data = np.ascontiguousarray(data)

    @classmethod
    def zeros(cls, dims, channels: int, dtype=np.float32) -> "VoxelGrid":
        H, W, D = dims
        return cls(np.zeros((H, W, D, channels), dtype=dtype))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def table(self) -> np.ndarray:
        return self.data.reshape(-1, self.channels)

    def like(self, channels: int | None = None, dtype=None) -> "VoxelGrid":
        return VoxelGrid.zeros(self.dims, channels or self.channels, dtype or self.dtype)

    def with_table(self, table: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(table.reshape(*self.dims, -1))

    def astype(self, dtype) -> "VoxelGrid":
        return VoxelGrid(self.data.astype(dtype))

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.data.copy())

    def corners(self, points: np.ndarray, idx: np.ndarray, w: np.ndarray) -> None:
        H, W, D = self.dims
        _interp.voxel_corners(points, H, W, D, idx, w)

    def __repr__(self) -> str:
        return f"VoxelGrid(dims={self.dims}, K={self.channels}, dtype={self.dtype})"


class TriPlane:
    """Three axis-aligned feature planes; a point's feature is the sum of the
    bilinear samples at (x, y), (y, z) and (z, x).

    Planes have shapes H x W x K, W x D x K and D x H x K. They are stored
    back to back in one flat table and exposed as views.
    """

    kind = "triplane"
    corners_per_point = 12

    def __init__(self, plane_xy: np.ndarray, plane_yz: np.ndarray, plane_zx: np.ndarray):
        xy, yz, zx = (np.asarray(p) for p in (plane_xy, plane_yz, plane_zx))
        if not (xy.ndim == yz.ndim == zx.ndim == 3):
            raise DimensionError("triplane planes must be 3-D arrays")
        H, W, K = xy.shape
        D = yz.shape[1]
        if yz.shape != (W, D, K) or zx.shape != (D, H, K):
            raise DimensionError(
                f"triplane shapes do not chain: xy={xy.shape} yz={yz.shape} zx={zx.shape}"
            )
        if min(H, W, D) < 2:
            raise DimensionError("triplane needs >= 2 points per axis")
        dtype = np.result_type(xy.dtype, yz.dtype, zx.dtype)
        if dtype not in (np.float32, np.float64):
            dtype = np.float32
        self._dims = (H, W, D)
        self.data = np.concatenate(
            [xy.reshape(-1, K), yz.reshape(-1, K), zx.reshape(-1, K)]
        ).astype(dtype, copy=False)

    @classmethod
    def zeros(cls, dims, channels: int, dtype=np.float32) -> "TriPlane":
        H, W, D = dims
        return cls(
            np.zeros((H, W, channels), dtype),
            np.zeros((W, D, channels), dtype),
            np.zeros((D, H, channels), dtype),
        )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self._dims

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def table(self) -> np.ndarray:
        return self.data

    def _split(self):
        H, W, D = self._dims
        K = self.channels
        a, b = H * W, H * W + W * D
        return (
            self.data[:a].reshape(H, W, K),
            self.data[a:b].reshape(W, D, K),
            self.data[b:].reshape(D, H, K),
        )

    @property
    def plane_xy(self) -> np.ndarray:
        return self._split()[0]

    @property
    def plane_yz(self) -> np.ndarray:
        return self._split()[1]

    @property
    def plane_zx(self) -> np.ndarray:
        return self._split()[2]

    def like(self, channels: int | None = None, dtype=None) -> "TriPlane":
        return TriPlane.zeros(self.dims, channels or self.channels, dtype or self.dtype)

    def with_table(self, table: np.ndarray) -> "TriPlane":
        out = TriPlane.zeros(self.dims, table.shape[1], table.dtype)
        out.data[...] = table
        return out

    def astype(self, dtype) -> "TriPlane":
        return self.with_table(self.data.astype(dtype))

    def copy(self) -> "TriPlane":
        return self.with_table(self.data.copy())

    def corners(self, points: np.ndarray, idx: np.ndarray, w: np.ndarray) -> None:
        H, W, D = self.dims
        _interp.triplane_corners(points, H, W, D, idx, w)

    def __repr__(self) -> str:
        return f"TriPlane(dims={self.dims}, K={self.channels}, dtype={self.dtype})"


HashStructure = Union[VoxelGrid, TriPlane]


def make_structure(kind: str, dims, channels: int, dtype=np.float32) -> HashStructure:
    if kind == "voxel":
        return VoxelGrid.zeros(dims, channels, dtype)
    if kind == "triplane":
        return TriPlane.zeros(dims, channels, dtype)
    raise ValueError(f"unknown structure kind {kind!r}")


def random_structure(kind: str, dims, channels: int, rng: np.random.Generator,
                     dtype=np.float32, scale: float = 1.0) -> HashStructure:
    s = make_structure(kind, dims, channels, dtype)
    s.table[...] = rng.standard_normal(s.table.shape) * scale
    return s


@dataclass(frozen=True)
class ContractConfig:
    """Squashing of unbounded space into the unit cube.

    ``scale`` sets the share of the cube given to the unit ball (the
    foreground ends up in [-scale/2, scale/2]). ``per_axis`` contracts each
    coordinate on its own using |x_axis| in place of the vector norm.
    """

    scale: float = 1.0
    enabled: bool = True
    per_axis: bool = True

    def __post_init__(self):
        if not 0.0 < self.scale < 2.0:
            raise DomainError(f"contraction scale must lie in (0, 2), got {self.scale}")


def contract(x: np.ndarray, cfg: ContractConfig) -> np.ndarray:
    """Map points of R^3 into the open cube (-1, 1)^3.

    Within radius 1 points are scaled by ``scale / 2``; beyond it the radius r
    maps to ``((2 - scale) * (1 - 1/r) + scale) / 2``, which tends to 1.
    """
    x = np.asarray(x)
    if not cfg.enabled:
        return x
    a = cfg.scale
    xd = x.astype(np.float64)
    if cfg.per_axis:
        r = np.abs(xd)
        safe = np.maximum(r, 1.0)
        outer = 0.5 * ((2.0 - a) * (1.0 - 1.0 / safe) + a) * np.sign(xd)
        out = np.where(r <= 1.0, 0.5 * a * xd, outer)
    else:
        r = np.linalg.norm(xd, axis=-1, keepdims=True)
        safe = np.maximum(r, 1.0)
        outer = 0.5 * ((2.0 - a) * (1.0 - 1.0 / safe) + a) * (xd / safe)
        out = np.where(r <= 1.0, 0.5 * a * xd, outer)
    return out.astype(x.dtype if x.dtype in (np.float32, np.float64) else np.float64)


def _as_points(x) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != 3:
        raise DimensionError(f"points must be 3-vectors, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise DomainError("points must be finite")
    if pts.dtype not in (np.float32, np.float64):
        pts = pts.astype(np.float64)
    return np.ascontiguousarray(pts), single


def interpolation_weights(structure: HashStructure, x) -> tuple[np.ndarray, np.ndarray]:
    """Cell ids and weights (``(N, c)`` each) that sampling at ``x`` uses."""
    pts, _ = _as_points(x)
    n, c = pts.shape[0], structure.corners_per_point
    idx = np.empty((n, c), dtype=np.int64)
    w = np.empty((n, c), dtype=structure.dtype)
    structure.corners(pts, idx, w)
    return idx, w


def sample(structure: HashStructure, x, contraction: ContractConfig | None = None) -> np.ndarray:
    """Interpolated K-channel feature at world point(s) ``x`` (shape (3,) or (N, 3))."""
    pts, single = _as_points(x)
    if contraction is not None:
        pts = contract(pts, contraction)
    idx, w = interpolation_weights(structure, pts)
    out = np.empty((pts.shape[0], structure.channels), dtype=structure.dtype)
    _interp.gather(structure.table, idx, w, out)
    return out[0] if single else out


def splat_accumulate(accumulator: HashStructure, x, value, weight=1.0) -> None:
    """Scatter ``weight * value`` into the cells ``sample`` would read at ``x``.

    Vectorised over points: ``x`` is (N, 3), ``value`` is (N, K) and ``weight``
    a scalar or (N,). Mutates ``accumulator`` in place.
    """
    pts, single = _as_points(x)
    vals = np.atleast_2d(np.asarray(value, dtype=accumulator.dtype))
    if vals.shape[-1] != accumulator.channels:
        raise DimensionError(
            f"value has {vals.shape[-1]} channels, accumulator has {accumulator.channels}"
        )
    if vals.shape[0] != pts.shape[0]:
        raise DimensionError("one value per point is required")
    weight = np.broadcast_to(np.asarray(weight, dtype=accumulator.dtype), (pts.shape[0],))
    if np.any(weight < 0):
        raise DomainError("splat weights must be nonnegative")
    idx, w = interpolation_weights(accumulator, pts)
    _interp.scatter(accumulator.table, idx, w, np.ascontiguousarray(vals * weight[:, None]))


def sample_vjp(structure: HashStructure, x, upstream_grad) -> HashStructure:
    """Gradient of <upstream_grad, sample(structure, x)> with respect to the structure."""
    grad = structure.like()
    splat_accumulate(grad, x, upstream_grad, 1.0)
    return grad


# --- LPG1 binary format ----------------------------------------------------

def write_grid(path, structure: HashStructure) -> None:
    path = Path(path)
    H, W, D = structure.dims
    tag = TAG_VOXEL if structure.kind == "voxel" else TAG_TRIPLANE
    header = GRID_MAGIC + struct.pack("<5I", tag, H, W, D, structure.channels)
    payload = structure.table.astype("<f4").tobytes()
    path.write_bytes(header + payload)


def read_grid(path) -> HashStructure:
    raw = Path(path).read_bytes()
    if raw[:4] != GRID_MAGIC or len(raw) < 24:
        raise FormatError(f"{path}: not an LPG1 grid file")
    tag, H, W, D, K = struct.unpack("<5I", raw[4:24])
    body = np.frombuffer(raw, dtype="<f4", offset=24)
    if tag == TAG_VOXEL:
        expected = H * W * D * K
    elif tag == TAG_TRIPLANE:
        expected = (H * W + W * D + D * H) * K
    else:
        raise FormatError(f"{path}: unknown structure tag {tag}")
    if body.size != expected:
        raise FormatError(f"{path}: payload has {body.size} floats, expected {expected}")
    table = body.astype(np.float32).reshape(-1, K)
    if tag == TAG_VOXEL:
        return VoxelGrid(table.reshape(H, W, D, K))
    out = TriPlane.zeros((H, W, D), K)
    out.data[...] = table
    return out
