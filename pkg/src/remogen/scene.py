"""World-scale voxel occupancy and the 32^3 ego-centric crop.

Occupancy is bit-packed, 8 cells per byte, least-significant bit first, with
flat index (ix * ny + iy) * nz + iz. Cells own the half-open box [lo, hi) on
each axis. Grids are immutable after construction.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError
from .motion import RigidTransform
from .tensorcore import F64

EGO_BOX_MIN = np.array([-0.6, -0.6, 0.1], dtype=F64)
EGO_BOX_MAX = np.array([0.6, 0.6, 1.2], dtype=F64)
EGO_DIMS = 32


class Occupancy(Enum):
    FREE = 0
    OCCUPIED = 1
    OUT_OF_BOUNDS = 2


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned world box split into dims[k] cells per axis."""

    min_corner: np.ndarray
    max_corner: np.ndarray
    dims: tuple[int, int, int]

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=F64)
        hi = np.asarray(self.max_corner, dtype=F64)
        dims = tuple(int(d) for d in self.dims)
        if lo.shape != (3,) or hi.shape != (3,):
            raise DimensionError("grid corners must be 3-vectors")
        if not np.all(hi > lo):
            raise DimensionError("max corner must exceed min corner componentwise")
        if any(d < 1 for d in dims):
            raise DimensionError("grid dims must be >= 1")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        object.__setattr__(self, "dims", dims)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.max_corner - self.min_corner) / np.asarray(self.dims, dtype=F64)

    @property
    def cell_count(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @classmethod
    def from_resolution(cls, min_corner, max_corner, resolution: float) -> "GridSpec":
        lo = np.asarray(min_corner, dtype=F64)
        hi = np.asarray(max_corner, dtype=F64)
        dims = tuple(int(round(v)) for v in (hi - lo) / resolution)
        return cls(lo, hi, dims)


def room_grid_spec() -> GridSpec:
    """Room-scale preset: x in [-3, 3], y in [-4, 4], z in [0, 2] at 0.02 m."""
    return GridSpec.from_resolution([-3.0, -4.0, 0.0], [3.0, 4.0, 2.0], 0.02)


@dataclass(frozen=True)
class VoxelGrid:
    """Bit-packed boolean occupancy over a GridSpec."""

    spec: GridSpec
    packed: np.ndarray  # uint8, ceil(cells / 8) bytes

    def __post_init__(self):
        packed = np.asarray(self.packed, dtype=np.uint8)
        expected = (self.spec.cell_count + 7) // 8
        if packed.shape != (expected,):
            raise DimensionError(
                f"packed payload has {packed.shape} bytes, expected ({expected},)")
        object.__setattr__(self, "packed", packed)

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.zeros((spec.cell_count + 7) // 8, dtype=np.uint8))

    @classmethod
    def from_bool_array(cls, spec: GridSpec, occupancy: np.ndarray) -> "VoxelGrid":
        occ = np.asarray(occupancy, dtype=bool)
        if occ.shape != spec.dims:
            raise DimensionError(f"occupancy shape {occ.shape} != dims {spec.dims}")
        return cls(spec, np.packbits(occ.reshape(-1), bitorder="little"))

    def occupancy_array(self) -> np.ndarray:
        bits = np.unpackbits(self.packed, count=self.spec.cell_count, bitorder="little")
        return bits.reshape(self.spec.dims).astype(bool)

    def occupied_count(self) -> int:
        return int(np.unpackbits(self.packed, count=self.spec.cell_count,
                                 bitorder="little").sum())


def _cell_indices(points: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Floor cell indices and an in-bounds mask for (N, 3) points."""
    pts = np.asarray(points, dtype=F64).reshape(-1, 3)
    rel = (pts - spec.min_corner) / spec.voxel_size
    idx = np.floor(rel).astype(np.int64)
    dims = np.asarray(spec.dims, dtype=np.int64)
    inside = np.all((idx >= 0) & (idx < dims), axis=1)
    return idx, inside


def voxelize_points(points: np.ndarray, spec: GridSpec) -> VoxelGrid:
    """Mark every cell containing at least one point; out-of-bounds points are ignored."""
    points = np.asarray(points, dtype=F64).reshape(-1, 3)
    occ = np.zeros(spec.dims, dtype=bool)
    if points.shape[0]:
        idx, inside = _cell_indices(points, spec)
        idx = idx[inside]
        occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return VoxelGrid.from_bool_array(spec, occ)


def query_points(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Vectorized occupancy lookup; returns Occupancy values as a uint8 array."""
    idx, inside = _cell_indices(points, grid.spec)
    out = np.full(idx.shape[0], Occupancy.OUT_OF_BOUNDS.value, dtype=np.uint8)
    if np.any(inside):
        occ = grid.occupancy_array()
        hit = occ[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        out[inside] = np.where(hit, Occupancy.OCCUPIED.value, Occupancy.FREE.value)
    return out


def query_occupancy(grid: VoxelGrid, point) -> Occupancy:
    """Single-point lookup in world coordinates."""
    return Occupancy(int(query_points(grid, np.asarray(point, dtype=F64).reshape(1, 3))[0]))


@dataclass(frozen=True)
class EgoVoxelBlock:
    """32^3 occupancy crop around the ego, tagged with the frame used to extract it."""

    occupancy: np.ndarray  # (32, 32, 32) bool
    frame: RigidTransform

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (EGO_DIMS, EGO_DIMS, EGO_DIMS):
            raise DimensionError(f"ego block must be {EGO_DIMS}^3, got {occ.shape}")
        object.__setattr__(self, "occupancy", occ)


def ego_cell_centers() -> np.ndarray:
    """Cell centers of the ego box in ego coordinates, shape (32, 32, 32, 3)."""
    size = (EGO_BOX_MAX - EGO_BOX_MIN) / EGO_DIMS
    axes = [EGO_BOX_MIN[k] + (np.arange(EGO_DIMS) + 0.5) * size[k] for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def extract_ego_voxels(grid: VoxelGrid, ego_to_world: RigidTransform,
                       axis_aligned: bool = False) -> EgoVoxelBlock:
    """Sample the world grid at the ego box cell centers.

    Each ego cell queries the world occupancy at its mapped center; queries
    landing outside the world grid count as free. With axis_aligned=True only
    the translation of ego_to_world is used (no yaw).
    """
    frame = ego_to_world
    if axis_aligned:
        frame = RigidTransform(np.eye(3), ego_to_world.translation)
    centers = ego_cell_centers().reshape(-1, 3)
    world = frame.apply_points(centers)
    states = query_points(grid, world)
    occ = (states == Occupancy.OCCUPIED.value).reshape(EGO_DIMS, EGO_DIMS, EGO_DIMS)
    return EgoVoxelBlock(occ, frame)
