"""Coordinate frames, voxelization and occupancy metrics.

Everything here works on plain numpy arrays. Voxel indices are ``int64``
triples ``(i, j, k)`` along ``(x, y, z)``; occupancy sets are stored as
lexicographically sorted, duplicate-free ``(N, 3)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# Coordinates are packed into one int64 key (21 bits per axis) for set
# operations; the offset lets slightly negative indices through.
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


def pack_keys(idx: np.ndarray) -> np.ndarray:
    """Pack integer triples into int64 keys that sort lexicographically."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1, 3) + _KEY_OFFSET
    if idx.size and (idx.min() < 0 or idx.max() > _KEY_MASK):
        raise ValueError("voxel index out of packable range")
    return (idx[:, 0] << (2 * _KEY_BITS)) | (idx[:, 1] << _KEY_BITS) | idx[:, 2]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack(
        [(keys >> (2 * _KEY_BITS)) & _KEY_MASK, (keys >> _KEY_BITS) & _KEY_MASK, keys & _KEY_MASK],
        axis=1,
    )
    return out - _KEY_OFFSET


def unique_rows(idx: np.ndarray) -> np.ndarray:
    """Sorted unique integer triples."""
    return unpack_keys(np.unique(pack_keys(idx)))


@dataclass(frozen=True)
class GridConfig:
    """Axis-aligned metric box split into cubic voxels."""

    origin: tuple[float, float, float] = (0.0, -25.6, -2.0)
    voxel_edge: float = 0.2
    dims: tuple[int, int, int] = (256, 256, 32)

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_edge", float(self.voxel_edge))
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise ValueError("origin and dims must have three components")
        if not self.voxel_edge > 0:
            raise ValueError("voxel_edge must be positive")
        if min(self.dims) < 1:
            raise ValueError("all dims must be >= 1")

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_edge

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extent

    @property
    def center(self) -> np.ndarray:
        return self.lower + 0.5 * self.extent

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=1)

    def coarsen(self, factor: int) -> "GridConfig":
        """Same box at ``factor`` times the voxel edge."""
        if any(d % factor for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return GridConfig(self.origin, self.voxel_edge * factor, tuple(d // factor for d in self.dims))

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "voxel_edge": self.voxel_edge, "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridConfig":
        return cls(tuple(d["origin"]), d["voxel_edge"], tuple(d["dims"]))


KITTI_GRID = GridConfig()
DESK_GRID = GridConfig(origin=(0.0, -6.4, -2.0), voxel_edge=0.2, dims=(64, 64, 16))


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError("normals and points differ in length")
            object.__setattr__(self, "normals", nrm)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(lab) != len(pts):
                raise ValueError("labels and points differ in length")
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.points)

    def check_normals(self, tol: float = 1e-6) -> None:
        if self.normals is None:
            return
        finite = np.all(np.isfinite(self.normals), axis=1)
        err = np.abs(np.linalg.norm(self.normals[finite], axis=1) - 1.0)
        if err.size and err.max() > tol:
            raise ValueError(f"normals deviate from unit length by {err.max():.2e}")

    def subset(self, mask_or_idx) -> "PointCloud":
        return PointCloud(
            self.points[mask_or_idx],
            None if self.normals is None else self.normals[mask_or_idx],
            None if self.labels is None else self.labels[mask_or_idx],
        )


@dataclass(frozen=True, eq=False)
class OccupancyVolume:
    """Set of occupied voxels on ``grid``, optionally with one label per voxel."""

    grid: GridConfig
    indices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), np.int64))
    labels: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        dims = np.asarray(self.grid.dims)
        if idx.size and (idx.min() < 0 or np.any(idx >= dims)):
            raise ValueError("voxel index outside grid dims")
        keys = pack_keys(idx)
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if np.any(keys[1:] == keys[:-1]):
            raise ValueError("duplicate voxel indices")
        idx = idx[order]
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64).reshape(-1)[order]
            if len(lab) != len(idx):
                raise ValueError("labels and indices differ in length")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.indices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyVolume):
            return NotImplemented
        if self.grid != other.grid or not np.array_equal(self.indices, other.indices):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or bool(np.array_equal(self.labels, other.labels))

    __hash__ = None

    @property
    def keys(self) -> np.ndarray:
        return pack_keys(self.indices)

    def as_set(self) -> set[tuple[int, int, int]]:
        return {tuple(int(v) for v in row) for row in self.indices}

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.grid.dims, dtype=bool)
        if len(self.indices):
            out[tuple(self.indices.T)] = True
        return out

    @classmethod
    def from_dense(cls, dense: np.ndarray, grid: GridConfig) -> "OccupancyVolume":
        if tuple(dense.shape) != grid.dims:
            raise ValueError("dense shape does not match grid dims")
        return cls(grid, np.argwhere(dense).astype(np.int64))


@dataclass(frozen=True)
class IoUReport:
    intersection: int
    union: int
    iou: float
    per_class_iou: Optional[list] = None
    miou: Optional[float] = None


def voxel_indices(points: np.ndarray, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-point voxel index and an in-box mask (half-open cells)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point coordinates")
    idx = np.floor((p - grid.lower) / grid.voxel_edge).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    return idx, inside


def voxelize(cloud: PointCloud, grid: GridConfig) -> OccupancyVolume:
    """Occupancy of ``cloud`` on ``grid``; out-of-box points are counted in ``dropped``.

    When the cloud carries labels each voxel takes the most frequent label of
    its points (ties go to the smaller class id).
    """
    idx, inside = voxel_indices(cloud.points, grid)
    idx = idx[inside]
    keys = pack_keys(idx)
    ukeys, inverse = np.unique(keys, return_inverse=True)
    labels = None
    if cloud.labels is not None and len(ukeys):
        lab = cloud.labels[inside]
        n_cls = int(lab.max()) + 1
        counts = np.zeros((len(ukeys), n_cls), dtype=np.int64)
        np.add.at(counts, (inverse, lab), 1)
        labels = counts.argmax(axis=1)
    elif cloud.labels is not None:
        labels = np.zeros(0, dtype=np.int64)
    return OccupancyVolume(grid, unpack_keys(ukeys), labels, dropped=int((~inside).sum()))


def voxel_center(idx: Sequence[int] | np.ndarray, grid: GridConfig) -> np.ndarray:
    """Metric center of one voxel ``(i, j, k)`` or of an ``(N, 3)`` array of them."""
    a = np.asarray(idx, dtype=np.int64)
    dims = np.asarray(grid.dims)
    if np.any(a < 0) or np.any(a >= dims):
        raise IndexError(f"voxel index {idx} outside dims {grid.dims}")
    return grid.lower + (a + 0.5) * grid.voxel_edge


def normalize_coords(x: np.ndarray, grid: GridConfig) -> np.ndarray:
    """Affine map of the scene box onto [-1, 1] per axis."""
    return 2.0 * (np.asarray(x, dtype=np.float64) - grid.lower) / grid.extent - 1.0


def denormalize_coords(u: np.ndarray, grid: GridConfig) -> np.ndarray:
    return grid.lower + 0.5 * (np.asarray(u, dtype=np.float64) + 1.0) * grid.extent


def _check_same_grid(a: OccupancyVolume, b: OccupancyVolume) -> None:
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")


def iou(pred: OccupancyVolume, gt: OccupancyVolume) -> IoUReport:
    _check_same_grid(pred, gt)
    inter = len(np.intersect1d(pred.keys, gt.keys, assume_unique=True))
    union = len(pred) + len(gt) - inter
    return IoUReport(inter, union, 1.0 if union == 0 else inter / union)


def miou(pred: OccupancyVolume, gt: OccupancyVolume, num_classes: int) -> IoUReport:
    """Mean per-class IoU; classes absent from both volumes are left out of the mean."""
    _check_same_grid(pred, gt)
    for vol in (pred, gt):
        if len(vol) and vol.labels is None:
            raise ValueError("miou needs labeled occupancy")
        if vol.labels is not None and len(vol.labels) and (vol.labels.min() < 0 or vol.labels.max() >= num_classes):
            raise ValueError("label out of range")
    pk, gk = pred.keys, gt.keys
    per_class: list[Optional[float]] = []
    total_i = total_u = 0
    for c in range(num_classes):
        pc = pk[pred.labels == c] if len(pk) else pk
        gc = gk[gt.labels == c] if len(gk) else gk
        inter = len(np.intersect1d(pc, gc, assume_unique=True))
        union = len(pc) + len(gc) - inter
        total_i += inter
        total_u += union
        per_class.append(None if union == 0 else inter / union)
    present = [v for v in per_class if v is not None]
    m = float(np.mean(present)) if present else 1.0
    return IoUReport(total_i, total_u, 1.0 if total_u == 0 else total_i / total_u, per_class, m)
