"""Dense field evaluation, surface extraction, meshing and scene metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage import measure

from .core import GridConfig, IoUReport, OccupancyVolume, PointCloud, iou, miou, voxelize
from .field import ImplicitField, field_eval

DEGENERATE_AREA = 1e-12

# RGB per class id; ids beyond the table wrap around.
LABEL_PALETTE = np.array([
    [128, 64, 128],   # 0 ground
    [100, 150, 245],  # 1 car
    [255, 200, 0],    # 2 structure
    [0, 175, 0],      # 3 vegetation
    [245, 150, 100],
    [80, 30, 180],
    [255, 30, 30],
    [150, 60, 30],
], dtype=np.uint8)


@dataclass(frozen=True)
class InferenceConfig:
    n_inf: int = 256         # lattice points along the longest box axis
    v_th: float = 0.1        # meters
    chunk: int = 65536

    def __post_init__(self):
        if self.n_inf < 2:
            raise ValueError("n_inf must be >= 2")
        if not self.v_th > 0:
            raise ValueError("v_th must be positive")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")


@dataclass
class SdfGrid:
    """Field values on a regular lattice; ``origin`` is the first lattice point."""

    origin: np.ndarray
    spacing: float
    values: np.ndarray       # (nx, ny, nz) meters

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ValueError("values must be a 3D array")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite grid values")

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)

    def points(self) -> np.ndarray:
        return lattice_points(self.origin, self.spacing, self.counts)


def lattice_points(origin, spacing: float, counts: Sequence[int]) -> np.ndarray:
    axes = [origin[a] + spacing * np.arange(counts[a]) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([c.ravel() for c in g], axis=1)


def inference_lattice(grid: GridConfig, n_inf: int):
    """Cell-centred cubic lattice with ``n_inf`` points along the longest axis.

    Returns (origin, spacing, counts). With ``n_inf`` a multiple of the
    longest voxel count, lattice points sit on voxel centres.
    """
    ext = grid.extent
    spacing = float(ext.max()) / n_inf
    counts = tuple(max(1, int(round(e / spacing))) for e in ext)
    origin = grid.lower + 0.5 * spacing
    return origin, spacing, counts


@torch.no_grad()
def evaluate_grid(fld: ImplicitField, cfg: InferenceConfig = InferenceConfig()) -> SdfGrid:
    origin, spacing, counts = inference_lattice(fld.grid, cfg.n_inf)
    pts = lattice_points(origin, spacing, counts)
    out = np.empty(len(pts), dtype=np.float64)
    for s in range(0, len(pts), cfg.chunk):
        ev = field_eval(fld, pts[s:s + cfg.chunk], with_grad=False, with_semantics=False)
        out[s:s + cfg.chunk] = ev.value.double().numpy()
    return SdfGrid(origin, spacing, out.reshape(counts))


def extract_surface_points(sdf: SdfGrid, v_th: float) -> PointCloud:
    """Lattice points whose absolute field value is below ``v_th``."""
    if not v_th > 0:
        raise ValueError("v_th must be positive")
    mask = np.abs(sdf.values.ravel()) < v_th
    return PointCloud(sdf.points()[mask])


@torch.no_grad()
def semantic_points(fld: ImplicitField, points: PointCloud, chunk: int = 65536) -> PointCloud:
    """Attach argmax labels of the field's semantic head to ``points``."""
    if len(points) == 0:
        return PointCloud(points.points, labels=np.zeros(0, dtype=np.int64))
    labels = []
    for s in range(0, len(points), chunk):
        ev = field_eval(fld, points.points[s:s + chunk], with_grad=False, with_semantics=True)
        labels.append(ev.semantic_logits.argmax(dim=1).numpy())
    return PointCloud(points.points, labels=np.concatenate(labels))


@dataclass
class TriangleMesh:
    vertices: np.ndarray               # (V, 3) meters
    triangles: np.ndarray              # (T, 3) int64
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform surface samples."""
        if self.is_empty:
            raise ValueError("cannot sample an empty mesh")
        a = self.triangle_areas()
        tri = rng.choice(len(a), size=n, p=a / a.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        v = self.vertices[self.triangles[tri]]
        return ((1 - s)[:, None] * v[:, 0] + (s * (1 - r2))[:, None] * v[:, 1]
                + (s * r2)[:, None] * v[:, 2])


def marching_cubes(sdf: SdfGrid, level: float = 0.0) -> TriangleMesh:
    """Level-set triangulation in metric coordinates; empty when the level is never crossed."""
    if min(sdf.counts) < 2:
        raise ValueError("marching cubes needs at least 2 lattice points per axis")
    vals = sdf.values.astype(np.float64)
    if not (vals.min() < level < vals.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(vals, level=level, spacing=(sdf.spacing,) * 3,
                                                allow_degenerate=False)
    mesh = TriangleMesh(verts + sdf.origin, faces)
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    return _compact(mesh.vertices, mesh.triangles[keep])


def _compact(vertices: np.ndarray, triangles: np.ndarray) -> TriangleMesh:
    used, inverse = np.unique(triangles.ravel(), return_inverse=True)
    return TriangleMesh(vertices[used], inverse.reshape(-1, 3))


def knn_label_transfer(labeled: PointCloud, queries, k: int = 5) -> np.ndarray:
    """Majority label among the ``k`` nearest labeled points.

    Ties go to whichever tied class has the nearest member.
    """
    if labeled.labels is None:
        raise ValueError("labeled cloud has no labels")
    if len(labeled) == 0:
        raise ValueError("empty labeled set")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = queries.points if isinstance(queries, PointCloud) else np.asarray(queries, dtype=np.float64)
    q = q.reshape(-1, 3)
    if len(q) == 0:
        return np.zeros(0, dtype=np.int64)
    k = min(k, len(labeled))
    _, idx = cKDTree(labeled.points).query(q, k=k)
    idx = idx.reshape(len(q), k)                      # sorted by distance
    lab = labeled.labels[idx]
    n_cls = int(labeled.labels.max()) + 1
    counts = np.zeros((len(q), n_cls), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(len(q)), k), lab.ravel()), 1)
    best = counts.max(axis=1, keepdims=True)
    tied = counts == best                             # (Q, C)
    # first neighbor (nearest first) whose class is among the tied maxima
    member = np.take_along_axis(tied, lab, axis=1)
    return lab[np.arange(len(q)), member.argmax(axis=1)]


def evaluate_scene(pred_points: PointCloud, gt_occ: OccupancyVolume, grid: GridConfig,
                   num_classes: Optional[int] = None) -> IoUReport:
    """Voxelize the predicted points on ``grid`` and score against ``gt_occ``.

    With ``num_classes`` and labeled points the report is the mean class IoU.
    """
    if grid != gt_occ.grid:
        raise ValueError("prediction grid differs from the ground-truth grid")
    pred = voxelize(pred_points, grid)
    if num_classes is not None:
        return miou(pred, gt_occ, num_classes)
    return iou(pred, gt_occ)


def completed_miou(pred: OccupancyVolume, gt: OccupancyVolume, num_classes: int) -> IoUReport:
    """Class IoU restricted to voxels occupied in both volumes.

    Scores the labels of correctly completed voxels only, so geometry
    errors do not leak into the semantic score.
    """
    _, ip, ig = np.intersect1d(pred.keys, gt.keys, assume_unique=True, return_indices=True)
    if pred.labels is None or gt.labels is None:
        raise ValueError("completed_miou needs labeled occupancy")
    p = OccupancyVolume(pred.grid, pred.indices[ip], pred.labels[ip])
    g = OccupancyVolume(gt.grid, gt.indices[ig], gt.labels[ig])
    return miou(p, g, num_classes)


def threshold_sweep(sdf: SdfGrid, gt_occ: OccupancyVolume, thresholds: Sequence[float]) -> list[tuple[float, float]]:
    """(v_th, IoU) curve."""
    return [(float(t), evaluate_scene(extract_surface_points(sdf, t), gt_occ, gt_occ.grid).iou)
            for t in thresholds]


def curve_csv_text(curve: Sequence[tuple[float, float]]) -> str:
    """``v_th,iou`` rows with round-trip float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["v_th", "iou"])
    for t, v in curve:
        w.writerow([repr(t), repr(v)])
    return buf.getvalue()


def write_curve_csv(path, curve: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as f:
        f.write(curve_csv_text(curve))
