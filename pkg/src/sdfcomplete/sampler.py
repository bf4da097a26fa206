"""Training batch construction and normal estimation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core import GridConfig, PointCloud
from .loss import SampleBatch


@dataclass(frozen=True)
class SamplerConfig:
    n_on: int = 16000
    n_off: int = 16000
    seed: int = 0
    normal_k: int = 16
    reject_radius: float = 0.0

    def __post_init__(self):
        if self.n_on < 1 or self.n_off < 1:
            raise ValueError("n_on and n_off must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_batch(gt: PointCloud, box: GridConfig, cfg: SamplerConfig, labels_available: bool = False,
                 rng: np.random.Generator | None = None) -> SampleBatch:
    """Draw ``n_on`` surface points (with replacement) and ``n_off`` uniform box points.

    Off-surface candidates closer than ``reject_radius`` to the surface are
    redrawn. Without an explicit ``rng`` the draw is seeded by ``cfg.seed``.
    """
    if len(gt) == 0:
        raise ValueError("empty ground-truth cloud")
    if gt.normals is None:
        raise ValueError("ground-truth cloud needs normals")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    pick = rng.integers(0, len(gt), size=cfg.n_on)
    labels = gt.labels[pick] if (labels_available and gt.labels is not None) else None
    off = _uniform_off_surface(gt, box, cfg, rng)
    return SampleBatch(gt.points[pick], gt.normals[pick], off, on_labels=labels)


def _uniform_off_surface(gt: PointCloud, box: GridConfig, cfg: SamplerConfig,
                         rng: np.random.Generator) -> np.ndarray:
    lo, ext = box.lower, box.extent
    if cfg.reject_radius <= 0:
        return lo + rng.random((cfg.n_off, 3)) * ext
    tree = cKDTree(gt.points)
    kept: list[np.ndarray] = []
    have = 0
    for _ in range(1000):
        cand = lo + rng.random((cfg.n_off, 3)) * ext
        dist, _ = tree.query(cand, k=1)
        cand = cand[dist >= cfg.reject_radius]
        kept.append(cand)
        have += len(cand)
        if have >= cfg.n_off:
            return np.concatenate(kept)[: cfg.n_off]
    raise RuntimeError("reject_radius leaves too little free space to sample")


def estimate_normals(cloud: PointCloud, k: int = 16, orientation_point=(0.0, 0.0, 0.0),
                     rank_tol: float = 1e-8) -> PointCloud:
    """PCA normals from ``k`` nearest neighbors, oriented toward ``orientation_point``.

    Points whose neighborhood has rank < 2 (coincident or collinear
    neighbors) get a NaN normal; downstream losses skip them.
    """
    n = len(cloud)
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} points for k={k}, got {n}")
    pts = cloud.points
    _, nbr = cKDTree(pts).query(pts, k=k + 1)
    nb = pts[nbr]                                        # (N, k+1, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / (k + 1)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    to_eye = np.asarray(orientation_point, dtype=np.float64) - pts
    flip = np.einsum("ni,ni->n", normals, to_eye) < 0
    normals[flip] *= -1.0
    degenerate = evals[:, 1] <= rank_tol * np.maximum(evals[:, 2], 1e-300)
    normals[degenerate] = np.nan
    return PointCloud(pts, normals, cloud.labels)
