"""Loss terms for Eikonal SDF fitting, pruning supervision and semantics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Union

import numpy as np
import torch

COS_EPS = 1e-8
SOFTMAX_CLAMP = 1e-7

Scalar = Union[float, torch.Tensor]
SEMANTIC_WEIGHT = 50.0            # lambda6 when a semantic head is trained


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 3000.0       # lambda1
    normal: float = 100.0         # lambda2
    surface: float = 100.0        # lambda3
    off_surface: float = 50.0     # lambda4
    completion: float = 100.0     # lambda5
    semantic: float = 0.0         # lambda6; 50 with a semantic head
    psi_alpha: float = 100.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleBatch:
    """Training points for one scene.

    On-surface points come with unit normals; ``normal_valid`` masks points
    whose normal could not be estimated. The eikonal term is evaluated on
    the on-surface points followed by the off-surface points.
    """

    on_points: np.ndarray
    on_normals: np.ndarray
    off_points: np.ndarray
    normal_valid: Optional[np.ndarray] = None
    on_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.on_points = np.asarray(self.on_points, dtype=np.float64).reshape(-1, 3)
        self.on_normals = np.asarray(self.on_normals, dtype=np.float64).reshape(-1, 3)
        self.off_points = np.asarray(self.off_points, dtype=np.float64).reshape(-1, 3)
        if len(self.on_normals) != len(self.on_points):
            raise ValueError("one normal per on-surface point required")
        if self.normal_valid is None:
            self.normal_valid = np.all(np.isfinite(self.on_normals), axis=1)
        if self.on_labels is not None:
            self.on_labels = np.asarray(self.on_labels, dtype=np.int64).reshape(-1)

    @property
    def n_on(self) -> int:
        return len(self.on_points)

    @property
    def eikonal_points(self) -> np.ndarray:
        return np.concatenate([self.on_points, self.off_points], axis=0)


@dataclass
class LossBreakdown:
    eikonal: Scalar = 0.0
    normal: Scalar = 0.0
    surface: Scalar = 0.0
    off_surface: Scalar = 0.0
    completion: Scalar = 0.0
    semantic: Scalar = 0.0
    weights: LossWeights = field(default_factory=LossWeights)

    TERMS = ("eikonal", "normal", "surface", "off_surface", "completion", "semantic")

    @property
    def total(self) -> Scalar:
        w = self.weights
        return (w.eikonal * self.eikonal + w.normal * self.normal + w.surface * self.surface
                + w.off_surface * self.off_surface + w.completion * self.completion
                + w.semantic * self.semantic)

    def detached(self) -> "LossBreakdown":
        """Copy with python-float components (the total is recombined from these)."""
        vals = {t: float(v.detach()) if torch.is_tensor(v) else float(v)
                for t in self.TERMS for v in [getattr(self, t)]}
        return LossBreakdown(**vals, weights=self.weights)

    def row(self) -> list[float]:
        d = self.detached()
        return [getattr(d, t) for t in self.TERMS] + [d.total]


def psi(value, alpha: float = 100.0):
    """Off-surface penalty ``exp(-alpha |value|)``."""
    if isinstance(value, torch.Tensor):
        return torch.exp(-alpha * value.abs())
    return np.exp(-alpha * np.abs(value))


def _eikonal_terms(value: torch.Tensor, grad: torch.Tensor, batch: SampleBatch, w: LossWeights):
    n_on = batch.n_on
    if n_on == 0:
        raise ValueError("empty on-surface set")
    if value.shape[0] != n_on + len(batch.off_points):
        raise ValueError("evaluations do not align with the batch points")
    gnorm = grad.norm(dim=-1)
    eikonal = (gnorm - 1.0).abs().mean()
    normals = torch.as_tensor(batch.on_normals, dtype=grad.dtype)
    valid = torch.as_tensor(batch.normal_valid)
    g_on = grad[:n_on]
    if bool(valid.any()):
        nn_ = torch.where(valid[:, None], normals, torch.zeros_like(normals))
        cos = (g_on * nn_).sum(-1) / (gnorm[:n_on] * nn_.norm(dim=-1) + COS_EPS)
        normal = (1.0 - cos)[valid].mean()
    else:
        normal = grad.new_zeros(())
    surface = value[:n_on].abs().mean()
    off = value[n_on:]
    off_surface = psi(off, w.psi_alpha).mean() if off.numel() else value.new_zeros(())
    return LossBreakdown(eikonal, normal, surface, off_surface, weights=w)


def lode_loss(evals, batch: SampleBatch, w: LossWeights) -> LossBreakdown:
    """Four-term Eikonal loss; ``evals`` is a FieldEval over ``batch.eikonal_points``.

    The on-surface points are the dense ground truth; all integrals are
    Monte-Carlo means. Components are unweighted, the weights are applied
    in ``LossBreakdown.total``.
    """
    return _eikonal_terms(evals.value, evals.spatial_grad, batch, w)


def baseline_loss(evals, batch: SampleBatch, w: LossWeights) -> LossBreakdown:
    """Same terms for the unconditioned baselines, whose on-surface points are the sparse input."""
    return _eikonal_terms(evals.value, evals.spatial_grad, batch, w)


def semantic_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean cross entropy with softmax probabilities clamped at 1e-7."""
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long).reshape(-1)
    if labels.numel() == 0:
        raise ValueError("semantic loss needs at least one labeled point")
    n_cls = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError("label out of range")
    p = torch.softmax(logits, dim=-1).clamp_min(SOFTMAX_CLAMP)
    return -torch.log(p.gather(1, labels[:, None])).mean()


def log_header() -> list[str]:
    return ["step", "scene_id", *LossBreakdown.TERMS, "total"]


def format_log_row(step: int, scene_id: str, breakdown: LossBreakdown) -> str:
    vals = breakdown.row()
    return ",".join([str(step), scene_id] + [repr(float(v)) for v in vals])

