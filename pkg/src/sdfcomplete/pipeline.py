"""Scene completion end to end, scoring, and the seeded desk benchmark."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import IoUReport, PointCloud, voxelize
from .data import SceneRecord, benchmark_scenes
from .encoder import EncoderConfig
from .extract import (InferenceConfig, SdfGrid, completed_miou, evaluate_grid, evaluate_scene,
                      extract_surface_points, knn_label_transfer, semantic_points)
from .field import ImplicitField, PositionalEncodingConfig
from .sampler import SamplerConfig
from .trainer import Model, TrainConfig, fit

log = logging.getLogger(__name__)

# Sized for a single CPU core: a scene step takes a fraction of a second.
DESK_OVERRIDES = dict(
    hidden=64,
    depth=3,
    omega_0=1.0,
    encoder=EncoderConfig(enc_channels=[8, 16, 16, 32, 32], dec_channels=[32, 16], d_se=16),
    sampler=SamplerConfig(n_on=3000, n_off=3000),
)


def desk_config(**overrides) -> TrainConfig:
    """TrainConfig with the desk-scale network and batch sizes, plus ``overrides``."""
    kw = dict(DESK_OVERRIDES)
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class Completion:
    field: ImplicitField
    sdf: SdfGrid
    points: PointCloud          # extracted surface points, labeled with a semantic option


def complete_scene(model: Model, scene: SceneRecord, icfg: InferenceConfig = InferenceConfig(),
                   knn_k: int = 5) -> Completion:
    """Encode the sparse input, evaluate the field on the lattice and extract surface points."""
    fld, _ = model.field(scene)
    sdf = evaluate_grid(fld, icfg)
    pts = extract_surface_points(sdf, icfg.v_th)
    semantic = model.cfg.semantic
    if semantic == "b":
        pts = semantic_points(fld, pts)
    elif semantic == "a":
        if scene.input_cloud.labels is None:
            raise ValueError(f"scene {scene.id}: label transfer needs a labeled input cloud")
        pts = PointCloud(pts.points, labels=knn_label_transfer(scene.input_cloud, pts, knn_k))
    return Completion(fld, sdf, pts)


@dataclass
class SceneScore:
    scene_id: str
    iou: float
    miou: Optional[float] = None
    n_points: int = 0


def score_points(points: PointCloud, scene: SceneRecord) -> SceneScore:
    rep: IoUReport = evaluate_scene(points, scene.gt_occ, scene.box)
    m = None
    if points.labels is not None and scene.gt_occ.labels is not None:
        pred = voxelize(points, scene.box)
        m = completed_miou(pred, scene.gt_occ, scene.num_classes).miou
    return SceneScore(scene.id, rep.iou, m, len(points))


def input_scores(scenes: Sequence[SceneRecord]) -> list[SceneScore]:
    """The sparse input itself scored as a completion."""
    return [score_points(PointCloud(s.input_cloud.points), s) for s in scenes]


def evaluate_model(model: Model, scenes: Sequence[SceneRecord],
                   icfg: InferenceConfig = InferenceConfig()) -> list[SceneScore]:
    return [score_points(complete_scene(model, s, icfg).points, s) for s in scenes]


def corpus_mean(scores: Sequence[SceneScore], attr: str = "iou") -> float:
    vals = [getattr(s, attr) for s in scores]
    if not vals or any(v is None for v in vals):
        raise ValueError(f"no {attr} values to average")
    return float(np.mean(vals))


@dataclass(frozen=True)
class BenchmarkConfig:
    """Disjoint seeded scene sets: the conditioned model trains on one and is scored on the other.

    The baselines fit each evaluation scene directly from its sparse input.
    """

    n_scenes: int = 50
    train_seed: int = 0
    eval_seed: int = 1
    epochs: int = 30
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def __post_init__(self):
        if self.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")


def benchmark_split(bcfg: BenchmarkConfig) -> tuple[list[SceneRecord], list[SceneRecord]]:
    return (benchmark_scenes(bcfg.n_scenes, seed=bcfg.train_seed),
            benchmark_scenes(bcfg.n_scenes, seed=bcfg.eval_seed))


def run_variant(cfg: TrainConfig, train: Sequence[SceneRecord], evals: Sequence[SceneRecord],
                icfg: InferenceConfig = InferenceConfig()) -> list[SceneScore]:
    """Train (or fit per scene, for the baselines) and score on ``evals``."""
    result = fit(train if cfg.mode == "lode" else evals, cfg)
    return evaluate_model(result.model, evals, icfg)


# Variants of the desk LODE configuration, keyed by ablation axis.
def ablation_variants(axis: str, base: TrainConfig) -> dict[str, TrainConfig]:
    rep = dataclasses.replace
    if axis == "sampling":
        return {s: rep(base, sampling=s) for s in ("trilinear", "nearest")}
    if axis == "pe":
        return {
            "off": rep(base, pe=PositionalEncodingConfig(enabled=False)),
            "L5+xyz": rep(base, pe=PositionalEncodingConfig(levels=5, include_xyz=True)),
            "L10": rep(base, pe=PositionalEncodingConfig(levels=10)),
            "L10+xyz": rep(base, pe=PositionalEncodingConfig(levels=10, include_xyz=True)),
        }
    if axis == "shape":
        enc = base.encoder
        out = {f"d{d}": rep(base, encoder=rep(enc, d_se=d)) for d in (8, 16, 32)}
        # scale_size follows from the number of up-sampling stages
        out["scale8"] = rep(base, encoder=rep(enc, dec_channels=enc.dec_channels[:1], scale_size=8,
                                              pruning_placement="all"))
        out["scale2"] = rep(base, encoder=rep(enc, dec_channels=enc.dec_channels + enc.dec_channels[-1:],
                                              scale_size=2, pruning_placement="all"))
        return out
    if axis == "pruning":
        enc = base.encoder
        n = len(enc.block_names)
        return {f"last{k}": rep(base, encoder=rep(enc, pruning_placement=k)) for k in range(n + 1)}
    raise ValueError(f"unknown ablation axis {axis!r}")


ABLATION_AXES = ("sampling", "pe", "shape", "pruning")
