"""Optimization loop, Adam and the checkpoint container."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import SceneRecord
from .encoder import Encoder, EncoderConfig, completion_loss, encode
from .field import ImplicitField, MlpParameters, PositionalEncodingConfig, field_eval, field_loss
from .loss import SEMANTIC_WEIGHT, LossWeights, format_log_row, log_header
from .sampler import SamplerConfig, estimate_normals, sample_batch
from .sparse import occupancy_to_sparse
from .core import voxelize

log = logging.getLogger(__name__)

MODES = ("lode", "siren", "fourier")
CHECKPOINT_MAGIC = b"LODE"
CHECKPOINT_VERSION = 1
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    mode: str = "lode"
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    steps_per_scene: int = 1
    baseline_steps: int = 500          # per-scene fitting steps in the baseline modes
    max_steps: Optional[int] = None
    cosine_decay: bool = False
    orient_init: bool = True           # flip the initial output layer to agree with the normals
    seed: int = 0
    grad_mode: str = "total"
    sampling: str = "trilinear"
    semantic: str = "off"              # "off", "a" (label transfer at inference) or "b" (semantic head)
    num_classes: int = 4
    hidden: int = 256
    depth: int = 4
    activation: str = "sine"
    omega_0: float = 30.0
    hidden_omega: Optional[float] = None   # hidden pre-activation scale; None keeps the MLP default
    dtype: str = "float32"
    weights: LossWeights = field(default_factory=LossWeights)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pe: PositionalEncodingConfig = field(default_factory=PositionalEncodingConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.semantic not in ("off", "a", "b"):
            raise ValueError(f"unknown semantic option {self.semantic}")
        if self.semantic == "b" and self.mode != "lode":
            raise ValueError("the semantic head needs mode lode")
        if self.semantic != "b" and self.weights.semantic != 0:
            self.weights = replace(self.weights, semantic=0.0)
        elif self.semantic == "b" and self.weights.semantic == 0:
            self.weights = replace(self.weights, semantic=SEMANTIC_WEIGHT)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["sampler"] = SamplerConfig(**d.get("sampler", {}))
        d["encoder"] = EncoderConfig(**d.get("encoder", {}))
        d["pe"] = PositionalEncodingConfig(**d.get("pe", {}))
        return cls(**d)

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]


def baseline_pe(cfg: TrainConfig) -> PositionalEncodingConfig:
    if cfg.mode == "siren":
        return PositionalEncodingConfig(enabled=False)
    return PositionalEncodingConfig(enabled=True, levels=cfg.pe.levels, include_xyz=True)


class Model:
    """Trainable state: encoder and shared MLPs (conditioned mode) or one MLP per scene (baselines)."""

    def __init__(self, cfg: TrainConfig, encoder: Optional[Encoder] = None,
                 sdf_mlp: Optional[MlpParameters] = None, semantic_mlp: Optional[MlpParameters] = None,
                 scene_mlps: Optional[dict] = None):
        self.cfg = cfg
        self.encoder = encoder
        self.sdf_mlp = sdf_mlp
        self.semantic_mlp = semantic_mlp
        self.scene_mlps = scene_mlps if scene_mlps is not None else {}

    @classmethod
    def init(cls, cfg: TrainConfig) -> "Model":
        dt = cfg.torch_dtype
        if cfg.mode != "lode":
            return cls(cfg)
        enc = Encoder.init(cfg.encoder, seed=cfg.seed, dtype=dt).requires_grad_()
        in_dim = cfg.pe.width + cfg.encoder.d_se
        mlp = MlpParameters.init(in_dim, cfg.hidden, cfg.depth, 1, cfg.activation, cfg.omega_0,
                                 seed=cfg.seed + 1, dtype=dt, hidden_omega=cfg.hidden_omega).requires_grad_()
        sem = None
        if cfg.semantic == "b":
            sem = MlpParameters.init(in_dim, cfg.hidden, cfg.depth, cfg.num_classes, cfg.activation,
                                     cfg.omega_0, seed=cfg.seed + 2, dtype=dt,
                                     hidden_omega=cfg.hidden_omega).requires_grad_()
        return cls(cfg, enc, mlp, sem)

    def new_scene_mlp(self, index: int) -> MlpParameters:
        cfg = self.cfg
        act = "relu" if cfg.mode == "fourier" else "sine"
        return MlpParameters.init(baseline_pe(cfg).width, cfg.hidden, cfg.depth, 1, act, cfg.omega_0,
                                  seed=cfg.seed + 1000 + index, dtype=cfg.torch_dtype,
                                  hidden_omega=cfg.hidden_omega).requires_grad_()

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        if self.encoder is not None:
            out += [(f"encoder/{n}", p) for n, p in self.encoder.named_parameters()]
        if self.sdf_mlp is not None:
            out += [(f"sdf_mlp/{n}", p) for n, p in self.sdf_mlp.named_parameters()]
        if self.semantic_mlp is not None:
            out += [(f"semantic_mlp/{n}", p) for n, p in self.semantic_mlp.named_parameters()]
        for sid, mlp in self.scene_mlps.items():
            out += [(f"sdf_mlp@{sid}/{n}", p) for n, p in mlp.named_parameters()]
        return out

    def field(self, scene: SceneRecord, train: bool = False, sampling: Optional[str] = None):
        """Implicit field for ``scene`` and, in the conditioned mode, the pruning supervision.

        ``train`` applies teacher forcing with the scene's ground truth.
        """
        cfg = self.cfg
        sampling = sampling or cfg.sampling
        if cfg.mode != "lode":
            if scene.id not in self.scene_mlps:
                raise KeyError(f"no fitted baseline for scene {scene.id}")
            return ImplicitField(scene.box, baseline_pe(cfg), self.scene_mlps[scene.id], None,
                                 grad_mode=cfg.grad_mode, sampling=sampling), None
        occ = voxelize(scene.input_cloud, scene.box)
        v_occ = occupancy_to_sparse(occ, cfg.torch_dtype)
        gt = scene.gt_occ if train else None
        v_se, sup = encode(v_occ, self.encoder, gt, teacher_forcing=train, dims=scene.box.dims)
        fld = ImplicitField(scene.box, cfg.pe, self.sdf_mlp, v_se, cfg.encoder.scale_size,
                            self.semantic_mlp, cfg.grad_mode, sampling)
        return fld, sup


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p.detach()) for p in params], [torch.zeros_like(p.detach()) for p in params])


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place Adam update with bias correction; returns False (and counts a skip) on non-finite grads."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    if not all(bool(torch.isfinite(g).all()) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient, step skipped (%d so far)", state.skipped)
        return False
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return True


@dataclass
class FitResult:
    model: Model
    state: Optional[AdamState]
    step: int
    log_rows: list = field(default_factory=list)

    @property
    def log_text(self) -> str:
        return ",".join(log_header()) + "\n" + "".join(r + "\n" for r in self.log_rows)


def _lr(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine_decay or total <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


def orient_to_normals(fld: ImplicitField, batch) -> bool:
    """Negate the SDF head's output layer if its gradient opposes the on-surface normals on average.

    The init distribution is symmetric under this flip, but the strong
    Eikonal term keeps a field from changing its global sign once trained.
    Returns True when the layer was flipped.
    """
    valid = np.asarray(batch.normal_valid, dtype=bool)
    if not valid.any():
        return False
    g = field_eval(fld, batch.on_points[valid], with_grad=True, with_semantics=False).spatial_grad.detach()
    n = torch.as_tensor(batch.on_normals[valid], dtype=g.dtype)
    cos = (g * n).sum(-1) / (g.norm(dim=-1) * n.norm(dim=-1) + 1e-12)
    if float(cos.mean()) >= 0.0:
        return False
    mlp = fld.sdf_mlp
    with torch.no_grad():
        mlp.weights[-1].neg_()
        mlp.biases[-1].neg_()
    return True


def fit(dataset: Sequence[SceneRecord], cfg: TrainConfig, resume: Optional["Checkpoint"] = None,
        on_step=None) -> FitResult:
    """Train on ``dataset``; deterministic given the scene order and ``cfg.seed``.

    Conditioned mode: one Adam step per scene visit over encoder and MLPs.
    Baseline modes: an independent MLP is fitted to each scene's sparse
    input (estimated normals) for ``baseline_steps`` steps.
    """
    if not dataset:
        raise ValueError("empty dataset")
    if cfg.mode != "lode":
        if resume is not None:
            raise ValueError("resuming is only supported in the conditioned mode")
        return _fit_baselines(dataset, cfg, on_step)
    model = Model.init(cfg) if resume is None else resume.to_model()
    model.cfg = cfg                     # a resumed run may extend the schedule
    names_params = model.named_parameters()
    params = [p for _, p in names_params]
    state = AdamState.zeros_like(params) if resume is None else resume.adam_state(names_params)
    start = 0 if resume is None else resume.step
    scenes = []
    for s in dataset:
        if len(s.gt_cloud) == 0:
            log.warning("scene %s has empty ground truth, skipped", s.id)
        elif len(s.input_cloud) == 0:
            log.warning("scene %s has an empty input cloud, skipped", s.id)
        else:
            scenes.append(s)
    n = len(scenes)
    per_epoch = n * cfg.steps_per_scene
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    rows = []
    labeled = cfg.semantic == "b"
    perm_cache: dict[int, np.ndarray] = {}
    if resume is None and cfg.orient_init and total > 0:
        first = scenes[np.random.default_rng([cfg.seed, 0]).permutation(n)[0]]
        batch = sample_batch(first.gt_cloud, first.box, cfg.sampler, labeled, np.random.default_rng([cfg.seed, 7919, 0]))
        orient_to_normals(model.field(first)[0], batch)
    for step in range(start, total):
        epoch, within = divmod(step, per_epoch)
        if epoch not in perm_cache:
            perm_cache[epoch] = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        scene = scenes[perm_cache[epoch][within // cfg.steps_per_scene]]
        rng = np.random.default_rng([cfg.seed, 7919, step])
        batch = sample_batch(scene.gt_cloud, scene.box, cfg.sampler, labeled, rng)
        fld, sup = model.field(scene, train=True)
        parts = field_loss(fld, batch, cfg.weights)
        parts.completion = completion_loss(sup) if sup is not None and sup.m else 0.0
        total_loss = parts.total
        grads = torch.autograd.grad(total_loss, params, allow_unused=True)
        grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
        adam_step(params, grads, state, _lr(cfg, step, total), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        rows.append(format_log_row(step, scene.id, parts))
        if on_step is not None:
            on_step(step, scene, parts)
    return FitResult(model, state, max(total, start), rows)


def _fit_baselines(dataset, cfg: TrainConfig, on_step=None) -> FitResult:
    model = Model.init(cfg)
    rows = []
    step = 0
    skipped = 0
    steps = cfg.baseline_steps if cfg.max_steps is None else min(cfg.baseline_steps, cfg.max_steps)
    for index, scene in enumerate(dataset):
        if len(scene.input_cloud) <= cfg.sampler.normal_k:
            log.warning("scene %s has too few input points for a baseline fit, skipped", scene.id)
            continue
        cloud = estimate_normals(scene.input_cloud, cfg.sampler.normal_k, scene.sensor_origin)
        mlp = model.new_scene_mlp(index)
        model.scene_mlps[scene.id] = mlp
        params = mlp.parameters()
        state = AdamState.zeros_like(params)
        fld = ImplicitField(scene.box, baseline_pe(cfg), mlp, None, grad_mode=cfg.grad_mode)
        if cfg.orient_init and steps > 0:
            orient_to_normals(fld, sample_batch(cloud, scene.box, cfg.sampler, False,
                                                np.random.default_rng([cfg.seed, 104729, index, 0])))
        for local in range(steps):
            rng = np.random.default_rng([cfg.seed, 104729, index, local])
            batch = sample_batch(cloud, scene.box, cfg.sampler, False, rng)
            parts = field_loss(fld, batch, cfg.weights, baseline=True)
            grads = torch.autograd.grad(parts.total, params)
            adam_step(params, grads, state, _lr(cfg, local, steps), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            rows.append(format_log_row(step, scene.id, parts))
            if on_step is not None:
                on_step(step, scene, parts)
            step += 1
        skipped += state.skipped
    return FitResult(model, AdamState([], [], 0, skipped), step, rows)


# --- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Named float32 tensors plus a JSON metadata section."""

    tensors: dict
    meta: dict
    version: int = CHECKPOINT_VERSION

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.meta["config"])

    def sections(self) -> list[str]:
        return sorted(self.tensors)

    @classmethod
    def from_fit(cls, result: FitResult) -> "Checkpoint":
        model = result.model
        named = model.named_parameters()
        tensors = {n: p.detach().cpu().numpy().astype("<f4") for n, p in named}
        meta = {"config": model.cfg.to_dict(), "step": result.step, "seed": model.cfg.seed,
                "rng": {"kind": "numpy-default_rng", "streams": "keyed by (seed, step)"},
                "pe": model.cfg.pe.to_dict(), "scene_ids": sorted(model.scene_mlps)}
        st = result.state
        if st is not None and model.cfg.mode == "lode":
            for (n, _), m, v in zip(named, st.m, st.v):
                tensors[f"adam_m/{n}"] = m.cpu().numpy().astype("<f4")
                tensors[f"adam_v/{n}"] = v.cpu().numpy().astype("<f4")
            meta["adam_t"] = st.t
        meta["skipped"] = 0 if st is None else st.skipped
        return cls(tensors, meta)

    def _tensor(self, name: str, dtype) -> torch.Tensor:
        return torch.tensor(np.asarray(self.tensors[name], dtype=np.float32), dtype=dtype)

    def to_model(self) -> Model:
        cfg = self.config
        model = Model.init(cfg)
        dt = cfg.torch_dtype
        if cfg.mode == "lode":
            with torch.no_grad():
                for n, p in model.named_parameters():
                    p.copy_(self._tensor(n, dt))
        else:
            for index, sid in enumerate(self.meta.get("scene_ids", [])):
                mlp = model.new_scene_mlp(index)
                with torch.no_grad():
                    for n, p in mlp.named_parameters():
                        p.copy_(self._tensor(f"sdf_mlp@{sid}/{n}", dt))
                model.scene_mlps[sid] = mlp
        return model

    def adam_state(self, named) -> AdamState:
        dt = named[0][1].dtype
        m = [self._tensor(f"adam_m/{n}", dt) for n, _ in named]
        v = [self._tensor(f"adam_v/{n}", dt) for n, _ in named]
        return AdamState(m, v, int(self.meta.get("adam_t", 0)), int(self.meta.get("skipped", 0)))


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    """``LODE`` magic, u32 version, u32 section count, then per section:
    u32-prefixed name, u32 kind (0 tensor, 1 JSON), and either u32 ndim,
    u32 shape, f32 data or u32-prefixed UTF-8 JSON."""
    names = sorted(ckpt.tensors)
    out = [CHECKPOINT_MAGIC, struct.pack("<II", ckpt.version, len(names) + 1)]
    out += [_pack_str("meta"), struct.pack("<I", 1), _pack_str(json.dumps(ckpt.meta, sort_keys=True))]
    for n in names:
        arr = np.ascontiguousarray(ckpt.tensors[n], dtype="<f4")
        out += [_pack_str(n), struct.pack("<II", 0, arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                arr.tobytes()]
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_checkpoint(path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    tensors, meta = {}, None
    for _ in range(r.u32()):
        name = r.string()
        kind = r.u32()
        if kind == 1:
            meta = json.loads(r.string())
        elif kind == 0:
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).copy()
        else:
            raise ValueError(f"unknown section kind {kind}")
    if r.pos != len(r.data):
        raise ValueError("trailing bytes after the last section")
    if meta is None:
        raise ValueError("checkpoint without metadata")
    return Checkpoint(tensors, meta, version)
