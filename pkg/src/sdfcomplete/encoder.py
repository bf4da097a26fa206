"""Sparse encoder-decoder mapping an occupancy volume to a shape embedding volume.

Layout for the default config (strides in base voxels)::

    stem(1) -> down(2) -> down(4) -> down(8) -> down(16)
    densify(16) -> bottleneck conv -> prune[bottleneck]
    deconv(8)  + prune[skip0](enc 8) -> fuse conv -> prune[dec0]
    deconv(4)  + prune[skip1](enc 4) -> fuse conv -> prune[dec1]
    output block (1..4 submanifold convs) -> d_se channels at stride 4

The five pruning blocks are the supervised blocks of the completion loss.
During training the target mask is applied (teacher forcing); at inference
the predicted mask ``sigmoid(logit) >= prune_threshold`` is used.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import OccupancyVolume, pack_keys
from .sparse import (ConvKernel, SparseTensor, concat, densify, downsample_occupancy,
                     generative_deconv, keep_mask, select, sparse_conv)

LEAKY_SLOPE = 0.01
PROB_CLAMP = 1e-7


@dataclass
class EncoderConfig:
    enc_channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    dec_channels: list = field(default_factory=lambda: [128, 64])
    scale_size: int = 4
    d_se: int = 256
    # "all", an int k meaning the last k blocks, or an explicit list of block names
    pruning_placement: Union[str, int, list] = "all"
    output_block_convs: int = 2
    prune_threshold: float = 0.5

    def __post_init__(self):
        n_down = len(self.enc_channels) - 1
        if self.scale_size != 2 ** (n_down - len(self.dec_channels)):
            raise ValueError(
                f"scale_size {self.scale_size} inconsistent with {n_down} down and "
                f"{len(self.dec_channels)} up stages")
        if self.d_se < 1:
            raise ValueError("d_se must be >= 1")
        if not 1 <= self.output_block_convs <= 4:
            raise ValueError("output_block_convs must be in 1..4")
        unknown = set(self.supervised_blocks) - set(self.block_names)
        if unknown:
            raise ValueError(f"unknown pruning blocks {sorted(unknown)}")

    @property
    def block_names(self) -> list[str]:
        names = ["bottleneck"]
        for j in range(len(self.dec_channels)):
            names += [f"skip{j}", f"dec{j}"]
        return names

    @property
    def supervised_blocks(self) -> list[str]:
        p = self.pruning_placement
        if p == "all":
            return self.block_names
        if isinstance(p, int):
            return self.block_names[len(self.block_names) - p:] if p > 0 else []
        return list(p)

    @property
    def coarsest_stride(self) -> int:
        return 2 ** (len(self.enc_channels) - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PruningSupervision:
    logits: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    names: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.logits)

    def add(self, name: str, logits: torch.Tensor, targets: torch.Tensor) -> None:
        if logits.shape != targets.shape:
            raise ValueError("logits and targets must align")
        self.names.append(name)
        self.logits.append(logits)
        self.targets.append(targets)


class Encoder:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: EncoderConfig, kernels: dict[str, ConvKernel]):
        self.cfg = cfg
        self.kernels = kernels

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int = 0, dtype=torch.float32) -> "Encoder":
        rng = np.random.default_rng(seed)
        enc, dec = cfg.enc_channels, cfg.dec_channels

        def k(size, cin, cout):
            return conv_init(size, cin, cout, rng, dtype)

        kernels = {"stem": k(3, 1, enc[0])}
        for i in range(1, len(enc)):
            kernels[f"down{i}"] = k(3, enc[i - 1], enc[i])
        kernels["bottleneck"] = k(3, enc[-1], enc[-1])
        kernels["prune_bottleneck"] = k(3, enc[-1], 1)
        prev = enc[-1]
        n_down = len(enc) - 1
        for j, c in enumerate(dec):
            skip_c = enc[n_down - j - 1]
            kernels[f"up{j}"] = k(2, prev, c)
            kernels[f"prune_skip{j}"] = k(3, skip_c, 1)
            kernels[f"fuse{j}"] = k(3, c + skip_c, c)
            kernels[f"prune_dec{j}"] = k(3, c, 1)
            prev = c
        for i in range(cfg.output_block_convs):
            kernels[f"out{i}"] = k(3, prev if i == 0 else cfg.d_se, cfg.d_se)
        return cls(cfg, kernels)

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for name, kern in self.kernels.items():
            out += [(f"{name}.weight", kern.weights), (f"{name}.bias", kern.bias)]
        return out

    def parameters(self) -> list[torch.Tensor]:
        return [p for _, p in self.named_parameters()]

    def requires_grad_(self, flag: bool = True) -> "Encoder":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def __call__(self, v_occ, gt_occ=None, teacher_forcing=None):
        return encode(v_occ, self, gt_occ, teacher_forcing)


def conv_init(size: int, c_in: int, c_out: int, rng: np.random.Generator, dtype=torch.float32) -> ConvKernel:
    # uniform +-sqrt(6 / fan_in) with fan_in = taps * in_channels
    bound = math.sqrt(6.0 / (size**3 * c_in))
    w = rng.uniform(-bound, bound, size=(size**3, c_in, c_out))
    return ConvKernel(torch.tensor(w, dtype=dtype), torch.zeros(c_out, dtype=dtype))


def _act(t: SparseTensor) -> SparseTensor:
    return t.with_features(F.leaky_relu(t.features, LEAKY_SLOPE))


def pruning_targets(gt_occ: OccupancyVolume, strides: Sequence[int]) -> dict[int, OccupancyVolume]:
    """Ground-truth existence per stride: the occupancy max-pooled by that stride."""
    return {s: downsample_occupancy(gt_occ, s) for s in strides}


def targets_at(coarse: OccupancyVolume, coords: np.ndarray, stride: int) -> np.ndarray:
    """Binary target for each base-grid coordinate of a stride-``stride`` block."""
    if len(coords) == 0:
        return np.zeros(0, dtype=bool)
    cell = np.asarray(coords) // stride
    q = pack_keys(cell)
    keys = coarse.keys
    if len(keys) == 0:
        return np.zeros(len(q), dtype=bool)
    pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
    return keys[pos] == q


def encode(v_occ: SparseTensor, enc: Encoder, gt_occ: Optional[OccupancyVolume] = None,
           teacher_forcing: Optional[bool] = None, dims: Optional[Sequence[int]] = None
           ) -> tuple[SparseTensor, Optional[PruningSupervision]]:
    """Shape embedding volume at stride ``scale_size`` plus pruning supervision.

    ``dims`` is the base grid size; it defaults to the grid of ``gt_occ`` and
    is required when no ground truth is given.
    """
    cfg = enc.cfg
    if len(v_occ) == 0:
        raise ValueError("empty input")
    if v_occ.stride != 1 or v_occ.channels != 1:
        raise ValueError("v_occ must be a stride-1, single-channel tensor")
    if dims is None:
        if gt_occ is None:
            raise ValueError("dims required without ground truth")
        dims = gt_occ.grid.dims
    if teacher_forcing is None:
        teacher_forcing = gt_occ is not None
    if teacher_forcing and gt_occ is None:
        raise ValueError("teacher forcing needs gt_occ")
    kern = enc.kernels
    supervised = set(cfg.supervised_blocks)
    sup = PruningSupervision() if gt_occ is not None else None
    targets = {}

    def gate(name: str, head: str, t: SparseTensor) -> SparseTensor:
        if name not in supervised or len(t) == 0:
            return t  # all-keep at unsupervised stages
        logits = sparse_conv(t, kern[head]).features[:, 0]
        y = None
        if gt_occ is not None:
            if t.stride not in targets:
                targets[t.stride] = downsample_occupancy(gt_occ, t.stride)
            y = targets_at(targets[t.stride], t.coords, t.stride)
            sup.add(name, logits, torch.tensor(y, dtype=logits.dtype))
        mask = y if teacher_forcing else keep_mask(logits, cfg.prune_threshold)
        return select(t, mask)

    x = _act(sparse_conv(v_occ, kern["stem"]))
    skips = {1: x}
    for i in range(1, len(cfg.enc_channels)):
        x = _act(sparse_conv(x, kern[f"down{i}"], stride_out=2))
        skips[x.stride] = x
    x = densify(x, dims)
    x = _act(sparse_conv(x, kern["bottleneck"]))
    x = gate("bottleneck", "prune_bottleneck", x)
    for j in range(len(cfg.dec_channels)):
        x = _act(generative_deconv(x, kern[f"up{j}"], 2, bounds=dims))
        skip = gate(f"skip{j}", f"prune_skip{j}", skips[x.stride])
        x = _act(sparse_conv(concat(x, skip), kern[f"fuse{j}"]))
        x = gate(f"dec{j}", f"prune_dec{j}", x)
    for i in range(cfg.output_block_convs):
        x = sparse_conv(x, kern[f"out{i}"])
        if i < cfg.output_block_convs - 1:
            x = _act(x)
    return x, sup


def completion_loss(sup: PruningSupervision) -> torch.Tensor:
    """Binary cross-entropy averaged per block, then over the non-empty blocks."""
    if sup is None or sup.m == 0:
        raise ValueError("no supervised blocks")
    terms = []
    for logits, y in zip(sup.logits, sup.targets):
        if logits.numel() == 0:
            continue
        p = torch.sigmoid(logits).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
        terms.append(-(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean())
    if not terms:
        return sup.logits[0].new_zeros(())
    return torch.stack(terms).mean()
