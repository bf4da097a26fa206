"""Coordinate-indexed sparse voxel tensors and the convolutions used by the encoder.

Coordinates live in base-grid voxel units, so a tensor at stride ``s`` only
holds coordinates divisible by ``s``. Coordinates are kept sorted by their
packed int64 key; neighbor lookup is a ``searchsorted`` over those keys.
Features are torch tensors so gradients flow through every operation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .core import OccupancyVolume, pack_keys, unique_rows


@dataclass(frozen=True)
class SparseTensor:
    coords: np.ndarray
    features: torch.Tensor
    stride: int = 1

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if c.shape[0] != self.features.shape[0]:
            raise ValueError(f"{c.shape[0]} coords but {self.features.shape[0]} feature rows")
        if c.size and np.any(c % self.stride):
            raise ValueError(f"coordinates not divisible by stride {self.stride}")
        keys = pack_keys(c)
        if np.any(keys[1:] <= keys[:-1]):
            order = np.argsort(keys, kind="stable")
            keys = keys[order]
            if np.any(keys[1:] == keys[:-1]):
                raise ValueError("duplicate coordinates")
            c = c[order]
            object.__setattr__(self, "features", self.features[torch.from_numpy(order)])
        c.setflags(write=False)
        keys.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "_keys", keys)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    def lookup(self, query: np.ndarray) -> np.ndarray:
        """Row index of each query coordinate, -1 where absent."""
        q = pack_keys(query)
        if len(self) == 0:
            return np.full(len(q), -1, dtype=np.int64)
        pos = np.searchsorted(self._keys, q)
        pos_c = np.minimum(pos, len(self) - 1)
        return np.where(self._keys[pos_c] == q, pos_c, -1)

    def with_features(self, features: torch.Tensor) -> "SparseTensor":
        return SparseTensor(self.coords, features, self.stride)


@dataclass
class ConvKernel:
    """Cubic kernel; ``weights`` has shape ``(size**3, in_channels, out_channels)``.

    Tap ``t`` corresponds to offset ``kernel_offsets(size)[t]`` in units of the
    input stride (convolution) or output stride (deconvolution).
    """

    weights: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self):
        taps = self.weights.shape[0]
        size = round(taps ** (1 / 3))
        if size**3 != taps or self.weights.dim() != 3:
            raise ValueError(f"weight shape {tuple(self.weights.shape)} is not (k^3, in, out)")
        if self.bias.shape != (self.weights.shape[2],):
            raise ValueError("bias length does not match out_channels")

    @property
    def size(self) -> int:
        return round(self.weights.shape[0] ** (1 / 3))

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]

    def parameters(self) -> list[torch.Tensor]:
        return [self.weights, self.bias]


def kernel_offsets(size: int) -> np.ndarray:
    """Offsets ``range(size) - (size - 1) // 2`` per axis, lexicographic over (x, y, z).

    Odd sizes are centered; size 2 gives ``{0, 1}``, the children of a parent cell.
    """
    r = np.arange(size) - (size - 1) // 2
    return np.array(list(itertools.product(r, r, r)), dtype=np.int64)


def _check_channels(t: SparseTensor, kernel: ConvKernel) -> None:
    if t.channels != kernel.in_channels:
        raise ValueError(f"channel mismatch: tensor has {t.channels}, kernel expects {kernel.in_channels}")


def sparse_conv(t: SparseTensor, kernel: ConvKernel, stride_out: int = 1) -> SparseTensor:
    """Sparse convolution.

    ``stride_out=1`` is submanifold (output coordinates equal input
    coordinates); ``stride_out=2`` outputs the coarse cells that contain at
    least one input coordinate. The kernel is centered on the output
    coordinate and absent neighbors contribute nothing.
    """
    _check_channels(t, kernel)
    if stride_out not in (1, 2):
        raise ValueError("stride_out must be 1 or 2")
    s = t.stride
    if stride_out == 1:
        out_coords = t.coords
    else:
        out_coords = unique_rows(np.floor_divide(t.coords, 2 * s) * 2 * s) if len(t) else t.coords
    out = t.features.new_zeros((len(out_coords), kernel.out_channels))
    if len(t):
        for tap, off in enumerate(kernel_offsets(kernel.size)):
            src = t.lookup(out_coords + off * s)
            hit = np.nonzero(src >= 0)[0]
            if hit.size == 0:
                continue
            contrib = t.features[torch.from_numpy(src[hit])] @ kernel.weights[tap]
            out = out.index_add(0, torch.from_numpy(hit), contrib)
    return SparseTensor(out_coords, out + kernel.bias, s * stride_out)


def generative_deconv(t: SparseTensor, kernel: ConvKernel, factor: int = 2,
                      bounds: Optional[Sequence[int]] = None) -> SparseTensor:
    """Transposed convolution whose output support is the full kernel footprint.

    Input coordinate ``C`` scatters ``features[C] @ W[tap]`` to ``C + offset * s_out``
    with ``s_out = stride / factor``. ``bounds`` (base-grid dims) drops
    footprint cells outside the grid.
    """
    _check_channels(t, kernel)
    if t.stride % factor:
        raise ValueError(f"stride {t.stride} not divisible by factor {factor}")
    s_out = t.stride // factor
    offsets = kernel_offsets(kernel.size) * s_out
    if len(t) == 0:
        return SparseTensor(np.zeros((0, 3), np.int64), t.features.new_zeros((0, kernel.out_channels)), s_out)
    cand = (t.coords[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
    if bounds is not None:
        cand = cand[np.all((cand >= 0) & (cand < np.asarray(bounds)), axis=1)]
    out_coords = unique_rows(cand)
    shell = SparseTensor(out_coords, torch.zeros(len(out_coords), 0), s_out)
    out = t.features.new_zeros((len(out_coords), kernel.out_channels))
    for tap, off in enumerate(offsets):
        dst = shell.lookup(t.coords + off)
        hit = np.nonzero(dst >= 0)[0]
        if hit.size == 0:
            continue
        contrib = t.features[torch.from_numpy(hit)] @ kernel.weights[tap]
        out = out.index_add(0, torch.from_numpy(dst[hit]), contrib)
    return SparseTensor(out_coords, out + kernel.bias, s_out)


def keep_mask(keep_logits, threshold: float) -> np.ndarray:
    """``sigmoid(logit) >= threshold``, evaluated as a logit comparison."""
    logits = keep_logits.detach().cpu().numpy() if isinstance(keep_logits, torch.Tensor) else np.asarray(keep_logits)
    logits = logits.reshape(-1).astype(np.float64)
    if threshold <= 0:
        return np.ones(len(logits), dtype=bool)
    if threshold >= 1:
        return logits == np.inf
    return logits >= math.log(threshold / (1.0 - threshold))


def select(t: SparseTensor, mask: np.ndarray) -> SparseTensor:
    idx = np.nonzero(np.asarray(mask, dtype=bool))[0]
    return SparseTensor(t.coords[idx], t.features[torch.from_numpy(idx)], t.stride)


def prune(t: SparseTensor, keep_logits, threshold: float = 0.5) -> SparseTensor:
    """Keep exactly the coordinates whose ``sigmoid(logit)`` reaches ``threshold``."""
    n = keep_logits.numel() if isinstance(keep_logits, torch.Tensor) else np.size(keep_logits)
    if n != len(t):
        raise ValueError(f"{n} logits for {len(t)} coordinates")
    return select(t, keep_mask(keep_logits, threshold))


def densify(t: SparseTensor, dims: Sequence[int]) -> SparseTensor:
    """Extend the support to every stride-aligned cell inside ``dims`` (absent cells get zeros)."""
    s = t.stride
    axes = [np.arange(0, d, s) for d in dims]
    full = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    src = t.lookup(full)
    feats = t.features.new_zeros((len(full), t.channels))
    hit = np.nonzero(src >= 0)[0]
    if hit.size:
        feats = feats.index_add(0, torch.from_numpy(hit), t.features[torch.from_numpy(src[hit])])
    return SparseTensor(full, feats, s)


def align(t: SparseTensor, coords: np.ndarray) -> torch.Tensor:
    """Features of ``t`` gathered at ``coords`` (zeros where absent)."""
    src = t.lookup(coords)
    out = t.features.new_zeros((len(coords), t.channels))
    hit = np.nonzero(src >= 0)[0]
    if hit.size:
        out = out.index_add(0, torch.from_numpy(hit), t.features[torch.from_numpy(src[hit])])
    return out


def concat(a: SparseTensor, b: SparseTensor) -> SparseTensor:
    """Channel concatenation on the support of ``a``."""
    if a.stride != b.stride:
        raise ValueError("stride mismatch")
    return a.with_features(torch.cat([a.features, align(b, a.coords)], dim=1))


def downsample_occupancy(occ: OccupancyVolume, factor: int) -> OccupancyVolume:
    """Max-pool occupancy by ``factor``: a coarse voxel is occupied iff any child is."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError("factor must be a power of two")
    coarse = occ.grid.coarsen(factor)
    if factor == 1:
        return occ
    idx = unique_rows(occ.indices // factor) if len(occ) else np.zeros((0, 3), np.int64)
    return OccupancyVolume(coarse, idx)


def occupancy_to_sparse(occ: OccupancyVolume, dtype=torch.float32) -> SparseTensor:
    return SparseTensor(occ.indices.copy(), torch.ones((len(occ), 1), dtype=dtype), 1)


def to_dense(t: SparseTensor, dims: Sequence[int]) -> np.ndarray:
    """Zero-filled ``(*dims, F)`` array indexed by ``coord // stride``."""
    grid = np.zeros((*dims, t.channels), dtype=np.float64)
    if len(t) == 0:
        return grid
    cell = t.coords // t.stride
    if cell.min() < 0 or np.any(cell >= np.asarray(dims)):
        raise ValueError("coordinate outside dense dims")
    grid[tuple(cell.T)] = t.features.detach().cpu().numpy()
    return grid


def from_dense(dense: np.ndarray, stride: int = 1, dtype=torch.float64) -> SparseTensor:
    """Sparse tensor over the cells with any nonzero channel."""
    cell = np.argwhere(np.any(dense != 0, axis=-1)).astype(np.int64)
    return SparseTensor(cell * stride, torch.tensor(dense[tuple(cell.T)], dtype=dtype), stride)


def dump(t: SparseTensor, path) -> None:
    """Ascii debug dump: one line per coordinate, ``x y z f0 f1 ...``."""
    feats = t.features.detach().cpu().numpy()
    with open(path, "w") as fh:
        fh.write(f"# stride {t.stride} count {len(t)} channels {t.channels}\n")
        for c, f in zip(t.coords, feats):
            fh.write(" ".join(str(int(v)) for v in c) + " " + " ".join(f"{v:.8g}" for v in f) + "\n")
