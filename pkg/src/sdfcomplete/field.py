"""Conditioned implicit field: embedding sampling, positional encoding and a sine MLP.

The field value at a metric point ``x`` is

    mlp([encode(normalize(x)), e(x)])

where ``e(x)`` is trilinearly interpolated from the shape embedding volume.
Spatial gradients are propagated forward alongside the values (three
tangent directions through every layer), so the gradient is itself a torch
expression and any loss built on it can be differentiated in reverse mode
with respect to the MLP weights and the embedding rows.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .core import GridConfig
from .sparse import SparseTensor


@dataclass(frozen=True)
class PositionalEncodingConfig:
    enabled: bool = True
    levels: int = 10
    include_xyz: bool = False

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")

    @property
    def width(self) -> int:
        if not self.enabled:
            return 3
        return 6 * self.levels + (3 if self.include_xyz else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encode(u, cfg: PositionalEncodingConfig, du_dx=None):
    """Encode normalized coordinates ``u`` of shape (N, 3).

    Per component ``p`` the features are ``sin(2^l pi p), cos(2^l pi p)`` for
    ``l = 0..L-1``, concatenated over x, y, z, with the raw coordinates in
    front when ``include_xyz``. A disabled encoding passes ``u`` through.

    With ``du_dx`` (the per-axis derivative of ``u`` w.r.t. metric ``x``) the
    tangent ``d(features)/dx`` of shape (N, 3, width) is returned as well.
    """
    u = torch.as_tensor(u)
    if u.dim() == 1:
        u = u[None]
    n = u.shape[0]
    if not cfg.enabled:
        if du_dx is None:
            return u
        t = torch.diag_embed(torch.as_tensor(du_dx, dtype=u.dtype).expand(n, 3))
        return u, t
    freqs = math.pi * 2.0 ** torch.arange(cfg.levels, dtype=u.dtype)
    arg = u[:, :, None] * freqs                      # (N, 3, L)
    s, c = torch.sin(arg), torch.cos(arg)
    feats = torch.stack([s, c], dim=-1).reshape(n, 3 * 2 * cfg.levels)
    if cfg.include_xyz:
        feats = torch.cat([u, feats], dim=1)
    if du_dx is None:
        return feats
    du = torch.as_tensor(du_dx, dtype=u.dtype)
    d = torch.stack([c * freqs, -s * freqs], dim=-1).reshape(n, 3, 2 * cfg.levels)
    d = d * du[None, :, None]
    blocks = torch.zeros(n, 3, 3, 2 * cfg.levels, dtype=u.dtype)
    idx = torch.arange(3)
    blocks[:, idx, idx] = d                          # axis a only moves its own block
    tangent = blocks.reshape(n, 3, 3 * 2 * cfg.levels)
    if cfg.include_xyz:
        tangent = torch.cat([torch.diag_embed(du.expand(n, 3)), tangent], dim=2)
    return feats, tangent


@dataclass
class MlpParameters:
    """Layer list ``(W_j, b_j)`` with ``W_j`` of shape (N_j, M_j); the last layer is linear.

    For the sine activation the first pre-activation is scaled by
    ``omega_0``; ``hidden_omega`` scales the hidden ones (1 by default).
    ReLU layers are unscaled.
    """

    weights: list
    biases: list
    activation: str = "sine"
    omega_0: float = 30.0
    hidden_omega: float = 1.0

    def __post_init__(self):
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {j}: bias shape {tuple(b.shape)} vs weight {tuple(w.shape)}")
            if j and w.shape[1] != self.weights[j - 1].shape[0]:
                raise ValueError(f"layer {j} input width does not chain")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def parameters(self) -> list[torch.Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        out = []
        for j, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [(f"{j}.weight", w), (f"{j}.bias", b)]
        return out

    def requires_grad_(self, flag: bool = True) -> "MlpParameters":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def layer_scale(self, j: int) -> float:
        if self.activation != "sine" or j == len(self.weights) - 1:
            return 1.0
        return self.omega_0 if j == 0 else self.hidden_omega

    @classmethod
    def init(cls, in_dim: int, hidden: int = 256, depth: int = 4, out_dim: int = 1,
             activation: str = "sine", omega_0: float = 30.0, seed: int = 0,
             dtype=torch.float32, hidden_omega: Optional[float] = None) -> "MlpParameters":
        """``depth`` hidden layers of width ``hidden`` plus a linear output layer."""
        rng = np.random.default_rng(seed)
        dims = [in_dim] + [hidden] * depth + [out_dim]
        ws, bs = [], []
        for j, (m, n) in enumerate(zip(dims[:-1], dims[1:])):
            if activation == "sine":
                bound = 1.0 / m if j == 0 else math.sqrt(6.0 / m) / omega_0
            else:
                bound = math.sqrt(6.0 / m)
            ws.append(torch.tensor(rng.uniform(-bound, bound, size=(n, m)), dtype=dtype))
            bb = 1.0 / math.sqrt(m)
            bs.append(torch.tensor(rng.uniform(-bb, bb, size=n) if activation == "sine" else np.zeros(n),
                                   dtype=dtype))
        return cls(ws, bs, activation, omega_0, 1.0 if hidden_omega is None else hidden_omega)


def mlp_forward(params: MlpParameters, z: torch.Tensor, tangent: Optional[torch.Tensor] = None):
    """Evaluate the MLP on rows of ``z``; with ``tangent`` (N, 3, M_0) also push it through."""
    if z.shape[-1] != params.in_dim:
        raise ValueError(f"input width {z.shape[-1]} != {params.in_dim}")
    last = len(params.weights) - 1
    for j, (w, b) in enumerate(zip(params.weights, params.biases)):
        scale = params.layer_scale(j)
        a = z @ w.T + b
        ta = tangent @ w.T if tangent is not None else None
        if scale != 1.0:
            a = scale * a
            ta = scale * ta if ta is not None else None
        if j == last:
            z, tangent = a, ta
            break
        if params.activation == "sine":
            z = torch.sin(a)
            if ta is not None:
                tangent = torch.cos(a)[:, None, :] * ta
        else:
            z = torch.relu(a)
            if ta is not None:
                tangent = (a > 0).to(a.dtype)[:, None, :] * ta
    return (z, tangent) if tangent is not None else z


@dataclass
class FieldEval:
    value: torch.Tensor                # (N,) meters
    spatial_grad: Optional[torch.Tensor]  # (N, 3) per meter
    embedding: torch.Tensor            # (N, d_se)
    semantic_logits: Optional[torch.Tensor] = None


@dataclass
class ImplicitField:
    grid: GridConfig
    pe: PositionalEncodingConfig
    sdf_mlp: MlpParameters
    v_se: Optional[SparseTensor] = None
    scale_size: int = 4
    semantic_mlp: Optional[MlpParameters] = None
    grad_mode: str = "total"           # "partial": embedding held fixed when differentiating
    sampling: str = "trilinear"        # or "nearest"
    _table: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.grad_mode not in ("total", "partial"):
            raise ValueError(f"unknown grad_mode {self.grad_mode}")
        if self.sampling not in ("trilinear", "nearest"):
            raise ValueError(f"unknown sampling {self.sampling}")
        if self.sdf_mlp.in_dim != self.in_dim:
            raise ValueError(f"sdf_mlp expects {self.sdf_mlp.in_dim} inputs, field provides {self.in_dim}")
        if self.sdf_mlp.out_dim != 1:
            raise ValueError("sdf_mlp must have one output")
        if self.semantic_mlp is not None and self.semantic_mlp.in_dim != self.in_dim:
            raise ValueError("semantic_mlp input width differs from sdf_mlp")
        if self.v_se is not None and self.v_se.stride != self.scale_size:
            raise ValueError("embedding volume stride differs from scale_size")

    @property
    def d_se(self) -> int:
        return 0 if self.v_se is None else self.v_se.channels

    @property
    def in_dim(self) -> int:
        return self.pe.width + self.d_se

    @property
    def dtype(self):
        return self.sdf_mlp.dtype

    @property
    def embedding_edge(self) -> float:
        return self.grid.voxel_edge * self.scale_size

    @property
    def embedding_dims(self) -> tuple[int, int, int]:
        return tuple(-(-d // self.scale_size) for d in self.grid.dims)

    def row_table(self) -> np.ndarray:
        """Dense map from embedding-grid cell to v_se row (-1 where absent)."""
        if self._table is None:
            table = np.full(self.embedding_dims, -1, dtype=np.int64)
            if self.v_se is not None and len(self.v_se):
                cell = self.v_se.coords // self.scale_size
                table[tuple(cell.T)] = np.arange(len(self.v_se))
            self._table = table
        return self._table


def _check_inside(grid: GridConfig, x: np.ndarray) -> None:
    tol = 1e-9 * float(grid.extent.max())
    if not np.all(grid.contains(x, tol)):
        raise ValueError("query point outside the scene box")


def trilinear_corners(fld: ImplicitField, x: np.ndarray):
    """Rows (N, 8), weights (N, 8) and weight derivatives (N, 8, 3) per meter.

    Corner ``b`` of the enclosing cell of embedding-voxel centers has weight
    ``prod_axis max(0, 1 - |g - idx|)`` with ``g`` the query position in
    embedding-voxel units. Corners outside the grid or absent from the
    volume get row -1 (a zero embedding).
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    _check_inside(fld.grid, x)
    edge = fld.embedding_edge
    g = (x - fld.grid.lower) / edge - 0.5
    i0 = np.floor(g).astype(np.int64)
    t = g - i0
    dims = np.asarray(fld.embedding_dims)
    table = fld.row_table()
    rows = np.empty((len(x), 8), dtype=np.int64)
    weights = np.empty((len(x), 8))
    dweights = np.empty((len(x), 8, 3))
    for b in range(8):
        bit = np.array([(b >> 2) & 1, (b >> 1) & 1, b & 1])
        idx = i0 + bit
        fac = np.where(bit, t, 1.0 - t)                    # (N, 3)
        dfac = np.where(bit, 1.0, -1.0) / edge             # (3,)
        weights[:, b] = fac.prod(axis=1)
        for a in range(3):
            others = [k for k in range(3) if k != a]
            dweights[:, b, a] = dfac[a] * fac[:, others].prod(axis=1)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        r = np.full(len(x), -1, dtype=np.int64)
        r[inside] = table[tuple(idx[inside].T)]
        rows[:, b] = r
    return rows, weights, dweights


def _padded_features(fld: ImplicitField) -> torch.Tensor:
    feats = fld.v_se.features
    return torch.cat([feats, feats.new_zeros((1, feats.shape[1]))], dim=0)


def sample_embedding(fld: ImplicitField, x: np.ndarray, with_jacobian: bool = False):
    """Embedding at ``x`` (N, d_se) and, optionally, ``de/dx`` (N, 3, d_se)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    dtype = fld.dtype
    if fld.v_se is None:
        e = torch.zeros((len(x), 0), dtype=dtype)
        return (e, torch.zeros((len(x), 3, 0), dtype=dtype)) if with_jacobian else e
    feats = _padded_features(fld)
    zero_row = feats.shape[0] - 1
    if fld.sampling == "nearest":
        _check_inside(fld.grid, x)
        cell = np.floor((x - fld.grid.lower) / fld.embedding_edge).astype(np.int64)
        cell = np.clip(cell, 0, np.asarray(fld.embedding_dims) - 1)
        rows = fld.row_table()[tuple(cell.T)]
        e = feats[torch.from_numpy(np.where(rows < 0, zero_row, rows))]
        if with_jacobian:
            return e, e.new_zeros((len(x), 3, e.shape[1]))
        return e
    rows, w, dw = trilinear_corners(fld, x)
    rows = torch.from_numpy(np.where(rows < 0, zero_row, rows))
    w = torch.as_tensor(w, dtype=feats.dtype)
    dw = torch.as_tensor(dw, dtype=feats.dtype)
    e = feats.new_zeros((len(x), feats.shape[1]))
    jac = feats.new_zeros((len(x), 3, feats.shape[1])) if with_jacobian else None
    for b in range(8):
        fb = feats[rows[:, b]]
        e = e + w[:, b, None] * fb
        if with_jacobian:
            jac = jac + dw[:, b, :, None] * fb[:, None, :]
    return (e, jac) if with_jacobian else e


def trilinear_sample(v_se: SparseTensor, grid: GridConfig, x: np.ndarray) -> torch.Tensor:
    """Trilinearly interpolated embedding rows for metric points ``x``."""
    fld = _bare_field(v_se, grid)
    return sample_embedding(fld, x)


def trilinear_backprop(v_se: SparseTensor, grid: GridConfig, x: np.ndarray, upstream):
    """Gradient of ``<upstream, e(x)>`` w.r.t. the rows of ``v_se``.

    Returns ``(rows, grads)``: the distinct touched rows and, for each, the
    upstream vector scaled by the summed trilinear weight of that row.
    """
    fld = _bare_field(v_se, grid)
    rows, w, _ = trilinear_corners(fld, x)
    up = np.asarray(upstream, dtype=np.float64).reshape(len(rows), -1)
    acc: dict[int, np.ndarray] = {}
    for i in range(len(rows)):
        for b in range(8):
            r = int(rows[i, b])
            if r < 0 or w[i, b] == 0.0:
                continue
            acc[r] = acc.get(r, 0.0) + w[i, b] * up[i]
    keys = sorted(acc)
    grads = np.array([acc[k] for k in keys]).reshape(len(keys), up.shape[1])
    return np.asarray(keys, dtype=np.int64), grads


def _bare_field(v_se: SparseTensor, grid: GridConfig) -> ImplicitField:
    pe = PositionalEncodingConfig(enabled=False)
    d = v_se.channels
    mlp = MlpParameters([torch.zeros(1, 3 + d, dtype=v_se.features.dtype)],
                        [torch.zeros(1, dtype=v_se.features.dtype)])
    return ImplicitField(grid, pe, mlp, v_se, v_se.stride)


def field_inputs(fld: ImplicitField, x: np.ndarray, with_tangent: bool = True):
    """MLP input rows ``[encoding, embedding]`` and their tangent w.r.t. metric ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    _check_inside(fld.grid, x)
    dtype = fld.dtype
    grid = fld.grid
    u = torch.as_tensor(2.0 * (x - grid.lower) / grid.extent - 1.0, dtype=dtype)
    du_dx = torch.as_tensor(2.0 / grid.extent, dtype=dtype)
    total = fld.grad_mode == "total"
    if not with_tangent:
        return torch.cat([positional_encode(u, fld.pe), sample_embedding(fld, x)], dim=1), None
    y, ty = positional_encode(u, fld.pe, du_dx)
    e, je = sample_embedding(fld, x, with_jacobian=True)
    if not total:
        je = torch.zeros_like(je)
    return torch.cat([y, e], dim=1), torch.cat([ty, je], dim=2)


@dataclass
class AnalyticField:
    """Exact SDF with a closed-form gradient, a stand-in for a trained field in tests and oracles."""

    grid: GridConfig
    sdf: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    dtype: torch.dtype = torch.float64

    def eval(self, x: np.ndarray, with_grad: bool = True) -> FieldEval:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        _check_inside(self.grid, x)
        value = torch.as_tensor(self.sdf(x), dtype=self.dtype)
        g = torch.as_tensor(self.grad(x), dtype=self.dtype) if with_grad else None
        return FieldEval(value, g, torch.zeros((len(x), 0), dtype=self.dtype))


def sphere_field(grid: GridConfig, center, radius: float) -> AnalyticField:
    c = np.asarray(center, dtype=np.float64)

    def sdf(x):
        return np.linalg.norm(x - c, axis=1) - radius

    def grad(x):
        d = x - c
        return d / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12)

    return AnalyticField(grid, sdf, grad)


def field_eval(fld: ImplicitField, x, with_grad: bool = True, with_semantics: bool = True) -> FieldEval:
    """Signed distance, its metric spatial gradient and the sampled embedding at ``x``."""
    if isinstance(fld, AnalyticField):
        return fld.eval(x, with_grad)
    z, tz = field_inputs(fld, x, with_tangent=with_grad)
    d_enc = fld.pe.width
    if with_grad:
        value, tangent = mlp_forward(fld.sdf_mlp, z, tz)
        grad = tangent[:, :, 0]
    else:
        value, grad = mlp_forward(fld.sdf_mlp, z), None
    logits = None
    if with_semantics and fld.semantic_mlp is not None:
        logits = mlp_forward(fld.semantic_mlp, z)
    return FieldEval(value[:, 0], grad, z[:, d_enc:], logits)


def semantic_eval(fld: ImplicitField, x) -> torch.Tensor:
    """Class logits of the parallel semantic head."""
    if fld.semantic_mlp is None:
        raise ValueError("field has no semantic head")
    z, _ = field_inputs(fld, x, with_tangent=False)
    return mlp_forward(fld.semantic_mlp, z)


def field_loss(fld: ImplicitField, batch, weights, baseline: bool = False):
    """Loss breakdown (torch scalars) for one batch: Eikonal terms plus semantics when labeled."""
    from .loss import baseline_loss, lode_loss, semantic_loss

    ev = field_eval(fld, batch.eikonal_points, with_grad=True, with_semantics=False)
    parts = (baseline_loss if baseline else lode_loss)(ev, batch, weights)
    if fld.semantic_mlp is not None and batch.on_labels is not None and weights.semantic > 0:
        on = batch.on_points
        logits = mlp_forward(fld.semantic_mlp, field_inputs(fld, on, with_tangent=False)[0])
        parts.semantic = semantic_loss(logits, batch.on_labels)
    return parts


def field_parameters(fld: ImplicitField) -> list[tuple[str, torch.Tensor]]:
    out = [(f"sdf_mlp.{n}", p) for n, p in fld.sdf_mlp.named_parameters()]
    if fld.semantic_mlp is not None:
        out += [(f"semantic_mlp.{n}", p) for n, p in fld.semantic_mlp.named_parameters()]
    if fld.v_se is not None:
        out.append(("v_se", fld.v_se.features))
    return out


def field_grad_params(fld: ImplicitField, batch, weights) -> dict[str, torch.Tensor]:
    """Exact gradients of the weighted loss w.r.t. MLP parameters and embedding rows."""
    named = field_parameters(fld)
    for _, p in named:
        if not p.requires_grad:
            p.requires_grad_(True)
    total = field_loss(fld, batch, weights).total
    if not torch.is_tensor(total):
        total = torch.zeros((), dtype=fld.dtype, requires_grad=True)
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite loss")
    grads = torch.autograd.grad(total, [p for _, p in named], allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)}
