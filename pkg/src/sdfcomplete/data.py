"""Scene sources: analytic synthetic scenes, a simulated LiDAR and KITTI-format files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DESK_GRID, KITTI_GRID, GridConfig, OccupancyVolume, PointCloud, voxel_center, voxelize

SHAPES = ("plane", "box", "sphere", "cylinder")
DESK_CLASSES = ("ground", "car", "structure", "vegetation")
GROUND_Z = -1.7  # ground height in the sensor frame used by the desk scenes


@dataclass(frozen=True)
class Primitive:
    """One analytic solid.

    ``center``/``size`` meaning per shape: plane -- center[2] is the ground
    height, size unused; box -- half extents, rotated by ``yaw`` about z;
    sphere -- size[0] radius; cylinder (vertical axis) -- size[0] radius,
    size[2] half height.
    """

    shape: str
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)
    yaw: float = 0.0
    class_id: int = 0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape}")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        if self.shape == "box" and min(self.size) <= 0:
            raise ValueError("box half extents must be positive")
        if self.shape == "sphere" and self.size[0] <= 0:
            raise ValueError("sphere radius must be positive")
        if self.shape == "cylinder" and (self.size[0] <= 0 or self.size[2] <= 0):
            raise ValueError("cylinder radius and half height must be positive")

    def _local(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.yaw:
            c, s = math.cos(self.yaw), math.sin(self.yaw)
            q = np.stack([c * q[:, 0] + s * q[:, 1], -s * q[:, 0] + c * q[:, 1], q[:, 2]], axis=1)
        return q

    def _world_dir(self, v: np.ndarray) -> np.ndarray:
        if not self.yaw:
            return v
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * v[:, 0] - s * v[:, 1], s * v[:, 0] + c * v[:, 1], v[:, 2]], axis=1)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        if self.shape == "plane":
            return p[:, 2] - self.center[2]
        if self.shape == "sphere":
            return np.linalg.norm(p - np.asarray(self.center), axis=1) - self.size[0]
        q = self._local(p)
        if self.shape == "box":
            d = np.abs(q) - np.asarray(self.size)
        else:
            d = np.stack([np.hypot(q[:, 0], q[:, 1]) - self.size[0], np.abs(q[:, 2]) - self.size[2]], axis=1)
        return np.linalg.norm(np.maximum(d, 0.0), axis=1) + np.minimum(d.max(axis=1), 0.0)

    def sample_surface(self, density: float, rng: np.random.Generator, box: GridConfig):
        """Uniform-by-area surface points with analytic outward normals."""
        if self.shape == "plane":
            lo, hi = box.lower, box.upper
            n = _count(np.prod(hi[:2] - lo[:2]), density)
            xy = lo[:2] + rng.random((n, 2)) * (hi[:2] - lo[:2])
            pts = np.column_stack([xy, np.full(n, self.center[2])])
            return pts, np.tile([0.0, 0.0, 1.0], (n, 1))
        if self.shape == "sphere":
            r = self.size[0]
            n = _count(4 * math.pi * r * r, density)
            v = rng.normal(size=(n, 3))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            return np.asarray(self.center) + r * v, v
        if self.shape == "box":
            pts, nrm = [], []
            h = np.asarray(self.size)
            for axis in range(3):
                u, w = [a for a in range(3) if a != axis]
                area = 4 * h[u] * h[w]
                for sign in (-1.0, 1.0):
                    n = _count(area, density)
                    q = np.zeros((n, 3))
                    q[:, axis] = sign * h[axis]
                    q[:, u] = (rng.random(n) * 2 - 1) * h[u]
                    q[:, w] = (rng.random(n) * 2 - 1) * h[w]
                    nv = np.zeros((n, 3))
                    nv[:, axis] = sign
                    pts.append(q)
                    nrm.append(nv)
            q, nv = np.concatenate(pts), np.concatenate(nrm)
            return self._world_dir(q) + np.asarray(self.center), self._world_dir(nv)
        r, hh = self.size[0], self.size[2]
        n_side = _count(2 * math.pi * r * 2 * hh, density)
        ang = rng.random(n_side) * 2 * math.pi
        side = np.column_stack([r * np.cos(ang), r * np.sin(ang), (rng.random(n_side) * 2 - 1) * hh])
        side_n = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n_side)])
        caps, caps_n = [], []
        for sign in (-1.0, 1.0):
            n = _count(math.pi * r * r, density)
            rad = r * np.sqrt(rng.random(n))
            a = rng.random(n) * 2 * math.pi
            caps.append(np.column_stack([rad * np.cos(a), rad * np.sin(a), np.full(n, sign * hh)]))
            caps_n.append(np.tile([0.0, 0.0, sign], (n, 1)))
        q = np.concatenate([side, *caps])
        nv = np.concatenate([side_n, *caps_n])
        return self._world_dir(q) + np.asarray(self.center), self._world_dir(nv)

    def to_dict(self) -> dict:
        return asdict(self)


def _count(area: float, density: float) -> int:
    return max(int(round(area * density)), 0)


@dataclass
class SceneSpec:
    primitives: list
    box: GridConfig = DESK_GRID
    seed: int = 0
    num_classes: int = len(DESK_CLASSES)

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if not 0 <= p.class_id < self.num_classes:
                raise ValueError(f"class id {p.class_id} outside [0, {self.num_classes})")

    def to_dict(self) -> dict:
        return {"primitives": [p.to_dict() for p in self.primitives], "box": self.box.to_dict(),
                "seed": self.seed, "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = [Primitive(**p) for p in d["primitives"]]
        return cls(prims, GridConfig.from_dict(d["box"]), int(d["seed"]), int(d["num_classes"]))

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Union SDF: minimum over primitives."""
        return self.sdf_and_owner(p)[0]

    def sdf_and_owner(self, p: np.ndarray):
        d = np.stack([prim.sdf(p) for prim in self.primitives], axis=0)
        owner = d.argmin(axis=0)
        return d[owner, np.arange(d.shape[1])], owner


@dataclass(frozen=True)
class LidarConfig:
    channels: int = 16
    elev_min: float = -24.8        # degrees
    elev_max: float = 2.0
    az_min: float = -90.0
    az_max: float = 90.0
    azimuth_step: float = 0.4
    noise_sigma: float = 0.01      # meters, along the ray
    max_range: float = 60.0
    trace_steps: int = 128
    trace_tol: float = 1e-3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SceneRecord:
    id: str
    input_cloud: PointCloud
    gt_cloud: PointCloud
    gt_occ: OccupancyVolume
    box: GridConfig
    analytic_sdf: Optional[Callable[[np.ndarray], np.ndarray]] = None
    sensor_origin: tuple = (0.0, 0.0, 0.0)
    num_classes: int = len(DESK_CLASSES)
    spec: Optional[SceneSpec] = None


def synth_scene(spec: SceneSpec, gt_density: float = 400.0, scene_id: str = "scene",
                lidar: Optional[LidarConfig] = None, sensor_origin=(0.0, 0.0, 0.0)) -> SceneRecord:
    """Dense analytic ground truth for ``spec`` and, if ``lidar`` is given, a simulated scan.

    Surface points of a primitive that lie strictly inside another primitive
    are dropped, so the GT cloud samples the surface of the union. Points
    outside the scene box are dropped as well.
    """
    rng = np.random.default_rng(spec.seed)
    pts, nrm, lab = [], [], []
    for i, prim in enumerate(spec.primitives):
        p, n = prim.sample_surface(gt_density, rng, spec.box)
        keep = spec.box.contains(p)
        others = [q for j, q in enumerate(spec.primitives) if j != i]
        if others and len(p):
            keep &= np.min([q.sdf(p) for q in others], axis=0) >= -1e-9
        pts.append(p[keep])
        nrm.append(n[keep])
        lab.append(np.full(int(keep.sum()), prim.class_id))
    gt = PointCloud(np.concatenate(pts), np.concatenate(nrm), np.concatenate(lab))
    gt_occ = voxelize(gt, spec.box)
    record = SceneRecord(scene_id, PointCloud(np.zeros((0, 3))), gt, gt_occ, spec.box, spec.sdf,
                         tuple(sensor_origin), spec.num_classes, spec)
    if lidar is not None:
        scan = lidar_scan(record, sensor_origin, lidar, rng=np.random.default_rng([spec.seed, 1]))
        record.input_cloud = scan.subset(spec.box.contains(scan.points))
    return record


def ray_directions(cfg: LidarConfig) -> np.ndarray:
    elev = np.radians(np.linspace(cfg.elev_min, cfg.elev_max, cfg.channels))
    n_az = int(math.floor((cfg.az_max - cfg.az_min) / cfg.azimuth_step + 1e-9)) + 1
    az = np.radians(cfg.az_min + cfg.azimuth_step * np.arange(n_az))
    e, a = np.meshgrid(elev, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1).reshape(-1, 3)


def lidar_scan(scene: SceneRecord, sensor_origin=(0.0, 0.0, 0.0), cfg: LidarConfig = LidarConfig(),
               rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Sphere-trace one ray per (channel, azimuth) against the analytic SDF.

    Only first hits are returned, so occluded surfaces yield no points; the
    angular ray pattern makes returns sparser with range. Range noise is
    Gaussian along the ray.
    """
    if scene.analytic_sdf is None:
        raise ValueError("lidar_scan needs an analytic SDF")
    rng = np.random.default_rng(0) if rng is None else rng
    origin = np.asarray(sensor_origin, dtype=np.float64)
    dirs = ray_directions(cfg)
    t = np.zeros(len(dirs))
    active = np.ones(len(dirs), dtype=bool)
    hit = np.zeros(len(dirs), dtype=bool)
    sdf_and_owner = scene.spec.sdf_and_owner if scene.spec is not None else None
    for _ in range(cfg.trace_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        d = scene.analytic_sdf(origin + t[idx, None] * dirs[idx])
        done = d < cfg.trace_tol
        hit[idx[done]] = True
        active[idx[done]] = False
        step = idx[~done]
        t[step] += d[~done]
        active[step[t[step] > cfg.max_range]] = False
    hit &= t <= cfg.max_range
    rng_t = t[hit]
    pts_exact = origin + rng_t[:, None] * dirs[hit]
    labels = None
    if sdf_and_owner is not None and hit.any():
        owner = sdf_and_owner(pts_exact)[1]
        labels = np.array([scene.spec.primitives[o].class_id for o in owner], dtype=np.int64)
    if cfg.noise_sigma > 0:
        rng_t = rng_t + rng.normal(0.0, cfg.noise_sigma, size=rng_t.shape)
    return PointCloud(origin + rng_t[:, None] * dirs[hit], labels=labels)


def benchmark_spec(seed: int, box: GridConfig = DESK_GRID) -> SceneSpec:
    """Random road-like layout: ground, 3-8 cars/walls/poles, 0-2 bushes."""
    rng = np.random.default_rng(seed)
    prims = [Primitive("plane", (0.0, 0.0, GROUND_Z), class_id=0)]
    lo, hi = box.lower, box.upper
    n_obj = int(rng.integers(3, 9))
    for _ in range(n_obj):
        x = rng.uniform(lo[0] + 2.5, hi[0] - 0.5)
        y = rng.uniform(lo[1] + 0.5, hi[1] - 0.5)
        kind = rng.choice(["car", "wall", "pole"], p=[0.5, 0.3, 0.2])
        if kind == "car":
            h = (rng.uniform(1.6, 2.3), rng.uniform(0.8, 1.0), rng.uniform(0.6, 0.8))
            prims.append(Primitive("box", (x, y, GROUND_Z + h[2]), h, rng.uniform(-0.4, 0.4), 1))
        elif kind == "wall":
            h = (rng.uniform(1.5, 3.5), rng.uniform(0.15, 0.3), rng.uniform(0.8, 1.3))
            prims.append(Primitive("box", (x, y, GROUND_Z + h[2]), h, rng.choice([0.0, math.pi / 2]), 2))
        else:
            r, hh = rng.uniform(0.15, 0.4), rng.uniform(0.9, 1.35)
            prims.append(Primitive("cylinder", (x, y, GROUND_Z + hh), (r, r, hh), 0.0, 2))
    for _ in range(int(rng.integers(0, 3))):
        r = rng.uniform(0.5, 1.1)
        x = rng.uniform(lo[0] + 2.5, hi[0] - 0.5)
        y = rng.uniform(lo[1] + 0.5, hi[1] - 0.5)
        prims.append(Primitive("sphere", (x, y, GROUND_Z + 0.6 * r), (r, r, r), class_id=3))
    return SceneSpec(prims, box, seed, len(DESK_CLASSES))


def sphere_plane_spec(seed: int = 0, box: GridConfig = DESK_GRID, radius: float = 1.5) -> SceneSpec:
    """Single sphere resting on the ground plane, centered in the box."""
    c = box.center
    prims = [Primitive("plane", (0.0, 0.0, GROUND_Z), class_id=0),
             Primitive("sphere", (c[0], c[1], GROUND_Z + radius), (radius,) * 3, class_id=3)]
    return SceneSpec(prims, box, seed, len(DESK_CLASSES))


# --- KITTI-format files -----------------------------------------------------------

def load_kitti_points(path) -> PointCloud:
    """Little-endian float32 ``(x, y, z, remission)`` records; remission is dropped."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: size {len(raw)} is not a multiple of 16 bytes")
    arr = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    return PointCloud(arr[:, :3].astype(np.float64))


def write_kitti_points(path, cloud: PointCloud, remission: float = 0.0) -> None:
    arr = np.zeros((len(cloud), 4), dtype="<f4")
    arr[:, :3] = cloud.points
    arr[:, 3] = remission
    Path(path).write_bytes(arr.tobytes())


def unpack_voxels(raw: bytes, dims: Sequence[int]) -> np.ndarray:
    """Bit-packed occupancy, most significant bit first, x-major then y then z."""
    n = int(np.prod(dims))
    if len(raw) * 8 != n:
        raise ValueError(f"occupancy file has {len(raw)} bytes, expected {n // 8}")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="big")
    return bits.reshape(tuple(dims)).astype(bool)


def pack_voxels(dense: np.ndarray) -> bytes:
    return np.packbits(dense.astype(np.uint8).reshape(-1), bitorder="big").tobytes()


def load_kitti_voxels(path_occupancy, path_labels=None, grid: GridConfig = KITTI_GRID,
                      class_map: Optional[dict] = None):
    """Occupancy (and remapped labels) in the bit-packed voxel layout.

    Labels are little-endian uint16, one per voxel in the same order. With a
    ``class_map`` every label id must have an entry; without one labels are
    returned unchanged.
    """
    dense = unpack_voxels(Path(path_occupancy).read_bytes(), grid.dims)
    occ = OccupancyVolume.from_dense(dense, grid)
    if path_labels is None:
        return occ, None
    raw = np.frombuffer(Path(path_labels).read_bytes(), dtype="<u2")
    if raw.size != int(np.prod(grid.dims)):
        raise ValueError(f"label file has {raw.size} entries, expected {int(np.prod(grid.dims))}")
    labels = raw.reshape(grid.dims).astype(np.int64)
    if class_map is not None:
        lut = {int(k): int(v) for k, v in class_map.items()}
        unknown = set(np.unique(labels).tolist()) - set(lut)
        if unknown:
            raise ValueError(f"label ids without a class-map entry: {sorted(unknown)[:10]}")
        keys = np.array(sorted(lut))
        vals = np.array([lut[k] for k in keys])
        labels = vals[np.searchsorted(keys, labels)]
    voxel_labels = labels[tuple(occ.indices.T)]
    return OccupancyVolume(grid, occ.indices, voxel_labels), labels


def kitti_scene(points_path, occupancy_path, labels_path=None, scene_id: str = "kitti",
                grid: GridConfig = KITTI_GRID, class_map=None, normal_k: int = 16,
                num_classes: int = 20) -> SceneRecord:
    """Real scan plus voxel ground truth; GT surface points are occupied-voxel centers."""
    from .sampler import estimate_normals

    cloud = load_kitti_points(points_path)
    cloud = cloud.subset(grid.contains(cloud.points))
    occ, _ = load_kitti_voxels(occupancy_path, labels_path, grid, class_map)
    centers = voxel_center(occ.indices, grid) if len(occ) else np.zeros((0, 3))
    gt = PointCloud(centers, labels=occ.labels)
    if len(gt) > normal_k:
        gt = estimate_normals(gt, normal_k, (0.0, 0.0, 0.0))
    return SceneRecord(scene_id, cloud, gt, occ, grid, None, (0.0, 0.0, 0.0), num_classes)


# --- dataset manifests ------------------------------------------------------------

@dataclass
class DatasetManifest:
    kind: str                           # "synthetic" or "kitti"
    scenes: list = field(default_factory=list)   # dicts with "id" plus file paths
    grid: GridConfig = DESK_GRID
    gt_density: float = 400.0
    lidar: LidarConfig = field(default_factory=LidarConfig)
    seed: int = 0

    def to_json(self) -> str:
        d = {"kind": self.kind, "scenes": self.scenes, "grid": self.grid.to_dict(),
             "gt_density": self.gt_density, "lidar": self.lidar.to_dict(), "seed": self.seed}
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        d = json.loads(Path(path).read_text())
        return cls(d["kind"], d["scenes"], GridConfig.from_dict(d["grid"]), float(d.get("gt_density", 400.0)),
                   LidarConfig(**d.get("lidar", {})), int(d.get("seed", 0)))


def load_dataset(manifest_path) -> list[SceneRecord]:
    """Scene records listed in a manifest; synthetic scenes are regenerated from their specs."""
    root = Path(manifest_path).parent
    man = DatasetManifest.load(manifest_path)
    out = []
    for entry in man.scenes:
        if man.kind == "synthetic":
            spec = SceneSpec.from_dict(json.loads((root / entry["path"]).read_text()))
            out.append(synth_scene(spec, man.gt_density, entry["id"], man.lidar))
        elif man.kind == "kitti":
            out.append(kitti_scene(root / entry["points"], root / entry["occupancy"],
                                   (root / entry["labels"]) if entry.get("labels") else None,
                                   entry["id"], man.grid, entry.get("class_map")))
        else:
            raise ValueError(f"unknown dataset kind {man.kind}")
    return out


def benchmark_scenes(n: int, seed: int = 0, gt_density: float = 400.0,
                     lidar: LidarConfig = LidarConfig(), box: GridConfig = DESK_GRID) -> list[SceneRecord]:
    """The seeded desk benchmark: scene ``i`` uses spec seed ``seed * 1000 + i``."""
    return [synth_scene(benchmark_spec(seed * 1000 + i, box), gt_density, f"scene_{i:03d}", lidar)
            for i in range(n)]
