import json
import math

import numpy as np
import pytest

from sdfcomplete.core import DESK_GRID, GridConfig, voxelize
from sdfcomplete.data import (
    GROUND_Z, DatasetManifest, LidarConfig, Primitive, SceneSpec, benchmark_scenes, benchmark_spec,
    kitti_scene, lidar_scan, load_dataset, load_kitti_points, load_kitti_voxels, pack_voxels, ray_directions,
    synth_scene, unpack_voxels, write_kitti_points,
)
from sdfcomplete.core import PointCloud
from sdfcomplete.sampler import estimate_normals

SMALL = GridConfig(origin=(0.0, 0.0, 0.0), voxel_edge=0.5, dims=(8, 8, 8))
NOISELESS = LidarConfig(noise_sigma=0.0)


def box_sdf_oracle(p, center, half, yaw):
    """Exact box distance written out per point: rotate into the box frame, then clamp."""
    out = np.empty(len(p))
    c, s = math.cos(yaw), math.sin(yaw)
    for i, x in enumerate(p):
        d = np.asarray(x) - np.asarray(center)
        local = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
        q = np.abs(local) - np.asarray(half)
        outside = math.sqrt(sum(max(v, 0.0) ** 2 for v in q))
        out[i] = outside + min(max(q[0], q[1], q[2]), 0.0)
    return out


# ---- synthetic scenes --------------------------------------------------------------

def test_sphere_ground_truth_on_surface_with_radial_normals():
    c = (3.0, 2.0, 1.5)
    s = synth_scene(SceneSpec([Primitive("sphere", c, (2.0, 2.0, 2.0), class_id=3)], GridConfig(
        origin=(0.0, 0.0, -1.0), voxel_edge=0.25, dims=(24, 24, 24))), gt_density=200.0)
    d = s.gt_cloud.points - np.asarray(c)
    r = np.linalg.norm(d, axis=1)
    assert len(r) > 100 and np.max(np.abs(r - 2.0)) <= 1e-6
    assert np.allclose(s.gt_cloud.normals, d / r[:, None], atol=1e-9)
    assert set(s.gt_cloud.labels.tolist()) == {3}


def test_ground_plane_normals():
    s = synth_scene(SceneSpec([Primitive("plane", (0, 0, GROUND_Z))]), gt_density=50.0)
    assert np.all(s.gt_cloud.normals == [0.0, 0.0, 1.0])
    assert np.all(s.gt_cloud.points[:, 2] == GROUND_Z)


def test_union_sdf_matches_per_primitive_oracle():
    plane = Primitive("plane", (0, 0, GROUND_Z))
    box = Primitive("box", (5.0, 1.0, GROUND_Z + 0.7), (2.0, 0.9, 0.7), yaw=0.3, class_id=1)
    spec = SceneSpec([plane, box])
    rng = np.random.default_rng(0)
    x = DESK_GRID.lower + rng.random((300, 3)) * DESK_GRID.extent
    oracle = np.minimum(x[:, 2] - GROUND_Z, box_sdf_oracle(x, box.center, box.size, box.yaw))
    assert np.allclose(spec.sdf(x), oracle, atol=1e-12)


def test_cylinder_sdf_hand_values():
    cyl = Primitive("cylinder", (0, 0, 0), (1.0, 1.0, 2.0))
    pts = np.array([[3.0, 0, 0], [0, 0, 5.0], [0.5, 0, 0], [4.0, 0, 6.0]])
    assert np.allclose(cyl.sdf(pts), [2.0, 3.0, -0.5, 5.0])


def test_primitive_and_spec_validation():
    with pytest.raises(ValueError):
        Primitive("sphere", size=(0.0, 0, 0))
    with pytest.raises(ValueError):
        Primitive("box", size=(1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        Primitive("torus")
    with pytest.raises(ValueError):
        SceneSpec([])
    with pytest.raises(ValueError):
        SceneSpec([Primitive("plane", class_id=4)])


def test_benchmark_scene_invariants():
    s = benchmark_scenes(1, seed=3)[0]
    assert np.mean(np.abs(s.analytic_sdf(s.gt_cloud.points))) <= 1e-6
    assert s.gt_occ == voxelize(s.gt_cloud, s.box)
    est = estimate_normals(PointCloud(s.gt_cloud.points), 16, s.sensor_origin)
    cos = np.abs(np.einsum("ij,ij->i", np.nan_to_num(est.normals), s.gt_cloud.normals))
    assert np.mean(cos >= math.cos(math.radians(10.0))) >= 0.95
    n_prims = len(s.spec.primitives)
    assert 4 <= n_prims <= 11
    assert s.gt_cloud.labels.max() < 4


def test_synth_is_deterministic():
    a, b = benchmark_scenes(2, seed=5), benchmark_scenes(2, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.gt_cloud.points, y.gt_cloud.points)
        assert np.array_equal(x.input_cloud.points, y.input_cloud.points)
    assert benchmark_spec(1).to_dict() == benchmark_spec(1).to_dict()


# ---- simulated LiDAR ---------------------------------------------------------------

def test_ground_rings_follow_closed_form_radii():
    spec = SceneSpec([Primitive("plane", (0, 0, GROUND_Z))])
    s = synth_scene(spec, gt_density=1.0)
    cfg = LidarConfig(noise_sigma=0.0, az_min=-30.0, az_max=30.0)
    scan = lidar_scan(s, (0.0, 0.0, 0.0), cfg)
    elev = np.radians(np.linspace(cfg.elev_min, cfg.elev_max, cfg.channels))
    elev = np.array([e for e in elev if e < 0 and 1.7 / math.tan(-e) <= cfg.max_range])
    radii = 1.7 / np.tan(-elev)
    r = np.hypot(scan.points[:, 0], scan.points[:, 1])
    ring = np.argmin(np.abs(r[:, None] - radii[None, :]), axis=1)
    # a hit stops once the SDF is below the tracer tolerance, i.e. up to tol / tan|e| short of the ring
    short = radii[ring] - r
    assert np.all(short >= -1e-9) and np.all(short <= cfg.trace_tol / np.tan(-elev[ring]) + 1e-9)
    rings = sorted(set(ring.tolist()))
    assert len(rings) == len(radii)
    # spacing along a ring is r * azimuth step, so it grows with range
    step = math.radians(cfg.azimuth_step)
    spacing = [radii[i] * step for i in rings]
    assert all(a < b for a, b in zip(spacing, spacing[1:]))


def test_wall_occludes_sphere():
    wall = Primitive("box", (3.0, 0.0, 0.0), (0.2, 4.0, 3.0), class_id=2)
    ball = Primitive("sphere", (6.0, 0.0, 0.0), (1.0, 1.0, 1.0), class_id=3)
    box = GridConfig(origin=(0.0, -6.4, -3.2), voxel_edge=0.2, dims=(64, 64, 32))
    s = synth_scene(SceneSpec([wall, ball], box), gt_density=20.0)
    scan = lidar_scan(s, (0.0, 0.0, 0.0), LidarConfig(noise_sigma=0.0, az_min=-20, az_max=20,
                                                      elev_min=-15, elev_max=15))
    assert len(scan) > 0
    assert np.sum(scan.labels == 3) == 0
    assert np.all(np.abs(ball.sdf(scan.points)) > 0.5)


def test_noiseless_returns_lie_on_surface():
    s = synth_scene(benchmark_spec(7), gt_density=10.0)
    scan = lidar_scan(s, (0.0, 0.0, 0.0), NOISELESS)
    assert len(scan) > 100
    assert np.max(np.abs(s.analytic_sdf(scan.points))) <= 1e-3


def test_point_count_non_increasing_in_azimuth_step():
    s = synth_scene(benchmark_spec(2), gt_density=10.0)
    counts = [len(lidar_scan(s, (0, 0, 0), LidarConfig(azimuth_step=a))) for a in (0.2, 0.4, 0.8, 1.6, 3.2)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_ray_directions_are_unit():
    d = ray_directions(LidarConfig())
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0)
    assert len(d) == 16 * 451


# ---- KITTI-format files -------------------------------------------------------------

def test_kitti_points_files(tmp_path):
    p = tmp_path / "a.bin"
    p.write_bytes(np.arange(8, dtype="<f4").tobytes())
    assert len(load_kitti_points(p)) == 2
    known = np.array([[1.5, -2.0, 0.25], [10.0, 3.0, -1.75], [0.0, 0.0, 0.0]])
    raw = np.column_stack([known, [0.1, 0.2, 0.3]]).astype("<f4").tobytes()
    p.write_bytes(raw)
    assert np.array_equal(load_kitti_points(p).points, known)
    p.write_bytes(b"")
    assert len(load_kitti_points(p)) == 0
    p.write_bytes(b"\x00" * 20)
    with pytest.raises(ValueError):
        load_kitti_points(p)
    write_kitti_points(p, PointCloud(known))
    assert np.array_equal(load_kitti_points(p).points, known)


def test_kitti_voxel_layout(tmp_path):
    occ_path = tmp_path / "v.bin"
    occ_path.write_bytes(b"\xff" * (8 * 8 * 8 // 8))
    occ, _ = load_kitti_voxels(occ_path, grid=SMALL)
    assert len(occ) == 512
    raw = bytearray(64)
    raw[0] = 0x80
    occ_path.write_bytes(bytes(raw))
    occ, _ = load_kitti_voxels(occ_path, grid=SMALL)
    assert occ.indices.tolist() == [[0, 0, 0]]
    raw = bytearray(64)
    raw[0] = 0x01           # eighth bit: z = 7
    occ_path.write_bytes(bytes(raw))
    assert load_kitti_voxels(occ_path, grid=SMALL)[0].indices.tolist() == [[0, 0, 7]]
    occ_path.write_bytes(b"\x00" * 63)
    with pytest.raises(ValueError):
        load_kitti_voxels(occ_path, grid=SMALL)


def test_kitti_voxel_fixture_round_trip(tmp_path):
    five = [(0, 0, 1), (1, 2, 3), (7, 7, 7), (4, 0, 6), (2, 5, 0)]
    dense = np.zeros(SMALL.dims, dtype=bool)
    for v in five:
        dense[v] = True
    assert np.array_equal(unpack_voxels(pack_voxels(dense), SMALL.dims), dense)
    (tmp_path / "v.bin").write_bytes(pack_voxels(dense))
    labels = np.zeros(SMALL.dims, dtype="<u2")
    for k, v in enumerate(five):
        labels[v] = 10 * (k + 1)
    (tmp_path / "v.label").write_bytes(labels.tobytes())
    cmap = {0: 0, 10: 1, 20: 1, 30: 2, 40: 3, 50: 3}
    occ, dense_labels = load_kitti_voxels(tmp_path / "v.bin", tmp_path / "v.label", SMALL, cmap)
    assert occ.as_set() == set(five)
    got = {tuple(i): int(l) for i, l in zip(occ.indices.tolist(), occ.labels)}
    assert got == {v: cmap[10 * (k + 1)] for k, v in enumerate(five)}
    with pytest.raises(ValueError):
        load_kitti_voxels(tmp_path / "v.bin", tmp_path / "v.label", SMALL, {0: 0, 10: 1})


def test_kitti_scene_and_manifest(tmp_path):
    dense = np.zeros(SMALL.dims, dtype=bool)
    dense[1:7, 1:7, 1] = True
    (tmp_path / "v.bin").write_bytes(pack_voxels(dense))
    pts = np.array([[1.0, 1.0, 0.75], [2.0, 2.0, 0.75], [50.0, 0.0, 0.0]])
    write_kitti_points(tmp_path / "p.bin", PointCloud(pts))
    s = kitti_scene(tmp_path / "p.bin", tmp_path / "v.bin", grid=SMALL)
    assert len(s.input_cloud) == 2                      # the far point is outside the box
    assert len(s.gt_cloud) == 36 and s.gt_cloud.normals is not None
    man = DatasetManifest("kitti", [{"id": "k0", "points": "p.bin", "occupancy": "v.bin"}], SMALL)
    (tmp_path / "m.json").write_text(man.to_json())
    [r] = load_dataset(tmp_path / "m.json")
    assert r.id == "k0" and r.gt_occ == s.gt_occ


def test_synthetic_manifest_regenerates_scenes(tmp_path):
    spec = benchmark_spec(4)
    (tmp_path / "s.json").write_text(json.dumps(spec.to_dict()))
    man = DatasetManifest("synthetic", [{"id": "x", "path": "s.json"}], gt_density=50.0)
    (tmp_path / "m.json").write_text(man.to_json())
    [r] = load_dataset(tmp_path / "m.json")
    direct = synth_scene(spec, 50.0, "x", LidarConfig())
    assert np.array_equal(r.gt_cloud.points, direct.gt_cloud.points)
    assert np.array_equal(r.input_cloud.points, direct.input_cloud.points)
