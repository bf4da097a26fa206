import numpy as np
import pytest
from scipy.spatial import cKDTree

from sdfcomplete.core import GridConfig, OccupancyVolume, PointCloud, voxel_center, voxelize
from sdfcomplete.extract import (
    InferenceConfig, SdfGrid, completed_miou, evaluate_grid, evaluate_scene, extract_surface_points,
    inference_lattice, knn_label_transfer, lattice_points, marching_cubes, threshold_sweep, write_curve_csv,
)
from sdfcomplete.field import field_eval, sphere_field

CUBE = GridConfig(origin=(-2.0, -2.0, -2.0), voxel_edge=0.25, dims=(16, 16, 16))


def sphere_grid(n, radius=1.0):
    origin, spacing, counts = inference_lattice(CUBE, n)
    p = lattice_points(origin, spacing, counts)
    return SdfGrid(origin, spacing, (np.linalg.norm(p, axis=1) - radius).reshape(counts))


def test_tiny_grid_matches_pointwise_evaluation():
    fld = sphere_field(CUBE, (0.3, -0.2, 0.1), 1.0)
    sdf = evaluate_grid(fld, InferenceConfig(n_inf=2, chunk=3))
    assert sdf.counts == (2, 2, 2)
    ref = field_eval(fld, sdf.points(), with_grad=False).value.numpy()
    assert np.allclose(sdf.values.ravel(), ref, atol=0, rtol=0)


def test_exact_sdf_grid_and_extracted_points():
    fld = sphere_field(CUBE, (0.0, 0.0, 0.0), 1.0)
    sdf = evaluate_grid(fld, InferenceConfig(n_inf=32))
    ref = np.linalg.norm(sdf.points(), axis=1) - 1.0
    assert np.max(np.abs(sdf.values.ravel() - ref)) <= 1e-3
    pts = extract_surface_points(sdf, 0.1)
    assert len(pts) > 0
    assert np.all(np.abs(np.linalg.norm(pts.points, axis=1) - 1.0) < 0.1)


def test_lattice_is_cell_centred_and_shared_across_multiples():
    o, s, c = inference_lattice(CUBE, 16)
    assert c == (16, 16, 16) and s == CUBE.voxel_edge
    assert np.allclose(lattice_points(o, s, c)[:1], voxel_center((0, 0, 0), CUBE))
    coarse = lattice_points(o, s, c)
    fine = lattice_points(*inference_lattice(CUBE, 48))
    d, _ = cKDTree(fine).query(coarse)
    assert d.max() <= 1e-9


def test_sweep_is_monotone_in_point_count_and_reproducible(tmp_path):
    sdf = sphere_grid(32)
    ths = [0.02, 0.05, 0.1, 0.2, 0.4]
    counts = [len(extract_surface_points(sdf, t)) for t in ths]
    assert counts == sorted(counts)
    gt = voxelize(PointCloud(extract_surface_points(sdf, 0.1).points), CUBE)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_curve_csv(a, threshold_sweep(sdf, gt, ths))
    write_curve_csv(b, threshold_sweep(sdf, gt, ths))
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0] == "v_th,iou"


def test_marching_cubes_sphere_radius_and_area():
    sdf = sphere_grid(64)
    mesh = marching_cubes(sdf)
    r = np.linalg.norm(mesh.vertices, axis=1)
    diag = np.sqrt(3) * sdf.spacing
    assert np.max(np.abs(r - 1.0)) <= 1.5 * diag
    assert mesh.area() == pytest.approx(4 * np.pi, rel=0.05)


def test_marching_cubes_constant_and_sign_flip():
    sdf = sphere_grid(16)
    assert marching_cubes(SdfGrid(sdf.origin, sdf.spacing, np.ones(sdf.counts))).is_empty
    a = marching_cubes(sdf)
    b = marching_cubes(SdfGrid(sdf.origin, sdf.spacing, -sdf.values))
    assert len(a.vertices) == len(b.vertices)
    d, _ = cKDTree(a.vertices).query(b.vertices)
    assert d.max() <= 1e-9


def test_mesh_resolution_hausdorff():
    coarse, fine = marching_cubes(sphere_grid(32)), marching_cubes(sphere_grid(64))
    d1, _ = cKDTree(fine.vertices).query(coarse.vertices)
    d2, _ = cKDTree(coarse.vertices).query(fine.vertices)
    assert max(d1.max(), d2.max()) <= 2 * np.sqrt(3) * (CUBE.extent[0] / 32)


def test_mesh_samples_lie_on_triangles():
    mesh = marching_cubes(sphere_grid(32))
    s = mesh.sample(500, np.random.default_rng(0))
    assert np.all(np.abs(np.linalg.norm(s, axis=1) - 1.0) <= 2 * np.sqrt(3) * CUBE.extent[0] / 32)


def test_knn_k1_returns_labels_verbatim():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.normal(size=(300, 3)), labels=rng.integers(0, 5, 300))
    assert np.array_equal(knn_label_transfer(cloud, cloud.points, k=1), cloud.labels)


def test_knn_majority_against_brute_force():
    rng = np.random.default_rng(1)
    cloud = PointCloud(rng.normal(size=(200, 3)), labels=rng.integers(0, 3, 200))
    q = rng.normal(size=(100, 3))
    got = knn_label_transfer(cloud, q, k=5)
    for i in range(len(q)):
        order = np.argsort(np.linalg.norm(cloud.points - q[i], axis=1), kind="stable")[:5]
        lab = cloud.labels[order]
        cnt = np.bincount(lab, minlength=3)
        tied = np.flatnonzero(cnt == cnt.max())
        expect = next(v for v in lab if v in tied)
        assert got[i] == expect


def test_knn_hand_cases():
    cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 0, 0], [1.1, 0, 0], [5.0, 0, 0]]), labels=np.array([0, 1, 1, 2]))
    assert knn_label_transfer(cloud, [[0.1, 0, 0]], k=3).tolist() == [1]      # two votes beat one
    assert knn_label_transfer(cloud, [[0.4, 0, 0]], k=2).tolist() == [0]      # tie goes to the nearest
    with pytest.raises(ValueError):
        knn_label_transfer(PointCloud(np.zeros((2, 3))), [[0, 0, 0]])


def test_hand_iou_and_perfect_score():
    g = GridConfig(origin=(0.0, 0.0, 0.0), voxel_edge=1.0, dims=(4, 4, 4))
    gt = OccupancyVolume(g, np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]))
    pred = PointCloud(np.array([[0.5, 0.5, 0.5], [1.5, 0.5, 0.5], [0.5, 3.5, 0.5]]))
    rep = evaluate_scene(pred, gt, g)
    assert (rep.intersection, rep.union) == (2, 5) and rep.iou == pytest.approx(0.4)
    assert evaluate_scene(PointCloud(voxel_center(gt.indices, g)), gt, g).iou == 1.0


def test_completed_miou_ignores_missed_voxels():
    g = GridConfig(origin=(0.0, 0.0, 0.0), voxel_edge=1.0, dims=(4, 4, 4))
    gt = OccupancyVolume(g, np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]]), np.array([0, 1, 1]))
    pred = OccupancyVolume(g, np.array([[0, 0, 0], [1, 0, 0], [3, 3, 3]]), np.array([0, 0, 1]))
    rep = completed_miou(pred, gt, 2)
    # shared voxels (0,0,0) and (1,0,0): class 0 IoU 1/2, class 1 IoU 0/1
    assert rep.per_class_iou == [0.5, 0.0] and rep.miou == 0.25
    with pytest.raises(ValueError):
        completed_miou(OccupancyVolume(g, pred.indices), gt, 2)
