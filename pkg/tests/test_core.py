import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfcomplete.core import (
    DESK_GRID, KITTI_GRID, GridConfig, OccupancyVolume, PointCloud, denormalize_coords, iou, miou,
    normalize_coords, pack_keys, unpack_keys, voxel_center, voxelize,
)

UNIT = GridConfig(origin=(0.0, 0.0, 0.0), voxel_edge=0.2, dims=(8, 8, 8))


def occ(idx, grid=UNIT, labels=None):
    return OccupancyVolume(grid, np.asarray(idx, dtype=np.int64).reshape(-1, 3),
                           None if labels is None else np.asarray(labels))


def test_grid_extent_and_validation():
    assert np.allclose(KITTI_GRID.extent, [51.2, 51.2, 6.4])
    assert np.allclose(DESK_GRID.extent, [12.8, 12.8, 3.2])
    with pytest.raises(ValueError):
        GridConfig(voxel_edge=0.0)
    with pytest.raises(ValueError):
        GridConfig(dims=(0, 4, 4))


def test_key_packing_round_trip():
    rng = np.random.default_rng(0)
    idx = rng.integers(-1000, 1000, size=(500, 3))
    assert np.array_equal(unpack_keys(pack_keys(idx)), idx)


def test_voxelize_single_point():
    v = voxelize(PointCloud(np.array([[0.1, 0.1, 0.1]])), UNIT)
    assert v.as_set() == {(0, 0, 0)}


def test_voxelize_empty_cloud():
    v = voxelize(PointCloud(np.zeros((0, 3))), UNIT)
    assert len(v) == 0


def test_voxelize_matches_floor_division_oracle():
    rng = np.random.default_rng(1)
    pts = rng.random((1000, 3)) * UNIT.extent
    v = voxelize(PointCloud(pts), UNIT)
    oracle = set()
    for p in pts:
        oracle.add(tuple(int(np.floor(c / 0.2)) for c in p))
    assert v.as_set() == oracle


def test_voxelize_drops_and_counts_out_of_box():
    pts = np.array([[0.1, 0.1, 0.1], [-0.1, 0.1, 0.1], [1.7, 0.1, 0.1]])
    v = voxelize(PointCloud(pts), UNIT)
    assert v.as_set() == {(0, 0, 0)}
    assert v.dropped == 2


def test_voxelize_half_open_faces():
    # a point on a shared face belongs to the higher-index cell
    v = voxelize(PointCloud(np.array([[0.2, 0.0, 0.0]])), UNIT)
    assert v.as_set() == {(1, 0, 0)}


def test_voxelize_rejects_non_finite():
    with pytest.raises(ValueError):
        voxelize(PointCloud(np.array([[np.nan, 0.0, 0.0]])), UNIT)


def test_voxelize_majority_label():
    pts = np.array([[0.05, 0.05, 0.05], [0.1, 0.1, 0.1], [0.15, 0.1, 0.1], [0.3, 0.1, 0.1]])
    v = voxelize(PointCloud(pts, labels=np.array([2, 1, 2, 3])), UNIT)
    assert dict(zip(map(tuple, v.indices), v.labels)) == {(0, 0, 0): 2, (1, 0, 0): 3}


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_voxelize_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((50, 3)) * UNIT.extent * 1.2 - 0.1
    a = voxelize(PointCloud(pts), UNIT)
    b = voxelize(PointCloud(pts[rng.permutation(50)]), UNIT)
    assert np.array_equal(a.indices, b.indices) and a.dropped == b.dropped


def test_voxel_center_values():
    assert np.allclose(voxel_center((0, 0, 0), UNIT), [0.1, 0.1, 0.1])
    assert np.allclose(voxel_center((255, 255, 31), KITTI_GRID), [51.1, 25.5, 4.3])
    with pytest.raises(IndexError):
        voxel_center((8, 0, 0), UNIT)


@settings(max_examples=50, deadline=None)
@given(st.tuples(st.integers(0, 255), st.integers(0, 255), st.integers(0, 31)))
def test_voxel_center_round_trip(idx):
    c = voxel_center(idx, KITTI_GRID)
    assert voxelize(PointCloud(c[None]), KITTI_GRID).as_set() == {idx}


def test_normalize_coords():
    g = KITTI_GRID
    assert np.allclose(normalize_coords(g.lower, g), [-1, -1, -1])
    assert np.allclose(normalize_coords(g.center, g), [0, 0, 0])
    x = g.lower + np.random.default_rng(2).random((100, 3)) * g.extent
    assert np.allclose(denormalize_coords(normalize_coords(x, g), g), x, atol=1e-9)
    assert np.all(np.abs(normalize_coords(x, g)) <= 1)


def test_occupancy_rejects_bad_indices():
    with pytest.raises(ValueError):
        occ([[8, 0, 0]])
    with pytest.raises(ValueError):
        occ([[1, 1, 1], [1, 1, 1]])


def test_iou_cases():
    a = occ([[0, 0, 0], [1, 0, 0]])
    assert iou(a, a).iou == 1.0
    assert iou(a, occ([[5, 5, 5]])).iou == 0.0
    g = occ([[1, 0, 0], [2, 0, 0], [3, 0, 0]])
    r = iou(a, g)
    assert (r.intersection, r.union, r.iou) == (1, 4, 0.25)
    assert iou(occ(np.zeros((0, 3))), occ(np.zeros((0, 3)))).iou == 1.0
    with pytest.raises(ValueError):
        iou(a, occ([[0, 0, 0]], grid=DESK_GRID))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = occ(np.unique(rng.integers(0, 8, (20, 3)), axis=0))
    b = occ(np.unique(rng.integers(0, 8, (20, 3)), axis=0))
    assert iou(a, b).iou == iou(b, a).iou


def test_miou_cases():
    idx = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]
    gt = occ(idx, labels=[0, 0, 1, 1])
    assert miou(gt, gt, 3).miou == 1.0
    # everything predicted as class 0 on the shared support: class 0 IoU 2/4, class 1 IoU 0
    pred = occ(idx, labels=[0, 0, 0, 0])
    r = miou(pred, gt, 3)
    assert r.per_class_iou == [0.5, 0.0, None]
    assert r.miou == 0.25
    empty = OccupancyVolume(UNIT, np.zeros((0, 3), np.int64), np.zeros(0, np.int64))
    assert miou(empty, gt, 3).miou == 0.0
    with pytest.raises(ValueError):
        miou(occ(idx, labels=[0, 0, 5, 0]), gt, 3)


def test_point_cloud_normals_checked():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), np.zeros((3, 3)))
    pc = PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))
    with pytest.raises(ValueError):
        pc.check_normals()
