import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shiftseg import oracle
from shiftseg.pointcloud import (IGNORE_LABEL, PointCloud, dilate_mask, knn,
                                 local_curvature, local_density, sector_split,
                                 voxelize)
from shiftseg.rng import Stream


def make_cloud(seed, n=300, scale=10.0):
    s = Stream(seed, "pc-test")
    pos = s.uniform(3 * n).reshape(n, 3) * scale
    labels = s.integers(n, 5).astype(np.uint16)
    return PointCloud(pos, labels, f"test-{seed}")


def test_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)), np.zeros(3, np.uint16), "x")
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros(2, np.uint16), "x")
    bad = np.zeros((3, 3))
    bad[1, 1] = np.inf
    with pytest.raises(ValueError):
        PointCloud(bad, np.zeros(3, np.uint16), "x")


# ---------------------------------------------------------------------------
# voxelize


def test_voxelize_same_cell():
    cloud = PointCloud(np.array([[0.2, 0.2, 0.2], [0.8, 0.9, 0.1]]),
                       np.array([1, 2], np.uint16), "two")
    grid = voxelize(cloud, 1.0)
    assert grid.num_cells == 1
    assert set(grid.occupied[(0, 0, 0)].tolist()) == {0, 1}


def test_voxelize_two_cells():
    cloud = PointCloud(np.array([[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]),
                       np.array([0, 0], np.uint16), "two")
    grid = voxelize(cloud, 1.0)
    assert grid.num_cells == 2


def test_voxelize_matches_bruteforce_grouping():
    cloud = make_cloud(3, n=500)
    grid = voxelize(cloud, 0.9)
    ref = oracle.brute_voxel_cells(cloud.positions, 0.9)
    assert set(grid.occupied) == set(ref)
    for key, members in ref.items():
        assert grid.occupied[key].tolist() == sorted(members)
        assert grid.rep_index[np.flatnonzero(
            (grid.cell_keys == np.array(key)).all(axis=1))[0]] == min(members)


def test_voxelize_partition_covers_every_point():
    cloud = make_cloud(4, n=400)
    grid = voxelize(cloud, 1.3)
    seen = np.concatenate([v for v in grid.occupied.values()])
    assert sorted(seen.tolist()) == list(range(len(cloud)))


def test_voxel_majority_label_smallest_id_tiebreak():
    pos = np.zeros((4, 3))
    cloud = PointCloud(pos, np.array([3, 3, 1, 1], np.uint16), "tie")
    grid = voxelize(cloud, 1.0)
    assert grid.rep_label[0] == 1
    cloud2 = PointCloud(pos, np.array([3, 3, 3, 1], np.uint16), "maj")
    assert voxelize(cloud2, 1.0).rep_label[0] == 3


def test_voxelize_empty_and_bad_size():
    empty = PointCloud(np.zeros((0, 3)), np.zeros(0, np.uint16), "empty")
    assert voxelize(empty, 0.5).num_cells == 0
    with pytest.raises(ValueError):
        voxelize(empty, 0.0)


# ---------------------------------------------------------------------------
# knn


def test_knn_collinear():
    cloud = PointCloud(np.array([[0, 0, 0], [1, 0, 0], [3, 0, 0]], dtype=float),
                       np.zeros(3, np.uint16), "line")
    nn = knn(cloud, 1)
    assert nn.indices[:, 0].tolist() == [1, 0, 1]


def test_knn_square_symmetry():
    pos = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], dtype=float)
    nn = knn(PointCloud(pos, np.zeros(4, np.uint16), "sq"), 2)
    for i, nbrs in enumerate(nn.indices):
        # edge-adjacent corners, never the diagonal
        assert (i + 2) % 4 not in nbrs.tolist()


def test_knn_matches_bruteforce():
    cloud = make_cloud(5, n=300)
    nn = knn(cloud, 8)
    ref_idx, ref_dist = oracle.brute_knn(cloud.positions, 8)
    assert np.array_equal(nn.indices, ref_idx)
    assert np.max(np.abs(nn.distances - ref_dist)) < 1e-9


def test_knn_distances_sorted_and_consistent():
    cloud = make_cloud(6, n=200)
    nn = knn(cloud, 5)
    assert np.all(np.diff(nn.distances, axis=1) >= 0)
    recomputed = np.linalg.norm(
        cloud.positions[:, None, :] - cloud.positions[nn.indices], axis=2)
    assert np.max(np.abs(recomputed - nn.distances)) < 1e-9


def test_knn_rejects_k_ge_n():
    cloud = make_cloud(7, n=10)
    with pytest.raises(ValueError):
        knn(cloud, 10)


def test_knn_permutation_invariance():
    cloud = make_cloud(8, n=150)
    nn = knn(cloud, 4)
    perm = Stream(9).permutation(len(cloud))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(cloud))
    shuffled = PointCloud(cloud.positions[perm], cloud.labels[perm], "shuffled")
    nn2 = knn(shuffled, 4)
    for i in range(len(cloud)):
        orig = set(nn.indices[i].tolist())
        mapped = set(int(perm[j]) for j in nn2.indices[inv[i]])
        assert orig == mapped


# ---------------------------------------------------------------------------
# density and curvature


def test_density_pairs():
    pos = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
    cloud = PointCloud(pos, np.zeros(2, np.uint16), "pair")
    nn = knn(cloud, 1)
    assert np.allclose(local_density(cloud, nn), [0.5, 0.5], atol=0)


def test_density_duplicate_cap():
    pos = np.zeros((3, 3))
    pos[2] = [5, 5, 5]
    cloud = PointCloud(pos, np.zeros(3, np.uint16), "dup")
    nn = knn(cloud, 1)
    dens = local_density(cloud, nn)
    assert dens[0] == 1e12 and dens[1] == 1e12


def test_density_matches_bruteforce_knn():
    cloud = make_cloud(10, n=250)
    nn = knn(cloud, 6)
    _, ref_dist = oracle.brute_knn(cloud.positions, 6)
    assert np.allclose(local_density(cloud, nn), 1.0 / ref_dist[:, -1], rtol=1e-12)


def test_curvature_line_and_plane():
    t = np.linspace(0, 5, 40)
    line = np.stack([t, 2 * t, -t], axis=1)
    cloud = PointCloud(line, np.zeros(40, np.uint16), "line")
    assert np.max(local_curvature(cloud, knn(cloud, 6))) < 1e-12

    s = Stream(11)
    plane = np.stack([s.uniform(60) * 4, s.uniform(60) * 4, np.zeros(60)], axis=1)
    cloudp = PointCloud(plane, np.zeros(60, np.uint16), "plane")
    assert np.max(local_curvature(cloudp, knn(cloudp, 8))) < 1e-9


def test_curvature_sphere_patch_matches_reference_eigensolver():
    s = Stream(12)
    n = 200
    theta = s.uniform(n) * 0.8
    phi = s.uniform(n) * 0.8
    pts = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi),
                    np.cos(theta)], axis=1)
    cloud = PointCloud(pts, np.zeros(n, np.uint16), "sphere")
    nn = knn(cloud, 12)
    curv = local_curvature(cloud, nn)
    for i in range(0, n, 25):
        hood = np.concatenate([[i], nn.indices[i]])
        centered = pts[hood] - pts[hood].mean(axis=0)
        cov = centered.T @ centered / hood.shape[0]
        eig = oracle.eigvals_sym3_reference(cov)
        expect = eig[0] / eig.sum() if eig.sum() > 0 else 0.0
        assert abs(curv[i] - expect) < 1e-8


def test_curvature_bounds():
    cloud = make_cloud(13, n=300)
    curv = local_curvature(cloud, knn(cloud, 8))
    assert np.all(curv >= 0.0) and np.all(curv <= 1.0 / 3.0 + 1e-12)


# ---------------------------------------------------------------------------
# dilation


def test_dilate_radius_zero_identity():
    cloud = make_cloud(14, n=100)
    mask = Stream(15).uniform(100) < 0.2
    assert np.array_equal(dilate_mask(cloud, mask, 0.0), mask)


def test_dilate_fills_cloud():
    cloud = make_cloud(16, n=80)
    mask = np.zeros(80, bool)
    mask[3] = True
    out = dilate_mask(cloud, mask, 1000.0)
    assert out.all()


def test_dilate_matches_bruteforce():
    cloud = make_cloud(17, n=250)
    mask = Stream(18).uniform(250) < 0.1
    for radius in (0.5, 1.7):
        assert np.array_equal(dilate_mask(cloud, mask, radius),
                              oracle.brute_dilate(cloud.positions, mask, radius))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.1, 3.0))
def test_dilate_monotone_and_double_superset(seed, radius):
    cloud = make_cloud(19, n=120)
    m1 = Stream(seed, "m1").uniform(120) < 0.1
    m2 = m1 | (Stream(seed, "m2").uniform(120) < 0.1)
    d1 = dilate_mask(cloud, m1, radius)
    d2 = dilate_mask(cloud, m2, radius)
    assert np.all(d1 <= d2)  # monotone in the input mask
    twice = dilate_mask(cloud, d1, radius)
    assert np.all(d1 <= twice)  # dilating again only grows the set


# ---------------------------------------------------------------------------
# sector split


def test_sector_split_quadrants():
    pos = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], dtype=float)
    cloud = PointCloud(pos, np.zeros(4, np.uint16), "quad")
    sec = sector_split(cloud, 4)
    assert sec[0] == 2  # atan2 = 0 maps to mid-range
    assert len(set(sec.tolist())) == 4
    # +pi and -pi describe the same ray and must share a sector
    assert sec[2] == 0


def test_sector_split_matches_direct_binning():
    cloud = make_cloud(20, n=400)
    for s in (2, 5, 8):
        sec = sector_split(cloud, s)
        ang = np.arctan2(cloud.positions[:, 1], cloud.positions[:, 0]) + np.pi
        ref = np.floor(s * ang / (2 * np.pi)).astype(np.int64) % s
        assert np.array_equal(sec, ref)
        assert sec.min() >= 0 and sec.max() < s


def test_sector_split_rejects_small():
    with pytest.raises(ValueError):
        sector_split(make_cloud(21, n=10), 1)
