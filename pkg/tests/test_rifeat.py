import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmcnet.geom import (NeighborGraph, PointCloud, apply_transform, axis_angle_matrix, estimate_normals, knn_graph,
                         random_se3)
from gmcnet.rifeat import (FeatureMatrix, darboux_pair, fpfh_features, ppf_features, ppf_pair, ppf_pairs, rri_features,
                           xyz_dxyz_features)


def unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def sample_cloud(n=256, seed=0):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(n, 3)) * [1.0, 0.7, 0.4]
    return estimate_normals(PointCloud(p), 10)


def angle_oracle(a, b):
    # atan2 form, independent of the clamped arccos used by the library
    return math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b)))


def test_feature_matrix_validation(tmp_path):
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((3, 5)), "PPF4")
    with pytest.raises(ValueError):
        FeatureMatrix(np.full((2, 4), np.nan), "PPF4")
    with pytest.raises(ValueError):
        FeatureMatrix(np.zeros((2, 4)), "SHOT")
    fm = FeatureMatrix(np.arange(8.0).reshape(2, 4), "PPF4")
    fm.to_csv(tmp_path / "f.csv")
    lines = (tmp_path / "f.csv").read_text().splitlines()
    assert lines[0] == "index,c0,c1,c2,c3" and lines[2].startswith("1,4")


def test_rri_orthogonal_pair():
    c = PointCloud(np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    f = rri_features(c, 2)
    assert f.channels == 8
    assert np.allclose(f.values[0, [2, 6]], np.pi / 2)
    assert np.allclose(f.values[:, [0, 1]], 1.0)


def test_rri_requires_two_neighbours():
    with pytest.raises(ValueError):
        rri_features(PointCloud(np.eye(3)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_rri_rotation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(64, 3))
    r = random_se3(rng=rng).rotation
    a = rri_features(PointCloud(p), 2).values
    b = rri_features(PointCloud(p @ r.T), 2).values
    assert np.max(np.abs(a - b)) < 1e-9


def test_rri_origin_point_defined():
    p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
    f = rri_features(PointCloud(p), 2).values
    assert np.all(f[0, [2, 3, 6, 7]] == 0)


def test_rri_sensitive_to_recentering():
    cloud = sample_cloud(400, 1)
    p = cloud.points - cloud.points.mean(0)
    keep = np.argsort(p[:, 0])[:250]
    part = p[keep]
    before = rri_features(PointCloud(part), 2).values
    after = rri_features(PointCloud(part - part.mean(0)), 2).values
    assert np.mean(np.abs(before - after)) > 0


def test_ppf_pair_example():
    q = ppf_pair([0, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1])
    assert np.allclose(q, (1, np.pi / 2, np.pi / 2, 0))
    same = ppf_pair([1, 2, 3], [0, 0, 1], [1, 2, 3], [0, 1, 0])
    assert same.dist == 0 and same.angle_n1_d == 0 and same.angle_n2_d == 0


def test_ppf_against_formula_oracle():
    rng = np.random.default_rng(2)
    p1, p2 = rng.normal(size=(1000, 3)), rng.normal(size=(1000, 3))
    n1, n2 = unit_rows(rng.normal(size=(1000, 3))), unit_rows(rng.normal(size=(1000, 3)))
    got = ppf_pairs(p1, n1, p2, n2)
    want = np.array([[np.linalg.norm(b - a), angle_oracle(b - a, m), angle_oracle(b - a, o), angle_oracle(m, o)]
                     for a, m, b, o in zip(p1, n1, p2, n2)])
    assert np.max(np.abs(got - want)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_ppf_se3_invariant(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = rng.normal(size=3), rng.normal(size=3)
    n1, n2 = unit_rows(rng.normal(size=(2, 3)))
    t = random_se3(rng=rng)
    a = ppf_pair(p1, n1, p2, n2)
    b = ppf_pair(t.apply(p1[None])[0], t.rotation @ n1, t.apply(p2[None])[0], t.rotation @ n2)
    assert np.max(np.abs(np.subtract(a, b))) < 1e-9
    assert a.dist >= 0 and all(0 <= x <= np.pi for x in a[1:])


def test_ppf_features_plane_and_rigid():
    g = np.stack(np.meshgrid(np.arange(8.0), np.arange(8.0)), -1).reshape(-1, 2) / 8
    plane = PointCloud(np.c_[g, np.zeros(len(g))], np.tile([0.0, 0, 1], (len(g), 1)))
    f = ppf_features(plane, knn_graph(plane, k=6)).values.reshape(len(g), 6, 4)
    assert np.all(f[:, :, 3] == 0)
    cloud = sample_cloud(200, 3)
    graph = knn_graph(cloud, k=8)
    t = random_se3(rng=4)
    a = ppf_features(cloud, graph).values
    b = ppf_features(apply_transform(cloud, t), graph).values
    assert np.max(np.abs(a - b)) < 1e-9
    with pytest.raises(ValueError):
        ppf_features(PointCloud(cloud.points), graph)


def test_ppf_with_reestimated_normals_can_differ():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(300, 3))
    t = random_se3(trans_range=(0.5, 0.5), rng=6)
    c0 = estimate_normals(PointCloud(p), 10)
    c1 = estimate_normals(PointCloud(t.apply(p)), 10)
    g = knn_graph(c0, k=8)
    a, b = ppf_features(c0, g).values, ppf_features(c1, g).values
    cos = np.sum(a * b, 1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    assert cos.mean() < 1


def naive_fpfh(points, normals, k):
    n = len(points)
    nbrs = []
    for i in range(n):
        d = sorted((float(np.sum((points[i] - points[j]) ** 2)), j) for j in range(n) if j != i)
        nbrs.append([j for _, j in d[:k]])

    def pair(i, j):
        p1, n1, p2, n2 = points[i], normals[i], points[j], normals[j]
        d = p2 - p1
        f4 = math.sqrt(float(d @ d))
        a1, a2 = float(n1 @ d) / f4, float(n2 @ d) / f4
        if math.acos(min(1.0, abs(a1))) > math.acos(min(1.0, abs(a2))) + 1e-9:
            n1, n2, d, f3 = n2, n1, -d, -a2
        else:
            f3 = a1
        v = np.cross(d, n1)
        v = v / np.linalg.norm(v)
        w = np.cross(n1, v)
        return math.atan2(float(w @ n2), float(n1 @ n2)), float(v @ n2), f3

    def bin_of(x, lo, hi):
        return min(10, max(0, int(math.floor(11 * (x - lo) / (hi - lo)))))

    spfh = np.zeros((n, 33))
    for i in range(n):
        for j in nbrs[i]:
            th, al, ph = pair(i, j)
            spfh[i, bin_of(th, -math.pi, math.pi)] += 100.0 / k
            spfh[i, 11 + bin_of(al, -1, 1)] += 100.0 / k
            spfh[i, 22 + bin_of(ph, -1, 1)] += 100.0 / k
    out = np.zeros((n, 33))
    for i in range(n):
        acc = spfh[i].copy()
        for j in nbrs[i]:
            acc += spfh[j] / np.linalg.norm(points[i] - points[j]) / k
        for b in range(3):
            block = acc[11 * b:11 * b + 11]
            out[i, 11 * b:11 * b + 11] = 100.0 * block / block.sum()
    return out


def test_fpfh_against_naive_oracle():
    cloud = sample_cloud(256, 7)
    got = fpfh_features(cloud, 16).values
    want = naive_fpfh(cloud.points, cloud.normals, 16)
    assert got.shape == (256, 33)
    assert np.max(np.abs(got - want)) < 1e-9


def test_fpfh_rigid_invariance_and_errors():
    cloud = sample_cloud(300, 8)
    t = random_se3(rng=9)
    a = fpfh_features(cloud, 12).values
    b = fpfh_features(apply_transform(cloud, t), 12).values
    assert np.max(np.abs(a - b)) < 1e-6
    with pytest.raises(ValueError):
        fpfh_features(cloud, 4)
    with pytest.raises(ValueError):
        fpfh_features(PointCloud(cloud.points), 8)


def test_fpfh_plane_concentrates_in_zero_angle_bins():
    rng = np.random.default_rng(10)
    xy = rng.uniform(-1, 1, size=(300, 2))
    plane = PointCloud(np.c_[xy, np.zeros(300)], np.tile([0.0, 0, 1], (300, 1)))
    h = fpfh_features(plane, 10).values
    # theta = 0, alpha = 0, phi = 0 fall in the middle bin of each block
    assert np.allclose(h[:, [5, 16, 27]], 100.0)


def test_fpfh_antiparallel_normals_share_one_theta_bin():
    # two parallel sheets with facing normals: theta sits exactly on the +-pi wrap
    p1 = np.zeros(3)
    n1 = np.array([0.0, 0, 1])
    for seed in range(20):
        r = random_se3(rng=seed).rotation
        d = r @ np.array([1.0, 0.3, 0.2])
        theta, _, _ = darboux_pair(r @ p1, r @ n1, r @ p1 + d, -(r @ n1))
        assert theta == np.pi


def test_xyz_dxyz_examples():
    rng = np.random.default_rng(11)
    p = rng.normal(size=(100, 3))
    p -= p.mean(0)
    ident = NeighborGraph(np.arange(100), np.arange(100)[:, None], 1)
    xyz, dxyz = xyz_dxyz_features(PointCloud(p), ident)
    assert np.array_equal(xyz.values, p) and np.all(dxyz.values == 0)
    g = knn_graph(p, k=6)
    shift = np.array([0.3, -0.2, 0.1])
    x0, d0 = xyz_dxyz_features(PointCloud(p), g)
    x1, d1 = xyz_dxyz_features(PointCloud(p + shift), g)
    assert np.allclose(x1.values - x0.values, shift, atol=1e-15)
    assert np.allclose(d1.values, d0.values, atol=1e-14)


def test_xyz_rotation_mae_closed_form():
    rng = np.random.default_rng(12)
    p = rng.normal(size=(500, 3))
    r = axis_angle_matrix([1, 2, 3], 0.7)
    g = knn_graph(p, k=4)
    a = xyz_dxyz_features(PointCloud(p), g)[0].values
    b = xyz_dxyz_features(PointCloud(p @ r.T), g)[0].values
    direct = np.abs(p @ (r - np.eye(3)).T).mean(axis=0)
    assert np.allclose(np.abs(b - a).mean(axis=0), direct, atol=1e-12)
