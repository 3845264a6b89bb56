"""Partition invariants and the two entropy estimators against analytic values."""

import numpy as np
import pytest

from patternnet.cloning import Partition, clone_partition, entropy_hist, entropy_knn
from patternnet.geometry import PointCloud, gen_shape


def uniform_cube(n, side, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(-side / 2, side / 2, size=(n, 3))


# -- entropy_knn -----------------------------------------------------------------


def test_entropy_unit_cube_near_zero():
    h = entropy_knn(uniform_cube(10000, 1.0, 0))
    assert abs(h) <= 0.1  # analytic: ln(1) = 0


def test_entropy_side2_cube():
    h = entropy_knn(uniform_cube(10000, 2.0, 1))
    assert abs(h - np.log(8.0)) <= 0.1  # analytic: ln(2^3)


def test_entropy_gaussian():
    rng = np.random.default_rng(2)
    pts = rng.normal(0.0, 0.5, size=(10000, 3))
    analytic = 1.5 * np.log(2 * np.pi * np.e * 0.25)
    assert abs(entropy_knn(pts) - analytic) <= 0.1


def test_entropy_needs_enough_points():
    with pytest.raises(ValueError):
        entropy_knn(np.zeros((4, 3)))


def test_entropy_duplicate_only_cloud():
    pts = np.zeros((16, 3))
    with pytest.raises(ValueError, match="degenerate"):
        entropy_knn(pts)


def test_entropy_tolerates_some_duplicates():
    pts = uniform_cube(100, 1.0, 3)
    pts[10] = pts[11]  # one duplicate pair
    assert np.isfinite(entropy_knn(pts))


# -- entropy_hist ------------------------------------------------------------------


def test_hist_single_voxel_term():
    pts = np.zeros((50, 3)) + 0.25
    # all points in one voxel: occupancy entropy term is zero, only the
    # (floored) voxel-volume correction remains
    h = entropy_hist(pts, bins_per_axis=4)
    assert h == pytest.approx(np.log((1e-12 / 4) ** 3))


def test_hist_uniform_cube():
    h = entropy_hist(uniform_cube(100000, 1.0, 4), bins_per_axis=8)
    assert abs(h) <= 0.15


def test_hist_agrees_with_knn():
    for seed, sampler in ((5, lambda r: r.uniform(0, 1, (10000, 3))),
                          (6, lambda r: r.normal(0, 0.5, (10000, 3)))):
        pts = sampler(np.random.default_rng(seed))
        assert abs(entropy_hist(pts, 8) - entropy_knn(pts)) <= 0.3


def test_hist_validation():
    with pytest.raises(ValueError):
        entropy_hist(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        entropy_hist(np.zeros((5, 3)), bins_per_axis=1)


# -- clone_partition ----------------------------------------------------------------


def test_partition_balanced_sizes_8_2():
    part = clone_partition(uniform_cube(8, 1.0, 0), 2, seed=0)
    assert sorted(part.sizes().tolist()) == [4, 4]
    subsets = part.subsets()
    assert len(np.intersect1d(subsets[0], subsets[1])) == 0
    assert sorted(np.concatenate(subsets).tolist()) == list(range(8))


def test_partition_sizes_10_4():
    part = clone_partition(uniform_cube(10, 1.0, 1), 4, seed=0)
    assert sorted(part.sizes().tolist()) == [2, 2, 3, 3]


def test_partition_single_level_identity():
    pts = uniform_cube(64, 1.0, 2)
    part = clone_partition(pts, 1, seed=3)
    assert part.levels == 1
    assert np.array_equal(part.subsets()[0], np.arange(64))
    assert part.within_tolerance


def test_partition_insufficient_points():
    with pytest.raises(ValueError, match="insufficient"):
        clone_partition(uniform_cube(7, 1.0, 0), 4, seed=0)


def test_partition_deterministic():
    cloud = gen_shape("torus", 200, seed=5)
    a = clone_partition(cloud, 3, seed=11)
    b = clone_partition(cloud, 3, seed=11)
    assert np.array_equal(a.assignment, b.assignment)
    assert np.array_equal(a.subset_entropies, b.subset_entropies)


def test_partition_accepts_cloud_and_array():
    pts = uniform_cube(32, 1.0, 6)
    a = clone_partition(pts, 2, seed=0)
    b = clone_partition(PointCloud(pts), 2, seed=0)
    assert np.array_equal(a.assignment, b.assignment)


def test_partition_entropy_gap_calibration():
    # 4096 uniform points, L=4: the first shuffle should land inside the
    # default 0.2-nat tolerance for nearly every seed
    pts = uniform_cube(4096, 1.0, 7)
    hits = 0
    for seed in range(100):
        part = clone_partition(pts, 4, seed=seed, max_retries=0)
        if part.within_tolerance:
            hits += 1
    assert hits >= 95


def test_partition_small_subsets_skip_entropy():
    part = clone_partition(uniform_cube(10, 1.0, 8), 4, seed=0)
    assert np.isnan(part.subset_entropies).all()
    assert part.within_tolerance


def test_partition_retry_returns_best_flagged():
    pts = uniform_cube(64, 1.0, 9)
    # absurdly tight tolerance: no attempt can satisfy it
    part = clone_partition(pts, 2, seed=0, tol_nats=1e-9, max_retries=3)
    assert not part.within_tolerance
    assert np.isfinite(part.entropy_gap)


def test_partition_subset_centroids_concentrate():
    rng = np.random.default_rng(10)
    hits = trials = 0
    for seed in range(50):
        pts = rng.standard_normal((256, 3))
        pts -= pts.mean(axis=0)
        radius = np.linalg.norm(pts, axis=1).max()
        part = clone_partition(pts, 2, seed=seed)
        bound = 4.0 * radius / np.sqrt(256 / 2)
        for idx in part.subsets():
            trials += 1
            if np.linalg.norm(pts[idx].mean(axis=0)) <= bound:
                hits += 1
    assert hits / trials >= 0.99
