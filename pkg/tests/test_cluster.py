"""K-means with the adaptive cluster count: invariants and small oracles."""

import itertools
import math

import numpy as np
import pytest

from tabret.cluster import ClusteringConfig, adaptive_k, cluster_table, kmeans


def exhaustive_two_cluster_optimum(points: np.ndarray) -> float:
    """Best possible SSE over every bipartition into two non-empty sets."""
    n = len(points)
    best = math.inf
    for bits in range(1, 2 ** (n - 1)):
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        sse = 0.0
        for side in (mask, ~mask):
            group = points[side]
            center = group.mean(axis=0)
            sse += float(((group - center) ** 2).sum())
        best = min(best, sse)
    return best


class TestAdaptiveK:
    def test_formula_spot_checks(self):
        cfg = ClusteringConfig(r=10, k_max=5)
        assert adaptive_k(1, cfg) == 1
        assert adaptive_k(10, cfg) == 1
        assert adaptive_k(11, cfg) == 2
        assert adaptive_k(49, cfg) == 5
        assert adaptive_k(50, cfg) == 5
        assert adaptive_k(1000, cfg) == 5

    def test_k_max_caps(self):
        assert adaptive_k(100, ClusteringConfig(r=1, k_max=3)) == 3

    def test_zero_rows_rejected(self):
        with pytest.raises(ValueError):
            adaptive_k(0, ClusteringConfig())


class TestKmeansInvariants:
    def check_invariants(self, points, assignment):
        k = assignment.k
        # every cluster non-empty
        counts = np.bincount(assignment.labels, minlength=k)
        assert counts.min() >= 1
        # inertia history never increases
        hist = assignment.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
        assert assignment.inertia == pytest.approx(hist[-1])
        # final assignment is nearest-centroid by value (ties between
        # equidistant centroids may resolve either way)
        d2 = ((points[:, None, :] - assignment.centroids[None, :, :]) ** 2).sum(axis=2)
        own = d2[np.arange(len(points)), assignment.labels]
        assert np.all(own <= d2.min(axis=1) + 1e-9)
        # centroids are exact member means
        for j in range(k):
            members = points[assignment.labels == j]
            np.testing.assert_allclose(assignment.centroids[j], members.mean(axis=0), atol=1e-9)
        # reported point distances match the assignment
        np.testing.assert_allclose(assignment.point_distances, np.sqrt(own), atol=1e-9)

    def test_invariants_on_seeded_datasets(self):
        for seed in range(25):
            r = np.random.default_rng(seed)
            n = int(r.integers(2, 64))
            d = int(r.integers(1, 16))
            k = int(r.integers(1, min(n, 6) + 1))
            points = r.normal(size=(n, d))
            assignment = kmeans(points, k, ClusteringConfig(seed=seed))
            self.check_invariants(points, assignment)

    def test_duplicate_points(self):
        points = np.ones((6, 3))
        assignment = kmeans(points, 2, ClusteringConfig(seed=0))
        self.check_invariants(points, assignment)
        assert assignment.inertia == pytest.approx(0.0, abs=1e-12)

    def test_near_optimal_on_tiny_instances(self):
        for seed in range(10):
            r = np.random.default_rng(1000 + seed)
            n = int(r.integers(3, 9))
            points = r.normal(size=(n, 2))
            assignment = kmeans(points, 2, ClusteringConfig(seed=seed))
            best = exhaustive_two_cluster_optimum(points)
            assert assignment.inertia <= 1.05 * best + 1e-12

    def test_deterministic_per_seed(self, rng):
        points = rng.normal(size=(20, 4))
        a = kmeans(points, 3, ClusteringConfig(seed=9))
        b = kmeans(points, 3, ClusteringConfig(seed=9))
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.centroids, b.centroids)
        assert a.inertia_history == b.inertia_history

    def test_k_greater_than_points_rejected(self, rng):
        with pytest.raises(ValueError):
            kmeans(rng.normal(size=(2, 3)), 5, ClusteringConfig())

    def test_well_separated_blobs_recovered(self):
        r = np.random.default_rng(3)
        blob_a = r.normal(size=(10, 2)) * 0.05
        blob_b = r.normal(size=(10, 2)) * 0.05 + 100.0
        points = np.vstack([blob_a, blob_b])
        assignment = kmeans(points, 2, ClusteringConfig(seed=0))
        labels = assignment.labels
        assert len(set(labels[:10])) == 1
        assert len(set(labels[10:])) == 1
        assert labels[0] != labels[10]


class TestClusterTable:
    def test_single_row_table(self):
        one = np.array([[0.6, 0.8]])
        assignment = cluster_table(one, ClusteringConfig())
        assert assignment.k == 1
        assert list(assignment.labels) == [0]
        assert assignment.inertia == pytest.approx(0.0)

    def test_k_follows_adaptive_rule(self, rng):
        cfg = ClusteringConfig(r=10, k_max=5, seed=1)
        emb = rng.normal(size=(23, 8))
        assignment = cluster_table(emb, cfg)
        assert assignment.k == 3  # ceil(23/10)

    def test_k_never_exceeds_rows(self, rng):
        # 3 rows with r=1 would ask for k_max clusters; must clamp to 3
        cfg = ClusteringConfig(r=1, k_max=5, seed=1)
        assignment = cluster_table(rng.normal(size=(3, 4)), cfg)
        assert assignment.k <= 3
        assert np.bincount(assignment.labels, minlength=assignment.k).min() >= 1
