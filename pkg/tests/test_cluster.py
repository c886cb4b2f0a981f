import collections
import json
import unittest

import numpy as np
import numpy.testing as npt

import cluster
import hypmath
from cluster import EUCLIDEAN, ClusterError, ClusterModel, LabelAssignment
from record_file import dumps


def blobs(rng, centers, per_blob, spread=0.02):
    points = np.concatenate([np.asarray(c) + rng.normal(0.0, spread, (per_blob, len(c))) for c in centers])
    labels = np.repeat(np.arange(len(centers)), per_blob)
    return points, labels


def reference_purity(assignment, labels):
    members = collections.defaultdict(list)
    for c, label in zip(assignment, labels):
        members[c].append(label)
    return sum(collections.Counter(m).most_common(1)[0][1] for m in members.values()) / len(assignment)


def reference_greedy(matrix):
    # repeatedly take the smallest remaining entry
    matrix = np.array(matrix, dtype=np.float64)
    matches = []
    while np.isfinite(matrix).any():
        r, c = np.unravel_index(np.argmin(matrix), matrix.shape)
        matches.append((int(r), int(c)))
        matrix[r, :] = np.inf
        matrix[:, c] = np.inf
    return matches


class TestKMeans(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(13)

    def tearDown(self):
        pass

    def test_one_cluster_per_point(self):
        points = self.rng.uniform(-0.5, 0.5, (8, 2))
        model = cluster.hyperbolic_kmeans(points, 8, seed=0)
        self.assertEqual(model.inertia, 0.0)
        self.assertEqual(sorted(model.assignment.tolist()), list(range(8)))

    def test_single_cluster_is_frechet_mean(self):
        points = self.rng.uniform(-0.5, 0.5, (12, 2))
        model = cluster.hyperbolic_kmeans(points, 1, seed=0)
        npt.assert_allclose(model.centroids[0], hypmath.frechet_mean(points), atol=1e-6)
        self.assertTrue(np.all(model.assignment == 0))

    def test_two_blobs(self):
        points, labels = blobs(self.rng, [(0.5, 0.0), (-0.5, 0.0)], 20)
        model = cluster.hyperbolic_kmeans(points, 2, seed=1)
        self.assertEqual(len(set(model.assignment[labels == 0])), 1)
        self.assertEqual(len(set(model.assignment[labels == 1])), 1)
        self.assertNotEqual(model.assignment[0], model.assignment[-1])

    def test_inertia_trace_and_nearest_centroid(self):
        for seed in range(10):
            points = self.rng.uniform(-0.6, 0.6, (60, 2))
            model = cluster.hyperbolic_kmeans(points, 5, seed=seed)
            trace = model.inertia_trace
            for a, b in zip(trace, trace[1:]):
                self.assertLessEqual(b, a + 1e-9 * (1.0 + a))
            self.assertEqual(model.inertia, trace[-1])
            dist = hypmath.pairwise_distances(points, model.centroids)
            chosen = dist[np.arange(len(points)), model.assignment]
            npt.assert_array_equal(chosen, dist.min(axis=1))
            self.assertAlmostEqual(model.inertia, float(np.sum(chosen ** 2)), places=12)

    def test_deterministic(self):
        points = self.rng.uniform(-0.6, 0.6, (40, 2))
        a = cluster.hyperbolic_kmeans(points, 4, seed=9)
        b = cluster.hyperbolic_kmeans(points, 4, seed=9)
        npt.assert_array_equal(a.centroids, b.centroids)
        npt.assert_array_equal(a.assignment, b.assignment)

    def test_restarts_keep_the_lowest_inertia(self):
        points = self.rng.uniform(-0.6, 0.6, (60, 2))
        for seed in range(5):
            single = cluster.hyperbolic_kmeans(points, 6, seed=seed, n_init=1)
            best = cluster.hyperbolic_kmeans(points, 6, seed=seed, n_init=10)
            self.assertLessEqual(best.inertia, single.inertia)
        with self.assertRaises(ClusterError):
            cluster.hyperbolic_kmeans(points, 6, seed=0, n_init=0)

    def test_bad_input(self):
        points = self.rng.uniform(-0.5, 0.5, (3, 2))
        with self.assertRaises(ClusterError):
            cluster.hyperbolic_kmeans(points, 4, seed=0)
        with self.assertRaises(ClusterError):
            cluster.hyperbolic_kmeans(points, 0, seed=0)
        with self.assertRaises(ClusterError):
            cluster.hyperbolic_kmeans(np.zeros((0, 2)), 1, seed=0)
        with self.assertRaises(ClusterError):
            cluster.hyperbolic_kmeans([[1.5, 0.0], [0.0, 0.0]], 1, seed=0)

    def test_euclidean_geometry(self):
        points = np.array([[5.0, 0.0], [5.1, 0.0], [-5.0, 0.0], [-5.1, 0.0]])
        model = cluster.hyperbolic_kmeans(points, 2, seed=0, geometry=EUCLIDEAN)
        npt.assert_allclose(sorted(model.centroids[:, 0]), [-5.05, 5.05], atol=1e-12)
        self.assertAlmostEqual(model.inertia, 4 * 0.05 ** 2, places=12)

    def test_sweep(self):
        points = self.rng.uniform(-0.6, 0.6, (30, 2))
        models = cluster.kmeans_sweep(points, [2, 3, 4], seed=0)
        self.assertEqual(sorted(models), [2, 3, 4])
        self.assertEqual([models[k].k for k in (2, 3, 4)], [2, 3, 4])


class TestElbow(unittest.TestCase):
    def test_clear_elbow(self):
        self.assertEqual(cluster.select_elbow([1, 2, 3, 4], [100.0, 20.0, 18.0, 17.0]), 2)
        self.assertEqual(cluster.select_elbow([1, 2, 3, 4], [100.0, 20.0, 18.0, 17.0], variance=140.0), 2)

    def test_linear_curve_takes_smallest_interior_k(self):
        self.assertEqual(cluster.select_elbow([2, 4, 6, 8, 10], [10.0, 8.0, 6.0, 4.0, 2.0]), 4)

    def test_uneven_grid_uses_step_widths(self):
        # plain second differences would pick 4
        self.assertEqual(cluster.select_elbow([1, 2, 4, 5], [10.0, 6.0, 2.0, 1.5]), 2)
        with self.assertRaises(ClusterError):
            cluster.select_elbow([1, 3, 3], [3.0, 2.0, 1.0])

    def test_short_grid(self):
        with self.assertRaises(ClusterError):
            cluster.select_elbow([1, 2], [3.0, 1.0])

    def test_elbow_select_k_on_blobs(self):
        rng = np.random.default_rng(2)
        points, _ = blobs(rng, [(0.5, 0.0), (-0.5, 0.0), (0.0, 0.5)], 15)
        k_star, curve = cluster.elbow_select_k(points, [1, 2, 3, 4, 5], seed=0)
        self.assertEqual(k_star, 3)
        self.assertEqual([row['k'] for row in curve], [1, 2, 3, 4, 5])
        for row in curve:
            self.assertLessEqual(row['explained'], 1.0)
        with self.assertRaises(ClusterError):
            cluster.elbow_select_k(points, [3, 2, 4], seed=0)


class TestPurity(unittest.TestCase):
    def test_example(self):
        self.assertAlmostEqual(cluster.purity([0, 0, 0, 1, 1], [7, 7, 8, 9, 9]), 0.8)

    def test_restricted_to_clusters(self):
        assignment = [0, 0, 0, 1, 1, 2]
        labels = [7, 7, 8, 9, 3, 1]
        self.assertAlmostEqual(cluster.purity(assignment, labels, [0, 2]), 3.0 / 4.0)
        self.assertIsNone(cluster.purity(assignment, labels, [5]))

    def test_matches_reference(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            n = int(rng.integers(1, 40))
            assignment = rng.integers(0, 5, n)
            labels = rng.integers(0, 4, n)
            self.assertAlmostEqual(cluster.purity(assignment, labels), reference_purity(assignment, labels),
                                   places=12)
            relabeled = (assignment + 3) % 7
            self.assertAlmostEqual(cluster.purity(relabeled, labels), cluster.purity(assignment, labels), places=12)

    def test_bad_input(self):
        with self.assertRaises(ClusterError):
            cluster.purity([], [])
        with self.assertRaises(ClusterError):
            cluster.purity([0, 1], [0])

    def test_split_purity(self):
        assignment = [0, 0, 1, 1, 2]
        labels = [5, 6, 6, 6, 7]
        tiers = {5: 'rare', 6: 'frequent', 7: 'common'}
        label_assignment = LabelAssignment({0: 5, 1: 6}, [2])
        split = cluster.split_purity(assignment, labels, tiers, label_assignment)
        self.assertEqual(split, {'rare': 0.5, 'frequent': 1.0})

    def test_size_purity(self):
        assignment = [0, 0, 0, 1, 1]
        labels = [5, 5, 6, 7, 7]
        areas = [10.0, 200.0, 2000.0, 50.0, 5000.0]
        split = cluster.size_purity(assignment, labels, areas, (100.0, 1000.0))
        self.assertEqual(split, {'small': 1.0, 'medium': 1.0, 'large': 0.5})
        self.assertEqual(cluster.size_purity(assignment, labels, [10.0] * 5, (100.0, 1000.0)), {'small': 0.8})
        with self.assertRaises(ClusterError):
            cluster.size_purity([], [], [], (100.0, 1000.0))
        with self.assertRaises(ClusterError):
            cluster.size_purity([0, 1], [0, 1], [1.0], (100.0, 1000.0))

    def test_majority_ties_go_to_smaller_label(self):
        self.assertEqual(cluster.majority_labels(np.array([0, 0, 1]), np.array([4, 3, 9])), {0: 3, 1: 9})


class TestLabels(unittest.TestCase):
    def test_greedy_example(self):
        self.assertEqual(cluster.greedy_match([[1.0, 9.0], [2.0, 1.0], [5.0, 5.0]]), [(0, 0), (1, 1)])

    def test_greedy_matches_reference(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            matrix = rng.uniform(0.0, 1.0, (int(rng.integers(1, 7)), int(rng.integers(1, 7))))
            self.assertEqual(sorted(cluster.greedy_match(matrix)), sorted(reference_greedy(matrix)))

    def test_assign_labels(self):
        centroids = np.array([[0.5, 0.0], [-0.5, 0.0], [0.0, 0.5]])
        points = np.array([[0.5, 0.01], [0.49, 0.0], [-0.5, 0.01], [-0.49, 0.0], [0.0, 0.5]])
        model = ClusterModel(centroids, np.array([0, 0, 1, 1, 2]), 0.0)
        anchors = {4: np.array([[-0.5, 0.0]]), 1: np.array([[0.5, 0.0]])}
        result = cluster.assign_labels(model, points, anchors)
        self.assertEqual(result.labels, {0: 1, 1: 4})
        self.assertEqual(result.novel, [2])
        self.assertEqual(sorted(result.distances), [0, 1])
        with self.assertRaises(ClusterError):
            cluster.assign_labels(model, points, {1: np.zeros((0, 2))})

    def test_purity_sweep(self):
        rng = np.random.default_rng(8)
        points, labels = blobs(rng, [(0.5, 0.0), (-0.5, 0.0)], 10)
        labels[0] = -1
        anchors = {0: points[1:3], 1: points[10:12]}
        models = cluster.kmeans_sweep(points, [1, 2, 3], seed=0)
        rows = cluster.purity_sweep(points, labels, anchors, {0: 'rare', 1: 'frequent'}, models, k_star=2)
        self.assertEqual([row['k'] for row in rows], [1, 2, 3])
        self.assertEqual([row['elbow'] for row in rows], [0, 1, 0])
        self.assertAlmostEqual(rows[0]['purity'], 10.0 / 19.0)
        self.assertEqual(rows[1]['purity'], 1.0)
        self.assertEqual(rows[1]['mapped'], 2)
        self.assertIsNone(rows[1]['purity_c'])
        self.assertIsNone(rows[1]['purity_s'])
        sized = cluster.purity_sweep(points, labels, anchors, {0: 'rare', 1: 'frequent'}, models, k_star=2,
                                     areas=np.full(len(points), 50.0), size_bins=(100.0, 1000.0))
        self.assertEqual(sized[1]['purity_s'], 1.0)
        self.assertIsNone(sized[1]['purity_m'])
        self.assertAlmostEqual(sized[0]['purity_s'], sized[0]['purity'])


class TestRecords(unittest.TestCase):
    def test_model_round_trip(self):
        model = ClusterModel(np.array([[0.1, 0.2], [-0.3, 0.0]]), np.array([0, 1, 1]), 0.25)
        back = cluster.model_from_record(json.loads(dumps(cluster.model_to_record(model))))
        npt.assert_array_equal(back.centroids, model.centroids)
        npt.assert_array_equal(back.assignment, model.assignment)
        self.assertEqual(back.inertia, 0.25)

    def test_model_bad_assignment(self):
        record = {'k': 1, 'centroids': [[0.0, 0.0]], 'assignment': [0, 1], 'inertia': 0.0}
        with self.assertRaises(ClusterError):
            cluster.model_from_record(record)
        with self.assertRaises(ClusterError):
            cluster.model_from_record({'k': 1})

    def test_labels_round_trip(self):
        assignment = LabelAssignment({0: 4, 2: 1}, [1])
        back = cluster.labels_from_record(json.loads(dumps(cluster.labels_to_record(assignment))))
        self.assertEqual(back.labels, {0: 4, 2: 1})
        self.assertEqual(back.novel, [1])

    def test_labels_not_one_to_one(self):
        with self.assertRaises(ClusterError):
            cluster.labels_from_record({'labels': {'0': 1, '1': 1}, 'novel': []})
        with self.assertRaises(ClusterError):
            cluster.labels_from_record({'labels': {'0': 1}, 'novel': [0]})


if __name__ == '__main__':
    unittest.main()
