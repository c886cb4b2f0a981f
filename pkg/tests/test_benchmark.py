"""Full-scale behavioral checks on the default synthetic benchmark.

Slow (tens of minutes); run with DISCOVERY_BENCHMARK=1.
"""
import os
import shutil
import tempfile
import unittest

import numpy as np

import cli
import cluster
import config
import evalmod
from record_file import read_csv

ENABLED = os.environ.get('DISCOVERY_BENCHMARK') == '1'
SUITE = {'w/o L_mask': {'beta': 0.0},
         'w/o L_object': {'gamma': 0.0},
         'w/o L_hierarchical': {'hier_weight': 0.0},
         'Euclidean': {'geometry': 'euclidean'}}


@unittest.skipUnless(ENABLED, 'set DISCOVERY_BENCHMARK=1 to run the benchmark')
class TestBenchmark(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.folder = tempfile.mkdtemp()
        run_cfg = config.load_config()
        dataset = os.path.join(cls.folder, 'bench.jsonl')
        cli.cmd_gen(run_cfg, dataset)
        cls.scenes = cli.read_dataset(dataset)
        cls.world, cls.tiers = cli.read_world(dataset)
        settings = run_cfg['cluster']
        rows = evalmod.run_ablation(cls.scenes, cls.tiers, config.train_config(run_cfg), SUITE,
                                    cli.cluster_count(run_cfg, cls.world), settings['max_iter'], settings['match_iou'],
                                    settings['anchors_per_label'], cli.size_bins(run_cfg), settings['n_init'])
        cls.rows = {row['variant']: row for row in rows}

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.folder, ignore_errors=True)

    def test_benchmark_shape(self):
        self.assertEqual(len(self.world.leaves()), 25)
        self.assertEqual(len(self.world), 30)
        self.assertEqual(len(self.scenes), 400)

    def test_hierarchy_recovered(self):
        self.assertGreaterEqual(self.rows[evalmod.BASE_VARIANT]['hierarchy_order'], 0.9)
        self.assertLess(self.rows['w/o L_hierarchical']['hierarchy_order'], 0.7)

    def test_poincare_beats_euclidean(self):
        base = self.rows[evalmod.BASE_VARIANT]
        euclidean = self.rows['Euclidean']
        self.assertGreaterEqual(base['purity'], euclidean['purity'] + 0.03)
        self.assertGreater(base['mAP50'], euclidean['mAP50'])

    def test_default_k_discovers_novel_clusters(self):
        self.assertGreater(self.rows[evalmod.BASE_VARIANT]['novel'], 0)

    def test_object_term_matters_most(self):
        drops = {name: self.rows[evalmod.BASE_VARIANT]['mAP50'] - self.rows[name]['mAP50']
                 for name in ('w/o L_mask', 'w/o L_object', 'w/o L_hierarchical')}
        self.assertEqual(max(drops, key=drops.get), 'w/o L_object')

    def test_training_lowers_the_loss(self):
        params_path = os.path.join(self.folder, 'params.json')
        written = cli.cmd_train(os.path.join(self.folder, 'bench.jsonl'), config.load_config(), params_path)
        rows = read_csv(written[1])
        self.assertLess(float(rows[-1]['total']), float(rows[0]['total']))


@unittest.skipUnless(ENABLED, 'set DISCOVERY_BENCHMARK=1 to run the benchmark')
class TestElbowBenchmark(unittest.TestCase):
    def test_twelve_separated_categories(self):
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            angles = np.arange(12) * 2.0 * np.pi / 12.0
            centers = 0.6 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            points = np.concatenate([c + rng.normal(0.0, 0.01, (20, 2)) for c in centers])
            k_star, _ = cluster.elbow_select_k(points, list(range(6, 25)), seed)
            hits += k_star == 12
        self.assertGreaterEqual(hits, 8)


if __name__ == '__main__':
    unittest.main()
