import json
import unittest

import numpy as np
import numpy.testing as npt

import scene
from record_file import dumps
from scene import BoundingBox, Instance, MaskGrid, Proposal, Scene, SceneConfig, SceneError, WorldConfig


def make_proposal(coords, objectness=0.5, dim=2, feature=0.0):
    box = BoundingBox(*coords)
    mask = MaskGrid(box, np.ones((2, 2), dtype=bool))
    values = np.full(dim, feature)
    return Proposal(box, mask, objectness, values.copy(), values.copy(), values.copy())


def make_instance(coords, category, parent=None):
    box = BoundingBox(*coords)
    return Instance(category, box, MaskGrid(box, np.ones((2, 2), dtype=bool)), parent)


def random_proposals(rng, n, canvas=64.0):
    proposals = []
    for _ in range(n):
        x0, y0 = rng.uniform(0.0, canvas - 12.0, 2)
        w, h = rng.uniform(2.0, 12.0, 2)
        proposals.append(make_proposal((x0, y0, x0 + w, y0 + h), float(rng.uniform())))
    return proposals


def reference_nms(proposals, threshold):
    remaining = sorted(range(len(proposals)), key=lambda i: (-proposals[i].objectness, i))
    kept = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [j for j in remaining if scene.iou(proposals[best].box, proposals[j].box) <= threshold]
    return [proposals[i] for i in kept]


class TestBoxes(unittest.TestCase):
    def setUp(self):
        pass

    def tearDown(self):
        pass

    def test_iou_examples(self):
        a = BoundingBox(0, 0, 2, 2)
        self.assertEqual(scene.iou(a, BoundingBox(0, 0, 2, 2)), 1.0)
        self.assertAlmostEqual(scene.iou(a, BoundingBox(1, 1, 3, 3)), 1.0 / 7.0, places=12)
        self.assertEqual(scene.iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)), 0.0)

    def test_iou_touching_edges(self):
        self.assertEqual(scene.iou(BoundingBox(0, 0, 1, 1), BoundingBox(1, 0, 2, 1)), 0.0)

    def test_iou_matrix_matches_scalar(self):
        rng = np.random.default_rng(0)
        boxes = [p.box for p in random_proposals(rng, 12)]
        matrix = scene.iou_matrix(scene.boxes_array(boxes), scene.boxes_array(boxes))
        for i, a in enumerate(boxes):
            for j, b in enumerate(boxes):
                self.assertEqual(matrix[i, j], scene.iou(a, b))
                self.assertEqual(matrix[i, j], matrix[j, i])

    def test_degenerate_box(self):
        with self.assertRaises(SceneError):
            BoundingBox(2, 0, 2, 1)
        with self.assertRaises(SceneError):
            BoundingBox(0, 0, np.inf, 1)


class TestMasks(unittest.TestCase):
    def test_rle_example(self):
        bits = np.array([[True, False], [False, True]])
        rle = scene.encode_rle(bits)
        self.assertEqual(rle, {'size': [2, 2], 'counts': [0, 1, 2, 1]})
        npt.assert_array_equal(scene.decode_rle(rle), bits)

    def test_rle_starting_with_zeros(self):
        bits = scene.ellipse_bits(28, 0.4, 0.3)
        rle = scene.encode_rle(bits)
        self.assertGreater(rle['counts'][0], 0)
        self.assertEqual(sum(rle['counts']), 28 * 28)
        npt.assert_array_equal(scene.decode_rle(rle), bits)

    def test_rle_bad_counts(self):
        with self.assertRaises(SceneError):
            scene.decode_rle({'size': [2, 2], 'counts': [1, 1]})

    def test_ellipse_has_center(self):
        bits = scene.ellipse_bits(5, 0.01, 0.01)
        self.assertTrue(bits[2, 2])

    def test_empty_mask_rejected(self):
        with self.assertRaises(SceneError):
            MaskGrid(BoundingBox(0, 0, 1, 1), np.zeros((4, 4), dtype=bool))
        with self.assertRaises(SceneError):
            MaskGrid(BoundingBox(0, 0, 1, 1), np.ones((4, 3), dtype=bool))


class TestNms(unittest.TestCase):
    def test_identical_boxes(self):
        high = make_proposal((0, 0, 10, 10), 0.9)
        low = make_proposal((0, 0, 10, 10), 0.8)
        self.assertEqual(scene.nms([low, high], 0.75), [high])

    def test_overlap_above_threshold(self):
        high = make_proposal((0, 0, 10, 10), 0.9)
        low = make_proposal((0, 0, 10, 8), 0.8)
        self.assertAlmostEqual(scene.iou(high.box, low.box), 0.8)
        self.assertEqual(scene.nms([high, low], 0.75), [high])
        self.assertEqual(scene.nms([high, low], 0.85), [high, low])

    def test_ties_by_index(self):
        first = make_proposal((0, 0, 10, 10), 0.5)
        second = make_proposal((0, 0, 10, 10), 0.5)
        self.assertIs(scene.nms([first, second], 0.5)[0], first)

    def test_empty(self):
        self.assertEqual(scene.nms([], 0.75), [])

    def test_bad_threshold(self):
        with self.assertRaises(SceneError):
            scene.nms([], 0.0)

    def test_matches_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            proposals = random_proposals(rng, int(rng.integers(1, 65)))
            threshold = float(rng.uniform(0.1, 0.9))
            kept = scene.nms(proposals, threshold)
            self.assertEqual([id(p) for p in kept], [id(p) for p in reference_nms(proposals, threshold)])
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    self.assertLessEqual(scene.iou(a.box, b.box), threshold)
                    self.assertGreaterEqual(a.objectness, b.objectness)

    def test_top_k(self):
        rng = np.random.default_rng(2)
        s = Scene(0, (64, 64), [], random_proposals(rng, 60))
        survivors = scene.nms(s.proposals, 0.75)
        self.assertEqual(scene.top_k_proposals(s, 1, 0.75), survivors[:1])
        self.assertEqual(scene.top_k_proposals(s, 1000, 0.75), survivors)
        top20 = scene.top_k_proposals(s, 20, 0.75)
        self.assertEqual(top20, scene.top_k_proposals(s, 50, 0.75)[:20])
        with self.assertRaises(SceneError):
            scene.top_k_proposals(s, 0)


class TestMatchProposals(unittest.TestCase):
    def test_best_instance_or_none(self):
        instances = [make_instance((0, 0, 10, 10), 3), make_instance((20, 20, 30, 30), 4)]
        proposals = [make_proposal((0, 0, 10, 9)), make_proposal((21, 21, 30, 30)), make_proposal((40, 40, 50, 50)),
                     make_proposal((0, 0, 20, 20))]
        npt.assert_array_equal(scene.match_proposals(proposals, instances, 0.5), [0, 1, -1, -1])

    def test_no_instances(self):
        npt.assert_array_equal(scene.match_proposals([make_proposal((0, 0, 1, 1))], [], 0.5), [-1])


class TestWorld(unittest.TestCase):
    def setUp(self):
        self.config = WorldConfig(counts_per_depth=(5, 4), feature_dim=8)

    def test_counts(self):
        world = scene.generate_world(self.config, 0)
        self.assertEqual(len(world), 25)
        self.assertEqual(len(world.roots()), 5)
        self.assertEqual(len(world.leaves()), 20)
        for root in world.roots():
            self.assertEqual(len(world.children(root)), 4)

    def test_deterministic(self):
        a = scene.world_to_record(scene.generate_world(self.config, 7))
        b = scene.world_to_record(scene.generate_world(self.config, 7))
        self.assertEqual(dumps(a), dumps(b))

    def test_zipf_weights(self):
        world = scene.generate_world(self.config, 3)
        leaf_weights = sorted(world.category(c).weight for c in world.leaves())
        self.assertAlmostEqual(sum(leaf_weights), 1.0, places=12)
        ranks = np.arange(1, 21, dtype=np.float64)
        expected = sorted(ranks ** -1.0 / np.sum(ranks ** -1.0))
        npt.assert_allclose(leaf_weights, expected, rtol=1e-12)
        for root in world.roots():
            children = sum(world.category(c).weight for c in world.children(root))
            self.assertAlmostEqual(world.category(root).weight, children, places=12)

    def test_flat_zipf(self):
        world = scene.generate_world(WorldConfig(counts_per_depth=(5, 4), feature_dim=8, zipf_exponent=0.0), 3)
        for leaf in world.leaves():
            self.assertAlmostEqual(world.category(leaf).weight, 1.0 / 20.0, places=12)

    def test_bounded_perturbation(self):
        world = scene.generate_world(self.config, 4)
        for cat in world.categories:
            if cat.parent != scene.ROOT:
                delta = cat.prototype - world.category(cat.parent).prototype
                self.assertLessEqual(np.linalg.norm(delta), self.config.rho_child + 1e-12)

    def test_invalid_config(self):
        with self.assertRaises(SceneError):
            WorldConfig(counts_per_depth=(5, 0))
        with self.assertRaises(SceneError):
            WorldConfig(counts_per_depth=())

    def test_tiers_are_terciles(self):
        world = scene.generate_world(self.config, 0)
        tiers = scene.tier_map(world)
        self.assertEqual(set(tiers), {c.id for c in world.categories})
        counts = {tier: list(tiers.values()).count(tier) for tier in scene.TIERS}
        self.assertEqual(counts, {'rare': 8, 'common': 9, 'frequent': 8})
        rare = max(world.category(c).weight for c, t in tiers.items() if t == 'rare')
        frequent = min(world.category(c).weight for c, t in tiers.items() if t == 'frequent')
        self.assertLessEqual(rare, frequent)

    def test_cycle_rejected(self):
        cats = [scene.Category(0, 'a', 1, 1, 0.5, np.zeros(2)), scene.Category(1, 'b', 0, 1, 0.5, np.zeros(2))]
        with self.assertRaises(SceneError):
            scene.CategoryTree(cats)

    def test_world_record_round_trip(self):
        world = scene.generate_world(self.config, 5)
        record = json.loads(dumps(scene.world_to_record(world)))
        self.assertEqual(scene.world_to_record(scene.world_from_record(record)), record)


class TestSceneGeneration(unittest.TestCase):
    def setUp(self):
        self.world = scene.generate_world(WorldConfig(counts_per_depth=(3, 2), feature_dim=8), 0)
        self.config = SceneConfig(n_scenes=1)

    def test_deterministic(self):
        a = scene.scene_to_record(scene.generate_scene(self.world, self.config, 11))
        b = scene.scene_to_record(scene.generate_scene(self.world, self.config, 11))
        self.assertEqual(dumps(a), dumps(b))

    def test_proposal_counts(self):
        s = scene.generate_scene(self.world, self.config, 2)
        expected = len(s.instances) * self.config.copies_per_instance + self.config.n_distractors
        self.assertEqual(len(s.proposals), expected)
        for p in s.proposals:
            self.assertTrue(0.0 <= p.objectness <= 1.0)
            self.assertEqual(p.feature_fg.shape, (8,))
            m = p.mask.area_fraction
            npt.assert_allclose(p.feature_full, m * p.feature_fg + (1.0 - m) * p.feature_bg, atol=1e-12)

    def test_no_noise_copies_gt(self):
        config = SceneConfig(n_scenes=1, sigma_jitter=0.0, n_distractors=0)
        s = scene.generate_scene(self.world, config, 5)
        gt = [inst.box for inst in s.instances]
        for p in s.proposals:
            self.assertIn(p.box, gt)

    def test_containment_over_many_seeds(self):
        config = SceneConfig(n_scenes=1, copies_per_instance=1, n_distractors=0)
        for seed in range(1000):
            s = scene.generate_scene(self.world, config, seed)
            self.assertTrue(s.instances)
            for inst in s.instances:
                self.assertTrue(inst.box.inside(*s.canvas))
                if inst.parent is None:
                    self.assertEqual(self.world.category(inst.category).parent, scene.ROOT)
                    continue
                parent = s.instances[inst.parent]
                self.assertEqual(self.world.category(inst.category).parent, parent.category)
                self.assertAlmostEqual(scene.intersection_area(inst.box, parent.box), inst.box.area, places=6)
                self.assertLessEqual(inst.box.area, config.sigma_child * parent.box.area + 1e-9)

    def test_gt_proposals_score_higher(self):
        s = scene.generate_scene(self.world, self.config, 8)
        n_gt = len(s.instances) * self.config.copies_per_instance
        gt_scores = [p.objectness for p in s.proposals[:n_gt]]
        distractor_scores = [p.objectness for p in s.proposals[n_gt:]]
        self.assertGreater(np.mean(gt_scores), np.mean(distractor_scores))

    def test_record_round_trip(self):
        s = scene.generate_scene(self.world, self.config, 9, scene_id=4)
        record = json.loads(dumps(scene.scene_to_record(s)))
        self.assertEqual(record['id'], 4)
        self.assertEqual(sorted(record), ['canvas', 'id', 'instances', 'proposals'])
        self.assertEqual(sorted(record['proposals'][0]), ['box', 'f_bg', 'f_fg', 'f_full', 'mask_rle', 'objectness'])
        back = scene.scene_from_record(record)
        self.assertEqual(scene.scene_to_record(back), record)

    def test_record_rejects_escaping_child(self):
        s = scene.generate_scene(self.world, self.config, 9)
        record = scene.scene_to_record(s)
        record['instances'].append({'cat': 0, 'box': [0.0, 0.0, 256.0, 256.0],
                                    'mask_rle': {'size': [1, 1], 'counts': [0, 1]}, 'parent': 0})
        with self.assertRaises(SceneError):
            scene.scene_from_record(record)

    def test_record_rejects_non_integer_parent(self):
        record = json.loads(dumps(scene.scene_to_record(scene.generate_scene(self.world, self.config, 9))))
        for parent in ('0', 0.0, True, [0]):
            record['instances'][0]['parent'] = parent
            with self.assertRaises(SceneError):
                scene.scene_from_record(record)

    def test_record_missing_field(self):
        with self.assertRaises(SceneError):
            scene.scene_from_record({'id': 0, 'canvas': [8, 8]})


if __name__ == '__main__':
    unittest.main()
