"""Triplet and pair sampling over a scene's kept proposals."""
from dataclasses import dataclass

import numpy as np

from scene import boxes_array, box_areas, intersection_matrix, iou_matrix

SAME_SCENE = 'same'
OTHER_SCENE = 'other'


@dataclass(eq=False)
class MaskTriplet:
    anchor_full: np.ndarray
    positive_fg: np.ndarray
    negative_bg: np.ndarray
    index: int


@dataclass(eq=False)
class ObjectTriplet:
    anchor_fg: np.ndarray
    positive_fg: np.ndarray
    negative_fg: np.ndarray
    anchor: int
    positive: int
    negative_source: tuple  # (SAME_SCENE, index) or (OTHER_SCENE, scene position, index)


@dataclass(eq=False)
class HierPair:
    parent_fg: np.ndarray
    child_fg: np.ndarray
    parent: int
    child: int


def sample_mask_triplets(proposals):
    return [MaskTriplet(p.feature_full, p.feature_fg, p.feature_bg, i) for i, p in enumerate(proposals)]


def sample_object_triplets(proposals, batch_scenes, n_neg=3, tau_pos=0.4, rng_seed=0):
    """Anchor/positive/negative triplets for the object loss.

    Positives overlap the anchor with IoU >= tau_pos; negatives are drawn
    uniformly from same-scene proposals disjoint from the anchor together with
    every proposal of the other scenes in the batch. Anchors without an
    eligible positive are skipped.
    """
    if not 0.0 < tau_pos < 1.0:
        raise ValueError('tau_pos must lie in (0, 1), got {0!r}'.format(tau_pos))
    if n_neg < 1:
        raise ValueError('n_neg must be at least 1, got {0!r}'.format(n_neg))
    rng = np.random.default_rng(rng_seed)
    n = len(proposals)
    if n == 0:
        return []
    boxes = boxes_array([p.box for p in proposals])
    overlap = iou_matrix(boxes, boxes)
    other_pool = [(s, j) for s, other in enumerate(batch_scenes) for j in range(len(other.proposals))]
    triplets = []
    for i in range(n):
        positives = [int(j) for j in np.flatnonzero(overlap[i] >= tau_pos) if j != i]
        if not positives:
            continue
        same = [int(j) for j in np.flatnonzero(overlap[i] == 0.0)]
        pool_size = len(same) + len(other_pool)
        if pool_size == 0:
            continue
        positive = positives[int(rng.integers(len(positives)))]
        for pick in rng.integers(pool_size, size=n_neg):
            pick = int(pick)
            if pick < len(same):
                negative = proposals[same[pick]]
                source = (SAME_SCENE, same[pick])
            else:
                s, j = other_pool[pick - len(same)]
                negative = batch_scenes[s].proposals[j]
                source = (OTHER_SCENE, s, j)
            triplets.append(ObjectTriplet(proposals[i].feature_fg, proposals[positive].feature_fg,
                                          negative.feature_fg, i, positive, source))
    return triplets


def sample_hier_pairs(proposals, sigma_hier=0.3, kappa_contain=0.9):
    # parent = the larger box, child = a box mostly inside it and much smaller
    if not 0.0 < sigma_hier < 1.0:
        raise ValueError('sigma_hier must lie in (0, 1), got {0!r}'.format(sigma_hier))
    if not 0.0 < kappa_contain <= 1.0:
        raise ValueError('kappa_contain must lie in (0, 1], got {0!r}'.format(kappa_contain))
    if len(proposals) == 0:
        return []
    boxes = boxes_array([p.box for p in proposals])
    areas = box_areas(boxes)
    inter = intersection_matrix(boxes, boxes)
    small = areas[None, :] <= sigma_hier * areas[:, None]
    contained = inter >= kappa_contain * areas[None, :]
    eligible = small & contained & ~np.eye(len(proposals), dtype=bool)
    # argwhere walks row-major: parent index first, then child index
    return [HierPair(proposals[i].feature_fg, proposals[j].feature_fg, int(i), int(j))
            for i, j in np.argwhere(eligible)]
