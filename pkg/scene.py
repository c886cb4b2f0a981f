"""Synthetic worlds and scenes standing in for a class-agnostic proposal network.

A world is a category tree whose leaves follow a Zipf law; a scene holds
ground-truth instances placed parent-first (children inside their parent's
box) and noisy class-agnostic proposals with foreground, background and
full-box feature views.
"""
from dataclasses import dataclass, field

import numpy as np

from info_logger import PipelineLogger

ROOT = -1
TIERS = ('rare', 'common', 'frequent')
SIZES = ('small', 'medium', 'large')

logger = PipelineLogger(__name__)


class SceneError(ValueError):
    """Raised for invalid worlds, scenes, boxes or masks"""
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise SceneError('box has non-finite coordinates: {0}'.format(coords))
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise SceneError('degenerate box: {0}'.format(coords))

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.width * self.height

    def as_list(self):
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max)]

    def inside(self, height, width):
        return 0.0 <= self.x_min and self.x_max <= width and 0.0 <= self.y_min and self.y_max <= height

    @classmethod
    def from_list(cls, values):
        if len(values) != 4:
            raise SceneError('a box needs 4 coordinates, got {0}'.format(len(values)))
        return cls(*(float(v) for v in values))


def intersection_area(a, b):
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a, b):
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def boxes_array(boxes):
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in boxes], dtype=np.float64)


def intersection_matrix(a, b):
    """(n, 4) x (m, 4) coordinate arrays -> (n, m) intersection areas."""
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.where((w > 0.0) & (h > 0.0), w * h, 0.0)


def size_ranges(small, medium):
    # [low, high) box-area ranges of SIZES
    return ((0.0, small), (small, medium), (medium, np.inf))


def box_areas(a):
    return (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])


def iou_matrix(a, b):
    inter = intersection_matrix(a, b)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


@dataclass(eq=False)
class MaskGrid:
    box: BoundingBox
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or self.bits.shape[0] != self.bits.shape[1]:
            raise SceneError('mask grid must be square, got shape {0}'.format(self.bits.shape))
        if not self.bits.any():
            raise SceneError('mask grid has no set bit')

    @property
    def area_fraction(self):
        return float(self.bits.mean())


def encode_rle(bits):
    # row-major runs, alternating, the first run counts zeros
    flat = np.asarray(bits, dtype=bool).ravel()
    cuts = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    runs = np.diff(np.concatenate(([0], cuts, [flat.size]))).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {'size': [int(bits.shape[0]), int(bits.shape[1])], 'counts': [int(r) for r in runs]}


def decode_rle(rle):
    rows, cols = rle['size']
    counts = rle['counts']
    if sum(counts) != rows * cols:
        raise SceneError('mask run lengths sum to {0}, expected {1}'.format(sum(counts), rows * cols))
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(rows, cols)


def ellipse_bits(grid, rx, ry):
    # rx, ry: semi-axes as fractions of the grid side
    centers = (np.arange(grid) + 0.5 - grid / 2.0) / grid
    yy, xx = np.meshgrid(centers, centers, indexing='ij')
    bits = (xx / rx) ** 2 + (yy / ry) ** 2 <= 1.0
    bits[grid // 2, grid // 2] = True
    return bits


@dataclass(eq=False)
class Proposal:
    box: BoundingBox
    mask: MaskGrid
    objectness: float
    feature_full: np.ndarray
    feature_fg: np.ndarray
    feature_bg: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise SceneError('objectness {0!r} outside [0, 1]'.format(self.objectness))
        dims = {np.shape(self.feature_full), np.shape(self.feature_fg), np.shape(self.feature_bg)}
        if len(dims) != 1:
            raise SceneError('proposal feature views differ in shape: {0}'.format(sorted(dims)))


@dataclass(eq=False)
class Category:
    id: int
    name: str
    parent: int
    depth: int
    weight: float
    prototype: np.ndarray


class CategoryTree(object):
    """Categories indexed by id, parent ROOT for the top level"""

    def __init__(self, categories):
        self.categories = list(categories)
        self._by_id = {}
        self._children = {ROOT: []}
        for cat in self.categories:
            if cat.id in self._by_id:
                raise SceneError('duplicate category id {0}'.format(cat.id))
            self._by_id[cat.id] = cat
            self._children.setdefault(cat.id, [])
        for cat in self.categories:
            if cat.parent != ROOT and cat.parent not in self._by_id:
                raise SceneError('category {0} has unknown parent {1}'.format(cat.id, cat.parent))
            self._children[cat.parent].append(cat.id)
        for cat in self.categories:
            # walks terminate only when the tree is acyclic
            if len(self.ancestors(cat.id)) != cat.depth:
                raise SceneError('category {0} has inconsistent depth {1}'.format(cat.id, cat.depth))

    def __len__(self):
        return len(self.categories)

    def category(self, cat_id):
        return self._by_id[cat_id]

    def children(self, cat_id):
        return list(self._children.get(cat_id, []))

    def roots(self):
        return self.children(ROOT)

    def leaves(self):
        return [cat.id for cat in self.categories if not self._children[cat.id]]

    def ancestors(self, cat_id):
        # path from the top-level category down to cat_id
        path = []
        current = cat_id
        while current != ROOT:
            if len(path) > len(self.categories):
                raise SceneError('category tree has a cycle through {0}'.format(cat_id))
            path.append(current)
            current = self._by_id[current].parent
        return path[::-1]

    @property
    def feature_dim(self):
        return int(self.categories[0].prototype.shape[0])


@dataclass(frozen=True)
class WorldConfig:
    counts_per_depth: tuple = (5, 5)
    feature_dim: int = 32
    zipf_exponent: float = 1.0
    rho_child: float = 0.5
    prototype_scale: float = 1.0

    def __post_init__(self):
        if len(self.counts_per_depth) == 0 or any(int(c) < 1 for c in self.counts_per_depth):
            raise SceneError('every depth needs at least one category: {0}'.format(self.counts_per_depth))
        if self.feature_dim < 1:
            raise SceneError('feature_dim must be positive')
        if self.zipf_exponent < 0.0 or self.rho_child < 0.0:
            raise SceneError('zipf_exponent and rho_child must be nonnegative')


@dataclass(frozen=True)
class SceneConfig:
    n_scenes: int = 400
    canvas: tuple = (256, 256)
    mask_grid: int = 28
    min_parents: int = 1
    max_parents: int = 3
    max_children: int = 2
    parent_size: tuple = (40.0, 140.0)
    child_fraction: tuple = (0.25, 0.5)
    sigma_child: float = 0.25
    copies_per_instance: int = 3
    n_distractors: int = 10
    sigma_jitter: float = 0.05
    sigma_feat: float = 0.1
    background_scale: float = 1.0

    def __post_init__(self):
        if self.n_scenes < 0:
            raise SceneError('n_scenes must be nonnegative')
        if not 1 <= self.min_parents <= self.max_parents:
            raise SceneError('need 1 <= min_parents <= max_parents')
        if self.child_fraction[1] ** 2 > self.sigma_child + 1e-12:
            raise SceneError('child_fraction allows child area above sigma_child')
        if self.parent_size[1] > min(self.canvas):
            raise SceneError('parent_size exceeds the canvas')
        if self.copies_per_instance < 1 or self.mask_grid < 1:
            raise SceneError('copies_per_instance and mask_grid must be positive')


@dataclass(eq=False)
class Instance:
    category: int
    box: BoundingBox
    mask: MaskGrid
    parent: object = None


@dataclass(eq=False)
class Scene:
    id: int
    canvas: tuple
    instances: list = field(default_factory=list)
    proposals: list = field(default_factory=list)


def generate_world(config, seed):
    rng = np.random.default_rng(seed)
    dim = config.feature_dim
    categories = []
    frontier = [ROOT]
    for depth, count in enumerate(config.counts_per_depth, start=1):
        next_frontier = []
        for parent in frontier:
            for _ in range(int(count)):
                cat_id = len(categories)
                if parent == ROOT:
                    prototype = rng.normal(0.0, config.prototype_scale, dim)
                else:
                    direction = rng.normal(0.0, 1.0, dim)
                    direction /= np.linalg.norm(direction)
                    radius = config.rho_child * rng.uniform(0.5, 1.0)
                    prototype = categories[parent].prototype + radius * direction
                categories.append(Category(cat_id, 'cat_{0}'.format(cat_id), parent, depth, 0.0, prototype))
                next_frontier.append(cat_id)
        frontier = next_frontier
    # Zipf over leaves, ranks shuffled so frequency is unrelated to id
    ranks = rng.permutation(len(frontier)) + 1
    leaf_weights = ranks.astype(np.float64) ** (-config.zipf_exponent)
    leaf_weights /= leaf_weights.sum()
    for leaf, weight in zip(frontier, leaf_weights):
        categories[leaf].weight = float(weight)
    for cat in reversed(categories):
        if cat.parent != ROOT:
            categories[cat.parent].weight += cat.weight
    world = CategoryTree(categories)
    logger.log_stage('generate_world', seed=seed, categories=len(world), leaves=len(frontier))
    return world


def tier_map(world):
    # terciles of frequency weight, ties by id
    order = sorted(world.categories, key=lambda c: (c.weight, c.id))
    n = len(order)
    cuts = (int(round(n / 3.0)), int(round(2.0 * n / 3.0)))
    tiers = {}
    for rank, cat in enumerate(order):
        tiers[cat.id] = TIERS[0] if rank < cuts[0] else TIERS[1] if rank < cuts[1] else TIERS[2]
    return tiers


class SceneGenerator(object):
    """Places instances and emits proposals for one scene from one seed"""

    def __init__(self, world, config, seed):
        self.world = world
        self.config = config
        self.rng = np.random.default_rng(seed)
        self.height, self.width = (float(s) for s in config.canvas)
        self.instances = []
        self.proposals = []
        self.background = self.rng.normal(0.0, config.background_scale, world.feature_dim)

    def _random_mask(self, box):
        rx, ry = self.rng.uniform(0.35, 0.5, 2)
        return MaskGrid(box, ellipse_bits(self.config.mask_grid, rx, ry))

    def _free_box(self, bounds, width, height, taken, tries=50):
        # uniform placement inside bounds, disjoint from the taken boxes
        x0, y0, x1, y1 = bounds
        for _ in range(tries):
            x_min = self.rng.uniform(x0, x1 - width)
            y_min = self.rng.uniform(y0, y1 - height)
            box = BoundingBox(x_min, y_min, min(x_min + width, x1), min(y_min + height, y1))
            if all(intersection_area(box, other) == 0.0 for other in taken):
                return box
        return None

    def _pick_child(self, cat_id):
        children = self.world.children(cat_id)
        weights = np.array([self.world.category(c).weight for c in children])
        return children[self.rng.choice(len(children), p=weights / weights.sum())]

    def _place_children(self, parent_index, forced_path):
        parent = self.instances[parent_index]
        if not self.world.children(parent.category):
            return
        lo, hi = self.config.child_fraction
        n_children = int(self.rng.integers(1, self.config.max_children + 1))
        taken = []
        for i in range(n_children):
            if i == 0 and forced_path:
                cat_id, rest = forced_path[0], forced_path[1:]
            else:
                cat_id = self._pick_child(parent.category)
                rest = []
            width = parent.box.width * self.rng.uniform(lo, hi)
            height = parent.box.height * self.rng.uniform(lo, hi)
            pb = parent.box
            box = self._free_box((pb.x_min, pb.y_min, pb.x_max, pb.y_max), width, height, taken)
            if box is None:
                continue
            taken.append(box)
            self.instances.append(Instance(cat_id, box, self._random_mask(box), parent_index))
            self._place_children(len(self.instances) - 1, rest)

    def place_instances(self):
        leaves = self.world.leaves()
        weights = np.array([self.world.category(c).weight for c in leaves])
        weights = weights / weights.sum()
        lo, hi = self.config.parent_size
        n_top = int(self.rng.integers(self.config.min_parents, self.config.max_parents + 1))
        top_boxes = []
        for _ in range(n_top):
            leaf = leaves[self.rng.choice(len(leaves), p=weights)]
            path = self.world.ancestors(leaf)
            width, height = self.rng.uniform(lo, hi, 2)
            box = self._free_box((0.0, 0.0, self.width, self.height), width, height, top_boxes)
            if box is None:
                continue
            top_boxes.append(box)
            self.instances.append(Instance(path[0], box, self._random_mask(box), None))
            self._place_children(len(self.instances) - 1, path[1:])
        pass

    def _jitter(self, box):
        sigma = self.config.sigma_jitter
        dx = self.rng.normal(0.0, sigma * box.width, 2)
        dy = self.rng.normal(0.0, sigma * box.height, 2)
        x_min = min(max(box.x_min + dx[0], 0.0), self.width)
        x_max = min(max(box.x_max + dx[1], 0.0), self.width)
        y_min = min(max(box.y_min + dy[0], 0.0), self.height)
        y_max = min(max(box.y_max + dy[1], 0.0), self.height)
        if x_max - x_min < 1.0 or y_max - y_min < 1.0:
            return box
        return BoundingBox(x_min, y_min, x_max, y_max)

    def _views(self, fg_mean, mask):
        sigma = self.config.sigma_feat
        dim = self.world.feature_dim
        fg = fg_mean + self.rng.normal(0.0, sigma, dim)
        bg = self.background + self.rng.normal(0.0, sigma, dim)
        m = mask.area_fraction
        return m * fg + (1.0 - m) * bg, fg, bg

    def emit_proposals(self):
        for inst in self.instances:
            prototype = self.world.category(inst.category).prototype
            for _ in range(self.config.copies_per_instance):
                box = self._jitter(inst.box)
                mask = MaskGrid(box, inst.mask.bits)
                objectness = float(np.clip(self.rng.normal(0.8, 0.1), 0.0, 1.0))
                full, fg, bg = self._views(prototype, mask)
                self.proposals.append(Proposal(box, mask, objectness, full, fg, bg))
        for _ in range(self.config.n_distractors):
            width, height = self.rng.uniform(16.0, 96.0, 2)
            box = self._free_box((0.0, 0.0, self.width, self.height), width, height, [])
            mask = self._random_mask(box)
            objectness = float(self.rng.uniform(0.0, 0.6))
            full, fg, bg = self._views(self.background, mask)
            self.proposals.append(Proposal(box, mask, objectness, full, fg, bg))
        pass


def generate_scene(world, config, seed, scene_id=None):
    generator = SceneGenerator(world, config, seed)
    generator.place_instances()
    generator.emit_proposals()
    return Scene(seed if scene_id is None else scene_id, tuple(int(s) for s in config.canvas),
                 generator.instances, generator.proposals)


def nms(proposals, threshold):
    if not 0.0 < threshold <= 1.0:
        raise SceneError('nms threshold {0!r} outside (0, 1]'.format(threshold))
    if len(proposals) == 0:
        return []
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].objectness, i))
    boxes = boxes_array([p.box for p in proposals])
    overlap = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(proposals), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(proposals[i])
        suppressed |= overlap[i] > threshold
    return kept


def top_k_proposals(scene, k, nms_threshold=0.75):
    if k < 1:
        raise SceneError('k must be at least 1, got {0}'.format(k))
    return nms(scene.proposals, nms_threshold)[:k]


def match_proposals(proposals, instances, iou_threshold=0.5):
    # index of the best-overlapping instance per proposal, -1 below threshold
    if len(proposals) == 0:
        return np.zeros(0, dtype=int)
    if len(instances) == 0:
        return np.full(len(proposals), -1, dtype=int)
    overlap = iou_matrix(boxes_array([p.box for p in proposals]), boxes_array([i.box for i in instances]))
    best = np.argmax(overlap, axis=1)
    best_iou = overlap[np.arange(len(proposals)), best]
    return np.where(best_iou >= iou_threshold, best, -1)


def validate_scene(scene):
    height, width = scene.canvas
    for inst in scene.instances:
        if not inst.box.inside(height, width):
            raise SceneError('instance box {0} leaves the canvas'.format(inst.box.as_list()))
        if inst.parent is not None:
            if not 0 <= inst.parent < len(scene.instances):
                raise SceneError('instance parent {0} out of range'.format(inst.parent))
            parent_box = scene.instances[inst.parent].box
            if intersection_area(inst.box, parent_box) < inst.box.area * (1.0 - 1e-9):
                raise SceneError('child box {0} is not inside its parent'.format(inst.box.as_list()))
    for prop in scene.proposals:
        if not prop.box.inside(height, width):
            raise SceneError('proposal box {0} leaves the canvas'.format(prop.box.as_list()))
    return scene


def _floats(v):
    return [float(x) for x in v]


def scene_to_record(scene):
    return {
        'id': scene.id,
        'canvas': [int(scene.canvas[0]), int(scene.canvas[1])],
        'instances': [{'cat': int(inst.category),
                       'box': inst.box.as_list(),
                       'mask_rle': encode_rle(inst.mask.bits),
                       'parent': inst.parent} for inst in scene.instances],
        'proposals': [{'box': prop.box.as_list(),
                       'mask_rle': encode_rle(prop.mask.bits),
                       'objectness': float(prop.objectness),
                       'f_full': _floats(prop.feature_full),
                       'f_fg': _floats(prop.feature_fg),
                       'f_bg': _floats(prop.feature_bg)} for prop in scene.proposals],
    }


def _parent_index(value):
    if value is None or (isinstance(value, int) and not isinstance(value, bool)):
        return value
    raise SceneError('instance parent must be an integer or null, got {0!r}'.format(value))


def scene_from_record(record):
    try:
        instances = []
        for item in record['instances']:
            box = BoundingBox.from_list(item['box'])
            instances.append(Instance(int(item['cat']), box, MaskGrid(box, decode_rle(item['mask_rle'])),
                                      _parent_index(item['parent'])))
        proposals = []
        for item in record['proposals']:
            box = BoundingBox.from_list(item['box'])
            proposals.append(Proposal(box, MaskGrid(box, decode_rle(item['mask_rle'])), float(item['objectness']),
                                      np.array(item['f_full'], dtype=np.float64),
                                      np.array(item['f_fg'], dtype=np.float64),
                                      np.array(item['f_bg'], dtype=np.float64)))
        scene = Scene(record['id'], tuple(record['canvas']), instances, proposals)
    except (KeyError, TypeError) as e:
        raise SceneError('malformed scene record: {0!r}'.format(e))
    return validate_scene(scene)


def world_to_record(world):
    tiers = tier_map(world)
    return {
        'categories': [{'id': cat.id, 'name': cat.name, 'parent': cat.parent, 'depth': cat.depth,
                        'weight': float(cat.weight), 'prototype': _floats(cat.prototype)}
                       for cat in world.categories],
        'tiers': {str(cat_id): tiers[cat_id] for cat_id in sorted(tiers)},
    }


def world_from_record(record):
    try:
        categories = [Category(int(c['id']), c['name'], int(c['parent']), int(c['depth']), float(c['weight']),
                               np.array(c['prototype'], dtype=np.float64)) for c in record['categories']]
    except (KeyError, TypeError) as e:
        raise SceneError('malformed world record: {0!r}'.format(e))
    return CategoryTree(categories)
