"""Category discovery over embedded proposals.

Lloyd iterations with hyperbolic distance and Frechet-mean centroids, elbow
selection of k, purity scores and the greedy one-to-one cluster-to-label
assignment; clusters left without a label are the novel ones.
"""
from dataclasses import dataclass, field

import numpy as np

import hypmath
from info_logger import PipelineLogger
from scene import SIZES, TIERS, size_ranges

POINCARE = 'poincare'
EUCLIDEAN = 'euclidean'

logger = PipelineLogger(__name__)


class ClusterError(ValueError):
    """Raised for invalid clustering input or a broken k-means invariant"""
    pass


@dataclass(eq=False)
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    inertia_trace: list = field(default_factory=list)

    @property
    def k(self):
        return int(self.centroids.shape[0])


@dataclass(eq=False)
class LabelAssignment:
    labels: dict
    novel: list
    distances: dict = field(default_factory=dict)


def _pairwise(geometry, a, b):
    if geometry == POINCARE:
        return hypmath.pairwise_distances(a, b)
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def _mean(geometry, members, init):
    if geometry == POINCARE:
        return hypmath.frechet_mean(members, init=init)
    return members.mean(axis=0)


def _check_points(points, geometry):
    if geometry not in (POINCARE, EUCLIDEAN):
        raise ClusterError('unknown geometry {0!r}'.format(geometry))
    try:
        if geometry == POINCARE:
            points = hypmath.check_ball_points(points)
        else:
            points = np.asarray(points, dtype=np.float64).reshape(len(points), -1)
    except hypmath.GeometryError as e:
        raise ClusterError(str(e))
    if points.shape[0] == 0:
        raise ClusterError('no points to cluster')
    return points


def _seed_centroids(points, k, rng, geometry):
    # k-means++ with squared geometric distances
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _pairwise(geometry, points, points[chosen[0]][None, :])[:, 0] ** 2
    for _ in range(1, k):
        total = closest.sum()
        if total > 0.0:
            pick = int(rng.choice(n, p=closest / total))
        else:
            pick = next(i for i in range(n) if i not in chosen)
        chosen.append(pick)
        closest = np.minimum(closest, _pairwise(geometry, points, points[pick][None, :])[:, 0] ** 2)
    return points[chosen].copy()


def _assign(points, centroids, geometry):
    dist = _pairwise(geometry, points, centroids)
    assignment = np.argmin(dist, axis=1)
    return assignment, dist[np.arange(points.shape[0]), assignment]


def _reseed_empty(points, centroids, assignment, nearest, geometry):
    # an empty cluster takes over the point farthest from its own centroid
    for c in range(centroids.shape[0]):
        if np.any(assignment == c):
            continue
        far = int(np.argmax(nearest))
        if nearest[far] == 0.0:
            break
        centroids[c] = points[far]
        assignment, nearest = _assign(points, centroids, geometry)
    return assignment, nearest


def _lloyd(points, k, rng, max_iter, geometry):
    centroids = _seed_centroids(points, k, rng, geometry)
    previous = None
    trace = []
    for it in range(max(max_iter, 1)):
        assignment, nearest = _assign(points, centroids, geometry)
        assignment, nearest = _reseed_empty(points, centroids, assignment, nearest, geometry)
        inertia = float(np.sum(nearest ** 2))
        if trace and inertia > trace[-1] + 1e-9 * (1.0 + trace[-1]):
            raise ClusterError('inertia rose from {0!r} to {1!r} at iteration {2}'.format(trace[-1], inertia, it))
        trace.append(inertia)
        if previous is not None and np.array_equal(previous, assignment):
            break
        if it == max_iter - 1:
            break
        previous = assignment
        for c in range(k):
            members = points[assignment == c]
            if len(members):
                centroids[c] = _mean(geometry, members, centroids[c])
    return ClusterModel(centroids, assignment, trace[-1], trace)


def hyperbolic_kmeans(points, k, seed, max_iter=100, geometry=POINCARE, n_init=10):
    """Best of n_init Lloyd runs by final inertia.

    The runs draw their k-means++ seeds one after another from a single
    generator, so the result is fixed by seed; the earliest run wins ties.
    """
    points = _check_points(points, geometry)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ClusterError('k must lie in [1, {0}], got {1}'.format(n, k))
    if n_init < 1:
        raise ClusterError('n_init must be at least 1, got {0}'.format(n_init))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        model = _lloyd(points, k, rng, max_iter, geometry)
        if best is None or model.inertia < best.inertia:
            best = model
    logger.log_stage('kmeans', k=k, points=n, runs=n_init, iterations=len(best.inertia_trace),
                     inertia=best.inertia)
    return best


def kmeans_sweep(points, k_values, seed, max_iter=100, geometry=POINCARE, n_init=10):
    return {int(k): hyperbolic_kmeans(points, int(k), seed, max_iter, geometry, n_init) for k in k_values}


def total_variance(points, geometry=POINCARE):
    points = _check_points(points, geometry)
    center = _mean(geometry, points, None)
    return float(np.sum(_pairwise(geometry, points, center[None, :]) ** 2))


def select_elbow(k_grid, inertias, variance=None):
    # k at the largest second derivative of the normalized inertia curve,
    # three-point stencil over the actual grid steps
    if len(k_grid) < 3 or len(k_grid) != len(inertias):
        raise ClusterError('the elbow needs at least 3 (k, inertia) entries')
    ks = np.asarray(k_grid, dtype=np.float64)
    curve = np.asarray(inertias, dtype=np.float64)
    if variance:
        curve = curve / variance
    steps = np.diff(ks)
    if np.any(steps <= 0.0):
        raise ClusterError('k_grid must be strictly ascending: {0}'.format(list(k_grid)))
    slopes = np.diff(curve) / steps
    second = 2.0 * (slopes[1:] - slopes[:-1]) / (steps[1:] + steps[:-1])
    best = np.max(second)
    tie = 1e-12 * max(1.0, abs(best))
    return int(k_grid[1 + int(np.flatnonzero(second >= best - tie)[0])])


def elbow_select_k(points, k_grid, seed, max_iter=100, geometry=POINCARE, models=None, n_init=10):
    """Returns (k*, curve) with curve rows {k, inertia, explained}."""
    k_grid = [int(k) for k in k_grid]
    if len(k_grid) < 3 or any(a >= b for a, b in zip(k_grid, k_grid[1:])):
        raise ClusterError('k_grid must hold at least 3 strictly ascending values')
    if models is None:
        models = kmeans_sweep(points, k_grid, seed, max_iter, geometry, n_init)
    inertias = [models[k].inertia for k in k_grid]
    variance = total_variance(points, geometry)
    k_star = select_elbow(k_grid, inertias, variance)
    curve = [{'k': k, 'inertia': inertia, 'explained': 1.0 - inertia / variance if variance else 1.0}
             for k, inertia in zip(k_grid, inertias)]
    logger.log_stage('elbow', grid=k_grid, k_star=k_star)
    return k_star, curve


def purity(assignment, gt_labels, clusters=None):
    """Share of points carrying their cluster's majority label.

    With clusters given, only members of those clusters count; returns None
    when they have no members.
    """
    assignment = np.asarray(assignment)
    gt_labels = np.asarray(gt_labels)
    if assignment.size == 0:
        raise ClusterError('purity of an empty assignment')
    if assignment.shape != gt_labels.shape:
        raise ClusterError('assignment and labels differ in length')
    if clusters is not None:
        keep = np.isin(assignment, np.asarray(list(clusters), dtype=assignment.dtype))
        assignment, gt_labels = assignment[keep], gt_labels[keep]
        if assignment.size == 0:
            return None
    pairs, counts = np.unique(np.stack([assignment, gt_labels], axis=1), axis=0, return_counts=True)
    majority = {}
    for (cluster, _), count in zip(pairs.tolist(), counts.tolist()):
        majority[cluster] = max(majority.get(cluster, 0), count)
    return sum(majority.values()) / assignment.size


def split_purity(assignment, gt_labels, tiers, label_assignment):
    # purity per tier of the label each cluster was assigned; absent tiers omitted
    result = {}
    for tier in TIERS:
        clusters = [c for c, label in label_assignment.labels.items() if tiers[label] == tier]
        if not clusters:
            continue
        value = purity(assignment, gt_labels, clusters)
        if value is not None:
            result[tier] = value
    return result


def majority_labels(assignment, gt_labels):
    # cluster -> its most frequent label, the smaller label on ties
    pairs, counts = np.unique(np.stack([assignment, gt_labels], axis=1), axis=0, return_counts=True)
    best = {}
    for (cluster, label), count in zip(pairs.tolist(), counts.tolist()):
        if cluster not in best or count > best[cluster][1]:
            best[cluster] = (label, count)
    return {cluster: label for cluster, (label, _) in best.items()}


def size_purity(assignment, gt_labels, areas, size_bins):
    """Purity per object size.

    A point is pure when it carries the majority label of its whole cluster;
    each size reports the pure share of its points. Sizes without points are
    omitted.
    """
    assignment = np.asarray(assignment)
    gt_labels = np.asarray(gt_labels)
    areas = np.asarray(areas, dtype=np.float64)
    if assignment.size == 0:
        raise ClusterError('purity of an empty assignment')
    if not assignment.shape == gt_labels.shape == areas.shape:
        raise ClusterError('assignment, labels and areas differ in length')
    majority = majority_labels(assignment, gt_labels)
    pure = gt_labels == np.array([majority[c] for c in assignment.tolist()])
    result = {}
    for size, (low, high) in zip(SIZES, size_ranges(*size_bins)):
        inside = (areas >= low) & (areas < high)
        if inside.any():
            result[size] = float(np.mean(pure[inside]))
    return result


def greedy_match(distance_matrix):
    """Globally smallest (row, col) first, each row and column used once.

    Ties go to the lower row, then the lower column.
    """
    distance_matrix = np.asarray(distance_matrix, dtype=np.float64)
    rows, cols = distance_matrix.shape
    candidates = sorted((distance_matrix[r, c], r, c) for r in range(rows) for c in range(cols))
    used_rows, used_cols = set(), set()
    matches = []
    for _, r, c in candidates:
        if len(matches) == min(rows, cols):
            break
        if r in used_rows or c in used_cols:
            continue
        used_rows.add(r)
        used_cols.add(c)
        matches.append((r, c))
    return matches


def cluster_label_distances(model, points, anchors, geometry=POINCARE):
    # mean distance between each cluster's members and each label's anchors
    points = np.asarray(points, dtype=np.float64)
    label_ids = sorted(anchors)
    distances = np.zeros((model.k, len(label_ids)))
    for c in range(model.k):
        members = points[model.assignment == c]
        if len(members) == 0:
            members = model.centroids[c][None, :]
        for li, label in enumerate(label_ids):
            distances[c, li] = float(np.mean(_pairwise(geometry, members, np.asarray(anchors[label]))))
    return label_ids, distances


def assign_labels(model, points, anchors, geometry=POINCARE):
    for label, anchor_points in anchors.items():
        if len(anchor_points) == 0:
            raise ClusterError('label {0} has no anchors'.format(label))
    label_ids, distances = cluster_label_distances(model, points, anchors, geometry)
    labels = {}
    matched = {}
    for c, li in greedy_match(distances):
        labels[c] = label_ids[li]
        matched[c] = float(distances[c, li])
    novel = [c for c in range(model.k) if c not in labels]
    logger.log_stage('assign_labels', clusters=model.k, labels=len(label_ids), novel=len(novel))
    return LabelAssignment(labels, novel, matched)


def purity_sweep(points, gt_labels, anchors, tiers, models, k_star=None, geometry=POINCARE, areas=None,
                 size_bins=None):
    """Purity-vs-k rows over already fitted models; unlabeled points (-1) are left out.

    Size columns need the box area of every point and the (small, medium)
    bounds; without them they stay None.
    """
    gt_labels = np.asarray(gt_labels)
    labeled = gt_labels >= 0
    rows = []
    for k in sorted(models):
        model = models[k]
        assignment = model.assignment[labeled]
        label_assignment = assign_labels(model, points, anchors, geometry)
        mapped = list(label_assignment.labels)
        row = {'k': k, 'elbow': int(k == k_star), 'mapped': len(mapped),
               'purity': purity(assignment, gt_labels[labeled]) if assignment.size else None,
               'purity_mapped': purity(assignment, gt_labels[labeled], mapped) if assignment.size else None}
        split = split_purity(assignment, gt_labels[labeled], tiers, label_assignment) if assignment.size else {}
        for tier in TIERS:
            row['purity_' + tier[0]] = split.get(tier)
        sizes = {}
        if areas is not None and size_bins is not None and assignment.size:
            sizes = size_purity(assignment, gt_labels[labeled], np.asarray(areas)[labeled], size_bins)
        for size in SIZES:
            row['purity_' + size[0]] = sizes.get(size)
        rows.append(row)
    return rows


def model_to_record(model):
    return {'k': model.k,
            'centroids': model.centroids.tolist(),
            'assignment': [int(a) for a in model.assignment],
            'inertia': float(model.inertia)}


def model_from_record(record):
    try:
        centroids = np.array(record['centroids'], dtype=np.float64)
        assignment = np.array(record['assignment'], dtype=int)
        model = ClusterModel(centroids.reshape(int(record['k']), -1), assignment, float(record['inertia']))
    except (KeyError, TypeError, ValueError) as e:
        raise ClusterError('malformed cluster model record: {0!r}'.format(e))
    if assignment.size and (assignment.min() < 0 or assignment.max() >= model.k):
        raise ClusterError('cluster model assigns to an unknown cluster')
    return model


def labels_to_record(label_assignment):
    return {'labels': {str(c): int(label_assignment.labels[c]) for c in sorted(label_assignment.labels)},
            'novel': [int(c) for c in label_assignment.novel]}


def labels_from_record(record):
    try:
        labels = {int(c): int(label) for c, label in record['labels'].items()}
        novel = [int(c) for c in record['novel']]
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ClusterError('malformed label assignment record: {0!r}'.format(e))
    if len(set(labels.values())) != len(labels):
        raise ClusterError('label assignment is not one-to-one')
    if set(labels) & set(novel):
        raise ClusterError('a cluster is both labeled and novel')
    return LabelAssignment(labels, novel)
