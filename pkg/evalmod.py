"""Detection-style evaluation of discovered categories and the ablation runner.

Detections are kept proposals whose cluster was mapped to a label; their
confidence is the proposal objectness. Matching is greedy on box IoU and AP is
the area under the all-points interpolated precision/recall curve.
"""
import dataclasses
from dataclasses import dataclass

import numpy as np

import cluster as clustering
import config
from embedder import (STAGE_CLUSTER, TrainConfig, TrainingError, embed_scenes, hierarchy_order_fraction,
                      stage_seed, train)
from info_logger import PipelineLogger
from scene import (SIZES, TIERS, boxes_array, box_areas, iou_matrix, match_proposals, size_ranges,
                   top_k_proposals)

TP = 'TP'
FP = 'FP'
IGNORED = 'IGNORED'

IOU_THRESHOLDS = config.iou_thresholds
BASE_VARIANT = 'Poincaré'

REPORT_COLUMNS = ('mAP', 'mAP50', 'mAP75', 'mAP_r', 'mAP_c', 'mAP_f', 'mAP_s', 'mAP_m', 'mAP_l', 'novel',
                  'purity', 'purity_mapped', 'purity_r', 'purity_c', 'purity_f', 'purity_s', 'purity_m', 'purity_l')
ABLATION_COLUMNS = ('variant', 'geometry', 'proposals_per_scene', 'alpha', 'beta', 'gamma', 'hier_weight',
                    'mAP', 'mAP50', 'mAP75', 'mAP_r', 'mAP_c', 'mAP_f', 'purity', 'purity_mapped',
                    'hierarchy_order', 'novel', 'final_loss')

logger = PipelineLogger(__name__)


class EvaluationError(ValueError):
    """Raised when evaluation input is missing or inconsistent"""
    pass


@dataclass(frozen=True)
class Detection:
    scene_id: int
    box: object
    label: int
    confidence: float


@dataclass(frozen=True)
class GroundTruth:
    scene_id: int
    box: object
    label: int


@dataclass
class EvalReport:
    mAP: float = None
    mAP50: float = None
    mAP75: float = None
    mAP_r: float = None
    mAP_c: float = None
    mAP_f: float = None
    mAP_s: float = None
    mAP_m: float = None
    mAP_l: float = None
    novel: int = 0
    purity: float = None
    purity_mapped: float = None
    purity_r: float = None
    purity_c: float = None
    purity_f: float = None
    purity_s: float = None
    purity_m: float = None
    purity_l: float = None

    def to_row(self):
        return {column: getattr(self, column) for column in REPORT_COLUMNS}

    @classmethod
    def from_row(cls, row):
        unknown = set(row) - set(REPORT_COLUMNS)
        if unknown:
            raise EvaluationError('unknown report fields: {0}'.format(', '.join(sorted(unknown))))
        values = {}
        for key, value in row.items():
            if value is None or value == '':
                values[key] = None
            else:
                values[key] = int(value) if key == 'novel' else float(value)
        return cls(**values)


def _greedy_flags(overlap, iou_thresh, gt_ignore, det_ignore):
    # overlap rows follow detections in descending confidence
    n_det, n_gt = overlap.shape
    matched = np.zeros(n_gt, dtype=bool)
    flags = []
    for i in range(n_det):
        flag = None
        for ignored in (False, True):
            candidates = ~matched & (gt_ignore == ignored) & (overlap[i] >= iou_thresh)
            if candidates.any():
                j = int(np.argmax(np.where(candidates, overlap[i], -1.0)))
                matched[j] = True
                flag = IGNORED if ignored else TP
                break
        if flag is None:
            flag = IGNORED if det_ignore[i] else FP
        flags.append(flag)
    return flags, matched


def match_detections(dets, gts, iou_thresh, gt_ignore=None, det_ignore=None):
    """Greedy matching of one label in one scene.

    Returns (per-detection flags, per-GT matched flags). A detection takes the
    highest-IoU unmatched GT at or above iou_thresh; ignored GT are only used
    when no regular GT qualifies, and make the detection IGNORED.
    """
    gt_ignore = np.zeros(len(gts), dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    det_ignore = np.zeros(len(dets), dtype=bool) if det_ignore is None else np.asarray(det_ignore, dtype=bool)
    overlap = iou_matrix(boxes_array([d.box for d in dets]), boxes_array([g.box for g in gts]))
    flags, matched = _greedy_flags(overlap, iou_thresh, gt_ignore, det_ignore)
    return flags, [bool(m) for m in matched]


def average_precision(flags, n_gt):
    flags = [f for f in flags if f != IGNORED]
    if n_gt == 0 or not flags:
        return 0.0
    hits = np.array([f == TP for f in flags], dtype=np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


class _LabelGroup(object):
    """Detections and GT of one label, per scene, with the IoU matrices precomputed"""

    def __init__(self):
        self.scenes = {}

    def add(self, scene_id, dets, gts):
        dets = sorted(dets, key=lambda item: (-item[1].confidence, item[0]))
        det_boxes = boxes_array([d.box for _, d in dets])
        gt_boxes = boxes_array([g.box for g in gts])
        self.scenes[scene_id] = ([d for _, d in dets], iou_matrix(det_boxes, gt_boxes),
                                 box_areas(det_boxes), box_areas(gt_boxes))

    def flags(self, iou_thresh, area_range=None):
        # (GT count, flags over all scenes in descending confidence, any counted entry)
        collected = []
        n_gt = 0
        present = False
        for order, scene_id in enumerate(sorted(self.scenes)):
            dets, overlap, det_areas, gt_areas = self.scenes[scene_id]
            gt_ignore = _outside(gt_areas, area_range)
            det_ignore = _outside(det_areas, area_range)
            flags, _ = _greedy_flags(overlap, iou_thresh, gt_ignore, det_ignore)
            n_gt += int(np.sum(~gt_ignore))
            present = present or bool(np.any(~gt_ignore)) or bool(np.any(~det_ignore))
            collected.extend((-d.confidence, order, rank, flag) for rank, (d, flag) in enumerate(zip(dets, flags)))
        collected.sort(key=lambda item: item[:3])
        return n_gt, [item[3] for item in collected], present


def _outside(areas, area_range):
    if area_range is None:
        return np.zeros(len(areas), dtype=bool)
    low, high = area_range
    return (areas < low) | (areas >= high)


def _group_by_label(dets, gts):
    by_label = {}
    for index, det in enumerate(dets):
        by_label.setdefault(det.label, {}).setdefault(det.scene_id, ([], []))[0].append((index, det))
    for gt in gts:
        by_label.setdefault(gt.label, {}).setdefault(gt.scene_id, ([], []))[1].append(gt)
    groups = {}
    for label, scenes in by_label.items():
        group = _LabelGroup()
        for scene_id, (scene_dets, scene_gts) in scenes.items():
            group.add(scene_id, scene_dets, scene_gts)
        groups[label] = group
    return groups


def _split_map(groups, labels, area_range=None):
    """(mAP over the threshold grid, AP50, AP75) averaged over labels, None if no label counts."""
    per_label = []
    for label in labels:
        aps = []
        present = False
        for thr in IOU_THRESHOLDS:
            n_gt, flags, seen = groups[label].flags(thr, area_range)
            present = present or seen
            aps.append(average_precision(flags, n_gt))
        if present:
            per_label.append(aps)
    if not per_label:
        return None, None, None
    table = np.array(per_label)
    return (float(np.mean(table)), float(np.mean(table[:, IOU_THRESHOLDS.index(0.5)])),
            float(np.mean(table[:, IOU_THRESHOLDS.index(0.75)])))


def map_summary(dets, gts, tiers, size_bins=None, novel=0):
    if not gts:
        raise EvaluationError('map_summary needs at least one ground-truth instance')
    small, medium = size_bins if size_bins is not None else (config.evaluation['small_area'],
                                                             config.evaluation['medium_area'])
    groups = _group_by_label(dets, gts)
    labels = sorted(groups)
    missing = [label for label in labels if label not in tiers]
    if missing:
        raise EvaluationError('labels without a tier: {0}'.format(missing))
    report = EvalReport(novel=int(novel))
    report.mAP, report.mAP50, report.mAP75 = _split_map(groups, labels)
    for tier in TIERS:
        value = _split_map(groups, [label for label in labels if tiers[label] == tier])[0]
        setattr(report, 'mAP_' + tier[0], value)
    for size, area_range in zip(SIZES, size_ranges(small, medium)):
        setattr(report, 'mAP_' + size[0], _split_map(groups, labels, area_range)[0])
    return report


@dataclass(eq=False)
class Discovery:
    """Embedded kept proposals of a dataset with their GT labels and anchors"""
    kept: list
    points: np.ndarray
    owners: list
    gt_labels: np.ndarray
    anchors: dict


def proposal_labels(scenes, kept, iou_threshold=0.5):
    labels = []
    for scene, proposals in zip(scenes, kept):
        matched = match_proposals(proposals, scene.instances, iou_threshold)
        labels.extend(scene.instances[m].category if m >= 0 else -1 for m in matched)
    return np.array(labels, dtype=int)


def collect_anchors(points, gt_labels, per_label):
    # the first per_label labeled points of each category
    anchors = {}
    for point, label in zip(points, gt_labels):
        label = int(label)
        if label < 0:
            continue
        bucket = anchors.setdefault(label, [])
        if len(bucket) < per_label:
            bucket.append(point)
    return {label: np.array(bucket) for label, bucket in anchors.items()}


def prepare_discovery(params, scenes, k, nms_threshold, match_iou=0.5, anchors_per_label=5):
    embedded = embed_scenes(params, scenes, k, nms_threshold)
    kept = [proposals for proposals, _ in embedded]
    owners = [(s, i) for s, proposals in enumerate(kept) for i in range(len(proposals))]
    points = np.concatenate([z for _, z in embedded]) if embedded else np.zeros((0, params.dims[-1]))
    gt_labels = proposal_labels(scenes, kept, match_iou)
    anchors = collect_anchors(points, gt_labels, anchors_per_label)
    logger.log_stage('discovery', scenes=len(scenes), points=len(points), labeled=int(np.sum(gt_labels >= 0)),
                     labels=len(anchors))
    return Discovery(kept, points, owners, gt_labels, anchors)


def kept_proposals(scenes, k, nms_threshold, match_iou=0.5):
    # the proposals prepare_discovery embeds, in the same order, without an encoder
    kept = [top_k_proposals(scene, k, nms_threshold) for scene in scenes]
    owners = [(s, i) for s, proposals in enumerate(kept) for i in range(len(proposals))]
    return Discovery(kept, None, owners, proposal_labels(scenes, kept, match_iou), {})


def ground_truths(scenes):
    return [GroundTruth(scene.id, inst.box, inst.category) for scene in scenes for inst in scene.instances]


def gt_detections(scenes):
    return [Detection(scene.id, inst.box, inst.category, 1.0) for scene in scenes for inst in scene.instances]


def build_detections(discovery, scenes, assignment, label_assignment):
    # novel-cluster members produce no labeled detection
    if len(assignment) != len(discovery.owners):
        raise EvaluationError('cluster model covers {0} proposals, the dataset yields {1}'.format(
            len(assignment), len(discovery.owners)))
    dets = []
    for (s, i), cluster_id in zip(discovery.owners, assignment):
        label = label_assignment.labels.get(int(cluster_id))
        if label is None:
            continue
        proposal = discovery.kept[s][i]
        dets.append(Detection(scenes[s].id, proposal.box, int(label), float(proposal.objectness)))
    return dets


def proposal_areas(discovery):
    # box area of every kept proposal, in owner order
    return np.array([discovery.kept[s][i].box.area for s, i in discovery.owners], dtype=np.float64)


def fill_purity(report, assignment, gt_labels, tiers, label_assignment, areas=None, size_bins=None):
    gt_labels = np.asarray(gt_labels)
    labeled = gt_labels >= 0
    if not labeled.any():
        raise EvaluationError('no kept proposal matches a ground-truth instance')
    assignment = np.asarray(assignment)[labeled]
    gt_labels = gt_labels[labeled]
    report.purity = clustering.purity(assignment, gt_labels)
    report.purity_mapped = clustering.purity(assignment, gt_labels, list(label_assignment.labels))
    split = clustering.split_purity(assignment, gt_labels, tiers, label_assignment)
    for tier in TIERS:
        setattr(report, 'purity_' + tier[0], split.get(tier))
    if areas is not None:
        if size_bins is None:
            size_bins = (config.evaluation['small_area'], config.evaluation['medium_area'])
        sizes = clustering.size_purity(assignment, gt_labels, np.asarray(areas)[labeled], size_bins)
        for size in SIZES:
            setattr(report, 'purity_' + size[0], sizes.get(size))
    return report


def evaluate_discovery(discovery, scenes, model, label_assignment, tiers, size_bins=None):
    dets = build_detections(discovery, scenes, model.assignment, label_assignment)
    report = map_summary(dets, ground_truths(scenes), tiers, size_bins, novel=len(label_assignment.novel))
    return fill_purity(report, model.assignment, discovery.gt_labels, tiers, label_assignment,
                       proposal_areas(discovery), size_bins)


def ablation_variants(suite, base):
    """Base row first, then one TrainConfig per suite entry, each a single-key delta."""
    fields = set(TrainConfig.__dataclass_fields__) - {'seed'}
    variants = [(BASE_VARIANT, base)]
    for name, delta in suite.items():
        if not isinstance(delta, dict):
            # flat entry: the key is the setting, the row is named after the change
            name, delta = '{0} = {1}'.format(name, delta), {name: delta}
        if len(delta) != 1:
            raise EvaluationError('ablation {0!r} must change exactly one setting'.format(name))
        key, value = next(iter(delta.items()))
        if key not in fields:
            raise EvaluationError('unknown ablation key {0!r} in {1!r}'.format(key, name))
        try:
            variant = dataclasses.replace(base, **{key: tuple(value) if isinstance(value, list) else value})
        except (TrainingError, TypeError) as e:
            raise EvaluationError('ablation {0!r}: {1}'.format(name, e))
        variants.append((name, variant))
    return variants


def run_variant(scenes, tiers, train_cfg, k, max_iter=100, match_iou=0.5, anchors_per_label=5, size_bins=None,
                n_init=10):
    params, trace = train(scenes, train_cfg)
    discovery = prepare_discovery(params, scenes, train_cfg.proposals_per_scene, train_cfg.nms_threshold,
                                  match_iou, anchors_per_label)
    model = clustering.hyperbolic_kmeans(discovery.points, k, stage_seed(train_cfg.seed, STAGE_CLUSTER), max_iter,
                                         train_cfg.geometry, n_init)
    label_assignment = clustering.assign_labels(model, discovery.points, discovery.anchors, train_cfg.geometry)
    report = evaluate_discovery(discovery, scenes, model, label_assignment, tiers, size_bins)
    hierarchy = hierarchy_order_fraction(params, scenes, train_cfg.proposals_per_scene, train_cfg.nms_threshold,
                                         match_iou)
    return report, hierarchy, trace


def run_ablation(scenes, tiers, base, suite, k, max_iter=100, match_iou=0.5, anchors_per_label=5,
                 size_bins=None, n_init=10):
    """One row per variant, base first, every variant trained from the same seed."""
    rows = []
    for name, train_cfg in ablation_variants(suite, base):
        logger.log_stage('ablation', variant=name)
        report, hierarchy, trace = run_variant(scenes, tiers, train_cfg, k, max_iter, match_iou,
                                               anchors_per_label, size_bins, n_init)
        row = report.to_row()
        row.update({'variant': name, 'geometry': train_cfg.geometry,
                    'proposals_per_scene': train_cfg.proposals_per_scene, 'alpha': train_cfg.alpha,
                    'beta': train_cfg.beta, 'gamma': train_cfg.gamma, 'hier_weight': train_cfg.hier_weight,
                    'hierarchy_order': hierarchy, 'final_loss': trace[-1]['total'] if trace else None})
        rows.append({column: row.get(column) for column in ABLATION_COLUMNS})
    return rows
