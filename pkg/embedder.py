"""Encoder f, the mask/object/hierarchical triplet losses and their training.

The encoder is a small fully-connected network with tanh hidden layers. Its
output is squashed into a ball of radius output_radius, then passes through
the exponential map at the origin (Poincare geometry) or is used as is
(Euclidean geometry). Loss gradients are analytic; the
parameters themselves live in flat space and are trained with Adam.
"""
import dataclasses
from dataclasses import dataclass, field

import numpy as np

import hypmath
from info_logger import PipelineLogger
from sampler import sample_hier_pairs, sample_mask_triplets, sample_object_triplets
from scene import match_proposals, top_k_proposals

POINCARE = 'poincare'
EUCLIDEAN = 'euclidean'
GEOMETRIES = (POINCARE, EUCLIDEAN)

STAGE_INIT = 0
STAGE_SHUFFLE = 1
STAGE_SAMPLE = 2
STAGE_WORLD = 3
STAGE_SCENE = 4
STAGE_CLUSTER = 5

LOSS_COLUMNS = ('epoch', 'L_mask', 'L_object', 'L_hier', 'total')

logger = PipelineLogger(__name__)


class TrainingError(ValueError):
    """Raised for invalid training input or a diverging loss"""
    pass


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.2
    gamma: float = 0.2
    hier_weight: float = 1.0
    learning_rate: float = 0.005
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    geometry: str = POINCARE
    hidden: tuple = (64, 16)
    dim: int = 2
    proposals_per_scene: int = 50
    nms_threshold: float = 0.75
    n_neg: int = 3
    tau_pos: float = 0.4
    sigma_hier: float = 0.3
    kappa_contain: float = 0.9
    output_radius: float = 2.0

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise TrainingError('margin alpha must be positive, got {0!r}'.format(self.alpha))
        if min(self.beta, self.gamma, self.hier_weight) < 0.0:
            raise TrainingError('loss weights must be nonnegative')
        if self.learning_rate < 0.0:
            raise TrainingError('learning rate must be nonnegative, got {0!r}'.format(self.learning_rate))
        if self.geometry not in GEOMETRIES:
            raise TrainingError('unknown geometry {0!r}'.format(self.geometry))
        if self.epochs < 0 or self.batch_size < 1 or self.seed < 0:
            raise TrainingError('epochs >= 0, batch_size >= 1 and seed >= 0 are required')
        if self.dim < 1 or self.proposals_per_scene < 1 or len(self.hidden) != 2:
            raise TrainingError('dim and proposals_per_scene must be positive, hidden needs two sizes')
        if self.output_radius is not None and not self.output_radius > 0.0:
            raise TrainingError('output_radius must be positive or null, got {0!r}'.format(self.output_radius))


def stage_seed(root_seed, *keys):
    # independent, reproducible stream per (stage, epoch, item)
    return int(np.random.SeedSequence([int(root_seed)] + [int(k) for k in keys]).generate_state(1)[0])


@dataclass(eq=False)
class EncoderParams:
    layers: list
    geometry: str = POINCARE
    output_radius: object = None

    @property
    def dims(self):
        return [int(self.layers[0][0].shape[0])] + [int(w.shape[1]) for w, _ in self.layers]

    def arrays(self):
        return [a for layer in self.layers for a in layer]

    def copy(self):
        return EncoderParams([(w.copy(), b.copy()) for w, b in self.layers], self.geometry, self.output_radius)

    def to_vector(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_vector(self, vector):
        layers = []
        offset = 0
        for w, b in self.layers:
            new_w = vector[offset:offset + w.size].reshape(w.shape)
            offset += w.size
            new_b = vector[offset:offset + b.size].reshape(b.shape)
            offset += b.size
            layers.append((new_w.copy(), new_b.copy()))
        return EncoderParams(layers, self.geometry, self.output_radius)


def init_params(dims, geometry=POINCARE, seed=0, output_radius=None):
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out))
        b = rng.uniform(-bound, bound, fan_out)
        layers.append((w, b))
    return EncoderParams(layers, geometry, output_radius)


def _bound_scales(v, radius):
    # w = radius * tanh(|v| / radius) * v / |v|; same Jacobian form as the exp map
    norm = np.linalg.norm(v, axis=-1)
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    th = np.tanh(norm / radius)
    s1 = np.where(zero, 1.0, radius * th / safe)
    s2 = np.where(zero, 1.0, 1.0 - th * th)
    return safe, s1, s2


def bound_rows(v, radius):
    """Rows of v squashed smoothly into the ball of the given radius."""
    _, s1, _ = _bound_scales(v, radius)
    return v * s1[..., None]


def bound_backward(v, radius, grad_out):
    safe, s1, s2 = _bound_scales(v, radius)
    u = v / safe[..., None]
    along = np.sum(u * grad_out, axis=-1)
    return s1[..., None] * grad_out + ((s2 - s1) * along)[..., None] * u


def _forward(params, features):
    acts = [features]
    h = features
    last = len(params.layers) - 1
    for li, (w, b) in enumerate(params.layers):
        h = h @ w + b
        if li < last:
            h = np.tanh(h)
        acts.append(h)
    if params.output_radius is not None:
        h = bound_rows(h, params.output_radius)
    if params.geometry == POINCARE:
        return hypmath.exp_map_origin_rows(h), acts
    return h, acts


def _backward(params, acts, grad_z):
    out = acts[-1]
    bounded = out if params.output_radius is None else bound_rows(out, params.output_radius)
    g = hypmath.exp_map_origin_backward(bounded, grad_z) if params.geometry == POINCARE else grad_z
    if params.output_radius is not None:
        g = bound_backward(out, params.output_radius, g)
    grads = [None] * (2 * len(params.layers))
    for li in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[li]
        grads[2 * li] = acts[li].T @ g
        grads[2 * li + 1] = g.sum(axis=0)
        if li > 0:
            g = (g @ w.T) * (1.0 - acts[li] ** 2)
    return grads



def _check_features(params, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.dims[0]:
        raise TrainingError('features of dimension {0} do not fit an encoder expecting {1}'.format(
            features.shape[-1] if features.ndim else 0, params.dims[0]))
    return features


def encode_rows(params, features):
    features = _check_features(params, features)
    return _forward(params, features)[0]


def encode(params, feature):
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 1:
        raise TrainingError('encode takes a single feature vector')
    return encode_rows(params, feature[None, :])[0]


def _pair_terms(geometry, a, b):
    # distance, d/da, d/db, coincident mask
    diff = a - b
    coincident = np.linalg.norm(diff, axis=-1) < hypmath.COINCIDENT
    if geometry == POINCARE:
        return (hypmath.distances(a, b), hypmath.first_argument_grad(a, b),
                hypmath.first_argument_grad(b, a), coincident)
    d = np.linalg.norm(diff, axis=-1)
    ga = np.where(coincident[:, None], 0.0, diff / np.where(coincident, 1.0, d)[:, None])
    return d, ga, -ga, coincident


def _hinge(margin):
    # strictly positive terms carry gradient, the kink itself gets 0
    return np.maximum(margin, 0.0), margin > 0.0


def _triplet_value_and_grads(geometry, za, zp, zn, alpha):
    d_ap, ga_ap, gp_ap, c_ap = _pair_terms(geometry, za, zp)
    d_an, ga_an, gn_an, c_an = _pair_terms(geometry, za, zn)
    values, active = _hinge(alpha - d_an + d_ap)
    mask = active[:, None].astype(np.float64)
    grads = (mask * (ga_ap - ga_an), mask * gp_ap, -mask * gn_an)
    degenerate = int(np.sum(active & (c_ap | c_an)))
    return values, grads, degenerate


def _origin_value_and_grads(geometry, z_parent, z_child, alpha):
    zeros = np.zeros_like(z_parent)
    d_c, gc, _, c_c = _pair_terms(geometry, z_child, zeros)
    d_p, gp, _, c_p = _pair_terms(geometry, z_parent, zeros)
    values, active = _hinge(alpha - d_c + d_p)
    mask = active[:, None].astype(np.float64)
    degenerate = int(np.sum(active & (c_c | c_p)))
    return values, (mask * gp, -mask * gc), degenerate


def _stack(vectors):
    return np.array(vectors, dtype=np.float64)


def loss_mask(triplets, params, alpha):
    if not triplets:
        return 0.0
    z = [encode_rows(params, _stack([getattr(t, f) for t in triplets]))
         for f in ('anchor_full', 'positive_fg', 'negative_bg')]
    return float(np.sum(_triplet_value_and_grads(params.geometry, z[0], z[1], z[2], alpha)[0]))


def loss_object(triplets, params, alpha):
    if not triplets:
        return 0.0
    z = [encode_rows(params, _stack([getattr(t, f) for t in triplets]))
         for f in ('anchor_fg', 'positive_fg', 'negative_fg')]
    return float(np.sum(_triplet_value_and_grads(params.geometry, z[0], z[1], z[2], alpha)[0]))


def loss_hierarchical(pairs, params, alpha):
    if not pairs:
        return 0.0
    z_parent = encode_rows(params, _stack([p.parent_fg for p in pairs]))
    z_child = encode_rows(params, _stack([p.child_fg for p in pairs]))
    return float(np.sum(_origin_value_and_grads(params.geometry, z_parent, z_child, alpha)[0]))


@dataclass(eq=False)
class SceneSamples:
    mask_triplets: list = field(default_factory=list)
    object_triplets: list = field(default_factory=list)
    hier_pairs: list = field(default_factory=list)


@dataclass
class LossEvaluation:
    value: float
    grads: list
    L_mask: float
    L_object: float
    L_hier: float
    degenerate: int


class _RowBuffer(object):
    """Collects feature rows of one batch so they are encoded in a single pass"""

    def __init__(self):
        self.rows = []

    def add(self, vectors):
        start = len(self.rows)
        self.rows.extend(vectors)
        return slice(start, len(self.rows))


def evaluate_batch(batch, params, config, with_grad=True):
    """Scene-mean of beta*L_mask + gamma*L_object + hier_weight*L_hier.

    Terms whose weight is zero are not evaluated at all, so their samples
    cannot influence the value or the gradient.
    """
    n_scenes = max(len(batch), 1)
    buffer = _RowBuffer()
    plan = []
    for s, samples in enumerate(batch):
        if config.beta > 0.0 and samples.mask_triplets:
            t = samples.mask_triplets
            plan.append(('mask', s, [buffer.add([x.anchor_full for x in t]), buffer.add([x.positive_fg for x in t]),
                                     buffer.add([x.negative_bg for x in t])]))
        if config.gamma > 0.0 and samples.object_triplets:
            t = samples.object_triplets
            plan.append(('object', s, [buffer.add([x.anchor_fg for x in t]), buffer.add([x.positive_fg for x in t]),
                                       buffer.add([x.negative_fg for x in t])]))
        if config.hier_weight > 0.0 and samples.hier_pairs:
            t = samples.hier_pairs
            plan.append(('hier', s, [buffer.add([x.parent_fg for x in t]), buffer.add([x.child_fg for x in t])]))
    sums = {'mask': [0.0] * len(batch), 'object': [0.0] * len(batch), 'hier': [0.0] * len(batch)}
    weights = {'mask': config.beta, 'object': config.gamma, 'hier': config.hier_weight}
    degenerate = 0
    if buffer.rows:
        features = _check_features(params, _stack(buffer.rows))
        z, acts = _forward(params, features)
        grad_z = np.zeros_like(z)
        for term, s, slices in plan:
            if term == 'hier':
                values, grads, bad = _origin_value_and_grads(params.geometry, z[slices[0]], z[slices[1]], config.alpha)
            else:
                values, grads, bad = _triplet_value_and_grads(params.geometry, z[slices[0]], z[slices[1]],
                                                              z[slices[2]], config.alpha)
            sums[term][s] = float(np.sum(values))
            degenerate += bad
            scale = weights[term] / n_scenes
            for sl, g in zip(slices, grads):
                grad_z[sl] += scale * g
        grads = _backward(params, acts, grad_z) if with_grad else None
    else:
        grads = [np.zeros_like(a) for a in params.arrays()] if with_grad else None
    l_mask = sum(sums['mask']) / n_scenes
    l_object = sum(sums['object']) / n_scenes
    l_hier = sum(sums['hier']) / n_scenes
    value = config.beta * l_mask + config.gamma * l_object + config.hier_weight * l_hier
    return LossEvaluation(value, grads, l_mask, l_object, l_hier, degenerate)


def total_loss(batch, params, config):
    evaluation = evaluate_batch(batch, params, config)
    return evaluation.value, evaluation.grads


class AdamOptimizer(object):
    """Adam over the arrays of an EncoderParams, updated in place"""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]

    def step(self, grads):
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params.arrays(), grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def keep_proposals(scenes, config):
    # scenes with their proposals replaced by the NMS + top-k survivors
    return [dataclasses.replace(s, proposals=top_k_proposals(s, config.proposals_per_scene, config.nms_threshold))
            for s in scenes]


def sample_scene(kept_scene, other_scenes, config, seed):
    proposals = kept_scene.proposals
    if not proposals:
        return SceneSamples()
    return SceneSamples(sample_mask_triplets(proposals),
                        sample_object_triplets(proposals, other_scenes, config.n_neg, config.tau_pos, seed),
                        sample_hier_pairs(proposals, config.sigma_hier, config.kappa_contain))


def feature_dim_of(scenes):
    for s in scenes:
        if s.proposals:
            return int(np.shape(s.proposals[0].feature_fg)[0])
    raise TrainingError('no scene holds a proposal')


def train(scenes, config, params=None):
    """Train the encoder; returns (params, per-epoch loss rows)."""
    if not scenes:
        raise TrainingError('train needs at least one scene')
    dims = [feature_dim_of(scenes)] + list(config.hidden) + [config.dim]
    if params is None:
        params = init_params(dims, config.geometry, stage_seed(config.seed, STAGE_INIT), config.output_radius)
    elif (params.dims, params.geometry, params.output_radius) != (dims, config.geometry, config.output_radius):
        raise TrainingError('initial params {0}/{1}/{2} do not match {3}/{4}/{5}'.format(
            params.dims, params.geometry, params.output_radius, dims, config.geometry, config.output_radius))
    kept = keep_proposals(scenes, config)
    optimizer = AdamOptimizer(params, config.learning_rate)
    logger.log_stage('train', scenes=len(scenes), epochs=config.epochs, geometry=config.geometry,
                     lr=config.learning_rate, dims=dims)
    trace = []
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng(stage_seed(config.seed, STAGE_SHUFFLE, epoch)).permutation(len(kept))
        totals = np.zeros(3)
        n_batches = 0
        degenerate = 0
        for start in range(0, len(kept), config.batch_size):
            members = [int(i) for i in order[start:start + config.batch_size]]
            batch = [sample_scene(kept[i], [kept[j] for j in members if j != i], config,
                                  stage_seed(config.seed, STAGE_SAMPLE, epoch, i)) for i in members]
            evaluation = evaluate_batch(batch, params, config)
            if not np.isfinite(evaluation.value) or not all(np.all(np.isfinite(g)) for g in evaluation.grads):
                raise TrainingError('non-finite loss at epoch {0}, batch starting {1}: {2!r}; '
                                    'lower the learning rate or check ball clipping'.format(
                                        epoch, start, evaluation.value))
            optimizer.step(evaluation.grads)
            totals += (evaluation.L_mask, evaluation.L_object, evaluation.L_hier)
            degenerate += evaluation.degenerate
            n_batches += 1
        l_mask, l_object, l_hier = totals / n_batches
        row = {'epoch': epoch, 'L_mask': float(l_mask), 'L_object': float(l_object), 'L_hier': float(l_hier),
               'total': float(config.beta * l_mask + config.gamma * l_object + config.hier_weight * l_hier)}
        trace.append(row)
        logger.log_epoch(epoch, row)
        if degenerate:
            logger.warning('Epoch', epoch, 'skipped gradients of coincident pairs:', degenerate)
    return params, trace


def embed_scenes(params, scenes, k, nms_threshold=0.75):
    # per scene: (kept proposals, fg embeddings of shape (len(kept), d))
    embedded = []
    for s in scenes:
        kept = top_k_proposals(s, k, nms_threshold)
        if kept:
            z = encode_rows(params, _stack([p.feature_fg for p in kept]))
        else:
            z = np.zeros((0, params.dims[-1]))
        embedded.append((kept, z))
    return embedded


def gt_parent_child_pairs(kept, instances, iou_threshold=0.5):
    """Kept-proposal index pairs (parent, child) whose matched instances are parent and child."""
    matched = match_proposals(kept, instances, iou_threshold)
    pairs = []
    for i, a in enumerate(matched):
        for j, b in enumerate(matched):
            if a >= 0 and b >= 0 and i != j and instances[b].parent == a:
                pairs.append((i, j))
    return pairs


def hierarchy_order_fraction(params, scenes, k, nms_threshold=0.75, iou_threshold=0.5):
    # share of GT parent/child proposal pairs with the parent nearer the origin
    ordered = 0
    total = 0
    for s, (kept, z) in zip(scenes, embed_scenes(params, scenes, k, nms_threshold)):
        norms = np.linalg.norm(z, axis=1)
        for i, j in gt_parent_child_pairs(kept, s.instances, iou_threshold):
            total += 1
            ordered += int(norms[i] < norms[j])
    if total == 0:
        return None
    return ordered / total


def params_to_record(params):
    return {'dims': params.dims,
            'layers': [{'w': w.tolist(), 'b': b.tolist()} for w, b in params.layers],
            'geometry': params.geometry,
            'output_radius': params.output_radius}


def params_from_record(record):
    try:
        layers = [(np.array(layer['w'], dtype=np.float64), np.array(layer['b'], dtype=np.float64))
                  for layer in record['layers']]
        radius = record.get('output_radius')
        params = EncoderParams(layers, record['geometry'], None if radius is None else float(radius))
        dims = list(record['dims'])
    except (AttributeError, KeyError, TypeError, ValueError) as e:
        raise TrainingError('malformed encoder record: {0!r}'.format(e))
    if params.geometry not in GEOMETRIES:
        raise TrainingError('unknown geometry {0!r}'.format(params.geometry))
    if params.output_radius is not None and not params.output_radius > 0.0:
        raise TrainingError('output_radius must be positive, got {0!r}'.format(params.output_radius))
    for w, b in params.layers:
        if w.ndim != 2 or b.shape != (w.shape[1],) or not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise TrainingError('encoder layer shapes or values are invalid')
    for (w, _), (w_next, _) in zip(params.layers[:-1], params.layers[1:]):
        if w.shape[1] != w_next.shape[0]:
            raise TrainingError('encoder layers do not chain')
    if params.dims != dims:
        raise TrainingError('encoder dims {0} disagree with its layers {1}'.format(dims, params.dims))
    return params
