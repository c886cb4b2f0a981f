"""Poincare ball geometry, curvature -1.

Points are float64 numpy vectors of shape (d,) whose norm stays below
MAX_NORM; batched helpers take arrays of shape (n, d). Everything here is a
pure function of its arguments.
"""
import numpy as np

EPS_BALL = 1e-5
MAX_NORM = 1.0 - EPS_BALL
COINCIDENT = 1e-12
_NORM_SLACK = 1e-12  # rescaling to MAX_NORM may land one ulp outside

FRECHET_STEP = 0.2
FRECHET_TOL = 1e-8
FRECHET_MAX_ITER = 200


class GeometryError(ValueError):
    """Raised when a vector is not a valid point or tangent vector"""
    pass


def _as_vector(v, name='vector'):
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise GeometryError('{0} must be a non-empty 1-d vector, got shape {1}'.format(name, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise GeometryError('{0} has non-finite coordinates'.format(name))
    return arr


def _as_matrix(points, name='points'):
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise GeometryError('{0} must be an (n, d) array, got shape {1}'.format(name, arr.shape))
    if not np.all(np.isfinite(arr)):
        raise GeometryError('{0} has non-finite coordinates'.format(name))
    return arr


def check_ball_point(p, name='point'):
    # returns p as a validated float64 vector
    arr = _as_vector(p, name)
    if np.linalg.norm(arr) > MAX_NORM + _NORM_SLACK:
        raise GeometryError('{0} lies outside the ball (norm {1!r})'.format(name, float(np.linalg.norm(arr))))
    return arr


def check_ball_points(points, name='points'):
    arr = _as_matrix(points, name)
    if arr.size and np.max(np.linalg.norm(arr, axis=1)) > MAX_NORM + _NORM_SLACK:
        raise GeometryError('{0} contain a point outside the ball'.format(name))
    return arr


def origin(dim):
    return np.zeros(dim, dtype=np.float64)


def _arcosh1p(t):
    # arccosh(1 + t), accurate for small t
    t = np.maximum(t, 0.0)
    return np.log1p(t + np.sqrt(t * (t + 2.0)))


def _distance_terms(x, y):
    sq = np.sum((x - y) ** 2, axis=-1)
    a = 1.0 - np.sum(x * x, axis=-1)
    b = 1.0 - np.sum(y * y, axis=-1)
    return sq, a, b, 2.0 * sq / (a * b)


def distances(x, y):
    """Broadcasting Poincare distance over the last axis, no validation."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return _arcosh1p(_distance_terms(x, y)[3])


def pairwise_distances(a, b):
    """(n, d) x (m, d) -> (n, m) distance matrix."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return distances(a[:, None, :], b[None, :, :])


def poincare_distance(x, y):
    x = check_ball_point(x, 'x')
    y = check_ball_point(y, 'y')
    if x.shape != y.shape:
        raise GeometryError('dimension mismatch: {0} vs {1}'.format(x.shape[0], y.shape[0]))
    return float(distances(x, y))


def first_argument_grad(x, y):
    """d distance(x, y) / dx for broadcast arrays; zero where x and y coincide.

    Calling it with the arguments swapped gives the gradient with respect to
    the second argument, bit for bit, since every intermediate is symmetric.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sq, a, b, t = _distance_terms(x, y)
    root = np.sqrt(t * (t + 2.0))
    coincident = np.sqrt(sq) < COINCIDENT
    safe_root = np.where(coincident, 1.0, root)
    scale = 4.0 / (a * b * safe_root)
    grad = scale[..., None] * ((x - y) + (sq / a)[..., None] * x)
    return np.where(coincident[..., None], 0.0, grad)


def distance_grad(x, y):
    x = check_ball_point(x, 'x')
    y = check_ball_point(y, 'y')
    if x.shape != y.shape:
        raise GeometryError('dimension mismatch: {0} vs {1}'.format(x.shape[0], y.shape[0]))
    if np.linalg.norm(x - y) < COINCIDENT:
        raise GeometryError('distance is not differentiable at coincident points')
    return first_argument_grad(x, y), first_argument_grad(y, x)


def project_to_ball(v):
    v = _as_vector(v)
    norm = np.linalg.norm(v)
    if norm <= MAX_NORM:
        return v
    return v * (MAX_NORM / norm)


def project_rows(v):
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    scale = np.where(norms > MAX_NORM, MAX_NORM / np.where(norms > 0.0, norms, 1.0), 1.0)
    return v * scale


def exp_map_origin(v):
    v = _as_vector(v, 'tangent vector')
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    return project_to_ball(v * (np.tanh(norm) / norm))


def log_map_origin(p):
    p = check_ball_point(p)
    norm = np.linalg.norm(p)
    if norm == 0.0:
        return np.zeros_like(p)
    return p * (np.arctanh(norm) / norm)


def _exp_scales(v):
    # per-row (s1, s2) with J = s1 I + (s2 - s1) u u^T, u = v / |v|
    norm = np.linalg.norm(v, axis=-1)
    zero = norm == 0.0
    safe = np.where(zero, 1.0, norm)
    th = np.tanh(norm)
    clipped = th > MAX_NORM
    s1 = np.where(zero, 1.0, np.where(clipped, MAX_NORM / safe, th / safe))
    s2 = np.where(zero, 1.0, np.where(clipped, 0.0, 1.0 - th * th))
    return norm, safe, s1, s2


def exp_map_origin_rows(v):
    """Row-wise exp map at the origin followed by projection."""
    v = np.asarray(v, dtype=np.float64)
    _, _, s1, _ = _exp_scales(v)
    return v * s1[..., None]


def exp_map_origin_backward(v, grad_out):
    """Pull a gradient on exp_map_origin_rows(v) back to v."""
    v = np.asarray(v, dtype=np.float64)
    _, safe, s1, s2 = _exp_scales(v)
    u = v / safe[..., None]
    along = np.sum(u * grad_out, axis=-1)
    return s1[..., None] * grad_out + ((s2 - s1) * along)[..., None] * u


def _frechet_objective(c, points, weights):
    return float(np.sum(weights * distances(c[None, :], points) ** 2))


def _frechet_rgrad(c, points, weights):
    d = distances(c[None, :], points)
    egrad = np.sum((2.0 * weights * d)[:, None] * first_argument_grad(c[None, :], points), axis=0)
    conformal = 1.0 - np.dot(c, c)
    rgrad = (conformal * conformal / 4.0) * egrad
    return rgrad, conformal / 2.0 * np.linalg.norm(egrad)


def frechet_mean(points, weights=None, init=None, step=FRECHET_STEP,
                 tol=FRECHET_TOL, max_iter=FRECHET_MAX_ITER):
    """Weighted Frechet mean by Riemannian gradient descent.

    Starts at init when given, else at the exp map of the weighted mean of the
    log-mapped points. A step that raises the objective is retried at half
    the step size; stops once the Riemannian gradient norm is below tol or
    after max_iter attempts.
    """
    points = check_ball_points(points)
    n = points.shape[0]
    if n == 0:
        raise GeometryError('frechet_mean of an empty point set')
    if weights is None:
        weights = np.full(n, 1.0 / n)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,) or np.any(weights < 0.0) or not np.isclose(weights.sum(), 1.0, atol=1e-9):
            raise GeometryError('weights must be {0} nonnegative reals summing to 1'.format(n))
    if n == 1:
        return points[0].copy()
    if init is None:
        tangent = np.sum(weights[:, None] * np.array([log_map_origin(p) for p in points]), axis=0)
        c = exp_map_origin(tangent)
    else:
        c = check_ball_point(init, 'init').copy()
    value = _frechet_objective(c, points, weights)
    for _ in range(max_iter):
        rgrad, residual = _frechet_rgrad(c, points, weights)
        if residual < tol:
            break
        candidate = project_to_ball(c - step * rgrad)
        candidate_value = _frechet_objective(candidate, points, weights)
        if candidate_value <= value * (1.0 + 1e-14):
            c, value = candidate, candidate_value
        else:
            step /= 2.0
    return c
