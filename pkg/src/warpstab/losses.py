"""Generator and discriminator objectives as plain evaluable functions.

Nothing here differentiates; an external trainer can wrap these, and the
stabilizer uses them for quality reporting. Squared-norm terms are mean
reduced over every element (channels included).
"""

from dataclasses import asdict, dataclass

import numpy as np

from .core import apply_warp, norm_to_pixel, pixel_to_norm, sample_bilinear
from .exceptions import InvalidInputError, ShapeMismatchError
from .validation import check_field, check_points


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 8.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidInputError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    content: float
    points: float
    relative: float
    adjacent: float
    temporal: float
    generator_total: float
    discriminator: float = 0.0

    @property
    def shape(self):
        return self.points + self.relative + self.adjacent

    def to_dict(self):
        return asdict(self)


def _same_shape(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def content_loss(s, p, feature_hook=None):
    """MSE between truth and prediction, plus MSE of hook features if given.

    ``feature_hook`` is any callable mapping a frame to an array (e.g. a
    pretrained perceptual network); none ships with the package.
    """
    s, p = _same_shape(s, p, "content_loss")
    loss = float(np.mean((s - p) ** 2))
    if feature_hook is not None:
        fs, fp = _same_shape(feature_hook(s), feature_hook(p), "content_loss features")
        loss += float(np.mean((fs - fp) ** 2))
    return loss


def pair_content_loss(truths, preds, feature_hook=None):
    """Content loss summed over the two predicted frames of a step."""
    return sum(content_loss(s, p, feature_hook) for s, p in zip(truths, preds))


def sample_field_at(field, points):
    """Field values (normalized coords) at pixel ``points``, bilinearly."""
    field = check_field(field)
    pts = check_points(points)
    h, w = field.shape[:2]
    u = pixel_to_norm(pts[:, 0], w)
    v = pixel_to_norm(pts[:, 1], h)
    return sample_bilinear(field, u[:, None], v[:, None], fill=np.nan)[:, 0, :]


def points_loss(field, p, p_prime):
    """Mean L1 distance, in normalized units, between field-mapped ``p`` and ``p_prime``."""
    field = check_field(field)
    p = check_points(p, "p")
    q = check_points(p_prime, "p_prime")
    if p.shape != q.shape:
        raise ShapeMismatchError(f"point lists differ: {p.shape} vs {q.shape}")
    if len(p) == 0:
        return 0.0
    h, w = field.shape[:2]
    mapped = sample_field_at(field, p)
    if not np.all(np.isfinite(mapped)):
        raise InvalidInputError("points must lie inside the frame")
    target = np.stack([pixel_to_norm(q[:, 0], w), pixel_to_norm(q[:, 1], h)], axis=1)
    return float(np.mean(np.abs(mapped - target).sum(axis=1)))


def _check_mesh(mesh):
    mesh = np.asarray(mesh, dtype=np.float64)
    if mesh.ndim != 3 or mesh.shape[2] != 2:
        raise InvalidInputError(f"mesh must be rows x cols x 2, got {mesh.shape}")
    if mesh.shape[0] < 3 or mesh.shape[1] < 3:
        raise InvalidInputError("mesh must be at least 3 x 3")
    return mesh


def relative_grid_loss(mesh):
    """Second-difference L1 penalty over interior vertices, both axes averaged."""
    m = _check_mesh(mesh)
    c = m[1:-1, 1:-1]
    horiz = np.abs((m[1:-1, 2:] - c) - (c - m[1:-1, :-2])).sum(axis=-1)
    vert = np.abs((m[2:, 1:-1] - c) - (c - m[:-2, 1:-1])).sum(axis=-1)
    return float(np.mean(0.5 * (horiz + vert)))


def adjacent_grid_loss(mesh):
    """Mean ``|(right - v) . (down - v)|`` over interior vertices."""
    m = _check_mesh(mesh)
    c = m[1:-1, 1:-1]
    right = m[1:-1, 2:] - c
    down = m[2:, 1:-1] - c
    return float(np.mean(np.abs((right * down).sum(axis=-1))))


def mesh_from_field(field, rows=17, cols=17):
    """Sample a ``rows x cols`` vertex lattice from a warp field, in pixel units.

    Vertices are placed evenly from border to border; their positions are
    the source locations the field maps them to.
    """
    field = check_field(field)
    if rows < 3 or cols < 3:
        raise InvalidInputError("mesh must be at least 3 x 3")
    h, w = field.shape[:2]
    u = np.linspace(-1.0, 1.0, cols)
    v = np.linspace(-1.0, 1.0, rows)
    uu, vv = np.meshgrid(u, v)
    mapped = sample_bilinear(field, uu, vv)
    return np.stack([norm_to_pixel(mapped[..., 0], w), norm_to_pixel(mapped[..., 1], h)], axis=-1)


def temporal_loss(p_curr, p_prev, phi):
    """``mean((p_curr - warp(p_prev, phi))**2)``."""
    p_curr = np.asarray(p_curr, dtype=np.float64)
    p_prev = np.asarray(p_prev, dtype=np.float64)
    if p_curr.shape != p_prev.shape:
        raise ShapeMismatchError(f"temporal_loss: {p_curr.shape} vs {p_prev.shape}")
    warped = apply_warp(p_prev, check_field(phi, p_prev.shape))
    return float(np.mean((p_curr - warped) ** 2))


def generator_loss(content, points, relative, adjacent, temporal, weights=None):
    w = weights or LossWeights()
    shape = points + relative + adjacent
    return float(content + w.alpha * shape + w.beta * temporal)


def discrimination_loss(d_of_p, d_of_s):
    """Least-squares adversarial loss against all -1 (fake) and all +1 (real) targets."""
    dp, ds = _same_shape(d_of_p, d_of_s, "discrimination_loss")
    return float(np.mean((dp + 1.0) ** 2) + np.mean((ds - 1.0) ** 2))


def discriminator_targets(shape):
    """The constant target maps ``(fake, real)``: all -1 and all +1."""
    return -np.ones(shape), np.ones(shape)


def loss_report(s, p, field, p_pts, p_prime_pts, p_prev, phi, d_of_p=None, d_of_s=None,
                weights=None, feature_hook=None, mesh_shape=(17, 17)):
    """Evaluate every term for one predicted frame and bundle them."""
    mesh = mesh_from_field(field, *mesh_shape)
    con = content_loss(s, p, feature_hook)
    pts = points_loss(field, p_pts, p_prime_pts)
    rel = relative_grid_loss(mesh)
    adj = adjacent_grid_loss(mesh)
    tem = temporal_loss(p, p_prev, phi)
    dis = 0.0 if d_of_p is None else discrimination_loss(d_of_p, d_of_s)
    total = generator_loss(con, pts, rel, adj, tem, weights)
    return LossReport(con, pts, rel, adj, tem, total, dis)
