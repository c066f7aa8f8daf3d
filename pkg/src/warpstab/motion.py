"""Feature correspondences and robust affine motion between two frames.

Corners come from a Shi-Tomasi (minimum eigenvalue) response, descriptors
are zero-mean unit-norm grey patches compared by normalized cross
correlation. Affine models are fitted with the stacked 2n x 6 linear
system and made robust with RANSAC over minimal three-point samples.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator

from .core import AffineTransform, compose_affine, resize_frame, to_gray
from .exceptions import (
    DegenerateGeometryError,
    InsufficientPointsError,
    InvalidInputError,
    NoModelError,
    ShapeMismatchError,
)
from .validation import check_frame, check_points

# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched point pairs; ``src[i]`` in the first frame maps to ``dst[i]``."""

    src: np.ndarray
    dst: np.ndarray
    scores: np.ndarray = None

    def __post_init__(self):
        src = check_points(self.src, "src")
        dst = check_points(self.dst, "dst")
        if src.shape != dst.shape:
            raise ShapeMismatchError(f"src {src.shape} and dst {dst.shape} differ")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        if self.scores is not None:
            object.__setattr__(self, "scores", np.asarray(self.scores, dtype=np.float64))

    def __len__(self):
        return len(self.src)

    def subset(self, mask):
        s = None if self.scores is None else self.scores[mask]
        return CorrespondenceSet(self.src[mask], self.dst[mask], s)


@dataclass(frozen=True, eq=False)
class AffineFitSystem:
    design: np.ndarray
    rhs: np.ndarray

    @property
    def n_points(self):
        return self.design.shape[0] // 2


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    threshold: float = 2.0
    min_inliers: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidInputError("RANSAC iterations must be >= 1")
        if not self.threshold > 0:
            raise InvalidInputError("RANSAC threshold must be > 0")
        if self.min_inliers < 3:
            raise InvalidInputError("min_inliers must be >= 3")


@dataclass(frozen=True)
class FeatureConfig:
    """Detector and descriptor knobs.

    ``blur`` smooths the grey image before patches are cut; with
    ``patch_step > 1`` the patch is sampled sparsely, which tolerates mild
    zoom between the two frames.
    """

    max_points: int = 400
    quality: float = 0.01
    min_distance: int = 3
    window_sigma: float = 1.5
    patch_radius: int = 5
    patch_step: int = 1
    blur: float = 1.0

    @property
    def border(self):
        return self.patch_radius * self.patch_step + 1


@dataclass(frozen=True)
class MotionConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    ratio: float = 0.8
    min_score: float = 0.5
    max_displacement: float = None
    max_side: int = None


@dataclass(frozen=True, eq=False)
class Features:
    points: np.ndarray
    descriptors: np.ndarray
    shape: tuple


# ---------------------------------------------------------------------------
# detection and description


def _corner_response(gray, window_sigma):
    gx = ndimage.sobel(gray, axis=1) / 8.0
    gy = ndimage.sobel(gray, axis=0) / 8.0
    sxx = ndimage.gaussian_filter(gx * gx, window_sigma, truncate=3.0)
    syy = ndimage.gaussian_filter(gy * gy, window_sigma, truncate=3.0)
    sxy = ndimage.gaussian_filter(gx * gy, window_sigma, truncate=3.0)
    half_tr = 0.5 * (sxx + syy)
    return half_tr - np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy * sxy, 0.0))


def _refine_subpixel(resp, ys, xs):
    def offset(lo, mid, hi):
        denom = lo - 2.0 * mid + hi
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(denom < 0, 0.5 * (lo - hi) / denom, 0.0)
        return np.clip(d, -0.5, 0.5)

    c = resp[ys, xs]
    dx = offset(resp[ys, xs - 1], c, resp[ys, xs + 1])
    dy = offset(resp[ys - 1, xs], c, resp[ys + 1, xs])
    return xs + dx, ys + dy


def detect_features(frame, max_points=400, config=None):
    """Corner keypoints as an ``(k, 2)`` array of ``(x, y)``, strongest first.

    A constant frame has no gradient energy and yields an empty array.
    """
    cfg = config or FeatureConfig(max_points=max_points)
    if config is not None and max_points != cfg.max_points:
        cfg = FeatureConfig(**{**cfg.__dict__, "max_points": max_points})
    gray = _gray_for(frame)
    return _detect(gray, cfg)


def _gray_for(frame):
    arr = np.asarray(frame)
    if arr.ndim == 3:
        arr = to_gray(check_frame(arr, check_range=False))
    return np.asarray(arr, dtype=np.float32)


def _detect(gray, cfg):
    h, w = gray.shape
    b = max(cfg.border, 1)
    if h <= 2 * b or w <= 2 * b:
        return np.zeros((0, 2))
    resp = _corner_response(gray, cfg.window_sigma)
    resp = resp.astype(np.float64)
    peak = float(resp.max())
    if peak <= 1e-10:
        return np.zeros((0, 2))
    size = 2 * cfg.min_distance + 1
    local_max = ndimage.maximum_filter(resp, size=size, mode="nearest")
    cand = (resp == local_max) & (resp > cfg.quality * peak)
    cand[:b] = False
    cand[-b:] = False
    cand[:, :b] = False
    cand[:, -b:] = False
    ys, xs = np.nonzero(cand)
    if ys.size == 0:
        return np.zeros((0, 2))
    # strongest first, raster order among exact ties
    order = np.lexsort((xs, ys, -resp[ys, xs]))
    ys, xs = ys[order], xs[order]
    # plateau maxima can survive the filter side by side; keep the first
    taken = np.zeros_like(cand)
    r = cfg.min_distance
    keep = []
    for i in range(ys.size):
        y, x = ys[i], xs[i]
        if taken[y, x]:
            continue
        keep.append(i)
        if len(keep) >= cfg.max_points:
            break
        taken[max(y - r, 0) : y + r + 1, max(x - r, 0) : x + r + 1] = True
    keep = np.asarray(keep, dtype=np.intp)
    fx, fy = _refine_subpixel(resp, ys[keep], xs[keep])
    return np.stack([fx, fy], axis=1)


def _descriptor_image(gray, cfg):
    return ndimage.gaussian_filter(gray, cfg.blur, truncate=3.0) if cfg.blur > 0 else gray


def describe_points(gray_blurred, points, cfg):
    """Zero-mean, unit-norm patch vectors around ``points`` (rounded)."""
    pts = check_points(points)
    h, w = gray_blurred.shape
    offs = np.arange(-cfg.patch_radius, cfg.patch_radius + 1) * cfg.patch_step
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    cx = np.clip(np.rint(pts[:, 0]).astype(np.intp), 0, w - 1)
    cy = np.clip(np.rint(pts[:, 1]).astype(np.intp), 0, h - 1)
    yy = np.clip(cy[:, None] + oy.ravel()[None, :], 0, h - 1)
    xx = np.clip(cx[:, None] + ox.ravel()[None, :], 0, w - 1)
    patches = gray_blurred[yy, xx].astype(np.float64)
    patches = patches - patches.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(patches, axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        desc = np.where(norms > 1e-12, patches / norms, 0.0)
    return desc


def extract_features(frame, config=None):
    """Detect corners and describe them in one pass."""
    cfg = config or FeatureConfig()
    gray = _gray_for(frame)
    pts = _detect(gray, cfg)
    desc = describe_points(_descriptor_image(gray, cfg), pts, cfg)
    return Features(pts, desc, gray.shape)


# ---------------------------------------------------------------------------
# matching


def match_descriptors(fa, fb, ratio=0.8, min_score=0.5, max_displacement=None):
    """One-to-one matches between two :class:`Features` sets."""
    na, nb = len(fa.points), len(fb.points)
    if na == 0 or nb == 0:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    sim = fa.descriptors @ fb.descriptors.T
    if max_displacement is not None:
        d = fa.points[:, None, :] - fb.points[None, :, :]
        far = np.einsum("ijk,ijk->ij", d, d) > max_displacement * max_displacement
        sim = np.where(far, -np.inf, sim)
    if nb == 1:
        best = np.zeros(na, dtype=np.intp)
        s1 = sim[:, 0]
        s2 = np.full(na, -np.inf)
    else:
        part = np.argpartition(-sim, 1, axis=1)[:, :2]
        rows = np.arange(na)
        a, b = sim[rows, part[:, 0]], sim[rows, part[:, 1]]
        swap = b > a
        best = np.where(swap, part[:, 1], part[:, 0])
        s1 = np.maximum(a, b)
        s2 = np.minimum(a, b)
    d1 = np.sqrt(np.maximum(2.0 - 2.0 * s1, 0.0))
    with np.errstate(invalid="ignore"):
        d2 = np.sqrt(np.maximum(2.0 - 2.0 * s2, 0.0))
    ok = np.isfinite(s1) & (s1 >= min_score) & (d1 < ratio * d2)
    idx_a = np.nonzero(ok)[0]
    if idx_a.size == 0:
        return CorrespondenceSet(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    idx_b = best[idx_a]
    score = s1[idx_a]
    # one-to-one: for a repeated target keep the highest score, then lowest source index
    order = np.lexsort((idx_a, -score, idx_b))
    first = np.ones(order.size, dtype=bool)
    first[1:] = idx_b[order][1:] != idx_b[order][:-1]
    chosen = np.sort(order[first])
    return CorrespondenceSet(
        fa.points[idx_a[chosen]], fb.points[idx_b[chosen]], score[chosen]
    )


def match_features(points_a, frame_a, points_b, frame_b, ratio=0.8, min_score=0.5,
                   max_displacement=None, config=None):
    """Match keypoints of two frames by patch NCC with a Lowe ratio test."""
    cfg = config or FeatureConfig()
    pa, pb = check_points(points_a, "points_a"), check_points(points_b, "points_b")
    ga, gb = _gray_for(frame_a), _gray_for(frame_b)
    fa = Features(pa, describe_points(_descriptor_image(ga, cfg), pa, cfg), ga.shape)
    fb = Features(pb, describe_points(_descriptor_image(gb, cfg), pb, cfg), gb.shape)
    return match_descriptors(fa, fb, ratio, min_score, max_displacement)


# ---------------------------------------------------------------------------
# least squares


def build_affine_system(cs):
    """Stacked linear system: rows ``[x, y, 1, 0, 0, 0]`` then ``[0, 0, 0, x, y, 1]``."""
    n = len(cs)
    if n < 3:
        raise InsufficientPointsError(f"affine fit needs >= 3 correspondences, got {n}")
    a = np.zeros((2 * n, 6))
    a[:n, 0] = cs.src[:, 0]
    a[:n, 1] = cs.src[:, 1]
    a[:n, 2] = 1.0
    a[n:, 3] = cs.src[:, 0]
    a[n:, 4] = cs.src[:, 1]
    a[n:, 5] = 1.0
    b = np.concatenate([cs.dst[:, 0], cs.dst[:, 1]])
    return AffineFitSystem(a, b)


def solve_affine_lsq(system):
    """Least-squares coefficients of the stacked system.

    Normal equations on column-scaled data; falls back to QR when they are
    badly conditioned and raises if the design is rank deficient.
    """
    a, b = system.design, system.rhs
    scale = np.abs(a).max(axis=0)
    scale[scale == 0] = 1.0
    a_s = a / scale
    normal = a_s.T @ a_s
    if np.linalg.cond(normal) < 1e10:
        x = np.linalg.solve(normal, a_s.T @ b)
    else:
        q, r = np.linalg.qr(a_s)
        diag = np.abs(np.diag(r))
        if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
            raise DegenerateGeometryError("correspondences are collinear or repeated")
        x = np.linalg.solve(r, q.T @ b)
    return AffineTransform.from_coeffs(x / scale)


def fit_affine(cs):
    return solve_affine_lsq(build_affine_system(cs))


# ---------------------------------------------------------------------------
# RANSAC


def _residuals(models, src, dst):
    """Euclidean residuals for stacked 2x3 ``models`` -> ``(m, n)``."""
    x, y = src[:, 0][None], src[:, 1][None]
    dx = models[:, 0, 0:1] * x + models[:, 0, 1:2] * y + (models[:, 0, 2:3] - dst[:, 0][None])
    dy = models[:, 1, 0:1] * x + models[:, 1, 1:2] * y + (models[:, 1, 2:3] - dst[:, 1][None])
    return np.sqrt(dx * dx + dy * dy)


def _draw_triples(rng, n, k):
    idx = rng.integers(0, n, size=(k, 3))
    while True:
        bad = (idx[:, 0] == idx[:, 1]) | (idx[:, 0] == idx[:, 2]) | (idx[:, 1] == idx[:, 2])
        if not bad.any():
            return idx
        idx[bad] = rng.integers(0, n, size=(int(bad.sum()), 3))


def ransac_affine(cs, cfg=None):
    """Robust affine fit; returns ``(AffineTransform, inlier_mask)``.

    Deterministic for a fixed ``cfg.seed``. The returned mask is recomputed
    from the returned model, so every inlier has residual <= threshold.
    """
    cfg = cfg or RansacConfig()
    n = len(cs)
    if n < 3:
        raise InsufficientPointsError(f"RANSAC needs >= 3 correspondences, got {n}")
    src, dst = cs.src, cs.dst
    rng = np.random.default_rng(cfg.seed)
    tri = _draw_triples(rng, n, cfg.iterations)
    m = np.concatenate([src[tri], np.ones((cfg.iterations, 3, 1))], axis=2)
    det = np.linalg.det(m)
    spread = np.abs(src).max() + 1.0
    good = np.abs(det) > 1e-9 * spread * spread
    if not good.any():
        raise NoModelError("every minimal sample was degenerate")
    m = m[good]
    rhs = dst[tri[good]]
    coef = np.linalg.solve(m, rhs)  # (k, 3, 2): columns are x' and y' rows
    models = np.transpose(coef, (0, 2, 1))
    res = _residuals(models, src, dst)
    inl = res <= cfg.threshold
    counts = inl.sum(axis=1)
    cost = np.where(inl, res, 0.0).sum(axis=1)
    best = np.lexsort((cost, -counts))[0]
    mask = inl[best]
    model = None
    for _ in range(20):
        if mask.sum() < 3:
            break
        try:
            model = fit_affine(cs.subset(mask))
        except DegenerateGeometryError:
            break
        new = _residuals(model.matrix[None], src, dst)[0] <= cfg.threshold
        if np.array_equal(new, mask):
            break
        mask = new
    if model is None:
        raise NoModelError("consensus set is degenerate")
    mask = _residuals(model.matrix[None], src, dst)[0] <= cfg.threshold
    if mask.sum() < cfg.min_inliers:
        raise NoModelError(
            f"best consensus has {int(mask.sum())} inliers, need {cfg.min_inliers}"
        )
    return model, mask


def chain_transforms(per_pair):
    """Cumulative transforms: ``out[k] = per_pair[k] ∘ ... ∘ per_pair[0]``."""
    per_pair = list(per_pair)
    if not per_pair:
        raise InvalidInputError("chain_transforms needs at least one transform")
    out = [per_pair[0]]
    for t in per_pair[1:]:
        out.append(compose_affine(t, out[-1]))
    return out


# ---------------------------------------------------------------------------
# frame-to-frame convenience


def _scaled_features(frame, cfg):
    """Features (in original pixel units) computed on a possibly downscaled frame."""
    arr = np.asarray(frame)
    h, w = arr.shape[:2]
    scale = 1.0
    if cfg.max_side is not None and max(h, w) > cfg.max_side:
        scale = cfg.max_side / max(h, w)
        nh, nw = max(int(round(h * scale)), 2), max(int(round(w * scale)), 2)
        arr = resize_frame(arr, nh, nw)
        sx, sy = (w - 1) / (nw - 1), (h - 1) / (nh - 1)
    feats = extract_features(arr, cfg.features)
    if scale != 1.0:
        pts = feats.points * np.array([sx, sy])
        feats = Features(pts, feats.descriptors, (h, w))
    return feats


def estimate_motion(frame_a, frame_b, cfg=None, features_a=None, features_b=None):
    """Affine mapping pixel coordinates of ``frame_a`` onto ``frame_b``.

    Returns ``(AffineTransform, n_inliers)``; raises :class:`NoModelError`
    when no reliable model exists.
    """
    cfg = cfg or MotionConfig()
    fa = features_a if features_a is not None else _scaled_features(frame_a, cfg)
    fb = features_b if features_b is not None else _scaled_features(frame_b, cfg)
    cs = match_descriptors(fa, fb, cfg.ratio, cfg.min_score, cfg.max_displacement)
    if len(cs) < max(3, cfg.ransac.min_inliers):
        raise NoModelError(f"only {len(cs)} matches")
    model, mask = ransac_affine(cs, cfg.ransac)
    return model, int(mask.sum())


def frame_features(frame, cfg=None):
    """Public wrapper around the (optionally downscaled) feature extraction."""
    return _scaled_features(frame, cfg or MotionConfig())


class RansacAffineEstimator(BaseEstimator):
    """Estimator wrapper: ``fit(src, dst)`` learns a robust affine map.

    Attributes after fitting: ``affine_``, ``coef_`` (a1..a6) and
    ``inlier_mask_``.
    """

    def __init__(self, n_iterations=500, threshold=2.0, min_inliers=8, random_state=0):
        self.n_iterations = n_iterations
        self.threshold = threshold
        self.min_inliers = min_inliers
        self.random_state = random_state

    def fit(self, X, y):
        cs = CorrespondenceSet(X, y)
        cfg = RansacConfig(self.n_iterations, self.threshold, self.min_inliers,
                           0 if self.random_state is None else int(self.random_state))
        self.affine_, self.inlier_mask_ = ransac_affine(cs, cfg)
        self.coef_ = self.affine_.coeffs
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        if not hasattr(self, "affine_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("RansacAffineEstimator is not fitted yet")
        return self.affine_.apply(check_points(X, "X"))

    def score(self, X, y):
        """Fraction of pairs within ``threshold`` of the fitted model."""
        err = np.linalg.norm(self.predict(X) - check_points(y, "y"), axis=1)
        return float(np.mean(err <= self.threshold))
