"""Online sliding-window stabilization with pluggable warp predictors.

Each output frame ``i`` is produced from a window of ``2*theta + 1`` frames
centred on ``i``. The window starts as ``theta`` copies of the first frame
followed by frames ``1..theta+1``; every later step drops the front frame
and appends frame ``i + theta`` while it exists, otherwise frame ``i``.

Predictors work on frames resized to a square processing size and return a
warp field in normalized coordinates. Because normalized coordinates do not
depend on resolution, the field is resampled to the input size and applied
to the original frame, fused with the crop into a single sampling pass.
"""

import time
from collections import deque
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import (
    AffineTransform,
    affine_grid,
    identity_field,
    norm_to_pixel,
    pixel_to_norm,
    resample_field,
    resize_frame,
    sample_bilinear,
    warp_affine,
)
from .exceptions import InvalidInputError, NoValidRegionError, WarpstabError
from .motion import MotionConfig, estimate_motion, frame_features
from .validation import check_field, check_frame, check_sequence

REFERENCE_GPU_FPS = 152.0
CROP_MODES = ("global", "online")


@dataclass(frozen=True)
class SlidingWindowConfig:
    theta: int = 15
    size: int = 256

    def __post_init__(self):
        if self.theta < 1:
            raise InvalidInputError("theta must be >= 1")
        if self.size < 2:
            raise InvalidInputError("processing size must be >= 2")

    @property
    def window_length(self):
        return 2 * self.theta + 1


# ---------------------------------------------------------------------------
# window bookkeeping


class SlidingWindow:
    """Frame-index window (1-based indices) advanced step by step."""

    def __init__(self, n, theta):
        if n < 1:
            raise InvalidInputError("sequence must hold at least one frame")
        self.n = n
        self.theta = theta
        self.step = 1
        init = [1] * theta + [min(k, n) for k in range(1, theta + 2)]
        self._slots = deque(init)

    @property
    def indices(self):
        return list(self._slots)

    @property
    def center(self):
        return self._slots[self.theta]

    def advance(self):
        """Move to the next output frame."""
        self.step += 1
        i = self.step
        self._slots.popleft()
        self._slots.append(i + self.theta if i <= self.n - self.theta else i)
        return self.indices

    def newest_needed(self):
        return max(self._slots)


def window_trace(n, theta=15):
    """Window contents (1-based frame indices) for every output step ``1..n``."""
    win = SlidingWindow(n, theta)
    trace = [win.indices]
    for _ in range(n - 1):
        trace.append(win.advance())
    return trace


# ---------------------------------------------------------------------------
# predictors


class IdentityPredictor:
    """Leaves frames untouched; the baseline for round-trip checks."""

    name = "identity"

    def predict_affine(self, window):
        return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

    def predict(self, window):
        h, w = np.shape(window[0])[:2]
        return identity_field(h, w)


def _to_pixel_matrix(h, w):
    sx, sy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.array([[sx, 0.0, sx], [0.0, sy, sy], [0.0, 0.0, 1.0]])


def pixel_affine_to_norm(a, h, w):
    """Express a pixel-space affine (output -> source) on normalized coordinates."""
    to_pix = _to_pixel_matrix(h, w)
    return (np.linalg.inv(to_pix) @ a.to_homography() @ to_pix)[:2]


def norm_affine_to_pixel(theta, h, w):
    """Inverse of :func:`pixel_affine_to_norm` for an ``h x w`` frame."""
    to_pix = _to_pixel_matrix(h, w)
    ht = np.vstack([np.asarray(theta, dtype=np.float64).reshape(2, 3), [0.0, 0.0, 1.0]])
    return AffineTransform((to_pix @ ht @ np.linalg.inv(to_pix))[:2])


def gaussian_weights(length, center, sigma):
    k = np.arange(length, dtype=np.float64)
    wts = np.exp(-0.5 * ((k - center) / sigma) ** 2)
    return wts / wts.sum()


def smooth_center_pose(cumulative, sigma):
    """Gaussian-weighted average of the cumulative affines' coefficients at the centre."""
    coeffs = np.stack([c.coeffs for c in cumulative])
    c = (len(cumulative) - 1) / 2.0
    return AffineTransform.from_coeffs(gaussian_weights(len(cumulative), c, sigma) @ coeffs)


class ClassicalPredictor:
    """Trajectory smoothing over the window with Gaussian-weighted affine coefficients.

    Pair motions between neighbouring window frames are estimated once and
    cached by frame identity, so each new frame costs one feature
    extraction and one pair estimate.
    """

    name = "classical"

    def __init__(self, sigma=8.0, motion=None):
        if sigma <= 0:
            raise InvalidInputError("sigma must be > 0")
        self.sigma = float(sigma)
        # features on a half-size copy: enough precision, a third of the cost
        self.motion = motion or MotionConfig(max_side=128)
        self._features = {}
        self._pairs = {}
        self.last_fallbacks = []

    def _feat(self, frame):
        key = id(frame)
        hit = self._features.get(key)
        if hit is None or hit[0] is not frame:
            hit = (frame, frame_features(frame, self.motion))
            self._features[key] = hit
        return hit[1]

    def _pair(self, a, b):
        if a is b:
            return AffineTransform.identity(), False
        key = (id(a), id(b))
        hit = self._pairs.get(key)
        if hit is not None and hit[0] is a and hit[1] is b:
            return hit[2], hit[3]
        try:
            m, _ = estimate_motion(a, b, self.motion, self._feat(a), self._feat(b))
            failed = False
        except WarpstabError:
            m, failed = AffineTransform.identity(), True
        self._pairs[key] = (a, b, m, failed)
        return m, failed

    def _prune(self, window):
        live = {id(f) for f in window}
        self._features = {k: v for k, v in self._features.items() if k in live}
        pairs = {(id(a), id(b)) for a, b in zip(window[:-1], window[1:])}
        self._pairs = {k: v for k, v in self._pairs.items() if k in pairs}

    def trajectory(self, window):
        """Cumulative poses ``C_k`` (frame 0 pixels -> frame k pixels) and fallback pair indices."""
        window = list(window)
        if len(window) < 1:
            raise InvalidInputError("empty window")
        poses = [AffineTransform.identity()]
        failed = []
        for k in range(1, len(window)):
            m, bad = self._pair(window[k - 1], window[k])
            if bad:
                failed.append(k - 1)
            poses.append(m @ poses[-1])
        self._prune(window)
        return poses, failed

    def correction(self, window):
        """Pixel affine mapping stabilized output pixels to source pixels of the centre frame."""
        poses, failed = self.trajectory(window)
        self.last_fallbacks = failed
        c = len(poses) // 2
        smooth = smooth_center_pose(poses, self.sigma)
        return poses[c] @ smooth.inverse()

    def predict_affine(self, window):
        h, w = np.shape(window[0])[:2]
        return pixel_affine_to_norm(self.correction(window), h, w)

    def predict(self, window):
        h, w = np.shape(window[0])[:2]
        return affine_grid(self.predict_affine(window), h, w)


def classical_predict(window, sigma=8.0, motion=None):
    """Warp field for the centre frame of ``window`` from a smoothed trajectory."""
    frames = [check_frame(f) for f in window]
    return ClassicalPredictor(sigma, motion).predict(frames)


class TUNetPredictor:
    """Adapter around the generator forward pass."""

    name = "tunet"

    def __init__(self, cfg, weights):
        from .network import _check_store

        _check_store(weights, cfg)
        self.cfg = cfg
        self.weights = weights

    def predict_pair(self, window):
        from .network import build_window_tensor, tunet_forward

        x = build_window_tensor(window, self.cfg)
        a, b = tunet_forward(x, self.cfg, self.weights)
        return a.astype(np.float64), b.astype(np.float64)

    def predict(self, window):
        return self.predict_pair(window)[0]


def make_predictor(name, sigma=8.0, motion=None, net_config=None, weights=None):
    if name == "identity":
        return IdentityPredictor()
    if name == "classical":
        return ClassicalPredictor(sigma, motion)
    if name == "tunet":
        if net_config is None or weights is None:
            raise InvalidInputError("the tunet predictor needs a config and weights")
        return TUNetPredictor(net_config, weights)
    raise InvalidInputError(f"unknown predictor {name!r}; choose identity, classical or tunet")


# ---------------------------------------------------------------------------
# crop region


@dataclass(frozen=True)
class CropRegion:
    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self):
        for v in (self.left, self.top, self.right, self.bottom):
            if not np.isfinite(v) or v < -1.0 - 1e-9 or v > 1.0 + 1e-9:
                raise InvalidInputError("crop region must lie inside [-1, 1]^2")
        if not (self.left < self.right and self.top < self.bottom):
            raise InvalidInputError("crop region must have left < right and top < bottom")

    @classmethod
    def full(cls):
        return cls(-1.0, -1.0, 1.0, 1.0)

    def as_tuple(self):
        return (self.left, self.top, self.right, self.bottom)

    def pixel_box(self, h, w):
        """Inclusive pixel bounds ``(top, left, bottom, right)`` at an ``h x w`` resolution."""
        return (
            float(norm_to_pixel(self.top, h)),
            float(norm_to_pixel(self.left, w)),
            float(norm_to_pixel(self.bottom, h)),
            float(norm_to_pixel(self.right, w)),
        )


def valid_mask(field, eps=1e-9):
    """Pixels whose sampling location lies inside ``[-1, 1]^2``."""
    f = np.asarray(field)
    return np.all(np.abs(f) <= 1.0 + eps, axis=-1) & np.all(np.isfinite(f), axis=-1)


def max_rectangle(mask):
    """Largest all-True axis-aligned rectangle as inclusive ``(top, left, bottom, right)``.

    Ties are broken by the smallest ``(top, left, bottom, right)``. Every
    maximal rectangle is found through the row-histogram method: for each
    bottom row and each bar, the bar's height extended left and right up to
    the first strictly shorter bar.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidInputError("mask must be 2-D")
    h, w = mask.shape
    heights = np.zeros(w, dtype=np.int64)
    best = None
    best_key = None
    for bottom in range(h):
        heights = np.where(mask[bottom], heights + 1, 0)
        if not heights.any():
            continue
        left = np.empty(w, dtype=np.int64)
        right = np.empty(w, dtype=np.int64)
        stack = []
        for j in range(w):
            while stack and heights[stack[-1]] >= heights[j]:
                stack.pop()
            left[j] = stack[-1] + 1 if stack else 0
            stack.append(j)
        stack = []
        for j in range(w - 1, -1, -1):
            while stack and heights[stack[-1]] >= heights[j]:
                stack.pop()
            right[j] = stack[-1] - 1 if stack else w - 1
            stack.append(j)
        area = heights * (right - left + 1)
        top = bottom - heights + 1
        for j in np.flatnonzero(heights):
            key = (-int(area[j]), int(top[j]), int(left[j]), bottom, int(right[j]))
            if best_key is None or key < best_key:
                best_key = key
                best = (int(top[j]), int(left[j]), bottom, int(right[j]))
    return best


def region_from_mask(mask):
    rect = max_rectangle(mask)
    if rect is None:
        raise NoValidRegionError("no pixel is valid in every frame")
    h, w = mask.shape
    top, left, bottom, right = rect
    if top == bottom or left == right:
        raise NoValidRegionError(f"valid region {rect} is thinner than two pixels")
    return CropRegion(
        float(pixel_to_norm(left, w)),
        float(pixel_to_norm(top, h)),
        float(pixel_to_norm(right, w)),
        float(pixel_to_norm(bottom, h)),
    )


def compute_crop_region(fields):
    """Largest rectangle valid in every field, in normalized coordinates."""
    fields = list(fields)
    if not fields:
        raise InvalidInputError("need at least one field")
    shape = np.shape(fields[0])
    mask = np.ones(shape[:2], dtype=bool)
    for k, f in enumerate(fields):
        f = check_field(f)
        if f.shape != shape:
            raise InvalidInputError(f"field {k} has shape {f.shape}, expected {shape}")
        mask &= valid_mask(f)
    return region_from_mask(mask)


def _crop_grid(region, out_h, out_w):
    u = np.linspace(region.left, region.right, out_w)
    v = np.linspace(region.top, region.bottom, out_h)
    return np.meshgrid(u, v)


def _check_region_size(region, h, w):
    top, left, bottom, right = region.pixel_box(h, w)
    if bottom - top < 1.0 - 1e-9 or right - left < 1.0 - 1e-9:
        raise InvalidInputError("crop region spans fewer than 2 pixels")


def crop_resize(frame, region, out_h, out_w):
    """Stretch the crop region of ``frame`` to ``out_h x out_w`` (bilinear)."""
    frame = check_frame(frame, check_range=False)
    _check_region_size(region, *frame.shape[:2])
    uu, vv = _crop_grid(region, out_h, out_w)
    return sample_bilinear(frame, uu, vv)


def _crop_theta(region):
    """Affine on normalized coordinates taking output positions into the crop region."""
    sx = (region.right - region.left) / 2.0
    sy = (region.bottom - region.top) / 2.0
    return np.array([[sx, 0.0, region.left + sx], [0.0, sy, region.top + sy]])


def _compose_theta(a, b):
    ha = np.vstack([a, [0.0, 0.0, 1.0]])
    hb = np.vstack([b, [0.0, 0.0, 1.0]])
    return (ha @ hb)[:2]


def render_frame(frame, prediction, region):
    """Warp and crop ``frame`` at its own resolution in one sampling pass.

    ``prediction`` is either a 2x3 affine on normalized coordinates or a
    dense warp field of any resolution.
    """
    h, w = frame.shape[:2]
    crop = _crop_theta(region)
    pred = np.asarray(prediction, dtype=np.float64)
    if pred.shape == (2, 3):
        return warp_affine(frame, norm_affine_to_pixel(_compose_theta(pred, crop), h, w))
    uu, vv = _crop_grid(region, h, w)
    grid = sample_bilinear(pred, uu, vv)
    return sample_bilinear(frame, grid[..., 0], grid[..., 1])


def prediction_field(prediction, size):
    pred = np.asarray(prediction, dtype=np.float64)
    if pred.shape == (2, 3):
        return affine_grid(pred, size, size)
    return resample_field(pred, size, size)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class StabilizationResult:
    frames: np.ndarray
    predictions: list
    region: CropRegion
    regions: list
    windows: list
    diagnostics: list
    fps: float


def _frame_record(i, pred, fallbacks, elapsed, size):
    # displacement summarized on a coarse lattice, in processing-size pixels
    field = prediction_field(pred, 17)
    shift = np.abs(field - identity_field(17, 17)).mean() * (size - 1) / 2.0
    return {
        "frame": i,
        "mean_shift_px": round(float(shift), 4),
        "fallback": bool(fallbacks),
        "fallback_pairs": list(fallbacks),
        "predict_ms": round(1000.0 * elapsed, 3),
    }


def stabilize_sequence(seq, predictor, cfg=None, crop_mode="global", record_windows=False,
                       on_diagnostic=None):
    """Stabilize a frame sequence; returns a :class:`StabilizationResult`.

    ``crop_mode="global"`` crops every frame with the region valid across the
    whole output; ``"online"`` uses the region valid over the current and the
    previous ``2*theta`` predictions, so frame ``i`` never depends on input
    beyond ``i + theta``.
    """
    cfg = cfg or SlidingWindowConfig()
    if crop_mode not in CROP_MODES:
        raise InvalidInputError(f"crop mode must be one of {CROP_MODES}, got {crop_mode!r}")
    frames = check_sequence(seq)
    n, h, w = frames.shape[:3]
    size = cfg.size
    t0 = time.perf_counter()
    small = {}

    def load(idx):
        # resize lazily and keep one object per frame so caches key on identity
        if idx not in small:
            small[idx] = np.ascontiguousarray(resize_frame(frames[idx - 1], size, size), dtype=np.float32)
        return small[idx]

    win = SlidingWindow(n, cfg.theta)
    preds, windows, diags = [], [], []
    pending = None
    out = np.empty_like(frames) if crop_mode == "online" else None
    regions = []
    recent = deque(maxlen=cfg.window_length)
    for i in range(1, n + 1):
        if i > 1:
            win.advance()
        idx = win.indices
        if record_windows:
            windows.append(idx)
        for k in [k for k in small if k < i - cfg.theta]:
            del small[k]
        window = [load(k) for k in idx]
        ts = time.perf_counter()
        if hasattr(predictor, "predict_pair"):
            cur, nxt = predictor.predict_pair(window)
            pred = cur if pending is None else 0.5 * (cur + pending)
            pending = nxt
        elif hasattr(predictor, "predict_affine"):
            pred = predictor.predict_affine(window)
        else:
            pred = check_field(predictor.predict(window), (size, size))
        elapsed = time.perf_counter() - ts
        fallbacks = list(getattr(predictor, "last_fallbacks", []))
        preds.append(pred)
        rec = _frame_record(i, pred, fallbacks, elapsed, size)
        diags.append(rec)
        if on_diagnostic is not None:
            on_diagnostic(rec)
        if crop_mode == "online":
            recent.append(valid_mask(prediction_field(pred, size)))
            region = region_from_mask(np.logical_and.reduce(list(recent)))
            regions.append(region)
            out[i - 1] = render_frame(frames[i - 1], pred, region)
    if crop_mode == "global":
        mask = np.ones((size, size), dtype=bool)
        for p in preds:
            mask &= valid_mask(prediction_field(p, size))
        region = region_from_mask(mask)
        regions = [region] * n
        out = np.stack([render_frame(frames[k], preds[k], region) for k in range(n)]).astype(frames.dtype)
    fps = n / max(time.perf_counter() - t0, 1e-9)
    return StabilizationResult(out, preds, regions[-1], regions, windows, diags, fps)


class VideoStabilizer(BaseEstimator, TransformerMixin):
    """Estimator-style front end: ``fit`` validates, ``transform`` stabilizes.

    ``transform`` takes ``(n, H, W, 3)`` frames (uint8 or floats in [0, 1])
    and returns stabilized float32 frames of the same shape. Per-frame
    diagnostics and the measured frame rate are stored on the instance.
    """

    def __init__(self, predictor="classical", theta=15, size=256, crop_mode="global",
                 sigma=8.0, net_config=None, weights=None, motion=None):
        self.predictor = predictor
        self.theta = theta
        self.size = size
        self.crop_mode = crop_mode
        self.sigma = sigma
        self.net_config = net_config
        self.weights = weights
        self.motion = motion

    def _build(self):
        cfg = SlidingWindowConfig(self.theta, self.size)
        if self.crop_mode not in CROP_MODES:
            raise InvalidInputError(f"crop mode must be one of {CROP_MODES}")
        if isinstance(self.predictor, str):
            pred = make_predictor(self.predictor, self.sigma, self.motion, self.net_config, self.weights)
        else:
            pred = self.predictor
        return cfg, pred

    def fit(self, X, y=None):
        frames = check_sequence(X)
        self._build()
        self.n_frames_in_ = frames.shape[0]
        self.frame_shape_ = frames.shape[1:3]
        return self

    def transform(self, X):
        if not hasattr(self, "frame_shape_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit before transform")
        frames = check_sequence(X)
        if frames.shape[1:3] != tuple(self.frame_shape_):
            raise InvalidInputError(
                f"frames are {frames.shape[1:3]}, the stabilizer was fitted on {self.frame_shape_}"
            )
        cfg, pred = self._build()
        res = stabilize_sequence(frames, pred, cfg, self.crop_mode)
        self.diagnostics_ = res.diagnostics
        self.region_ = res.region
        self.fps_ = res.fps
        self.predictions_ = res.predictions
        return res.frames
