"""Cropping ratio, distortion and stability scores for a stabilized video.

Homographies passed to :func:`cropping_ratio` and :func:`distortion_score`
map pixels of an unstable frame to the matching stabilized frame, so a
stabilizer that zooms in by 1.25 to hide borders yields ``C = 1 / 1.25**2``.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import AffineTransform, affine_to_homography, normalize_homography
from .exceptions import (
    InvalidInputError,
    NoModelError,
    ShapeMismatchError,
    SingularMatrixError,
    WarpstabError,
)
from .motion import MotionConfig, chain_transforms, estimate_motion, frame_features
from .validation import check_sequence


@dataclass(frozen=True)
class StabilityConfig:
    rows: int = 4
    cols: int = 4
    band: tuple = (1, 5)

    def __post_init__(self):
        lo, hi = self.band
        if self.rows < 1 or self.cols < 1:
            raise InvalidInputError("grid must have at least one cell per axis")
        if lo < 1 or hi < lo:
            raise InvalidInputError(f"band {self.band} must satisfy 1 <= lo <= hi (bin 0 is DC)")


@dataclass
class MetricsReport:
    cropping: float
    distortion: float
    stability: float
    cropping_series: list = field(default_factory=list)
    distortion_series: list = field(default_factory=list)
    stability_series: list = field(default_factory=list)
    mode: str = "pair"
    fallback_frames: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def _as_homography(h, index):
    if isinstance(h, AffineTransform):
        return affine_to_homography(h)
    try:
        m = normalize_homography(h)
    except InvalidInputError as exc:
        raise InvalidInputError(f"frame {index}: {exc}") from exc
    if abs(np.linalg.det(m)) <= 1e-12:
        raise SingularMatrixError(f"frame {index}: homography is singular")
    return m


def _homographies(hs):
    hs = list(hs)
    if not hs:
        raise InvalidInputError("need at least one homography")
    return [_as_homography(h, i) for i, h in enumerate(hs)]


def cropping_series(hs):
    """Per-frame ``1 / sigma_1**2`` of each homography's 2x2 linear block."""
    out = []
    for i, h in enumerate(_homographies(hs)):
        s1 = np.linalg.svd(h[:2, :2], compute_uv=False)[0]
        if s1 <= 0:
            raise SingularMatrixError(f"frame {i}: zero singular value")
        out.append(1.0 / (s1 * s1))
    return np.array(out)


def cropping_ratio(hs):
    return float(np.mean(cropping_series(hs)))


def affine_part(h):
    """Split ``H = A @ T``: ``A`` is ``H`` with its projective row reset to ``(0, 0, 1)``."""
    h = normalize_homography(h)
    a = h.copy()
    a[2] = (0.0, 0.0, 1.0)
    return a, np.linalg.solve(a, h)


def distortion_series(hs):
    """Per-frame small/large ratio of the eigenvalue magnitudes of the affine linear part."""
    out = []
    for i, h in enumerate(_homographies(hs)):
        a, _ = affine_part(h)
        mags = np.sort(np.abs(np.linalg.eigvals(a[:2, :2])))
        if mags[0] <= 1e-12:
            raise SingularMatrixError(f"frame {i}: zero eigenvalue in the affine part")
        out.append(mags[0] / mags[1])
    return np.array(out)


def distortion_score(hs):
    return float(np.min(distortion_series(hs)))


# ---------------------------------------------------------------------------
# stability


def grid_vertices(h, w, rows=4, cols=4):
    """Pixel centres of the ``rows x cols`` grid cells, row-major, shape ``(rows*cols, 2)``."""
    xs = (np.arange(cols) + 0.5) * w / cols - 0.5
    ys = (np.arange(rows) + 0.5) * h / rows - 0.5
    xx, yy = np.meshgrid(xs, ys)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def vertex_trajectories(seq, cfg=None, motion_cfg=None, return_flags=False):
    """Track grid vertices through a sequence via chained inter-frame affines.

    Returns ``(N, n, 2)`` positions: the vertex ``v`` of frame 0 sits at
    ``M_t(v)`` in frame ``t``, where ``M_t`` chains the estimated pair
    motions. Pairs whose estimation fails contribute an identity step and
    are listed in the flags (index of the later frame).
    """
    cfg = cfg or StabilityConfig()
    motion_cfg = motion_cfg or MotionConfig()
    frames = check_sequence(seq)
    n, h, w = frames.shape[:3]
    feats = [frame_features(f, motion_cfg) for f in frames]
    steps = [AffineTransform.identity()]
    failed = []
    for t in range(1, n):
        try:
            a, _ = estimate_motion(frames[t - 1], frames[t], motion_cfg, feats[t - 1], feats[t])
        except (NoModelError, WarpstabError):
            a = AffineTransform.identity()
            failed.append(t)
        steps.append(a)
    cumulative = chain_transforms(steps)
    verts = grid_vertices(h, w, cfg.rows, cfg.cols)
    traj = np.stack([m.apply(verts) for m in cumulative], axis=1)
    return (traj, failed) if return_flags else traj


def _band_bins(n, band):
    lo, hi = band
    if n < 2 * hi:
        raise InvalidInputError(f"trajectory length {n} is too short for band upper bin {hi}")
    bins = set()
    for k in range(lo, hi + 1):
        bins.add(k)
        bins.add(n - k)
    bins.discard(0)
    return np.array(sorted(bins))


def band_power_split(x, band=(1, 5)):
    """``(band power, out-of-band AC power, total AC power)`` of a 1-D signal's FFT."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("expected a 1-D signal")
    bins = _band_bins(x.size, band)
    power = np.abs(np.fft.fft(x - x.mean())) ** 2
    total = float(power[1:].sum())
    inside = float(power[bins].sum())
    return inside, total - inside, total


def _as_trajectories(trajectories):
    t = np.asarray(trajectories, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    if t.ndim != 3:
        raise InvalidInputError(f"trajectories must be (N, n) or (N, n, axes), got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise InvalidInputError("trajectories must be finite")
    return t


def stability_series(trajectories, cfg=None):
    """Band fraction for every vertex (axes averaged); zero AC power counts as 1."""
    cfg = cfg or StabilityConfig()
    t = _as_trajectories(trajectories)
    bins = _band_bins(t.shape[1], cfg.band)
    centered = t - t.mean(axis=1, keepdims=True)
    power = np.abs(np.fft.fft(centered, axis=1)) ** 2
    total = power[:, 1:].sum(axis=1)
    inside = power[:, bins].sum(axis=1)
    # relative floor: rounding noise of an exactly constant signal is not motion
    scale = np.maximum((t ** 2).sum(axis=1), 1.0)
    still = total <= 1e-20 * scale
    frac = np.where(still, 1.0, inside / np.where(still, 1.0, total))
    return np.clip(frac, 0.0, 1.0).mean(axis=1)


def stability_score(trajectories, cfg=None):
    return float(np.mean(stability_series(trajectories, cfg)))


# ---------------------------------------------------------------------------
# end to end


def estimate_pair_homographies(original, stabilized, motion_cfg=None, mode="pair"):
    """Frame homographies for the C and D metrics plus the indices that fell back to identity.

    ``mode="pair"`` relates each unstable frame to its stabilized frame;
    ``mode="consecutive"`` relates consecutive stabilized frames.
    """
    motion_cfg = motion_cfg or MotionConfig()
    if mode == "pair":
        a, b = check_sequence(original), check_sequence(stabilized)
        if a.shape[0] != b.shape[0]:
            raise ShapeMismatchError(f"sequence lengths differ: {a.shape[0]} vs {b.shape[0]}")
        pairs = list(zip(a, b))
    elif mode == "consecutive":
        b = check_sequence(stabilized)
        pairs = list(zip(b[:-1], b[1:])) or [(b[0], b[0])]
    else:
        raise InvalidInputError(f"unknown homography mode {mode!r}")
    hs, failed = [], []
    for i, (x, y) in enumerate(pairs):
        try:
            m, _ = estimate_motion(x, y, motion_cfg)
        except WarpstabError:
            m = AffineTransform.identity()
            failed.append(i)
        hs.append(affine_to_homography(m))
    return hs, failed


def evaluate(original, stabilized, mode="pair", stability_cfg=None, motion_cfg=None,
             homographies=None, trajectories=None):
    """C, D and S for a stabilized sequence.

    ``homographies`` (for C and D) and ``trajectories`` (for S) may be given
    directly, in which case no motion is estimated for that part.
    """
    stability_cfg = stability_cfg or StabilityConfig()
    failed = []
    if homographies is None:
        homographies, failed = estimate_pair_homographies(original, stabilized, motion_cfg, mode)
    if trajectories is None:
        trajectories, traj_failed = vertex_trajectories(stabilized, stability_cfg, motion_cfg, return_flags=True)
        failed = sorted(set(failed) | set(traj_failed))
    cs = cropping_series(homographies)
    ds = distortion_series(homographies)
    ss = stability_series(trajectories, stability_cfg)
    return MetricsReport(
        cropping=float(cs.mean()),
        distortion=float(ds.min()),
        stability=float(ss.mean()),
        cropping_series=cs.tolist(),
        distortion_series=ds.tolist(),
        stability_series=ss.tolist(),
        mode=mode,
        fallback_frames=[int(i) for i in failed],
    )
