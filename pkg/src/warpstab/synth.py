"""Procedural scenes and ground-truth camera shake.

A scene is a large textured canvas viewed through a moving frame-sized
window. Shake is a per-frame affine ``T_t`` about the frame centre that maps
pixel coordinates of the shaken frame to the stable frame, so::

    shaken_t(p) = stable_t(T_t(p))

Shaken frames are re-rendered from the canvas rather than warped from the
stable frames, which keeps their borders filled.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import AffineTransform, affine_to_warp_field, apply_warp, sample_bilinear
from .exceptions import FrameIOError, InvalidInputError
from .validation import check_sequence

TEXTURES = ("noise", "checker", "sprites")
PATHS = ("static", "pan", "sine")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 128
    width: int = 128
    n_frames: int = 64
    texture: str = "noise"
    path: str = "static"
    pan_velocity: tuple = (1.0, 0.0)
    sine_amplitude: float = 8.0
    sine_period: float = 32.0
    seed: int = 0
    margin: int = None

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise InvalidInputError("frames must be at least 2 x 2")
        if self.n_frames < 1:
            raise InvalidInputError("n_frames must be >= 1")
        if self.texture not in TEXTURES:
            raise InvalidInputError(f"texture must be one of {TEXTURES}, got {self.texture!r}")
        if self.path not in PATHS:
            raise InvalidInputError(f"path must be one of {PATHS}, got {self.path!r}")
        if self.sine_period <= 0:
            raise InvalidInputError("sine_period must be > 0")

    @property
    def frame_margin(self):
        """Canvas border on every side; half a frame keeps the canvas >= 2x the frame."""
        if self.margin is not None:
            return int(self.margin)
        return (max(self.height, self.width) + 1) // 2

    def offsets(self):
        """Top-left canvas position of every frame, relative to the path origin, shape ``(n, 2)``."""
        t = np.arange(self.n_frames, dtype=np.float64)
        if self.path == "static":
            return np.zeros((self.n_frames, 2))
        if self.path == "pan":
            return t[:, None] * np.asarray(self.pan_velocity, dtype=np.float64)[None, :]
        phase = np.sin(2.0 * np.pi * t / self.sine_period)
        return np.stack([self.sine_amplitude * phase, 0.5 * self.sine_amplitude * phase], axis=1)


@dataclass(frozen=True)
class JitterModel:
    trans_sigma: float = 4.0
    rot_sigma: float = 0.01
    scale_sigma: float = 0.0
    rho: float = 0.8
    seed: int = 0
    clip: float = 3.0

    def __post_init__(self):
        if min(self.trans_sigma, self.rot_sigma, self.scale_sigma) < 0:
            raise InvalidInputError("jitter sigmas must be >= 0")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidInputError("rho must lie in [0, 1)")
        if self.clip <= 0:
            raise InvalidInputError("clip must be > 0")

    @property
    def is_null(self):
        return self.trans_sigma == 0 and self.rot_sigma == 0 and self.scale_sigma == 0


def _normalize01(x):
    lo, hi = x.min(), x.max()
    if hi - lo < 1e-12:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def _noise_texture(rng, h, w):
    out = np.zeros((h, w, 3))
    for scale, weight in ((1.0, 0.35), (2.5, 0.5), (6.0, 0.8), (16.0, 1.0)):
        layer = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), (scale, scale, 0))
        out += weight * layer / (layer.std() + 1e-12)
    mix = np.array([[1.0, 0.3, 0.1], [0.2, 1.0, 0.3], [0.1, 0.2, 1.0]])
    return _normalize01(out @ mix)


def _checker_texture(rng, h, w, cell=16):
    rows, cols = -(-h // cell), -(-w // cell)
    colors = rng.uniform(0.05, 0.95, (rows, cols, 3))
    return colors.repeat(cell, axis=0).repeat(cell, axis=1)[:h, :w]


def _sprite_texture(rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.stack([0.3 + 0.3 * xx, 0.3 + 0.3 * yy, 0.5 - 0.2 * xx], axis=-1)
    n = max(40, h * w // 900)
    for _ in range(n):
        color = rng.uniform(0.0, 1.0, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(3, 14)
        if rng.random() < 0.5:
            mask = (np.abs(yy * max(h, w) - cy) < r) & (np.abs(xx * max(h, w) - cx) < 0.7 * r)
        else:
            mask = (yy * max(h, w) - cy) ** 2 + (xx * max(h, w) - cx) ** 2 < r * r
        img[mask] = color
    return np.clip(img, 0.0, 1.0)


class Scene:
    """Canvas plus camera path; renders stable or shaken frames."""

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        off = cfg.offsets()
        lo = np.floor(off.min(axis=0))
        hi = np.ceil(off.max(axis=0))
        m = cfg.frame_margin
        self.origin = np.array([m - lo[0], m - lo[1]])
        cw = int(cfg.width + 2 * m + hi[0] - lo[0])
        ch = int(cfg.height + 2 * m + hi[1] - lo[1])
        make = {"noise": _noise_texture, "checker": _checker_texture, "sprites": _sprite_texture}
        canvas = make[cfg.texture](rng, ch, cw)
        if cfg.texture != "noise":
            # soften hard edges so subpixel shake resamples cleanly
            canvas = ndimage.gaussian_filter(canvas, (1.0, 1.0, 0))
        self.canvas = canvas.astype(np.float32)
        self.offsets = off + self.origin

    @property
    def center(self):
        return ((self.cfg.width - 1) / 2.0, (self.cfg.height - 1) / 2.0)

    def _render_one(self, offset, transform):
        cfg = self.cfg
        h, w = cfg.height, cfg.width
        ox, oy = offset
        if transform is None and float(ox).is_integer() and float(oy).is_integer():
            return self.canvas[int(oy) : int(oy) + h, int(ox) : int(ox) + w].copy()
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        if transform is not None:
            pts = transform.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
            xs, ys = pts[:, 0].reshape(h, w), pts[:, 1].reshape(h, w)
        ch, cw = self.canvas.shape[:2]
        u = 2.0 * (xs + ox) / (cw - 1) - 1.0
        v = 2.0 * (ys + oy) / (ch - 1) - 1.0
        return sample_bilinear(self.canvas, u, v)

    def frames(self):
        return np.stack([self._render_one(o, None) for o in self.offsets])

    def render(self, transforms):
        """Frames seen through ``transforms`` (shaken pixel -> stable pixel)."""
        transforms = list(transforms)
        if len(transforms) != self.cfg.n_frames:
            raise InvalidInputError(f"need {self.cfg.n_frames} transforms, got {len(transforms)}")
        out = []
        for o, t in zip(self.offsets, transforms):
            ident = t is None or t.allclose(AffineTransform.identity(), atol=0.0)
            out.append(self._render_one(o, None if ident else t))
        return np.stack(out)


def build_scene(cfg=None):
    return Scene(cfg or SceneConfig())


def render_scene(cfg=None):
    """Stable frames ``(n, H, W, 3)`` float32 in [0, 1]."""
    return build_scene(cfg).frames()


def sample_jitter(n, model, center):
    """AR(1) shake transforms about ``center`` for ``n`` frames."""
    rng = np.random.default_rng(model.seed)
    sig = np.array([model.trans_sigma, model.trans_sigma, model.rot_sigma, model.scale_sigma])
    innov = rng.standard_normal((n, 4))
    state = np.zeros((n, 4))
    k = np.sqrt(1.0 - model.rho ** 2)
    # start in the stationary distribution so every frame has spread sigma
    state[0] = sig * innov[0]
    for t in range(1, n):
        state[t] = model.rho * state[t - 1] + k * sig * innov[t]
    state = np.clip(state, -model.clip * sig, model.clip * sig)
    cx, cy = center
    out = []
    for tx, ty, ang, logs in state:
        s = np.exp(logs)
        c, sn = s * np.cos(ang), s * np.sin(ang)
        m = np.array([
            [c, -sn, cx - c * cx + sn * cy + tx],
            [sn, c, cy - sn * cx - c * cy + ty],
        ])
        out.append(AffineTransform(m))
    return out


def inject_jitter(seq, model=None):
    """Shake a sequence; returns ``(shaken frames, transforms)``.

    ``seq`` may be a :class:`Scene` (frames re-rendered from its canvas) or
    a plain frame array (frames resampled directly, borders go black).
    """
    model = model or JitterModel()
    if isinstance(seq, Scene):
        n = seq.cfg.n_frames
        if model.is_null:
            return seq.frames(), [AffineTransform.identity() for _ in range(n)]
        transforms = sample_jitter(n, model, seq.center)
        return seq.render(transforms), transforms
    frames = check_sequence(seq)
    n, h, w = frames.shape[:3]
    if model.is_null:
        return frames.copy(), [AffineTransform.identity() for _ in range(n)]
    transforms = sample_jitter(n, model, ((w - 1) / 2.0, (h - 1) / 2.0))
    shaken = np.stack([apply_warp(f, affine_to_warp_field(t, h, w)) for f, t in zip(frames, transforms)])
    return shaken.astype(frames.dtype), transforms


def format_transforms(transforms):
    """Sidecar text: one line per frame, ``a1 .. a6`` with six decimals."""
    lines = [" ".join(f"{v:.6f}" for v in t.coeffs) for t in transforms]
    return "\n".join(lines) + ("\n" if lines else "")


def write_transforms(path, transforms):
    with open(path, "w") as fh:
        fh.write(format_transforms(transforms))


def read_transforms(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                vals = [float(v) for v in line.split()]
            except ValueError as exc:
                raise FrameIOError(f"{path}:{lineno}: {exc}") from exc
            if len(vals) != 6:
                raise FrameIOError(f"{path}:{lineno}: expected 6 coefficients, got {len(vals)}")
            out.append(AffineTransform.from_coeffs(vals))
    return out
