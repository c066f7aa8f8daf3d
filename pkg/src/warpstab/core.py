"""Planar transforms, normalized warp fields, and the bilinear sampler.

Coordinate conventions used everywhere in the package:

* pixel coordinates ``(x, y)``: ``x`` is the column, ``y`` the row, pixel
  centers sit on integers;
* normalized coordinates are corner aligned, ``u = 2 x / (W - 1) - 1``, so
  ``-1`` and ``+1`` land on the first and last pixel centers;
* a warp field is an ``H x W x 2`` array holding, for every *output* pixel,
  the normalized ``(u, v)`` location to sample in the *source* frame.
"""

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidInputError, ShapeMismatchError, SingularMatrixError
from .validation import check_field, check_frame

_BORDER_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Six-parameter map ``(x, y) -> (a1 x + a2 y + a3, a4 x + a5 y + a6)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape == (6,):
            m = m.reshape(2, 3)
        if m.shape == (3, 3):
            m = m[:2]
        if m.shape != (2, 3):
            raise InvalidInputError(f"affine matrix must be 2x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("affine coefficients must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls):
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @classmethod
    def from_coeffs(cls, coeffs):
        return cls(np.asarray(coeffs, dtype=np.float64).reshape(2, 3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]]))

    @classmethod
    def scaling(cls, sx, sy=None, center=(0.0, 0.0)):
        sy = sx if sy is None else sy
        cx, cy = center
        return cls(np.array([[sx, 0.0, cx - sx * cx], [0.0, sy, cy - sy * cy]]))

    @classmethod
    def rotation(cls, angle, center=(0.0, 0.0)):
        c, s = np.cos(angle), np.sin(angle)
        cx, cy = center
        return cls(
            np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]])
        )

    @property
    def coeffs(self):
        """The coefficients ``a1..a6`` in row-major order."""
        return self.matrix.ravel().copy()

    @property
    def linear(self):
        return self.matrix[:, :2]

    @property
    def det(self):
        return float(np.linalg.det(self.matrix[:, :2]))

    def to_homography(self):
        return affine_to_homography(self)

    def inverse(self):
        return AffineTransform(invert_homography(self.to_homography()))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def __matmul__(self, other):
        return compose_affine(self, other)

    def allclose(self, other, atol=1e-9):
        return np.allclose(self.matrix, other.matrix, rtol=0.0, atol=atol)

    def __repr__(self):
        c = ", ".join(f"{v:.6g}" for v in self.matrix.ravel())
        return f"AffineTransform([{c}])"


def compose_affine(a, b):
    """Return ``a ∘ b``: apply ``b`` first, then ``a``."""
    ha, hb = affine_to_homography(a), affine_to_homography(b)
    return AffineTransform((ha @ hb)[:2])


def affine_to_homography(a):
    """Embed an affine transform as a 3x3 matrix with last row ``(0, 0, 1)``."""
    m = a.matrix if isinstance(a, AffineTransform) else AffineTransform(a).matrix
    h = np.eye(3)
    h[:2] = m
    return h


def normalize_homography(h):
    """Scale ``h`` so its bottom-right entry is 1 (left alone when that entry is 0)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise InvalidInputError(f"homography must be 3x3, got {h.shape}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("homography entries must be finite")
    if h[2, 2] != 0.0:
        h = h / h[2, 2]
    return h


def invert_homography(h):
    h = normalize_homography(h)
    if abs(np.linalg.det(h)) <= 1e-12:
        raise SingularMatrixError("homography is singular (|det| <= 1e-12)")
    return normalize_homography(np.linalg.inv(h))


def pixel_to_norm(coord, size):
    return 2.0 * np.asarray(coord, dtype=np.float64) / (size - 1) - 1.0


def norm_to_pixel(coord, size):
    return (np.asarray(coord, dtype=np.float64) + 1.0) * (size - 1) / 2.0


def pixel_grid(h, w):
    """Pixel-center coordinates ``(xs, ys)``, each of shape ``(h, w)``."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def identity_field(h, w):
    if h < 2 or w < 2:
        raise InvalidInputError("field height and width must be >= 2")
    u = np.linspace(-1.0, 1.0, w)
    v = np.linspace(-1.0, 1.0, h)
    return np.stack(np.meshgrid(u, v), axis=-1)


def affine_to_warp_field(a, h, w):
    """Warp field sampling source pixel ``a(x, y)`` for each output pixel ``(x, y)``."""
    if h < 2 or w < 2:
        raise InvalidInputError("field height and width must be >= 2")
    if not isinstance(a, AffineTransform):
        a = AffineTransform(a)
    m = a.matrix
    xs, ys = pixel_grid(h, w)
    sx = m[0, 0] * xs + m[0, 1] * ys + m[0, 2]
    sy = m[1, 0] * xs + m[1, 1] * ys + m[1, 2]
    return np.stack([pixel_to_norm(sx, w), pixel_to_norm(sy, h)], axis=-1)


def affine_grid(theta, h, w):
    """Warp field for an affine acting directly on normalized coordinates.

    ``theta`` is 2x3; the identity theta yields :func:`identity_field` and the
    all-zero theta yields an all-zero field.
    """
    theta = np.asarray(theta, dtype=np.float64).reshape(2, 3)
    base = identity_field(h, w)
    return base @ theta[:, :2].T + theta[:, 2]


def _bilinear_pixels(image, px, py, fill, finite=False):
    """Bilinear lookup at pixel coordinates; ``px``/``py`` are float arrays and consumed."""
    h, w, c = image.shape
    out_dtype = image.dtype if image.dtype in (np.float32, np.float64) else np.float64
    valid = (px >= -_BORDER_EPS) & (px <= w - 1 + _BORDER_EPS)
    valid &= (py >= -_BORDER_EPS) & (py <= h - 1 + _BORDER_EPS)
    if not finite:
        np.nan_to_num(px, copy=False)
        np.nan_to_num(py, copy=False)
    np.clip(px, 0.0, w - 1, out=px)
    np.clip(py, 0.0, h - 1, out=py)
    x0 = px.astype(np.intp)
    np.minimum(x0, w - 2, out=x0)
    y0 = py.astype(np.intp)
    np.minimum(y0, h - 2, out=y0)
    px -= x0
    py -= y0
    fx = px.astype(out_dtype)[..., None]
    fy = py.astype(out_dtype)[..., None]
    flat = image.reshape(h * w, c)
    if flat.dtype != out_dtype:
        flat = flat.astype(out_dtype)
    idx = y0 * w
    idx += x0
    top = flat.take(idx, axis=0)
    right = flat.take(idx + 1, axis=0)
    right -= top
    right *= fx
    top += right
    idx += w
    bot = flat.take(idx, axis=0)
    right = flat.take(idx + 1, axis=0)
    right -= bot
    right *= fx
    bot += right
    bot -= top
    bot *= fy
    top += bot
    if not valid.all():
        top[~valid] = fill
    return top


def sample_bilinear(image, u, v, fill=0.0):
    """Bilinearly sample ``image`` (H x W x C) at normalized coordinates.

    Locations outside ``[-1, 1]`` (beyond a tiny rounding tolerance) receive
    ``fill``. Every in-range sample is a convex combination of its four
    neighbours.
    """
    image = np.asarray(image)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w = image.shape[:2]
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    px = (u + 1.0) * (0.5 * (w - 1))
    py = (v + 1.0) * (0.5 * (h - 1))
    out = _bilinear_pixels(image, px, py, fill)
    return out[..., 0] if squeeze else out


def warp_affine(frame, a, out_h=None, out_w=None, fill=0.0):
    """Output pixel ``(x, y)`` takes the source sample at ``a(x, y)`` (pixel units).

    Same sampling rule as :func:`sample_bilinear`, without building a
    normalized grid first.
    """
    frame = np.asarray(frame)
    squeeze = frame.ndim == 2
    if squeeze:
        frame = frame[:, :, None]
    out_h = frame.shape[0] if out_h is None else out_h
    out_w = frame.shape[1] if out_w is None else out_w
    m = (a if isinstance(a, AffineTransform) else AffineTransform(a)).matrix
    # float32 frames get float32 coordinates: exact on integers, ~1e-4 px at 1k px
    cdt = np.float32 if frame.dtype == np.float32 else np.float64
    m = m.astype(cdt)
    xs = np.arange(out_w, dtype=cdt)
    ys = np.arange(out_h, dtype=cdt)[:, None]
    px = m[0, 0] * xs + (m[0, 1] * ys + m[0, 2])
    py = m[1, 0] * xs + (m[1, 1] * ys + m[1, 2])
    out = _bilinear_pixels(frame, px, py, fill, finite=True)
    return out[..., 0] if squeeze else out


def apply_warp(frame, field):
    """Resample ``frame`` through ``field``; out-of-frame samples are black."""
    frame = check_frame(frame, check_range=False)
    field = check_field(field)
    if field.shape[:2] != frame.shape[:2]:
        raise ShapeMismatchError(
            f"field shape {field.shape[:2]} does not match frame shape {frame.shape[:2]}"
        )
    return sample_bilinear(frame, field[..., 0], field[..., 1])


def resample_field(field, h, w):
    """Resize a warp field to ``h x w``; the stored coordinates are resolution free."""
    field = check_field(field)
    if field.shape[:2] == (h, w):
        return field
    u = np.linspace(-1.0, 1.0, w)
    v = np.linspace(-1.0, 1.0, h)
    uu, vv = np.meshgrid(u, v)
    return sample_bilinear(field, uu, vv)


def _axis_taps(n_in, n_out):
    pos = np.linspace(0.0, n_in - 1, n_out)
    i0 = np.minimum(pos.astype(np.intp), max(n_in - 2, 0))
    return i0, pos - i0


def resize_frame(frame, h, w):
    """Corner-aligned bilinear resize, done one axis at a time."""
    frame = np.asarray(frame)
    if frame.shape[:2] == (h, w):
        return frame
    dt = frame.dtype if frame.dtype in (np.float32, np.float64) else np.float64
    out = frame.astype(dt, copy=False)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
    if out.shape[1] != w:
        i0, f = _axis_taps(out.shape[1], w)
        f = f.astype(dt)[None, :, None]
        a = out[:, i0]
        out = a + (out[:, np.minimum(i0 + 1, out.shape[1] - 1)] - a) * f
    if out.shape[0] != h:
        i0, f = _axis_taps(out.shape[0], h)
        f = f.astype(dt)[:, None, None]
        a = out[i0]
        out = a + (out[np.minimum(i0 + 1, out.shape[0] - 1)] - a) * f
    return out[..., 0] if squeeze else out


def to_gray(frame):
    """Luma (Rec. 601 weights) of an RGB frame."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        return frame
    weights = np.array([0.299, 0.587, 0.114], dtype=frame.dtype if frame.dtype == np.float32 else np.float64)
    return frame @ weights


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
