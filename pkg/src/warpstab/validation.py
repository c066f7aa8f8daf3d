"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .exceptions import InvalidInputError, ShapeMismatchError


def _as_float(arr, name):
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255.0)
    if arr.dtype == np.bool_ or np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64)
    elif not np.issubdtype(arr.dtype, np.floating):
        raise InvalidInputError(f"{name}: unsupported dtype {arr.dtype}")
    elif arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def check_frame(frame, name="frame", check_range=True):
    """Validate an H x W x 3 image with finite samples in [0, 1].

    8-bit input is rescaled by 1/255. A 2-D array is accepted as a
    single-channel image and broadcast to three channels.
    """
    arr = _as_float(frame, name)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"{name}: expected H x W x 3, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise InvalidInputError(f"{name}: height and width must be >= 2, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite samples")
    if check_range and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise InvalidInputError(f"{name}: samples must lie in [0, 1]")
    return arr


def check_sequence(frames, name="sequence"):
    """Validate a non-empty sequence of equally sized frames.

    Returns an ``(n, H, W, 3)`` float array.
    """
    if isinstance(frames, np.ndarray) and frames.ndim == 4:
        seq = _as_float(frames, name)
        if seq.shape[0] < 1:
            raise InvalidInputError(f"{name}: must contain at least one frame")
        for i in range(seq.shape[0]):
            check_frame(seq[i], name=f"{name}[{i}]")
        return seq
    frames = list(frames)
    if not frames:
        raise InvalidInputError(f"{name}: must contain at least one frame")
    checked = [check_frame(f, name=f"{name}[{i}]") for i, f in enumerate(frames)]
    shape = checked[0].shape
    for i, f in enumerate(checked):
        if f.shape != shape:
            raise ShapeMismatchError(
                f"{name}[{i}]: shape {f.shape} differs from first frame {shape}"
            )
    return np.stack(checked)


def check_field(field, shape=None, name="field"):
    """Validate an H x W x 2 warp field of finite normalized coordinates."""
    arr = np.asarray(field)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise InvalidInputError(f"{name}: expected H x W x 2, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite coordinates")
    if shape is not None and tuple(arr.shape[:2]) != tuple(shape[:2]):
        raise ShapeMismatchError(
            f"{name}: spatial shape {arr.shape[:2]} does not match {tuple(shape[:2])}"
        )
    return arr


def check_points(points, name="points"):
    """Return points as an ``(n, 2)`` float64 array of finite (x, y)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"{name}: expected (n, 2), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name}: contains non-finite coordinates")
    return arr
