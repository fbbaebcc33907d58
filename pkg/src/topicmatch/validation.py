"""Input validation helpers shared by the public entry points.

These mirror the style of scikit-learn's ``check_array`` utilities but are
specialized for the handful of shapes this package consumes: grayscale
images, 2D point lists, and probability simplexes.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

COARSE_STRIDE = 8
FINE_STRIDE = 2


def as_image(pixels, *, require_unit_range: bool = True) -> np.ndarray:
    """Validate and convert a grayscale image to a float64 H x W array.

    Raises ShapeError unless the array is 2D, finite, and (optionally)
    within [0, 1].
    """
    img = np.asarray(pixels, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"image must be 2D grayscale, got shape {img.shape}")
    if img.size == 0:
        raise ShapeError("image is empty")
    if not np.isfinite(img).all():
        raise ShapeError("image contains non-finite values")
    if require_unit_range and (img.min() < -1e-9 or img.max() > 1 + 1e-9):
        raise ShapeError(
            f"image values must lie in [0, 1], got range [{img.min():.4g}, {img.max():.4g}]"
        )
    return img


def check_divisible(height: int, width: int, divisor: int = COARSE_STRIDE) -> None:
    if height % divisor or width % divisor:
        raise ShapeError(
            f"image dims ({height}, {width}) must be divisible by {divisor}"
        )


def pad_to_multiple(img: np.ndarray, divisor: int = COARSE_STRIDE) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-pad an image on the bottom/right so both dims divide ``divisor``.

    Returns the padded image and the original (height, width) so match
    coordinates can be reported in the unpadded frame.
    """
    h, w = img.shape
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph or pw:
        img = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    return img, (h, w)


def as_points(pts) -> np.ndarray:
    """Validate a list of 2D points into an (N, 2) float64 array."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"expected (N, 2) points, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeError("points contain non-finite values")
    return arr


def check_simplex(dist, *, axis: int = -1, tol: float = 1e-6, name: str = "distribution") -> np.ndarray:
    """Check that ``dist`` is nonnegative and sums to 1 along ``axis``."""
    arr = np.asarray(dist, dtype=np.float64)
    if arr.size == 0:
        raise ShapeError(f"{name} is empty")
    if arr.min() < -tol:
        raise ShapeError(f"{name} has negative entries (min {arr.min():.3g})")
    sums = arr.sum(axis=axis)
    if np.abs(sums - 1.0).max() > tol:
        raise ShapeError(f"{name} rows do not sum to 1 (max dev {np.abs(sums - 1).max():.3g})")
    return arr


def check_matrix(m, shape: tuple[int, int], name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ShapeError(f"{name} contains non-finite values")
    return arr
