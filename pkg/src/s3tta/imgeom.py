"""Image geometry: right-angle rotation and bilinear rescaling.

Images are ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in ``{1, 3}`` and
values in ``[0, 1]``. Probability maps share the same layout and go through the
same functions (with ``clamp=False`` where appropriate).

Rotation convention: ``rotate(img, k)`` turns the raster ``k`` quarter turns
counterclockwise in a y-up frame (row 0 at the bottom). Viewed on screen with
row 0 at the top this looks clockwise. ``rotate(rotate(img, k), inverse_turns(k))``
is always the identity.
"""
from __future__ import annotations

import math

import numpy as np

ANGLES = (0, 1, 2, 3)


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as float32 ``(H, W, C)``."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, C) image with C in {{1, 3}}, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"empty image of shape {img.shape}")
    img = img.astype(np.float32, copy=False)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return img


def inverse_turns(k: int) -> int:
    return (4 - k) % 4


def rotate(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate by ``k`` quarter turns; a pure pixel permutation."""
    if k not in ANGLES:
        raise ValueError(f"quarter turns must be in {ANGLES}, got {k}")
    if k == 0:
        return img
    # np.rot90 with a negative count on (rows, cols) is counterclockwise in the y-up frame.
    return np.ascontiguousarray(np.rot90(img, -k, axes=(0, 1)))


def rotate_back(img: np.ndarray, k: int) -> np.ndarray:
    return rotate(img, inverse_turns(k))


def scaled_size(n: int, ratio: float) -> int:
    return int(math.floor(n * ratio + 0.5))


def _axis_taps(n_in: int, n_out: int):
    """Source indices and weights for half-pixel-center linear interpolation.

    Positions are computed in exact integer arithmetic, so the taps of output
    ``j`` and ``n_out - 1 - j`` are exact mirrors of each other. This keeps
    resize bit-exactly commuting with flips and quarter turns.
    """
    j = np.arange(n_out, dtype=np.int64)
    num = (2 * j + 1) * n_in - n_out
    den = 2 * n_out
    lo = num // den
    rem = num - lo * den
    w1 = rem / den
    w0 = (den - rem) / den
    i0 = np.clip(lo, 0, n_in - 1)
    i1 = np.clip(lo + 1, 0, n_in - 1)
    return i0, i1, w0, w1


def resize(img: np.ndarray, ratio: float, clamp: bool = True) -> np.ndarray:
    """Bilinear rescale by ``ratio`` on both axes (half-pixel centers)."""
    if not ratio > 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    h, w = img.shape[:2]
    return resize_to(img, (scaled_size(h, ratio), scaled_size(w, ratio)), clamp=clamp)


def resize_to(img: np.ndarray, size: tuple[int, int], clamp: bool = True) -> np.ndarray:
    """Bilinear resample to an explicit ``(H, W)``."""
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resize would produce an empty image of size {size}")
    h, w = img.shape[:2]
    if (oh, ow) == (h, w):
        return img.copy()
    y0, y1, wy0, wy1 = _axis_taps(h, oh)
    x0, x1, wx0, wx1 = _axis_taps(w, ow)
    src = img.astype(np.float64)
    a = src[y0[:, None], x0[None, :]]
    b = src[y0[:, None], x1[None, :]]
    c = src[y1[:, None], x0[None, :]]
    d = src[y1[:, None], x1[None, :]]
    extra = (slice(None), slice(None)) + (None,) * (img.ndim - 2)
    w00 = (wy0[:, None] * wx0[None, :])[extra]
    w01 = (wy0[:, None] * wx1[None, :])[extra]
    w10 = (wy1[:, None] * wx0[None, :])[extra]
    w11 = (wy1[:, None] * wx1[None, :])[extra]
    # Diagonal pairing makes the sum order invariant under the dihedral group.
    out = (w00 * a + w11 * d) + (w01 * b + w10 * c)
    out = out.astype(img.dtype if img.dtype.kind == "f" else np.float32)
    if clamp:
        np.clip(out, 0.0, 1.0, out=out)
    return out


def resize_nearest(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resample for integer label maps (half-pixel centers)."""
    oh, ow = size
    h, w = labels.shape[:2]
    ys = np.minimum(((2 * np.arange(oh) + 1) * h) // (2 * oh), h - 1)
    xs = np.minimum(((2 * np.arange(ow) + 1) * w) // (2 * ow), w - 1)
    return labels[ys[:, None], xs[None, :]]
