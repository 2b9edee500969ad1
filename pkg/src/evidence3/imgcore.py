"""Image representation and colour-space helpers.

Images are ``numpy`` arrays of shape ``(H, W, 3)`` holding float64 channel
values in ``[0, 1]``. Every function here is pure and vectorised, so a single
pixel can be passed as an array of shape ``(3,)`` as well.
"""

import numpy as np

# BT.601 luma weights
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class ImageError(ValueError):
    """Raised when an array is not a valid RGB image."""


def check_image(img, *, copy=False):
    """Validate ``img`` and return it as a float64 ``(H, W, 3)`` array.

    Raises :class:`ImageError` if the shape is wrong or a channel lies
    outside ``[0, 1]`` (NaN included).
    """
    arr = np.array(img, dtype=np.float64, copy=copy)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageError(f"expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImageError("image must have at least one pixel")
    if not np.all((arr >= 0.0) & (arr <= 1.0)):
        raise ImageError("channel values must lie in [0, 1]")
    return arr


def uniform_image(height, width, rgb):
    """Return an ``(height, width, 3)`` image filled with one colour."""
    out = np.empty((height, width, 3), dtype=np.float64)
    out[...] = np.asarray(rgb, dtype=np.float64)
    return out


def rgb_to_hsv(rgb):
    """Hexcone RGB -> HSV conversion.

    Returns an array with the same leading shape and a trailing axis of
    ``(h, s, v)`` where ``h`` is in degrees ``[0, 360)``. Pixels with zero
    chroma get ``h = 0``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)

    s = np.zeros_like(v)
    np.divide(c, v, out=s, where=v > 0)

    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h * 60.0, 0.0)
    # (x % 6) * 60 can round up to exactly 360 for tiny negative x
    h = np.where(h >= 360.0, h - 360.0, h)
    return np.stack([h, np.clip(s, 0.0, 1.0), np.clip(v, 0.0, 1.0)], axis=-1)


def hsv_to_rgb(hsv):
    """Inverse hexcone conversion. ``h`` is reduced modulo 360 first."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h = np.mod(hsv[..., 0], 360.0) / 60.0
    s = np.clip(hsv[..., 1], 0.0, 1.0)
    v = np.clip(hsv[..., 2], 0.0, 1.0)

    # standard closed form: f(n) = v - v*s*max(0, min(k, 4-k, 1)), k = (n + h) mod 6
    def channel(n):
        k = np.mod(n + h, 6.0)
        return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)

    out = np.stack([channel(5.0), channel(3.0), channel(1.0)], axis=-1)
    return np.clip(out, 0.0, 1.0)


def luminance_plane(img):
    """BT.601 luma of every pixel, shape ``(H, W)``, values in ``[0, 1]``."""
    img = np.asarray(img, dtype=np.float64)
    y = img[..., 0] * LUMA_WEIGHTS[0] + img[..., 1] * LUMA_WEIGHTS[1] + img[..., 2] * LUMA_WEIGHTS[2]
    return np.clip(y, 0.0, 1.0)


def to_uint8(img):
    """Quantise to 8 bits with round-half-up."""
    img = np.asarray(img, dtype=np.float64)
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(arr):
    """Map 8-bit channel values back onto ``[0, 1]``."""
    return np.asarray(arr, dtype=np.float64) / 255.0
