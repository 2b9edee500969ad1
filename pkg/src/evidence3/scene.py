"""Synthetic pick-the-fruit scenes.

Each scene is a 64x64 image of a uniform leaf-green background with one
red-orange disc (the target). The disc's luminance is matched to the
background to within a fraction of one 32-level luminance bin, so the
target stands out by chroma rather than brightness, much like ripe fruit
among foliage. Clean scenes therefore have a flat luminance texture, and
every perturbation that disturbs it is visible to the spectral and entropy
metrics.
"""

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import LUMA_WEIGHTS, hsv_to_rgb

SIZE = 64

BG_HUE = (100.0, 120.0)
BG_SAT = (0.45, 0.70)
BG_VALUE = 0.55  # background luma is snapped to the 1/32-bin centre nearest this value's luma
TARGET_HUE = (-15.0, 25.0)
TARGET_SAT = (0.45, 0.70)
TARGET_LUMA_JITTER = 0.008
RADIUS = (7.0, 12.0)


@dataclass(frozen=True)
class SceneLayout:
    bg_rgb: tuple
    target_rgb: tuple
    cx: float
    cy: float
    radius: float


def _rgb_with_luma(hue, sat, luma):
    """RGB colour of the given hue/saturation whose BT.601 luma is ``luma``."""
    unit = hsv_to_rgb(np.array([hue % 360.0, sat, 1.0]))
    scale = luma / float(unit @ LUMA_WEIGHTS)
    if scale > 1.0:
        raise ValueError("requested luma is not reachable at this hue/saturation")
    return tuple(float(c) for c in np.clip(unit * scale, 0.0, 1.0))


def draw_layout(rng):
    """Draw background/target colours and the target disc geometry."""
    bg_hue, bg_sat = rng.uniform(*BG_HUE), rng.uniform(*BG_SAT)
    unit_luma = float(hsv_to_rgb(np.array([bg_hue, bg_sat, 1.0])) @ LUMA_WEIGHTS)
    luma = (math.floor(BG_VALUE * unit_luma * 32.0) + 0.5) / 32.0
    bg = _rgb_with_luma(bg_hue, bg_sat, luma)
    target_luma = luma + rng.uniform(-TARGET_LUMA_JITTER, TARGET_LUMA_JITTER)
    target = _rgb_with_luma(rng.uniform(*TARGET_HUE), rng.uniform(*TARGET_SAT), target_luma)
    radius = rng.uniform(*RADIUS)
    margin = radius + 2.0
    cx = rng.uniform(margin, SIZE - margin)
    cy = rng.uniform(margin, SIZE - margin)
    return SceneLayout(bg, target, float(cx), float(cy), float(radius))


def render(layout, size=SIZE):
    """Rasterise ``layout``: pixel centres within the radius are target."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = layout.bg_rgb
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = (xx - layout.cx) ** 2 + (yy - layout.cy) ** 2 <= layout.radius ** 2
    img[inside] = layout.target_rgb
    return img
