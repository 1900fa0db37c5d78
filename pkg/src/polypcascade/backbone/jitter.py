"""Seeded colour jitter for uint8 RGB patches."""

from __future__ import annotations

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .types import ColorJitterParams

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def draw_factors(params: ColorJitterParams, rng: np.random.Generator) -> tuple[float, ...]:
    """(brightness, contrast, saturation, hue) - always four draws, in that order."""
    b = rng.uniform(1 - params.brightness, 1 + params.brightness)
    c = rng.uniform(1 - params.contrast, 1 + params.contrast)
    s = rng.uniform(1 - params.saturation, 1 + params.saturation)
    h = rng.uniform(-params.hue, params.hue)
    return float(b), float(c), float(s), float(h)


def apply_factors(img: np.ndarray, factors: tuple[float, ...],
                  params: ColorJitterParams) -> np.ndarray:
    b, c, s, h = factors
    x = np.asarray(img, dtype=np.float64)
    if params.brightness:
        x = np.clip(x * b, 0, 255)
    if params.contrast:
        mean = float((x @ _LUMA).mean())
        x = np.clip((x - mean) * c + mean, 0, 255)
    if params.saturation:
        gray = (x @ _LUMA)[..., None]
        x = np.clip((x - gray) * s + gray, 0, 255)
    if params.hue:
        hsv = rgb_to_hsv(x / 255.0)
        hsv[..., 0] = (hsv[..., 0] + h) % 1.0
        x = hsv_to_rgb(hsv) * 255.0
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def color_jitter(img: np.ndarray, params: ColorJitterParams,
                 rng: np.random.Generator) -> np.ndarray:
    """Randomly perturb brightness, contrast, saturation and hue.

    Deterministic for a given generator state.  All-zero params return an
    exact copy.
    """
    factors = draw_factors(params, rng)
    if params.is_identity:
        return np.array(img, dtype=np.uint8, copy=True)
    return apply_factors(img, factors, params)
