"""Training-time image augmentation: geometric jitter plus Cutout.

Everything here is a pure function of (image, config, rng state); the
trainer derives one rng stream per (seed, epoch, sample) so augmented
batches are reproducible and order-independent. Evaluation-time
preprocessing is the 1/255 rescale alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class CutoutConfig:
    base_size: int = 4
    alpha: int = 3  # mask count per image
    beta: int = 5  # max size multiplier
    fixed_size: bool = False  # always use the beta multiplier instead of sampling

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 1 or self.base_size < 1:
            raise ConfigError(
                f"cutout needs alpha >= 0, beta >= 1, base_size >= 1; got {self.alpha}, {self.beta}, {self.base_size}"
            )


@dataclass
class AugmentConfig:
    translate_px: int = 2
    zoom_rot_range: float = 0.2
    horizontal_flip: bool = True
    cutout: CutoutConfig = field(default_factory=CutoutConfig)


def rescale(img_u8):
    """Map integer [0, 255] to float32 [0, 1]."""
    return np.asarray(img_u8).astype(np.float32) / 255


def cutout(img, cfg: CutoutConfig, rng):
    """Zero out ``alpha`` random squares; side = base_size * multiplier.

    Squares are clipped at the borders and may overlap. The multiplier is a
    uniform integer in {1..beta} unless ``fixed_size`` pins it at beta.
    """
    out = np.array(img, copy=True)
    h, w = img.shape[:2]
    for _ in range(cfg.alpha):
        mult = cfg.beta if cfg.fixed_size else int(rng.integers(1, cfg.beta + 1))
        side = cfg.base_size * mult
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        y0 = cy - side // 2
        x0 = cx - side // 2
        out[max(y0, 0) : min(y0 + side, h), max(x0, 0) : min(x0 + side, w)] = 0
    return out


def translate(img, dy, dx):
    """Integer shift; vacated pixels copy the nearest valid edge pixel."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows[:, None], cols[None, :]]


def random_translate(img, max_px, rng):
    dy = int(rng.integers(-max_px, max_px + 1))
    dx = int(rng.integers(-max_px, max_px + 1))
    return translate(img, dy, dx)


def zoom_rotate(img, zoom, angle):
    """Scale by (1 + zoom) and rotate by ``angle`` radians about the center.

    Bilinear sampling on the inverse map; source coordinates falling outside
    the image clamp to the border (nearest padding).
    """
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    di = np.arange(h, dtype=np.float64)[:, None] - cy
    dj = np.arange(w, dtype=np.float64)[None, :] - cx
    scale = 1.0 / (1.0 + zoom)
    cos, sin = np.cos(angle), np.sin(angle)
    src_i = np.clip(cy + scale * (cos * di + sin * dj), 0, h - 1)
    src_j = np.clip(cx + scale * (-sin * di + cos * dj), 0, w - 1)

    i0 = np.floor(src_i).astype(np.intp)
    j0 = np.floor(src_j).astype(np.intp)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    ti = (src_i - i0)[..., None]
    tj = (src_j - j0)[..., None]
    top = img[i0, j0] * (1 - tj) + img[i0, j1] * tj
    bottom = img[i1, j0] * (1 - tj) + img[i1, j1] * tj
    return (top * (1 - ti) + bottom * ti).astype(img.dtype)


def random_zoom_rotate(img, limit, rng):
    zoom = rng.uniform(-limit, limit)
    angle = rng.uniform(-limit, limit)
    return zoom_rotate(img, zoom, angle)


def horizontal_flip(img):
    return img[:, ::-1].copy()


def augment_image(img, cfg: AugmentConfig, rng):
    """Apply the geometric stages and Cutout to a [0, 1] float image.

    Draw order is fixed (translate, zoom, angle, flip coin, cutout) so a
    given rng state always produces the same output.
    """
    img = random_translate(img, cfg.translate_px, rng)
    img = random_zoom_rotate(img, cfg.zoom_rot_range, rng)
    if cfg.horizontal_flip and rng.random() < 0.5:
        img = horizontal_flip(img)
    return cutout(img, cfg.cutout, rng)


def train_pipeline(img_u8, cfg: AugmentConfig, rng):
    """Full training-side pipeline from raw bytes: rescale then augment."""
    return augment_image(rescale(img_u8), cfg, rng)


def eval_pipeline(img_u8):
    """Evaluation applies the 1/255 rescale only."""
    return rescale(img_u8)
