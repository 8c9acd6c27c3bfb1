"""Stochastic training-time augmentation, deterministic under seed.

Fixed stage order: rotation (bilinear, zero fill), per-channel additive
shift, horizontal flip, vertical flip, global brightness scale, random
erasing. Labels are never transformed. Per-sample RNG streams derive from
(seed, sample id, epoch) so parallel workers reproduce serial results.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class AugmentConfig:
    rotation_deg: float = 10.0
    channel_shift: float = 25.0          # additive, on the 0-255 scale
    h_flip: bool = True
    v_flip: bool = True
    brightness_range: tuple = (0.7, 1.3)
    erase_prob: float = 0.5
    erase_frac: tuple = (0.25, 0.40)
    seed: int = 0

    def validate(self):
        if self.rotation_deg < 0 or self.channel_shift < 0:
            raise ValueError("rotation_deg and channel_shift must be non-negative")
        for lo, hi in (self.brightness_range, self.erase_frac):
            if lo > hi:
                raise ValueError("ranges must be well-ordered")
        if not 0.0 <= self.erase_prob <= 1.0:
            raise ValueError("erase_prob must lie in [0, 1]")


def rng_for_sample(seed, sample_id, epoch):
    """Independent per-sample stream; sample ids hash via CRC-32."""
    return np.random.default_rng(np.random.SeedSequence(
        entropy=seed, spawn_key=(zlib.crc32(str(sample_id).encode()), epoch)))


def _erase_extents(rng, h, w, frac_range):
    """Rectangle whose integer area keeps the covered fraction in range."""
    frac = rng.uniform(*frac_range)
    area = frac * h * w
    lo = max(int(np.ceil(area / w)), 1)
    hi = min(h, int(area))
    eh = int(rng.integers(lo, hi + 1)) if hi >= lo else h
    ew = min(w, max(1, int(round(area / eh))))
    # nudge width so the realized fraction stays inside the sampled range
    lo_f, hi_f = frac_range
    while eh * ew / (h * w) < lo_f and ew < w:
        ew += 1
    while eh * ew / (h * w) > hi_f and ew > 1:
        ew -= 1
    return eh, ew


def augment(image, label, config: AugmentConfig, rng):
    """Augment one uint8 (H, W, 3) training tile; the label passes through."""
    config.validate()
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]

    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    if angle != 0.0 and min(h, w) > 1:
        img = ndimage.rotate(img, angle, axes=(1, 0), reshape=False,
                             order=1, mode="constant", cval=0.0)

    shift = rng.uniform(-config.channel_shift, config.channel_shift, size=3)
    img = np.clip(img + shift[None, None, :], 0.0, 255.0)

    if config.h_flip and rng.random() < 0.5:
        img = img[:, ::-1]
    if config.v_flip and rng.random() < 0.5:
        img = img[::-1]

    scale = rng.uniform(*config.brightness_range)
    img = np.clip(img * scale, 0.0, 255.0)

    if rng.random() < config.erase_prob and h > 1 and w > 1:
        eh, ew = _erase_extents(rng, h, w, config.erase_frac)
        y = int(rng.integers(0, h - eh + 1))
        x = int(rng.integers(0, w - ew + 1))
        img[y:y + eh, x:x + ew] = rng.uniform(0.0, 255.0, size=(eh, ew, img.shape[2]))

    return np.clip(np.round(img), 0, 255).astype(np.uint8), label


def identity_config():
    """All random draws forced to the identity transform (test hook)."""
    return AugmentConfig(rotation_deg=0.0, channel_shift=0.0, h_flip=False,
                         v_flip=False, brightness_range=(1.0, 1.0), erase_prob=0.0)
