"""Image I/O, pillar localization, centered cropping and quadrant splitting.

Images are 3-channel 8-bit RGB arrays (H, W, 3); PNG is the lossless
interchange format for every pipeline artifact. Conversion to real-valued
tensors in [0, 1] happens at the model boundary (`to_model_input`).
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .manifest import BBox


class ImageIOError(IOError):
    """File-level read/write failure, with path context."""


class PillarNotFoundError(RuntimeError):
    """No connected component above the brightness threshold."""


def load_image(path):
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise ImageIOError(f"cannot read image {path}: {exc}") from exc
    return arr


def save_image(image, path):
    image = np.asarray(image)
    if image.ndim == 2:
        image = np.stack([image] * 3, axis=-1)
    if image.dtype != np.uint8:
        image = np.clip(image, 0, 255).astype(np.uint8)
    try:
        PILImage.fromarray(image, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {path}: {exc}") from exc


def load_mask(path):
    try:
        with PILImage.open(path) as img:
            arr = np.asarray(img.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise ImageIOError(f"cannot read mask {path}: {exc}") from exc
    return arr


def save_mask(mask, path):
    mask = (np.asarray(mask) > 0).astype(np.uint8) * 255
    try:
        PILImage.fromarray(mask, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write mask {path}: {exc}") from exc


def to_model_input(images):
    """uint8 (N, H, W, 3) or (H, W, 3) -> float32 (N, 3, H, W) in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    return (arr.astype(np.float32) / 255.0).transpose(0, 3, 1, 2)


def locate_pillar(image, brightness_quantile=0.99, min_area=200):
    """Classical centroid detector for the single bright pillar.

    Thresholds at a brightness quantile, keeps the largest connected
    component, and returns its intensity-weighted centroid with a tight box.
    """
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    threshold = np.quantile(gray, brightness_quantile)
    binary = gray > threshold
    if not binary.any():
        # noise-free images plateau exactly at the top quantile
        if threshold <= gray.min():
            raise PillarNotFoundError("no pixels above brightness threshold")
        binary = gray >= threshold
    labels, n = ndimage.label(binary)
    if n == 0:
        raise PillarNotFoundError("no connected component above threshold")
    sizes = ndimage.sum_labels(np.ones_like(gray), labels, index=np.arange(1, n + 1))
    best = int(np.argmax(sizes)) + 1
    if sizes[best - 1] < min_area:
        raise PillarNotFoundError(
            f"largest component has {int(sizes[best - 1])} px, below minimum area {min_area}")
    component = labels == best
    weights = gray * component
    total = weights.sum()
    ys, xs = np.nonzero(component)
    cy = float((weights.sum(axis=1) @ np.arange(gray.shape[0])) / total)
    cx = float((weights.sum(axis=0) @ np.arange(gray.shape[1])) / total)
    return BBox(cx=cx, cy=cy,
                width=float(xs.max() - xs.min() + 1),
                height=float(ys.max() - ys.min() + 1),
                source="detector")


def crop_centered(image, bbox, crop_size=700):
    """Square crop centered on the bbox center, zero-padding out-of-bounds.

    The pillar center lands exactly at pixel (crop_size//2, crop_size//2).
    """
    if crop_size % 2:
        raise ValueError(f"crop_size must be even, got {crop_size}")
    image = np.asarray(image)
    h, w = image.shape[:2]
    bbox.validate(image_width=w, image_height=h)
    cx, cy = int(round(bbox.cx)), int(round(bbox.cy))
    half = crop_size // 2
    out_shape = (crop_size, crop_size) + image.shape[2:]
    out = np.zeros(out_shape, dtype=image.dtype)
    y0, y1 = cy - half, cy + half
    x0, x1 = cx - half, cx + half
    sy0, sy1 = max(y0, 0), min(y1, h)
    sx0, sx1 = max(x0, 0), min(x1, w)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


QUADRANT_ANCHORS = ((0, 0), (1, 0), (0, 1), (1, 1))  # (right?, down?) per quadrant index


def quadrant_anchor(index, size, tile):
    ax, ay = QUADRANT_ANCHORS[index]
    return (ax * (size - tile), ay * (size - tile))


def quadrant_split(image, tile=352):
    """Four corner-anchored tiles covering an S x S image.

    Adjacent tiles overlap by 2*tile - S pixels (4 px for the 700/352
    defaults); labels are inherited by the caller.
    """
    image = np.asarray(image)
    s = image.shape[0]
    if image.shape[1] != s:
        raise ValueError(f"quadrant_split expects a square image, got {image.shape[:2]}")
    if tile > s:
        raise ValueError(f"tile {tile} exceeds image size {s}")
    if 2 * tile < s:
        raise ValueError(f"tiles of {tile} px cannot cover a {s} px image")
    tiles = []
    for q in range(4):
        x, y = quadrant_anchor(q, s, tile)
        tiles.append(image[y:y + tile, x:x + tile].copy())
    return tiles


def reassemble_quadrants(tiles, size):
    """Inverse of quadrant_split; overlap resolved by the later tile."""
    tile = tiles[0].shape[0]
    out = np.zeros((size, size) + tiles[0].shape[2:], dtype=tiles[0].dtype)
    for q, t in enumerate(tiles):
        x, y = quadrant_anchor(q, size, tile)
        out[y:y + tile, x:x + tile] = t
    return out
