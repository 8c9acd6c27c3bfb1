"""Batch preprocessing: pillar localization, centered cropping and quadrant
splitting over a whole dataset manifest, producing a tile-level manifest
whose rows carry parent ids and quadrant indices.

Masks (when present) travel through the identical geometry so localization
scoring stays aligned with the tiles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import imaging
from .manifest import Sample, read_manifest, write_manifest


class PreprocessError(RuntimeError):
    """Dataset-level preprocessing failure (bad manifest, unreadable files)."""


def preprocess_sample(sample, crop_size, tile, bbox_source="annotation",
                      brightness_quantile=0.99, min_area=200):
    """Crop one parent sample around its pillar and split into four tiles.

    Returns (tiles, mask_tiles, bbox); ``mask_tiles`` is None when the
    sample has no mask. ``bbox_source`` selects between the manifest
    annotation and the brightness detector ("annotation" falls back to the
    detector when no annotation exists).
    """
    image = imaging.load_image(sample.path)
    bbox = sample.bbox if bbox_source == "annotation" else None
    if bbox is None:
        bbox = imaging.locate_pillar(image, brightness_quantile=brightness_quantile,
                                     min_area=min_area)
    crop = imaging.crop_centered(image, bbox, crop_size=crop_size)
    tiles = imaging.quadrant_split(crop, tile=tile)
    mask_tiles = None
    if sample.mask_path:
        mask = imaging.load_mask(sample.mask_path)
        mask_crop = imaging.crop_centered(mask, bbox, crop_size=crop_size)
        mask_tiles = imaging.quadrant_split(mask_crop, tile=tile)
    return tiles, mask_tiles, bbox


def preprocess_dataset(manifest_path, out_dir, crop_size=700, tile=352,
                       bbox_source="annotation", brightness_quantile=0.99,
                       min_area=200, log=None):
    """Run the crop/split geometry over every non-discarded manifest row.

    Writes ``tiles/`` and ``masks/`` image trees plus ``manifest.jsonl``
    under ``out_dir``; tile ids are ``<parent>_q<k>``. Parents whose pillar
    cannot be located are re-emitted with the ``discarded`` flag instead of
    aborting the batch. Returns the list of tile samples.
    """
    parents = read_manifest(manifest_path)
    if not parents:
        raise PreprocessError(f"empty manifest: {manifest_path}")
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    records = []
    for parent in parents:
        if parent.discarded:
            continue
        try:
            tiles, mask_tiles, bbox = preprocess_sample(
                parent, crop_size, tile, bbox_source, brightness_quantile, min_area)
        except imaging.PillarNotFoundError as exc:
            parent.discarded = True
            parent.extra["discard_reason"] = str(exc)
            records.append(parent)
            if log is not None:
                log(f"discarded {parent.id}: {exc}")
            continue
        for q in range(4):
            tid = f"{parent.id}_q{q}"
            tile_path = out_dir / "tiles" / f"{tid}.png"
            imaging.save_image(tiles[q], tile_path)
            mask_path = None
            if mask_tiles is not None:
                mask_path = out_dir / "masks" / f"{tid}.png"
                imaging.save_mask(mask_tiles[q], mask_path)
            records.append(Sample(id=tid, path=str(tile_path), label=parent.label,
                                  bbox=bbox, parent_id=parent.id, quadrant_index=q,
                                  mask_path=str(mask_path) if mask_path else None))
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def load_tiles(samples):
    """Stack non-discarded tile samples into training arrays.

    Returns (ids, images, labels) with uint8 (N, H, W, 3) images.
    """
    kept = [s for s in samples if not s.discarded]
    if not kept:
        raise PreprocessError("no usable samples")
    ids = [s.id for s in kept]
    images = np.stack([imaging.load_image(s.path) for s in kept])
    labels = np.array([s.label for s in kept], dtype=np.int64)
    return ids, images, labels


def subset(data, ids):
    """Select (ids, images, labels) rows by sample id, preserving ``ids`` order."""
    all_ids, images, labels = data
    index = {sid: i for i, sid in enumerate(all_ids)}
    missing = [sid for sid in ids if sid not in index]
    if missing:
        raise PreprocessError(f"ids missing from dataset: {missing[:5]}")
    rows = [index[sid] for sid in ids]
    return list(ids), images[rows], labels[rows]
