"""Dataset manifest: line-delimited JSON, one record per sample.

Fields: id, path, label (0 undamaged / 1 damaged), bbox, parent_id,
quadrant_index, split_tag, mask_path, discarded, plus free-form extras
(e.g. truth records from the synthetic generator).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class BBox:
    """Pillar bounding box: center in pixels plus extents."""
    cx: float
    cy: float
    width: float
    height: float
    source: str = "annotation"  # annotation | detector

    def validate(self, image_width=None, image_height=None):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bbox extents must be positive: {self}")
        if image_width is not None:
            if not (0 <= self.cx < image_width and 0 <= self.cy < image_height):
                # centers outside the frame are still usable as long as the box intersects
                if (self.cx + self.width / 2 < 0 or self.cx - self.width / 2 >= image_width
                        or self.cy + self.height / 2 < 0 or self.cy - self.height / 2 >= image_height):
                    raise ValueError(f"bbox does not intersect image: {self}")


@dataclass
class Sample:
    id: str
    path: str
    label: int
    bbox: BBox | None = None
    parent_id: str | None = None
    quadrant_index: int | None = None
    split_tag: str | None = None
    mask_path: str | None = None
    discarded: bool = False
    extra: dict = field(default_factory=dict)

    def to_json(self):
        rec = asdict(self)
        if self.bbox is None:
            rec.pop("bbox")
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        bbox = rec.pop("bbox", None)
        sample = cls(bbox=BBox(**bbox) if bbox else None, **rec)
        if sample.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {sample.label!r}")
        return sample


def write_manifest(path, samples):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_manifest(path):
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                samples.append(Sample.from_json(line))
    return samples


def read_via_annotations(path):
    """Ingest VIA-exported bounding boxes: filename -> BBox.

    Accepts the usual VIA JSON project export with rect or circle regions;
    the first region per file wins (one pillar per image).
    """
    with open(path) as fh:
        data = json.load(fh)
    if "_via_img_metadata" in data:
        data = data["_via_img_metadata"]
    boxes = {}
    for entry in data.values():
        fname = entry["filename"]
        regions = entry.get("regions") or []
        if not regions:
            continue
        shape = regions[0]["shape_attributes"]
        if shape.get("name") == "rect":
            boxes[fname] = BBox(cx=shape["x"] + shape["width"] / 2.0,
                                cy=shape["y"] + shape["height"] / 2.0,
                                width=float(shape["width"]), height=float(shape["height"]),
                                source="annotation")
        elif shape.get("name") == "circle":
            r = float(shape["r"])
            boxes[fname] = BBox(cx=float(shape["cx"]), cy=float(shape["cy"]),
                                width=2 * r, height=2 * r, source="annotation")
        else:
            raise ValueError(f"unsupported region shape {shape.get('name')!r} for {fname}")
    return boxes
