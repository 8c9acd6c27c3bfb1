"""Parametric generator of pillar images with ground-truth labels and crack
masks, standing in for the unavailable microscope dataset.

Geometry: dark noisy background, bright ring at the pillar contact edge
with a dimmer disk interior, and (for damaged samples) bright or dark
circular-arc crack segments centered on the pillar at radii between 1.1 and
1.5 times the pillar radius. Arc coverage always intersects all four
quadrants, which is the premise the quadrant-label inheritance rests on.
Confounders (straight scratches, debris specks) appear equally in both
classes so a model cannot shortcut around crack structure.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import json
import numpy as np

from . import imaging
from .manifest import BBox, Sample, write_manifest


@dataclass
class SynthParams:
    image_size: int = 500
    pillar_radius: tuple = (40.0, 48.0)
    ring_brightness: tuple = (200.0, 235.0)
    ring_halfwidth: float = 4.0
    interior_brightness: tuple = (85.0, 110.0)
    background_level: float = 60.0
    noise_sigma: float = 9.0
    crack_count: tuple = (1, 4)
    crack_zone: tuple = (1.1, 1.5)       # multiples of the pillar radius
    crack_thickness: tuple = (8.0, 13.0)
    crack_brightness: tuple = (120.0, 150.0)
    dark_crack_prob: float = 0.15
    dark_crack_brightness: tuple = (5.0, 20.0)
    scratch_count: tuple = (0, 2)
    scratch_brightness: tuple = (95.0, 120.0)
    debris_count: tuple = (0, 3)
    seed: int = 0

    def validate(self):
        if self.crack_zone[0] <= 1.0:
            raise ValueError("crack zone must start outside the contact edge (> 1.0 radii)")
        for name in ("pillar_radius", "ring_brightness", "interior_brightness", "crack_zone",
                     "crack_thickness", "crack_brightness", "dark_crack_brightness",
                     "scratch_brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name} is not well-ordered")
        if self.image_size < 4 * self.pillar_radius[1]:
            raise ValueError("image size must be at least 4x the maximum pillar radius")


def half_scale_params(seed=0):
    return SynthParams(seed=seed)


def full_scale_params(seed=0):
    return SynthParams(image_size=1000, pillar_radius=(80.0, 96.0), ring_halfwidth=6.0,
                       crack_thickness=(14.0, 24.0), seed=seed)


@dataclass
class TruthRecord:
    center: tuple
    radius: float
    label: int
    arcs: list = field(default_factory=list)  # dicts: radius, start_deg, extent_deg, thickness, brightness

    def to_dict(self):
        return asdict(self)


def _draw_arcs(rng, params, cx, cy, radius, canvas, mask):
    """Arc segments in the crack zone, jointly covering all four quadrants."""
    n_arcs = int(rng.integers(params.crack_count[0], params.crack_count[1] + 1))
    # contiguous runs of quadrant centers around the circle, one run per arc,
    # so each arc's angular span is well-defined and every quadrant is hit
    start_q = int(rng.integers(0, 4))
    centers = [(45.0 + 90.0 * ((start_q + i) % 4)) for i in range(4)]
    cuts = sorted(rng.choice(np.arange(1, 4), size=n_arcs - 1, replace=False)) if n_arcs > 1 else []
    assignment = []
    prev = 0
    for cut in list(cuts) + [4]:
        assignment.append(centers[prev:cut])
        prev = cut

    h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(xx - cx, yy - cy)
    theta = np.degrees(np.arctan2(yy - cy, xx - cx)) % 360.0

    arcs = []
    zone_lo, zone_hi = params.crack_zone
    for quads in assignment:
        if not quads:
            continue
        thickness = rng.uniform(*params.crack_thickness)
        # keep every arc pixel inside the radial zone to 1 px rasterization slack
        r_lo = zone_lo * radius + thickness / 2.0 - 1.0
        r_hi = zone_hi * radius - thickness / 2.0 + 1.0
        arc_r = rng.uniform(min(r_lo, r_hi), max(r_lo, r_hi))
        # span the assigned quadrant centers (consecutive, 90 deg apart) plus jitter
        spread = 90.0 * (len(quads) - 1)
        extent = min(spread + rng.uniform(70.0, 140.0), 360.0)
        mid = quads[0] + spread / 2.0
        start = (mid - extent / 2.0 + rng.uniform(-10.0, 10.0)) % 360.0
        if rng.random() < params.dark_crack_prob:
            brightness = rng.uniform(*params.dark_crack_brightness)
        else:
            brightness = rng.uniform(*params.crack_brightness)

        ang = (theta - start) % 360.0
        sel = (np.abs(dist - arc_r) <= thickness / 2.0) & (ang <= extent)
        canvas[sel] = brightness
        mask[sel] = True
        arcs.append({"radius": float(arc_r), "start_deg": float(start),
                     "extent_deg": float(extent), "thickness": float(thickness),
                     "brightness": float(brightness)})
    return arcs


def _draw_confounders(rng, params, canvas):
    h, w = canvas.shape
    n_scratch = int(rng.integers(params.scratch_count[0], params.scratch_count[1] + 1))
    for _ in range(n_scratch):
        x0, y0 = rng.uniform(0, w), rng.uniform(0, h)
        angle = rng.uniform(0, np.pi)
        length = rng.uniform(0.2, 0.6) * w
        x1 = x0 + length * np.cos(angle)
        y1 = y0 + length * np.sin(angle)
        n_pts = int(length * 2)
        ts = np.linspace(0.0, 1.0, max(n_pts, 2))
        xs = np.clip(np.round(x0 + (x1 - x0) * ts).astype(int), 0, w - 1)
        ys = np.clip(np.round(y0 + (y1 - y0) * ts).astype(int), 0, h - 1)
        val = rng.uniform(*params.scratch_brightness)
        width = int(rng.integers(1, 3))
        for dx in range(-width, width + 1):
            canvas[ys, np.clip(xs + dx, 0, w - 1)] = val
    n_debris = int(rng.integers(params.debris_count[0], params.debris_count[1] + 1))
    for _ in range(n_debris):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        r = rng.uniform(2.0, 6.0)
        val = rng.uniform(70.0, 130.0)
        y0, y1 = int(max(cy - r - 1, 0)), int(min(cy + r + 2, h))
        x0, x1 = int(max(cx - r - 1, 0)), int(min(cx + r + 2, w))
        yy, xx = np.mgrid[y0:y1, x0:x1]
        canvas[y0:y1, x0:x1][np.hypot(xx - cx, yy - cy) <= r] = val


def generate_sample(params: SynthParams, rng, label=None):
    """One (image, label, crack_mask, truth) tuple.

    ``rng`` is the per-sample stream; pass ``label`` to force a class.
    """
    params.validate()
    s = params.image_size
    if label is None:
        label = int(rng.random() < 0.5)

    radius = rng.uniform(*params.pillar_radius)
    margin = params.crack_zone[1] * radius + params.crack_thickness[1]
    cx = rng.uniform(margin, s - margin)
    cy = rng.uniform(margin, s - margin)

    canvas = np.full((s, s), params.background_level, dtype=np.float64)
    _draw_confounders(rng, params, canvas)

    yy, xx = np.mgrid[0:s, 0:s]
    dist = np.hypot(xx - cx, yy - cy)
    interior = rng.uniform(*params.interior_brightness)
    ring = rng.uniform(*params.ring_brightness)
    canvas[dist <= radius - params.ring_halfwidth] = interior
    canvas[np.abs(dist - radius) <= params.ring_halfwidth] = ring

    mask = np.zeros((s, s), dtype=bool)
    arcs = []
    if label == 1:
        arcs = _draw_arcs(rng, params, cx, cy, radius, canvas, mask)

    canvas = canvas + rng.normal(0.0, params.noise_sigma, size=(s, s))
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    image = np.stack([image] * 3, axis=-1)
    # faint channel tint so the channel-shift augmentation has signal to work on
    tint = rng.uniform(-4, 4, size=3)
    image = np.clip(image.astype(np.int16) + np.round(tint).astype(np.int16), 0, 255).astype(np.uint8)

    truth = TruthRecord(center=(float(cx), float(cy)), radius=float(radius),
                        label=int(label), arcs=arcs)
    return image, int(label), mask, truth


def generate_dataset(out_dir, n=322, damaged_frac=0.5, params: SynthParams | None = None, seed=0):
    """Emit images, masks, a manifest and a truth-record file.

    Exactly round(n * damaged_frac) samples are damaged. Manifest rows carry
    truth bounding boxes so preprocessing can run detector-free.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    if params is None:
        params = half_scale_params(seed=seed)
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    n_damaged = int(round(n * damaged_frac))
    labels = np.array([1] * n_damaged + [0] * (n - n_damaged))
    labels = labels[np.random.default_rng(seed).permutation(n)]

    samples = []
    truths = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7, i)))
        image, label, mask, truth = generate_sample(params, rng, label=int(labels[i]))
        sid = f"synth{i:05d}"
        img_path = out_dir / "images" / f"{sid}.png"
        imaging.save_image(image, img_path)
        mask_path = None
        if label == 1:
            mask_path = out_dir / "masks" / f"{sid}.png"
            imaging.save_mask(mask, mask_path)
        r = truth.radius
        bbox = BBox(cx=truth.center[0], cy=truth.center[1],
                    width=2 * (r + params.ring_halfwidth),
                    height=2 * (r + params.ring_halfwidth), source="annotation")
        samples.append(Sample(id=sid, path=str(img_path), label=label, bbox=bbox,
                              mask_path=str(mask_path) if mask_path else None,
                              extra={"seed": seed}))
        truths.append({"id": sid, **truth.to_dict()})

    write_manifest(out_dir / "manifest.jsonl", samples)
    with open(out_dir / "truth.jsonl", "w") as fh:
        for t in truths:
            fh.write(json.dumps(t, sort_keys=True) + "\n")
    return samples
