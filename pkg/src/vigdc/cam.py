"""Weakly-supervised crack localization from the model's last-conv tap:
original CAM (dense-weight weighted), Grad-CAM (gradient weighted) and
Score-CAM (masked-forward-score weighted), plus overlay rendering and
localization scoring against truth masks.

Heatmaps rectify negative evidence to zero, then min-max normalize per
image; a zero-variance native map normalizes to all-zero ("no evidence"
renders as no highlight).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .colormap import apply_colormap
from .imaging import to_model_input
from .tensor import ShapeError, Tensor


class CamConfigurationError(RuntimeError):
    """Missing tap or unsupported head architecture."""


@dataclass
class Heatmap:
    native: np.ndarray       # tap-resolution, rectified weighted sum (unnormalized)
    normalized: np.ndarray   # native scaled into [0, 1]
    upsampled: np.ndarray    # normalized map at input resolution
    method: str              # cam | grad-cam | score-cam
    sample_id: str | None = None


def bilinear_upsample(arr, out_h, out_w):
    """Align-corners bilinear resize of a 2-D map."""
    h, w = arr.shape
    if (h, w) == (out_h, out_w):
        return arr.astype(np.float64, copy=True)
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _finalize(native, method, input_size, sample_id):
    native = np.maximum(native, 0.0)
    peak = native.max()
    normalized = native / peak if peak > 0 else np.zeros_like(native)
    upsampled = bilinear_upsample(normalized, input_size, input_size)
    return Heatmap(native=native, normalized=normalized, upsampled=upsampled,
                   method=method, sample_id=sample_id)


def _tap_activation(graph, image):
    x = Tensor(to_model_input(image))
    logits = graph.forward(x, mode="infer")
    if "last_conv" not in graph.taps:
        raise CamConfigurationError("model registers no 'last_conv' tap")
    return logits, graph.taps["last_conv"]


def grad_cam(graph, image, sample_id=None) -> Heatmap:
    """Per-channel weights = spatial mean of the class-1 score gradient at
    the tap; heatmap = rectified weighted channel sum."""
    logits, tap = _tap_activation(graph, image)
    logits.backward(seed=np.ones_like(logits.data))
    if tap.grad is None:
        raise CamConfigurationError("tap received no gradient")
    weights = tap.grad[0].mean(axis=(1, 2))
    native = np.tensordot(weights.astype(np.float64), tap.data[0].astype(np.float64), axes=1)
    for p in graph.parameters().values():
        p.zero_grad()
    return _finalize(native, "grad-cam", graph.input_size, sample_id)


def original_cam(graph, image, sample_id=None) -> Heatmap:
    """Channel weights taken directly from the dense head; requires the
    global-average-pool -> dense(1) head."""
    if graph.head_pool_mode != "avg":
        raise CamConfigurationError("original CAM requires a global-average-pool head")
    if graph.head_dense_w.data.shape[1] != 1:
        raise CamConfigurationError("original CAM requires a single-unit dense head")
    _, tap = _tap_activation(graph, image)
    weights = graph.head_dense_w.data[:, 0].astype(np.float64)
    native = np.tensordot(weights, tap.data[0].astype(np.float64), axes=1)
    return _finalize(native, "cam", graph.input_size, sample_id)


def score_cam(graph, image, sample_id=None, batch_size=32) -> Heatmap:
    """Channel weights = softmax over class-1 scores of the input masked by
    each (normalized, upsampled) activation map."""
    _, tap = _tap_activation(graph, image)
    acts = tap.data[0].astype(np.float64)
    channels = acts.shape[0]
    size = graph.input_size
    base = to_model_input(image)[0]  # (3, H, W)

    masks = np.empty((channels, size, size), dtype=np.float32)
    for c in range(channels):
        a = acts[c]
        lo, hi = a.min(), a.max()
        norm = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
        masks[c] = bilinear_upsample(norm, size, size)

    scores = np.empty(channels, dtype=np.float64)
    for start in range(0, channels, batch_size):
        chunk = masks[start:start + batch_size]
        batch = base[None, :, :, :] * chunk[:, None, :, :]
        logits = graph.forward(Tensor(batch), mode="infer")
        scores[start:start + chunk.shape[0]] = logits.data[:, 0]

    w = np.exp(scores - scores.max())
    w /= w.sum()
    native = np.tensordot(w, acts, axes=1)
    return _finalize(native, "score-cam", graph.input_size, sample_id)


METHODS = {"cam": original_cam, "grad-cam": grad_cam, "score-cam": score_cam}


def compute_heatmap(graph, image, method, sample_id=None) -> Heatmap:
    if method not in METHODS:
        raise ValueError(f"unknown CAM method {method!r}")
    return METHODS[method](graph, image, sample_id=sample_id)


def render_overlay(heatmap: Heatmap, image, alpha=0.5):
    """Alpha-blend the colormapped heatmap over the grayscale image."""
    colored = apply_colormap(heatmap.upsampled).astype(np.float64)
    gray = np.asarray(image, dtype=np.float64).mean(axis=-1)
    base = np.stack([gray] * 3, axis=-1)
    if colored.shape != base.shape:
        raise ShapeError(f"heatmap {colored.shape[:2]} vs image {base.shape[:2]}")
    blend = (1.0 - alpha) * base + alpha * colored
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)


def dilate_mask(mask, dilation_px):
    """Euclidean dilation of a binary mask by dilation_px pixels."""
    mask = np.asarray(mask) > 0
    if dilation_px <= 0:
        return mask
    dist = ndimage.distance_transform_edt(~mask)
    return dist <= dilation_px


def localization_energy(heatmap, crack_mask, dilation_px=0):
    """Fraction of total heatmap mass inside the (dilated) crack mask."""
    hm = np.asarray(heatmap, dtype=np.float64)
    mask = np.asarray(crack_mask)
    if hm.shape != mask.shape:
        raise ShapeError(f"heatmap shape {hm.shape} != mask shape {mask.shape}")
    total = hm.sum()
    if total <= 0:
        return 0.0
    return float(hm[dilate_mask(mask, dilation_px)].sum() / total)


def benchmark_methods(graph, image, methods=("grad-cam", "score-cam"), repeats=1):
    """Wall time per method on one image, in seconds."""
    times = {}
    for method in methods:
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            compute_heatmap(graph, image, method)
            best = min(best, time.perf_counter() - t0)
        times[method] = best
    return times
