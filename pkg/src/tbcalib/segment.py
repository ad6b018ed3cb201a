"""Mask production: intensity-band thresholding (baseline) and sliding-window
network inference with overlap averaging."""

from __future__ import annotations

import warnings

import numpy as np
from scipy import ndimage

from .volume import CUBOID_SIDE, LabelMask, Volume, normalize_intensity, DEFAULT_WINDOW

MIN_COMPONENT_VOXELS = 20


class EmptySegmentationError(Exception):
    pass


def keep_largest_components(binary: np.ndarray, n_keep: int = 2,
                            min_voxels: int = MIN_COMPONENT_VOXELS) -> np.ndarray:
    """Keep the n largest 26-connected components of at least min_voxels."""
    labeled, n = ndimage.label(binary, structure=np.ones((3, 3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(binary, dtype=np.uint8)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    order = np.argsort(sizes)[::-1][:n_keep]
    keep = [int(i) + 1 for i in order if sizes[i] >= min_voxels]
    return np.isin(labeled, keep).astype(np.uint8)


def threshold_segment(vol: Volume, band) -> LabelMask:
    """Voxels with intensity inside [lo, hi] become foreground, then only the
    two largest components are kept."""
    lo, hi = float(band[0]), float(band[1])
    if not lo < hi:
        raise ValueError(f"band must satisfy lo < hi, got ({lo}, {hi})")
    binary = (vol.voxels >= lo) & (vol.voxels <= hi)
    if not binary.any():
        raise EmptySegmentationError(f"no voxels inside band ({lo}, {hi})")
    filtered = keep_largest_components(binary)
    if not filtered.any():
        raise EmptySegmentationError("all components below the minimum size")
    return LabelMask(voxels=filtered, spacing=vol.spacing.copy(), origin=vol.origin.copy())


def _window_starts(n: int, window: int, stride: int):
    starts = list(range(0, max(n - window, 0) + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window_infer(net, vol: Volume, stride: int = CUBOID_SIDE // 2,
                         threshold: float = 0.5, window=DEFAULT_WINDOW) -> LabelMask:
    """Whole-volume inference: 48^3 windows at the given stride, overlapping
    probabilities averaged, thresholded, two-largest-components filter.

    Volumes smaller than the window are padded with the air value and the
    result cropped back.
    """
    w = CUBOID_SIDE
    norm = normalize_intensity(vol, window)
    data = norm.voxels
    nz, ny, nx = data.shape
    pz, py, px = (max(0, w - n) for n in (nz, ny, nx))
    if pz or py or px:
        data = np.pad(data, ((0, pz), (0, py), (0, px)),
                      constant_values=float(data.min()))
    dz, dy, dx = data.shape
    prob = np.zeros((dz, dy, dx), dtype=np.float64)
    count = np.zeros((dz, dy, dx), dtype=np.float64)
    for z0 in _window_starts(dz, w, stride):
        for y0 in _window_starts(dy, w, stride):
            for x0 in _window_starts(dx, w, stride):
                patch = data[z0:z0 + w, y0:y0 + w, x0:x0 + w]
                main, _ = net.forward(patch[None].astype(net.dtype), training=False)
                prob[z0:z0 + w, y0:y0 + w, x0:x0 + w] += main[0]
                count[z0:z0 + w, y0:y0 + w, x0:x0 + w] += 1.0
    prob /= count
    binary = (prob[:nz, :ny, :nx] >= threshold)
    filtered = keep_largest_components(binary)
    if not filtered.any():
        warnings.warn("empty segmentation: no component survived filtering")
    return LabelMask(voxels=filtered, spacing=vol.spacing.copy(), origin=vol.origin.copy())
