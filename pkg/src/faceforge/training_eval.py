"""Histogram-based similarity metric between masked pixel populations."""

from __future__ import annotations

import numpy as np

HIST_BINS = 16


def masked_histogram_l1(
    pixels_a: np.ndarray, pixels_b: np.ndarray, bins: int = HIST_BINS
) -> float:
    """L1 distance between per-channel color histograms of two pixel sets.

    Inputs are (n, 3) arrays of [-1, 1] colors.  Each channel histogram is
    normalised to a density; the distance is the mean over channels of the
    per-channel L1, giving a value in [0, 2].
    """
    pixels_a = np.asarray(pixels_a, dtype=np.float64)
    pixels_b = np.asarray(pixels_b, dtype=np.float64)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    total = 0.0
    for c in range(3):
        ha, _ = np.histogram(np.clip(pixels_a[:, c], -1, 1), bins=edges)
        hb, _ = np.histogram(np.clip(pixels_b[:, c], -1, 1), bins=edges)
        pa = ha / max(1, ha.sum())
        pb = hb / max(1, hb.sum())
        total += np.abs(pa - pb).sum()
    return float(total / 3.0)
