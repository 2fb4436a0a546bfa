"""Run-length encoding of binary masks for the detections interchange format.

Masks are flattened in row-major (C) order; ``counts`` lists alternating run
lengths starting with the run of zeros, so a mask beginning with ones starts
with a 0 count.
"""

from __future__ import annotations

import numpy as np


def rle_encode(mask: np.ndarray) -> dict:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    flat = mask.astype(bool).ravel()
    if flat.size == 0:
        return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def rle_decode(obj: dict) -> np.ndarray:
    h, w = obj["size"]
    counts = obj["counts"]
    total = sum(counts)
    if total != h * w and not (total == 0 and h * w == 0):
        raise ValueError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)
