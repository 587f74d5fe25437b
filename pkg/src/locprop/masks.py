"""Binary mask helpers: run-length encoding and RoI grid resampling.

RLE follows the COCO uncompressed convention: column-major pixel order
with alternating run lengths starting from a (possibly zero) run of
background.
"""

from __future__ import annotations

import numpy as np


def encode_rle(mask: np.ndarray) -> dict:
    """Encode a binary (H, W) mask as {"size": [H, W], "counts": [...]}."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.flatten(order="F")
    counts = []
    run_value = False
    run_length = 0
    for v in flat:
        if v == run_value:
            run_length += 1
        else:
            counts.append(run_length)
            run_value = v
            run_length = 1
    counts.append(run_length)
    return {"size": [int(h), int(w)], "counts": [int(c) for c in counts]}


def decode_rle(rle: dict) -> np.ndarray:
    """Inverse of :func:`encode_rle`."""
    h, w = rle["size"]
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in rle["counts"]:
        if value:
            flat[pos:pos + count] = True
        pos += count
        value = not value
    if pos != h * w:
        raise ValueError(f"RLE counts sum to {pos}, expected {h * w}")
    return flat.reshape((h, w), order="F")


def mask_to_bbox(mask: np.ndarray) -> tuple[float, float, float, float] | None:
    """Tight (x, y, w, h) bound of the set pixels; None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    x, y = float(cols[0]), float(rows[0])
    return x, y, float(cols[-1] + 1 - x), float(rows[-1] + 1 - y)


def crop_mask_to_grid(mask: np.ndarray, box, out_size: int) -> np.ndarray:
    """Sample a full-image binary mask onto an ``out_size`` square RoI grid.

    Each grid cell takes the mask value at its center pixel (nearest
    neighbor), matching how mask targets are compared at fixed resolution.
    """
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    x1, y1, x2, y2 = [float(v) for v in box]
    xs = x1 + (np.arange(out_size) + 0.5) * (x2 - x1) / out_size
    ys = y1 + (np.arange(out_size) + 0.5) * (y2 - y1) / out_size
    xi = np.clip(np.floor(xs).astype(int), 0, w - 1)
    yi = np.clip(np.floor(ys).astype(int), 0, h - 1)
    return mask[np.ix_(yi, xi)]


def paste_mask_in_image(grid: np.ndarray, box, width: int, height: int) -> np.ndarray:
    """Project an RoI mask grid back onto the full image canvas.

    Inverse resampling of :func:`crop_mask_to_grid`: each image pixel whose
    center falls inside ``box`` takes the nearest grid cell's value.
    """
    grid = np.asarray(grid).astype(bool)
    out = np.zeros((height, width), dtype=bool)
    x1, y1, x2, y2 = [float(v) for v in box]
    if x2 <= x1 or y2 <= y1:
        return out
    px1, px2 = int(np.floor(x1 + 0.5)), int(np.ceil(x2 - 0.5))
    py1, py2 = int(np.floor(y1 + 0.5)), int(np.ceil(y2 - 0.5))
    px1, py1 = max(px1, 0), max(py1, 0)
    px2, py2 = min(px2, width - 1), min(py2, height - 1)
    if px2 < px1 or py2 < py1:
        return out
    gx = ((np.arange(px1, px2 + 1) + 0.5 - x1) / (x2 - x1) * grid.shape[1]).astype(int)
    gy = ((np.arange(py1, py2 + 1) + 0.5 - y1) / (y2 - y1) * grid.shape[0]).astype(int)
    gx = np.clip(gx, 0, grid.shape[1] - 1)
    gy = np.clip(gy, 0, grid.shape[0] - 1)
    out[py1:py2 + 1, px1:px2 + 1] = grid[np.ix_(gy, gx)]
    return out
