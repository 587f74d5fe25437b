"""Geometric primitives shared by target assignment, decoding, NMS and metrics.

Boxes are ``(4,)`` or ``(N, 4)`` float arrays in ``(x1, y1, x2, y2)`` image
coordinates with ``x2 > x1`` and ``y2 > y1``. All functions are pure and
operate on plain numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def box_area(boxes: np.ndarray) -> np.ndarray:
    """Area of each box; boxes shaped (..., 4)."""
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-union.

    Args:
        boxes1: (N, 4) boxes
        boxes2: (M, 4) boxes

    Returns:
        (N, M) IoU matrix in [0, 1].
    """
    boxes1 = np.atleast_2d(np.asarray(boxes1, dtype=np.float64))
    boxes2 = np.atleast_2d(np.asarray(boxes2, dtype=np.float64))
    inter = _pairwise_intersection(boxes1, boxes2)
    union = box_area(boxes1)[:, None] + box_area(boxes2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_dice(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """Pairwise Dice coefficient over box areas: 2*|a∩b| / (|a| + |b|)."""
    boxes1 = np.atleast_2d(np.asarray(boxes1, dtype=np.float64))
    boxes2 = np.atleast_2d(np.asarray(boxes2, dtype=np.float64))
    inter = _pairwise_intersection(boxes1, boxes2)
    total = box_area(boxes1)[:, None] + box_area(boxes2)[None, :]
    out = np.zeros_like(inter)
    np.divide(2.0 * inter, total, out=out, where=total > 0)
    return out


def _pairwise_intersection(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    return wh[..., 0] * wh[..., 1]


def iou(a, b) -> float:
    """IoU between two single boxes."""
    return float(pairwise_iou(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def dice(a, b) -> float:
    """Dice coefficient between two single boxes."""
    return float(pairwise_dice(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def centerness(location, box) -> float:
    """Localization quality of a point inside a box.

    1.0 at the box center, falling to 0 at the edges, computed as
    sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) over the distances to the
    four sides. Locations outside the box score 0.
    """
    values = centerness_of(np.asarray(location, dtype=np.float64)[None], np.asarray(box)[None])
    return float(values[0])


def centerness_of(locations: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Vectorized centerness of each location w.r.t. its paired box.

    Args:
        locations: (N, 2) points
        boxes: (N, 4) boxes, one per location

    Returns:
        (N,) scores in [0, 1]; 0 where the location falls outside its box.
    """
    locations = np.asarray(locations, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    lrtb = encode_lrtb(locations, boxes)
    inside = np.all(lrtb >= 0.0, axis=-1)
    l, r, t, b = lrtb[:, 0], lrtb[:, 1], lrtb[:, 2], lrtb[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_x = np.minimum(l, r) / np.maximum(l, r)
        ratio_y = np.minimum(t, b) / np.maximum(t, b)
        scores = np.sqrt(ratio_x * ratio_y)
    scores = np.where(np.isfinite(scores), scores, 0.0)
    return np.where(inside, scores, 0.0)


def encode_lrtb(locations: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Distances (l, r, t, b) from each location to the sides of its box.

    All four distances are non-negative exactly when the location lies
    inside the box; callers use that to flag invalid regression targets.
    """
    locations = np.asarray(locations, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    x, y = locations[..., 0], locations[..., 1]
    l = x - boxes[..., 0]
    r = boxes[..., 2] - x
    t = y - boxes[..., 1]
    b = boxes[..., 3] - y
    return np.stack([l, r, t, b], axis=-1)


def decode_lrtb(locations: np.ndarray, lrtb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_lrtb`: side distances back to (x1,y1,x2,y2)."""
    locations = np.asarray(locations, dtype=np.float64)
    lrtb = np.asarray(lrtb, dtype=np.float64)
    x, y = locations[..., 0], locations[..., 1]
    x1 = x - lrtb[..., 0]
    x2 = x + lrtb[..., 1]
    y1 = y - lrtb[..., 2]
    y2 = y + lrtb[..., 3]
    return np.stack([x1, y1, x2, y2], axis=-1)


def encode_deltas(src_boxes: np.ndarray, dst_boxes: np.ndarray) -> np.ndarray:
    """Standard center/size box deltas from src (e.g. proposal) to dst (GT)."""
    src_boxes = np.asarray(src_boxes, dtype=np.float64)
    dst_boxes = np.asarray(dst_boxes, dtype=np.float64)
    sw = src_boxes[..., 2] - src_boxes[..., 0]
    sh = src_boxes[..., 3] - src_boxes[..., 1]
    sx = src_boxes[..., 0] + 0.5 * sw
    sy = src_boxes[..., 1] + 0.5 * sh
    dw = dst_boxes[..., 2] - dst_boxes[..., 0]
    dh = dst_boxes[..., 3] - dst_boxes[..., 1]
    dx = dst_boxes[..., 0] + 0.5 * dw
    dy = dst_boxes[..., 1] + 0.5 * dh
    return np.stack(
        [(dx - sx) / sw, (dy - sy) / sh, np.log(dw / sw), np.log(dh / sh)], axis=-1
    )


def decode_deltas(src_boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply center/size deltas to boxes; inverse of :func:`encode_deltas`."""
    src_boxes = np.asarray(src_boxes, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    sw = src_boxes[..., 2] - src_boxes[..., 0]
    sh = src_boxes[..., 3] - src_boxes[..., 1]
    sx = src_boxes[..., 0] + 0.5 * sw
    sy = src_boxes[..., 1] + 0.5 * sh
    # Cap log-size deltas so a wild prediction cannot overflow exp().
    dw = np.exp(np.clip(deltas[..., 2], None, 8.0)) * sw
    dh = np.exp(np.clip(deltas[..., 3], None, 8.0)) * sh
    cx = deltas[..., 0] * sw + sx
    cy = deltas[..., 1] * sh + sy
    return np.stack(
        [cx - 0.5 * dw, cy - 0.5 * dh, cx + 0.5 * dw, cy + 0.5 * dh], axis=-1
    )


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip box coordinates to the [0, W] x [0, H] image extent."""
    boxes = np.asarray(boxes, dtype=np.float64).copy()
    boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0.0, width)
    boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0.0, height)
    return boxes


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Boxes are visited in descending score order (score ties broken by lower
    input index); a box is kept iff its IoU with every previously kept box
    is <= ``iou_threshold``.

    Returns:
        Indices of kept boxes, ordered by descending score.
    """
    boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms requires finite scores")
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        remaining = order[~suppressed[order]]
        ious = pairwise_iou(boxes[idx][None], boxes[remaining])[0]
        suppressed[remaining[ious > iou_threshold]] = True
    return np.asarray(keep, dtype=np.int64)


@dataclass(frozen=True)
class AnchorGrid:
    """One square anchor per feature location over a multi-level pyramid.

    Attributes:
        strides: feature stride of each level, strictly increasing
        level_shapes: (rows, cols) of each level's feature map
        centers: (N, 2) anchor center locations, levels concatenated
        anchors: (N, 4) anchor boxes, levels concatenated
        level_slices: index slice of each level inside the flat arrays
    """

    strides: tuple[int, ...]
    level_shapes: tuple[tuple[int, int], ...]
    centers: np.ndarray
    anchors: np.ndarray
    level_slices: tuple[slice, ...]

    def __len__(self) -> int:
        return self.anchors.shape[0]


def build_anchor_grid(
    image_size: tuple[int, int], strides: list[int] | tuple[int, ...], anchor_scale: float
) -> AnchorGrid:
    """Lay out one anchor per feature cell for each pyramid level.

    Args:
        image_size: (width, height) in pixels
        strides: one stride per pyramid level
        anchor_scale: anchor side length in units of the level stride

    Centers sit at ``(s/2 + i*s)``; border cells keep their anchors even when
    the stride does not divide the image size.
    """
    width, height = image_size
    if any(s <= 0 for s in strides):
        raise ValueError(f"strides must be positive, got {list(strides)}")
    if anchor_scale <= 0:
        raise ValueError(f"anchor_scale must be positive, got {anchor_scale}")
    centers_all, anchors_all, shapes, slices = [], [], [], []
    offset = 0
    for stride in strides:
        cols = int(np.ceil(width / stride))
        rows = int(np.ceil(height / stride))
        xs = stride / 2.0 + stride * np.arange(cols, dtype=np.float64)
        ys = stride / 2.0 + stride * np.arange(rows, dtype=np.float64)
        grid_x, grid_y = np.meshgrid(xs, ys)
        centers = np.stack([grid_x.ravel(), grid_y.ravel()], axis=-1)
        half = anchor_scale * stride / 2.0
        anchors = np.concatenate([centers - half, centers + half], axis=-1)
        centers_all.append(centers)
        anchors_all.append(anchors)
        shapes.append((rows, cols))
        slices.append(slice(offset, offset + rows * cols))
        offset += rows * cols
    return AnchorGrid(
        strides=tuple(int(s) for s in strides),
        level_shapes=tuple(shapes),
        centers=np.concatenate(centers_all, axis=0),
        anchors=np.concatenate(anchors_all, axis=0),
        level_slices=tuple(slices),
    )
