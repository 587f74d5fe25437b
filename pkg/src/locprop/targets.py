"""Ground-truth assignment, example sampling and quality-target computation.

Stage 1 samples anchors around ground truth (by default with no explicit
background sampling) and regresses side distances plus a localization
quality score. Stage 2 receives first-stage proposals and regresses box
deltas plus a quality score computed directly against ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    AnchorGrid,
    centerness_of,
    encode_deltas,
    encode_lrtb,
    pairwise_dice,
    pairwise_iou,
)

QUALITY_CUES = ("centerness", "iou", "dice")
STAGE1_CUES = ("class", "centerness", "iou")
STAGE2_CUES = ("none", "class", "centerness", "iou", "dice")


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor best ground-truth assignment.

    ``gt_index`` is the argmax-IoU GT (ties to the lowest GT index) or -1
    when the anchor overlaps nothing.
    """

    gt_index: np.ndarray
    max_iou: np.ndarray


@dataclass
class SamplerConfig:
    """Training-example sampling policy.

    ``bg_fraction`` of the ``count`` budget goes to explicit background
    anchors (below ``neg_iou_ceiling``); the rest to anchors strictly above
    ``pos_iou_floor``. ``force_match`` additionally marks the best anchor of
    every GT as positive, which standard proposal baselines rely on.
    ``roi_pos_floor`` is the second-stage positive threshold.
    """

    count: int = 256
    bg_fraction: float = 0.0
    pos_iou_floor: float = 0.3
    neg_iou_ceiling: float = 0.1
    roi_pos_floor: float = 0.3
    force_match: bool = False

    def validate(self) -> None:
        if self.count <= 0:
            raise ValueError("sampler count must be positive")
        if not 0.0 <= self.bg_fraction <= 1.0:
            raise ValueError("bg_fraction must be in [0, 1]")
        for name in ("pos_iou_floor", "neg_iou_ceiling", "roi_pos_floor"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.bg_fraction > 0 and self.neg_iou_ceiling > self.pos_iou_floor:
            raise ValueError("neg_iou_ceiling must not exceed pos_iou_floor")


# Sampling policies studied in the background-ratio / threshold ablation.
SAMPLER_PRESETS: dict[str, SamplerConfig] = {
    "quality_no_bg": SamplerConfig(256, 0.0, 0.3, 0.1, 0.3, force_match=False),
    "quality_one_bg": SamplerConfig(256, 1 / 256, 0.3, 0.1, 0.3, force_match=False),
    "classifier_default": SamplerConfig(256, 0.5, 0.7, 0.3, 0.5, force_match=True),
    "classifier_loose_thr": SamplerConfig(256, 0.5, 0.3, 0.1, 0.3, force_match=True),
    "classifier_one_bg": SamplerConfig(256, 1 / 256, 0.7, 0.3, 0.5, force_match=True),
    "classifier_one_bg_loose_thr": SamplerConfig(256, 1 / 256, 0.3, 0.1, 0.3, force_match=True),
}


@dataclass
class TrainingTargets:
    """Sampled examples with regression and quality targets.

    ``reg`` holds side distances (stage 1) or box deltas (stage 2).
    ``valid`` marks samples with a matched GT; background samples carry
    quality target 0 and class label 0. ``reg_valid`` further restricts to
    samples whose regression target is well defined.
    """

    indices: np.ndarray
    gt_index: np.ndarray
    reg: np.ndarray
    quality: np.ndarray
    class_label: np.ndarray
    valid: np.ndarray
    reg_valid: np.ndarray

    def __len__(self) -> int:
        return self.indices.shape[0]


def match_anchors(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> MatchResult:
    """Assign each anchor to its highest-IoU ground-truth box."""
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = anchor_boxes.shape[0]
    if gt_boxes.shape[0] == 0:
        return MatchResult(np.full(n, -1, dtype=np.int64), np.zeros(n))
    ious = pairwise_iou(anchor_boxes, gt_boxes)
    max_iou = ious.max(axis=1)
    gt_index = ious.argmax(axis=1).astype(np.int64)
    gt_index[max_iou <= 0.0] = -1
    return MatchResult(gt_index, max_iou)


def sample_rpn_training(
    match: MatchResult, cfg: SamplerConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw positive and background anchor indices for one image.

    Positives are anchors with max-IoU strictly above ``cfg.pos_iou_floor``
    (plus per-GT best anchors under ``force_match``); backgrounds are
    anchors strictly below ``cfg.neg_iou_ceiling``. Each pool is sampled
    uniformly without replacement up to its share of ``cfg.count``; a
    short pool is taken whole, never padded.

    Returns:
        (positive_indices, background_indices)
    """
    cfg.validate()
    eligible_pos = match.max_iou > cfg.pos_iou_floor
    if cfg.force_match and match.gt_index.max(initial=-1) >= 0:
        n_gts = int(match.gt_index.max()) + 1
        for g in range(n_gts):
            of_gt = np.flatnonzero(match.gt_index == g)
            if of_gt.size:
                best = of_gt[np.argmax(match.max_iou[of_gt])]
                eligible_pos[best] = True
    pos_pool = np.flatnonzero(eligible_pos)
    neg_pool = np.flatnonzero(match.max_iou < cfg.neg_iou_ceiling)

    n_bg = int(round(cfg.bg_fraction * cfg.count))
    n_pos = cfg.count - n_bg
    pos = rng.choice(pos_pool, size=min(n_pos, pos_pool.size), replace=False)
    neg = rng.choice(neg_pool, size=min(n_bg, neg_pool.size), replace=False)
    return pos.astype(np.int64), neg.astype(np.int64)


def centerness_targets(
    centers: np.ndarray, matched_gt_boxes: np.ndarray
) -> np.ndarray:
    """Centerness of each anchor center w.r.t. its matched GT box."""
    return centerness_of(centers, matched_gt_boxes)


def roi_quality_targets(
    proposals: np.ndarray, gt_boxes: np.ndarray, metric: str = "iou"
) -> np.ndarray:
    """Per-proposal localization quality against the ground truth.

    For ``iou`` and ``dice`` this is the maximum over all GT boxes; for
    ``centerness`` it is evaluated at the proposal center w.r.t. the
    highest-IoU GT. Zero ground truth yields all-zero targets.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if proposals.shape[0] == 0 or gt_boxes.shape[0] == 0:
        return np.zeros(proposals.shape[0])
    if metric == "iou":
        return pairwise_iou(proposals, gt_boxes).max(axis=1)
    if metric == "dice":
        return pairwise_dice(proposals, gt_boxes).max(axis=1)
    if metric == "centerness":
        match = match_anchors(proposals, gt_boxes)
        centers = np.stack(
            [(proposals[:, 0] + proposals[:, 2]) / 2.0,
             (proposals[:, 1] + proposals[:, 3]) / 2.0],
            axis=-1,
        )
        safe = np.where(match.gt_index >= 0, match.gt_index, 0)
        values = centerness_of(centers, gt_boxes[safe])
        return np.where(match.gt_index >= 0, values, 0.0)
    raise ValueError(f"unknown quality metric {metric!r}")


def roi_iou_targets(proposals: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Max-IoU of each proposal against all GT boxes."""
    return roi_quality_targets(proposals, gt_boxes, "iou")


def mask_iou_targets(pred_masks: np.ndarray, gt_masks: np.ndarray) -> np.ndarray:
    """Pixel IoU between predicted and GT binary mask grids.

    Accepts a single (H, W) pair or batched (N, H, W) grids of matching
    shape. Two empty masks score 0.
    """
    pred = np.asarray(pred_masks).astype(bool)
    gt = np.asarray(gt_masks).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    single = pred.ndim == 2
    if single:
        pred, gt = pred[None], gt[None]
    inter = np.logical_and(pred, gt).sum(axis=(1, 2)).astype(np.float64)
    union = np.logical_or(pred, gt).sum(axis=(1, 2)).astype(np.float64)
    out = np.zeros(pred.shape[0])
    np.divide(inter, union, out=out, where=union > 0)
    return float(out[0]) if single else out


def build_rpn_targets(
    grid: AnchorGrid,
    gt_boxes: np.ndarray,
    cfg: SamplerConfig,
    cue: str,
    rng: np.random.Generator,
) -> TrainingTargets:
    """Sample anchors and assemble first-stage training targets.

    Regression targets are raw side distances from the anchor center to
    its matched GT (flagged invalid when the center lies outside the GT);
    quality targets follow ``cue``; class labels are 1 for positives and 0
    for sampled background.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    match = match_anchors(grid.anchors, gt_boxes)
    pos, neg = sample_rpn_training(match, cfg, rng)
    indices = np.concatenate([pos, neg])
    n = indices.shape[0]

    gt_index = np.where(
        np.arange(n) < pos.shape[0], match.gt_index[indices], -1
    ).astype(np.int64)
    valid = gt_index >= 0
    safe = np.where(valid, gt_index, 0)
    centers = grid.centers[indices]

    reg = np.zeros((n, 4))
    quality = np.zeros(n)
    reg_valid = np.zeros(n, dtype=bool)
    if gt_boxes.shape[0] > 0 and valid.any():
        matched_boxes = gt_boxes[safe]
        lrtb = encode_lrtb(centers, matched_boxes)
        inside = np.all(lrtb >= 0.0, axis=-1)
        reg = np.where(valid[:, None], lrtb, 0.0)
        reg_valid = valid & inside
        if cue == "centerness":
            quality = np.where(valid, centerness_targets(centers, matched_boxes), 0.0)
        elif cue == "iou":
            quality = np.where(valid, match.max_iou[indices], 0.0)
        elif cue != "class":
            raise ValueError(f"unsupported first-stage cue {cue!r}")
    return TrainingTargets(
        indices=indices,
        gt_index=gt_index,
        reg=reg,
        quality=quality,
        class_label=valid.astype(np.float64),
        valid=valid,
        reg_valid=reg_valid,
    )


def build_roi_targets(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    cfg: SamplerConfig,
    cue: str,
) -> TrainingTargets:
    """Assemble second-stage targets for every forwarded proposal.

    Quality targets are computed for all proposals directly against the
    ground truth. Proposals whose max-IoU reaches ``cfg.roi_pos_floor``
    count as positives: they get box-delta regression targets toward their
    matched GT and class label 1.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = proposals.shape[0]
    match = match_anchors(proposals, gt_boxes)
    positive = (match.max_iou >= cfg.roi_pos_floor) & (match.gt_index >= 0)
    safe = np.where(match.gt_index >= 0, match.gt_index, 0)

    reg = np.zeros((n, 4))
    if gt_boxes.shape[0] > 0 and positive.any():
        deltas = encode_deltas(proposals, gt_boxes[safe])
        reg = np.where(positive[:, None], deltas, 0.0)
    quality = np.zeros(n)
    if cue in QUALITY_CUES:
        quality = roi_quality_targets(proposals, gt_boxes, cue)
    return TrainingTargets(
        indices=np.arange(n, dtype=np.int64),
        gt_index=np.where(positive, match.gt_index, -1).astype(np.int64),
        reg=reg,
        quality=quality,
        class_label=positive.astype(np.float64),
        valid=positive,
        reg_valid=positive,
    )
