"""Loss functions for both stages.

Quality and box regression train with L1, the mask-quality branch with
smooth-L1, classifier variants with binary cross-entropy. Every head is
normalized per image by its number of contributing samples and the total
objective is the unweighted sum of the per-head terms.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import AnchorGrid
from .model import BOX_DELTA_STD, HeadConfig, RoIOutputs, Stage1Outputs
from .targets import TrainingTargets


def masked_l1(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over rows selected by ``mask``; 0 when empty."""
    count = int(mask.sum())
    if count == 0:
        return pred.sum() * 0.0
    return (pred[mask] - target[mask]).abs().sum() / count


def masked_smooth_l1(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, beta: float = 1.0
) -> torch.Tensor:
    count = int(mask.sum())
    if count == 0:
        return pred.sum() * 0.0
    diff = (pred[mask] - target[mask]).abs()
    loss = torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return loss.sum() / count


def masked_bce(logits: torch.Tensor, labels: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = int(mask.sum())
    if count == 0:
        return logits.sum() * 0.0
    return F.binary_cross_entropy_with_logits(
        logits[mask], labels[mask], reduction="sum"
    ) / count


def _to_tensor(a: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(a, dtype=like.dtype, device=like.device)


def stage1_losses(
    outputs: Stage1Outputs,
    targets_per_image: list[TrainingTargets],
    grid: AnchorGrid,
    head: HeadConfig,
) -> dict[str, torch.Tensor]:
    """First-stage losses averaged over the batch.

    Regression compares predicted side distances (stride units) against
    encoded targets on samples with a well-defined target; the quality
    head trains on every sampled anchor, background carrying target 0.
    """
    strides = np.concatenate(
        [np.full(s.stop - s.start, st, dtype=np.float64)
         for s, st in zip(grid.level_slices, grid.strides)]
    )
    device_ref = outputs.reg
    losses: dict[str, torch.Tensor] = {}
    reg_terms, quality_terms, class_terms = [], [], []
    for img, t in enumerate(targets_per_image):
        if len(t) == 0:
            continue
        idx = torch.as_tensor(t.indices, dtype=torch.long, device=device_ref.device)
        sample_strides = _to_tensor(strides[t.indices][:, None], device_ref)
        reg_pred = outputs.reg[img, idx]
        reg_target = _to_tensor(t.reg, device_ref) / sample_strides
        reg_mask = torch.as_tensor(t.reg_valid, device=device_ref.device)
        reg_terms.append(masked_l1(reg_pred, reg_target, reg_mask))
        all_mask = torch.ones(len(t), dtype=torch.bool, device=device_ref.device)
        if outputs.quality is not None:
            q_pred = outputs.quality[img, idx]
            q_target = _to_tensor(t.quality, device_ref)
            quality_terms.append(masked_l1(q_pred, q_target, all_mask))
        if outputs.class_logits is not None:
            c_pred = outputs.class_logits[img, idx]
            c_target = _to_tensor(t.class_label, device_ref)
            class_terms.append(masked_bce(c_pred, c_target, all_mask))
    zero = device_ref.sum() * 0.0
    losses["rpn_reg"] = torch.stack(reg_terms).mean() if reg_terms else zero
    if outputs.quality is not None:
        losses["rpn_quality"] = torch.stack(quality_terms).mean() if quality_terms else zero
    if outputs.class_logits is not None:
        losses["rpn_class"] = torch.stack(class_terms).mean() if class_terms else zero
    return losses


def roi_losses(
    outputs: RoIOutputs,
    targets_per_image: list[TrainingTargets],
    head: HeadConfig,
) -> dict[str, torch.Tensor]:
    """Second-stage losses; outputs are flat in image-major order.

    Delta targets are divided by the standard normalization constants so
    the regression term trains at unit scale; inference multiplies the
    predictions back.
    """
    device_ref = outputs.deltas
    std = _to_tensor(np.asarray(BOX_DELTA_STD), device_ref)
    losses: dict[str, torch.Tensor] = {}
    reg_terms, quality_terms, class_terms = [], [], []
    offset = 0
    for t in targets_per_image:
        n = len(t)
        if n == 0:
            continue
        sl = slice(offset, offset + n)
        offset += n
        reg_mask = torch.as_tensor(t.reg_valid, device=device_ref.device)
        reg_terms.append(
            masked_l1(outputs.deltas[sl], _to_tensor(t.reg, device_ref) / std, reg_mask)
        )
        all_mask = torch.ones(n, dtype=torch.bool, device=device_ref.device)
        if outputs.quality is not None:
            quality_terms.append(
                masked_l1(outputs.quality[sl], _to_tensor(t.quality, device_ref), all_mask)
            )
        if outputs.class_logits is not None:
            class_terms.append(
                masked_bce(outputs.class_logits[sl], _to_tensor(t.class_label, device_ref), all_mask)
            )
    zero = device_ref.sum() * 0.0
    losses["roi_reg"] = torch.stack(reg_terms).mean() if reg_terms else zero
    if outputs.quality is not None:
        losses["roi_quality"] = torch.stack(quality_terms).mean() if quality_terms else zero
    if outputs.class_logits is not None:
        losses["roi_class"] = torch.stack(class_terms).mean() if class_terms else zero
    return losses


def mask_losses(
    mask_logits: torch.Tensor,
    mask_targets: torch.Tensor,
    mask_iou_pred: torch.Tensor | None,
    mask_iou_target: torch.Tensor | None,
) -> dict[str, torch.Tensor]:
    """Per-pixel BCE for the mask grid, smooth-L1 for its quality score.

    Callers pass only the positive RoIs; an empty batch yields zero terms.
    """
    losses: dict[str, torch.Tensor] = {}
    if mask_logits.numel() == 0:
        losses["mask"] = mask_logits.sum() * 0.0
    else:
        losses["mask"] = F.binary_cross_entropy_with_logits(
            mask_logits, mask_targets, reduction="mean"
        )
    if mask_iou_pred is not None:
        mask = torch.ones(mask_iou_pred.shape[0], dtype=torch.bool, device=mask_iou_pred.device)
        losses["mask_iou"] = masked_smooth_l1(mask_iou_pred, mask_iou_target, mask)
    return losses


def total_loss(losses: dict[str, torch.Tensor]) -> torch.Tensor:
    """Unweighted sum of all named loss terms."""
    return sum(losses.values())


def compute_losses(
    stage1: tuple[Stage1Outputs, list[TrainingTargets], AnchorGrid] | None,
    stage2: tuple[RoIOutputs, list[TrainingTargets]] | None,
    head: HeadConfig,
    mask: tuple[torch.Tensor, torch.Tensor, torch.Tensor | None, torch.Tensor | None] | None = None,
) -> dict[str, torch.Tensor]:
    """Assemble every configured head's named loss terms."""
    losses: dict[str, torch.Tensor] = {}
    if stage1 is not None:
        outputs, targets, grid = stage1
        losses.update(stage1_losses(outputs, targets, grid, head))
    if stage2 is not None:
        outputs, targets = stage2
        losses.update(roi_losses(outputs, targets, head))
    if mask is not None:
        losses.update(mask_losses(*mask))
    return losses
