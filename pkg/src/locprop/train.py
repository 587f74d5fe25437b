"""Single-controller training loop with CSV loss logging.

Training consumes only seen-category annotations; unseen objects stay in
the images as unannotated clutter, which is exactly the regime the
quality-based heads are meant to survive and classifier heads are not.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ExperimentConfig
from .data import GroundTruthSet, load_annotations, load_gt_masks
from .geometry import build_anchor_grid
from .inference import InferenceSettings, _prepare_image, generate_proposals
from .losses import mask_losses, roi_losses, stage1_losses, total_loss
from .masks import crop_mask_to_grid
from .model import ProposalNetwork, save_checkpoint
from .targets import build_roi_targets, build_rpn_targets, mask_iou_targets


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@dataclass
class TrainSample:
    image: torch.Tensor  # (3, H, W) normalized
    gt_boxes: np.ndarray  # (G, 4) xyxy, training categories only
    gt_masks: list  # decoded masks aligned with gt_boxes (None entries allowed)


def load_training_set(gts: GroundTruthSet, seen_only: bool = True,
                      with_masks: bool = False) -> list[TrainSample]:
    samples = []
    for image in gts.images:
        keep = image.seen if seen_only else np.ones(len(image.seen), dtype=bool)
        array = np.asarray(Image.open(gts.image_path(image)).convert("RGB"))
        masks: list = [None] * int(keep.sum())
        if with_masks:
            decoded = load_gt_masks(image)
            masks = [m for m, k in zip(decoded, keep) if k]
        samples.append(
            TrainSample(
                image=_prepare_image(array),
                gt_boxes=image.boxes[keep],
                gt_masks=masks,
            )
        )
    return samples


def train(config: ExperimentConfig, out_dir, quiet: bool = True) -> Path:
    """Train a model per ``config``; returns the checkpoint path.

    Writes ``checkpoint.pt`` and an append-only ``loss_log.csv`` with one
    row per step (step, total, then each named term).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed_everything(config.seed)
    rng = np.random.default_rng(config.seed)

    if not config.data.train_annotations:
        raise ValueError("config.data.train_annotations is required for training")
    gts = load_annotations(config.data.train_annotations)
    head = config.model.head
    samples = load_training_set(
        gts, seen_only=config.data.train_seen_only, with_masks=head.mask_head
    )
    if not samples:
        raise ValueError("training set is empty")

    model = ProposalNetwork(config.model)
    model.train()
    opt = config.optimizer
    optimizer = torch.optim.SGD(
        model.parameters(), lr=opt.lr, momentum=opt.momentum, weight_decay=opt.weight_decay
    )
    sizes = {tuple(s.image.shape[-2:]) for s in samples}
    if len(sizes) != 1:
        raise ValueError(f"training images must share one size, got {sizes}")
    height, width = next(iter(sizes))
    grid = build_anchor_grid((width, height), list(config.model.strides), config.model.anchor_scale)

    train_settings = InferenceSettings(
        proposal_nms=config.inference.proposal_nms,
        pre_nms_top_n=config.inference.pre_nms_top_n,
        proposal_top_n=opt.train_proposals,
        min_box_size=config.inference.min_box_size,
    )

    log_path = out_dir / "loss_log.csv"
    log_file = open(log_path, "w", newline="")
    log_writer = csv.writer(log_file)
    header_written = False

    lr = opt.lr
    for step in range(opt.steps):
        if step in set(opt.decay_steps):
            lr *= opt.decay_factor
            for group in optimizer.param_groups:
                group["lr"] = lr
        batch_idx = rng.integers(0, len(samples), size=opt.batch_size)
        batch = [samples[i] for i in batch_idx]
        images = torch.stack([s.image for s in batch])

        pyramid = model.feature_pyramid(images)
        outputs = model.rpn_forward(pyramid)
        rpn_targets = [
            build_rpn_targets(grid, s.gt_boxes, config.sampler, head.stage1_cue, rng)
            for s in batch
        ]
        losses = stage1_losses(outputs, rpn_targets, grid, head)

        if head.two_stage:
            boxes_per_image = []
            roi_targets = []
            with torch.no_grad():
                for i, s in enumerate(batch):
                    boxes, _, _ = generate_proposals(
                        outputs, grid, (width, height), train_settings, head, image_idx=i
                    )
                    boxes_per_image.append(
                        torch.as_tensor(boxes, dtype=images.dtype)
                    )
                    roi_targets.append(
                        build_roi_targets(boxes, s.gt_boxes, config.sampler, head.stage2_cue)
                    )
            roi_out = model.roi_forward(pyramid, boxes_per_image)
            losses.update(roi_losses(roi_out, roi_targets, head))

            if head.mask_head:
                losses.update(
                    _mask_step(model, pyramid, batch, boxes_per_image, roi_targets)
                )

        loss = total_loss(losses)
        optimizer.zero_grad()
        loss.backward()
        if opt.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt.grad_clip)
        optimizer.step()

        row = {"step": step, "total": loss.item()} | {
            k: v.item() for k, v in losses.items()
        }
        if not header_written:
            log_writer.writerow(list(row))
            header_written = True
        log_writer.writerow(list(row.values()))
        log_file.flush()
        if not quiet and (step % 50 == 0 or step == opt.steps - 1):
            print(f"step {step}: total={float(loss):.4f}")

    log_file.close()
    model.eval()
    checkpoint = out_dir / "checkpoint.pt"
    save_checkpoint(
        checkpoint,
        model,
        metadata={
            "steps": opt.steps,
            "seed": config.seed,
            "train_annotations": str(config.data.train_annotations),
        },
    )
    return checkpoint


def _mask_step(model, pyramid, batch, boxes_per_image, roi_targets):
    """Mask BCE and mask-quality losses over the positive RoIs."""
    out_size = model.config.mask_roi_size * 2
    per_image_boxes = []
    target_grids = []  # image-major, matching pooled feature order
    total = 0
    for s, boxes, t in zip(batch, boxes_per_image, roi_targets):
        rows = []
        for row in np.flatnonzero(t.valid):
            gt_idx = int(t.gt_index[row])
            gt_mask = s.gt_masks[gt_idx] if gt_idx < len(s.gt_masks) else None
            if gt_mask is None:
                continue
            rows.append(int(row))
            target_grids.append(
                crop_mask_to_grid(gt_mask, boxes[row].cpu().numpy(), out_size)
            )
        picked = boxes[rows] if rows else boxes.new_zeros((0, 4))
        per_image_boxes.append(picked)
        total += len(rows)
    if total == 0:
        zero = pyramid.features[0].sum() * 0.0
        out = {"mask": zero}
        if model.config.head.mask_iou:
            out["mask_iou"] = zero.clone()
        return out
    grids = np.stack(target_grids).astype(np.float32)
    logits, iou_pred = model.mask_forward(pyramid, per_image_boxes)
    targets = torch.as_tensor(grids, dtype=logits.dtype)
    iou_target = None
    if iou_pred is not None:
        predicted = (torch.sigmoid(logits.detach()).numpy() >= 0.5)
        iou_values = mask_iou_targets(predicted, grids >= 0.5)
        iou_target = torch.as_tensor(
            np.atleast_1d(iou_values), dtype=iou_pred.dtype
        )
    return mask_losses(logits, targets, iou_pred, iou_target)
