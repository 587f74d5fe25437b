"""From raw head outputs to scored, deduplicated proposals.

Scores from the configured cues are fused by geometric mean, boxes are
decoded, clipped and suppressed, and the surviving proposals can be
exported as COCO-results-style JSON or rendered as score heatmaps.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import clip_boxes, decode_deltas, decode_lrtb, nms
from .masks import encode_rle, paste_mask_in_image
from .model import (
    BOX_DELTA_STD,
    HeadConfig,
    ProposalNetwork,
    Stage1Outputs,
    flat_quality_scores,
)


@dataclass
class Proposal:
    """A candidate box with its per-cue quality scores.

    ``c`` is the first-stage score, ``b`` the second-stage score, ``m``
    the mask-quality score; ``extra`` holds classifier probabilities from
    ablation configurations. ``s`` is the geometric mean of every cue
    participating in fusion (the first stage opts out when the
    configuration says so).
    """

    box: np.ndarray
    c: float
    b: float | None = None
    m: float | None = None
    extra: tuple[float, ...] = ()
    mask: np.ndarray | None = None
    s: float = 0.0


@dataclass
class InferenceSettings:
    """Proposal generation and final-selection knobs."""

    proposal_nms: float = 0.7
    pre_nms_top_n: int = 1000
    proposal_top_n: int = 300
    min_box_size: float = 1.0
    final_nms: float = 0.7
    final_top_k: int = 300

    def detection_mode(self) -> "InferenceSettings":
        """Class-agnostic detection protocol: NMS 0.5, top-100 boxes."""
        return InferenceSettings(
            proposal_nms=self.proposal_nms,
            pre_nms_top_n=self.pre_nms_top_n,
            proposal_top_n=self.proposal_top_n,
            min_box_size=self.min_box_size,
            final_nms=0.5,
            final_top_k=100,
        )


def fuse_scores(c: float, b: float | None = None, m: float | None = None,
                extra=()) -> float:
    """Geometric mean of the present quality cues.

    With c and b this is sqrt(c*b); with c, b and m the cube root of
    their product. Classifier probabilities in ``extra`` enter the mean
    as additional factors. Negative inputs violate the score contract.
    """
    cues = [v for v in (c, b, m, *extra) if v is not None]
    if any(v < 0 for v in cues):
        raise ValueError(f"quality scores must be non-negative, got {cues}")
    if not cues:
        raise ValueError("fuse_scores needs at least one cue")
    product = math.prod(cues)
    return product ** (1.0 / len(cues))


def _stage1_combined(cue_scores: dict[str, np.ndarray]) -> np.ndarray:
    arrays = list(cue_scores.values())
    product = arrays[0].copy()
    for a in arrays[1:]:
        product = product * a
    return product ** (1.0 / len(arrays))


def generate_proposals(
    outputs: Stage1Outputs,
    grid,
    image_size: tuple[int, int],
    settings: InferenceSettings,
    head: HeadConfig,
    image_idx: int = 0,
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Decode, clip and suppress first-stage predictions for one image.

    Returns (boxes, combined_scores, per_cue_scores) for the surviving
    proposals, sorted by descending combined score.
    """
    width, height = image_size
    cue_scores = flat_quality_scores(outputs, head, image_idx)
    combined = _stage1_combined(cue_scores)
    strides = np.concatenate(
        [np.full(s.stop - s.start, st, dtype=np.float64)
         for s, st in zip(grid.level_slices, grid.strides)]
    )
    lrtb = outputs.reg[image_idx].detach().cpu().numpy().astype(np.float64) * strides[:, None]
    boxes = clip_boxes(decode_lrtb(grid.centers, lrtb), width, height)
    wh_ok = (boxes[:, 2] - boxes[:, 0] >= settings.min_box_size) & (
        boxes[:, 3] - boxes[:, 1] >= settings.min_box_size
    )
    keep = np.flatnonzero(wh_ok)
    boxes, combined = boxes[keep], combined[keep]
    cue_scores = {k: v[keep] for k, v in cue_scores.items()}

    order = np.lexsort((np.arange(len(combined)), -combined))[: settings.pre_nms_top_n]
    boxes, combined = boxes[order], combined[order]
    cue_scores = {k: v[order] for k, v in cue_scores.items()}
    kept = nms(boxes, combined, settings.proposal_nms)[: settings.proposal_top_n]
    return boxes[kept], combined[kept], {k: v[kept] for k, v in cue_scores.items()}


def detect(
    model: ProposalNetwork,
    image: np.ndarray | torch.Tensor,
    settings: InferenceSettings | None = None,
) -> list[Proposal]:
    """Full inference pass on one image: propose, refine, fuse, suppress.

    The image is (H, W, 3) uint8 or a prepared (3, H, W) float tensor.
    Output proposals are sorted by descending fused score.
    """
    settings = settings or InferenceSettings()
    head = model.head_config
    tensor = _prepare_image(image)
    height, width = tensor.shape[-2:]
    if min(height, width) < max(model.config.strides):
        raise ValueError(
            f"image {width}x{height} is smaller than the coarsest stride "
            f"{max(model.config.strides)}"
        )
    model.eval()
    with torch.no_grad():
        pyramid = model.feature_pyramid(tensor[None])
        outputs = model.rpn_forward(pyramid)
        grid = model.anchor_grid((width, height))
        boxes, combined, cue_scores = generate_proposals(
            outputs, grid, (width, height), settings, head
        )
        proposals = _assemble(model, pyramid, boxes, combined, cue_scores, (width, height))
    if not proposals:
        return []
    final_boxes = np.stack([p.box for p in proposals])
    final_scores = np.array([p.s for p in proposals])
    kept = nms(final_boxes, final_scores, settings.final_nms)[: settings.final_top_k]
    return [proposals[i] for i in kept]


def _assemble(
    model: ProposalNetwork,
    pyramid,
    boxes: np.ndarray,
    combined: np.ndarray,
    cue_scores: dict[str, np.ndarray],
    image_size: tuple[int, int],
) -> list[Proposal]:
    head = model.head_config
    width, height = image_size
    n = boxes.shape[0]
    if n == 0:
        return []

    stage1_extra = []
    if head.stage1_has_quality and "class" in cue_scores:
        stage1_extra = [cue_scores["class"]]
    c_scores = (
        cue_scores[head.stage1_cue] if head.stage1_has_quality else cue_scores["class"]
    )

    if not head.two_stage:
        out = []
        for i in range(n):
            extra = tuple(float(e[i]) for e in stage1_extra)
            s = fuse_scores(float(c_scores[i]), extra=extra)
            out.append(Proposal(box=boxes[i], c=float(c_scores[i]), extra=extra, s=s))
        return out

    roi_boxes = torch.as_tensor(boxes, dtype=pyramid.features[0].dtype)
    roi_out = model.roi_forward(pyramid, [roi_boxes])
    deltas = roi_out.deltas.cpu().numpy().astype(np.float64) * np.asarray(BOX_DELTA_STD)
    refined = clip_boxes(decode_deltas(boxes, deltas), width, height)
    good = (refined[:, 2] > refined[:, 0]) & (refined[:, 3] > refined[:, 1])

    b_scores = extra2 = None
    if roi_out.quality is not None:
        b_scores = roi_out.quality.clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
    if roi_out.class_logits is not None:
        extra2 = torch.sigmoid(roi_out.class_logits).cpu().numpy().astype(np.float64)
    if head.stage2_cue == "class":
        b_scores, extra2 = extra2, None

    mask_grids = m_scores = None
    if model.mask_head is not None:
        keep_idx = np.flatnonzero(good)
        if keep_idx.size:
            mask_in = torch.as_tensor(refined[keep_idx], dtype=pyramid.features[0].dtype)
            logits, iou_pred = model.mask_forward(pyramid, [mask_in])
            probs = torch.sigmoid(logits).cpu().numpy()
            mask_grids = {int(i): probs[j] >= 0.5 for j, i in enumerate(keep_idx)}
            if iou_pred is not None:
                clamped = iou_pred.clamp(0.0, 1.0).cpu().numpy().astype(np.float64)
                m_scores = {int(i): float(clamped[j]) for j, i in enumerate(keep_idx)}

    out = []
    for i in range(n):
        if not good[i]:
            continue
        extra = [float(e[i]) for e in stage1_extra]
        if extra2 is not None:
            extra.append(float(extra2[i]))
        b = float(b_scores[i]) if b_scores is not None else None
        m = m_scores.get(i) if m_scores else None
        c = float(c_scores[i])
        s = fuse_scores(
            c if head.fuse_stage1 else None,
            b,
            m,
            extra=tuple(extra),
        ) if (head.fuse_stage1 or b is not None or m is not None or extra) else c
        out.append(
            Proposal(
                box=refined[i],
                c=c,
                b=b,
                m=m,
                extra=tuple(extra),
                mask=mask_grids.get(i) if mask_grids else None,
                s=s,
            )
        )
    return out


def _prepare_image(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.float()
    array = np.asarray(image)
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    tensor = torch.from_numpy(array.astype(np.float32) / 255.0 - 0.5)
    return tensor.permute(2, 0, 1)


def proposals_to_records(
    image_id: int,
    proposals: list[Proposal],
    image_size: tuple[int, int] | None = None,
    with_masks: bool = False,
) -> list[dict]:
    """COCO-results-style records: image_id, xywh bbox, score."""
    records = []
    for p in proposals:
        x1, y1, x2, y2 = [float(v) for v in p.box]
        record = {
            "image_id": int(image_id),
            "bbox": [x1, y1, x2 - x1, y2 - y1],
            "score": float(p.s),
        }
        if with_masks and p.mask is not None and image_size is not None:
            width, height = image_size
            record["segmentation"] = encode_rle(
                paste_mask_in_image(p.mask, p.box, width, height)
            )
        records.append(record)
    return records


def write_proposals_json(path, records: list[dict]) -> None:
    with open(path, "w") as f:
        json.dump(records, f)
        f.write("\n")


def load_proposals_json(path) -> dict[int, dict]:
    """Group a results file by image: id -> {boxes (N,4) xyxy, scores (N,)}."""
    with open(path) as f:
        records = json.load(f)
    grouped: dict[int, dict] = {}
    for r in records:
        entry = grouped.setdefault(
            int(r["image_id"]), {"boxes": [], "scores": [], "segmentations": []}
        )
        x, y, w, h = r["bbox"]
        entry["boxes"].append([x, y, x + w, y + h])
        entry["scores"].append(float(r["score"]))
        entry["segmentations"].append(r.get("segmentation"))
    for entry in grouped.values():
        entry["boxes"] = np.asarray(entry["boxes"], dtype=np.float64).reshape(-1, 4)
        entry["scores"] = np.asarray(entry["scores"], dtype=np.float64)
    return grouped


def export_heatmap(
    outputs: Stage1Outputs,
    head: HeadConfig,
    image_size: tuple[int, int],
    out_prefix,
    image_idx: int = 0,
) -> dict[str, tuple[Path, Path]]:
    """Render per-cue score maps as PNGs with raw-array sidecars.

    Per-level maps are upsampled bilinearly to image size and combined by
    per-pixel maximum for display; the sidecar ``.npz`` stores the exact
    per-level score arrays plus the combined map.
    """
    from matplotlib import cm
    from PIL import Image

    width, height = image_size
    out_prefix = Path(out_prefix)
    cue_maps: dict[str, list[np.ndarray]] = {}
    flat_q = flat_quality_scores(outputs, head, image_idx)
    for cue, flat in flat_q.items():
        maps = []
        offset = 0
        for (h, w) in outputs.level_shapes:
            maps.append(flat[offset:offset + h * w].reshape(h, w).astype(np.float32))
            offset += h * w
        cue_maps[cue] = maps

    results = {}
    for cue, maps in cue_maps.items():
        upsampled = [
            F.interpolate(
                torch.from_numpy(m)[None, None], size=(height, width),
                mode="bilinear", align_corners=False,
            )[0, 0].numpy()
            for m in maps
        ]
        combined = np.maximum.reduce(upsampled)
        rgba = cm.viridis(np.clip(combined, 0.0, 1.0))
        png_path = out_prefix.with_name(f"{out_prefix.name}_{cue}.png")
        npz_path = out_prefix.with_name(f"{out_prefix.name}_{cue}.npz")
        try:
            Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(png_path)
            np.savez(
                npz_path,
                combined=combined,
                **{f"level{i}": m for i, m in enumerate(maps)},
            )
        except OSError as e:
            raise OSError(f"failed writing heatmap to {png_path}: {e}") from e
        results[cue] = (png_path, npz_path)
    return results
