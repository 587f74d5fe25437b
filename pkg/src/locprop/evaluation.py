"""Cross-category recall and class-agnostic precision protocols.

Two protocols are implemented:

* AR@k over unseen-category ground truth, where proposals that match a
  seen-category object are exempt from the top-k budget.
* Class-agnostic average precision over exhaustively annotated images,
  with size splits by box long side (S < 32 <= M < 96 <= L).

All matching is greedy in descending score order with deterministic
tie-breaking (score ties by input index, IoU ties by lowest GT index), so
results are reproducible and directly comparable to brute-force oracles.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_iou

AR_KS = (10, 20, 30, 50, 100, 300, 1000)
AUC_KS = (10, 30, 100, 300, 1000)
AP_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# Size splits by box long side, in pixels.
SIZE_SPLITS = {"small": (0.0, 32.0), "medium": (32.0, 96.0), "large": (96.0, math.inf)}


@dataclass
class ImageEval:
    """Proposals and ground truth of one image, ready for matching."""

    image_id: int
    proposal_boxes: np.ndarray  # (P, 4) xyxy
    proposal_scores: np.ndarray  # (P,)
    gt_boxes: np.ndarray  # (G, 4) xyxy
    gt_seen: np.ndarray  # (G,) bool
    proposal_masks: list | None = None  # optional RLE dicts, len P
    gt_masks: list | None = None  # optional RLE dicts, len G


@dataclass
class EvalReport:
    ar: dict[int, float] = field(default_factory=dict)
    auc: float | None = None
    ap: float | None = None
    ap50: float | None = None
    ap75: float | None = None
    ap_small: float | None = None
    ap_medium: float | None = None
    ap_large: float | None = None
    n_images: int = 0
    n_unseen_gts: int = 0
    per_image: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ar": {str(k): v for k, v in self.ar.items()},
            "auc": self.auc,
            "ap": self.ap,
            "ap50": self.ap50,
            "ap75": self.ap75,
            "ap_small": self.ap_small,
            "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "n_images": self.n_images,
            "n_unseen_gts": self.n_unseen_gts,
            "per_image": self.per_image,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def write_ar_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k", "ar"])
            for k in sorted(self.ar):
                writer.writerow([k, self.ar[k]])


def _score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score, ties broken by lower input index."""
    return np.lexsort((np.arange(len(scores)), -np.asarray(scores, dtype=np.float64)))


def match_greedy(
    proposal_boxes: np.ndarray, gt_boxes: np.ndarray, iou_threshold: float
) -> np.ndarray:
    """Greedy matching of score-sorted proposals to ground truth.

    Each proposal (visited in the given order) claims the unmatched GT with
    the highest IoU, provided that IoU >= ``iou_threshold``. IoU ties go to
    the lowest GT index.

    Returns:
        (G,) bool array of per-GT hit flags.
    """
    proposal_boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    hit = np.zeros(gt_boxes.shape[0], dtype=bool)
    if proposal_boxes.shape[0] == 0 or gt_boxes.shape[0] == 0:
        return hit
    ious = pairwise_iou(proposal_boxes, gt_boxes)
    for p in range(proposal_boxes.shape[0]):
        best_g, best_iou = -1, 0.0
        for g in range(gt_boxes.shape[0]):
            if hit[g]:
                continue
            if ious[p, g] > best_iou:
                best_g, best_iou = g, ious[p, g]
        if best_g >= 0 and best_iou >= iou_threshold:
            hit[best_g] = True
    return hit


def recall_at_k(
    image: ImageEval,
    k: int,
    iou_threshold: float = 0.5,
    exclude_seen: bool = True,
    seen_iou: float = 0.5,
) -> tuple[int, int]:
    """Matched and total unseen GT counts for one image at budget ``k``.

    Proposals are walked in descending score order. With ``exclude_seen``,
    a proposal whose best available match is a seen-category GT at IoU >=
    ``seen_iou`` claims that GT without consuming budget; every other
    proposal consumes one unit of the budget. A proposal hits an unseen GT
    when that GT is its best available match at IoU >= ``iou_threshold``.

    "Best available" means the highest-IoU currently unmatched GT of any
    category, ties broken by lowest GT index.
    """
    boxes = np.asarray(image.proposal_boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(image.proposal_scores, dtype=np.float64)
    gt_boxes = np.asarray(image.gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_seen = np.asarray(image.gt_seen, dtype=bool)
    n_unseen = int((~gt_seen).sum())
    if n_unseen == 0:
        return 0, 0
    if boxes.shape[0] == 0:
        return 0, n_unseen
    ious = pairwise_iou(boxes, gt_boxes)
    matched = np.zeros(gt_boxes.shape[0], dtype=bool)
    hits = 0
    used = 0
    for p in _score_order(scores):
        if used >= k:
            break
        best_g, best_iou = -1, 0.0
        for g in range(gt_boxes.shape[0]):
            if matched[g]:
                continue
            if ious[p, g] > best_iou:
                best_g, best_iou = g, ious[p, g]
        if exclude_seen and best_g >= 0 and gt_seen[best_g] and best_iou >= seen_iou:
            matched[best_g] = True
            continue
        used += 1
        if best_g >= 0 and not gt_seen[best_g] and best_iou >= iou_threshold:
            matched[best_g] = True
            hits += 1
    return hits, n_unseen


def ar_at_k(
    images: list[ImageEval],
    k: int,
    iou_thresholds=(0.5,),
    exclude_seen: bool = True,
    seen_iou: float = 0.5,
) -> float:
    """Dataset AR@k, micro-averaged over unseen GT instances.

    Recall is computed per IoU threshold (hits summed across images divided
    by total unseen GTs) and averaged over ``iou_thresholds``. Images with
    no unseen GTs contribute nothing.
    """
    per_threshold = []
    for t in iou_thresholds:
        hits = 0
        total = 0
        for image in images:
            h, n = recall_at_k(image, k, t, exclude_seen=exclude_seen, seen_iou=seen_iou)
            hits += h
            total += n
        per_threshold.append(hits / total if total > 0 else float("nan"))
    return sum(per_threshold) / len(per_threshold)


def auc(ar_curve: dict[int, float]) -> float:
    """Normalized trapezoidal area of the AR curve over log10(k)."""
    if len(ar_curve) < 2:
        raise ValueError("auc needs the AR curve at >= 2 budgets")
    ks = sorted(ar_curve)
    logs = [math.log10(k) for k in ks]
    area = 0.0
    for i in range(len(ks) - 1):
        area += (ar_curve[ks[i]] + ar_curve[ks[i + 1]]) / 2.0 * (logs[i + 1] - logs[i])
    return area / (logs[-1] - logs[0])


def _long_side(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.maximum(boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1])


def _ap_from_matches(records: list[tuple[float, int, int, bool]], n_gt: int) -> float:
    """101-point interpolated AP from (score, image_id, index, is_tp) records.

    Records must already exclude ignored detections. Returns NaN when there
    is no ground truth to recall.
    """
    if n_gt == 0:
        return float("nan")
    records = sorted(records, key=lambda r: (-r[0], r[1], r[2]))
    tp_cum = 0
    recalls, precisions = [], []
    for i, (_, _, _, is_tp) in enumerate(records):
        tp_cum += int(is_tp)
        recalls.append(tp_cum / n_gt)
        precisions.append(tp_cum / (i + 1))
    ap_points = []
    for i in range(101):
        r = i / 100.0
        best = 0.0
        for rec, prec in zip(recalls, precisions):
            if rec >= r and prec > best:
                best = prec
        ap_points.append(best)
    return sum(ap_points) / 101.0


def _match_image_detections(
    det_boxes: np.ndarray,
    det_scores: np.ndarray,
    gt_boxes: np.ndarray,
    gt_ignore: np.ndarray,
    iou_threshold: float,
    size_range: tuple[float, float],
) -> list[tuple[int, bool, bool]]:
    """Match detections of one image at one IoU threshold.

    Returns per-detection (index, is_tp, is_ignored) in score order. A
    detection first tries the best unmatched non-ignored GT; failing that,
    the best unmatched ignored GT (making the detection ignored); an
    unmatched detection is ignored when its own long side falls outside
    ``size_range``.
    """
    out = []
    ious = pairwise_iou(det_boxes, gt_boxes) if gt_boxes.shape[0] else None
    matched = np.zeros(gt_boxes.shape[0], dtype=bool)
    lo, hi = size_range
    for p in _score_order(det_scores):
        best_g, best_iou = -1, 0.0
        best_ig_g, best_ig_iou = -1, 0.0
        for g in range(gt_boxes.shape[0]):
            if matched[g]:
                continue
            v = ious[p, g]
            if v < iou_threshold:
                continue
            if gt_ignore[g]:
                if v > best_ig_iou:
                    best_ig_g, best_ig_iou = g, v
            elif v > best_iou:
                best_g, best_iou = g, v
        if best_g >= 0:
            matched[best_g] = True
            out.append((int(p), True, False))
        elif best_ig_g >= 0:
            matched[best_ig_g] = True
            out.append((int(p), False, True))
        else:
            side = float(_long_side(det_boxes[p]))
            outside = not (lo <= side < hi)
            out.append((int(p), False, outside))
    return out


def average_precision(
    images: list[ImageEval],
    iou_thresholds=AP_IOU_THRESHOLDS,
    size_range: tuple[float, float] = (0.0, math.inf),
    max_detections: int = 100,
) -> dict[float, float]:
    """Class-agnostic AP at each IoU threshold.

    Detections are capped at the top ``max_detections`` per image by score.
    Ground truth whose long side falls outside ``size_range`` is ignored:
    detections matched to it are dropped from the precision-recall sweep,
    as are unmatched detections outside the range. Returns NaN per
    threshold when the range contains no ground truth.
    """
    prepared = []
    for image in images:
        boxes = np.asarray(image.proposal_boxes, dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(image.proposal_scores, dtype=np.float64)
        order = _score_order(scores)[:max_detections]
        gt_boxes = np.asarray(image.gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_ignore = ~_in_range(_long_side(gt_boxes), size_range) if gt_boxes.shape[0] else np.zeros(0, dtype=bool)
        prepared.append((image.image_id, boxes[order], scores[order], gt_boxes, gt_ignore))

    n_gt = sum(int((~ig).sum()) for _, _, _, _, ig in prepared)
    results = {}
    for t in iou_thresholds:
        records = []
        for image_id, boxes, scores, gt_boxes, gt_ignore in prepared:
            for idx, is_tp, is_ignored in _match_image_detections(
                boxes, scores, gt_boxes, gt_ignore, t, size_range
            ):
                if not is_ignored:
                    records.append((float(scores[idx]), image_id, idx, is_tp))
        results[t] = _ap_from_matches(records, n_gt)
    return results


def _in_range(values: np.ndarray, size_range: tuple[float, float]) -> np.ndarray:
    lo, hi = size_range
    return (values >= lo) & (values < hi)


def ap_report(images: list[ImageEval], max_detections: int = 100) -> dict[str, float | None]:
    """AP, AP50, AP75 and size-split APs for the detection protocol."""
    full = average_precision(images, max_detections=max_detections)
    values = [full[t] for t in AP_IOU_THRESHOLDS]
    finite = [v for v in values if not math.isnan(v)]
    out = {
        "ap": sum(finite) / len(finite) if finite else None,
        "ap50": None if math.isnan(full[0.5]) else full[0.5],
        "ap75": None if math.isnan(full[0.75]) else full[0.75],
    }
    for name, rng in SIZE_SPLITS.items():
        split = average_precision(images, size_range=rng, max_detections=max_detections)
        vals = [v for v in split.values() if not math.isnan(v)]
        out[f"ap_{name}"] = sum(vals) / len(vals) if vals else None
    return out


def evaluate(
    images: list[ImageEval],
    ar_ks=AR_KS,
    iou_thresholds=(0.5,),
    exclude_seen: bool = True,
    seen_iou: float = 0.5,
    with_ap: bool = True,
    max_detections: int = 100,
) -> EvalReport:
    """Full evaluation: AR curve + AUC, and optionally the AP family."""
    report = EvalReport(n_images=len(images))
    for k in ar_ks:
        report.ar[int(k)] = ar_at_k(
            images, k, iou_thresholds, exclude_seen=exclude_seen, seen_iou=seen_iou
        )
    auc_curve = {k: report.ar[k] for k in report.ar if k in AUC_KS}
    if len(auc_curve) >= 2:
        report.auc = auc(auc_curve)
    for image in images:
        hits, total = recall_at_k(
            image,
            max(ar_ks),
            iou_thresholds[0],
            exclude_seen=exclude_seen,
            seen_iou=seen_iou,
        )
        report.n_unseen_gts += total
        report.per_image.append(
            {"image_id": image.image_id, "matched_unseen": hits, "unseen_gts": total}
        )
    if with_ap:
        ap_values = ap_report(images, max_detections=max_detections)
        report.ap = ap_values["ap"]
        report.ap50 = ap_values["ap50"]
        report.ap75 = ap_values["ap75"]
        report.ap_small = ap_values["ap_small"]
        report.ap_medium = ap_values["ap_medium"]
        report.ap_large = ap_values["ap_large"]
    return report
