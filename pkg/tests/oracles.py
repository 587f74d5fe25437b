"""Brute-force reference implementations used to verify the library.

Everything here is written with plain Python loops and scalar arithmetic,
independent of the library's vectorized code paths. The conventions
(greedy score order, ties to lower index, budget exemption rule) follow
the documented contracts so results are directly comparable.
"""

import math


def scalar_iou(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def scalar_dice(a, b):
    ix1, iy1 = max(a[0], b[0]), max(a[1], b[1])
    ix2, iy2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, ix2 - ix1) * max(0.0, iy2 - iy1)
    total = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1])
    return 2.0 * inter / total if total > 0 else 0.0


def grid_overlap_counts(a, b, cell=1.0):
    """Rasterize two boxes on a regular grid and count covered cells.

    A cell is covered when its center lies inside the box. Returns
    (cells_a, cells_b, cells_intersection).
    """
    x_lo = math.floor(min(a[0], b[0]))
    x_hi = math.ceil(max(a[2], b[2]))
    y_lo = math.floor(min(a[1], b[1]))
    y_hi = math.ceil(max(a[3], b[3]))
    na = nb = ni = 0
    steps_x = int(round((x_hi - x_lo) / cell))
    steps_y = int(round((y_hi - y_lo) / cell))
    for i in range(steps_x):
        cx = x_lo + (i + 0.5) * cell
        for j in range(steps_y):
            cy = y_lo + (j + 0.5) * cell
            in_a = a[0] <= cx <= a[2] and a[1] <= cy <= a[3]
            in_b = b[0] <= cx <= b[2] and b[1] <= cy <= b[3]
            na += in_a
            nb += in_b
            ni += in_a and in_b
    return na, nb, ni


def grid_iou(a, b, cell=1.0):
    na, nb, ni = grid_overlap_counts(a, b, cell)
    union = na + nb - ni
    return ni / union if union > 0 else 0.0


def grid_dice(a, b, cell=1.0):
    na, nb, ni = grid_overlap_counts(a, b, cell)
    return 2.0 * ni / (na + nb) if na + nb > 0 else 0.0


def oracle_nms(boxes, scores, iou_threshold):
    """Greedy NMS by exhaustive re-scan of the remaining candidate list."""
    alive = list(range(len(boxes)))
    kept = []
    while alive:
        best = alive[0]
        for i in alive[1:]:
            if scores[i] > scores[best]:
                best = i
        kept.append(best)
        alive = [i for i in alive if i != best and scalar_iou(boxes[i], boxes[best]) <= iou_threshold]
    return kept


def oracle_order(scores):
    """Descending score, ties by lower index."""
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def oracle_greedy_match(proposal_boxes, gt_boxes, iou_threshold):
    hit = [False] * len(gt_boxes)
    for p in range(len(proposal_boxes)):
        best_g, best_iou = -1, 0.0
        for g in range(len(gt_boxes)):
            if hit[g]:
                continue
            v = scalar_iou(proposal_boxes[p], gt_boxes[g])
            if v > best_iou:
                best_g, best_iou = g, v
        if best_g >= 0 and best_iou >= iou_threshold:
            hit[best_g] = True
    return hit


def oracle_recall_budget(
    proposal_boxes,
    proposal_scores,
    gt_boxes,
    gt_seen,
    k,
    iou_threshold=0.5,
    exclude_seen=True,
    seen_iou=0.5,
):
    """Budgeted recall over unseen GTs; returns (hits, n_unseen)."""
    n_unseen = sum(1 for s in gt_seen if not s)
    if n_unseen == 0:
        return 0, 0
    matched = [False] * len(gt_boxes)
    hits = 0
    used = 0
    for p in oracle_order(proposal_scores):
        if used >= k:
            break
        best_g, best_iou = -1, 0.0
        for g in range(len(gt_boxes)):
            if matched[g]:
                continue
            v = scalar_iou(proposal_boxes[p], gt_boxes[g])
            if v > best_iou:
                best_g, best_iou = g, v
        if exclude_seen and best_g >= 0 and gt_seen[best_g] and best_iou >= seen_iou:
            matched[best_g] = True
            continue
        used += 1
        if best_g >= 0 and not gt_seen[best_g] and best_iou >= iou_threshold:
            matched[best_g] = True
            hits += 1
    return hits, n_unseen


def oracle_ar(images, k, iou_thresholds=(0.5,), exclude_seen=True, seen_iou=0.5):
    """images: list of (p_boxes, p_scores, gt_boxes, gt_seen) tuples."""
    per_t = []
    for t in iou_thresholds:
        hits = total = 0
        for p_boxes, p_scores, gt_boxes, gt_seen in images:
            h, n = oracle_recall_budget(
                p_boxes, p_scores, gt_boxes, gt_seen, k, t, exclude_seen, seen_iou
            )
            hits += h
            total += n
        per_t.append(hits / total if total > 0 else float("nan"))
    return sum(per_t) / len(per_t)


def oracle_auc(curve):
    ks = sorted(curve)
    logs = [math.log10(k) for k in ks]
    area = 0.0
    for i in range(len(ks) - 1):
        area += (curve[ks[i]] + curve[ks[i + 1]]) / 2.0 * (logs[i + 1] - logs[i])
    return area / (logs[-1] - logs[0])


def _long_side(box):
    return max(box[2] - box[0], box[3] - box[1])


def oracle_ap(
    images,
    iou_thresholds,
    size_range=(0.0, math.inf),
    max_detections=100,
):
    """Exhaustive precision-recall sweep AP at each IoU threshold.

    images: list of (det_boxes, det_scores, gt_boxes) tuples. Mirrors the
    documented matching conventions: detections in descending score order
    (ties by index) prefer the best unmatched in-range GT, then the best
    unmatched out-of-range GT (detection dropped), and unmatched detections
    outside the size range are dropped.
    """
    lo, hi = size_range
    prepared = []
    n_gt = 0
    for image_id, (det_boxes, det_scores, gt_boxes) in enumerate(images):
        order = oracle_order(det_scores)[:max_detections]
        det_boxes = [det_boxes[i] for i in order]
        det_scores = [det_scores[i] for i in order]
        gt_ignore = [not (lo <= _long_side(g) < hi) for g in gt_boxes]
        n_gt += sum(1 for ig in gt_ignore if not ig)
        prepared.append((image_id, det_boxes, det_scores, gt_boxes, gt_ignore))

    out = {}
    for t in iou_thresholds:
        records = []
        for image_id, det_boxes, det_scores, gt_boxes, gt_ignore in prepared:
            matched = [False] * len(gt_boxes)
            for p in oracle_order(det_scores):
                best_g, best_iou = -1, 0.0
                best_ig, best_ig_iou = -1, 0.0
                for g in range(len(gt_boxes)):
                    if matched[g]:
                        continue
                    v = scalar_iou(det_boxes[p], gt_boxes[g])
                    if v < t:
                        continue
                    if gt_ignore[g]:
                        if v > best_ig_iou:
                            best_ig, best_ig_iou = g, v
                    elif v > best_iou:
                        best_g, best_iou = g, v
                if best_g >= 0:
                    matched[best_g] = True
                    records.append((det_scores[p], image_id, p, True))
                elif best_ig >= 0:
                    matched[best_ig] = True
                else:
                    if lo <= _long_side(det_boxes[p]) < hi:
                        records.append((det_scores[p], image_id, p, False))
        if n_gt == 0:
            out[t] = float("nan")
            continue
        records.sort(key=lambda r: (-r[0], r[1], r[2]))
        tp = 0
        points = []
        for i, (_, _, _, is_tp) in enumerate(records):
            tp += int(is_tp)
            points.append((tp / n_gt, tp / (i + 1)))
        ap_vals = []
        for i in range(101):
            r = i / 100.0
            best = 0.0
            for rec, prec in points:
                if rec >= r and prec > best:
                    best = prec
            ap_vals.append(best)
        out[t] = sum(ap_vals) / 101.0
    return out
