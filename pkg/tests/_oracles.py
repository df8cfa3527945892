"""Brute-force reference implementations used to cross-check the library.

Everything here is written the slow, obvious way (explicit loops, no
vectorization, no imports from latentpatch) so that agreement between
these functions and the library is meaningful evidence rather than the
same code saying the same thing twice.
"""

import math


def oracle_iou(a, b):
    """IoU via corner arithmetic; degenerate boxes overlap nothing."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    ax1, ay1 = ax0 + aw, ay0 + ah
    bx1, by1 = bx0 + bw, by0 + bh
    ox = min(ax1, bx1) - max(ax0, bx0)
    oy = min(ay1, by1) - max(ay0, by0)
    if ox <= 0 or oy <= 0:
        return 0.0
    inter = ox * oy
    return inter / (aw * ah + bw * bh - inter)


def oracle_common_loss(batch, target_class):
    """Mean over images of the top target-class score; empty image = 0.

    batch: list of lists of (box, p_obj, p_cls_list) tuples.
    """
    total = 0.0
    for dets in batch:
        best = 0.0
        first = True
        for (_box, p_obj, p_cls) in dets:
            s = p_obj * p_cls[target_class]
            if first or s > best:
                best = s
                first = False
        if not first:
            total += best
    return total / len(batch)


def oracle_iou_loss(batch, gt_boxes, threshold, target_class):
    """Strictly-above-threshold overlap filter, then per-image mean score."""
    total = 0.0
    for dets, gts in zip(batch, gt_boxes):
        kept_scores = []
        for (box, p_obj, p_cls) in dets:
            best_overlap = 0.0
            for g in gts:
                v = oracle_iou(box, g)
                if v > best_overlap:
                    best_overlap = v
            if best_overlap > threshold:
                kept_scores.append(p_obj * p_cls[target_class])
        if kept_scores:
            s = 0.0
            for v in kept_scores:
                s += v
            total += s / len(kept_scores)
    return total / len(batch)


def oracle_match(preds, gts, conf_threshold, iou_threshold):
    """Greedy one-to-one matching, confidence descending (ties by index).

    preds: list of (box, confidence). Returns a list, one entry per
    prediction in the original order: the matched gt index or None.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    taken = [False] * len(gts)
    out = [None] * len(preds)
    for i in order:
        box, conf = preds[i]
        if conf <= conf_threshold:
            continue
        best_j, best_v = None, iou_threshold
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = oracle_iou(box, g)
            if v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            taken[best_j] = True
            out[i] = best_j
    return out


def oracle_ap(image_preds, image_gts, iou_threshold):
    """Average precision, all-point interpolation, per-image greedy matching.

    image_preds: per image, list of (box, confidence).
    image_gts: per image, list of boxes.
    Matching imitates evaluation with the confidence gate disabled, then
    walks the ranked list accumulating TP/FP and integrates the running
    maximum of precision over recall.
    """
    n_gt = 0
    for gts in image_gts:
        n_gt += len(gts)
    if n_gt == 0:
        raise ValueError("no ground truth")

    labelled = []  # (confidence, is_tp) across the whole dataset
    for preds, gts in zip(image_preds, image_gts):
        matches = oracle_match(preds, gts, -1.0, iou_threshold)
        for (box, conf), m in zip(preds, matches):
            labelled.append((conf, m is not None))
    labelled.sort(key=lambda t: -t[0])

    tp = 0
    fp = 0
    points = []  # (recall, precision) after each prediction
    for conf, is_tp in labelled:
        if is_tp:
            tp += 1
        else:
            fp += 1
        points.append((tp / n_gt, tp / (tp + fp)))
    if tp == 0:
        return 0.0

    # area under the envelope: for every recall step, the best precision
    # achieved at that recall or beyond
    area = 0.0
    prev_recall = 0.0
    for k, (r, _p) in enumerate(points):
        if r == prev_recall:
            continue
        best = 0.0
        for r2, p2 in points[k:]:
            if p2 > best:
                best = p2
        area += (r - prev_recall) * best
        prev_recall = r
    return area


def oracle_inversion_pivots(z0, depth, alpha_ladder, eps_fn, formula):
    """Hand-unrolled inversion recurrence for a scalar or array latent.

    eps_fn(z, step_index) must return the noise prediction used at that
    rung. Returns [z0, z1, ..., z_depth] (deepest last).
    """
    zs = [z0]
    z = z0
    for t in range(depth):
        ab_lo = alpha_ladder[t]
        ab_hi = alpha_ladder[t + 1]
        eps = eps_fn(z, t)
        ratio = math.sqrt(ab_hi / ab_lo)
        spread = math.sqrt(1.0 / ab_hi - 1.0) - math.sqrt(1.0 / ab_lo - 1.0)
        coeff = spread * (math.sqrt(ab_hi) if formula == "standard" else 1.0)
        z = ratio * z + coeff * eps
        zs.append(z)
    return zs
