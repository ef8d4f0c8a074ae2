"""Slow reference AP used only to cross-check :mod:`wsgn.evaluator`.

Deliberately shares no code with the evaluator: plain lists, explicit
overlap arithmetic, and an envelope read off at every recall level k/n.
"""
from __future__ import annotations

MAX_DETECTIONS = 20


class InstanceTooLarge(ValueError):
    pass


def _overlap(a0, a1, b0, b1):
    lo = a0 if a0 > b0 else b0
    hi = a1 if a1 < b1 else b1
    if hi <= lo:
        return 0.0
    return (hi - lo) / ((a1 - a0) + (b1 - b0) - (hi - lo))


def brute_force_ap(dets, gts, iou_thr):
    """AP by explicit simulation; empty ground truth is defined as AP 0."""
    if len(dets) > MAX_DETECTIONS:
        raise InstanceTooLarge(f"{len(dets)} detections; the oracle accepts at most {MAX_DETECTIONS}")
    n = len(gts)
    if n == 0:
        return 0.0

    # selection sort on (confidence desc, start asc, video, position)
    remaining = list(range(len(dets)))
    order = []
    while remaining:
        pick = remaining[0]
        for i in remaining[1:]:
            a, b = dets[i], dets[pick]
            ka = (-a.confidence, a.start, a.video_id, i)
            kb = (-b.confidence, b.start, b.video_id, pick)
            if ka < kb:
                pick = i
        order.append(pick)
        remaining.remove(pick)

    taken = [False] * n
    hits = 0
    curve = []  # (recall, precision) after each rank
    for rank, i in enumerate(order, start=1):
        d = dets[i]
        best_j, best_v = None, None
        for j in range(n):
            g = gts[j]
            if taken[j] or g.video_id != d.video_id:
                continue
            v = _overlap(d.start, d.end, g.start, g.end)
            if best_v is None or v > best_v:
                best_j, best_v = j, v
        if best_j is not None and best_v >= iou_thr:
            taken[best_j] = True
            hits += 1
        curve.append((hits / n, hits / rank))

    total = 0.0
    for k in range(1, n + 1):
        level = k / n
        best = 0.0
        for r, p in curve:
            if r >= level - 1e-15 and p > best:
                best = p
        total += best / n
    return total
