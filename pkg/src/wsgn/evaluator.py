"""Temporal IoU, greedy matching, average precision and the two mAP protocols."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import Segment

THUMOS_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


def interval_iou(a: Segment, b: Segment) -> float:
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def _ranked(dets: Sequence[Segment]) -> list[Segment]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].start, dets[i].video_id, i))
    return [dets[i] for i in order]


def envelope_ap(tp_flags, n_pos: int) -> float:
    """All-point interpolated AP from per-rank TP flags."""
    if n_pos == 0 or len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    ranks = np.arange(1, len(tp) + 1, dtype=np.float64)
    precision = tp / ranks
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    hits = np.asarray(tp_flags, dtype=bool)
    return float(envelope[hits].sum() / n_pos)


def match_detections(dets: Sequence[Segment], gts: Sequence[Segment], iou_thr: float) -> list[bool]:
    """Greedy matching in rank order; returns TP flags aligned with the ranked detections."""
    by_video = defaultdict(list)
    for g in gts:
        by_video[g.video_id].append(g)
    used = {vid: [False] * len(gs) for vid, gs in by_video.items()}
    flags = []
    for d in _ranked(dets):
        cands = by_video.get(d.video_id, [])
        best, best_iou = -1, -1.0
        for j, g in enumerate(cands):
            if used[d.video_id][j]:
                continue
            iou = interval_iou(d, g)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_thr:
            used[d.video_id][best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(dets: Sequence[Segment], gts: Sequence[Segment], iou_thr: float) -> float:
    return envelope_ap(match_detections(dets, gts, iou_thr), len(gts))


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    ap: dict[int, list[float]]
    mean_ap: list[float]
    num_dets: dict[int, int] = field(default_factory=dict)
    num_gts: dict[int, int] = field(default_factory=dict)

    def map_at(self, thr: float) -> float:
        for t, v in zip(self.thresholds, self.mean_ap):
            if abs(t - thr) < 1e-9:
                return v
        raise KeyError(thr)

    def to_csv(self) -> str:
        rows = ["class," + ",".join(f"{t:g}" for t in self.thresholds)]
        for q in sorted(self.ap):
            rows.append(f"{q}," + ",".join(f"{v:.6f}" for v in self.ap[q]))
        rows.append("mAP," + ",".join(f"{v:.6f}" for v in self.mean_ap))
        return "\n".join(rows) + "\n"


def detection_map(dets: Sequence[Segment], gts: Sequence[Segment], thresholds=THUMOS_THRESHOLDS) -> EvalReport:
    """THUMOS-style mAP: per class, detections pooled across videos, matched within videos."""
    thresholds = tuple(float(t) for t in thresholds)
    dets_by_class, gts_by_class = defaultdict(list), defaultdict(list)
    for d in dets:
        dets_by_class[d.class_id].append(d)
    for g in gts:
        gts_by_class[g.class_id].append(g)
    classes = sorted(gts_by_class)
    ap = {q: [average_precision(dets_by_class[q], gts_by_class[q], t) for t in thresholds] for q in classes}
    if classes:
        mean_ap = [float(np.mean([ap[q][i] for q in classes])) for i in range(len(thresholds))]
    else:
        mean_ap = [0.0] * len(thresholds)
    return EvalReport(
        thresholds,
        ap,
        mean_ap,
        {q: len(dets_by_class[q]) for q in sorted(set(dets_by_class) | set(classes))},
        {q: len(gts_by_class[q]) for q in classes},
    )


# --- timepoint localization --------------------------------------------------------


@dataclass
class TimepointScores:
    """Scores at sampled frames of one video; ``gt_segments`` in seconds."""

    video_id: str
    scores: np.ndarray
    frame_indices: Sequence[int]
    fps: float
    gt_segments: Sequence[Segment]


@dataclass
class LocReport:
    ap: dict[int, float]
    mean_ap: float
    num_positive: dict[int, int] = field(default_factory=dict)

    def to_csv(self) -> str:
        rows = ["class,AP"] + [f"{q},{v:.6f}" for q, v in sorted(self.ap.items())]
        rows.append(f"mAP,{self.mean_ap:.6f}")
        return "\n".join(rows) + "\n"


def tied_envelope_ap(scores, positives) -> float:
    """Envelope AP where tied scores form one operating point (a constant ranker scores the prevalence)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    tp, fp = np.cumsum(p), np.cumsum(~p)
    # last index of each block of equal scores
    ends = np.flatnonzero(np.concatenate([s[1:] != s[:-1], [True]]))
    tp, fp = tp[ends].astype(np.float64), fp[ends].astype(np.float64)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    d_recall = np.diff(np.concatenate([[0.0], recall]))
    return float((d_recall * envelope).sum())


def localization_map(videos: Sequence[TimepointScores], num_classes: int) -> LocReport:
    labels, scores = [], []
    for v in videos:
        sc = np.asarray(v.scores, dtype=np.float64)
        if sc.shape != (len(v.frame_indices), num_classes):
            raise ValueError(f"{v.video_id}: scores {sc.shape} do not match {len(v.frame_indices)} timepoints x {num_classes}")
        times = np.asarray(v.frame_indices, dtype=np.float64) / v.fps
        lab = np.zeros(sc.shape, dtype=bool)
        for g in v.gt_segments:
            lab[:, g.class_id] |= (times >= g.start) & (times < g.end)
        labels.append(lab)
        scores.append(sc)
    if not videos:
        return LocReport({}, 0.0, {})
    labels = np.concatenate(labels)
    scores = np.concatenate(scores)
    counts = {q: int(labels[:, q].sum()) for q in range(num_classes)}
    ap = {q: tied_envelope_ap(scores[:, q], labels[:, q]) for q in range(num_classes) if counts[q] > 0}
    mean_ap = float(np.mean(list(ap.values()))) if ap else 0.0
    return LocReport(ap, mean_ap, {q: n for q, n in counts.items() if n > 0})
