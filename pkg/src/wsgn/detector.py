"""Frame scores to timestamped detections."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Segment


@dataclass(frozen=True)
class DetectorConfig:
    score_threshold: float = 0.1
    min_duration: float = 1.0
    fps: float = 5.0

    def __post_init__(self):
        if self.min_duration < 0:
            raise ValueError("min_duration must be >= 0")
        if self.fps <= 0:
            raise ValueError("fps must be positive")


def _runs(mask: np.ndarray):
    """Yield ``(first, last_exclusive)`` for every maximal run of True."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return zip(edges[0::2], edges[1::2])


def extract_segments(scores: np.ndarray, config: DetectorConfig, video_id: str = "") -> list[Segment]:
    """Runs of frames scoring strictly above the threshold, kept if strictly longer than ``min_duration``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be T x C, got shape {scores.shape}")
    out = []
    for q in range(scores.shape[1]):
        col = scores[:, q]
        for first, stop in _runs(col > config.score_threshold):
            if (stop - first) / config.fps <= config.min_duration:
                continue
            out.append(Segment(q, first / config.fps, stop / config.fps, float(col[first:stop].mean()), video_id))
    return out


def sample_timepoints(T: int, K: int) -> list[int]:
    """``round(k (T-1) / (K-1))`` for k in 0..K-1, halves rounded up, in exact integer arithmetic."""
    if T < 1 or K < 1:
        raise ValueError("T and K must be >= 1")
    if K == 1 or T == 1:
        return [0] * K
    return [(2 * k * (T - 1) + (K - 1)) // (2 * (K - 1)) for k in range(K)]


def score_timepoints(scores: np.ndarray, K: int = 25) -> np.ndarray:
    return np.asarray(scores)[sample_timepoints(len(scores), K)]


def format_detections(dets_by_video) -> str:
    """Detection file body: ``video_id,class_id,start,end,confidence`` per line."""
    lines = []
    for d in dets_by_video:
        lines.append(f"{d.video_id},{d.class_id},{d.start:.6f},{d.end:.6f},{d.confidence:.6f}")
    return "".join(line + "\n" for line in lines)


def write_detections(path, dets) -> None:
    Path(path).write_text(format_detections(dets))


def read_detections(path) -> list[Segment]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        vid, q, s, e, c = parts
        out.append(Segment(int(q), float(s), float(e), float(c), vid))
    return out
