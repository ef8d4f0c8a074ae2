"""Synthetic untrimmed videos and the on-disk feature/manifest formats.

Feature container (little-endian)::

    b"WSGNF1" | uint32 T | uint32 M | T*M float32, row-major

Manifest: one JSON object per line with ``id``, ``feature_path`` (relative to
the manifest's directory unless absolute), ``labels`` (class indices),
``segments`` (``[class, start_frame, end_frame]``, end exclusive), ``fps``
and, on the first line only, a ``{"num_classes": C, "split": ...}`` header.
"""
from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"WSGNF1"
DOUBLE_MAGIC = b"WSGND1"
_HEADER = struct.Struct("<6sII")


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class ManifestWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 5
    feature_dim: int = 16
    train_videos: int = 200
    test_videos: int = 50
    min_frames: int = 40
    max_frames: int = 120
    fps: float = 5.0
    min_actions: int = 0
    max_actions: int = 2
    min_segment_seconds: float = 2.0
    max_segment_seconds: float = 6.0
    amplitude: float = 3.0
    background_noise: float = 1.0
    action_noise: float = 1.0
    temporal_correlation: float = 0.9
    context_strength: float = 0.0
    num_contexts: int = 2
    seed: int = 0

    def validate(self) -> None:
        def bad(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.num_classes < 1:
            bad("num_classes", "must be >= 1")
        if self.feature_dim < 1:
            bad("feature_dim", "must be >= 1")
        if self.train_videos < 0 or self.test_videos < 0:
            bad("train_videos/test_videos", "must be >= 0")
        if self.min_frames < 2:
            bad("min_frames", "must be >= 2")
        if self.min_frames > self.max_frames:
            bad("min_frames", f"min_frames={self.min_frames} exceeds max_frames={self.max_frames}")
        if self.fps <= 0:
            bad("fps", "must be positive")
        if not 0 <= self.min_actions <= self.max_actions:
            bad("min_actions", "need 0 <= min_actions <= max_actions")
        if not 0 < self.min_segment_seconds <= self.max_segment_seconds:
            bad("min_segment_seconds", "need 0 < min_segment_seconds <= max_segment_seconds")
        if self.amplitude < 0:
            bad("amplitude", "must be >= 0")
        if self.background_noise < 0 or self.action_noise < 0:
            bad("background_noise/action_noise", "must be >= 0")
        if self.context_strength < 0:
            bad("context_strength", "must be >= 0")
        if self.num_contexts < 1:
            bad("num_contexts", "must be >= 1")
        if not 0 <= self.temporal_correlation < 1:
            bad("temporal_correlation", "must lie in [0, 1)")
        shortest = self.min_actions * self._frames(self.min_segment_seconds)
        if shortest > self.min_frames:
            bad("min_actions", f"{self.min_actions} segments of >= {self.min_segment_seconds}s cannot fit in {self.min_frames} frames")

    def _frames(self, seconds: float) -> int:
        return max(1, int(round(seconds * self.fps)))


@dataclass
class Segment:
    """A class-labelled interval ``[start, end)``; units depend on context (frames or seconds)."""

    class_id: int
    start: float
    end: float
    confidence: float = 1.0
    video_id: str = ""


@dataclass
class FeatureSequence:
    id: str
    features: np.ndarray
    labels: np.ndarray
    gt_segments: list[Segment] = field(default_factory=list)
    fps: float = 5.0
    feature_path: str | None = None

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    def frame_labels(self) -> np.ndarray:
        yt = np.zeros((self.num_frames, self.labels.shape[0]))
        for seg in self.gt_segments:
            yt[int(seg.start):int(seg.end), seg.class_id] = 1.0
        return yt

    def segments_seconds(self) -> list[Segment]:
        return [Segment(s.class_id, s.start / self.fps, s.end / self.fps, 1.0, self.id) for s in self.gt_segments]


@dataclass
class Dataset:
    videos: list[FeatureSequence]
    split: str = "train"
    fps: float = 5.0
    num_classes: int = 0

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)


def class_directions(num_classes: int, feature_dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit rows; orthonormal when ``feature_dim >= num_classes``."""
    g = rng.standard_normal((feature_dim, num_classes))
    if feature_dim >= num_classes:
        q, r = np.linalg.qr(g)
        return (q * np.sign(np.diag(r))).T
    return (g / np.linalg.norm(g, axis=0)).T


def _spread(T, lengths, rng):
    # distribute the free frames into n+1 gaps
    free = T - int(sum(lengths))
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    spans, pos = [], 0
    for gap, length in zip(gaps, lengths):
        pos += int(gap)
        spans.append((pos, pos + int(length)))
        pos += int(length)
    return spans


def _place_segments(T, n, cfg: SynthConfig, rng):
    lo, hi = cfg._frames(cfg.min_segment_seconds), cfg._frames(cfg.max_segment_seconds)
    if n * lo > T:
        raise ConfigError(f"cannot place {n} segments of >= {lo} frames in a {T}-frame video")
    for _ in range(100):
        lengths = np.minimum(rng.integers(lo, hi + 1, size=n), T)
        if lengths.sum() <= T:
            return _spread(T, lengths, rng)
    # long segments rarely fit: cap each length by the room left for the rest
    lengths, used = [], 0
    for i in range(n):
        room = T - used - (n - i - 1) * lo
        lengths.append(int(rng.integers(lo, min(hi, room) + 1)))
        used += lengths[-1]
    return _spread(T, lengths, rng)


def smooth_noise(T: int, M: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """AR(1) noise along time with a stationary N(0, 1) marginal per entry."""
    e = rng.standard_normal((T, M))
    if rho == 0:
        return e
    out = np.empty_like(e)
    out[0] = e[0]
    k = np.sqrt(1.0 - rho * rho)
    for t in range(1, T):
        out[t] = rho * out[t - 1] + k * e[t]
    return out


def _make_video(vid, cfg: SynthConfig, dirs, rng) -> FeatureSequence:
    C = cfg.num_classes
    T = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
    feats = smooth_noise(T, cfg.feature_dim, cfg.temporal_correlation, rng) * cfg.background_noise
    n = int(rng.integers(cfg.min_actions, cfg.max_actions + 1))
    spans = _place_segments(T, n, cfg, rng) if n else []
    classes = rng.integers(0, C, size=len(spans))
    segments = []
    for (s, e), q in zip(spans, classes):
        noise = smooth_noise(e - s, cfg.feature_dim, cfg.temporal_correlation, rng) * cfg.action_noise
        feats[s:e] = cfg.amplitude * dirs[q] + noise
        segments.append(Segment(int(q), s, e, 1.0, vid))
    if len(spans) and cfg.context_strength > 0:
        # scene of the first action; classes q and q + k*num_contexts share a scene
        scene = int(classes[0]) % cfg.num_contexts
        feats += cfg.context_strength * dirs[C + scene]
    # keep in-memory values identical to what the float32 container stores
    feats = feats.astype(np.float32).astype(np.float64)
    labels = np.zeros(cfg.num_classes)
    for seg in segments:
        labels[seg.class_id] = 1.0
    return FeatureSequence(vid, feats, labels, segments, cfg.fps)


def generate(config: SynthConfig) -> tuple[Dataset, Dataset]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_dirs = config.num_classes + (config.num_contexts if config.context_strength > 0 else 0)
    dirs = class_directions(n_dirs, config.feature_dim, rng)
    splits = []
    for split, n in (("train", config.train_videos), ("test", config.test_videos)):
        videos = [_make_video(f"{split}_{i:04d}", config, dirs, rng) for i in range(n)]
        splits.append(Dataset(videos, split, config.fps, config.num_classes))
    return splits[0], splits[1]


# --- feature containers --------------------------------------------------------


def _pack(magic: bytes, matrix, dtype: str) -> bytes:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise FormatError(f"expected a 2-d matrix, got shape {m.shape}")
    if m.shape[0] >= 2**32 or m.shape[1] >= 2**32:
        raise FormatError(f"shape {m.shape} overflows the uint32 header")
    return _HEADER.pack(magic, m.shape[0], m.shape[1]) + np.ascontiguousarray(m, dtype=dtype).tobytes()


def _unpack(buf: bytes, magic: bytes, dtype: str, offset: int = 0):
    """Decode one container at ``offset``; returns ``(matrix, next_offset)``."""
    if len(buf) - offset < _HEADER.size:
        raise FormatError(f"truncated header at offset {offset}")
    got, t, m = _HEADER.unpack_from(buf, offset)
    if got != magic:
        raise FormatError(f"bad magic {got!r} at offset {offset}, expected {magic!r}")
    itemsize = np.dtype(dtype).itemsize
    start = offset + _HEADER.size
    need = t * m * itemsize
    if len(buf) - start < need:
        raise FormatError(
            f"truncated data at offset {start}: header declares {t}x{m} "
            f"({need} bytes) but only {len(buf) - start} remain"
        )
    data = np.frombuffer(buf, dtype=dtype, count=t * m, offset=start).reshape(t, m)
    return data, start + need


def encode_features(matrix) -> bytes:
    return _pack(FEATURE_MAGIC, matrix, "<f4")


def decode_features(buf: bytes) -> np.ndarray:
    data, end = _unpack(buf, FEATURE_MAGIC, "<f4")
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes at offset {end}")
    return data.astype(np.float64)


def write_features(path, matrix) -> None:
    Path(path).write_bytes(encode_features(matrix))


def read_features(path) -> np.ndarray:
    """Read a single-precision container, upcast to float64."""
    return decode_features(Path(path).read_bytes())


def encode_matrix64(matrix) -> bytes:
    """Double-precision variant of the feature container (magic ``WSGND1``)."""
    return _pack(DOUBLE_MAGIC, matrix, "<f8")


def decode_matrix64(buf: bytes, offset: int = 0):
    data, end = _unpack(buf, DOUBLE_MAGIC, "<f8", offset)
    return data.copy(), end


def write_matrix64(path, matrix) -> None:
    Path(path).write_bytes(encode_matrix64(matrix))


def read_matrix64(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    data, end = decode_matrix64(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes at offset {end}")
    return data


# --- manifests ------------------------------------------------------------------


def _record(v: FeatureSequence) -> dict:
    return {
        "id": v.id,
        "feature_path": v.feature_path,
        "labels": [int(i) for i in np.flatnonzero(v.labels)],
        "segments": [[int(s.class_id), int(s.start), int(s.end)] for s in v.gt_segments],
        "fps": float(v.fps),
    }


def write_manifest(path, dataset: Dataset, write_feature_files: bool = True) -> None:
    """Write the manifest; feature files go to ``<manifest stem>/<id>.bin`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    feat_dir = path.parent / path.stem
    lines = [json.dumps({"num_classes": dataset.num_classes, "split": dataset.split, "fps": dataset.fps})]
    for v in dataset.videos:
        if write_feature_files:
            feat_dir.mkdir(parents=True, exist_ok=True)
            v.feature_path = f"{path.stem}/{v.id}.bin"
            write_features(path.parent / v.feature_path, v.features)
        lines.append(json.dumps(_record(v)))
    path.write_text("\n".join(lines) + "\n")


def _validate_record(rec: dict, num_classes: int, lineno: int) -> None:
    for q in rec["labels"]:
        if not 0 <= q < num_classes:
            raise ConfigError(f"line {lineno}: label index {q} outside [0, {num_classes})")
    for q, s, e in rec["segments"]:
        if not 0 <= q < num_classes:
            raise ConfigError(f"line {lineno}: segment class {q} outside [0, {num_classes})")
        if e <= s:
            raise ConfigError(f"line {lineno}: segment end {e} <= start {s}")
    if rec["segments"]:
        seg_classes = {q for q, _, _ in rec["segments"]}
        missing = sorted(set(rec["labels"]) - seg_classes)
        if missing:
            warnings.warn(f"line {lineno} ({rec['id']}): labels {missing} have no segments", ManifestWarning)


def read_manifest(path, load_features: bool = True) -> Dataset:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        return Dataset([], "unknown", 5.0, 0)
    header = json.loads(lines[0])
    if "num_classes" not in header:
        raise FormatError(f"{path}: first line must be a header with num_classes")
    C = int(header["num_classes"])
    videos = []
    for lineno, line in enumerate(lines[1:], start=2):
        rec = json.loads(line)
        _validate_record(rec, C, lineno)
        labels = np.zeros(C)
        labels[rec["labels"]] = 1.0
        fps = float(rec["fps"])
        segs = [Segment(int(q), int(s), int(e), 1.0, rec["id"]) for q, s, e in rec["segments"]]
        feats = None
        fp = rec.get("feature_path")
        if load_features and fp is not None:
            full = Path(fp) if Path(fp).is_absolute() else path.parent / fp
            feats = read_features(full)
            for s in segs:
                if s.end > feats.shape[0]:
                    raise ConfigError(f"line {lineno}: segment end {s.end} beyond {feats.shape[0]} frames")
        videos.append(FeatureSequence(rec["id"], feats, labels, segs, fps, fp))
    return Dataset(videos, header.get("split", "unknown"), float(header.get("fps", 5.0)), C)
