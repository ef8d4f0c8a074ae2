"""Training loops, temporal augmentation, checkpoints and inference."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import model as wm
from .datagen import Dataset, FeatureSequence, FormatError, Segment, decode_matrix64, encode_matrix64
from .diffcore import SGD
from .model import ModelConfig, ModelParams

log = logging.getLogger(__name__)

MODES = ("naive", "wsgn", "supervised")
CHECKPOINT_MAGIC = b"WSGNCK01"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    sub_batches: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005
    temporal_stride: int = 5
    max_start_offset: int = 15
    mode: str = "wsgn"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.temporal_stride < 1:
            raise ValueError("temporal_stride must be >= 1")
        if self.max_start_offset < 0:
            raise ValueError("max_start_offset must be >= 0")
        if self.batch_size < 1 or self.sub_batches < 1:
            raise ValueError("batch_size and sub_batches must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def subsample(video: FeatureSequence, stride: int, offset: int) -> FeatureSequence:
    """Keep frames ``offset, offset+stride, ...``; segments are remapped onto the kept frames."""
    T = video.num_frames
    offset = min(offset, T - 1)
    feats = video.features[offset::stride]
    n = feats.shape[0]
    segs = []
    for s in video.gt_segments:
        # first kept index i with offset + i*stride >= frame
        lo = max(0, -(-(int(s.start) - offset) // stride))
        hi = min(n, -(-(int(s.end) - offset) // stride))
        if hi > lo:
            segs.append(Segment(s.class_id, lo, hi, s.confidence, s.video_id))
    return FeatureSequence(video.id, feats, video.labels, segs, video.fps / stride, video.feature_path)


@dataclass
class TrainState:
    params: ModelParams
    optimizer: SGD
    rng: np.random.Generator
    epoch: int = 0
    losses: list[float] = field(default_factory=list)


def _video_step(video, params, mcfg, mode, rng) -> float:
    if mode == "supervised":
        loss, _ = wm.supervised_forward_backward(
            video.features, video.labels, video.frame_labels(), params, mcfg, rng, training=True
        )
        return loss
    loss, _, _ = wm.weak_forward_backward(
        video.features, video.labels, params, mcfg, rng, training=True, naive=mode == "naive"
    )
    return loss


def _split(n: int, parts: int) -> list[range]:
    parts = min(parts, n)
    bounds = [round(i * n / parts) for i in range(parts + 1)]
    return [range(bounds[i], bounds[i + 1]) for i in range(parts)]


def init_state(mcfg: ModelConfig, tcfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(tcfg.seed)
    params = ModelParams.init(mcfg, rng)
    opt = SGD(tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay)
    return TrainState(params, opt, rng)


def run_epoch(state: TrainState, dataset: Dataset, mcfg: ModelConfig, tcfg: TrainConfig) -> float:
    rng, params = state.rng, state.params
    videos = dataset.videos
    order = rng.permutation(len(videos))
    offsets = rng.integers(0, tcfg.max_start_offset + 1, size=len(videos))
    batch_losses = []
    for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
        batch = order[start:start + tcfg.batch_size]
        total = {k: np.zeros_like(p.value) for k, p in params.items()}
        for chunk in _split(len(batch), tcfg.sub_batches):
            params.zero_grad()
            for i in chunk:
                vid = videos[batch[i]]
                clip = subsample(vid, tcfg.temporal_stride, int(offsets[start + i]))
                loss = _video_step(clip, params, mcfg, tcfg.mode, rng)
                if not np.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {state.epoch + 1}, batch {b}, video {vid.id}")
                batch_losses.append(loss)
            for k, p in params.items():
                total[k] += p.grad
        for k, p in params.items():
            p.grad[...] = total[k] / len(batch)
        state.optimizer.step(params)
    state.epoch += 1
    mean_loss = float(np.mean(batch_losses)) if batch_losses else 0.0
    state.losses.append(mean_loss)
    return mean_loss


def train(dataset: Dataset, mcfg: ModelConfig, tcfg: TrainConfig, state: TrainState | None = None, on_epoch=None):
    """Train for ``tcfg.epochs`` total epochs (resuming from ``state`` if given).

    Returns ``(params, losses)``; ``on_epoch(state)`` is called after every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if tcfg.mode == "supervised":
        missing = [v.id for v in dataset if not v.gt_segments and v.labels.any()]
        if missing:
            raise ValueError(f"supervised mode needs ground-truth segments; missing for {missing[:3]}")
    state = state or init_state(mcfg, tcfg)
    while state.epoch < tcfg.epochs:
        loss = run_epoch(state, dataset, mcfg, tcfg)
        log.debug("epoch %d loss %.6f", state.epoch, loss)
        if on_epoch is not None:
            on_epoch(state)
    return state.params, list(state.losses)


def infer(dataset: Dataset, params: ModelParams, mcfg: ModelConfig, mode: str = "wsgn") -> dict[str, wm.ForwardTrace]:
    """Full-length, dropout-free forward pass per video."""
    naive = mode in ("naive", "supervised")
    return {v.id: wm.forward(v.features, params, mcfg, training=False, naive=naive) for v in dataset}


# --- checkpoints ---------------------------------------------------------------


def _jsonable_state(state: dict) -> dict:
    return json.loads(json.dumps(state, default=int))


def save_checkpoint(path, state: TrainState, mcfg: ModelConfig, tcfg: TrainConfig) -> None:
    """Index JSON followed by one ``WSGND1`` double-precision container per matrix."""
    names = sorted(state.params)
    entries, blobs = [], []
    for kind, store in (("param", {k: state.params[k].value for k in names}), ("velocity", state.optimizer.velocity)):
        for k in sorted(store):
            arr = store[k]
            entries.append({"kind": kind, "name": k, "shape": list(arr.shape)})
            blobs.append(encode_matrix64(arr.reshape(1, -1) if arr.ndim == 1 else arr))
    index = {
        "epoch": state.epoch,
        "losses": state.losses,
        "rng": _jsonable_state(state.rng.bit_generator.state),
        "model_config": asdict(mcfg),
        "train_config": asdict(tcfg),
        "entries": entries,
    }
    head = json.dumps(index, sort_keys=True).encode()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs))


def load_checkpoint(path):
    """Returns ``(state, model_config, train_config)``."""
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    (n,) = struct.unpack_from("<I", buf, 8)
    index = json.loads(buf[12:12 + n])
    offset = 12 + n
    mc = index["model_config"]
    mc["enabled_normalizations"] = tuple(mc["enabled_normalizations"])
    mcfg = ModelConfig(**mc)
    tcfg = TrainConfig(**index["train_config"])
    params, velocity = ModelParams(), {}
    for e in index["entries"]:
        arr, offset = decode_matrix64(buf, offset)
        arr = arr.reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = wm.ParamBlock(arr)
        else:
            velocity[e["name"]] = arr
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes at offset {offset} in {path}")
    rng = np.random.default_rng()
    rng.bit_generator.state = index["rng"]
    opt = SGD(tcfg.learning_rate, tcfg.momentum, tcfg.weight_decay, velocity)
    return TrainState(params, opt, rng, index["epoch"], list(index["losses"])), mcfg, tcfg


def format_loss_curve(losses) -> str:
    return "epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses, start=1))


def resume_config(tcfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(tcfg, **overrides)
