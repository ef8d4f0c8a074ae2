"""Train and score every model variant on one train/test split."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .datagen import Dataset
from .detector import DetectorConfig, extract_segments, sample_timepoints
from .evaluator import THUMOS_THRESHOLDS, EvalReport, LocReport, TimepointScores, detection_map, localization_map
from .model import ModelConfig
from .trainer import TrainConfig, infer, train

log = logging.getLogger(__name__)

# (row name, training mode, normalizations)
VARIANTS = (
    ("naive", "naive", ("zloc", "gloc", "sloc")),
    ("sloc", "wsgn", ("sloc",)),
    ("zloc", "wsgn", ("zloc",)),
    ("gloc", "wsgn", ("gloc",)),
    ("sloc+gloc", "wsgn", ("gloc", "sloc")),
    ("zloc+gloc", "wsgn", ("zloc", "gloc")),
    ("complete", "wsgn", ("zloc", "gloc", "sloc")),
    ("supervised", "supervised", ("zloc", "gloc", "sloc")),
)
SINGLE = ("sloc", "zloc", "gloc")


@dataclass
class VariantResult:
    name: str
    detection: EvalReport
    localization: LocReport
    losses: list[float]
    seconds: float


def evaluate_traces(traces, dataset: Dataset, det_cfg: DetectorConfig, thresholds=THUMOS_THRESHOLDS, timepoints: int = 25):
    """Detection and localization reports from per-video forward traces."""
    dets, gts, tps = [], [], []
    for v in dataset:
        F = traces[v.id].fused
        dets += extract_segments(F, replace(det_cfg, fps=v.fps), v.id)
        gts += v.segments_seconds()
        idx = sample_timepoints(len(F), timepoints)
        tps.append(TimepointScores(v.id, F[idx], idx, v.fps, v.segments_seconds()))
    return detection_map(dets, gts, thresholds), localization_map(tps, dataset.num_classes)


def run_variant(name, train_set, test_set, model_kw=None, train_cfg=None, det_cfg=None, thresholds=THUMOS_THRESHOLDS):
    row = {n: (m, norms) for n, m, norms in VARIANTS}
    if name not in row:
        raise ValueError(f"unknown variant {name!r}; choose from {[v[0] for v in VARIANTS]}")
    mode, norms = row[name]
    M = train_set.videos[0].features.shape[1]
    mcfg = ModelConfig(M, train_set.num_classes, enabled_normalizations=norms, **(model_kw or {}))
    tcfg = replace(train_cfg or TrainConfig(), mode=mode)
    t0 = time.perf_counter()
    params, losses = train(train_set, mcfg, tcfg)
    traces = infer(test_set, params, mcfg, mode)
    det, loc = evaluate_traces(traces, test_set, det_cfg or DetectorConfig(), thresholds)
    secs = time.perf_counter() - t0
    log.info("%s: det mAP %s, loc mAP %.4f (%.1fs)", name, [round(v, 4) for v in det.mean_ap], loc.mean_ap, secs)
    return VariantResult(name, det, loc, losses, secs)


def run_ablation(train_set, test_set, names=None, **kw) -> dict[str, VariantResult]:
    names = names or [v[0] for v in VARIANTS]
    return {n: run_variant(n, train_set, test_set, **kw) for n in names}


def ablation_table(results: dict[str, VariantResult]) -> str:
    """One row per variant plus Gap (supervised - complete) and Improvement (complete - naive), in percent."""
    any_res = next(iter(results.values()))
    thresholds = any_res.detection.thresholds
    header = "method," + ",".join(f"mAP@{t:g}" for t in thresholds) + ",loc_mAP"
    rows = [header]

    def vals(r):
        return [100 * v for v in r.detection.mean_ap] + [100 * r.localization.mean_ap]

    for name, r in results.items():
        rows.append(name + "," + ",".join(f"{v:.2f}" for v in vals(r)))
    for label, a, b in (("Gap", "supervised", "complete"), ("Improvement", "complete", "naive")):
        if a in results and b in results:
            diff = np.subtract(vals(results[a]), vals(results[b]))
            rows.append(label + "," + ",".join(f"{v:.2f}" for v in diff))
    return "\n".join(rows) + "\n"
