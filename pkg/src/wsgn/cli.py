"""``wsgn`` command line: gen, train, detect, eval, ablate, gradcheck.

Every command takes ``--config PATH`` (one JSON object), ``--out DIR`` and
``--seed N``.  Config keys are the fields of SynthConfig, ModelConfig,
TrainConfig and DetectorConfig in one flat record; ``seed`` and ``fps`` feed
every section that has them.  File values are applied first, then flags.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import ablation, gradcheck
from .datagen import (
    ConfigError,
    FormatError,
    SynthConfig,
    generate,
    read_manifest,
    read_matrix64,
    write_manifest,
    write_matrix64,
)
from .detector import DetectorConfig, extract_segments, read_detections, sample_timepoints, write_detections
from .evaluator import THUMOS_THRESHOLDS, TimepointScores, detection_map, localization_map
from .model import NORMALIZATIONS, ModelConfig
from .trainer import (
    TrainConfig,
    TrainingError,
    format_loss_curve,
    infer,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)

log = logging.getLogger("wsgn")

MODEL_KEYS = ("hidden_dim", "dropout_rate", "enabled_normalizations", "epsilon_std")
SECTIONS = {
    "synth": {f.name for f in dataclasses.fields(SynthConfig)},
    "model": set(MODEL_KEYS),
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "detector": {f.name for f in dataclasses.fields(DetectorConfig)},
}
ALL_KEYS = set().union(*SECTIONS.values())


class CliError(Exception):
    pass


@dataclasses.dataclass
class RunConfig:
    synth: SynthConfig
    model: dict
    train: TrainConfig
    detector: DetectorConfig
    out: Path


def load_record(path) -> dict:
    if path is None:
        return {}
    try:
        rec = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: not a JSON record ({e})") from e
    if not isinstance(rec, dict):
        raise CliError(f"{path}: config must be a single JSON object")
    return rec


def build_config(record: dict, out) -> RunConfig:
    unknown = sorted(set(record) - ALL_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    pick = lambda sec: {k: v for k, v in record.items() if k in SECTIONS[sec]}
    model = pick("model")
    if "enabled_normalizations" in model:
        model["enabled_normalizations"] = _norms(model["enabled_normalizations"])
    try:
        return RunConfig(
            SynthConfig(**pick("synth")),
            model,
            TrainConfig(**pick("train")),
            DetectorConfig(**pick("detector")),
            Path(out) if out else Path("."),
        )
    except (TypeError, ValueError) as e:
        raise CliError(str(e)) from e


def _norms(value) -> tuple:
    names = value.split(",") if isinstance(value, str) else list(value)
    names = [n.strip() for n in names if n.strip()]
    bad = [n for n in names if n not in NORMALIZATIONS]
    if bad:
        raise CliError(f"enabled_normalizations: unknown {bad}; choose from {list(NORMALIZATIONS)}")
    return tuple(names)


def _thresholds(text) -> tuple:
    try:
        return tuple(float(t) for t in text.split(","))
    except ValueError as e:
        raise CliError(f"--iou-thresholds: {e}") from e


def _overrides(args) -> dict:
    rec = load_record(args.config)
    if args.seed is not None:
        rec["seed"] = args.seed
    for key in ("mode", "epochs", "learning_rate", "score_threshold", "min_duration"):
        v = getattr(args, key, None)
        if v is not None:
            rec[key] = v
    if getattr(args, "normalizations", None):
        rec["enabled_normalizations"] = args.normalizations
    return rec


# --- commands ---------------------------------------------------------------------


def cmd_gen(cfg: RunConfig) -> dict:
    train_set, test_set = generate(cfg.synth)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg.out / "train.jsonl", train_set)
    write_manifest(cfg.out / "test.jsonl", test_set)
    summary = {}
    for ds in (train_set, test_set):
        summary[ds.split] = {
            "videos": len(ds),
            "classes": ds.num_classes,
            "segments": sum(len(v.gt_segments) for v in ds),
        }
    return summary


def _model_config(dataset, cfg: RunConfig) -> ModelConfig:
    if len(dataset) == 0:
        raise CliError("manifest has no videos")
    M = dataset.videos[0].features.shape[1]
    return ModelConfig(M, dataset.num_classes, **cfg.model)


def cmd_train(cfg: RunConfig, manifest, resume=None) -> Path:
    """Writes ``checkpoint.bin`` and ``loss_curve.csv`` under ``cfg.out``."""
    dataset = read_manifest(manifest)
    if resume is not None:
        state, mcfg, saved = load_checkpoint(resume)
        tcfg = dataclasses.replace(saved, epochs=cfg.train.epochs)
    else:
        mcfg, tcfg = _model_config(dataset, cfg), cfg.train
        state = init_state(mcfg, tcfg)
    train(dataset, mcfg, tcfg, state)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out / "checkpoint.bin"
    save_checkpoint(ckpt, state, mcfg, tcfg)
    (cfg.out / "loss_curve.csv").write_text(format_loss_curve(state.losses))
    return ckpt


def cmd_detect(cfg: RunConfig, checkpoint, manifest, dump_components=False) -> Path:
    """Detections plus per-video fused scores (``scores/<id>.bin``, double-precision containers)."""
    state, mcfg, tcfg = load_checkpoint(checkpoint)
    dataset = read_manifest(manifest)
    traces = infer(dataset, state.params, mcfg, tcfg.mode)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "scores").mkdir(exist_ok=True)
    dets = []
    for v in dataset:
        tr = traces[v.id]
        F = tr.fused
        write_matrix64(cfg.out / "scores" / f"{v.id}.bin", F)
        dets += extract_segments(F, dataclasses.replace(cfg.detector, fps=v.fps), v.id)
        if dump_components:
            d = cfg.out / "components" / v.id
            d.mkdir(parents=True, exist_ok=True)
            for name in ("X", "P", "Z", "L", "S", "G"):
                m = getattr(tr, name)
                if m is not None:
                    write_matrix64(d / f"{name}.bin", m)
    path = cfg.out / "detections.csv"
    write_detections(path, dets)
    return path


def cmd_eval(cfg: RunConfig, manifest, detections=None, scores_dir=None, thresholds=THUMOS_THRESHOLDS,
             timepoints: int = 25) -> Path:
    dataset = read_manifest(manifest, load_features=False)
    cfg.out.mkdir(parents=True, exist_ok=True)
    if scores_dir is not None:
        vids = []
        for v in dataset:
            F = read_matrix64(Path(scores_dir) / f"{v.id}.bin")
            idx = sample_timepoints(len(F), timepoints)
            vids.append(TimepointScores(v.id, F[idx], idx, v.fps, v.segments_seconds()))
        report = localization_map(vids, dataset.num_classes)
        path = cfg.out / "localization.csv"
    else:
        if detections is None:
            raise CliError("eval needs --detections or --localization --scores DIR")
        gts = [s for v in dataset for s in v.segments_seconds()]
        report = detection_map(read_detections(detections), gts, thresholds)
        path = cfg.out / "eval.csv"
    path.write_text(report.to_csv())
    return path


def cmd_ablate(cfg: RunConfig, thresholds=THUMOS_THRESHOLDS, names=None) -> Path:
    train_set, test_set = generate(cfg.synth)
    # each variant fixes its own normalizations
    model_kw = {k: v for k, v in cfg.model.items() if k != "enabled_normalizations"}
    results = ablation.run_ablation(
        train_set, test_set, names=names, model_kw=model_kw, train_cfg=cfg.train,
        det_cfg=cfg.detector, thresholds=thresholds,
    )
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "ablation.csv"
    path.write_text(ablation.ablation_table(results))
    return path


def cmd_gradcheck(n_instances=50, seed=0, break_gradients=False, tol=1e-4):
    worst, per_block = gradcheck.run_suite(n_instances, seed, break_gradients=break_gradients)
    return worst, per_block, worst < tol


# --- argument parsing ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON record of config overrides")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="wsgn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="write synthetic train/test manifests")

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--manifest", required=True)
    t.add_argument("--mode", choices=("naive", "wsgn", "supervised"))
    t.add_argument("--normalizations", help="comma list, e.g. zloc,gloc")
    t.add_argument("--epochs", type=int)
    t.add_argument("--learning-rate", type=float, dest="learning_rate")
    t.add_argument("--resume", help="checkpoint to continue from")

    d = sub.add_parser("detect", parents=[common], help="score videos and extract segments")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--manifest", required=True)
    d.add_argument("--threshold", type=float, dest="score_threshold")
    d.add_argument("--min-duration", type=float, dest="min_duration")
    d.add_argument("--dump-components", action="store_true")

    e = sub.add_parser("eval", parents=[common], help="detection or localization mAP")
    e.add_argument("--manifest", required=True)
    e.add_argument("--detections")
    e.add_argument("--iou-thresholds", default=",".join(str(t) for t in THUMOS_THRESHOLDS))
    e.add_argument("--localization", action="store_true")
    e.add_argument("--scores", help="directory of fused score containers from detect")
    e.add_argument("--timepoints", type=int, default=25)

    a = sub.add_parser("ablate", parents=[common], help="train and score every variant")
    a.add_argument("--iou-thresholds", default=",".join(str(t) for t in THUMOS_THRESHOLDS))
    a.add_argument("--variants", help="comma list of variants (default: all)")
    a.add_argument("--epochs", type=int)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--instances", type=int, default=50)
    g.add_argument("--break-gradients", action="store_true", help="negative control: double every gradient")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _dispatch(args)
    except (CliError, ConfigError, FormatError, TrainingError, ValueError, OSError) as e:
        print(f"wsgn {args.command}: error: {e}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gradcheck":
        worst, per_block, ok = cmd_gradcheck(args.instances, args.seed or 0, args.break_gradients)
        print("block,max_rel_error")
        for k in sorted(per_block):
            print(f"{k},{per_block[k]:.3e}")
        print(f"max,{worst:.3e}")
        print("PASS" if ok else "FAIL", file=sys.stderr)
        return 0 if ok else 1

    cfg = build_config(_overrides(args), args.out)
    if args.command == "gen":
        summary = cmd_gen(cfg)
        print("split,videos,classes,segments")
        for split, s in summary.items():
            print(f"{split},{s['videos']},{s['classes']},{s['segments']}")
    elif args.command == "train":
        ckpt = cmd_train(cfg, args.manifest, args.resume)
        print(ckpt)
    elif args.command == "detect":
        print(cmd_detect(cfg, args.checkpoint, args.manifest, args.dump_components))
    elif args.command == "eval":
        if args.localization and not args.scores:
            raise CliError("--localization needs --scores DIR")
        path = cmd_eval(
            cfg, args.manifest, args.detections, args.scores if args.localization else None,
            _thresholds(args.iou_thresholds), args.timepoints,
        )
        sys.stdout.write(path.read_text())
    elif args.command == "ablate":
        names = [n.strip() for n in args.variants.split(",")] if args.variants else None
        path = cmd_ablate(cfg, _thresholds(args.iou_thresholds), names)
        sys.stdout.write(path.read_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
