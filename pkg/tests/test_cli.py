import json

import numpy as np
import pytest

from wsgn import cli
from wsgn.datagen import read_manifest, read_matrix64, write_matrix64
from wsgn.detector import write_detections
from wsgn.trainer import load_checkpoint

TINY = {"train_videos": 12, "test_videos": 5, "epochs": 2, "batch_size": 8, "sub_batches": 2}


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "conf.json"
    p.write_text(json.dumps(TINY))
    return str(p)


@pytest.fixture
def data(tmp_path, conf):
    assert cli.main(["gen", "--config", conf, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_writes_valid_manifests(data, capsys):
    tr = read_manifest(data / "train.jsonl")
    te = read_manifest(data / "test.jsonl")
    assert len(tr) == 12 and len(te) == 5 and tr.num_classes == 5


def test_gen_summary_on_stdout(tmp_path, conf, capsys):
    run("gen", "--config", conf, "--out", tmp_path / "d")
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "split,videos,classes,segments" and out[1].startswith("train,12,5,")


def test_gen_is_byte_identical(tmp_path, conf):
    run("gen", "--config", conf, "--out", tmp_path / "a")
    run("gen", "--config", conf, "--out", tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 + 17
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_flag_overrides_file(tmp_path, conf):
    run("gen", "--config", conf, "--out", tmp_path / "a")
    run("gen", "--config", conf, "--seed", 9, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() != (tmp_path / "b" / "train.jsonl").read_bytes()


def test_invalid_config_exits_nonzero(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"min_frames": 50, "max_frames": 40}))
    assert run("gen", "--config", bad, "--out", tmp_path / "x") != 0
    assert "min_frames" in capsys.readouterr().err
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert run("gen", "--config", bad) != 0
    assert "no_such_key" in capsys.readouterr().err
    bad.write_text("[1, 2]")
    assert run("gen", "--config", bad) != 0


def test_build_config_routes_shared_keys():
    cfg = cli.build_config({"seed": 4, "fps": 2.0, "hidden_dim": 7, "enabled_normalizations": "zloc,gloc"}, "o")
    assert cfg.synth.seed == 4 and cfg.train.seed == 4
    assert cfg.synth.fps == 2.0 and cfg.detector.fps == 2.0
    assert cfg.model == {"hidden_dim": 7, "enabled_normalizations": ("zloc", "gloc")}
    with pytest.raises(cli.CliError, match="foo"):
        cli.build_config({"enabled_normalizations": "zloc,foo"}, "o")


def test_train_naive_and_zloc(tmp_path, conf, data):
    assert run("train", "--config", conf, "--manifest", data / "train.jsonl", "--mode", "naive", "--out", tmp_path / "n") == 0
    state, _, tcfg = load_checkpoint(tmp_path / "n" / "checkpoint.bin")
    assert tcfg.mode == "naive" and all(np.isfinite(state.losses))
    assert (tmp_path / "n" / "loss_curve.csv").read_text().startswith("epoch,loss\n1,")
    assert run("train", "--config", conf, "--manifest", data / "train.jsonl", "--normalizations", "zloc",
               "--out", tmp_path / "z") == 0
    _, mcfg, _ = load_checkpoint(tmp_path / "z" / "checkpoint.bin")
    assert mcfg.enabled_normalizations == ("zloc",)


def test_train_twice_byte_identical(tmp_path, conf, data):
    for d in ("a", "b"):
        assert run("train", "--config", conf, "--manifest", data / "train.jsonl", "--out", tmp_path / d) == 0
    for f in ("checkpoint.bin", "loss_curve.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_resume_is_bitwise(tmp_path, conf, data):
    m = data / "train.jsonl"
    run("train", "--config", conf, "--manifest", m, "--epochs", 4, "--out", tmp_path / "full")
    run("train", "--config", conf, "--manifest", m, "--epochs", 2, "--out", tmp_path / "half")
    assert run("train", "--config", conf, "--manifest", m, "--epochs", 4,
               "--resume", tmp_path / "half" / "checkpoint.bin", "--out", tmp_path / "resumed") == 0
    a = (tmp_path / "full" / "checkpoint.bin").read_bytes()
    b = (tmp_path / "resumed" / "checkpoint.bin").read_bytes()
    # the half run saved epochs=2 in its config; the resumed run carries epochs=4 like the full run
    assert a == b
    assert (tmp_path / "full" / "loss_curve.csv").read_text() == (tmp_path / "resumed" / "loss_curve.csv").read_text()


@pytest.fixture
def trained(tmp_path, conf, data):
    run("train", "--config", conf, "--manifest", data / "train.jsonl", "--out", tmp_path / "run")
    return tmp_path / "run" / "checkpoint.bin"


def test_detect_dumps_components(tmp_path, conf, data, trained):
    out = tmp_path / "det"
    assert run("detect", "--config", conf, "--checkpoint", trained, "--manifest", data / "test.jsonl",
               "--out", out, "--dump-components") == 0
    test = read_manifest(data / "test.jsonl")
    for v in test:
        comp = {n: read_matrix64(out / "components" / v.id / f"{n}.bin") for n in "XPZLSG"}
        for m in comp.values():
            assert m.shape == (v.num_frames, 5)
        fused = read_matrix64(out / "scores" / f"{v.id}.bin")
        assert np.abs(fused - comp["G"] * comp["P"]).max() <= 1e-12
        np.testing.assert_allclose(comp["G"], (comp["Z"] + comp["L"] + comp["S"]) / 3, atol=1e-15)


def test_detect_threshold_above_max_gives_empty_file(tmp_path, conf, data, trained):
    out = tmp_path / "det"
    assert run("detect", "--config", conf, "--checkpoint", trained, "--manifest", data / "test.jsonl",
               "--threshold", 1.1, "--out", out) == 0
    assert (out / "detections.csv").read_text() == ""


def test_eval_perfect_detections(tmp_path, data, capsys):
    test = read_manifest(data / "test.jsonl", load_features=False)
    gts = [s for v in test for s in v.segments_seconds()]
    for g in gts:
        g.confidence = 0.9
    write_detections(tmp_path / "perfect.csv", gts)
    grid = "0.1,0.2,0.3,0.4,0.5,0.6,0.7"
    assert run("eval", "--manifest", data / "test.jsonl", "--detections", tmp_path / "perfect.csv",
               "--iou-thresholds", grid, "--out", tmp_path / "ev") == 0
    lines = (tmp_path / "ev" / "eval.csv").read_text().splitlines()
    assert lines[0].split(",") == ["class"] + grid.split(",")
    assert lines[-1] == "mAP," + ",".join(["1.000000"] * 7)
    assert capsys.readouterr().out.splitlines()[-1] == lines[-1]


def test_eval_localization_on_indicator_scores(tmp_path, data):
    test = read_manifest(data / "test.jsonl")
    sd = tmp_path / "scores"
    sd.mkdir()
    for v in test:
        write_matrix64(sd / f"{v.id}.bin", v.frame_labels())
    assert run("eval", "--manifest", data / "test.jsonl", "--localization", "--scores", sd, "--out", tmp_path / "ev") == 0
    assert (tmp_path / "ev" / "localization.csv").read_text().splitlines()[-1] == "mAP,1.000000"


def test_eval_needs_input(tmp_path, data):
    assert run("eval", "--manifest", data / "test.jsonl", "--out", tmp_path) != 0
    assert run("eval", "--manifest", data / "test.jsonl", "--localization", "--out", tmp_path) != 0


def test_ablate_table(tmp_path, conf, capsys):
    assert run("ablate", "--config", conf, "--out", tmp_path / "ab", "--epochs", 1) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert lines[0] == "method,mAP@0.1,mAP@0.2,mAP@0.3,mAP@0.4,mAP@0.5,loc_mAP"
    names = [ln.split(",")[0] for ln in lines[1:]]
    assert names == ["naive", "sloc", "zloc", "gloc", "sloc+gloc", "zloc+gloc", "complete", "supervised",
                     "Gap", "Improvement"]
    rows = {ln.split(",")[0]: [float(x) for x in ln.split(",")[1:]] for ln in lines[1:]}
    for got, sup, comp in zip(rows["Gap"], rows["supervised"], rows["complete"]):
        assert got == pytest.approx(sup - comp, abs=0.011)
    for got, comp, nv in zip(rows["Improvement"], rows["complete"], rows["naive"]):
        assert got == pytest.approx(comp - nv, abs=0.011)


def test_ablate_row_matches_train_and_eval(tmp_path, conf, capsys):
    """An ablation row equals gen + train + detect + eval with the same config."""
    assert run("ablate", "--config", conf, "--out", tmp_path / "ab", "--variants", "zloc") == 0
    row = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()[1].split(",")
    run("gen", "--config", conf, "--out", tmp_path / "d")
    run("train", "--config", conf, "--manifest", tmp_path / "d" / "train.jsonl", "--normalizations", "zloc",
        "--out", tmp_path / "r")
    run("detect", "--config", conf, "--checkpoint", tmp_path / "r" / "checkpoint.bin",
        "--manifest", tmp_path / "d" / "test.jsonl", "--out", tmp_path / "det")
    run("eval", "--manifest", tmp_path / "d" / "test.jsonl", "--detections", tmp_path / "det" / "detections.csv",
        "--out", tmp_path / "ev")
    run("eval", "--manifest", tmp_path / "d" / "test.jsonl", "--localization", "--scores", tmp_path / "det" / "scores",
        "--out", tmp_path / "ev")
    det = (tmp_path / "ev" / "eval.csv").read_text().splitlines()[-1].split(",")[1:]
    loc = (tmp_path / "ev" / "localization.csv").read_text().splitlines()[-1].split(",")[1]
    assert [float(x) for x in row[1:6]] == pytest.approx([100 * float(x) for x in det], abs=0.006)
    assert float(row[6]) == pytest.approx(100 * float(loc), abs=0.006)


def test_gradcheck_command(capsys):
    assert run("gradcheck", "--instances", 5) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "block,max_rel_error"
    assert any(line.startswith("weak:global_scale,") for line in out)
    assert float(out[-1].split(",")[1]) < 1e-4


def test_gradcheck_negative_control(capsys):
    assert run("gradcheck", "--instances", 3, "--break-gradients") == 1
    captured = capsys.readouterr()
    assert "FAIL" in captured.err
    assert float(captured.out.splitlines()[-1].split(",")[1]) == pytest.approx(0.5, abs=1e-6)
