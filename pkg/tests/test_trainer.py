import numpy as np
import pytest

from wsgn import trainer as tr
from wsgn.datagen import Dataset, FeatureSequence, Segment, SynthConfig, generate
from wsgn.model import ModelConfig
from wsgn.trainer import TrainConfig, TrainingError

SMALL = SynthConfig(train_videos=16, test_videos=4)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def mcfg_for(ds, **kw):
    return ModelConfig(ds.videos[0].features.shape[1], ds.num_classes, **kw)


def video(T=10, M=2):
    feats = np.arange(T * M, dtype=float).reshape(T, M)
    return FeatureSequence("v", feats, np.array([1.0, 0.0]), [Segment(0, 2, 7, 1.0, "v")], 5.0)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.batch_size, c.sub_batches, c.weight_decay, c.temporal_stride, c.max_start_offset) == (
        80, 128, 32, 0.0005, 5, 15)
    assert c.momentum == 0.9 and c.mode == "wsgn"
    with pytest.raises(ValueError):
        TrainConfig(mode="strong")
    with pytest.raises(ValueError):
        TrainConfig(temporal_stride=0)


# --- subsample ------------------------------------------------------------------


def test_subsample_examples():
    v = video()
    same = tr.subsample(v, 1, 0)
    assert np.array_equal(same.features, v.features)
    assert [(s.start, s.end) for s in same.gt_segments] == [(2, 7)]
    assert tr.subsample(v, 5, 0).features[:, 0].tolist() == [0, 10]
    assert tr.subsample(v, 5, 3).features[:, 0].tolist() == [6, 16]
    one = tr.subsample(v, 5, 40)
    assert one.num_frames == 1 and one.features[0, 0] == 18
    assert tr.subsample(v, 5, 0).fps == 1.0


def test_subsample_remaps_segments():
    v = video(T=20)
    sub = tr.subsample(v, 3, 1)  # kept frames 1,4,7,10,...
    # frames 2..6 of the original contain kept frames 4 (index 1)
    assert [(s.start, s.end) for s in sub.gt_segments] == [(1, 2)]
    yt = sub.frame_labels()
    kept = np.arange(1, 20, 3)
    assert np.array_equal(yt[:, 0], v.frame_labels()[kept, 0])


# --- training --------------------------------------------------------------------


def test_zero_learning_rate_freezes_params(small):
    train_set, _ = small
    m = mcfg_for(train_set)
    tcfg = TrainConfig(epochs=2, learning_rate=0.0, batch_size=8, sub_batches=2)
    init = tr.init_state(m, tcfg)
    before = init.params.copy()
    params, _ = tr.train(train_set, m, tcfg, init)
    for k in before:
        assert np.array_equal(params[k].value, before[k].value)


def test_training_is_deterministic(small):
    train_set, _ = small
    m = mcfg_for(train_set)
    tcfg = TrainConfig(epochs=3, batch_size=8, sub_batches=4)
    p1, l1 = tr.train(train_set, m, tcfg)
    p2, l2 = tr.train(train_set, m, tcfg)
    assert l1 == l2
    for k in p1:
        assert p1[k].value.tobytes() == p2[k].value.tobytes()
    _, l3 = tr.train(train_set, m, TrainConfig(epochs=3, batch_size=8, sub_batches=4, seed=1))
    assert l3 != l1


@pytest.mark.parametrize("mode", tr.MODES)
def test_sub_batch_accumulation_invariance(small, mode):
    train_set, _ = small
    m = mcfg_for(train_set)
    results = []
    for sub in (1, 4, 16):
        params, _ = tr.train(train_set, m, TrainConfig(epochs=1, batch_size=16, sub_batches=sub, mode=mode))
        results.append(params)
    for other in results[1:]:
        for k in results[0]:
            np.testing.assert_allclose(other[k].value, results[0][k].value, atol=1e-10, rtol=0)


def test_resume_matches_uninterrupted(small, tmp_path):
    train_set, _ = small
    m = mcfg_for(train_set)
    full = TrainConfig(epochs=4, batch_size=8, sub_batches=2)
    straight = tr.init_state(m, full)
    tr.train(train_set, m, full, straight)

    half = tr.init_state(m, full)
    tr.train(train_set, m, tr.resume_config(full, epochs=2), half)
    tr.save_checkpoint(tmp_path / "half.bin", half, m, full)
    state, m2, t2 = tr.load_checkpoint(tmp_path / "half.bin")
    assert m2 == m and t2 == full and state.epoch == 2
    tr.train(train_set, m2, t2, state)

    tr.save_checkpoint(tmp_path / "a.bin", straight, m, full)
    tr.save_checkpoint(tmp_path / "b.bin", state, m, full)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_round_trip(small, tmp_path):
    train_set, _ = small
    m = mcfg_for(train_set, enabled_normalizations=("gloc",), hidden_dim=7)
    t = TrainConfig(epochs=1, batch_size=8, sub_batches=2, mode="wsgn")
    s = tr.init_state(m, t)
    tr.train(train_set, m, t, s)
    tr.save_checkpoint(tmp_path / "c.bin", s, m, t)
    back, m2, t2 = tr.load_checkpoint(tmp_path / "c.bin")
    assert m2 == m and t2 == t and back.losses == s.losses
    for k in s.params:
        assert back.params[k].value.tobytes() == s.params[k].value.tobytes()
        assert back.optimizer.velocity[k].tobytes() == s.optimizer.velocity[k].tobytes()
    assert back.rng.random() == s.rng.random()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(tr.FormatError, match="offset 0"):
        tr.load_checkpoint(tmp_path / "x.bin")


def test_loss_curve_format():
    text = tr.format_loss_curve([0.5, 0.1 + 0.2])
    assert text == "epoch,loss\n1,0.5\n2,0.30000000000000004\n"


def test_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty"):
        tr.train(Dataset([], num_classes=2), ModelConfig(2, 2), TrainConfig(epochs=1))


def test_supervised_needs_segments():
    v = FeatureSequence("v", np.zeros((5, 2)), np.array([1.0, 0.0]), [], 5.0)
    with pytest.raises(ValueError, match="ground-truth"):
        tr.train(Dataset([v], num_classes=2), ModelConfig(2, 2), TrainConfig(epochs=1, mode="supervised"))


def test_non_finite_loss_reports_location():
    vids = [FeatureSequence(f"v{i}", np.ones((6, 2)), np.array([1.0, 0.0]), [], 5.0) for i in range(3)]
    m, t = ModelConfig(2, 2), TrainConfig(epochs=1, batch_size=1)
    state = tr.init_state(m, t)
    state.params["cls.b2"].value[0] = np.nan
    with pytest.raises(TrainingError, match=r"epoch 1, batch 0, video v\d"):
        tr.train(Dataset(vids, num_classes=2), m, t, state)


# --- inference ----------------------------------------------------------------------


def test_infer(small):
    train_set, test_set = small
    m = mcfg_for(train_set)
    params, _ = tr.train(train_set, m, TrainConfig(epochs=1, batch_size=8))
    a = tr.infer(test_set, params, m)
    b = tr.infer(test_set, params, m)
    for v in test_set:
        ta, tb = a[v.id], b[v.id]
        assert ta.P.shape[0] == v.num_frames
        assert np.array_equal(ta.fused, tb.fused)
        np.testing.assert_allclose(ta.G, (ta.Z + ta.L + ta.S) / 3, atol=1e-15)
        np.testing.assert_array_equal(ta.fused, ta.G * ta.P)
    naive = tr.infer(test_set, params, m, mode="naive")
    for t in naive.values():
        assert np.array_equal(t.G, np.ones_like(t.P))


@pytest.fixture(scope="module")
def reference_losses():
    train_set, _ = generate(SynthConfig())
    _, losses = tr.train(train_set, mcfg_for(train_set), TrainConfig())
    return losses


def test_reference_training_makes_progress(reference_losses):
    assert len(reference_losses) == 80
    assert reference_losses[-1] < reference_losses[0]


def test_reference_loss_curve_monotone_after_smoothing(reference_losses):
    smooth = np.convolve(reference_losses, np.ones(5) / 5, mode="valid")
    rises = np.flatnonzero(np.diff(smooth) > 0)
    assert rises.size == 0, f"smoothed loss rises after epochs {(rises + 5).tolist()}"
