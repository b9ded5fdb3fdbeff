import json

import numpy as np
import pytest

from fastenet import formats, netgraph, synthdata, training
from fastenet.evaluation import MatchResult

SMALL = synthdata.SceneConfig(height=256, width=512, count_range=(4, 6), seed=0)


@pytest.fixture(scope="module")
def spec():
    return netgraph.build_fastenet()


@pytest.fixture(scope="module")
def small_scenes():
    train, val = synthdata.build_dataset(SMALL, 4, 0.5)
    return [s for _, s in train], [s for _, s in val]


def quick_config(**kw):
    base = dict(lr=1e-3, epochs=1, crops_per_scene=4, crop_size=64, batch_size=4,
                hard_epochs=1, full_epochs=1, mining_cycles=3, seed=0)
    base.update(kw)
    return training.TrainConfig(**base)


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------


def test_make_target_rules():
    assert training.make_target(np.zeros((16, 24), np.uint8)).sum() == 0
    m = np.zeros((16, 16), np.uint8)
    m[:8, :8] = 1
    np.testing.assert_array_equal(training.make_target(m), [[1, 0], [0, 0]])
    block = np.zeros((8, 8), np.uint8)
    block.flat[:31] = 1
    assert training.make_target(block)[0, 0] == 0
    block.flat[31] = 1
    assert training.make_target(block)[0, 0] == 1
    with pytest.raises(ValueError):
        training.make_target(np.zeros((12, 16)))


def test_make_target_inverts_upsampling():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = (rng.random((6, 9)) > 0.5).astype(np.float32)
        up = np.kron(t, np.ones((8, 8))).astype(np.uint8)
        np.testing.assert_array_equal(training.make_target(up), t)


def test_image_to_input():
    x = training.image_to_input(np.array([[0, 255]], np.uint8))
    assert x.shape == (1, 1, 1, 2) and x.dtype == np.float32
    np.testing.assert_array_equal(x[0, 0], [[0.0, 1.0]])


def test_crop_batches_match_scene(small_scenes):
    train, _ = small_scenes
    cs = training.build_crops(train, 5, 64, seed=1)
    x, t = cs.batch(np.arange(len(cs)))
    assert x.shape == (10, 1, 64, 64) and t.shape == (10, 1, 8, 8)
    si, y, xx = cs.index[3]
    np.testing.assert_array_equal(x[3, 0], train[si].image[y:y + 64, xx:xx + 64] / np.float32(255))
    assert len(cs.subset([1])) == 5


# ---------------------------------------------------------------------------
# Epochs
# ---------------------------------------------------------------------------


def test_zero_lr_and_decay_leave_parameters(spec, small_scenes):
    train, _ = small_scenes
    crops = training.build_crops(train, 4, 64, 0)
    ws = netgraph.init_weights(spec, 0)
    before = ws.copy()
    cfg = quick_config(lr=0.0, weight_decay=0.0)
    ws, loss = training.train_epoch(spec, ws, crops, cfg)
    assert np.isfinite(loss)
    for k in ws.trainable_keys():
        assert ws[k].tobytes() == before[k].tobytes()
    # Running statistics are state, not parameters: they do move.
    assert not np.array_equal(ws[(1, "bn_mean")], before[(1, "bn_mean")])


def test_epoch_determinism(spec, small_scenes):
    train, _ = small_scenes
    crops = training.build_crops(train, 4, 64, 0)
    a, la = training.train_epoch(spec, netgraph.init_weights(spec, 0), crops, quick_config())
    b, lb = training.train_epoch(spec, netgraph.init_weights(spec, 0), crops, quick_config())
    assert la == lb and a.equal(b)


def test_shapes_survive_updates(spec, small_scenes):
    train, _ = small_scenes
    crops = training.build_crops(train, 4, 64, 0)
    ws = netgraph.init_weights(spec, 0)
    shapes = {k: ws[k].shape for k in ws.keys()}
    training.train_epoch(spec, ws, crops, quick_config())
    assert {k: ws[k].shape for k in ws.keys()} == shapes
    netgraph.check_weights(spec, ws)


def test_divergence_reports_batch(spec, small_scenes):
    train, _ = small_scenes
    crops = training.build_crops(train, 4, 64, 0)
    ws = netgraph.init_weights(spec, 0)
    ws[(11, "weight")][:] = np.nan
    with pytest.raises(training.TrainingDiverged, match="batch 0.*norms"):
        training.train_epoch(spec, ws, crops, quick_config())


def _fastener_crops(scenes, n, size):
    """Crops centred on labelled fasteners, so every crop has foreground."""
    idx = []
    for si, sc in enumerate(scenes):
        h, w = sc.image.shape
        for b in sc.boxes:
            cy, cx = (b.y_min + b.y_max) // 2, (b.x_min + b.x_max) // 2
            y = int(np.clip(cy - size // 2, 0, h - size)) // 8 * 8
            x = int(np.clip(cx - size // 2, 0, w - size)) // 8 * 8
            idx.append((si, y, x))
    return training.CropSet(list(scenes), np.array(idx[:n], np.int64), size)


def test_overfit_ten_crops(spec, small_scenes):
    train, _ = small_scenes
    crops = _fastener_crops(train, 10, 64)
    assert len(crops) == 10
    cfg = quick_config(lr=3e-3, batch_size=10, weight_decay=0.0)
    tr = training.Trainer(spec, netgraph.init_weights(spec, 0), cfg)
    losses = [tr.train_epoch(crops) for _ in range(500)]
    assert losses[-1] <= losses[0] / 100, (losses[0], losses[-1])


# ---------------------------------------------------------------------------
# Validation and mining
# ---------------------------------------------------------------------------


def test_perfect_saliency_oracle(spec, small_scenes):
    _, val = small_scenes
    maps = [training.make_target(sc.mask) for sc in val]
    assert training.validate(spec, None, val, 0.5, maps=maps) == (1.0, 1.0)


def test_untrained_net_has_low_recall(spec, small_scenes):
    _, val = small_scenes
    p, r = training.validate(spec, netgraph.init_weights(spec, 0), val, 0.5)
    assert r <= 0.1


def test_hard_predicate():
    assert not training.is_hard(MatchResult(5, 0, 0))
    assert training.is_hard(MatchResult(3, 0, 2))
    assert not training.is_hard(MatchResult(3, 1, 1))
    assert training.is_hard(MatchResult(3, 1, 1), mode="sum")
    assert training.is_hard(MatchResult(3, 2, 0), mode="sum")
    with pytest.raises(ValueError):
        training.is_hard(MatchResult(0, 0, 0), mode="other")


def test_mine_hard_on_precomputed_maps(spec, small_scenes):
    train, _ = small_scenes
    good = training.make_target(train[0].mask)
    empty = np.zeros_like(training.make_target(train[1].mask))
    assert training.mine_hard(spec, None, train, maps=[good, empty]) == [1]


def _phases(history):
    return [r.phase for r in history.records]


def test_schedule_with_empty_mining_degenerates(spec, small_scenes, monkeypatch):
    train, val = small_scenes
    monkeypatch.setattr(training, "mine_hard", lambda *a, **k: [])
    cfg = quick_config(hard_epochs=2, full_epochs=2)
    _, hist = training.train(spec, train, val, cfg)
    assert _phases(hist) == ["initial"] + ["full-1"] * 2 + ["full-2"] * 2 + ["full-3"] * 2
    kinds = [e["kind"] for e in hist.events]
    assert kinds.count("mining") == 3 and kinds.count("skip-hard-phase") == 3


def test_schedule_runs_hard_phases(spec, small_scenes, monkeypatch):
    train, val = small_scenes
    seen = []

    def fake_mine(*a, **k):
        seen.append(1)
        return [0]

    monkeypatch.setattr(training, "mine_hard", fake_mine)
    cfg = quick_config(hard_epochs=2, full_epochs=2)
    _, hist = training.train(spec, train, val, cfg)
    assert len(seen) == 3
    assert _phases(hist) == ["initial"] + sum(
        ([f"hard-{c}"] * 2 + [f"full-{c}"] * 2 for c in (1, 2, 3)), [])
    hard = [r for r in hist.records if r.phase.startswith("hard")]
    assert all(r.n_crops == cfg.crops_per_scene for r in hard)


def test_train_is_deterministic_and_logged(spec, small_scenes, tmp_path):
    train, val = small_scenes
    cfg = quick_config(mining_cycles=1)
    wa, ha = training.train(spec, train, val, cfg, out_dir=tmp_path / "a")
    wb, hb = training.train(spec, train, val, cfg, out_dir=tmp_path / "b")
    assert ha.key() == hb.key() and wa.equal(wb)
    lines = (tmp_path / "a" / "history.jsonl").read_text().splitlines()
    assert len(lines) == len(ha.records)
    assert "wall_time" not in json.loads(lines[0])
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    for name in ("last.fnm", "best.fnm", "epoch_001.fnm"):
        assert (tmp_path / "a" / name).exists()
    _, last = formats.load_model(tmp_path / "a" / "last.fnm")
    assert last.equal(wa)
    assert all(np.isfinite(r.loss) for r in ha.records)


def test_config_validation():
    with pytest.raises(ValueError):
        training.TrainConfig(lr=-1e-3).validate()
    with pytest.raises(ValueError):
        training.TrainConfig(mining_mode="any").validate()
    with pytest.raises(ValueError):
        training.TrainConfig(hard_epochs=-1).validate()
